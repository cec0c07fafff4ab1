//! Naive retrieval metrics: quadratic rank counting, no sorting.

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// 1-based ranks of same-label items for query `q` of a leave-one-out set.
pub fn match_ranks(rows: &[Vec<f64>], labels: &[u32], q: usize) -> Vec<usize> {
    let before = |i: usize, j: usize| {
        let (di, dj) = (distance(&rows[q], &rows[i]), distance(&rows[q], &rows[j]));
        di < dj || (di == dj && i < j)
    };
    let mut ranks = Vec::new();
    for j in 0..rows.len() {
        if j == q || labels[j] != labels[q] {
            continue;
        }
        let ahead = (0..rows.len())
            .filter(|&i| i != q && i != j && before(i, j))
            .count();
        ranks.push(ahead + 1);
    }
    ranks.sort_unstable();
    ranks
}

pub fn recall_at(rows: &[Vec<f64>], labels: &[u32], k: usize) -> f64 {
    let hits = (0..rows.len())
        .filter(|&q| match_ranks(rows, labels, q).iter().any(|&r| r <= k))
        .count();
    hits as f64 / rows.len() as f64
}

pub fn ap(ranks: &[usize]) -> f64 {
    let mut sum = 0.0;
    for (i, &r) in ranks.iter().enumerate() {
        sum += (i + 1) as f64 / r as f64;
    }
    sum / ranks.len() as f64
}

pub fn map(rows: &[Vec<f64>], labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for q in 0..rows.len() {
        total += ap(&match_ranks(rows, labels, q));
    }
    total / rows.len() as f64
}
