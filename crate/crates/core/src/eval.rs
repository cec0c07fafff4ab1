//! Retrieval metrics over descriptor matrices: Recall@K, mean average
//! precision, positive/negative distance histograms and the LDA separation
//! score `|m⁻ − m⁺|² / (v⁺ + v⁻)`.
//!
//! Rankings sort database items by ascending Euclidean distance with ties
//! broken by ascending database index.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{HdcError, Result};
use crate::math::{row_distance, Matrix};

/// A query set ranked against a database.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalSet<'a> {
    pub query: &'a Matrix,
    pub query_labels: &'a [u32],
    pub db: &'a Matrix,
    pub db_labels: &'a [u32],
    /// Drop db item `i` from query `i`'s ranking (query set = database).
    pub exclude_self: bool,
}

impl<'a> RetrievalSet<'a> {
    /// Leave-one-out retrieval of a labelled set against itself.
    pub fn self_retrieval(desc: &'a Matrix, labels: &'a [u32]) -> Self {
        Self {
            query: desc,
            query_labels: labels,
            db: desc,
            db_labels: labels,
            exclude_self: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.query.cols() != self.db.cols() {
            return Err(HdcError::Evaluation(format!(
                "query width {} differs from database width {}",
                self.query.cols(),
                self.db.cols()
            )));
        }
        if self.query_labels.len() != self.query.rows() || self.db_labels.len() != self.db.rows() {
            return Err(HdcError::Evaluation(
                "label counts do not match rows".into(),
            ));
        }
        let effective = if self.exclude_self {
            self.db.rows().saturating_sub(1)
        } else {
            self.db.rows()
        };
        if effective == 0 {
            return Err(HdcError::Evaluation("empty database".into()));
        }
        if self.exclude_self && self.query.rows() != self.db.rows() {
            return Err(HdcError::Evaluation(
                "exclude_self requires the query set to be the database".into(),
            ));
        }
        Ok(())
    }

    /// Database indices in rank order for query `q`.
    fn ranking(&self, q: usize) -> Vec<usize> {
        let qrow = self.query.row(q);
        let mut scored: Vec<(f64, usize)> = (0..self.db.rows())
            .filter(|&i| !(self.exclude_self && i == q))
            .map(|i| (row_distance(qrow, self.db.row(i)), i))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, i)| i).collect()
    }

    /// For each query, the 1-based ranks at which same-label items appear.
    fn match_ranks(&self) -> Vec<Vec<usize>> {
        (0..self.query.rows())
            .into_par_iter()
            .map(|q| {
                let label = self.query_labels[q];
                self.ranking(q)
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, i)| self.db_labels[i] == label)
                    .map(|(r, _)| r + 1)
                    .collect()
            })
            .collect()
    }
}

/// Fraction of queries with at least one same-label item in the top `K`.
pub fn recall_at_k(set: &RetrievalSet<'_>, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    set.validate()?;
    if ks.contains(&0) {
        return Err(HdcError::Evaluation(
            "recall cut-offs must be at least 1".into(),
        ));
    }
    let ranks = set.match_ranks();
    let n = ranks.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks
                .iter()
                .filter(|r| r.first().is_some_and(|&first| first <= k))
                .count();
            (k, hits as f64 / n)
        })
        .collect())
}

/// Average precision of one ranking given the 1-based ranks of its matches.
pub fn average_precision(match_ranks: &[usize]) -> f64 {
    if match_ranks.is_empty() {
        return 0.0;
    }
    let sum: f64 = match_ranks
        .iter()
        .enumerate()
        .map(|(found, &rank)| (found + 1) as f64 / rank as f64)
        .sum();
    sum / match_ranks.len() as f64
}

/// Mean over queries of the full-ranking average precision. A query with no
/// same-label database item is an error unless `skip_undefined` is set, in
/// which case it is left out of the mean.
pub fn mean_average_precision(set: &RetrievalSet<'_>, skip_undefined: bool) -> Result<f64> {
    set.validate()?;
    let ranks = set.match_ranks();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (q, r) in ranks.iter().enumerate() {
        if r.is_empty() {
            if skip_undefined {
                continue;
            }
            return Err(HdcError::UndefinedAp {
                query: q,
                label: set.query_labels[q],
            });
        }
        total += average_precision(r);
        counted += 1;
    }
    if counted == 0 {
        return Err(HdcError::Evaluation("no query has a database match".into()));
    }
    Ok(total / counted as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramStats {
    pub m_pos: f64,
    pub v_pos: f64,
    pub m_neg: f64,
    pub v_neg: f64,
    pub pos_bins: Vec<u64>,
    pub neg_bins: Vec<u64>,
    pub bin_range: (f64, f64),
    pub bin_count: usize,
}

impl HistogramStats {
    /// Builds statistics from precomputed moments; bins are left empty.
    pub fn from_moments(m_pos: f64, v_pos: f64, m_neg: f64, v_neg: f64) -> Self {
        Self {
            m_pos,
            v_pos,
            m_neg,
            v_neg,
            pos_bins: Vec::new(),
            neg_bins: Vec::new(),
            bin_range: (0.0, 0.0),
            bin_count: 0,
        }
    }

    /// Shared mass of the two normalized histograms, `Σ_b min(p_b, n_b)`.
    pub fn overlap(&self) -> f64 {
        let pt: u64 = self.pos_bins.iter().sum();
        let nt: u64 = self.neg_bins.iter().sum();
        if pt == 0 || nt == 0 {
            return 0.0;
        }
        self.pos_bins
            .iter()
            .zip(&self.neg_bins)
            .map(|(&p, &n)| (p as f64 / pt as f64).min(n as f64 / nt as f64))
            .sum()
    }

    pub fn lower_edge(&self, bin: usize) -> f64 {
        let (lo, hi) = self.bin_range;
        lo + (hi - lo) * bin as f64 / self.bin_count as f64
    }
}

fn bin_of(d: f64, lo: f64, hi: f64, count: usize) -> usize {
    let pos = ((d - lo) / (hi - lo) * count as f64).floor();
    if pos < 0.0 {
        0
    } else {
        (pos as usize).min(count - 1)
    }
}

/// Population mean and variance.
fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Distance statistics over every unordered pair `i < j`.
pub fn distance_histograms(
    desc: &Matrix,
    labels: &[u32],
    bin_count: usize,
    bin_range: (f64, f64),
) -> Result<HistogramStats> {
    if labels.len() != desc.rows() {
        return Err(HdcError::Evaluation(
            "label count does not match rows".into(),
        ));
    }
    if bin_count == 0 || bin_range.0.is_nan() || bin_range.1.is_nan() || bin_range.1 <= bin_range.0
    {
        return Err(HdcError::Evaluation(format!(
            "bad histogram layout: {bin_count} bins over {bin_range:?}"
        )));
    }
    let per_row: Vec<(Vec<f64>, Vec<f64>)> = (0..desc.rows())
        .into_par_iter()
        .map(|i| {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for j in i + 1..desc.rows() {
                let d = row_distance(desc.row(i), desc.row(j));
                if labels[i] == labels[j] {
                    pos.push(d);
                } else {
                    neg.push(d);
                }
            }
            (pos, neg)
        })
        .collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, n) in per_row {
        pos.extend(p);
        neg.extend(n);
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(HdcError::Evaluation(format!(
            "need both positive and negative pairs, have {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    let (lo, hi) = bin_range;
    let mut pos_bins = vec![0u64; bin_count];
    let mut neg_bins = vec![0u64; bin_count];
    for &d in &pos {
        pos_bins[bin_of(d, lo, hi, bin_count)] += 1;
    }
    for &d in &neg {
        neg_bins[bin_of(d, lo, hi, bin_count)] += 1;
    }
    let (m_pos, v_pos) = moments(&pos);
    let (m_neg, v_neg) = moments(&neg);
    Ok(HistogramStats {
        m_pos,
        v_pos,
        m_neg,
        v_neg,
        pos_bins,
        neg_bins,
        bin_range,
        bin_count,
    })
}

pub fn lda_score(stats: &HistogramStats) -> Result<f64> {
    let var = stats.v_pos + stats.v_neg;
    if var.is_nan() || var <= 0.0 {
        return Err(HdcError::DegenerateDistribution);
    }
    let gap = stats.m_neg - stats.m_pos;
    Ok(gap * gap / var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub histogram: HistogramStats,
    pub lda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub bin_count: usize,
    pub bin_range: (f64, f64),
    pub skip_undefined_ap: bool,
}

impl EvalOptions {
    /// Defaults for descriptors built from `levels` unit embeddings: 100 bins
    /// over `[0, 2√levels]`.
    pub fn for_levels(levels: usize) -> Self {
        Self {
            ks: vec![1, 2, 4, 8, 16, 32],
            bin_count: 100,
            bin_range: (0.0, 2.0 * (levels as f64).sqrt()),
            skip_undefined_ap: false,
        }
    }
}

/// Leave-one-out retrieval over a labelled descriptor set plus its distance
/// statistics.
pub fn evaluate(desc: &Matrix, labels: &[u32], options: &EvalOptions) -> Result<EvalReport> {
    let set = RetrievalSet::self_retrieval(desc, labels);
    let recall_at = recall_at_k(&set, &options.ks)?;
    let map_score = mean_average_precision(&set, options.skip_undefined_ap)?;
    let histogram = distance_histograms(desc, labels, options.bin_count, options.bin_range)?;
    let lda = lda_score(&histogram)?;
    Ok(EvalReport {
        recall_at,
        map_score,
        histogram,
        lda,
    })
}

impl EvalReport {
    /// Plain-text summary.
    pub fn to_text(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        for (k, r) in &self.recall_at {
            let _ = writeln!(s, "recall@{k} = {r:.6}");
        }
        let _ = writeln!(s, "map = {:.6}", self.map_score);
        let h = &self.histogram;
        let _ = writeln!(s, "positive_mean = {:.6}", h.m_pos);
        let _ = writeln!(s, "positive_variance = {:.6}", h.v_pos);
        let _ = writeln!(s, "negative_mean = {:.6}", h.m_neg);
        let _ = writeln!(s, "negative_variance = {:.6}", h.v_neg);
        let _ = writeln!(s, "histogram_overlap = {:.6}", h.overlap());
        let _ = writeln!(s, "lda = {:.6}", self.lda);
        s
    }

    /// `k,recall` rows.
    pub fn recall_csv(&self) -> String {
        let mut s = String::from("k,recall\n");
        for (k, r) in &self.recall_at {
            let _ = writeln!(s, "{k},{r:?}");
        }
        s
    }
}

/// `bin_lo,bin_hi,positive_count,positive_fraction,negative_count,negative_fraction`.
pub fn histogram_csv(h: &HistogramStats) -> String {
    let pt = h.pos_bins.iter().sum::<u64>().max(1) as f64;
    let nt = h.neg_bins.iter().sum::<u64>().max(1) as f64;
    let mut s = String::from(
        "bin_lo,bin_hi,positive_count,positive_fraction,negative_count,negative_fraction\n",
    );
    for b in 0..h.bin_count {
        let _ = writeln!(
            s,
            "{:?},{:?},{},{:?},{},{:?}",
            h.lower_edge(b),
            h.lower_edge(b + 1),
            h.pos_bins[b],
            h.pos_bins[b] as f64 / pt,
            h.neg_bins[b],
            h.neg_bins[b] as f64 / nt
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_points() -> (Matrix, Vec<u32>) {
        (
            Matrix::from_rows(&[
                vec![0.0, 0.0],
                vec![0.1, 0.0],
                vec![1.0, 0.0],
                vec![1.1, 0.0],
            ])
            .unwrap(),
            vec![0, 0, 1, 1],
        )
    }

    #[test]
    fn recall_four_point_example() {
        let (x, l) = four_points();
        let r = recall_at_k(&RetrievalSet::self_retrieval(&x, &l), &[1, 2, 3]).unwrap();
        assert_eq!(r[&1], 1.0);
        assert_eq!(r[&3], 1.0);
    }

    #[test]
    fn recall_without_self_exclusion_counts_self() {
        let (x, _) = four_points();
        let l = vec![0, 1, 2, 3];
        let set = RetrievalSet {
            query: &x,
            query_labels: &l,
            db: &x,
            db_labels: &l,
            exclude_self: false,
        };
        assert_eq!(recall_at_k(&set, &[1]).unwrap()[&1], 1.0);
        let loo = RetrievalSet::self_retrieval(&x, &l);
        assert_eq!(recall_at_k(&loo, &[3]).unwrap()[&3], 0.0);
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[1, 3]) - 0.833_333_333_333_333_4).abs() < 1e-12);
        assert_eq!(average_precision(&[1, 2, 3]), 1.0);
    }

    #[test]
    fn map_single_matching_item() {
        let q = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let db = Matrix::from_rows(&[vec![5.0]]).unwrap();
        let set = RetrievalSet {
            query: &q,
            query_labels: &[3],
            db: &db,
            db_labels: &[3],
            exclude_self: false,
        };
        assert_eq!(mean_average_precision(&set, false).unwrap(), 1.0);
    }

    #[test]
    fn map_undefined_query() {
        let q = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let db = Matrix::from_rows(&[vec![5.0]]).unwrap();
        let set = RetrievalSet {
            query: &q,
            query_labels: &[3, 4],
            db: &db,
            db_labels: &[3],
            exclude_self: false,
        };
        assert!(matches!(
            mean_average_precision(&set, false),
            Err(HdcError::UndefinedAp { query: 1, label: 4 })
        ));
        assert_eq!(mean_average_precision(&set, true).unwrap(), 1.0);
    }

    #[test]
    fn empty_database_is_an_error() {
        let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
        assert!(matches!(
            recall_at_k(&RetrievalSet::self_retrieval(&x, &[0]), &[1]),
            Err(HdcError::Evaluation(_))
        ));
    }

    #[test]
    fn histogram_examples() {
        let x = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![1.0]]).unwrap();
        let h = distance_histograms(&x, &[0, 0, 1], 10, (0.0, 2.0)).unwrap();
        assert_eq!((h.m_pos, h.v_pos), (0.0, 0.0));

        // negatives at distance 1 and 3
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![-2.0], vec![-2.0]]).unwrap();
        let h = distance_histograms(&x, &[0, 1, 1, 1], 4, (0.0, 2.0)).unwrap();
        assert_eq!(h.pos_bins.iter().sum::<u64>(), 3);
        assert_eq!(h.neg_bins.iter().sum::<u64>(), 3);
        // negatives: d(0,1)=1, d(0,2)=2, d(0,3)=2
        assert!((h.m_neg - 5.0 / 3.0).abs() < 1e-12);
        // out-of-range 3.0 clamps to last bin
        assert_eq!(h.pos_bins[3], 2);

        let two = [1.0, 3.0];
        assert_eq!(moments(&two), (2.0, 1.0));
    }

    #[test]
    fn histogram_requires_both_polarities() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(distance_histograms(&x, &[0, 0], 4, (0.0, 2.0)).is_err());
        assert!(distance_histograms(&x, &[0, 1], 4, (0.0, 2.0)).is_err());
    }

    #[test]
    fn lda_examples() {
        let s = HistogramStats::from_moments(0.804, 0.019, 0.941, 0.016);
        assert!((lda_score(&s).unwrap() - 0.54).abs() < 0.01);
        let s = HistogramStats::from_moments(0.756, 0.015, 1.080, 0.027);
        assert!((lda_score(&s).unwrap() - 2.50).abs() < 0.01);
        let s = HistogramStats::from_moments(0.5, 0.1, 0.5, 0.2);
        assert_eq!(lda_score(&s).unwrap(), 0.0);
        let s = HistogramStats::from_moments(0.5, 0.0, 0.7, 0.0);
        assert!(matches!(
            lda_score(&s),
            Err(HdcError::DegenerateDistribution)
        ));
    }

    #[test]
    fn overlap_of_disjoint_and_identical() {
        let mut h = HistogramStats::from_moments(0.0, 0.0, 0.0, 0.0);
        h.pos_bins = vec![4, 0];
        h.neg_bins = vec![0, 9];
        assert_eq!(h.overlap(), 0.0);
        h.neg_bins = vec![2, 0];
        assert_eq!(h.overlap(), 1.0);
    }
}
