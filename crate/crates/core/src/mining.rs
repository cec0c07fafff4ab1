//! Pair construction, per-level contrastive losses, cascaded hard-pair
//! selection and gradient routing.
//!
//! Level `k` scores the pairs that survived level `k−1` (`P_{k−1}`, `N_{k−1}`),
//! keeps the top `h_k` percent by loss as `P_k`, `N_k`, and is trained on
//! exactly those. Positives and negatives are ranked independently.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, CascadeModel, ForwardCache, ParamSet};
use crate::error::{HdcError, Result};
use crate::math::{row_distance, Matrix};

/// Pair lists above this size are scored in parallel.
const PARALLEL_PAIRS: usize = 4096;

pub type Pair = (usize, usize);

/// Ordered index pairs into a mini-batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pub positives: Vec<Pair>,
    pub negatives: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All ordered pairs `(i, j)`, `i ≠ j`, split by label agreement.
pub fn enumerate_pairs(labels: &[u32]) -> Result<PairSet> {
    let n = labels.len();
    if n < 2 {
        return Err(HdcError::Sampling(format!(
            "a batch needs at least two rows, got {n}"
        )));
    }
    let mut set = PairSet::default();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                set.positives.push((i, j));
            } else {
                set.negatives.push((i, j));
            }
        }
    }
    if set.negatives.is_empty() {
        return Err(HdcError::NoNegatives);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelLosses {
    /// 0-based cascade level.
    pub level: usize,
    pub positive_losses: Vec<f64>,
    pub negative_losses: Vec<f64>,
}

fn pair_distances(f: &Matrix, pairs: &[Pair]) -> Result<Vec<f64>> {
    let n = f.rows();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(HdcError::Index {
            index: i.max(j),
            len: n,
        });
    }
    let dist = |&(i, j): &Pair| row_distance(f.row(i), f.row(j));
    Ok(if pairs.len() >= PARALLEL_PAIRS {
        pairs.par_iter().map(dist).collect()
    } else {
        pairs.iter().map(dist).collect()
    })
}

/// Positive loss `D(f_i, f_j)`; negative loss `max(0, M − D(f_i, f_j))`.
pub fn contrastive_losses(
    embeddings: &Matrix,
    pairs: &PairSet,
    margin: f64,
    level: usize,
) -> Result<LevelLosses> {
    let positive_losses = pair_distances(embeddings, &pairs.positives)?;
    let negative_losses = pair_distances(embeddings, &pairs.negatives)?
        .into_iter()
        .map(|d| (margin - d).max(0.0))
        .collect();
    Ok(LevelLosses {
        level,
        positive_losses,
        negative_losses,
    })
}

/// `⌈h/100 · n⌉`, capped at `n`.
pub fn hard_count(n: usize, percent: f64) -> usize {
    // h·n is exact for the integer-valued percentages used in practice, so
    // dividing afterwards avoids 0.2·450 = 90.00000000000001 style overshoot.
    let raw = (percent * n as f64 / 100.0).ceil();
    (raw as usize).min(n)
}

/// Indices of the top `⌈h/100 · n⌉` losses, largest first; equal losses keep
/// ascending index order.
pub fn select_hard(losses: &[f64], percent: f64) -> Result<Vec<usize>> {
    if losses.is_empty() {
        return Err(HdcError::EmptySet);
    }
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(HdcError::Config(format!(
            "hard fraction {percent} outside (0, 100]"
        )));
    }
    let keep = hard_count(losses.len(), percent);
    let mut order: Vec<usize> = (0..losses.len()).collect();
    let rank = |&a: &usize, &b: &usize| losses[b].total_cmp(&losses[a]).then(a.cmp(&b));
    if keep < order.len() {
        order.select_nth_unstable_by(keep, rank);
        order.truncate(keep);
    }
    order.sort_unstable_by(rank);
    Ok(order)
}

/// Which model's losses rank the candidates of level `k`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Level `k` ranks its candidates by its own loss.
    #[default]
    Current,
    /// Level `k` ranks its candidates by level `k−1`'s loss; level 1 has no
    /// predecessor and uses its own.
    Previous,
}

impl std::str::FromStr for RankBy {
    type Err = HdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current" => Ok(RankBy::Current),
            "previous" => Ok(RankBy::Previous),
            other => Err(HdcError::Config(format!(
                "rank-by must be current or previous, got {other:?}"
            ))),
        }
    }
}

/// Per-level hard fractions and loss weights used for one mining pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MiningPlan {
    pub hard_fraction: Vec<f64>,
    pub lambda: Vec<f64>,
    pub margin: f64,
    pub rank_by: RankBy,
}

impl MiningPlan {
    pub fn from_config(config: &CascadeConfig) -> Self {
        Self {
            hard_fraction: config.hard_fraction.clone(),
            lambda: config.lambda.clone(),
            margin: config.margin,
            rank_by: RankBy::Current,
        }
    }

    pub fn with_rank_by(mut self, rank_by: RankBy) -> Self {
        self.rank_by = rank_by;
        self
    }

    pub fn levels(&self) -> usize {
        self.hard_fraction.len()
    }

    /// A level with no loss weight that keeps every pair, and whose losses
    /// no later level ranks by, needs no embedding.
    pub fn needs_head(&self, level: usize) -> bool {
        self.lambda[level] != 0.0
            || self.hard_fraction[level] < 100.0
            || (self.rank_by == RankBy::Previous && level + 1 < self.levels())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelSelection {
    /// `P_k`, `N_k` as batch index pairs.
    pub pairs: PairSet,
    /// Positions of the kept pairs within the previous level's lists.
    pub positive_survivors: Vec<usize>,
    pub negative_survivors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeSelection {
    pub batch_size: usize,
    pub levels: Vec<LevelSelection>,
}

impl CascadeSelection {
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| (l.pairs.positives.len(), l.pairs.negatives.len()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub cache: ForwardCache,
    /// `P_0`, `N_0`.
    pub all_pairs: PairSet,
    pub selection: CascadeSelection,
    /// Level `k`'s losses over its candidates (`P_{k−1}`, `N_{k−1}`).
    pub losses: Vec<LevelLosses>,
}

impl MiningOutcome {
    /// Level `k`'s losses restricted to `P_k`, `N_k`.
    pub fn selected_losses(&self, level: usize) -> (Vec<f64>, Vec<f64>) {
        let sel = &self.selection.levels[level];
        let l = &self.losses[level];
        (
            sel.positive_survivors
                .iter()
                .map(|&i| l.positive_losses[i])
                .collect(),
            sel.negative_survivors
                .iter()
                .map(|&i| l.negative_losses[i])
                .collect(),
        )
    }
}

fn pick(pairs: &[Pair], idx: &[usize]) -> Vec<Pair> {
    idx.iter().map(|&i| pairs[i]).collect()
}

fn select_or_empty(scores: &[f64], percent: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        Ok(Vec::new())
    } else {
        select_hard(scores, percent)
    }
}

/// Forward pass plus cascaded hard-pair selection on one mini-batch.
pub fn cascade_mine(
    model: &CascadeModel,
    x: &Matrix,
    labels: &[u32],
    plan: &MiningPlan,
) -> Result<MiningOutcome> {
    if labels.len() != x.rows() {
        return Err(HdcError::dim(
            "cascade_mine",
            format!("{} labels for {} rows", labels.len(), x.rows()),
        ));
    }
    if plan.levels() != model.levels() || plan.lambda.len() != model.levels() {
        return Err(HdcError::Config(format!(
            "mining plan covers {} levels, model has {}",
            plan.levels(),
            model.levels()
        )));
    }
    let heads: Vec<bool> = (0..model.levels()).map(|k| plan.needs_head(k)).collect();
    let cache = model.forward_heads(x, &heads)?;
    let all_pairs = enumerate_pairs(labels)?;

    let mut candidates = all_pairs.clone();
    let mut levels = Vec::with_capacity(model.levels());
    let mut losses: Vec<LevelLosses> = Vec::with_capacity(model.levels());
    for (k, &with_head) in heads.iter().enumerate() {
        // Pass-through levels report zero loss and keep every candidate.
        let level_losses = if with_head {
            contrastive_losses(cache.embedding(k), &candidates, plan.margin, k)?
        } else {
            LevelLosses {
                level: k,
                positive_losses: vec![0.0; candidates.positives.len()],
                negative_losses: vec![0.0; candidates.negatives.len()],
            }
        };
        // Scores used for ranking this level's candidates.
        let (pos_scores, neg_scores) = match (plan.rank_by, k) {
            (RankBy::Previous, k) if k > 0 => {
                let prev: &LevelSelection = &levels[k - 1];
                let prev_losses = &losses[k - 1];
                (
                    prev.positive_survivors
                        .iter()
                        .map(|&i| prev_losses.positive_losses[i])
                        .collect(),
                    prev.negative_survivors
                        .iter()
                        .map(|&i| prev_losses.negative_losses[i])
                        .collect(),
                )
            }
            _ => (
                level_losses.positive_losses.clone(),
                level_losses.negative_losses.clone(),
            ),
        };
        let h = plan.hard_fraction[k];
        let positive_survivors = select_or_empty(&pos_scores, h)?;
        let negative_survivors = select_or_empty(&neg_scores, h)?;
        let pairs = PairSet {
            positives: pick(&candidates.positives, &positive_survivors),
            negatives: pick(&candidates.negatives, &negative_survivors),
        };
        candidates = pairs.clone();
        levels.push(LevelSelection {
            pairs,
            positive_survivors,
            negative_survivors,
        });
        losses.push(level_losses);
    }
    Ok(MiningOutcome {
        cache,
        all_pairs,
        selection: CascadeSelection {
            batch_size: x.rows(),
            levels,
        },
        losses,
    })
}

/// `Σ_k λ_k (Σ_{P_k} loss⁺ + Σ_{N_k} loss⁻)`, summed in selection order.
pub fn hdc_loss(losses: &[LevelLosses], selection: &CascadeSelection, lambda: &[f64]) -> f64 {
    let mut total = 0.0;
    for ((l, sel), &weight) in losses.iter().zip(&selection.levels).zip(lambda) {
        if weight == 0.0 {
            continue;
        }
        let mut level_sum = 0.0;
        for &i in &sel.positive_survivors {
            level_sum += l.positive_losses[i];
        }
        for &i in &sel.negative_survivors {
            level_sum += l.negative_losses[i];
        }
        total += weight * level_sum;
    }
    total
}

/// Loss of the frozen pair sets under the current parameters; no re-ranking.
pub fn frozen_selection_loss(
    model: &CascadeModel,
    x: &Matrix,
    selection: &CascadeSelection,
    lambda: &[f64],
    margin: f64,
) -> Result<f64> {
    let heads: Vec<bool> = lambda.iter().map(|&w| w != 0.0).collect();
    let cache = model.forward_heads(x, &heads)?;
    let mut total = 0.0;
    for (k, (sel, &weight)) in selection.levels.iter().zip(lambda).enumerate() {
        if weight == 0.0 {
            continue;
        }
        let l = contrastive_losses(cache.embedding(k), &sel.pairs, margin, k)?;
        let level_sum: f64 = l.positive_losses.iter().chain(&l.negative_losses).sum();
        total += weight * level_sum;
    }
    Ok(total)
}

/// Distances at or below this are rounding noise between equal unit vectors.
pub const COINCIDENT_DISTANCE: f64 = 1e-12;

/// `∂/∂f` of `weight · (Σ_P D + Σ_N max(0, M − D))`. Coincident embeddings
/// (`D ≤ COINCIDENT_DISTANCE`) take the zero subgradient.
pub fn embedding_gradient(f: &Matrix, pairs: &PairSet, margin: f64, weight: f64) -> Result<Matrix> {
    let mut grad = Matrix::zeros(f.rows(), f.cols());
    let mut diff = vec![0.0; f.cols()];
    let mut accumulate = |i: usize, j: usize, sign: f64| -> Result<Option<f64>> {
        if i >= f.rows() || j >= f.rows() {
            return Err(HdcError::Index {
                index: i.max(j),
                len: f.rows(),
            });
        }
        for ((d, a), b) in diff.iter_mut().zip(f.row(i)).zip(f.row(j)) {
            *d = a - b;
        }
        let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        if dist <= COINCIDENT_DISTANCE {
            return Ok(None);
        }
        if sign < 0.0 && margin - dist <= 0.0 {
            return Ok(Some(dist));
        }
        let scale = sign * weight / dist;
        for (g, d) in grad.row_mut(i).iter_mut().zip(&diff) {
            *g += scale * d;
        }
        for (g, d) in grad.row_mut(j).iter_mut().zip(&diff) {
            *g -= scale * d;
        }
        Ok(Some(dist))
    };
    for &(i, j) in &pairs.positives {
        accumulate(i, j, 1.0)?;
    }
    for &(i, j) in &pairs.negatives {
        accumulate(i, j, -1.0)?;
    }
    Ok(grad)
}

/// Parameter gradients of the HDC loss with the selection held fixed.
///
/// `F_k` only sees level `k`'s selected pairs; `G_k` accumulates the
/// gradients of every level `l ≥ k`, each through its own pairs. Levels with
/// zero weight are skipped outright.
pub fn backward_cascade(
    model: &CascadeModel,
    cache: &ForwardCache,
    selection: &CascadeSelection,
    lambda: &[f64],
    margin: f64,
) -> Result<ParamSet> {
    if selection.batch_size != cache.rows {
        return Err(HdcError::StaleCache(format!(
            "selection built on {} rows, cache holds {}",
            selection.batch_size, cache.rows
        )));
    }
    if selection.levels.len() != model.levels() || lambda.len() != model.levels() {
        return Err(HdcError::StaleCache(format!(
            "selection has {} levels, lambda {}, model {}",
            selection.levels.len(),
            lambda.len(),
            model.levels()
        )));
    }
    let embedding_grads = selection
        .levels
        .iter()
        .zip(lambda)
        .enumerate()
        .map(|(k, (sel, &weight))| {
            if weight == 0.0 {
                Ok(None)
            } else {
                embedding_gradient(cache.embedding(k), &sel.pairs, margin, weight).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    model.backward(cache, &embedding_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::init_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(classes: u32, per_class: u32) -> Vec<u32> {
        (0..classes)
            .flat_map(|c| std::iter::repeat_n(c, per_class as usize))
            .collect()
    }

    #[test]
    fn pair_counts() {
        let p = enumerate_pairs(&labels(10, 10)).unwrap();
        assert_eq!(p.len(), 9900);
        assert_eq!(p.positives.len(), 900);
        assert_eq!(p.negatives.len(), 9000);
        assert!(p.positives.iter().all(|&(i, j)| i != j));
    }

    #[test]
    fn single_class_batch_has_no_negatives() {
        assert!(matches!(
            enumerate_pairs(&[4, 4]),
            Err(HdcError::NoNegatives)
        ));
        assert!(enumerate_pairs(&[1]).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let same = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let pairs = PairSet {
            positives: vec![(0, 1)],
            negatives: vec![(0, 1)],
        };
        let l = contrastive_losses(&same, &pairs, 1.0, 0).unwrap();
        assert_eq!(l.positive_losses, vec![0.0]);
        assert_eq!(l.negative_losses, vec![1.0]);

        let orth = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = contrastive_losses(&orth, &pairs, 1.0, 0).unwrap();
        assert_eq!(l.negative_losses, vec![0.0]);

        let bad = PairSet {
            positives: vec![(0, 2)],
            negatives: vec![],
        };
        assert!(matches!(
            contrastive_losses(&orth, &bad, 1.0, 0),
            Err(HdcError::Index { .. })
        ));
    }

    #[test]
    fn select_hard_examples() {
        let losses: Vec<f64> = (0..900).map(|i| (i % 37) as f64).collect();
        assert_eq!(select_hard(&losses, 50.0).unwrap().len(), 450);
        assert_eq!(select_hard(&[0.1, 0.9, 0.5], 34.0).unwrap(), vec![1, 2]);
        assert_eq!(select_hard(&[0.3; 4], 50.0).unwrap(), vec![0, 1]);
        assert_eq!(select_hard(&[0.2, 0.1], 100.0).unwrap(), vec![0, 1]);
        assert!(matches!(select_hard(&[], 50.0), Err(HdcError::EmptySet)));
    }

    #[test]
    fn hard_count_uses_ceiling() {
        assert_eq!(hard_count(900, 100.0), 900);
        assert_eq!(hard_count(900, 50.0), 450);
        assert_eq!(hard_count(450, 20.0), 90);
        assert_eq!(hard_count(3, 34.0), 2);
        assert_eq!(hard_count(1, 0.001), 1);
    }

    fn toy_model(levels: usize, dim: usize, seed: u64) -> CascadeModel {
        init_model(&CascadeConfig {
            levels,
            input_dim: dim,
            block_layers: vec![vec![24]; levels],
            embed_dim: vec![4; levels],
            lambda: vec![1.0; levels],
            hard_fraction: match levels {
                1 => vec![100.0],
                _ => std::iter::once(100.0)
                    .chain(std::iter::repeat(50.0))
                    .take(levels)
                    .collect(),
            },
            margin: 1.0,
            seed,
        })
        .unwrap()
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(
            n,
            dim,
            (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cascade_sizes_follow_ceiling_rule() {
        let mut model = toy_model(3, 6, 1);
        model.config.hard_fraction = vec![100.0, 50.0, 20.0];
        let plan = MiningPlan::from_config(&model.config);
        let out = cascade_mine(&model, &random_batch(100, 6, 2), &labels(10, 10), &plan).unwrap();
        assert_eq!(
            out.selection.sizes(),
            vec![(900, 9000), (450, 4500), (90, 900)]
        );
    }

    #[test]
    fn selection_is_nested_and_dominant() {
        for rank_by in [RankBy::Current, RankBy::Previous] {
            let model = toy_model(3, 6, 3);
            let plan = MiningPlan::from_config(&model.config).with_rank_by(rank_by);
            let out = cascade_mine(&model, &random_batch(24, 6, 4), &labels(4, 6), &plan).unwrap();
            let mut prev = out.all_pairs.clone();
            for (k, sel) in out.selection.levels.iter().enumerate() {
                assert!(sel
                    .pairs
                    .positives
                    .iter()
                    .all(|p| prev.positives.contains(p)));
                assert!(sel
                    .pairs
                    .negatives
                    .iter()
                    .all(|p| prev.negatives.contains(p)));
                if rank_by == RankBy::Current {
                    let l = &out.losses[k];
                    let kept = &sel.positive_survivors;
                    let min_kept = kept
                        .iter()
                        .map(|&i| l.positive_losses[i])
                        .fold(f64::INFINITY, f64::min);
                    let max_dropped = (0..l.positive_losses.len())
                        .filter(|i| !kept.contains(i))
                        .map(|i| l.positive_losses[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(min_kept >= max_dropped);
                }
                prev = sel.pairs.clone();
            }
        }
    }

    #[test]
    fn previous_ranking_uses_prior_level_losses() {
        let model = toy_model(2, 5, 8);
        let x = random_batch(12, 5, 9);
        let lab = labels(3, 4);
        let plan = MiningPlan::from_config(&model.config).with_rank_by(RankBy::Previous);
        let out = cascade_mine(&model, &x, &lab, &plan).unwrap();
        let first = &out.losses[0];
        let s1 = &out.selection.levels[0];
        let scores: Vec<f64> = s1
            .positive_survivors
            .iter()
            .map(|&i| first.positive_losses[i])
            .collect();
        assert_eq!(
            out.selection.levels[1].positive_survivors,
            select_hard(&scores, 50.0).unwrap()
        );
    }

    /// Every level embeds `x ↦ normalize(x)` for 2-d inputs: block 1 splits
    /// x into (x⁺, y⁺, x⁻, y⁻), later blocks copy it, heads recombine.
    fn normalizing_cascade(levels: usize) -> CascadeModel {
        let mut model = init_model(&CascadeConfig {
            levels,
            input_dim: 2,
            block_layers: vec![vec![4]; levels],
            embed_dim: vec![2; levels],
            lambda: vec![1.0; levels],
            hard_fraction: vec![50.0; levels],
            margin: 1.0,
            seed: 0,
        })
        .unwrap();
        let split =
            Matrix::from_rows(&[vec![1.0, 0.0, -1.0, 0.0], vec![0.0, 1.0, 0.0, -1.0]]).unwrap();
        let join = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        for k in 0..levels {
            model.params.blocks[k][0].weight = if k == 0 {
                split.clone()
            } else {
                Matrix::identity(4)
            };
            model.params.heads[k].weight = join.clone();
        }
        model
    }

    #[test]
    fn maximal_pair_survives_every_level() {
        let model = normalizing_cascade(3);
        // rows 0 and 1 share a label at antipodal directions; the rest sit
        // in a narrow fan around (0, 1)
        let mut rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            rows.push(vec![rng.random_range(-0.3..0.3), 1.0]);
        }
        let lab = vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let x = Matrix::from_rows(&rows).unwrap();
        let out = cascade_mine(&model, &x, &lab, &MiningPlan::from_config(&model.config)).unwrap();
        for k in 0..3 {
            let f = out.cache.embedding(k);
            assert!((row_distance(f.row(0), f.row(1)) - 2.0).abs() < 1e-12);
            // brute force: nothing else reaches the antipodal distance
            let best = out
                .all_pairs
                .positives
                .iter()
                .copied()
                .max_by(|a, b| {
                    row_distance(f.row(a.0), f.row(a.1))
                        .total_cmp(&row_distance(f.row(b.0), f.row(b.1)))
                        .then(b.cmp(a))
                })
                .unwrap();
            assert_eq!(best, (0, 1), "level {k}");
            let kept = &out.selection.levels[k].pairs.positives;
            assert!(
                kept.contains(&(0, 1)) && kept.contains(&(1, 0)),
                "level {k}"
            );
        }
        assert_eq!(
            out.selection.levels[2].pairs.positives.len(),
            hard_count(hard_count(hard_count(60, 50.0), 50.0), 50.0)
        );
    }

    #[test]
    fn hdc_loss_hand_summed() {
        let losses = vec![
            LevelLosses {
                level: 0,
                positive_losses: vec![0.5, 0.25],
                negative_losses: vec![0.1, 0.0],
            },
            LevelLosses {
                level: 1,
                positive_losses: vec![0.75],
                negative_losses: vec![0.3],
            },
        ];
        let selection = CascadeSelection {
            batch_size: 4,
            levels: vec![
                LevelSelection {
                    pairs: PairSet {
                        positives: vec![(0, 1), (2, 3)],
                        negatives: vec![(0, 2), (1, 3)],
                    },
                    positive_survivors: vec![0, 1],
                    negative_survivors: vec![0, 1],
                },
                LevelSelection {
                    pairs: PairSet {
                        positives: vec![(0, 1)],
                        negatives: vec![(0, 2)],
                    },
                    positive_survivors: vec![0],
                    negative_survivors: vec![0],
                },
            ],
        };
        // 1·(0.5+0.25+0.1+0) + 2·(0.75+0.3) = 0.85 + 2.1
        let l = hdc_loss(&losses, &selection, &[1.0, 2.0]);
        assert!((l - 2.95).abs() < 1e-12);
        assert_eq!(hdc_loss(&losses, &selection, &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn single_level_full_fraction_is_plain_contrastive() {
        let model = toy_model(1, 5, 13);
        let x = random_batch(12, 5, 14);
        let lab = labels(3, 4);
        let out = cascade_mine(&model, &x, &lab, &MiningPlan::from_config(&model.config)).unwrap();
        let plain =
            contrastive_losses(&model.extract_level(&x, 0).unwrap(), &out.all_pairs, 1.0, 0)
                .unwrap();
        let plain_sum: f64 =
            plain.positive_losses.iter().sum::<f64>() + plain.negative_losses.iter().sum::<f64>();
        let l = hdc_loss(&out.losses, &out.selection, &[1.0]);
        assert!((l - plain_sum).abs() < 1e-9);
    }

    #[test]
    fn total_loss_invariant_to_row_permutation() {
        let model = toy_model(3, 5, 15);
        let x = random_batch(12, 5, 16);
        let lab = labels(3, 4);
        let plan = MiningPlan::from_config(&model.config);
        let base = cascade_mine(&model, &x, &lab, &plan).unwrap();
        let base_loss = hdc_loss(&base.losses, &base.selection, &plan.lambda);

        let perm: Vec<usize> = vec![5, 11, 0, 3, 8, 1, 10, 2, 7, 4, 9, 6];
        let px = x.select_rows(&perm).unwrap();
        let plab: Vec<u32> = perm.iter().map(|&i| lab[i]).collect();
        let out = cascade_mine(&model, &px, &plab, &plan).unwrap();
        let loss = hdc_loss(&out.losses, &out.selection, &plan.lambda);
        assert!((loss - base_loss).abs() < 1e-9 * base_loss.max(1.0));
    }

    #[test]
    fn zero_selected_losses_give_zero_head_gradient() {
        // all rows identical: positives have zero loss; margin tiny and
        // negatives collapse too, but make negatives far by label layout.
        let model = toy_model(2, 3, 17);
        let x = Matrix::from_rows(&vec![vec![1.0, 2.0, 3.0]; 4]).unwrap();
        let lab = vec![0, 0, 1, 1];
        let plan = MiningPlan::from_config(&model.config);
        let out = cascade_mine(&model, &x, &lab, &plan).unwrap();
        // keep only positives (zero distance) at level 1
        let mut selection = out.selection.clone();
        selection.levels[1].pairs.negatives.clear();
        let grads = backward_cascade(&model, &out.cache, &selection, &plan.lambda, 1.0).unwrap();
        assert!(grads.heads[1].weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(grads.heads[1].bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_selection_is_rejected() {
        let model = toy_model(2, 3, 19);
        let x = random_batch(6, 3, 20);
        let out = cascade_mine(
            &model,
            &x,
            &labels(2, 3),
            &MiningPlan::from_config(&model.config),
        )
        .unwrap();
        let mut selection = out.selection.clone();
        selection.batch_size = 7;
        assert!(matches!(
            backward_cascade(&model, &out.cache, &selection, &[1.0, 1.0], 1.0),
            Err(HdcError::StaleCache(_))
        ));
    }

    #[test]
    fn rounding_level_distances_are_coincident() {
        // Two normalizations of parallel vectors agree only up to rounding.
        let a = [0.6, 0.8];
        let b = [f64::from_bits(0.6f64.to_bits() + 1), 0.8];
        let f = Matrix::from_rows(&[a.to_vec(), b.to_vec()]).unwrap();
        let pairs = PairSet {
            positives: vec![(0, 1)],
            negatives: vec![(1, 0)],
        };
        let g = embedding_gradient(&f, &pairs, 1.0, 1.0).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }
}
