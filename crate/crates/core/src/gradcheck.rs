//! End-to-end gradient check of the frozen-selection cascade loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cascade::{init_model, CascadeConfig, CascadeModel};
use crate::error::Result;
use crate::math::{
    central_differences, compare_gradients, finite_diff_check, GradCheckReport, Matrix,
};
use crate::mining::{backward_cascade, cascade_mine, frozen_selection_loss, MiningPlan, RankBy};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Deliberate corruption of the analytic gradient, for exercising the checker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Negate the deepest head's weight gradient.
    NegateHeadWeights,
}

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub cascade: CascadeConfig,
    pub classes: usize,
    pub per_class: usize,
    pub data_seed: u64,
    pub rank_by: RankBy,
    pub step: f64,
}

impl GradCheckCase {
    /// Two-level model with a 3-class, 4-per-class batch.
    pub fn tiny(levels: usize) -> Self {
        let fractions = [100.0, 50.0, 20.0, 20.0];
        Self {
            cascade: CascadeConfig {
                levels,
                input_dim: 6,
                block_layers: vec![vec![16, 16]; levels],
                embed_dim: vec![4; levels],
                lambda: vec![1.0; levels],
                hard_fraction: fractions.iter().cycle().take(levels).copied().collect(),
                margin: 1.0,
                seed: 7,
            },
            classes: 3,
            per_class: 4,
            data_seed: 8,
            rank_by: RankBy::Current,
            step: DEFAULT_STEP,
        }
    }

    pub fn batch(&self) -> (Matrix, Vec<u32>) {
        let n = self.classes * self.per_class;
        let d = self.cascade.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|i| (i / self.per_class) as u32).collect();
        (Matrix::new(n, d, data).expect("finite"), labels)
    }
}

/// Worst disagreement between central differences at `case.step` and at half
/// that step. Near a ReLU or hinge kink, or where curvature is large, the two
/// differ and the finite-difference oracle cannot be trusted at this point.
/// The analytic gradient plays no part, so a bug cannot hide behind this.
pub fn step_sensitivity(model: &CascadeModel, case: &GradCheckCase) -> Result<GradCheckReport> {
    let (x, labels) = case.batch();
    let plan = MiningPlan::from_config(&model.config).with_rank_by(case.rank_by);
    let mined = cascade_mine(model, &x, &labels, &plan)?;
    let theta = model.params.flatten();
    let mut probe = model.clone();
    let mut loss = |params: &[f64]| {
        probe.params.assign_flat(params).expect("same layout");
        frozen_selection_loss(&probe, &x, &mined.selection, &plan.lambda, plan.margin)
            .unwrap_or(f64::NAN)
    };
    let coarse = central_differences(&mut loss, &theta, case.step)?;
    let fine = central_differences(&mut loss, &theta, case.step / 2.0)?;
    Ok(compare_gradients(&fine, &coarse))
}

/// Truncation error at `h` is about 4/3 of the `h` versus `h/2` gap, so this
/// keeps the oracle's own error near a third of [`TOLERANCE`].
pub fn oracle_is_reliable(model: &CascadeModel, case: &GradCheckCase) -> Result<bool> {
    Ok(step_sensitivity(model, case)?.max_relative_error < TOLERANCE / 4.0)
}

/// Mines one batch, freezes the selection, and compares the analytic
/// gradient of every parameter with central differences.
pub fn check_case(case: &GradCheckCase, fault: Fault) -> Result<GradCheckReport> {
    let model = init_model(&case.cascade)?;
    check_model(&model, case, fault)
}

pub fn check_model(
    model: &CascadeModel,
    case: &GradCheckCase,
    fault: Fault,
) -> Result<GradCheckReport> {
    let (x, labels) = case.batch();
    let plan = MiningPlan::from_config(&model.config).with_rank_by(case.rank_by);
    let mined = cascade_mine(model, &x, &labels, &plan)?;
    let mut grads = backward_cascade(
        model,
        &mined.cache,
        &mined.selection,
        &plan.lambda,
        plan.margin,
    )?;
    if fault == Fault::NegateHeadWeights {
        let last = grads.heads.len() - 1;
        let w = &mut grads.heads[last].weight;
        *w = w.scale(-1.0);
    }
    let theta = model.params.flatten();
    let mut probe = model.clone();
    let loss = |params: &[f64]| {
        probe.params.assign_flat(params).expect("same layout");
        frozen_selection_loss(&probe, &x, &mined.selection, &plan.lambda, plan.margin)
            .unwrap_or(f64::NAN)
    };
    finite_diff_check(loss, &theta, &grads.flatten(), case.step)
}
