//! The cascaded embedding network.
//!
//! Level `k` owns a shared block `G_k` (a stack of fully connected layers,
//! each followed by ReLU) and a private head `F_k` (one linear layer followed
//! by row-wise L2 normalization). Blocks are chained: block `k` consumes the
//! output of block `k−1`, so the level-`k` embedding is
//! `normalize(F_k(G_k(…G_1(x))))`.

use std::hash::{DefaultHasher, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HdcError, Result};
use crate::math::{
    l2_normalize_backward, l2_normalize_rows, linear_backward, linear_forward, relu_backward,
    relu_forward, Matrix, Normalized,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub levels: usize,
    pub input_dim: usize,
    /// Hidden widths of each block, one list per level.
    pub block_layers: Vec<Vec<usize>>,
    pub embed_dim: Vec<usize>,
    pub lambda: Vec<f64>,
    /// Percent of the forwarded pairs kept as hard at each level, in (0, 100].
    pub hard_fraction: Vec<f64>,
    pub margin: f64,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            input_dim: 32,
            block_layers: vec![vec![64]; 3],
            embed_dim: vec![16; 3],
            lambda: vec![1.0; 3],
            hard_fraction: vec![100.0, 50.0, 20.0],
            margin: 1.0,
            seed: 0,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.levels;
        if k == 0 {
            return Err(HdcError::Config(
                "at least one cascade level is required".into(),
            ));
        }
        for (name, len) in [
            ("block_layers", self.block_layers.len()),
            ("embed_dim", self.embed_dim.len()),
            ("lambda", self.lambda.len()),
            ("hard_fraction", self.hard_fraction.len()),
        ] {
            if len != k {
                return Err(HdcError::Config(format!(
                    "{name} has {len} entries for {k} levels"
                )));
            }
        }
        if self.input_dim == 0 {
            return Err(HdcError::Config("input_dim must be positive".into()));
        }
        for (level, widths) in self.block_layers.iter().enumerate() {
            if widths.is_empty() || widths.contains(&0) {
                return Err(HdcError::Config(format!(
                    "block {} needs at least one layer of positive width",
                    level + 1
                )));
            }
        }
        if self.embed_dim.contains(&0) {
            return Err(HdcError::Config(
                "embed_dim entries must be positive".into(),
            ));
        }
        if let Some(l) = self.lambda.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(HdcError::Config(format!(
                "lambda {l} must be finite and >= 0"
            )));
        }
        if let Some(h) = self
            .hard_fraction
            .iter()
            .find(|h| !(**h > 0.0 && **h <= 100.0))
        {
            return Err(HdcError::Config(format!(
                "hard fraction {h} outside (0, 100]"
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(HdcError::Config(format!(
                "margin {} must be positive",
                self.margin
            )));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.embed_dim.iter().sum()
    }

    /// `(fan_in, fan_out)` of every block layer, level-major.
    pub fn block_shapes(&self) -> Vec<Vec<(usize, usize)>> {
        let mut fan_in = self.input_dim;
        self.block_layers
            .iter()
            .map(|widths| {
                widths
                    .iter()
                    .map(|&w| {
                        let shape = (fan_in, w);
                        fan_in = w;
                        shape
                    })
                    .collect()
            })
            .collect()
    }

    pub fn head_shapes(&self) -> Vec<(usize, usize)> {
        self.block_layers
            .iter()
            .zip(&self.embed_dim)
            .map(|(widths, &e)| (*widths.last().expect("validated"), e))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = glorot_bound(fan_in, fan_out);
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Matrix::new(fan_in, fan_out, data).expect("finite by construction"),
            bias: vec![0.0; fan_out],
        }
    }
}

/// `√(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Parameters (or gradients) laid out like a cascade model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub blocks: Vec<Vec<Layer>>,
    pub heads: Vec<Layer>,
}

/// One named tensor inside a [`ParamSet`], in declaration order.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub values: &'a [f64],
}

impl ParamSet {
    pub fn zeros(config: &CascadeConfig) -> Self {
        Self {
            blocks: config
                .block_shapes()
                .into_iter()
                .map(|b| b.into_iter().map(|(i, o)| Layer::zeros(i, o)).collect())
                .collect(),
            heads: config
                .head_shapes()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Layer| Layer::zeros(l.weight.rows(), l.weight.cols());
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| b.iter().map(z).collect())
                .collect(),
            heads: self.heads.iter().map(z).collect(),
        }
    }

    /// Tensors in declaration order: for each level, its block layers
    /// (weight then bias), then its head (weight then bias).
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (k, (block, head)) in self.blocks.iter().zip(&self.heads).enumerate() {
            for (l, layer) in block.iter().enumerate() {
                push_layer(&mut out, format!("block{}.layer{}", k + 1, l + 1), layer);
            }
            push_layer(&mut out, format!("head{}", k + 1), head);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (block, head) in self.blocks.iter_mut().zip(self.heads.iter_mut()) {
            for layer in block.iter_mut() {
                out.push(layer.weight.as_mut_slice());
                out.push(&mut layer.bias);
            }
            out.push(head.weight.as_mut_slice());
            out.push(&mut head.bias);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.values.iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(HdcError::dim(
                "ParamSet::assign_flat",
                format!("{} values for {} parameters", flat.len(), self.len()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Visits matching tensors of `self` and `other` pairwise.
    pub fn zip_mut<F>(&mut self, other: &ParamSet, mut f: F) -> Result<()>
    where
        F: FnMut(&mut [f64], &[f64]),
    {
        let theirs = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != theirs.len()
            || mine
                .iter()
                .zip(&theirs)
                .any(|(a, b)| a.len() != b.values.len())
        {
            return Err(HdcError::dim(
                "ParamSet::zip_mut",
                "parameter layouts differ",
            ));
        }
        for (a, b) in mine.into_iter().zip(theirs) {
            f(a, b.values);
        }
        Ok(())
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.tensors() {
            h.write_usize(t.values.len());
            for v in t.values {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

fn push_layer<'a>(out: &mut Vec<TensorRef<'a>>, prefix: String, layer: &'a Layer) {
    out.push(TensorRef {
        name: format!("{prefix}.weight"),
        shape: layer.weight.shape(),
        values: layer.weight.as_slice(),
    });
    out.push(TensorRef {
        name: format!("{prefix}.bias"),
        shape: (1, layer.bias.len()),
        values: &layer.bias,
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub config: CascadeConfig,
    pub params: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub input: Matrix,
    pub pre_activation: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelCache {
    pub layers: Vec<LayerCache>,
    /// `o_k`, the output of block `k`.
    pub block_output: Matrix,
    /// Head output before normalization.
    pub head_output: Matrix,
    /// `f_k` with the norms needed for backward.
    pub embedding: Normalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub levels: Vec<LevelCache>,
    pub rows: usize,
    /// [`ParamSet::digest`] of the parameters that produced this cache.
    pub param_digest: u64,
}

impl ForwardCache {
    pub fn embedding(&self, level: usize) -> &Matrix {
        &self.levels[level].embedding.output
    }

    /// Whether level `level`'s head ran in this forward pass.
    pub fn has_head(&self, level: usize) -> bool {
        self.levels[level].embedding.output.cols() > 0
    }
}

pub fn init_model(config: &CascadeConfig) -> Result<CascadeModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut blocks = Vec::with_capacity(config.levels);
    let mut heads = Vec::with_capacity(config.levels);
    for (shapes, (hi, ho)) in config.block_shapes().into_iter().zip(config.head_shapes()) {
        blocks.push(
            shapes
                .into_iter()
                .map(|(i, o)| Layer::glorot(i, o, &mut rng))
                .collect(),
        );
        heads.push(Layer::glorot(hi, ho, &mut rng));
    }
    Ok(CascadeModel {
        config: config.clone(),
        params: ParamSet { blocks, heads },
    })
}

impl CascadeModel {
    pub fn levels(&self) -> usize {
        self.config.levels
    }

    /// Runs block `level` (0-based) on `input`; returns the caches and `o_k`.
    fn run_block(&self, level: usize, input: &Matrix) -> Result<(Vec<LayerCache>, Matrix)> {
        let mut current = input.clone();
        let mut caches = Vec::with_capacity(self.params.blocks[level].len());
        for layer in &self.params.blocks[level] {
            let pre = linear_forward(&current, &layer.weight, &layer.bias)?;
            let next = relu_forward(&pre);
            caches.push(LayerCache {
                input: current,
                pre_activation: pre,
            });
            current = next;
        }
        Ok((caches, current))
    }

    /// `G_k` alone, applied to `input` (0-based level).
    pub fn block_forward(&self, level: usize, input: &Matrix) -> Result<Matrix> {
        self.check_level(level)?;
        Ok(self.run_block(level, input)?.1)
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.levels() {
            return Err(HdcError::Index {
                index: level,
                len: self.levels(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        self.forward_heads(x, &vec![true; self.levels()])
    }

    /// Runs every block but only the heads with `heads[k]` set. A skipped
    /// level's head output and embedding are `n × 0`, so an untrained head
    /// is never normalized.
    pub fn forward_heads(&self, x: &Matrix, heads: &[bool]) -> Result<ForwardCache> {
        if x.cols() != self.config.input_dim {
            return Err(HdcError::dim(
                "forward",
                format!(
                    "input has {} columns, model expects {}",
                    x.cols(),
                    self.config.input_dim
                ),
            ));
        }
        if heads.len() != self.levels() {
            return Err(HdcError::dim(
                "forward",
                format!("{} head flags for {} levels", heads.len(), self.levels()),
            ));
        }
        let mut levels = Vec::with_capacity(self.levels());
        let mut carry = x.clone();
        for (k, &with_head) in heads.iter().enumerate() {
            let (layers, block_output) = self.run_block(k, &carry)?;
            let (head_output, embedding) = if with_head {
                let head = &self.params.heads[k];
                let out = linear_forward(&block_output, &head.weight, &head.bias)?;
                let embedding = l2_normalize_rows(&out)?;
                (out, embedding)
            } else {
                let empty = Matrix::zeros(x.rows(), 0);
                (
                    empty.clone(),
                    Normalized {
                        output: empty,
                        norms: Vec::new(),
                    },
                )
            };
            carry = block_output.clone();
            levels.push(LevelCache {
                layers,
                block_output,
                head_output,
                embedding,
            });
        }
        Ok(ForwardCache {
            levels,
            rows: x.rows(),
            param_digest: self.params.digest(),
        })
    }

    /// Concatenation `[f_1 | … | f_K]`, not renormalized.
    pub fn extract_descriptor(&self, x: &Matrix) -> Result<Matrix> {
        let cache = self.forward(x)?;
        let parts: Vec<&Matrix> = (0..self.levels()).map(|k| cache.embedding(k)).collect();
        Matrix::hconcat(&parts)
    }

    /// Embedding of a single level (0-based).
    pub fn extract_level(&self, x: &Matrix, level: usize) -> Result<Matrix> {
        self.check_level(level)?;
        let heads: Vec<bool> = (0..self.levels()).map(|k| k == level).collect();
        let cache = self.forward_heads(x, &heads)?;
        Ok(cache
            .levels
            .into_iter()
            .nth(level)
            .expect("checked")
            .embedding
            .output)
    }

    /// Parameter gradients given `dL/df_k` for each level.
    ///
    /// Block `k` receives the sum of its own head's gradient and whatever
    /// flows back from block `k+1`; a `None` level contributes nothing, so a
    /// level with zero weight leaves every other gradient bitwise untouched.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        embedding_grads: &[Option<Matrix>],
    ) -> Result<ParamSet> {
        if cache.levels.len() != self.levels() || embedding_grads.len() != self.levels() {
            return Err(HdcError::StaleCache(format!(
                "cache has {} levels, {} gradients, model has {}",
                cache.levels.len(),
                embedding_grads.len(),
                self.levels()
            )));
        }
        if cache.param_digest != self.params.digest() {
            return Err(HdcError::StaleCache(
                "parameters changed since the forward pass".into(),
            ));
        }
        let mut grads = self.params.zeros_like();
        let mut carry: Option<Matrix> = None;
        for k in (0..self.levels()).rev() {
            let level = &cache.levels[k];
            let mut d_block = carry.take();
            if let Some(d_embed) = &embedding_grads[k] {
                if !cache.has_head(k) {
                    return Err(HdcError::StaleCache(format!(
                        "level {} has a gradient but its head was not run",
                        k + 1
                    )));
                }
                let d_head_out = l2_normalize_backward(&level.embedding, d_embed)?;
                let head = &self.params.heads[k];
                let g = linear_backward(&level.block_output, &head.weight, &d_head_out)?;
                grads.heads[k] = Layer {
                    weight: g.dw,
                    bias: g.db,
                };
                d_block = Some(match d_block {
                    None => g.dx,
                    Some(mut d) => {
                        d.add_assign(&g.dx)?;
                        d
                    }
                });
            }
            let Some(mut d) = d_block else { continue };
            for (l, layer) in self.params.blocks[k].iter().enumerate().rev() {
                let lc = &level.layers[l];
                let d_pre = relu_backward(&lc.pre_activation, &d)?;
                let g = linear_backward(&lc.input, &layer.weight, &d_pre)?;
                grads.blocks[k][l] = Layer {
                    weight: g.dw,
                    bias: g.db,
                };
                d = g.dx;
            }
            if k > 0 {
                carry = Some(d);
            }
        }
        Ok(grads)
    }
}
