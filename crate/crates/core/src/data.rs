//! Labelled feature datasets, CSV interchange, a synthetic cluster generator
//! and the class-balanced mini-batch sampler.
//!
//! CSV rows are `label,x_0,…,x_{d−1}` with no header.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HdcError, Result};
use crate::math::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u32>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(HdcError::dim(
                "Dataset::new",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            class_index.entry(l).or_default().push(i);
        }
        Ok(Self {
            features,
            labels,
            class_index,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn class_index(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.class_index
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(rows)?;
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels)
    }

    /// Per-class split: the first `⌈fraction · n_c⌉` rows of each class (in
    /// dataset order, after a seeded shuffle within the class) go to the
    /// held-out side. Both halves keep ascending row order.
    pub fn stratified_split(&self, held_out_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(HdcError::Config(format!(
                "held-out fraction {held_out_fraction} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for rows in self.class_index.values() {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            let n_test = ((held_out_fraction * rows.len() as f64).ceil() as usize).min(rows.len());
            test.extend_from_slice(&rows[..n_test]);
            train.extend_from_slice(&rows[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| HdcError::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim: Option<usize> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| HdcError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| HdcError::Parse { line, message };
        if record.len() < 2 {
            return Err(parse_err(
                "expected a label and at least one feature".into(),
            ));
        }
        let d = record.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(parse_err(format!("{d} features, expected {expected}")));
            }
            _ => {}
        }
        let label: u32 = record[0].parse().map_err(|_| {
            parse_err(format!(
                "label {:?} is not a non-negative integer",
                &record[0]
            ))
        })?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("feature {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("feature {field:?} is not finite")));
            }
            values.push(v);
        }
    }
    let Some(dim) = dim else {
        return Err(HdcError::Parse {
            line: 1,
            message: "empty file".into(),
        });
    };
    Dataset::new(Matrix::new(labels.len(), dim, values)?, labels)
}

/// Writes `dataset` using the shortest round-trip float formatting.
pub fn write_csv<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for (i, label) in dataset.labels.iter().enumerate() {
        write!(out, "{label}")?;
        for v in dataset.features.row(i) {
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| HdcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(dataset, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| HdcError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub centroid_scale: f64,
    pub noise_sigma: f64,
    /// Share of each class displaced to a foreign centroid, in [0, 1).
    pub hard_fraction_mix: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 50,
            dim: 32,
            centroid_scale: 1.0,
            noise_sigma: 0.9,
            hard_fraction_mix: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.dim == 0 {
            return Err(HdcError::Config("synthetic counts must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(HdcError::Config(
                "noise_sigma must be finite and >= 0".into(),
            ));
        }
        if !(self.centroid_scale >= 0.0 && self.centroid_scale.is_finite()) {
            return Err(HdcError::Config(
                "centroid_scale must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.hard_fraction_mix) {
            return Err(HdcError::Config(
                "hard_fraction_mix must lie in [0, 1)".into(),
            ));
        }
        if self.hard_fraction_mix > 0.0 && self.num_classes < 2 {
            return Err(HdcError::Config(
                "displaced points need a second class".into(),
            ));
        }
        Ok(())
    }

    /// `⌊mix · per_class⌋`.
    pub fn displaced_per_class(&self) -> usize {
        (self.hard_fraction_mix * self.per_class as f64).floor() as usize
    }
}

/// Gaussian clusters around uniform centroids. Rows are class-major; the last
/// [`SynthConfig::displaced_per_class`] rows of each class are drawn around a
/// foreign centroid but keep their own label.
pub fn synth_clusters(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let s = config.centroid_scale;
    let centroids: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| {
            (0..config.dim)
                .map(|_| {
                    if s > 0.0 {
                        rng.random_range(-s..=s)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| HdcError::Config(format!("noise_sigma: {e}")))?;
    let displaced = config.displaced_per_class();
    let mut values = Vec::with_capacity(config.num_classes * config.per_class * config.dim);
    let mut labels = Vec::with_capacity(config.num_classes * config.per_class);
    for class in 0..config.num_classes {
        for i in 0..config.per_class {
            let anchor = if i >= config.per_class - displaced {
                let mut other = rng.random_range(0..config.num_classes - 1);
                if other >= class {
                    other += 1;
                }
                other
            } else {
                class
            };
            for &c in &centroids[anchor] {
                values.push(c + noise.sample(&mut rng));
            }
            labels.push(class as u32);
        }
    }
    Dataset::new(Matrix::new(labels.len(), config.dim, values)?, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub classes_per_batch: usize,
    pub images_per_class: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            classes_per_batch: 10,
            images_per_class: 10,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes_per_batch < 2 || self.images_per_class < 2 {
            return Err(HdcError::Config(
                "batches need at least 2 classes and 2 images per class".into(),
            ));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.images_per_class
    }
}

/// `P` distinct classes drawn uniformly among those with at least `Q` rows,
/// then `Q` rows of each without replacement. Indices come out grouped by
/// class in draw order.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>> {
    sampler.validate()?;
    let (p, q) = (sampler.classes_per_batch, sampler.images_per_class);
    let eligible: Vec<&Vec<usize>> = dataset
        .class_index
        .values()
        .filter(|rows| rows.len() >= q)
        .collect();
    if eligible.len() < p {
        return Err(HdcError::Sampling(format!(
            "{p} classes requested, only {} of {} classes have at least {q} rows",
            eligible.len(),
            dataset.num_classes()
        )));
    }
    let mut batch = Vec::with_capacity(p * q);
    for rows in eligible.choose_multiple(rng, p) {
        batch.extend(rows.choose_multiple(rng, q).copied());
    }
    Ok(batch)
}

/// A sampler with its own seeded RNG stream.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, rng })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn next_batch(&mut self, dataset: &Dataset) -> Result<Vec<usize>> {
        sample_batch(dataset, &self.config, &mut self.rng)
    }
}
