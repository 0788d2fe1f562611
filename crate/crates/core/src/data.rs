//! Datasets, synthetic domain-shift generators, CSV ingestion and batching.
//!
//! Target labels are kept on the [`Dataset`] for evaluation only. Training
//! code sees target data through [`UnlabeledView`], which has no label
//! accessor at all:
//!
//! ```compile_fail
//! use discluster::data::{gen_two_moons_shift, TwoMoonsShift};
//! let (_, target) = gen_two_moons_shift(&TwoMoonsShift::default()).unwrap();
//! let view = target.train_view();
//! let _ = view.labels();
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    domain_tag: String,
    num_classes: usize,
}

/// Label-free view of a dataset handed to the training loop.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    features: &'a Tensor,
    domain_tag: &'a str,
    num_classes: usize,
}

impl<'a> UnlabeledView<'a> {
    pub fn features(&self) -> &'a Tensor {
        self.features
    }

    pub fn domain_tag(&self) -> &'a str {
        self.domain_tag
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_features(features: &Tensor) -> Result<()> {
    features.dims2()?;
    if !features.is_finite() {
        return Err(Error::NonFinite("dataset features".into()));
    }
    Ok(())
}

impl Dataset {
    pub fn labeled(
        features: Tensor,
        labels: Vec<usize>,
        domain_tag: impl Into<String>,
        num_classes: usize,
    ) -> Result<Self> {
        check_features(&features)?;
        if labels.len() != features.rows() {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels: Some(labels),
            domain_tag: domain_tag.into(),
            num_classes,
        })
    }

    pub fn unlabeled(features: Tensor, domain_tag: impl Into<String>, num_classes: usize) -> Result<Self> {
        check_features(&features)?;
        Ok(Dataset {
            features,
            labels: None,
            domain_tag: domain_tag.into(),
            num_classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn train_view(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
            domain_tag: &self.domain_tag,
            num_classes: self.num_classes,
        }
    }

    /// Sets the class count, checking existing labels against it.
    pub fn with_num_classes(mut self, k: usize) -> Result<Self> {
        if let Some(labels) = &self.labels {
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::Config(format!("label {bad} out of range for {k} classes")));
            }
        }
        self.num_classes = k;
        Ok(self)
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rows() != self.features.rows() {
            return Err(Error::dim("with_features", "row count changed"));
        }
        check_features(&features)?;
        self.features = features;
        Ok(self)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in self.labels().unwrap_or(&[]) {
            h[y] += 1;
        }
        h
    }
}

/// Per-column standardisation fitted on one dataset and applied to others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let nf = n.max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / nf;
            }
        }
        let mut var = vec![0.0; d];
        for r in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / nf;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::dim(
                "standardize",
                format!("{} columns, fitted on {}", x.cols(), self.mean.len()),
            ));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoMoonsShift {
    /// Samples per domain.
    pub n: usize,
    pub noise_sd: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    pub seed: u64,
}

impl Default for TwoMoonsShift {
    fn default() -> Self {
        TwoMoonsShift {
            n: 400,
            noise_sd: 0.1,
            rotation_deg: 40.0,
            translation: [0.0, 0.0],
            seed: 0,
        }
    }
}

/// Rotates 2-D points about the origin and then translates them.
pub fn rotate_translate(points: &Tensor, degrees: f64, translation: [f64; 2]) -> Result<Tensor> {
    if points.cols() != 2 {
        return Err(Error::dim("rotate_translate", "points must be 2-D"));
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let mut out = points.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let (x, y) = (r[0], r[1]);
        r[0] = c * x - s * y + translation[0];
        r[1] = s * x + c * y + translation[1];
    }
    Ok(out)
}

fn two_moons(n: usize, noise_sd: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let angle = |i: usize, count: usize| {
        if count > 1 {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        } else {
            0.0
        }
    };
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        data.push(t.cos() + noise.sample(rng));
        data.push(t.sin() + noise.sample(rng));
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        data.push(1.0 - t.cos() + noise.sample(rng));
        data.push(0.5 - t.sin() + noise.sample(rng));
        labels.push(1);
    }
    Ok((Tensor::matrix(n, 2, data)?, labels))
}

fn target_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Centre of the noise-free two-moons shape.
pub const MOONS_CENTER: [f64; 2] = [0.5, 0.25];

/// Two-moons source domain and a rotated, translated target domain.
///
/// The target is rotated about [`MOONS_CENTER`], so the rotation alone does
/// not move the point cloud; `translation` is applied afterwards. Both domains draw their noise from independent streams of `seed`; the
/// target labels are returned on the dataset for evaluation.
pub fn gen_two_moons_shift(p: &TwoMoonsShift) -> Result<(Dataset, Dataset)> {
    if p.n < 2 {
        return Err(Error::Config(format!("two moons needs n >= 2, got {}", p.n)));
    }
    if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
        return Err(Error::Config(format!("noise_sd must be non-negative, got {}", p.noise_sd)));
    }
    let (xs, ys) = two_moons(p.n, p.noise_sd, &mut ChaCha8Rng::seed_from_u64(p.seed))?;
    let (xt, yt) = two_moons(p.n, p.noise_sd, &mut target_stream(p.seed))?;
    // Rotating about c equals rotating about the origin, then adding c − R·c.
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let [cx, cy] = MOONS_CENTER;
    let shift = [
        cx - (cos * cx - sin * cy) + p.translation[0],
        cy - (sin * cx + cos * cy) + p.translation[1],
    ];
    let xt = rotate_translate(&xt, p.rotation_deg, shift)?;
    Ok((
        Dataset::labeled(xs, ys, "source", 2)?,
        Dataset::labeled(xt, yt, "target", 2)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsShift {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// Distance every target class mean moves along the all-ones direction.
    pub mean_shift: f64,
    /// Factor applied to the target covariance.
    pub cov_scale: f64,
    pub seed: u64,
}

impl Default for BlobsShift {
    fn default() -> Self {
        BlobsShift {
            num_classes: 3,
            n_per_class: 100,
            dim: 2,
            mean_shift: 2.0,
            cov_scale: 1.5,
            seed: 0,
        }
    }
}

const BLOB_RADIUS: f64 = 5.0;

impl BlobsShift {
    /// Source class means: evenly spaced on a circle of radius 5 in the
    /// first two coordinates (on a line when `dim == 1`).
    pub fn source_means(&self) -> Vec<Vec<f64>> {
        (0..self.num_classes)
            .map(|k| {
                let mut m = vec![0.0; self.dim];
                if self.dim == 1 {
                    m[0] = BLOB_RADIUS * k as f64;
                } else {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / self.num_classes as f64;
                    m[0] = BLOB_RADIUS * a.cos();
                    m[1] = BLOB_RADIUS * a.sin();
                }
                m
            })
            .collect()
    }

    pub fn target_means(&self) -> Vec<Vec<f64>> {
        let step = self.mean_shift / (self.dim as f64).sqrt();
        self.source_means()
            .into_iter()
            .map(|m| m.into_iter().map(|v| v + step).collect())
            .collect()
    }

    pub fn target_sd(&self) -> f64 {
        self.cov_scale.sqrt()
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.n_per_class == 0 || self.dim == 0 {
            return Err(Error::Config(
                "blobs need >= 2 classes, >= 1 sample per class and dim >= 1".into(),
            ));
        }
        if !(self.cov_scale > 0.0 && self.cov_scale.is_finite()) || !self.mean_shift.is_finite() {
            return Err(Error::Config("blobs cov_scale must be positive and mean_shift finite".into()));
        }
        Ok(())
    }
}

fn blobs(means: &[Vec<f64>], n_per_class: usize, sd: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, Vec<usize>)> {
    let d = means[0].len();
    let normal = Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(means.len() * n_per_class * d);
    let mut labels = Vec::with_capacity(means.len() * n_per_class);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(mean.iter().map(|m| m + normal.sample(rng)));
            labels.push(k);
        }
    }
    Ok((Tensor::matrix(labels.len(), d, data)?, labels))
}

/// Isotropic Gaussian blobs with shifted, rescaled target classes.
pub fn gen_gaussian_blobs_shift(p: &BlobsShift) -> Result<(Dataset, Dataset)> {
    p.validate()?;
    let (xs, ys) = blobs(&p.source_means(), p.n_per_class, 1.0, &mut ChaCha8Rng::seed_from_u64(p.seed))?;
    let (xt, yt) = blobs(&p.target_means(), p.n_per_class, p.target_sd(), &mut target_stream(p.seed))?;
    Ok((
        Dataset::labeled(xs, ys, "source", p.num_classes)?,
        Dataset::labeled(xt, yt, "target", p.num_classes)?,
    ))
}

/// Reads `f1,...,fd,label`. A label of `-1` marks an unlabelled row; a file
/// must be all labelled or all unlabelled. The class count of a labelled
/// file is `max label + 1` (0 for unlabelled files); override it with
/// [`Dataset::with_num_classes`].
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(&e, path))?;
    let headers = reader.headers().map_err(|e| csv_error(&e, path))?.clone();
    let d = headers.len().saturating_sub(1);
    let expected: Vec<String> = (1..=d).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{}: header must be f1,...,fd,label", path.display()),
        });
    }

    let mut data = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e, path))?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, cell) in record.iter().enumerate() {
            if i < d {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("non-numeric feature {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        msg: format!("non-finite feature {cell:?}"),
                    });
                }
                data.push(v);
            } else {
                let y: i64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("label {cell:?} is not an integer"),
                })?;
                if y < -1 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("label {y} is negative"),
                    });
                }
                if let Some(&first) = labels.first() {
                    if (first == -1) != (y == -1) {
                        return Err(Error::Parse {
                            line,
                            msg: "file mixes labelled and unlabelled rows".into(),
                        });
                    }
                }
                labels.push(y);
            }
        }
    }
    let n = labels.len();
    let features = Tensor::matrix(n, d, data)?;
    let tag = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    if labels.first().is_some_and(|&y| y >= 0) {
        let labels: Vec<usize> = labels.into_iter().map(|y| y as usize).collect();
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::labeled(features, labels, tag, k)
    } else {
        Dataset::unlabeled(features, tag, 0)
    }
}

fn csv_error(e: &csv::Error, path: &Path) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))),
        _ => Error::Parse {
            line,
            msg: format!("{}: {e}", path.display()),
        },
    }
}

/// Writes the CSV format read by [`load_csv`].
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| csv_error(&e, path.as_ref()))?;
    let d = dataset.dim();
    let header: Vec<String> = (1..=d).map(|i| format!("f{i}")).chain(["label".to_string()]).collect();
    w.write_record(&header).map_err(|e| csv_error(&e, path.as_ref()))?;
    for (i, row) in dataset.features().iter_rows().enumerate() {
        let label = dataset.labels().map_or(-1, |l| l[i] as i64);
        let rec: Vec<String> = row.iter().map(|v| v.to_string()).chain([label.to_string()]).collect();
        w.write_record(&rec).map_err(|e| csv_error(&e, path.as_ref()))?;
    }
    w.flush()?;
    Ok(())
}

/// Concatenates several source datasets into one.
pub fn merge_sources(datasets: &[Dataset]) -> Result<Dataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Config("no datasets to merge".into()))?;
    let (d, k) = (first.dim(), first.num_classes());
    for ds in datasets {
        if ds.dim() != d || ds.num_classes() != k {
            return Err(Error::Config(format!(
                "cannot merge {} (d={}, K={}) with {} (d={d}, K={k})",
                ds.domain_tag(),
                ds.dim(),
                ds.num_classes(),
                first.domain_tag()
            )));
        }
        if ds.is_labeled() != first.is_labeled() {
            return Err(Error::Config("cannot merge labelled with unlabelled datasets".into()));
        }
    }
    let n = datasets.iter().map(Dataset::len).sum();
    let data: Vec<f64> = datasets.iter().flat_map(|ds| ds.features().data().iter().copied()).collect();
    let features = Tensor::matrix(n, d, data)?;
    let tag = datasets.iter().map(Dataset::domain_tag).collect::<Vec<_>>().join("+");
    if first.is_labeled() {
        let labels = datasets.iter().flat_map(|ds| ds.labels().unwrap_or(&[]).iter().copied()).collect();
        Dataset::labeled(features, labels, tag, k)
    } else {
        Dataset::unlabeled(features, tag, k)
    }
}

/// Cycling shuffled index stream over `0..n`.
#[derive(Clone, Debug)]
struct IndexStream {
    order: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(n: usize) -> Self {
        IndexStream {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.reshuffle(rng);
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Row indices for one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Paired shuffled batches over two index ranges. One epoch is one pass over
/// the larger range; the smaller one cycles.
#[derive(Clone, Debug)]
pub struct IndexBatcher {
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    source: IndexStream,
    target: IndexStream,
}

impl IndexBatcher {
    pub fn new(n_source: usize, n_target: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_source == 0 || n_target == 0 {
            return Err(Error::Config("batching needs non-empty source and target".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        Ok(IndexBatcher {
            n_source,
            n_target,
            batch_size,
            rng,
            source: IndexStream::new(n_source),
            target: IndexStream::new(n_target),
        })
    }

    fn epoch_len(&self) -> usize {
        self.n_source.max(self.n_target)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_len().div_ceil(self.batch_size)
    }

    pub fn next_epoch(&mut self) -> Vec<StepIndices> {
        let len = self.epoch_len();
        if self.n_source == len {
            self.source.reshuffle(&mut self.rng);
        }
        if self.n_target == len {
            self.target.reshuffle(&mut self.rng);
        }
        let mut steps = Vec::with_capacity(self.steps_per_epoch());
        let mut done = 0;
        while done < len {
            let chunk = self.batch_size.min(len - done);
            done += chunk;
            let source = self.source.take(chunk.min(self.n_source), &mut self.rng);
            let target = self.target.take(chunk.min(self.n_target), &mut self.rng);
            steps.push(StepIndices { source, target });
        }
        steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub features: Tensor,
}

/// Stream of (labelled source batch, unlabelled target batch) pairs.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    source: &'a Dataset,
    source_labels: &'a [usize],
    target: UnlabeledView<'a>,
    indices: IndexBatcher,
}

impl<'a> Batcher<'a> {
    pub fn new(source: &'a Dataset, target: UnlabeledView<'a>, batch_size: usize, seed: u64) -> Result<Self> {
        let source_labels = source
            .labels()
            .ok_or_else(|| Error::Config("source dataset must be labelled".into()))?;
        Ok(Batcher {
            source,
            source_labels,
            target,
            indices: IndexBatcher::new(source.len(), target.len(), batch_size, seed)?,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.indices.steps_per_epoch()
    }

    pub fn next_epoch(&mut self) -> Vec<(SourceBatch, TargetBatch)> {
        self.indices
            .next_epoch()
            .into_iter()
            .map(|step| {
                let source = SourceBatch {
                    features: self.source.features().select_rows(&step.source),
                    labels: step.source.iter().map(|&i| self.source_labels[i]).collect(),
                };
                let target = TargetBatch {
                    features: self.target.features().select_rows(&step.target),
                };
                (source, target)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unrotated_noise_free_domains_coincide() {
        let p = TwoMoonsShift {
            n: 50,
            noise_sd: 0.0,
            rotation_deg: 0.0,
            translation: [0.0, 0.0],
            seed: 3,
        };
        let (s, t) = gen_two_moons_shift(&p).unwrap();
        assert_eq!(s.features(), t.features());
        assert_eq!(s.labels(), t.labels());
    }

    #[test]
    fn generator_is_pure() {
        let p = TwoMoonsShift::default();
        assert_eq!(gen_two_moons_shift(&p).unwrap(), gen_two_moons_shift(&p).unwrap());
        let b = BlobsShift::default();
        assert_eq!(gen_gaussian_blobs_shift(&b).unwrap(), gen_gaussian_blobs_shift(&b).unwrap());
    }

    #[test]
    fn half_turn_reflects_through_moons_center() {
        let p = TwoMoonsShift {
            n: 40,
            noise_sd: 0.0,
            rotation_deg: 180.0,
            translation: [0.0, 0.0],
            seed: 0,
        };
        let (s, t) = gen_two_moons_shift(&p).unwrap();
        for (a, b) in s.features().iter_rows().zip(t.features().iter_rows()) {
            assert!((a[0] + b[0] - 2.0 * MOONS_CENTER[0]).abs() < 1e-12);
            assert!((a[1] + b[1] - 2.0 * MOONS_CENTER[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_by_180_negates() {
        let pts = Tensor::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]).unwrap();
        let r = rotate_translate(&pts, 180.0, [0.0, 0.0]).unwrap();
        for (a, b) in r.data().iter().zip(pts.data()) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_moons_class_balance() {
        for n in [2, 7, 400, 401] {
            let p = TwoMoonsShift {
                n,
                ..Default::default()
            };
            let (s, t) = gen_two_moons_shift(&p).unwrap();
            for ds in [&s, &t] {
                let h = ds.label_histogram();
                assert_eq!(h.iter().sum::<usize>(), n);
                assert!((h[0] as f64 - n as f64 / 2.0).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn invalid_generator_params() {
        let p = TwoMoonsShift {
            n: 1,
            ..Default::default()
        };
        assert!(matches!(gen_two_moons_shift(&p), Err(Error::Config(_))));
        let p = TwoMoonsShift {
            noise_sd: -1.0,
            ..Default::default()
        };
        assert!(matches!(gen_two_moons_shift(&p), Err(Error::Config(_))));
        let b = BlobsShift {
            num_classes: 1,
            ..Default::default()
        };
        assert!(matches!(gen_gaussian_blobs_shift(&b), Err(Error::Config(_))));
    }

    #[test]
    fn blobs_without_shift_share_means() {
        let b = BlobsShift {
            mean_shift: 0.0,
            cov_scale: 1.0,
            ..Default::default()
        };
        assert_eq!(b.source_means(), b.target_means());
        assert_eq!(b.target_sd(), 1.0);
        let (s, t) = gen_gaussian_blobs_shift(&b).unwrap();
        assert!(s.label_histogram().iter().all(|&c| c == b.n_per_class));
        assert!(t.label_histogram().iter().all(|&c| c == b.n_per_class));
    }

    #[test]
    fn merge_counts_and_histograms() {
        let (s, t) = gen_gaussian_blobs_shift(&BlobsShift::default()).unwrap();
        let one = merge_sources(std::slice::from_ref(&s)).unwrap();
        assert_eq!(one.features(), s.features());
        assert_eq!(one.labels(), s.labels());
        let both = merge_sources(&[s.clone(), t.clone()]).unwrap();
        assert_eq!(both.len(), s.len() + t.len());
        assert_eq!(both.domain_tag(), "source+target");
        let expected: Vec<usize> = s
            .label_histogram()
            .iter()
            .zip(t.label_histogram())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(both.label_histogram(), expected);

        let other = gen_gaussian_blobs_shift(&BlobsShift {
            dim: 3,
            ..Default::default()
        })
        .unwrap()
        .0;
        assert!(matches!(merge_sources(&[s, other]), Err(Error::Config(_))));
    }

    #[test]
    fn standardizer_zero_mean_unit_sd() {
        let x = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]]).unwrap();
        let st = Standardizer::fit(&x);
        let y = st.apply(&x).unwrap();
        let col0: Vec<f64> = y.iter_rows().map(|r| r[0]).collect();
        assert!((col0.iter().sum::<f64>()).abs() < 1e-12);
        assert!((col0.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        // Constant column is centred but not scaled.
        assert!(y.iter_rows().all(|r| r[1] == 0.0));
    }

    #[test]
    fn full_batch_when_batch_exceeds_data() {
        let mut b = IndexBatcher::new(10, 6, 64, 0).unwrap();
        assert_eq!(b.steps_per_epoch(), 1);
        let steps = b.next_epoch();
        assert_eq!(steps.len(), 1);
        let mut s = steps[0].source.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        let mut t = steps[0].target.clone();
        t.sort_unstable();
        assert_eq!(t, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn larger_domain_covered_once_per_epoch() {
        let mut b = IndexBatcher::new(100, 37, 16, 5).unwrap();
        for _ in 0..3 {
            let steps = b.next_epoch();
            assert_eq!(steps.len(), 7);
            let mut all: Vec<usize> = steps.iter().flat_map(|s| s.source.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
            for s in &steps {
                assert_eq!(s.source.len(), s.target.len());
                assert!(s.target.iter().all(|&i| i < 37));
            }
        }
    }

    #[test]
    fn batcher_is_deterministic() {
        let (s, t) = gen_two_moons_shift(&TwoMoonsShift::default()).unwrap();
        let mut a = Batcher::new(&s, t.train_view(), 64, 11).unwrap();
        let mut b = Batcher::new(&s, t.train_view(), 64, 11).unwrap();
        assert_eq!(a.next_epoch(), b.next_epoch());
        assert_eq!(a.next_epoch(), b.next_epoch());
    }

    #[test]
    fn batcher_requires_labelled_source() {
        let (_, t) = gen_two_moons_shift(&TwoMoonsShift::default()).unwrap();
        let unl = Dataset::unlabeled(t.features().clone(), "t", 2).unwrap();
        assert!(Batcher::new(&unl, t.train_view(), 8, 0).is_err());
    }
}
