//! Feature extractor `F` and classifier `C`.
//!
//! The extractor is a stack of affine+ReLU layers producing the feature space
//! ℱ. The classifier has one affine layer (ℱ → logits) or two
//! (ℱ → ReLU → ℱ↑ → logits). With a single classifier layer the lifted
//! space ℱ↑ coincides with ℱ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output widths of the extractor layers; the last one is the feature
    /// dimension `m`.
    pub extractor_dims: Vec<usize>,
    /// Width of ℱ↑. `None` gives a single-layer classifier.
    pub classifier_hidden: Option<usize>,
    pub num_classes: usize,
}

impl Architecture {
    /// Desk-scale default: `d → 32 → 32` extractor, `32 → 16 → K` classifier.
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            extractor_dims: vec![32, 32],
            classifier_hidden: Some(16),
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn lifted_dim(&self) -> usize {
        self.classifier_hidden.unwrap_or_else(|| self.feature_dim())
    }

    /// Number of feature spaces the centroid losses act on (ℱ, and ℱ↑ when
    /// it is distinct).
    pub fn num_spaces(&self) -> usize {
        if self.classifier_hidden.is_some() {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.extractor_dims.contains(&0) || self.classifier_hidden == Some(0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Extractor,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    /// `1 × fan_out`
    pub bias: Tensor,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..=bound)).collect() };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Affine {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("sized"),
            bias: Tensor::row_vector(b),
        }
    }

    fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationModel {
    arch: Architecture,
    extractor: Vec<Affine>,
    classifier: Vec<Affine>,
}

/// Model parameters registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    extractor: Vec<(Var, Var)>,
    classifier: Vec<(Var, Var)>,
}

/// Outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub lifted: Var,
    pub logits: Var,
}

/// Plain-tensor outputs of [`AdaptationModel::infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub features: Tensor,
    pub lifted: Tensor,
    pub logits: Tensor,
}

impl AdaptationModel {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialisation from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::build(arch, |i, o| Affine::init(i, o, &mut rng)))
    }

    /// All weights and biases zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self::build(arch, Affine::zeroed))
    }

    fn build(arch: Architecture, mut make: impl FnMut(usize, usize) -> Affine) -> Self {
        let mut extractor = Vec::new();
        let mut width = arch.input_dim;
        for &d in &arch.extractor_dims {
            extractor.push(make(width, d));
            width = d;
        }
        let mut classifier = Vec::new();
        if let Some(h) = arch.classifier_hidden {
            classifier.push(make(width, h));
            width = h;
        }
        classifier.push(make(width, arch.num_classes));
        AdaptationModel {
            arch,
            extractor,
            classifier,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    /// Parameter tensors in a fixed order: extractor (weight, bias) pairs,
    /// then classifier pairs.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.extractor
            .iter()
            .chain(&self.classifier)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .iter_mut()
            .chain(self.classifier.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`parameters`](Self::parameters).
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.extractor.len() {
            names.push(format!("extractor.{i}.weight"));
            names.push(format!("extractor.{i}.bias"));
        }
        for i in 0..self.classifier.len() {
            names.push(format!("classifier.{i}.weight"));
            names.push(format!("classifier.{i}.bias"));
        }
        names
    }

    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::Extractor; 2 * self.extractor.len()];
        groups.extend(vec![ParamGroup::Classifier; 2 * self.classifier.len()]);
        groups
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.parameters().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::dim(
                "set_flat",
                format!("{} values for {} parameters", flat.len(), self.num_parameters()),
            ));
        }
        let mut offset = 0;
        for p in self.parameters_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Replaces parameters from tensors in [`parameters`](Self::parameters) order.
    pub fn load_parameters(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let current = self.parameters_mut();
        if tensors.len() != current.len() {
            return Err(Error::dim(
                "load_parameters",
                format!("{} tensors for {} parameters", tensors.len(), current.len()),
            ));
        }
        for (slot, t) in current.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim(
                    "load_parameters",
                    format!("{:?} vs {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Registers the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        self.bind_with(g, true)
    }

    /// Registers the parameters as constants (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundModel {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut reg = |l: &Affine| {
            if trainable {
                (g.leaf(l.weight.clone()), g.leaf(l.bias.clone()))
            } else {
                (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
            }
        };
        let extractor = self.extractor.iter().map(&mut reg).collect();
        let classifier = self.classifier.iter().map(&mut reg).collect();
        BoundModel {
            extractor,
            classifier,
        }
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, batch: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.constant(batch.clone());
        let out = bound.forward(&mut g, x)?;
        Ok(Inference {
            features: g.value(out.features).clone(),
            lifted: g.value(out.lifted).clone(),
            logits: g.value(out.logits).clone(),
        })
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.infer(batch)?.logits)
    }

    /// Per-row argmax of the logits.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }

    /// Region index τ(f): bit `k` is set iff `w_kᵀf + b_k > 0` for the single
    /// classifier layer.
    pub fn region_index(&self, feature: &[f64]) -> Result<Vec<u8>> {
        if self.classifier.len() != 1 {
            return Err(Error::Config(
                "region index needs a single-layer classifier".into(),
            ));
        }
        let layer = &self.classifier[0];
        if feature.len() != layer.weight.rows() {
            return Err(Error::dim(
                "region_index",
                format!("feature of length {}, expected {}", feature.len(), layer.weight.rows()),
            ));
        }
        let f = Tensor::row_vector(feature.to_vec());
        let scores = f.matmul(&layer.weight)?;
        Ok(scores
            .data()
            .iter()
            .zip(layer.bias.data())
            .map(|(s, b)| u8::from(s + b > 0.0))
            .collect())
    }
}

fn affine(g: &mut Graph, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

impl BoundModel {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward> {
        let mut h = x;
        for &layer in &self.extractor {
            let a = affine(g, h, layer)?;
            h = g.relu(a);
        }
        let features = h;
        let lifted = match self.classifier.len() {
            1 => features,
            _ => {
                let a = affine(g, features, self.classifier[0])?;
                g.relu(a)
            }
        };
        let logits = self.last_layer(g, lifted)?;
        Ok(Forward {
            features,
            lifted,
            logits,
        })
    }

    /// Full classifier `C` applied to points of ℱ.
    pub fn classify(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let lifted = match self.classifier.len() {
            1 => features,
            _ => {
                let a = affine(g, features, self.classifier[0])?;
                g.relu(a)
            }
        };
        self.last_layer(g, lifted)
    }

    /// Last affine layer of `C` applied to points of ℱ↑.
    pub fn last_layer(&self, g: &mut Graph, lifted: Var) -> Result<Var> {
        affine(g, lifted, *self.classifier.last().expect("classifier has a layer"))
    }

    /// Parameter leaves in [`AdaptationModel::parameters`] order.
    pub fn parameters(&self) -> Vec<Var> {
        self.extractor
            .iter()
            .chain(&self.classifier)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Temperature softmax of each row, with max-subtraction.
pub fn softmax_t(z: &Tensor, t: f64) -> Result<Tensor> {
    check_temperature(t)?;
    let mut out = z.clone();
    let (n, _) = z.dims2()?;
    for i in 0..n {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / t));
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x / t - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

/// In-graph log of the temperature softmax of each row.
///
/// The row maximum is subtracted as a constant; the softmax is invariant to
/// it so gradients are unaffected.
pub fn log_softmax_t(g: &mut Graph, z: Var, t: f64) -> Result<Var> {
    check_temperature(t)?;
    let scaled = g.scale(z, 1.0 / t);
    let (n, _) = g.value(scaled).dims2()?;
    let maxes: Vec<f64> = g
        .value(scaled)
        .iter_rows()
        .map(|r| r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
        .collect();
    let maxes = g.constant(Tensor::matrix(n, 1, maxes)?);
    let shifted = g.sub_col(scaled, maxes)?;
    let e = g.exp(shifted);
    let s = g.sum_rows(e)?;
    let log_s = g.log(s)?;
    g.sub_col(shifted, log_s)
}

/// Argmax over each row of a logit matrix, lowest index on ties.
pub fn predict_logits(logits: &Tensor) -> Vec<usize> {
    logits.iter_rows().map(argmax).collect()
}
