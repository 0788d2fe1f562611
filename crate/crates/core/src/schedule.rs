//! λ ramp, learning-rate decay and momentum SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Ramp rate of the clustering weight λ.
    pub gamma: f64,
    /// Base learning rate (of the classifier).
    pub eta0: f64,
    pub mu: f64,
    pub nu: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Classifier learning rate divided by extractor learning rate.
    pub classifier_lr_multiplier: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            gamma: 10.0,
            eta0: 0.01,
            mu: 10.0,
            nu: 0.75,
            momentum: 0.9,
            weight_decay: 1e-4,
            classifier_lr_multiplier: 10.0,
            epochs: 200,
            batch_size: 64,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("eta0", self.eta0),
            ("mu", self.mu),
            ("nu", self.nu),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("schedule.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("schedule.momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("schedule.weight_decay must be non-negative".into()));
        }
        if !(self.classifier_lr_multiplier >= 1.0) {
            return Err(Error::Config("schedule.classifier_lr_multiplier must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("schedule.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `(extractor_lr, classifier_lr)` at progress `p`.
    pub fn learning_rates(&self, p: f64) -> Result<(f64, f64)> {
        let eta = lr_at(p, self.eta0, self.mu, self.nu)?;
        Ok((eta / self.classifier_lr_multiplier, eta))
    }
}

fn check_progress(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("training progress must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// `λ_p = 2 / (1 + e^{−γp}) − 1`.
pub fn lambda_at(p: f64, gamma: f64) -> Result<f64> {
    check_progress(p)?;
    Ok(2.0 / (1.0 + (-gamma * p).exp()) - 1.0)
}

/// `η_p = η₀ (1 + μp)^{−ν}`.
pub fn lr_at(p: f64, eta0: f64, mu: f64, nu: f64) -> Result<f64> {
    check_progress(p)?;
    Ok(eta0 * (1.0 + mu * p).powf(-nu))
}

/// Classical momentum SGD with L2 weight decay folded into the gradient:
/// `v ← μ v + g + wd·θ`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Tensor>,
    steps: u64,
}

impl Sgd {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params
                .into_iter()
                .map(|p| Tensor::new(p.shape().to_vec(), vec![0.0; p.len()]).expect("same shape"))
                .collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update. `lrs[i]` is the learning rate of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::dim(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} lrs, {} state slots",
                    params.len(),
                    grads.len(),
                    lrs.len(),
                    self.velocity.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::dim("sgd_step", format!("gradient {i} has shape {:?}", g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at step {}",
                    self.steps
                )));
            }
        }
        for ((p, g), (v, &lr)) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut().zip(lrs)) {
            let pd = p.data_mut();
            for ((x, &gx), vx) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vx = self.momentum * *vx + gx + self.weight_decay * *x;
                *x -= lr * *vx;
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Zeros the momentum buffers and step counter.
    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.steps = 0;
    }
}
