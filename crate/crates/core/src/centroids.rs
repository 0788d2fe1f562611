//! Running class/cluster centroids with a moving-average update.
//!
//! A [`CentroidBank`] stores `K` centroids as a detached buffer that persists
//! across training steps. [`CentroidBank::update`] also returns the updated
//! centroids as a graph expression of the current batch's features,
//! `m̂_k = α·detach(m_k) + (1−α)·mean_{j∈J_k} f_j`, so losses defined on
//! centroids send gradient into the feature extractor through the current
//! batch only.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    centroids: Tensor,
    initialized: Vec<bool>,
    alpha: f64,
}

/// The in-graph centroids of one bank after an update.
#[derive(Clone, Debug)]
pub struct BankView {
    /// `K × m` centroid matrix.
    pub centroids: Var,
    pub initialized: Vec<bool>,
}

impl BankView {
    pub fn num_classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_ready(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn require_ready(&self) -> Result<()> {
        match self.initialized.iter().position(|&b| !b) {
            None => Ok(()),
            Some(k) => Err(Error::State(format!("centroid {k} is not initialized"))),
        }
    }
}

/// Per-row argmax of the logits, lowest index on ties.
pub fn assign_pseudo_labels(logits: &Tensor) -> Vec<usize> {
    logits.iter_rows().map(argmax).collect()
}

impl CentroidBank {
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(CentroidBank {
            centroids: Tensor::zeros(num_classes, dim),
            initialized: vec![false; num_classes],
            alpha,
        })
    }

    /// Rebuilds a bank from stored state (checkpoint loading).
    pub fn from_parts(centroids: Tensor, initialized: Vec<bool>, alpha: f64) -> Result<Self> {
        if centroids.rows() != initialized.len() {
            return Err(Error::dim("CentroidBank", "mask length differs from centroid count"));
        }
        let mut bank = Self::new(initialized.len(), centroids.cols(), alpha)?;
        bank.centroids = centroids;
        bank.initialized = initialized;
        Ok(bank)
    }

    pub fn centroids(&self) -> &Tensor {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        self.centroids.row(k)
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn is_ready(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_classes(&self) -> usize {
        self.initialized.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Moving-average update from a batch of `features` with `labels`.
    ///
    /// Classes present in the batch move towards their batch mean (the first
    /// ever update takes the batch mean directly); absent classes keep their
    /// stored value, which enters the returned view as a constant.
    pub fn update(&mut self, g: &mut Graph, features: Var, labels: &[usize]) -> Result<BankView> {
        let (n, m) = g.value(features).dims2()?;
        let k = self.num_classes();
        if m != self.dim() {
            return Err(Error::dim(
                "centroid update",
                format!("features of width {m}, bank of width {}", self.dim()),
            ));
        }
        if labels.len() != n {
            return Err(Error::dim(
                "centroid update",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }

        let mut counts = vec![0usize; k];
        for &y in labels {
            counts[y] += 1;
        }

        // m̂ = carry + S·F where S (K×N) averages each class's rows with the
        // weight of the fresh batch mean, and carry holds the detached part.
        let mut select = Tensor::zeros(k, n);
        let mut carry = Tensor::zeros(k, m);
        for c in 0..k {
            let fresh_weight = match (counts[c], self.initialized[c]) {
                (0, true) => {
                    carry.row_mut(c).copy_from_slice(self.centroids.row(c));
                    continue;
                }
                (0, false) => continue,
                (_, true) => {
                    for (dst, src) in carry.row_mut(c).iter_mut().zip(self.centroids.row(c)) {
                        *dst = self.alpha * src;
                    }
                    1.0 - self.alpha
                }
                (_, false) => 1.0,
            };
            let w = fresh_weight / counts[c] as f64;
            for (j, _) in labels.iter().enumerate().filter(|(_, &y)| y == c) {
                select.row_mut(c)[j] = w;
            }
        }

        let s = g.constant(select);
        let fresh = g.matmul(s, features)?;
        let carry = g.constant(carry);
        let centroids = g.add(carry, fresh)?;

        self.centroids = g.value(centroids).clone();
        for c in 0..k {
            self.initialized[c] |= counts[c] > 0;
        }
        Ok(BankView {
            centroids,
            initialized: self.initialized.clone(),
        })
    }

    /// The stored centroids as a graph constant, without updating.
    pub fn view(&self, g: &mut Graph) -> BankView {
        BankView {
            centroids: g.constant(self.centroids.clone()),
            initialized: self.initialized.clone(),
        }
    }
}

/// `d_w` for every row of `features`: entry `(j, k)` is `−‖f_j − m̂_k‖²`.
pub fn within_vectors(g: &mut Graph, features: Var, bank: &BankView) -> Result<Var> {
    bank.require_ready()?;
    let d = g.sq_dist(features, bank.centroids)?;
    Ok(g.neg(d))
}

/// `d_{b,k}` for every centroid: row `k` holds `−‖m̂_k − m̂_k'‖²`, with an
/// exact zero at `k' = k`.
pub fn between_vectors(g: &mut Graph, bank: &BankView) -> Result<Var> {
    bank.require_ready()?;
    let d = g.sq_dist(bank.centroids, bank.centroids)?;
    Ok(g.neg(d))
}
