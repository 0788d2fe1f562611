//! Central finite-difference checks of reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::centroids::{BankView, CentroidBank};
use crate::error::{Error, Result};
use crate::model::{AdaptationModel, Architecture};
use crate::objectives::{
    afem_loss, alignment_term, ordering_loss, source_cls_loss, source_fisher_loss, target_fisher_loss, total_loss,
    DomainInputs, LossConfig, LossInputs, SpaceInput,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `max_i |a_i − n_i| / max(1, |n_i|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum was reached.
    pub worst_index: usize,
    pub evaluations: usize,
}

/// Compares `analytic` with central differences of `f` around `theta`.
///
/// Returns a `NonFinite` error naming the coordinate if any perturbed
/// evaluation is not finite.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    theta: &[f64],
    eps: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != theta.len() {
        return Err(Error::dim(
            "grad_check",
            format!("{} analytic entries for {} parameters", analytic.len(), theta.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut x = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        evaluations: 0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x)?;
        x[i] = orig - eps;
        let minus = f(&x)?;
        x[i] = orig;
        report.evaluations += 2;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluation at parameter index {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient at parameter index {i}")));
        }
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Loss terms covered by [`run_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    TargetEntropy,
    TargetFisher,
    TargetOrdering,
    SourceCls,
    SourceFisher,
    SourceOrdering,
    Alignment,
    Overall,
}

impl LossTerm {
    pub const ALL: [LossTerm; 8] = [
        LossTerm::TargetEntropy,
        LossTerm::TargetFisher,
        LossTerm::TargetOrdering,
        LossTerm::SourceCls,
        LossTerm::SourceFisher,
        LossTerm::SourceOrdering,
        LossTerm::Alignment,
        LossTerm::Overall,
    ];

    pub fn id(self) -> &'static str {
        match self {
            LossTerm::TargetEntropy => "target_entropy",
            LossTerm::TargetFisher => "target_fisher",
            LossTerm::TargetOrdering => "target_ordering",
            LossTerm::SourceCls => "source_cls",
            LossTerm::SourceFisher => "source_fisher",
            LossTerm::SourceOrdering => "source_ordering",
            LossTerm::Alignment => "alignment",
            LossTerm::Overall => "overall",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub eps: f64,
    pub seed: u64,
    /// Adds 1 to the first analytic gradient entry before comparing, so a
    /// working checker must report a failure.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            eps: 1e-6,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub term: LossTerm,
    pub classifier_layers: usize,
    pub report: GradCheckReport,
}

/// Small fixed problem: model, batches, banks warmed up on other batches,
/// and target pseudo-labels frozen at the starting parameters.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub model: AdaptationModel,
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub xt: Tensor,
    pub pseudo: Vec<usize>,
    pub source_banks: Vec<CentroidBank>,
    pub target_banks: Vec<CentroidBank>,
    pub loss: LossConfig,
    pub lambda: f64,
}

fn spaces(views: &[BankView], f: [Var; 2]) -> Vec<SpaceInput<'_>> {
    views.iter().zip(f).map(|(bank, features)| SpaceInput { features, bank }).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("valid sd");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

impl Scenario {
    /// Builds the scenario for a one- or two-layer classifier.
    pub fn new(classifier_layers: usize, seed: u64) -> Result<Self> {
        let hidden = match classifier_layers {
            1 => None,
            2 => Some(5),
            n => return Err(Error::Config(format!("classifier must have 1 or 2 layers, got {n}"))),
        };
        let k = 3;
        let arch = Architecture {
            input_dim: 3,
            extractor_dims: vec![8, 6],
            classifier_hidden: hidden,
            num_classes: k,
        };
        let model = AdaptationModel::new(arch.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let cycle = |n: usize| -> Vec<usize> { (0..n).map(|i| i % k).collect() };
        let xs = gaussian(&mut rng, 6, 3);
        let ys = cycle(6);
        let xt = gaussian(&mut rng, 7, 3);

        // Warm every centroid with separate batches whose labels cover all
        // classes, so the checked step exercises the moving-average branch.
        let banks_for = |dims: &[usize]| -> Result<Vec<CentroidBank>> {
            dims.iter().map(|&d| CentroidBank::new(k, d, 0.7)).collect()
        };
        let dims: Vec<usize> = match hidden {
            Some(h) => vec![arch.feature_dim(), h],
            None => vec![arch.feature_dim()],
        };
        let mut source_banks = banks_for(&dims)?;
        let mut target_banks = banks_for(&dims)?;
        for banks in [&mut source_banks, &mut target_banks] {
            let warm = gaussian(&mut rng, 6, 3);
            let inf = model.infer(&warm)?;
            let labels = cycle(6);
            let mut g = Graph::new();
            for (bank, f) in banks.iter_mut().zip([inf.features, inf.lifted]) {
                let v = g.constant(f);
                bank.update(&mut g, v, &labels)?;
            }
        }
        let pseudo = model.predict(&xt)?;
        Ok(Scenario {
            model,
            xs,
            ys,
            xt,
            pseudo,
            source_banks,
            target_banks,
            loss: LossConfig::default(),
            lambda: 0.7,
        })
    }

    /// Value of `term` at flat parameters `theta`, and its gradient when
    /// `with_grad` is set. Banks are cloned, so repeated calls see the same
    /// warm state.
    pub fn evaluate(&self, term: LossTerm, theta: &[f64], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let mut model = self.model.clone();
        model.set_flat(theta)?;
        let temps = self.loss.effective_temperatures();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let xs = g.constant(self.xs.clone());
        let xt = g.constant(self.xt.clone());
        let fs = bound.forward(&mut g, xs)?;
        let ft = bound.forward(&mut g, xt)?;
        let update = |g: &mut Graph, banks: &[CentroidBank], fw: [Var; 2], labels: &[usize]| {
            banks
                .iter()
                .cloned()
                .zip(fw)
                .map(|(mut b, f)| b.update(g, f, labels))
                .collect::<Result<Vec<BankView>>>()
        };
        let sv = update(&mut g, &self.source_banks, [fs.features, fs.lifted], &self.ys)?;
        let tv = update(&mut g, &self.target_banks, [ft.features, ft.lifted], &self.pseudo)?;
        let root = match term {
            LossTerm::TargetEntropy => afem_loss(&mut g, ft.logits, temps.entropy)?,
            LossTerm::TargetFisher => target_fisher_loss(
                &mut g,
                &spaces(&tv, [ft.features, ft.lifted]),
                temps.fisher_within,
                temps.fisher_between,
            )?,
            LossTerm::TargetOrdering => ordering_loss(&mut g, &bound, &tv, temps.ordering)?,
            LossTerm::SourceCls => source_cls_loss(&mut g, fs.logits, &self.ys, temps.cls)?,
            LossTerm::SourceFisher => source_fisher_loss(
                &mut g,
                &spaces(&sv, [fs.features, fs.lifted]),
                &self.ys,
                temps.fisher_within,
                temps.fisher_between,
            )?,
            LossTerm::SourceOrdering => ordering_loss(&mut g, &bound, &sv, temps.ordering)?,
            LossTerm::Alignment => alignment_term(&mut g, &sv, &tv)?,
            LossTerm::Overall => {
                let inputs = LossInputs {
                    model: &bound,
                    source: Some(DomainInputs {
                        forward: fs,
                        banks: &sv,
                    }),
                    source_labels: &self.ys,
                    target: Some(DomainInputs {
                        forward: ft,
                        banks: &tv,
                    }),
                };
                total_loss(&mut g, &inputs, self.lambda, &self.loss)?.0
            }
        };
        let value = g.value(root).item()?;
        if !with_grad {
            return Ok((value, None));
        }
        let grads = g.backward(root)?;
        let flat = bound
            .parameters()
            .into_iter()
            .flat_map(|v| grads.get(v).into_data())
            .collect();
        Ok((value, Some(flat)))
    }

    pub fn check(&self, term: LossTerm, eps: f64, inject_fault: bool) -> Result<GradCheckReport> {
        let theta = self.model.flatten();
        let (_, grad) = self.evaluate(term, &theta, true)?;
        let mut analytic = grad.expect("requested");
        if inject_fault {
            analytic[0] += 1.0;
        }
        grad_check(|x| self.evaluate(term, x, false).map(|r| r.0), &analytic, &theta, eps)
    }
}

/// Checks every loss term on one- and two-layer classifiers.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(2 * LossTerm::ALL.len());
    for layers in [1, 2] {
        let scenario = Scenario::new(layers, opts.seed)?;
        for term in LossTerm::ALL {
            out.push(SuiteEntry {
                term,
                classifier_layers: layers,
                report: scenario.check(term, opts.eps, opts.inject_fault)?,
            });
        }
    }
    Ok(out)
}
