//! End-to-end training loop, evaluation, ablation variants and baselines.
//!
//! One step: forward both batches, pseudo-label the target batch by argmax,
//! update every centroid bank (the updated centroids stay in the graph),
//! assemble `distilling + λ·clustering`, backpropagate, and take an SGD step
//! with per-group learning rates. λ and the learning rate follow the
//! training progress `p = completed_epochs / epochs`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::centroids::{assign_pseudo_labels, BankView, CentroidBank};
use crate::data::{Batcher, Dataset, IndexBatcher, SourceBatch, TargetBatch};
use crate::error::{Error, Result};
use crate::kmeans::kmeans;
use crate::model::{AdaptationModel, Architecture, ParamGroup};
use crate::objectives::{source_cls_loss, total_loss, DomainInputs, LossBreakdown, LossConfig, LossInputs, VariantFlags};
use crate::schedule::{lambda_at, ScheduleConfig, Sgd};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.schedule.validate()?;
        self.loss.validate()
    }

    pub fn with_flags(&self, flags: VariantFlags) -> Self {
        let mut c = self.clone();
        c.loss.variant = flags;
        c
    }
}

/// Source data, target data (labels held back for evaluation) and an
/// optional held-out target test split.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTask {
    pub source: Dataset,
    pub target: Dataset,
    pub target_test: Option<Dataset>,
}

impl DomainTask {
    pub fn new(source: Dataset, target: Dataset) -> Self {
        DomainTask {
            source,
            target,
            target_test: None,
        }
    }

    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        if !self.source.is_labeled() {
            return Err(Error::Config("source data must be labelled".into()));
        }
        for ds in [Some(&self.source), Some(&self.target), self.target_test.as_ref()]
            .into_iter()
            .flatten()
        {
            if ds.dim() != arch.input_dim {
                return Err(Error::Config(format!(
                    "{} has {} features, model expects {}",
                    ds.domain_tag(),
                    ds.dim(),
                    arch.input_dim
                )));
            }
            if ds.is_empty() {
                return Err(Error::Config(format!("{} is empty", ds.domain_tag())));
            }
        }
        Ok(())
    }
}

/// One bank per feature space for each domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Banks {
    pub source: Vec<CentroidBank>,
    pub target: Vec<CentroidBank>,
}

impl Banks {
    pub fn new(arch: &Architecture, alpha: f64) -> Result<Self> {
        let dims: Vec<usize> = match arch.classifier_hidden {
            Some(h) => vec![arch.feature_dim(), h],
            None => vec![arch.feature_dim()],
        };
        let make = || -> Result<Vec<CentroidBank>> {
            dims.iter().map(|&d| CentroidBank::new(arch.num_classes, d, alpha)).collect()
        };
        Ok(Banks {
            source: make()?,
            target: make()?,
        })
    }
}

/// Metrics of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub target_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: AdaptationModel,
    pub banks: Banks,
    pub optimizer: Sgd,
    pub epoch: usize,
    pub seed: u64,
    pub flags: VariantFlags,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = AdaptationModel::new(cfg.arch.clone(), cfg.seed)?;
        let optimizer = Sgd::new(model.parameters(), cfg.schedule.momentum, cfg.schedule.weight_decay);
        Ok(TrainState {
            banks: Banks::new(&cfg.arch, cfg.loss.alpha)?,
            model,
            optimizer,
            epoch: 0,
            seed: cfg.seed,
            flags: cfg.loss.variant,
            history: Vec::new(),
        })
    }

    /// Per-parameter learning rates from `(extractor, classifier)` rates.
    fn param_lrs(&self, (lr_fe, lr_cl): (f64, f64)) -> Vec<f64> {
        self.model
            .parameter_groups()
            .into_iter()
            .map(|g| match g {
                ParamGroup::Extractor => lr_fe,
                ParamGroup::Classifier => lr_cl,
            })
            .collect()
    }
}

/// Fraction of rows of `dataset` whose prediction equals the label.
pub fn evaluate(model: &AdaptationModel, dataset: &Dataset) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Contract(format!("{} has no labels to evaluate against", dataset.domain_tag())))?;
    let predicted = model.predict(dataset.features())?;
    Ok(accuracy(&predicted, labels))
}

/// Fraction of positions where `predicted` and `labels` agree.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// One optimisation step on a source/target batch pair.
///
/// `lrs` is `(extractor_lr, classifier_lr)`.
pub fn train_step(
    state: &mut TrainState,
    loss_cfg: &LossConfig,
    source: &SourceBatch,
    target: &TargetBatch,
    lambda: f64,
    lrs: (f64, f64),
) -> Result<LossBreakdown> {
    let flags = loss_cfg.variant;
    let mut g = Graph::new();
    let bound = state.model.bind(&mut g);

    let xs = g.constant(source.features.clone());
    let fwd_s = bound.forward(&mut g, xs)?;
    let source_views: Vec<BankView> = state
        .banks
        .source
        .iter_mut()
        .zip([fwd_s.features, fwd_s.lifted])
        .map(|(bank, f)| bank.update(&mut g, f, &source.labels))
        .collect::<Result<_>>()?;

    let mut target_views = Vec::new();
    let fwd_t = if flags.uses_target() {
        let xt = g.constant(target.features.clone());
        let fwd = bound.forward(&mut g, xt)?;
        let pseudo = assign_pseudo_labels(g.value(fwd.logits));
        for (bank, f) in state.banks.target.iter_mut().zip([fwd.features, fwd.lifted]) {
            target_views.push(bank.update(&mut g, f, &pseudo)?);
        }
        Some(fwd)
    } else {
        None
    };

    let inputs = LossInputs {
        model: &bound,
        source: Some(DomainInputs {
            forward: fwd_s,
            banks: &source_views,
        }),
        source_labels: &source.labels,
        target: fwd_t.map(|forward| DomainInputs {
            forward,
            banks: &target_views,
        }),
    };
    let (root, breakdown) = total_loss(&mut g, &inputs, lambda, loss_cfg)?;
    if !breakdown.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at epoch {} step {}: {breakdown}",
            state.epoch,
            state.optimizer.steps()
        )));
    }
    let grads = g.backward(root)?;
    let grads: Vec<Tensor> = bound.parameters().into_iter().map(|v| grads.get(v)).collect();
    let lr = state.param_lrs(lrs);
    let mut params = state.model.parameters_mut();
    state.optimizer.step(&mut params, &grads, &lr)?;
    Ok(breakdown)
}

/// Trains from a fresh initialisation.
pub fn train(cfg: &TrainConfig, task: &DomainTask) -> Result<TrainState> {
    train_with(cfg, task, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with(cfg: &TrainConfig, task: &DomainTask, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainState> {
    let state = TrainState::new(cfg)?;
    continue_training(state, cfg, task, on_epoch)
}

/// Runs `cfg.schedule.epochs` more epochs on an existing state, with the
/// schedule progress restarted at zero. History records continue the
/// state's epoch numbering.
pub fn continue_training(
    mut state: TrainState,
    cfg: &TrainConfig,
    task: &DomainTask,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    cfg.validate()?;
    task.validate(&cfg.arch)?;
    state.flags = cfg.loss.variant;
    let epochs = cfg.schedule.epochs;
    let mut batcher = Batcher::new(&task.source, task.target.train_view(), cfg.schedule.batch_size, cfg.seed)?;
    for e in 0..epochs {
        let p = e as f64 / epochs as f64;
        let lambda = if cfg.loss.variant.uses_target() {
            lambda_at(p, cfg.schedule.gamma)?
        } else {
            0.0
        };
        let lrs = cfg.schedule.learning_rates(p)?;
        let mut losses = Vec::with_capacity(batcher.steps_per_epoch());
        for (src, tgt) in batcher.next_epoch() {
            losses.push(train_step(&mut state, &cfg.loss, &src, &tgt, lambda, lrs)?);
        }
        let record = EpochRecord {
            epoch: state.epoch,
            losses: LossBreakdown::mean(&losses),
            target_acc: held_out_accuracy(&state.model, &task.target)?,
            test_acc: task
                .target_test
                .as_ref()
                .map(|t| held_out_accuracy(&state.model, t))
                .transpose()?
                .flatten(),
            lr: lrs.1,
        };
        on_epoch(&record);
        state.history.push(record);
        state.epoch += 1;
    }
    Ok(state)
}

fn held_out_accuracy(model: &AdaptationModel, ds: &Dataset) -> Result<Option<f64>> {
    if ds.is_labeled() {
        evaluate(model, ds).map(Some)
    } else {
        Ok(None)
    }
}

/// The method and its ablations, in the row order of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    PlainEntropy,
    NoFisherOrdering,
    NoFisher,
    NoDistilling,
    NoSourceOrdering,
    NoSourceFisher,
    NoTemperature,
    ExplicitAlignment,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::SourceOnly,
        Variant::PlainEntropy,
        Variant::NoFisherOrdering,
        Variant::NoFisher,
        Variant::NoDistilling,
        Variant::NoSourceOrdering,
        Variant::NoSourceFisher,
        Variant::NoTemperature,
        Variant::ExplicitAlignment,
        Variant::Full,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::PlainEntropy => "em",
            Variant::NoFisherOrdering => "no_fisher_ordering",
            Variant::NoFisher => "no_fisher",
            Variant::NoDistilling => "no_distilling",
            Variant::NoSourceOrdering => "no_source_ordering",
            Variant::NoSourceFisher => "no_source_fisher",
            Variant::NoTemperature => "no_temperature",
            Variant::ExplicitAlignment => "explicit_alignment",
            Variant::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::SourceOnly => "Source Only",
            Variant::PlainEntropy => "DisClusterDA (replacing afem with em)",
            Variant::NoFisherOrdering => "DisClusterDA (w/o Fisher and ordering)",
            Variant::NoFisher => "DisClusterDA (w/o Fisher)",
            Variant::NoDistilling => "DisClusterDA (w/o distilling)",
            Variant::NoSourceOrdering => "DisClusterDA (w/o source ordering)",
            Variant::NoSourceFisher => "DisClusterDA (w/o source Fisher)",
            Variant::NoTemperature => "DisClusterDA (w/o temperature)",
            Variant::ExplicitAlignment => "DisClusterDA (adding explicit domain alignment)",
            Variant::Full => "DisClusterDA",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == id)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.id()).collect();
                Error::Config(format!("unknown variant {id:?}; known: {}", known.join(", ")))
            })
    }

    pub fn flags(self) -> VariantFlags {
        let base = VariantFlags::default();
        match self {
            Variant::SourceOnly => VariantFlags {
                source_only: true,
                ..base
            },
            Variant::PlainEntropy => VariantFlags {
                plain_entropy: true,
                ..base
            },
            Variant::NoFisherOrdering => VariantFlags {
                no_fisher: true,
                no_ordering: true,
                ..base
            },
            Variant::NoFisher => VariantFlags {
                no_fisher: true,
                ..base
            },
            Variant::NoDistilling => VariantFlags {
                no_distilling: true,
                ..base
            },
            Variant::NoSourceOrdering => VariantFlags {
                no_source_ordering: true,
                ..base
            },
            Variant::NoSourceFisher => VariantFlags {
                no_source_fisher: true,
                ..base
            },
            Variant::NoTemperature => VariantFlags {
                no_temperature: true,
                ..base
            },
            Variant::ExplicitAlignment => VariantFlags {
                explicit_alignment: true,
                ..base
            },
            Variant::Full => base,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Trains one variant. The variant's switches replace those in `cfg`.
///
/// `no_distilling` first trains Source Only, then fine-tunes that model on
/// the clustering terms alone with the schedule restarted at `p = 0` and
/// fresh momentum; its history covers both stages.
pub fn run_variant(cfg: &TrainConfig, task: &DomainTask, variant: Variant) -> Result<TrainState> {
    run_variant_with(cfg, task, variant, |_| {})
}

pub fn run_variant_with(
    cfg: &TrainConfig,
    task: &DomainTask,
    variant: Variant,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    if variant != Variant::NoDistilling {
        return train_with(&cfg.with_flags(variant.flags()), task, on_epoch);
    }
    let pre_cfg = cfg.with_flags(Variant::SourceOnly.flags());
    let mut state = train_with(&pre_cfg, task, &mut on_epoch)?;
    state.optimizer.reset();
    continue_training(state, &cfg.with_flags(variant.flags()), task, on_epoch)
}

/// Plain entropy minimisation with source cross-entropy only.
pub fn em_baseline(cfg: &TrainConfig, task: &DomainTask) -> Result<TrainState> {
    let flags = VariantFlags {
        plain_entropy: true,
        no_fisher: true,
        no_ordering: true,
        ..VariantFlags::default()
    };
    train(&cfg.with_flags(flags), task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansBaselineConfig {
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub max_iter: usize,
}

impl Default for KMeansBaselineConfig {
    fn default() -> Self {
        KMeansBaselineConfig {
            rounds: 3,
            epochs_per_round: 20,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansBaselineOutcome {
    pub state: TrainState,
    pub source_only_accuracy: f64,
    /// Target accuracy of the network after each round.
    pub round_accuracy: Vec<f64>,
    /// Accuracy of each round's k-means partition.
    pub cluster_accuracy: Vec<f64>,
}

/// Source class means of `features` (one row per class).
fn class_means(features: &Tensor, labels: &[usize], k: usize) -> Result<Tensor> {
    let mut means = Tensor::zeros(k, features.cols());
    let mut counts = vec![0usize; k];
    for (row, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        for (m, v) in means.row_mut(y).iter_mut().zip(row) {
            *m += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::State(format!("class {c} has no source samples")));
        }
        means.row_mut(c).iter_mut().for_each(|m| *m /= n as f64);
    }
    Ok(means)
}

/// Alternates k-means pseudo-labelling of target features with supervised
/// training on source labels plus target pseudo-labels, starting from a
/// Source Only model trained for `cfg.schedule.epochs`.
pub fn kmeans_pseudo_baseline(
    cfg: &TrainConfig,
    task: &DomainTask,
    km: &KMeansBaselineConfig,
) -> Result<KMeansBaselineOutcome> {
    let mut state = train(&cfg.with_flags(Variant::SourceOnly.flags()), task)?;
    let source_only_accuracy = evaluate(&state.model, &task.target)?;
    let source_labels = task.source.labels().expect("validated by train");
    let target_x = task.target.train_view().features();
    let k = cfg.arch.num_classes;
    let mut batcher = IndexBatcher::new(task.source.len(), target_x.rows(), cfg.schedule.batch_size, cfg.seed)?;
    let mut round_accuracy = Vec::with_capacity(km.rounds);
    let mut cluster_accuracy = Vec::with_capacity(km.rounds);
    let t = cfg.loss.effective_temperatures().cls;

    for _ in 0..km.rounds {
        let fs = state.model.infer(task.source.features())?.features;
        let ft = state.model.infer(target_x)?.features;
        let init = class_means(&fs, source_labels, k)?;
        let clusters = kmeans(&ft, &init, km.max_iter)?;
        cluster_accuracy.push(partition_accuracy(&clusters.assignments, &task.target)?);
        let pseudo = clusters.assignments;

        for e in 0..km.epochs_per_round {
            let p = e as f64 / km.epochs_per_round as f64;
            let lrs = state.param_lrs(cfg.schedule.learning_rates(p)?);
            for step in batcher.next_epoch() {
                let mut g = Graph::new();
                let bound = state.model.bind(&mut g);
                let xs = g.constant(task.source.features().select_rows(&step.source));
                let xt = g.constant(target_x.select_rows(&step.target));
                let ys: Vec<usize> = step.source.iter().map(|&i| source_labels[i]).collect();
                let yt: Vec<usize> = step.target.iter().map(|&i| pseudo[i]).collect();
                let ls = {
                    let f = bound.forward(&mut g, xs)?;
                    source_cls_loss(&mut g, f.logits, &ys, t)?
                };
                let lt = {
                    let f = bound.forward(&mut g, xt)?;
                    source_cls_loss(&mut g, f.logits, &yt, t)?
                };
                let root = g.add(ls, lt)?;
                let grads = g.backward(root)?;
                let grads: Vec<Tensor> = bound.parameters().into_iter().map(|v| grads.get(v)).collect();
                let mut params = state.model.parameters_mut();
                state.optimizer.step(&mut params, &grads, &lrs)?;
            }
        }
        round_accuracy.push(evaluate(&state.model, &task.target)?);
    }
    Ok(KMeansBaselineOutcome {
        state,
        source_only_accuracy,
        round_accuracy,
        cluster_accuracy,
    })
}

/// Accuracy of a cluster assignment read as class predictions.
fn partition_accuracy(assignments: &[usize], ds: &Dataset) -> Result<f64> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Contract("partition accuracy needs labels".into()))?;
    Ok(accuracy(assignments, labels))
}

/// k-means on raw points initialised at `init`, scored against `labels`.
pub fn kmeans_partition_accuracy(points: &Tensor, init: &Tensor, labels: &[usize], max_iter: usize) -> Result<f64> {
    let r = kmeans(points, init, max_iter)?;
    Ok(accuracy(&r.assignments, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Sample mean and (n−1) standard deviation; sd is 0 for a single value.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant for `trials` seeds (`cfg.seed + trial`) and reports
/// final target accuracy. `on_trial` sees each finished run.
pub fn run_ablation(
    cfg: &TrainConfig,
    task: &DomainTask,
    variants: &[Variant],
    trials: usize,
    mut on_trial: impl FnMut(Variant, usize, &TrainState) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if !task.target.is_labeled() {
        return Err(Error::Config("ablation needs target labels for evaluation".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut accuracies = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut trial_cfg = cfg.clone();
            trial_cfg.seed = cfg.seed + trial as u64;
            let state = run_variant(&trial_cfg, task, variant)?;
            on_trial(variant, trial, &state)?;
            accuracies.push(final_accuracy(&state, task)?);
        }
        let (mean, sd) = mean_sd(&accuracies);
        rows.push(AblationRow {
            variant,
            accuracies,
            mean,
            sd,
        });
    }
    Ok(rows)
}

/// Target accuracy of the last recorded epoch (or of the model when no epoch
/// ran).
pub fn final_accuracy(state: &TrainState, task: &DomainTask) -> Result<f64> {
    match state.history.last().and_then(|r| r.target_acc) {
        Some(a) => Ok(a),
        None => evaluate(&state.model, &task.target),
    }
}
