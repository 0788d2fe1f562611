//! Clustering and distilling objectives.
//!
//! Target-side terms (unlabelled): adaptive-filtering entropy, the soft
//! Fisher-like criterion on centroid distances, and cluster ordering through
//! centroid classification. Source-side terms (labelled): temperature
//! cross-entropy, the cross-entropy form of the Fisher criterion, and the
//! same ordering loss. [`total_loss`] assembles them as
//! `distilling + λ·clustering`, honouring the ablation switches in
//! [`VariantFlags`].
//!
//! Centroid terms are evaluated in every feature space the model exposes
//! (ℱ, and ℱ↑ for a two-layer classifier) and summed across spaces.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::centroids::{between_vectors, within_vectors, BankView};
use crate::error::{Error, Result};
use crate::model::{log_softmax_t, BoundModel, Forward};
use crate::tensor::Tensor;

/// Temperature for each loss family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    pub entropy: f64,
    pub cls: f64,
    pub fisher_within: f64,
    pub fisher_between: f64,
    pub ordering: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            entropy: 1.0,
            cls: 1.0,
            fisher_within: 1.0,
            fisher_between: 2.0,
            ordering: 2.0,
        }
    }
}

impl Temperatures {
    pub fn unit() -> Self {
        Temperatures {
            entropy: 1.0,
            cls: 1.0,
            fisher_within: 1.0,
            fisher_between: 1.0,
            ordering: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("entropy", self.entropy),
            ("cls", self.cls),
            ("fisher_within", self.fisher_within),
            ("fisher_between", self.fisher_between),
            ("ordering", self.ordering),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperature {name} must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Switches selecting which terms enter the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantFlags {
    /// Drop the `e^{−H}` weight from the target entropy term.
    pub plain_entropy: bool,
    pub no_entropy: bool,
    /// Drop both Fisher terms.
    pub no_fisher: bool,
    /// Drop both ordering terms.
    pub no_ordering: bool,
    pub no_source_fisher: bool,
    pub no_source_ordering: bool,
    /// Drop the whole source-side objective.
    pub no_distilling: bool,
    /// Only source cross-entropy; no target term is constructed.
    pub source_only: bool,
    /// Use `T = 1` for every term.
    pub no_temperature: bool,
    /// Add the centroid-distance alignment term.
    pub explicit_alignment: bool,
}

impl VariantFlags {
    pub fn validate(&self) -> Result<()> {
        if self.source_only && self.no_distilling {
            return Err(Error::Config(
                "source_only and no_distilling leave nothing to train".into(),
            ));
        }
        if self.source_only && self.explicit_alignment {
            return Err(Error::Config(
                "explicit_alignment needs target centroids, which source_only never builds".into(),
            ));
        }
        if self.no_distilling
            && self.no_entropy
            && self.no_fisher
            && self.no_ordering
            && !self.explicit_alignment
        {
            return Err(Error::Config("every loss term is switched off".into()));
        }
        Ok(())
    }

    fn source_fisher(&self) -> bool {
        !self.no_distilling && !self.source_only && !self.no_fisher && !self.no_source_fisher
    }

    fn source_ordering(&self) -> bool {
        !self.no_distilling && !self.source_only && !self.no_ordering && !self.no_source_ordering
    }

    fn target_entropy(&self) -> bool {
        !self.source_only && !self.no_entropy
    }

    fn target_fisher(&self) -> bool {
        !self.source_only && !self.no_fisher
    }

    fn target_ordering(&self) -> bool {
        !self.source_only && !self.no_ordering
    }

    /// Whether any target-side input is needed at all.
    pub fn uses_target(&self) -> bool {
        !self.source_only
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Moving-average coefficient of the centroid banks.
    pub alpha: f64,
    pub temperatures: Temperatures,
    pub variant: VariantFlags,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.7,
            temperatures: Temperatures::default(),
            variant: VariantFlags::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        self.temperatures.validate()?;
        self.variant.validate()
    }

    pub fn effective_temperatures(&self) -> Temperatures {
        if self.variant.no_temperature {
            Temperatures::unit()
        } else {
            self.temperatures
        }
    }
}

/// Values of every term for one step. Absent terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub entropy_t: f64,
    pub fisher_t: f64,
    pub ordering_t: f64,
    pub cls_s: f64,
    pub fisher_s: f64,
    pub ordering_s: f64,
    pub alignment: f64,
    pub clustering_total: f64,
    pub distilling_total: f64,
    pub overall: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|(_, v)| v.is_finite())
    }

    pub fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("entropy_t", self.entropy_t),
            ("fisher_t", self.fisher_t),
            ("ordering_t", self.ordering_t),
            ("cls_s", self.cls_s),
            ("fisher_s", self.fisher_s),
            ("ordering_s", self.ordering_s),
            ("alignment", self.alignment),
            ("clustering_total", self.clustering_total),
            ("distilling_total", self.distilling_total),
            ("overall", self.overall),
            ("lambda", self.lambda),
        ]
    }

    /// Field-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            entropy_t: avg(|b| b.entropy_t),
            fisher_t: avg(|b| b.fisher_t),
            ordering_t: avg(|b| b.ordering_t),
            cls_s: avg(|b| b.cls_s),
            fisher_s: avg(|b| b.fisher_s),
            ordering_s: avg(|b| b.ordering_s),
            alignment: avg(|b| b.alignment),
            clustering_total: avg(|b| b.clustering_total),
            distilling_total: avg(|b| b.distilling_total),
            overall: avg(|b| b.overall),
            lambda: avg(|b| b.lambda),
        }
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.fields().iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

/// Shannon entropy `−Σ p log p` of a probability vector, with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(x) = p.iter().find(|&&x| !(x >= 0.0)) {
        return Err(Error::Contract(format!("negative or NaN probability {x}")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("probabilities sum to {total}")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

/// Per-row entropy (`N×1`) of the distribution whose log-probabilities are `log_p`.
fn row_entropy(g: &mut Graph, log_p: Var) -> Result<Var> {
    let p = g.exp(log_p);
    let plogp = g.mul(p, log_p)?;
    let s = g.sum_rows(plogp)?;
    Ok(g.neg(s))
}

/// Per-row `e^{−H}·H` (or plain `H`) of `softmax_T` of each row of `z`.
fn entropy_rows(g: &mut Graph, z: Var, t: f64, filtered: bool) -> Result<Var> {
    let log_p = log_softmax_t(g, z, t)?;
    let h = row_entropy(g, log_p)?;
    if !filtered {
        return Ok(h);
    }
    let neg_h = g.neg(h);
    let w = g.exp(neg_h);
    g.mul(w, h)
}

/// Mean of an `N×1` column as a `1×1` node.
fn mean_col(g: &mut Graph, col: Var) -> Result<Var> {
    g.mean_rows(col)
}

/// Mean over rows of `−log softmax_T(z)[targets[i]]`.
fn cross_entropy(g: &mut Graph, z: Var, targets: &[usize], t: f64) -> Result<Var> {
    let (n, k) = g.value(z).dims2()?;
    if targets.len() != n {
        return Err(Error::dim("cross_entropy", format!("{} labels for {n} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let log_p = log_softmax_t(g, z, t)?;
    let picked = g.pick(log_p, targets)?;
    let m = mean_col(g, picked)?;
    Ok(g.neg(m))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let mut iter = vars.iter();
    let Some(&first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in iter {
        acc = g.add(acc, v)?;
    }
    Ok(Some(acc))
}

fn diagonal_targets(k: usize) -> Vec<usize> {
    (0..k).collect()
}

/// Adaptive-filtering entropy minimisation: `(1/N) Σ_j e^{−H(p_j)} H(p_j)`.
pub fn afem_loss(g: &mut Graph, logits: Var, t: f64) -> Result<Var> {
    let rows = entropy_rows(g, logits, t, true)?;
    mean_col(g, rows)
}

/// Plain entropy minimisation: `(1/N) Σ_j H(p_j)`.
pub fn entropy_loss(g: &mut Graph, logits: Var, t: f64) -> Result<Var> {
    let rows = entropy_rows(g, logits, t, false)?;
    mean_col(g, rows)
}

/// Features of one batch paired with the bank of the same space.
#[derive(Clone, Copy, Debug)]
pub struct SpaceInput<'a> {
    pub features: Var,
    pub bank: &'a BankView,
}

/// Soft Fisher-like criterion on target features, summed over spaces.
pub fn target_fisher_loss(
    g: &mut Graph,
    spaces: &[SpaceInput<'_>],
    t_within: f64,
    t_between: f64,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * spaces.len());
    for s in spaces {
        let dw = within_vectors(g, s.features, s.bank)?;
        let w_rows = entropy_rows(g, dw, t_within, true)?;
        parts.push(mean_col(g, w_rows)?);
        let db = between_vectors(g, s.bank)?;
        let b_rows = entropy_rows(g, db, t_between, true)?;
        parts.push(mean_col(g, b_rows)?);
    }
    sum_vars(g, &parts)?.ok_or_else(|| Error::Contract("no feature spaces given".into()))
}

/// Cross-entropy Fisher criterion on labelled source features.
pub fn source_fisher_loss(
    g: &mut Graph,
    spaces: &[SpaceInput<'_>],
    labels: &[usize],
    t_within: f64,
    t_between: f64,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * spaces.len());
    for s in spaces {
        let dw = within_vectors(g, s.features, s.bank)?;
        parts.push(cross_entropy(g, dw, labels, t_within)?);
        let db = between_vectors(g, s.bank)?;
        let k = s.bank.num_classes();
        parts.push(cross_entropy(g, db, &diagonal_targets(k), t_between)?);
    }
    sum_vars(g, &parts)?.ok_or_else(|| Error::Contract("no feature spaces given".into()))
}

/// Cluster ordering via centroid classification.
///
/// `banks[0]` holds ℱ centroids and is classified by the full classifier;
/// `banks[1]`, when present, holds ℱ↑ centroids and goes through the last
/// classifier layer only. Contributions are summed.
pub fn ordering_loss(g: &mut Graph, model: &BoundModel, banks: &[BankView], t: f64) -> Result<Var> {
    let mut parts = Vec::with_capacity(banks.len());
    for (space, bank) in banks.iter().enumerate() {
        bank.require_ready()?;
        let logits = if space == 0 {
            model.classify(g, bank.centroids)?
        } else {
            model.last_layer(g, bank.centroids)?
        };
        parts.push(cross_entropy(g, logits, &diagonal_targets(bank.num_classes()), t)?);
    }
    sum_vars(g, &parts)?.ok_or_else(|| Error::Contract("no feature spaces given".into()))
}

/// Source classification: mean `−log softmax_T(z_i)[y_i]`.
pub fn source_cls_loss(g: &mut Graph, logits: Var, labels: &[usize], t: f64) -> Result<Var> {
    cross_entropy(g, logits, labels, t)
}

/// `(1/K) Σ_k ‖m_k^s − m_k^t‖²`, summed over spaces.
pub fn alignment_term(g: &mut Graph, source: &[BankView], target: &[BankView]) -> Result<Var> {
    if source.len() != target.len() {
        return Err(Error::dim("alignment_term", "source and target have different space counts"));
    }
    let mut parts = Vec::with_capacity(source.len());
    for (s, t) in source.iter().zip(target) {
        s.require_ready()?;
        t.require_ready()?;
        let diff = g.sub(s.centroids, t.centroids)?;
        let sq = g.square(diff);
        let total = g.sum_all(sq);
        parts.push(g.scale(total, 1.0 / s.num_classes() as f64));
    }
    sum_vars(g, &parts)?.ok_or_else(|| Error::Contract("no feature spaces given".into()))
}

/// One domain's batch outputs and its in-graph centroid banks (one per space).
#[derive(Clone, Copy, Debug)]
pub struct DomainInputs<'a> {
    pub forward: Forward,
    pub banks: &'a [BankView],
}

impl DomainInputs<'_> {
    fn spaces(&self) -> Vec<SpaceInput<'_>> {
        let feats = [self.forward.features, self.forward.lifted];
        self.banks
            .iter()
            .zip(feats)
            .map(|(bank, features)| SpaceInput { features, bank })
            .collect()
    }

    fn ready(&self) -> bool {
        self.banks.iter().all(BankView::is_ready)
    }
}

pub struct LossInputs<'a> {
    pub model: &'a BoundModel,
    pub source: Option<DomainInputs<'a>>,
    pub source_labels: &'a [usize],
    pub target: Option<DomainInputs<'a>>,
}

/// Assembles `distilling + λ·clustering (+ alignment)`.
///
/// Centroid-based terms are skipped (contribute zero) while any centroid of
/// the bank they need is still uninitialised.
pub fn total_loss(
    g: &mut Graph,
    inputs: &LossInputs<'_>,
    lambda: f64,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let flags = cfg.variant;
    let temps = cfg.effective_temperatures();
    let mut out = LossBreakdown {
        lambda,
        ..LossBreakdown::default()
    };
    let value = |g: &Graph, v: Var| g.value(v).data()[0];

    let mut distilling = Vec::new();
    if !flags.no_distilling {
        let src = inputs
            .source
            .ok_or_else(|| Error::Contract("distilling terms need a source batch".into()))?;
        let cls = source_cls_loss(g, src.forward.logits, inputs.source_labels, temps.cls)?;
        out.cls_s = value(g, cls);
        distilling.push(cls);
        if src.ready() {
            if flags.source_fisher() {
                let v = source_fisher_loss(
                    g,
                    &src.spaces(),
                    inputs.source_labels,
                    temps.fisher_within,
                    temps.fisher_between,
                )?;
                out.fisher_s = value(g, v);
                distilling.push(v);
            }
            if flags.source_ordering() {
                let v = ordering_loss(g, inputs.model, src.banks, temps.ordering)?;
                out.ordering_s = value(g, v);
                distilling.push(v);
            }
        }
    }

    let mut clustering = Vec::new();
    if flags.uses_target() {
        let tgt = inputs
            .target
            .ok_or_else(|| Error::Contract("clustering terms need a target batch".into()))?;
        if flags.target_entropy() {
            let v = if flags.plain_entropy {
                entropy_loss(g, tgt.forward.logits, temps.entropy)?
            } else {
                afem_loss(g, tgt.forward.logits, temps.entropy)?
            };
            out.entropy_t = value(g, v);
            clustering.push(v);
        }
        if tgt.ready() {
            if flags.target_fisher() {
                let v = target_fisher_loss(g, &tgt.spaces(), temps.fisher_within, temps.fisher_between)?;
                out.fisher_t = value(g, v);
                clustering.push(v);
            }
            if flags.target_ordering() {
                let v = ordering_loss(g, inputs.model, tgt.banks, temps.ordering)?;
                out.ordering_t = value(g, v);
                clustering.push(v);
            }
        }
    }

    let mut parts = Vec::new();
    if let Some(d) = sum_vars(g, &distilling)? {
        out.distilling_total = value(g, d);
        parts.push(d);
    }
    if let Some(c) = sum_vars(g, &clustering)? {
        out.clustering_total = value(g, c);
        parts.push(g.scale(c, lambda));
    }
    if flags.explicit_alignment {
        if let (Some(src), Some(tgt)) = (inputs.source, inputs.target) {
            if src.ready() && tgt.ready() {
                let v = alignment_term(g, src.banks, tgt.banks)?;
                out.alignment = value(g, v);
                parts.push(v);
            }
        }
    }
    let overall = match sum_vars(g, &parts)? {
        Some(v) => v,
        None => g.constant(Tensor::scalar(0.0)),
    };
    out.overall = value(g, overall);
    Ok((overall, out))
}
