//! Random micro-scenarios pairing library losses with their oracle values.

#![allow(dead_code)]

use discluster::autodiff::{Graph, Var};
use discluster::centroids::{BankView, CentroidBank};
use discluster::model::{AdaptationModel, Architecture};
use discluster::objectives::{
    afem_loss, alignment_term, entropy_loss, ordering_loss, source_cls_loss, source_fisher_loss,
    target_fisher_loss, total_loss, DomainInputs, LossConfig, LossInputs, SpaceInput,
};
use discluster::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle::{self, Layer, Mat, Net};

pub fn to_mat(t: &Tensor) -> Mat {
    t.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

/// Transcribes the model's parameters into the oracle network.
pub fn net_of(model: &AdaptationModel) -> Net {
    let params = model.parameters();
    let n_ext = model.architecture().extractor_dims.len();
    let layers: Vec<Layer> = params
        .chunks(2)
        .map(|wb| Layer {
            w: to_mat(wb[0]),
            b: wb[1].data().to_vec(),
        })
        .collect();
    Net {
        extractor: layers[..n_ext].to_vec(),
        classifier: layers[n_ext..].to_vec(),
    }
}

pub struct Micro {
    pub model: AdaptationModel,
    pub net: Net,
    pub k: usize,
    pub xs: Mat,
    pub ys: Vec<usize>,
    pub xt: Mat,
    /// Stored centroids before this step, one per space.
    pub source_banks: Vec<Mat>,
    pub target_banks: Vec<Mat>,
    pub alpha: f64,
    pub lambda: f64,
}

/// N ≤ 8, K ≤ 4, feature and lifted widths ≤ 4.
pub fn micro(seed: u64) -> Micro {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(2..=4);
    let d = rng.gen_range(2..=3);
    let m = rng.gen_range(2..=4);
    let hidden = if rng.gen_bool(0.5) { Some(rng.gen_range(2..=4)) } else { None };
    let arch = Architecture {
        input_dim: d,
        extractor_dims: vec![rng.gen_range(2..=4), m],
        classifier_hidden: hidden,
        num_classes: k,
    };
    let model = AdaptationModel::new(arch.clone(), seed).unwrap();
    let n_s = rng.gen_range(2..=8);
    let n_t = rng.gen_range(2..=8);
    let xs = random_mat(&mut rng, n_s, d, 2.0);
    let ys = (0..n_s).map(|_| rng.gen_range(0..k)).collect();
    let xt = random_mat(&mut rng, n_t, d, 2.0);
    let widths: Vec<usize> = match hidden {
        Some(h) => vec![m, h],
        None => vec![m],
    };
    let source_banks = widths.iter().map(|&w| random_mat(&mut rng, k, w, 1.0)).collect();
    let target_banks = widths.iter().map(|&w| random_mat(&mut rng, k, w, 1.0)).collect();
    Micro {
        net: net_of(&model),
        model,
        k,
        xs,
        ys,
        xt,
        source_banks,
        target_banks,
        alpha: 0.7,
        lambda: rng.gen_range(0.0..1.0),
    }
}

fn space_pairs(views: &[BankView], vars: [Var; 2]) -> Vec<SpaceInput<'_>> {
    views
        .iter()
        .zip(vars)
        .map(|(bank, features)| SpaceInput { features, bank })
        .collect()
}

fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item().unwrap()
}

/// `(name, library value, oracle value)` for every loss on one scenario.
/// Banks are updated with the current batch first, as in training.
pub fn loss_pairs(s: &Micro) -> Vec<(&'static str, f64, f64)> {
    let cfg = LossConfig::default();
    let t = cfg.temperatures;
    let mut out = Vec::new();
    let pseudo: Vec<usize> = s.net.run(&s.xt).logits.iter().map(|z| argmax(z)).collect();
    let o = oracle_values(s, &s.net, &pseudo);

    // Library side.
    let mut g = Graph::new();
    let bound = s.model.bind(&mut g);
    let xs = g.constant(from_mat(&s.xs));
    let xt = g.constant(from_mat(&s.xt));
    let fs = bound.forward(&mut g, xs).unwrap();
    let ft = bound.forward(&mut g, xt).unwrap();
    let lib_pseudo = discluster::centroids::assign_pseudo_labels(g.value(ft.logits));
    assert_eq!(lib_pseudo, pseudo, "pseudo-labels differ");
    let sv = updated_views(&mut g, &s.source_banks, [fs.features, fs.lifted], &s.ys, s.alpha);
    let tv = updated_views(&mut g, &s.target_banks, [ft.features, ft.lifted], &pseudo, s.alpha);

    let v = afem_loss(&mut g, ft.logits, t.entropy).unwrap();
    out.push(("afem", value(&g, v), o.afem));
    let v = entropy_loss(&mut g, ft.logits, t.entropy).unwrap();
    out.push(("plain_entropy", value(&g, v), o.plain_entropy));
    let v = target_fisher_loss(&mut g, &space_pairs(&tv, [ft.features, ft.lifted]), t.fisher_within, t.fisher_between).unwrap();
    out.push(("target_fisher", value(&g, v), o.fisher_t));
    let v = ordering_loss(&mut g, &bound, &tv, t.ordering).unwrap();
    out.push(("target_ordering", value(&g, v), o.ordering_t));
    let v = source_cls_loss(&mut g, fs.logits, &s.ys, t.cls).unwrap();
    out.push(("source_cls", value(&g, v), o.cls));
    let v = source_fisher_loss(&mut g, &space_pairs(&sv, [fs.features, fs.lifted]), &s.ys, t.fisher_within, t.fisher_between).unwrap();
    out.push(("source_fisher", value(&g, v), o.fisher_s));
    let v = ordering_loss(&mut g, &bound, &sv, t.ordering).unwrap();
    out.push(("source_ordering", value(&g, v), o.ordering_s));
    let v = alignment_term(&mut g, &sv, &tv).unwrap();
    out.push(("alignment", value(&g, v), o.alignment));
    let inputs = LossInputs {
        model: &bound,
        source: Some(DomainInputs {
            forward: fs,
            banks: &sv,
        }),
        source_labels: &s.ys,
        target: Some(DomainInputs {
            forward: ft,
            banks: &tv,
        }),
    };
    let (v, _) = total_loss(&mut g, &inputs, s.lambda, &cfg).unwrap();
    out.push(("overall", value(&g, v), o.overall));
    let mut aligned = cfg.clone();
    aligned.variant.explicit_alignment = true;
    let (v, _) = total_loss(&mut g, &inputs, s.lambda, &aligned).unwrap();
    out.push(("overall_with_alignment", value(&g, v), o.overall + o.alignment));
    out
}

pub struct OracleValues {
    pub afem: f64,
    pub plain_entropy: f64,
    pub fisher_t: f64,
    pub ordering_t: f64,
    pub cls: f64,
    pub fisher_s: f64,
    pub ordering_s: f64,
    pub alignment: f64,
    /// Default objective without the alignment term.
    pub overall: f64,
}

/// Every loss of scenario `s` evaluated by the oracle with network `net` and
/// fixed target pseudo-labels.
pub fn oracle_values(s: &Micro, net: &Net, pseudo: &[usize]) -> OracleValues {
    let t = LossConfig::default().temperatures;
    let os = net.run(&s.xs);
    let ot = net.run(&s.xt);
    let step = |banks: &[Mat], outs: &oracle::Outputs, labels: &[usize]| -> Vec<Mat> {
        banks
            .iter()
            .zip([&outs.features, &outs.lifted])
            .map(|(b, f)| {
                let mut stored = b.clone();
                let mut init = vec![true; stored.len()];
                oracle::centroid_step(&mut stored, &mut init, f, labels, s.alpha);
                stored
            })
            .collect()
    };
    let sb = step(&s.source_banks, &os, &s.ys);
    let tb = step(&s.target_banks, &ot, pseudo);
    let spaces = |banks: &'_ [Mat], outs: &'_ oracle::Outputs| -> Vec<(Mat, Mat)> {
        banks
            .iter()
            .zip([&outs.features, &outs.lifted])
            .map(|(b, f)| (f.clone(), b.clone()))
            .collect()
    };
    let t_spaces = spaces(&tb, &ot);
    let s_spaces = spaces(&sb, &os);
    let t_pairs = &t_spaces;
    let s_pairs = &s_spaces;
    let t_sp: Vec<oracle::Space<'_>> = t_pairs.iter().map(|(f, c)| oracle::Space { features: f, centroids: c }).collect();
    let s_sp: Vec<oracle::Space<'_>> = s_pairs.iter().map(|(f, c)| oracle::Space { features: f, centroids: c }).collect();
    let mut v = OracleValues {
        afem: oracle::afem(&ot.logits, t.entropy),
        plain_entropy: oracle::plain_em(&ot.logits, t.entropy),
        fisher_t: oracle::target_fisher(&t_sp, t.fisher_within, t.fisher_between),
        ordering_t: oracle::ordering(net, &tb, t.ordering),
        cls: oracle::cross_entropy(&os.logits, &s.ys, t.cls),
        fisher_s: oracle::source_fisher(&s_sp, &s.ys, t.fisher_within, t.fisher_between),
        ordering_s: oracle::ordering(net, &sb, t.ordering),
        alignment: oracle::alignment(&sb, &tb),
        overall: 0.0,
    };
    v.overall = v.cls + v.fisher_s + v.ordering_s + s.lambda * (v.afem + v.fisher_t + v.ordering_t);
    v
}

/// Library value and parameter gradient (flattened in parameter order) of
/// the default objective with fixed pseudo-labels.
pub fn library_objective(s: &Micro, pseudo: &[usize]) -> (f64, Vec<f64>) {
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let bound = s.model.bind(&mut g);
    let xs = g.constant(from_mat(&s.xs));
    let xt = g.constant(from_mat(&s.xt));
    let fs = bound.forward(&mut g, xs).unwrap();
    let ft = bound.forward(&mut g, xt).unwrap();
    let sv = updated_views(&mut g, &s.source_banks, [fs.features, fs.lifted], &s.ys, s.alpha);
    let tv = updated_views(&mut g, &s.target_banks, [ft.features, ft.lifted], pseudo, s.alpha);
    let inputs = LossInputs {
        model: &bound,
        source: Some(DomainInputs {
            forward: fs,
            banks: &sv,
        }),
        source_labels: &s.ys,
        target: Some(DomainInputs {
            forward: ft,
            banks: &tv,
        }),
    };
    let (v, _) = total_loss(&mut g, &inputs, s.lambda, &cfg).unwrap();
    let grads = g.backward(v).unwrap();
    let flat = bound.parameters().into_iter().flat_map(|p| grads.get(p).into_data()).collect();
    (value(&g, v), flat)
}

fn updated_views(g: &mut Graph, banks: &[Mat], vars: [Var; 2], labels: &[usize], alpha: f64) -> Vec<BankView> {
    banks
        .iter()
        .zip(vars)
        .map(|(b, f)| {
            let mut bank = CentroidBank::from_parts(from_mat(b), vec![true; b.len()], alpha).unwrap();
            bank.update(g, f, labels).unwrap()
        })
        .collect()
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Largest |library − oracle| over all losses of `scenarios` seeds.
pub fn worst_equation_gap(seeds: impl IntoIterator<Item = u64>) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in seeds {
        let s = micro(seed);
        for (name, lib, orc) in loss_pairs(&s) {
            let gap = (lib - orc).abs();
            if !(gap <= worst.0) {
                worst = (gap, format!("{name} (seed {seed}): library {lib}, oracle {orc}"));
            }
        }
    }
    worst
}

/// Breakdown of the objective under `cfg` on scenario `s`, built on a fresh
/// graph so that repeated calls see identical inputs and banks.
pub fn library_breakdown(s: &Micro, cfg: &LossConfig) -> discluster::LossBreakdown {
    let mut g = Graph::new();
    let bound = s.model.bind(&mut g);
    let xs = g.constant(from_mat(&s.xs));
    let xt = g.constant(from_mat(&s.xt));
    let fs = bound.forward(&mut g, xs).unwrap();
    let ft = bound.forward(&mut g, xt).unwrap();
    let pseudo = discluster::centroids::assign_pseudo_labels(g.value(ft.logits));
    let sv = updated_views(&mut g, &s.source_banks, [fs.features, fs.lifted], &s.ys, s.alpha);
    let tv = updated_views(&mut g, &s.target_banks, [ft.features, ft.lifted], &pseudo, s.alpha);
    let inputs = LossInputs {
        model: &bound,
        source: Some(DomainInputs {
            forward: fs,
            banks: &sv,
        }),
        source_labels: &s.ys,
        target: Some(DomainInputs {
            forward: ft,
            banks: &tv,
        }),
    };
    total_loss(&mut g, &inputs, s.lambda, cfg).unwrap().1
}
