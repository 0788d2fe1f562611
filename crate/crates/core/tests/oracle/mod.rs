//! Straight-line scalar transcriptions of every loss, the classifier and the
//! centroid recurrence. Plain `Vec<Vec<f64>>` and loops only; nothing here
//! touches the autodiff graph.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

pub fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn filtered(h: f64) -> f64 {
    (-h).exp() * h
}

pub fn afem(logits: &Mat, t: f64) -> f64 {
    mean(&logits.iter().map(|z| filtered(entropy(&softmax(z, t)))).collect::<Vec<_>>())
}

pub fn plain_em(logits: &Mat, t: f64) -> f64 {
    mean(&logits.iter().map(|z| entropy(&softmax(z, t))).collect::<Vec<_>>())
}

pub fn cross_entropy(logits: &Mat, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        total -= softmax(z, t)[y].ln();
    }
    total / logits.len() as f64
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s
}

/// Row `j`: `−‖f_j − m_k‖²` for every `k`.
pub fn within(features: &Mat, centroids: &Mat) -> Mat {
    features
        .iter()
        .map(|f| centroids.iter().map(|m| -sq_dist(f, m)).collect())
        .collect()
}

/// Row `k`: `−‖m_k − m_k'‖²` for every `k'`.
pub fn between(centroids: &Mat) -> Mat {
    within(centroids, centroids)
}

/// One feature space: features of the batch and that space's centroids.
pub struct Space<'a> {
    pub features: &'a Mat,
    pub centroids: &'a Mat,
}

pub fn target_fisher(spaces: &[Space<'_>], t_w: f64, t_b: f64) -> f64 {
    let mut total = 0.0;
    for s in spaces {
        total += afem(&within(s.features, s.centroids), t_w);
        total += afem(&between(s.centroids), t_b);
    }
    total
}

pub fn source_fisher(spaces: &[Space<'_>], labels: &[usize], t_w: f64, t_b: f64) -> f64 {
    let mut total = 0.0;
    for s in spaces {
        let k = s.centroids.len();
        total += cross_entropy(&within(s.features, s.centroids), labels, t_w);
        total += cross_entropy(&between(s.centroids), &(0..k).collect::<Vec<_>>(), t_b);
    }
    total
}

pub fn alignment(source: &[Mat], target: &[Mat]) -> f64 {
    let mut total = 0.0;
    for (s, t) in source.iter().zip(target) {
        let mut acc = 0.0;
        for k in 0..s.len() {
            acc += sq_dist(&s[k], &t[k]);
        }
        total += acc / s.len() as f64;
    }
    total
}

/// Weight (fan_in × fan_out) and bias of one affine layer.
#[derive(Clone, Debug)]
pub struct Layer {
    pub w: Mat,
    pub b: Vec<f64>,
}

pub fn affine(x: &[f64], l: &Layer) -> Vec<f64> {
    let mut out = l.b.clone();
    for (i, xi) in x.iter().enumerate() {
        for (o, wio) in out.iter_mut().zip(&l.w[i]) {
            *o += xi * wio;
        }
    }
    out
}

pub fn relu(x: Vec<f64>) -> Vec<f64> {
    x.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Network transcription: extractor layers with ReLU, then a one- or
/// two-layer classifier.
#[derive(Clone, Debug)]
pub struct Net {
    pub extractor: Vec<Layer>,
    pub classifier: Vec<Layer>,
}

pub struct Outputs {
    pub features: Mat,
    pub lifted: Mat,
    pub logits: Mat,
}

impl Net {
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in &self.extractor {
            h = relu(affine(&h, l));
        }
        h
    }

    pub fn lift(&self, f: &[f64]) -> Vec<f64> {
        if self.classifier.len() == 1 {
            f.to_vec()
        } else {
            relu(affine(f, &self.classifier[0]))
        }
    }

    pub fn last(&self, lifted: &[f64]) -> Vec<f64> {
        affine(lifted, self.classifier.last().unwrap())
    }

    pub fn classify(&self, f: &[f64]) -> Vec<f64> {
        self.last(&self.lift(f))
    }

    pub fn run(&self, xs: &Mat) -> Outputs {
        let features: Mat = xs.iter().map(|x| self.features(x)).collect();
        let lifted: Mat = features.iter().map(|f| self.lift(f)).collect();
        let logits = lifted.iter().map(|l| self.last(l)).collect();
        Outputs {
            features,
            lifted,
            logits,
        }
    }
}

/// Ordering loss: space 0 centroids through the full classifier, space 1
/// through the last layer, summed.
pub fn ordering(net: &Net, banks: &[Mat], t: f64) -> f64 {
    let mut total = 0.0;
    for (space, bank) in banks.iter().enumerate() {
        let logits: Mat = bank
            .iter()
            .map(|m| if space == 0 { net.classify(m) } else { net.last(m) })
            .collect();
        total += cross_entropy(&logits, &(0..bank.len()).collect::<Vec<_>>(), t);
    }
    total
}

/// One step of the moving-average centroid rule.
pub fn centroid_step(stored: &mut Mat, initialized: &mut [bool], features: &Mat, labels: &[usize], alpha: f64) {
    for k in 0..stored.len() {
        let members: Vec<&Vec<f64>> = features.iter().zip(labels).filter(|(_, &y)| y == k).map(|(f, _)| f).collect();
        if members.is_empty() {
            continue;
        }
        let dim = stored[k].len();
        let mut mean = vec![0.0; dim];
        for f in &members {
            for d in 0..dim {
                mean[d] += f[d];
            }
        }
        for v in mean.iter_mut() {
            *v /= members.len() as f64;
        }
        if initialized[k] {
            for d in 0..dim {
                stored[k][d] = alpha * stored[k][d] + (1.0 - alpha) * mean[d];
            }
        } else {
            stored[k] = mean;
            initialized[k] = true;
        }
    }
}

/// Central finite difference of `f` in every coordinate of `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        g[i] = (plus - minus) / (2.0 * eps);
    }
    g
}
