//! Frozen-representation evaluation.
//!
//! Features are the trunk output `h` in eval mode. Probes are multinomial
//! logistic regressions on standardized features, fit by full-batch
//! gradient descent with a fixed recipe.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ShiftFamily, ShiftSuite};
use crate::encoders::EncoderStack;
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::{gemm, Tensor};

pub const PROBE_ITERATIONS: usize = 500;
pub const PROBE_LR: f64 = 0.5;
pub const L2_GRID: [f64; 3] = [1e-6, 1e-4, 1e-2];
pub const VALIDATION_FRACTION: f64 = 0.1;
const FEATURE_CHUNK: usize = 1024;

/// Trunk features `[N, repr_dim]` in eval mode.
pub fn extract_features(stack: &EncoderStack, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != stack.dims().input_dim {
        return Err(Error::shape(
            "extract_features",
            format!("checkpoint expects {} inputs, data has shape {:?}", stack.dims().input_dim, x.shape()),
        ));
    }
    let idx: Vec<usize> = (0..x.rows()).collect();
    let mut data = Vec::with_capacity(x.rows() * stack.dims().repr_dim);
    for chunk in idx.chunks(FEATURE_CHUNK) {
        data.extend_from_slice(stack.features(&x.select_rows(chunk)?)?.data());
    }
    Tensor::matrix(x.rows(), stack.dims().repr_dim, data)
}

/// Mean over samples of `sum_c (p_c - [c = label])^2`.
pub fn brier(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return Err(Error::shape("brier", "one label per row required"));
    }
    let c = probs.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::domain(format!("brier: row {i} sums to {s}")));
        }
        if y >= c {
            return Err(Error::domain(format!("brier: label {y} out of range")));
        }
        total += row.iter().enumerate().map(|(k, p)| (p - if k == y { 1.0 } else { 0.0 }).powi(2)).sum::<f64>();
    }
    Ok(total / labels.len() as f64)
}

pub fn top1(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(probs.row(i)) == y).count();
    hits as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

fn n_classes(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Stratified subset: for each class, the first `ceil(fraction * n_c)` of a
/// per-class permutation. Subsets for smaller fractions at the same seed are
/// contained in those for larger fractions.
pub fn stratified_subset(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label_fraction must be in (0, 1], got {fraction}")));
    }
    let k = n_classes(labels);
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut out = Vec::with_capacity(k);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::domain(format!("class {c} has no examples")));
        }
        idx.shuffle(&mut rng::stream(seed, &[tag::PROBE, c as u64]));
        let take = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
        idx.truncate(take);
        out.push(idx);
    }
    Ok(out)
}

/// Multinomial logistic regression on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[d, C]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub l2: f64,
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, x: &Tensor) -> Vec<f64> {
        let d = self.mean.len();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Class probabilities `[N, C]`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.cols() != d {
            return Err(Error::shape("probe", format!("expected {d} features, got {}", x.cols())));
        }
        let xs = self.standardize(x);
        let p = softmax_logits(&xs, &self.weights, &self.bias, x.rows(), d);
        Tensor::matrix(x.rows(), self.n_classes(), p)
    }
}

fn softmax_logits(xs: &[f64], w: &[f64], b: &[f64], n: usize, d: usize) -> Vec<f64> {
    let c = b.len();
    let mut z = gemm(xs, false, w, false, n, d, c);
    for row in z.chunks_mut(c) {
        let mut mx = f64::NEG_INFINITY;
        for (v, bb) in row.iter_mut().zip(b) {
            *v += bb;
            mx = mx.max(*v);
        }
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    z
}

/// Full-batch gradient descent with cosine-decayed step size.
fn fit(x: &Tensor, labels: &[usize], k: usize, l2: f64) -> LinearProbe {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let scale = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let mut probe = LinearProbe { mean, scale, weights: vec![0.0; d * k], bias: vec![0.0; k], l2 };
    let xs = probe.standardize(x);
    for t in 0..PROBE_ITERATIONS {
        let lr = PROBE_LR * ((std::f64::consts::PI * t as f64 / PROBE_ITERATIONS as f64).cos() + 1.0) / 2.0;
        let mut p = softmax_logits(&xs, &probe.weights, &probe.bias, n, d);
        for (i, &y) in labels.iter().enumerate() {
            p[i * k + y] -= 1.0;
        }
        p.iter_mut().for_each(|v| *v /= n as f64);
        let gw = gemm(&xs, true, &p, false, d, n, k);
        for (w, g) in probe.weights.iter_mut().zip(&gw) {
            *w -= lr * (g + l2 * *w);
        }
        for c in 0..k {
            let gb: f64 = (0..n).map(|i| p[i * k + c]).sum();
            probe.bias[c] -= lr * gb;
        }
    }
    probe
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub brier: f64,
    pub label_fraction: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub l2: f64,
}

/// Fits a probe on a stratified `label_fraction` subset of the training
/// features, choosing the l2 coefficient on a held-out tenth of that subset,
/// then refits on the whole subset and scores the test features.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    label_fraction: f64,
    seed: u64,
) -> Result<(LinearProbe, ProbeResult)> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() {
        return Err(Error::shape("linear_probe", "one label per feature row required"));
    }
    let k = n_classes(train_y).max(n_classes(test_y));
    let subset = stratified_subset(train_y, label_fraction, seed)?;
    let (mut fit_idx, mut val_idx) = (Vec::new(), Vec::new());
    for idx in &subset {
        let n_val = (VALIDATION_FRACTION * idx.len() as f64).round() as usize;
        let n_val = n_val.min(idx.len() - 1);
        val_idx.extend_from_slice(&idx[..n_val]);
        fit_idx.extend_from_slice(&idx[n_val..]);
    }
    let all: Vec<usize> = subset.concat();
    let pick = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        Ok((train_x.select_rows(idx)?, idx.iter().map(|&i| train_y[i]).collect()))
    };

    let mut l2 = L2_GRID[0];
    if !val_idx.is_empty() {
        let (fx, fy) = pick(&fit_idx)?;
        let (vx, vy) = pick(&val_idx)?;
        let mut best = f64::NEG_INFINITY;
        for &c in &L2_GRID {
            let acc = top1(&fit(&fx, &fy, k, c).predict_proba(&vx)?, &vy);
            if acc > best {
                best = acc;
                l2 = c;
            }
        }
    }
    let (ax, ay) = pick(&all)?;
    let probe = fit(&ax, &ay, k, l2);
    let probs = probe.predict_proba(test_x)?;
    let result = ProbeResult {
        top1: top1(&probs, test_y),
        brier: brier(&probs, test_y)?,
        label_fraction,
        n_train: all.len(),
        n_eval: test_y.len(),
        l2,
    };
    Ok((probe, result))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub family: String,
    pub severity: u8,
    pub top1: f64,
    pub n: usize,
}

/// Clean row followed by one row per (family, severity).
pub fn robustness_eval(
    stack: &EncoderStack,
    probe: &LinearProbe,
    test: &Dataset,
    train_sigma: &[f64],
    suites: &[ShiftSuite],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let labels = test.labels();
    let score = |x: &Tensor| -> Result<f64> {
        let f = extract_features(stack, x)?;
        Ok(top1(&probe.predict_proba(&f)?, &labels))
    };
    let mut rows = vec![RobustnessRow { family: "clean".into(), severity: 0, top1: score(&test.features()?)?, n: labels.len() }];
    for s in suites {
        let x = data::shift_suite(test, train_sigma, *s, seed)?;
        rows.push(RobustnessRow { family: s.family.name().into(), severity: s.severity, top1: score(&x)?, n: labels.len() });
    }
    Ok(rows)
}

/// Every family at every severity.
pub fn all_suites() -> Vec<ShiftSuite> {
    ShiftFamily::ALL
        .into_iter()
        .flat_map(|family| (1..=5).map(move |severity| ShiftSuite { family, severity }))
        .collect()
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("family,severity,top1,n\n");
    for r in rows {
        out += &format!("{},{},{},{}\n", r.family, r.severity, r.top1, r.n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, k: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut r = rng::stream(seed, &[]);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % k;
            let mut v: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
            v[c % 4] += sep * if c >= 4 { -1.0 } else { 1.0 };
            rows.push(v);
            y.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn brier_examples() {
        let onehot = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(brier(&onehot, &[0, 1]).unwrap(), 0.0);
        assert_eq!(brier(&onehot, &[1, 0]).unwrap(), 2.0);
        let uniform = Tensor::filled(&[4, 10], 0.1);
        assert!((brier(&uniform, &[0, 3, 5, 9]).unwrap() - 0.9).abs() < 1e-12);
        assert!(brier(&Tensor::filled(&[1, 3], 0.5), &[0]).is_err());
    }

    #[test]
    fn separable_classes_are_learned_perfectly() {
        let (x, y) = blobs(200, 2, 5.0, 1);
        let (tx, ty) = blobs(100, 2, 5.0, 2);
        let (_, res) = linear_probe(&x, &y, &tx, &ty, 1.0, 0).unwrap();
        assert_eq!(res.top1, 1.0);
        assert!(res.brier < 0.05);
    }

    #[test]
    fn stratification_and_nesting() {
        let y: Vec<usize> = (0..1000).map(|i| (i * 7 + i / 13) % 10).collect();
        let small = stratified_subset(&y, 0.01, 5).unwrap();
        let big = stratified_subset(&y, 0.10, 5).unwrap();
        for c in 0..10 {
            let n_c = y.iter().filter(|&&v| v == c).count() as f64;
            assert!((big[c].len() as f64 - 0.1 * n_c).abs() <= 1.0);
            assert!(small[c].iter().all(|i| big[c].contains(i)));
        }
        assert!(stratified_subset(&[0, 2], 0.5, 0).is_err());
        assert!(stratified_subset(&y, 0.0, 0).is_err());
    }

    #[test]
    fn zero_features_are_handled() {
        let x = Tensor::zeros(&[50, 3]);
        let y: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let (_, res) = linear_probe(&x, &y, &x, &y, 1.0, 0).unwrap();
        assert!(res.top1 >= 0.0 && res.top1 <= 1.0);
        assert!((0.0..=2.0).contains(&res.brier));
    }
}
