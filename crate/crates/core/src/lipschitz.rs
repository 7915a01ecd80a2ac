//! Local smoothness of stochastic encoders.
//!
//! The encoder `e(z|x) = vMF(mu(x), kappa_e)` is compared at a point and a
//! perturbed copy. Per pair we report
//!
//! - `kl_forward = KL[e(.|x) || e(.|x')]`, `kl_backward` the reverse,
//! - `local_estimate = kl_forward / |dx|`, the z-averaged log-density ratio,
//! - `squared_bound = max(kl_forward, kl_backward) / |dx|^2`.
//!
//! With `cross_kappa` the second distribution of each KL uses `kappa_b`.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoders::EncoderStack;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::rng::{self, tag};
use crate::tensor::{norm, Tensor};
use crate::vmf::{self, VonMisesFisher};

/// Perturbations smaller than this are rejected.
pub const MIN_DELTA: f64 = 1e-9;
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzOptions {
    pub n_pairs: usize,
    /// Relative size of every perturbation family.
    pub magnitude: f64,
    /// Use `kappa_b` for the second argument of each KL.
    pub cross_kappa: bool,
    pub seed: u64,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        Self { n_pairs: 2000, magnitude: 0.1, cross_kappa: false, seed: 0 }
    }
}

impl LipschitzOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::Config("lipschitz.n_pairs must be positive".into()));
        }
        if !(self.magnitude.is_finite() && self.magnitude > 0.0) {
            return Err(Error::Config(format!("lipschitz.magnitude must be positive, got {}", self.magnitude)));
        }
        Ok(())
    }
}

/// Concentrations of the encoder and of the cross distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kappas {
    pub kappa_e: f64,
    pub kappa_b: f64,
}

impl Kappas {
    pub fn from_loss(cfg: &LossConfig) -> Self {
        Self { kappa_e: cfg.kappa_e(), kappa_b: cfg.kappa_b() }
    }

    fn second(&self, cross: bool) -> f64 {
        if cross {
            self.kappa_b
        } else {
            self.kappa_e
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessRecord {
    pub pair_id: usize,
    pub delta_norm: f64,
    pub local_estimate: f64,
    pub kl_forward: f64,
    pub kl_backward: f64,
    pub squared_bound: f64,
}

/// Fixed-size perturbations, each raising or lowering exactly one property.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    GainUp,
    GainDown,
    OffsetUp,
    OffsetDown,
    NuisanceUp,
    NuisanceDown,
    SpuriousUp,
    SpuriousDown,
}

impl Perturbation {
    pub const ALL: [Perturbation; 8] = [
        Perturbation::GainUp,
        Perturbation::GainDown,
        Perturbation::OffsetUp,
        Perturbation::OffsetDown,
        Perturbation::NuisanceUp,
        Perturbation::NuisanceDown,
        Perturbation::SpuriousUp,
        Perturbation::SpuriousDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Perturbation::GainUp => "gain+",
            Perturbation::GainDown => "gain-",
            Perturbation::OffsetUp => "offset+",
            Perturbation::OffsetDown => "offset-",
            Perturbation::NuisanceUp => "nuisance+",
            Perturbation::NuisanceDown => "nuisance-",
            Perturbation::SpuriousUp => "spurious+",
            Perturbation::SpuriousDown => "spurious-",
        }
    }

    fn sign(self) -> f64 {
        match self {
            Perturbation::GainUp | Perturbation::OffsetUp | Perturbation::NuisanceUp | Perturbation::SpuriousUp => 1.0,
            _ => -1.0,
        }
    }

    /// Perturbed copy of `x` laid out as `[content; nuisance; spurious]`.
    /// Additive families move each coordinate by `magnitude * sigma_j`.
    pub fn apply(self, x: &[f64], sigma: &[f64], blocks: [usize; 3], magnitude: f64) -> Vec<f64> {
        let m = self.sign() * magnitude;
        let [c, n, _] = blocks;
        let range = match self {
            Perturbation::GainUp | Perturbation::GainDown => {
                return x.iter().map(|v| v * (1.0 + m)).collect();
            }
            Perturbation::OffsetUp | Perturbation::OffsetDown => 0..x.len(),
            Perturbation::NuisanceUp | Perturbation::NuisanceDown => c..c + n,
            Perturbation::SpuriousUp | Perturbation::SpuriousDown => c + n..x.len(),
        };
        let mut out = x.to_vec();
        for j in range {
            out[j] += m * sigma[j];
        }
        out
    }
}

fn delta_norm(x: &[f64], xp: &[f64]) -> Result<f64> {
    if x.len() != xp.len() {
        return Err(Error::shape("lipschitz", format!("{} vs {} features", x.len(), xp.len())));
    }
    let d: Vec<f64> = x.iter().zip(xp).map(|(a, b)| a - b).collect();
    let r = norm(&d);
    if r <= MIN_DELTA {
        return Err(Error::domain(format!("perturbation norm {r:e} is not above {MIN_DELTA:e}")));
    }
    Ok(r)
}

fn directions(stack: &EncoderStack, x: &[f64], xp: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = Tensor::from_rows(&[x, xp])?;
    let mu = stack.mean_direction(&t)?;
    Ok((mu.row(0).to_vec(), mu.row(1).to_vec()))
}

fn log_ratio_samples(
    stack: &EncoderStack,
    kappa_e: f64,
    x: &[f64],
    xp: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    if n_samples == 0 {
        return Err(Error::domain("n_samples must be positive"));
    }
    let dx = delta_norm(x, xp)?;
    let (mu, mup) = directions(stack, x, xp)?;
    let p = VonMisesFisher::from_direction(&mu, kappa_e)?;
    let q = VonMisesFisher::from_direction(&mup, kappa_e)?;
    let mut out = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = p.sample(rng)?;
        out.push(p.log_prob(&z)? - q.log_prob(&z)?);
    }
    Ok((dx, out))
}

/// Monte-Carlo `mean_z [log e(z|x) - log e(z|x')] / |dx|` with
/// `z ~ e(.|x)`. One sample gives the single-draw estimate.
pub fn local_log_ratio(
    stack: &EncoderStack,
    kappa_e: f64,
    x: &[f64],
    xp: &[f64],
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (dx, s) = log_ratio_samples(stack, kappa_e, x, xp, n_samples, rng)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64 / dx)
}

fn record_from_directions(
    pair_id: usize,
    dx: f64,
    mu: &[f64],
    mup: &[f64],
    kappas: Kappas,
    cross: bool,
) -> Result<SmoothnessRecord> {
    let k2 = kappas.second(cross);
    let kl_forward = vmf::kl(
        &VonMisesFisher::from_direction(mu, kappas.kappa_e)?,
        &VonMisesFisher::from_direction(mup, k2)?,
    )?;
    let kl_backward = vmf::kl(
        &VonMisesFisher::from_direction(mup, kappas.kappa_e)?,
        &VonMisesFisher::from_direction(mu, k2)?,
    )?;
    let rec = SmoothnessRecord {
        pair_id,
        delta_norm: dx,
        local_estimate: kl_forward / dx,
        kl_forward,
        kl_backward,
        squared_bound: kl_forward.max(kl_backward) / (dx * dx),
    };
    let vals = [rec.local_estimate, rec.kl_forward, rec.kl_backward, rec.squared_bound];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("smoothness record"));
    }
    Ok(rec)
}

/// Analytic KLs and the squared bound for one pair. `pair_id` is left at 0.
pub fn squared_bound(stack: &EncoderStack, kappas: Kappas, cross: bool, x: &[f64], xp: &[f64]) -> Result<SmoothnessRecord> {
    let dx = delta_norm(x, xp)?;
    let (mu, mup) = directions(stack, x, xp)?;
    record_from_directions(0, dx, &mu, &mup, kappas, cross)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub family: Perturbation,
    pub records: Vec<SmoothnessRecord>,
    pub mean: f64,
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub families: Vec<FamilyReport>,
}

/// Equal-width bins on `[0, max]`, or `[0, 1]` when every value is zero.
pub fn histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<u64>) {
    let max = values.iter().copied().fold(0.0, f64::max);
    let hi = if max > 0.0 { max } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let b = ((v / hi) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    (edges, counts)
}

/// Per-family smoothness of `stack` on `n_pairs` records of `ds`.
/// `sigma` is the per-feature training standard deviation.
pub fn smoothness_report(
    stack: &EncoderStack,
    kappas: Kappas,
    ds: &Dataset,
    sigma: &[f64],
    families: &[Perturbation],
    opts: &LipschitzOptions,
) -> Result<SmoothnessReport> {
    opts.validate()?;
    let d = ds.config.input_dim();
    if sigma.len() != d {
        return Err(Error::shape("smoothness_report", format!("sigma has {} entries, expected {d}", sigma.len())));
    }
    if opts.n_pairs > ds.len() {
        return Err(Error::Config(format!("lipschitz.n_pairs {} exceeds dataset size {}", opts.n_pairs, ds.len())));
    }
    let mut rng = rng::stream(opts.seed, &[tag::LIPSCHITZ]);
    let idx = sample_indices(&mut rng, ds.len(), opts.n_pairs).into_vec();
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| ds.records[i].stored()).collect();
    let mu = stack.mean_direction(&Tensor::from_rows(&xs)?)?;
    let blocks = [ds.config.content_dim, ds.config.nuisance_dim, ds.config.spurious_dim];
    let mut out = Vec::with_capacity(families.len());
    for &family in families {
        let xps: Vec<Vec<f64>> = xs.iter().map(|x| family.apply(x, sigma, blocks, opts.magnitude)).collect();
        let mup = stack.mean_direction(&Tensor::from_rows(&xps)?)?;
        let mut records = Vec::with_capacity(xs.len());
        for (k, (x, xp)) in xs.iter().zip(&xps).enumerate() {
            let dx = delta_norm(x, xp)?;
            records.push(record_from_directions(idx[k], dx, mu.row(k), mup.row(k), kappas, opts.cross_kappa)?);
        }
        let est: Vec<f64> = records.iter().map(|r| r.local_estimate).collect();
        let mean = est.iter().sum::<f64>() / est.len() as f64;
        let (histogram_edges, histogram_counts) = histogram(&est, HISTOGRAM_BINS);
        out.push(FamilyReport { family, records, mean, histogram_edges, histogram_counts });
    }
    Ok(SmoothnessReport { families: out })
}

impl SmoothnessReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("family,pair_id,delta_norm,local_estimate,kl_forward,kl_backward,squared_bound\n");
        for f in &self.families {
            for r in &f.records {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    f.family.name(),
                    r.pair_id,
                    r.delta_norm,
                    r.local_estimate,
                    r.kl_forward,
                    r.kl_backward,
                    r.squared_bound
                ));
            }
        }
        s
    }

    /// `{family: {mean, histogram_edges, histogram_counts}}`.
    pub fn summary(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for f in &self.families {
            m.insert(
                f.family.name().to_string(),
                serde_json::json!({
                    "mean": f.mean,
                    "histogram_edges": f.histogram_edges,
                    "histogram_counts": f.histogram_counts,
                }),
            );
        }
        serde_json::Value::Object(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub family: String,
    pub compressed_mean: f64,
    pub uncompressed_mean: f64,
    pub compressed_smoother: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessComparison {
    pub rows: Vec<ComparisonRow>,
    /// Fraction of families where the compressed mean is not larger.
    pub fraction_smoother: f64,
}

/// Pairs families by name and compares their means.
pub fn compare(compressed: &SmoothnessReport, uncompressed: &SmoothnessReport) -> Result<SmoothnessComparison> {
    let mut rows = Vec::new();
    for c in &compressed.families {
        let u = uncompressed
            .families
            .iter()
            .find(|u| u.family == c.family)
            .ok_or_else(|| Error::domain(format!("family {} missing from second report", c.family.name())))?;
        rows.push(ComparisonRow {
            family: c.family.name().to_string(),
            compressed_mean: c.mean,
            uncompressed_mean: u.mean,
            compressed_smoother: c.mean <= u.mean,
        });
    }
    if rows.is_empty() {
        return Err(Error::domain("no families to compare"));
    }
    let fraction_smoother = rows.iter().filter(|r| r.compressed_smoother).count() as f64 / rows.len() as f64;
    Ok(SmoothnessComparison { rows, fraction_smoother })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::data::{generate, GeneratorConfig, Split};
    use crate::encoders::StackDims;
    use crate::losses::{self, Variant};
    use crate::vmf::Draw;

    fn small_stack(seed: u64) -> EncoderStack {
        let dims = StackDims { input_dim: 6, trunk_hidden: vec![16], repr_dim: 8, proj_hidden: 16, proj_dim: 5 };
        EncoderStack::new(dims, Variant::CSimclr, seed).unwrap()
    }

    fn kappas(k: f64) -> Kappas {
        Kappas { kappa_e: k, kappa_b: 10.0 }
    }

    #[test]
    fn invariant_direction_gives_zero() {
        let mut s = small_stack(1);
        let w = s.online_mut().get_mut("trunk.0.w").unwrap();
        let cols = w.cols();
        w.data_mut()[..cols].iter_mut().for_each(|v| *v = 0.0);
        let x = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7];
        let mut xp = x;
        xp[0] += 0.5;
        let mut rng = rng::stream(0, &[1]);
        assert_eq!(local_log_ratio(&s, 50.0, &x, &xp, 100, &mut rng).unwrap(), 0.0);
        let r = squared_bound(&s, kappas(50.0), false, &x, &xp).unwrap();
        assert_eq!((r.kl_forward, r.squared_bound), (0.0, 0.0));
    }

    #[test]
    fn zero_perturbation_is_rejected() {
        let s = small_stack(1);
        let x = [0.1; 6];
        let mut rng = rng::stream(0, &[1]);
        assert!(local_log_ratio(&s, 50.0, &x, &x, 10, &mut rng).is_err());
        assert!(squared_bound(&s, kappas(50.0), false, &x, &x).is_err());
    }

    #[test]
    fn monte_carlo_converges_to_analytic_kl() {
        let s = small_stack(2);
        let x = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7];
        let xp = [0.5, -0.1, 0.2, 0.1, -0.6, 0.9];
        let kappa = 20.0;
        let mut rng = rng::stream(0, &[2]);
        let (dx, samples) = log_ratio_samples(&s, kappa, &x, &xp, 100_000, &mut rng).unwrap();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let rec = squared_bound(&s, kappas(kappa), false, &x, &xp).unwrap();
        assert!(rec.kl_forward > 1e-3);
        assert!((mean - rec.kl_forward).abs() <= 3.0 * (var / n).sqrt(), "{mean} vs {}", rec.kl_forward);
        assert!((mean / dx - rec.local_estimate).abs() <= 3.0 * (var / n).sqrt() / dx);
    }

    #[test]
    fn estimate_is_linear_in_small_perturbations() {
        let s = small_stack(3);
        let x = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7];
        let dir = [0.2, 0.5, -0.3, 0.4, 0.1, -0.6];
        let at = |h: f64| {
            let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            squared_bound(&s, kappas(100.0), false, &x, &xp).unwrap().local_estimate
        };
        let (a, b) = (at(1e-3), at(2e-3));
        assert!(a > 0.0);
        assert!((b / a - 2.0).abs() < 0.4, "ratio {}", b / a);
    }

    #[test]
    fn record_matches_hand_computation() {
        let s = small_stack(4);
        let x = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7];
        let xp = [0.1, 0.2, 0.5, -0.3, -0.4, 0.2];
        let kappa = 30.0;
        let rec = squared_bound(&s, kappas(kappa), false, &x, &xp).unwrap();
        let mu = s.mean_direction(&Tensor::from_rows(&[x, xp]).unwrap()).unwrap();
        let cos: f64 = mu.row(0).iter().zip(mu.row(1)).map(|(a, b)| a * b).sum();
        let a = vmf::mean_resultant_length(5, kappa).unwrap();
        let kl = kappa * a * (1.0 - cos);
        let dx2: f64 = x.iter().zip(&xp).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!((rec.kl_forward - kl).abs() <= 1e-10 * kl.max(1.0));
        assert_eq!(rec.kl_forward, rec.kl_backward);
        assert!((rec.squared_bound - kl / dx2).abs() <= 1e-10 * (kl / dx2).max(1.0));
        assert!((rec.delta_norm - dx2.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cross_kappa_changes_scale_only_in_second_argument() {
        let s = small_stack(4);
        let x = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7];
        let xp = [0.1, 0.2, 0.5, -0.3, -0.4, 0.2];
        let same = squared_bound(&s, kappas(30.0), false, &x, &xp).unwrap();
        let cross = squared_bound(&s, kappas(30.0), true, &x, &xp).unwrap();
        assert!(cross.kl_forward >= 0.0 && cross.kl_backward >= 0.0);
        assert_ne!(same.kl_forward, cross.kl_forward);
    }

    #[test]
    fn squared_bound_scales_inversely_with_delta() {
        let mu = [1.0, 0.0, 0.0];
        let mup = [0.8, 0.6, 0.0];
        let a = record_from_directions(0, 0.5, &mu, &mup, kappas(12.0), false).unwrap();
        let b = record_from_directions(0, 1.5, &mu, &mup, kappas(12.0), false).unwrap();
        assert!((a.squared_bound / b.squared_bound - 9.0).abs() < 1e-12);
    }

    #[test]
    fn compression_term_expectation_matches_symmetric_kl() {
        let kappa = 8.0;
        let (mu, mup) = ([0.6, 0.8, 0.0, 0.0], [0.0, 0.6, 0.8, 0.0]);
        let kl_f = vmf::kl(
            &VonMisesFisher::new(mu.to_vec(), kappa).unwrap(),
            &VonMisesFisher::new(mup.to_vec(), kappa).unwrap(),
        )
        .unwrap();
        let b = 4000;
        let rx = Tensor::from_rows(&vec![mu; b]).unwrap();
        let ry = Tensor::from_rows(&vec![mup; b]).unwrap();
        let mut g = Graph::new();
        let (rx, ry) = (g.constant(rx), g.constant(ry));
        let mut cfg = LossConfig::new(Variant::CSimclr);
        cfg.kappa_e = Some(kappa);
        cfg.kappa_b = Some(kappa);
        let mut rng = rng::stream(0, &[3]);
        let out = losses::c_simclr_loss(&mut g, rx, ry, &cfg, &mut Draw::Sample(&mut rng)).unwrap();
        let mut se2 = 0.0;
        for d in &out.directions {
            let n = d.i_xzy.len() as f64;
            let m = d.i_xzy.iter().sum::<f64>() / n;
            se2 += d.i_xzy.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n;
        }
        assert!((out.i_xzy - 2.0 * kl_f).abs() <= 3.0 * se2.sqrt(), "{} vs {}", out.i_xzy, 2.0 * kl_f);
    }

    fn tiny_data() -> (Dataset, Vec<f64>) {
        let cfg = GeneratorConfig { n_classes: 3, content_dim: 2, nuisance_dim: 2, spurious_dim: 2, n_train: 50, n_test: 40, ..Default::default() };
        let tr = generate(&cfg, Split::Train).unwrap();
        let te = generate(&cfg, Split::Test).unwrap();
        (te, tr.feature_std())
    }

    #[test]
    fn constant_encoder_reports_zero_everywhere() {
        let mut s = small_stack(5);
        s.online_mut().get_mut("proj.1.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        s.online_mut().get_mut("proj.1.b").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 0.0, -1.0, 0.5]);
        let (ds, sigma) = tiny_data();
        let opts = LipschitzOptions { n_pairs: 30, ..Default::default() };
        let rep = smoothness_report(&s, kappas(100.0), &ds, &sigma, &Perturbation::ALL, &opts).unwrap();
        assert_eq!(rep.families.len(), 8);
        for f in &rep.families {
            assert_eq!(f.records.len(), 30);
            assert!(f.records.iter().all(|r| r.local_estimate == 0.0 && r.squared_bound == 0.0));
            assert_eq!(f.mean, 0.0);
            assert_eq!(f.histogram_counts.iter().sum::<u64>(), 30);
            assert_eq!(f.histogram_edges.len(), HISTOGRAM_BINS + 1);
        }
    }

    #[test]
    fn report_is_deterministic_and_serializes() {
        let s = small_stack(6);
        let (ds, sigma) = tiny_data();
        let opts = LipschitzOptions { n_pairs: 20, seed: 4, ..Default::default() };
        let a = smoothness_report(&s, kappas(100.0), &ds, &sigma, &Perturbation::ALL, &opts).unwrap();
        let b = smoothness_report(&s, kappas(100.0), &ds, &sigma, &Perturbation::ALL, &opts).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.summary(), b.summary());
        assert_eq!(a.csv().lines().count(), 1 + 8 * 20);
        assert!(a.summary()["nuisance+"]["mean"].as_f64().unwrap() > 0.0);
        let c = compare(&a, &b).unwrap();
        assert_eq!(c.fraction_smoother, 1.0);
    }

    #[test]
    fn histogram_bins_cover_range() {
        let (edges, counts) = histogram(&[0.0, 0.5, 1.0, 2.0], 4);
        assert_eq!(edges, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(counts, vec![1, 1, 1, 1]);
    }

    #[test]
    fn perturbations_touch_only_their_block() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let sigma = [1.0; 6];
        let b = [2, 2, 2];
        assert_eq!(Perturbation::NuisanceUp.apply(&x, &sigma, b, 0.1), vec![1.0, 2.0, 3.1, 4.1, 5.0, 6.0]);
        assert_eq!(Perturbation::SpuriousDown.apply(&x, &sigma, b, 0.5), vec![1.0, 2.0, 3.0, 4.0, 4.5, 5.5]);
        assert_eq!(Perturbation::GainDown.apply(&x, &sigma, b, 0.5)[5], 3.0);
        assert_eq!(Perturbation::OffsetUp.apply(&x, &sigma, b, 0.5)[0], 1.5);
    }
}
