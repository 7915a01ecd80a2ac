//! Synthetic multiview data.
//!
//! Every record has a class `c`, a content vector near the class prototype,
//! and spurious coordinates that usually encode `c` as well. Nuisance
//! coordinates are drawn fresh for every view, so only content and spurious
//! coordinates are shared between the two views of a record. The stored
//! (evaluation) form of a record uses a canonical nuisance draw.
//!
//! Layout of a feature vector: `[content; nuisance; spurious]`.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::tensor::Tensor;

const MAX_PROTOTYPE_TRIES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub content_dim: usize,
    pub nuisance_dim: usize,
    pub spurious_dim: usize,
    /// Minimum pairwise distance between unit-norm class prototypes.
    pub class_separation: f64,
    /// Per-coordinate standard deviation of the record-level content jitter.
    pub within_class_std: f64,
    pub nuisance_scale: f64,
    /// Probability that the spurious code equals the class.
    pub spurious_correlation: f64,
    /// Norm of the spurious code vectors.
    pub spurious_scale: f64,
    /// Per-coordinate standard deviation of spurious noise.
    pub spurious_noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            content_dim: 8,
            nuisance_dim: 16,
            spurious_dim: 8,
            class_separation: 0.8,
            within_class_std: 0.25,
            nuisance_scale: 1.0,
            spurious_correlation: 0.9,
            spurious_scale: 1.0,
            spurious_noise: 0.25,
            n_train: 20_000,
            n_test: 4_000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn input_dim(&self) -> usize {
        self.content_dim + self.nuisance_dim + self.spurious_dim
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return err(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.content_dim == 0 {
            return err("content_dim must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.spurious_correlation) {
            return err(format!("spurious_correlation must be in [0, 1], got {}", self.spurious_correlation));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("within_class_std", self.within_class_std),
            ("nuisance_scale", self.nuisance_scale),
            ("spurious_scale", self.spurious_scale),
            ("spurious_noise", self.spurious_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.n_train == 0 || self.n_test == 0 {
            return err("n_train and n_test must be positive".into());
        }
        Ok(())
    }
}

/// Which part of a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Latent description of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub label: usize,
    /// Class index encoded in the spurious coordinates.
    pub spurious_class: usize,
    /// Prototype plus record-level jitter.
    pub content: Vec<f64>,
    pub spurious: Vec<f64>,
    /// Nuisance used for the stored form of the record.
    pub canonical_nuisance: Vec<f64>,
}

impl Record {
    /// `[content; canonical nuisance; spurious]`.
    pub fn stored(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.content.len() + self.canonical_nuisance.len() + self.spurious.len());
        v.extend_from_slice(&self.content);
        v.extend_from_slice(&self.canonical_nuisance);
        v.extend_from_slice(&self.spurious);
        v
    }
}

/// Class prototypes for content and spurious coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub content: Vec<Vec<f64>>,
    pub spurious: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub split: Split,
    pub records: Vec<Record>,
    pub prototypes: Prototypes,
}

fn gaussian_vec(n: usize, std: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_unit(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v = gaussian_vec(n, 1.0, rng);
        let r = crate::tensor::norm(&v);
        if r > 1e-6 {
            return v.into_iter().map(|x| x / r).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unit vectors on the `dim`-sphere with pairwise distance at least `sep`.
///
/// Two classes are placed antipodally. Otherwise points are drawn by
/// rejection; separations above the regular-simplex bound
/// `sqrt(2k / (k - 1))`, or that rejection cannot satisfy, are reported as
/// infeasible.
pub fn sphere_prototypes(k: usize, dim: usize, sep: f64, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    let infeasible = || Error::Config(format!("class_separation {sep} is infeasible for {k} classes in {dim} dims"));
    if k == 2 {
        if sep > 2.0 {
            return Err(infeasible());
        }
        let p = random_unit(dim, rng);
        let q = p.iter().map(|v| -v).collect();
        return Ok(vec![p, q]);
    }
    let simplex = (2.0 * k as f64 / (k as f64 - 1.0)).sqrt();
    if sep > simplex || (dim == 1 && k > 2) {
        return Err(infeasible());
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut tries = 0;
    while out.len() < k {
        tries += 1;
        if tries > MAX_PROTOTYPE_TRIES {
            return Err(infeasible());
        }
        let c = random_unit(dim, rng);
        if out.iter().all(|p| distance(p, &c) >= sep) {
            out.push(c);
        }
    }
    Ok(out)
}

pub fn prototypes(cfg: &GeneratorConfig) -> Result<Prototypes> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, &[tag::PROTOTYPES]);
    let content = sphere_prototypes(cfg.n_classes, cfg.content_dim, cfg.class_separation, &mut r)?;
    let spurious = if cfg.spurious_dim == 0 {
        vec![Vec::new(); cfg.n_classes]
    } else {
        (0..cfg.n_classes)
            .map(|_| random_unit(cfg.spurious_dim, &mut r).into_iter().map(|v| v * cfg.spurious_scale).collect())
            .collect()
    };
    Ok(Prototypes { content, spurious })
}

/// Spurious coordinates for class `c`: the class code with probability
/// `correlation`, otherwise the code of a uniformly drawn class.
fn draw_spurious(
    cfg: &GeneratorConfig,
    protos: &Prototypes,
    c: usize,
    correlation: f64,
    rng: &mut impl Rng,
) -> (usize, Vec<f64>) {
    let code = if rng.gen::<f64>() < correlation { c } else { rng.gen_range(0..cfg.n_classes) };
    let noise = gaussian_vec(cfg.spurious_dim, cfg.spurious_noise, rng);
    let v = protos.spurious[code].iter().zip(noise).map(|(p, n)| p + n).collect();
    (code, v)
}

/// Record `index` of the combined train+test sequence. Pure in `(cfg, index)`.
pub fn record(cfg: &GeneratorConfig, protos: &Prototypes, index: u64) -> Record {
    let mut r = rng::stream(cfg.seed, &[tag::RECORD, index]);
    let label = r.gen_range(0..cfg.n_classes);
    let jitter = gaussian_vec(cfg.content_dim, cfg.within_class_std, &mut r);
    let content = protos.content[label].iter().zip(jitter).map(|(p, j)| p + j).collect();
    let (spurious_class, spurious) = draw_spurious(cfg, protos, label, cfg.spurious_correlation, &mut r);
    let mut rn = rng::stream(cfg.seed, &[tag::CANONICAL_NUISANCE, index]);
    let canonical_nuisance = gaussian_vec(cfg.nuisance_dim, cfg.nuisance_scale, &mut rn);
    Record { label, spurious_class, content, spurious, canonical_nuisance }
}

/// Generates one split; records are produced in parallel and agree
/// bit-exactly with serial generation.
pub fn generate(cfg: &GeneratorConfig, split: Split) -> Result<Dataset> {
    let protos = prototypes(cfg)?;
    let range = match split {
        Split::Train => 0..cfg.n_train as u64,
        Split::Test => cfg.n_train as u64..(cfg.n_train + cfg.n_test) as u64,
    };
    let records = range.into_par_iter().map(|i| record(cfg, &protos, i)).collect();
    Ok(Dataset { config: cfg.clone(), split, records, prototypes: protos })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Stored feature matrix `[N, input_dim]`.
    pub fn features(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.records.iter().map(Record::stored).collect();
        Tensor::from_rows(&rows)
    }

    /// Per-feature population standard deviation of the stored features.
    pub fn feature_std(&self) -> Vec<f64> {
        let d = self.config.input_dim();
        let n = self.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &self.records {
            for (m, v) in mean.iter_mut().zip(r.stored()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in &self.records {
            for ((s, v), m) in var.iter_mut().zip(r.stored()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }
}

/// Augmentation strengths. [`AugmentConfig::identity`] leaves views equal to
/// `[content; nuisance; spurious]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Expected norm of the per-view content perturbation.
    pub content_noise: f64,
    /// Masking fraction is uniform on `[0, 1 - area_lower_bound]`.
    pub area_lower_bound: f64,
    /// Gain is uniform on `[1 - gain_jitter, 1 + gain_jitter]`.
    pub gain_jitter: f64,
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { content_noise: 0.1, area_lower_bound: 0.08, gain_jitter: 0.4, noise_std: 0.1 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self { content_noise: 0.0, area_lower_bound: 1.0, gain_jitter: 0.0, noise_std: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.area_lower_bound > 0.0 && self.area_lower_bound <= 1.0) {
            return Err(Error::Config(format!("area_lower_bound must be in (0, 1], got {}", self.area_lower_bound)));
        }
        if !(0.0..1.0).contains(&self.gain_jitter) {
            return Err(Error::Config(format!("gain_jitter must be in [0, 1), got {}", self.gain_jitter)));
        }
        if !(self.content_noise >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// One augmented view of `rec`.
pub fn augment(cfg: &GeneratorConfig, aug: &AugmentConfig, rec: &Record, rng: &mut impl Rng) -> Vec<f64> {
    let d = cfg.input_dim();
    let per_coord = aug.content_noise / (cfg.content_dim as f64).sqrt();
    let mut v = Vec::with_capacity(d);
    v.extend(rec.content.iter().map(|c| c + per_coord * rng.sample::<f64, _>(StandardNormal)));
    v.extend(gaussian_vec(cfg.nuisance_dim, cfg.nuisance_scale, rng));
    v.extend_from_slice(&rec.spurious);

    let max_frac = 1.0 - aug.area_lower_bound;
    if max_frac > 0.0 {
        let frac = rng.gen::<f64>() * max_frac;
        let k = (frac * d as f64).floor() as usize;
        for i in sample_indices(rng, d, k) {
            v[i] = 0.0;
        }
    }
    if aug.gain_jitter > 0.0 {
        let gain = rng.gen_range(1.0 - aug.gain_jitter..=1.0 + aug.gain_jitter);
        v.iter_mut().for_each(|x| *x *= gain);
    }
    if aug.noise_std > 0.0 {
        v.iter_mut().for_each(|x| *x += aug.noise_std * rng.sample::<f64, _>(StandardNormal));
    }
    v
}

/// Paired views for the given records; row `i` of both matrices comes from
/// `records[idx[i]]`.
pub fn view_pair(
    ds: &Dataset,
    aug: &AugmentConfig,
    idx: &[usize],
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(idx.len());
    let mut b = Vec::with_capacity(idx.len());
    for &i in idx {
        let rec = &ds.records[i];
        a.push(augment(&ds.config, aug, rec, rng));
        b.push(augment(&ds.config, aug, rec, rng));
    }
    Ok((Tensor::from_rows(&a)?, Tensor::from_rows(&b)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftFamily {
    GaussianNoise,
    FeatureMask,
    ScaleDrift,
    NuisanceShift,
    SpuriousFlip,
}

impl ShiftFamily {
    pub const ALL: [ShiftFamily; 5] = [
        ShiftFamily::GaussianNoise,
        ShiftFamily::FeatureMask,
        ShiftFamily::ScaleDrift,
        ShiftFamily::NuisanceShift,
        ShiftFamily::SpuriousFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftFamily::GaussianNoise => "gaussian_noise",
            ShiftFamily::FeatureMask => "feature_mask",
            ShiftFamily::ScaleDrift => "scale_drift",
            ShiftFamily::NuisanceShift => "nuisance_shift",
            ShiftFamily::SpuriousFlip => "spurious_flip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSuite {
    pub family: ShiftFamily,
    pub severity: u8,
}

/// Magnitude in units of the training standard deviation.
pub fn severity_magnitude(severity: u8) -> Result<f64> {
    match severity {
        1 => Ok(0.1),
        2 => Ok(0.25),
        3 => Ok(0.5),
        4 => Ok(1.0),
        5 => Ok(2.0),
        _ => Err(Error::Config(format!("severity must be in 1..=5, got {severity}"))),
    }
}

/// Perturbed stored features of `ds`.
///
/// - `gaussian_noise`: adds `N(0, (m sigma_j)^2)` to feature `j`.
/// - `feature_mask`: zeroes a random `m / 4` fraction of coordinates per row.
/// - `scale_drift`: multiplies feature `j` by `exp(m s_j)` with fixed signs `s_j`.
/// - `nuisance_shift`: translates nuisance feature `j` by `m sigma_j s_j`.
/// - `spurious_flip`: redraws spurious coordinates with correlation
///   `(1 - severity / 5) * spurious_correlation`.
///
/// `sigma` is the per-feature training standard deviation. The result is a
/// pure function of `(ds, sigma, suite, seed)`.
pub fn shift_suite(ds: &Dataset, sigma: &[f64], suite: ShiftSuite, seed: u64) -> Result<Tensor> {
    let m = severity_magnitude(suite.severity)?;
    let cfg = &ds.config;
    let d = cfg.input_dim();
    if sigma.len() != d {
        return Err(Error::shape("shift_suite", format!("sigma has {} entries, expected {d}", sigma.len())));
    }
    let fam = suite.family as u64;
    let mut fixed = rng::stream(seed, &[tag::SHIFT, fam]);
    let signs: Vec<f64> = (0..d).map(|_| if fixed.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let nuisance = cfg.content_dim..cfg.content_dim + cfg.nuisance_dim;
    let rows: Vec<Vec<f64>> = ds
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut r = rng::stream(seed, &[tag::SHIFT, fam, suite.severity as u64, i as u64]);
            let mut x = rec.stored();
            match suite.family {
                ShiftFamily::GaussianNoise => {
                    for (v, s) in x.iter_mut().zip(sigma) {
                        *v += m * s * r.sample::<f64, _>(StandardNormal);
                    }
                }
                ShiftFamily::FeatureMask => {
                    let k = ((m / 4.0) * d as f64).round() as usize;
                    for j in sample_indices(&mut r, d, k) {
                        x[j] = 0.0;
                    }
                }
                ShiftFamily::ScaleDrift => {
                    for (v, s) in x.iter_mut().zip(&signs) {
                        *v *= (m * s).exp();
                    }
                }
                ShiftFamily::NuisanceShift => {
                    for j in nuisance.clone() {
                        x[j] += m * sigma[j] * signs[j];
                    }
                }
                ShiftFamily::SpuriousFlip => {
                    let rho = (1.0 - suite.severity as f64 / 5.0) * cfg.spurious_correlation;
                    let (_, s) = draw_spurious(cfg, &ds.prototypes, rec.label, rho, &mut r);
                    x[cfg.content_dim + cfg.nuisance_dim..].copy_from_slice(&s);
                }
            }
            x
        })
        .collect();
    Tensor::from_rows(&rows)
}

#[derive(Serialize, Deserialize)]
struct Line {
    x: Vec<f64>,
    label: usize,
}

/// Writes `train.jsonl`, `test.jsonl` and `dataset.meta.json` into `dir`.
pub fn write_dataset(dir: &Path, cfg: &GeneratorConfig, force: bool) -> Result<()> {
    let files = ["train.jsonl", "test.jsonl", "dataset.meta.json"].map(|f| dir.join(f));
    if !force {
        if let Some(p) = files.iter().find(|p| p.exists()) {
            return Err(Error::Config(format!("{} exists (use --force to overwrite)", p.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (split, path) in [(Split::Train, &files[0]), (Split::Test, &files[1])] {
        let ds = generate(cfg, split)?;
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for rec in &ds.records {
            let line = Line { x: rec.stored(), label: rec.label };
            serde_json::to_writer(&mut w, &line).map_err(|e| Error::json("dataset line", e))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let meta = serde_json::to_string_pretty(cfg).map_err(|e| Error::json("dataset meta", e))?;
    std::fs::write(&files[2], meta + "\n").map_err(|e| Error::io(&files[2], e))
}

/// Reads a JSONL split back as `(features, labels)`.
pub fn read_jsonl(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
        rows.push(l.x);
        labels.push(l.label);
    }
    Ok((Tensor::from_rows(&rows)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { n_train: 200, n_test: 50, ..Default::default() }
    }

    #[test]
    fn two_classes_are_antipodal() {
        let mut r = rng::stream(0, &[]);
        let p = sphere_prototypes(2, 5, 2.0, &mut r).unwrap();
        assert!((distance(&p[0], &p[1]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_separation_is_reported() {
        let mut r = rng::stream(0, &[]);
        assert!(sphere_prototypes(10, 8, 1.6, &mut r).is_err());
        assert!(sphere_prototypes(3, 1, 0.5, &mut r).is_err());
        let ok = sphere_prototypes(10, 8, 0.8, &mut r).unwrap();
        for i in 0..10 {
            for j in 0..i {
                assert!(distance(&ok[i], &ok[j]) >= 0.8);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_indexable() {
        let cfg = small();
        let a = generate(&cfg, Split::Train).unwrap();
        let b = generate(&cfg, Split::Train).unwrap();
        assert_eq!(a.records, b.records);
        let t = generate(&cfg, Split::Test).unwrap();
        assert_eq!(t.records[3], record(&cfg, &a.prototypes, 203));
    }

    #[test]
    fn full_spurious_correlation_always_agrees() {
        let cfg = GeneratorConfig { spurious_correlation: 1.0, n_train: 10_000, ..small() };
        let ds = generate(&cfg, Split::Train).unwrap();
        assert!(ds.records.iter().all(|r| r.spurious_class == r.label));
    }

    #[test]
    fn identity_augmentation_reproduces_record_with_fresh_nuisance() {
        let cfg = small();
        let ds = generate(&cfg, Split::Train).unwrap();
        let rec = &ds.records[0];
        let mut r = rng::stream(1, &[]);
        let v = augment(&cfg, &AugmentConfig::identity(), rec, &mut r);
        assert_eq!(&v[..8], &rec.content[..]);
        assert_eq!(&v[24..], &rec.spurious[..]);
    }

    #[test]
    fn masking_respects_area_lower_bound() {
        let cfg = small();
        let ds = generate(&cfg, Split::Train).unwrap();
        let aug = AugmentConfig { content_noise: 0.0, area_lower_bound: 0.08, gain_jitter: 0.0, noise_std: 0.0 };
        let mut r = rng::stream(2, &[]);
        let mut most = 0;
        for rec in &ds.records {
            let v = augment(&cfg, &aug, rec, &mut r);
            let zeros = v.iter().filter(|&&x| x == 0.0).count();
            most = most.max(zeros);
            assert!(zeros as f64 <= 0.92 * 32.0);
        }
        assert!(most > 20);
    }

    #[test]
    fn views_differ_and_nuisance_is_independent() {
        let cfg = GeneratorConfig { n_train: 10_000, ..small() };
        let ds = generate(&cfg, Split::Train).unwrap();
        let aug = AugmentConfig { area_lower_bound: 1.0, gain_jitter: 0.0, noise_std: 0.0, ..Default::default() };
        let mut r = rng::stream(3, &[]);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (a, b) = view_pair(&ds, &aug, &idx, &mut r).unwrap();
        assert_ne!(a, b);
        let n = ds.len() as f64;
        let mut dist = 0.0;
        for i in 0..ds.len() {
            dist += distance(&a.row(i)[..8], &b.row(i)[..8]) / n;
        }
        assert!(dist <= 2.0 * aug.content_noise);
        for j in 8..24 {
            let (xa, xb): (Vec<f64>, Vec<f64>) = (0..ds.len()).map(|i| (a.row(i)[j], b.row(i)[j])).unzip();
            let corr = correlation(&xa, &xb);
            assert!(corr.abs() < 0.05, "feature {j}: {corr}");
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn severity_is_validated_and_monotone() {
        assert!(severity_magnitude(0).is_err());
        assert!(severity_magnitude(6).is_err());
        let m: Vec<f64> = (1..=5).map(|s| severity_magnitude(s).unwrap()).collect();
        assert!(m.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn shift_suite_is_deterministic() {
        let cfg = small();
        let ds = generate(&cfg, Split::Test).unwrap();
        let sigma = generate(&cfg, Split::Train).unwrap().feature_std();
        for f in ShiftFamily::ALL {
            let s = ShiftSuite { family: f, severity: 3 };
            assert_eq!(shift_suite(&ds, &sigma, s, 1).unwrap(), shift_suite(&ds, &sigma, s, 1).unwrap());
            assert_ne!(shift_suite(&ds, &sigma, s, 1).unwrap(), ds.features().unwrap());
        }
        assert!(shift_suite(&ds, &sigma, ShiftSuite { family: ShiftFamily::FeatureMask, severity: 0 }, 1).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = GeneratorConfig { n_train: 30, n_test: 10, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, false).unwrap();
        assert!(write_dataset(dir.path(), &cfg, false).is_err());
        let (x, y) = read_jsonl(&dir.path().join("train.jsonl")).unwrap();
        let ds = generate(&cfg, Split::Train).unwrap();
        assert_eq!(x, ds.features().unwrap());
        assert_eq!(y, ds.labels());
    }
}
