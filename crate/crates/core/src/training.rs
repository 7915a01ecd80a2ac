//! Optimization loop.
//!
//! SGD with momentum and decoupled weight decay, a cosine learning-rate
//! schedule with linear warmup, and EMA target updates for BYOL variants.
//! Each step draws two augmented views per example, evaluates the selected
//! objective and updates the online parameters. One metrics record is kept
//! per epoch.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::checkpoint::StackMeta;
use crate::data::{self, AugmentConfig, Dataset};
use crate::encoders::{self, EncoderStack, Mode, Net, StackDims};
use crate::error::{Error, Result};
use crate::losses::{self, CByolInputs, LossBreakdown, LossConfig, Variant};
use crate::rng::{self, tag};
use crate::tensor::Tensor;
use crate::vmf::Draw;

/// Mean per-dimension batch variance of `r` below which training is
/// declared collapsed.
pub const COLLAPSE_VARIANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_base: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub dims: StackDims,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            base_lr: 0.2,
            warmup_epochs: 2.0,
            momentum: 0.9,
            weight_decay: 1e-6,
            alpha_base: 0.99,
            seed: 0,
            loss: LossConfig::default(),
            dims: StackDims::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return err(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs > 0 && !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return err(format!("warmup_epochs {} must be in [0, epochs)", self.warmup_epochs));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.alpha_base > 0.0 && self.alpha_base < 1.0) {
            return err(format!("alpha_base must be in (0, 1), got {}", self.alpha_base));
        }
        self.loss.validate()?;
        self.dims.validate()?;
        self.augment.validate()
    }

    /// Copy with loss defaults written out.
    pub fn resolved(&self) -> Self {
        Self { loss: self.loss.resolved(), ..self.clone() }
    }
}

/// Linear warmup to `peak_lr`, then half-cosine decay to zero.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, peak_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps && total_steps > 0 {
        return Err(Error::domain(format!("warmup {warmup_steps} must be below total {total_steps}")));
    }
    if step > total_steps {
        return Err(Error::domain(format!("step {step} beyond total {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(peak_lr * step as f64 / warmup_steps as f64);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak_lr * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub i_xzy_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub i_yz_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub byol_term: Option<f64>,
    pub lr: f64,
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseRecord {
    pub collapse: bool,
    pub epoch: usize,
    pub step: u64,
    pub reason: String,
}

/// Result of [`train`]. `collapse` is set when the run was aborted.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stack: EncoderStack,
    pub metrics: Vec<EpochMetrics>,
    pub collapse: Option<CollapseRecord>,
    pub config_hash: String,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn meta(&self) -> StackMeta {
        StackMeta {
            variant: self.stack.variant(),
            dims: self.stack.dims().clone(),
            config_hash: self.config_hash.clone(),
            steps: self.steps,
        }
    }

    /// Metrics as JSONL, collapse record last.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.metrics {
            out += &serde_json::to_string(m).map_err(|e| Error::json("metrics", e))?;
            out.push('\n');
        }
        if let Some(c) = &self.collapse {
            out += &serde_json::to_string(c).map_err(|e| Error::json("collapse record", e))?;
            out.push('\n');
        }
        Ok(out)
    }
}

/// SHA-256 over the canonical JSON of the resolved configs.
pub fn config_hash(cfg: &TrainConfig, data: &data::GeneratorConfig) -> Result<String> {
    let v = serde_json::json!({ "train": cfg.resolved(), "data": data });
    let bytes = serde_json::to_vec(&v).map_err(|e| Error::json("config hash", e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

struct StepResult {
    loss: LossBreakdown,
    r_variance: f64,
}

fn batch_variance(r: &Tensor) -> f64 {
    let (b, d) = (r.rows(), r.cols());
    let mut total = 0.0;
    for j in 0..d {
        let mean = (0..b).map(|i| r.row(i)[j]).sum::<f64>() / b as f64;
        total += (0..b).map(|i| (r.row(i)[j] - mean).powi(2)).sum::<f64>() / b as f64;
    }
    total / d as f64
}

/// Builds the objective for one batch on `g`; online parameters are bound
/// as trainable leaves in `binding` order.
fn objective(
    stack: &mut EncoderStack,
    g: &mut Graph,
    cfg: &LossConfig,
    x: &Tensor,
    xp: &Tensor,
    draw: &mut Draw<'_>,
) -> Result<(StepResult, encoders::Binding)> {
    let b = stack.bind_online(g, true);
    let xv = g.constant(x.clone());
    let xpv = g.constant(xp.clone());
    let proj = |stack: &mut EncoderStack, g: &mut Graph, v| -> Result<_> {
        let h = stack.forward(g, &b, Net::Trunk, v, Mode::Train)?;
        stack.forward(g, &b, Net::Projection, h, Mode::Train)
    };
    let p_x = proj(stack, g, xv)?;
    let p_y = proj(stack, g, xpv)?;
    let r_x = g.l2_normalize(p_x)?;
    let r_y = g.l2_normalize(p_y)?;
    let r_variance = batch_variance(g.value(r_x));

    let loss = match cfg.variant {
        Variant::Simclr => losses::simclr_breakdown(g, r_x, r_y, cfg.tau())?,
        Variant::CSimclr => losses::c_simclr_loss(g, r_x, r_y, cfg, draw)?,
        Variant::Byol | Variant::CByol => {
            let tb = stack.bind_target(g);
            let target_dir = |stack: &mut EncoderStack, g: &mut Graph, v| -> Result<_> {
                let t = stack.forward_target(g, &tb, v, Mode::TrainFrozen)?;
                let t = g.l2_normalize(t)?;
                Ok(g.stop_gradient(t))
            };
            let t_x = target_dir(stack, g, xv)?;
            let t_y = target_dir(stack, g, xpv)?;
            let q_x = stack.forward(g, &b, Net::Predictor, p_x, Mode::Train)?;
            let q_y = stack.forward(g, &b, Net::Predictor, p_y, Mode::Train)?;
            let mu_x = g.l2_normalize(q_x)?;
            let mu_y = g.l2_normalize(q_y)?;
            if cfg.variant == Variant::Byol {
                losses::byol_breakdown(g, [(mu_x, t_y), (mu_y, t_x)], cfg.w_byol())?
            } else {
                let m_x = stack.forward(g, &b, Net::BHead, t_x, Mode::Train)?;
                let m_y = stack.forward(g, &b, Net::BHead, t_y, Mode::Train)?;
                let mu_b_x = g.l2_normalize(m_x)?;
                let mu_b_y = g.l2_normalize(m_y)?;
                let paths = [
                    CByolInputs { mu_e: mu_x, mu_b: mu_b_x, y_prime: t_y },
                    CByolInputs { mu_e: mu_y, mu_b: mu_b_y, y_prime: t_x },
                ];
                let bref = &b;
                losses::c_byol_loss(
                    g,
                    paths,
                    |g, z| stack.forward(g, bref, Net::DHead, z, Mode::Train),
                    cfg,
                    draw,
                )?
            }
        }
    };
    Ok((StepResult { loss, r_variance }, b))
}

/// Trains a fresh stack on `ds`.
///
/// Returns early with a collapse record when the loss or activations become
/// non-finite, or when the batch variance of `r` drops below
/// [`COLLAPSE_VARIANCE`].
pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if cfg.dims.input_dim != ds.config.input_dim() {
        return Err(Error::Config(format!(
            "stack input_dim {} does not match data dim {}",
            cfg.dims.input_dim,
            ds.config.input_dim()
        )));
    }
    let steps_per_epoch = (ds.len() / cfg.batch_size) as u64;
    if steps_per_epoch == 0 && cfg.epochs > 0 {
        return Err(Error::Config(format!("batch_size {} exceeds dataset size {}", cfg.batch_size, ds.len())));
    }
    let total = steps_per_epoch * cfg.epochs as u64;
    let warmup = (cfg.warmup_epochs * steps_per_epoch as f64).round() as u64;
    let peak = cfg.peak_lr();
    let hash = config_hash(cfg, &ds.config)?;
    let mut stack = EncoderStack::new(cfg.dims.clone(), cfg.loss.variant, cfg.seed)?;
    let mut velocity: Vec<Vec<f64>> = stack.online().values().iter().map(|t| vec![0.0; t.numel()]).collect();
    let decay: Vec<bool> = (0..stack.online().len()).map(|i| !stack.is_norm_param(i)).collect();
    let sampled = cfg.loss.variant.is_compressed() && !cfg.loss.deterministic;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::stream(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut ixzy_sum, mut iyz_sum, mut byol_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut lr, mut alpha) = (0.0, None);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let mut r = rng::stream(cfg.seed, &[tag::STEP, step]);
            let (x, xp) = data::view_pair(ds, &cfg.augment, chunk, &mut r)?;
            let mut g = Graph::new();
            let mut draw = if sampled { Draw::Sample(&mut r) } else { Draw::Deterministic };
            let collapse = |reason: String| CollapseRecord { collapse: true, epoch: epoch + 1, step, reason };
            let (res, binding) = match objective(&mut stack, &mut g, &cfg.loss, &x, &xp, &mut draw) {
                Ok(v) => v,
                Err(e) if e.is_numeric() => {
                    log::warn!("collapse at step {step}: {e}");
                    return Ok(abort(stack, metrics, collapse(e.to_string()), hash, step));
                }
                Err(e) => return Err(e),
            };
            if !res.loss.total_value.is_finite() {
                return Ok(abort(stack, metrics, collapse("non-finite loss".into()), hash, step));
            }
            if res.r_variance < COLLAPSE_VARIANCE {
                let reason = format!("representation variance {:e} below {COLLAPSE_VARIANCE:e}", res.r_variance);
                return Ok(abort(stack, metrics, collapse(reason), hash, step));
            }
            if let Err(e) = g.backward(res.loss.total) {
                if e.is_numeric() {
                    return Ok(abort(stack, metrics, collapse(e.to_string()), hash, step));
                }
                return Err(e);
            }
            lr = cosine_lr(step, total, warmup, peak)?;
            let finite = binding.vars().iter().all(|&v| g.grad(v).map_or(true, |t| t.all_finite()));
            if !finite {
                return Ok(abort(stack, metrics, collapse("non-finite gradient".into()), hash, step));
            }
            for (i, &v) in binding.vars().iter().enumerate() {
                let Some(grad) = g.grad(v) else { continue };
                let p = &mut stack.online_mut().values_mut()[i];
                let shrink = if decay[i] { 1.0 - lr * cfg.weight_decay } else { 1.0 };
                for ((pv, vel), &gv) in p.data_mut().iter_mut().zip(velocity[i].iter_mut()).zip(grad.data()) {
                    *pv *= shrink;
                    *vel = cfg.momentum * *vel + gv;
                    *pv -= lr * *vel;
                }
            }
            if cfg.loss.variant.is_byol() {
                let a = encoders::ema_alpha(step, total, cfg.alpha_base)?;
                stack.ema_update(a)?;
                alpha = Some(a);
            }
            loss_sum += res.loss.total_value;
            ixzy_sum += res.loss.i_xzy;
            iyz_sum += res.loss.i_yz;
            byol_sum += res.loss.byol_term;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let contrastive = !cfg.loss.variant.is_byol();
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / n,
            i_xzy_mean: ixzy_sum / n,
            i_yz_mean: contrastive.then_some(iyz_sum / n),
            byol_term: (!contrastive).then_some(byol_sum / n),
            lr,
            alpha,
        };
        log::info!("epoch {} loss {:.5} lr {:.4}", m.epoch, m.loss, m.lr);
        metrics.push(m);
    }
    Ok(TrainOutcome { stack, metrics, collapse: None, config_hash: hash, steps: step })
}

fn abort(
    stack: EncoderStack,
    metrics: Vec<EpochMetrics>,
    record: CollapseRecord,
    config_hash: String,
    steps: u64,
) -> TrainOutcome {
    TrainOutcome { stack, metrics, collapse: Some(record), config_hash, steps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::stack_to_bytes;
    use crate::data::{generate, GeneratorConfig, Split};

    fn tiny() -> (TrainConfig, Dataset) {
        let data = GeneratorConfig { n_train: 64, n_test: 16, ..Default::default() };
        let ds = generate(&data, Split::Train).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            warmup_epochs: 0.5,
            dims: StackDims { input_dim: 32, trunk_hidden: vec![16], repr_dim: 12, proj_hidden: 16, proj_dim: 8 },
            ..Default::default()
        };
        (cfg, ds)
    }

    #[test]
    fn cosine_lr_examples() {
        assert_eq!(cosine_lr(0, 100, 10, 0.4).unwrap(), 0.0);
        assert_eq!(cosine_lr(10, 100, 10, 0.4).unwrap(), 0.4);
        assert_eq!(cosine_lr(100, 100, 10, 0.4).unwrap(), 0.0);
        assert!((cosine_lr(55, 100, 10, 0.4).unwrap() - 0.2).abs() < 1e-15);
        assert!(cosine_lr(0, 10, 10, 0.4).is_err());
        assert!(cosine_lr(11, 10, 2, 0.4).is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (mut cfg, ds) = tiny();
        cfg.epochs = 0;
        let out = train(&cfg, &ds).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.stack, EncoderStack::new(cfg.dims.clone(), cfg.loss.variant, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_bit_reproducible() {
        for v in Variant::ALL {
            let (mut cfg, ds) = tiny();
            cfg.loss = LossConfig::new(v);
            let a = train(&cfg, &ds).unwrap();
            let b = train(&cfg, &ds).unwrap();
            assert!(a.collapse.is_none(), "{v}: {:?}", a.collapse);
            assert_eq!(a.metrics.len(), 2);
            assert_eq!(stack_to_bytes(&a.stack, &a.meta()).unwrap(), stack_to_bytes(&b.stack, &b.meta()).unwrap());
            assert_eq!(a.metrics_jsonl().unwrap(), b.metrics_jsonl().unwrap());
            assert_eq!(a.metrics[0].i_yz_mean.is_some(), !v.is_byol());
            assert_eq!(a.metrics[0].alpha.is_some(), v.is_byol());
        }
    }

    #[test]
    fn first_step_is_plain_gradient_step() {
        let (mut cfg, ds) = tiny();
        let one_batch = Dataset { records: ds.records[..cfg.batch_size].to_vec(), ..ds.clone() };
        cfg.epochs = 1;
        cfg.warmup_epochs = 0.0;
        cfg.weight_decay = 0.0;
        cfg.loss = LossConfig::new(Variant::Simclr);
        let out = train(&cfg, &one_batch).unwrap();
        assert_eq!(out.steps, 1);

        let mut order: Vec<usize> = (0..one_batch.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng::stream(cfg.seed, &[tag::SHUFFLE, 0]));
        let mut r = rng::stream(cfg.seed, &[tag::STEP, 0]);
        let (x, xp) = data::view_pair(&one_batch, &cfg.augment, &order, &mut r).unwrap();
        let mut init = EncoderStack::new(cfg.dims.clone(), cfg.loss.variant, cfg.seed).unwrap();
        let before = init.online().clone();
        let mut g = Graph::new();
        let (res, b) = objective(&mut init, &mut g, &cfg.loss, &x, &xp, &mut Draw::Deterministic).unwrap();
        assert_eq!(res.loss.total_value, out.metrics[0].loss);
        g.backward(res.loss.total).unwrap();
        let lr = cfg.peak_lr();
        for ((p, &v), trained) in before.values().iter().zip(b.vars()).zip(out.stack.online().values()) {
            let grad = g.grad(v).unwrap();
            for ((a, gr), t) in p.data().iter().zip(grad.data()).zip(trained.data()) {
                assert_eq!(a - lr * gr, *t);
            }
        }
    }

    #[test]
    fn collapse_is_reported() {
        let (mut cfg, ds) = tiny();
        cfg.loss = LossConfig::new(Variant::CSimclr);
        cfg.base_lr = 1e300;
        let out = train(&cfg, &ds).unwrap();
        let c = out.collapse.clone().expect("huge learning rate must collapse");
        assert!(c.collapse);
        assert!(out.metrics_jsonl().unwrap().contains("\"collapse\":true"));
    }

    #[test]
    fn mismatched_dims_are_config_errors() {
        let (mut cfg, ds) = tiny();
        cfg.dims.input_dim = 7;
        assert!(matches!(train(&cfg, &ds), Err(Error::Config(_))));
        cfg.dims.input_dim = 32;
        cfg.warmup_epochs = 5.0;
        assert!(matches!(train(&cfg, &ds), Err(Error::Config(_))));
    }
}
