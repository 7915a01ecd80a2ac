//! MLP encoder stacks and the EMA target network.
//!
//! A stack always has a trunk (`x -> h`) and a projection head
//! (`h -> r`). BYOL variants add a predictor `q`; C-BYOL additionally has
//! the `m` head feeding the backward encoder and the linear `l` head feeding
//! the decoder. The target network mirrors trunk + projection and is moved
//! toward the online weights with [`EncoderStack::ema_update`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RunningStats, Standardize, Var};
use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::rng::{self, tag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StackDims {
    pub input_dim: usize,
    pub trunk_hidden: Vec<usize>,
    pub repr_dim: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl Default for StackDims {
    fn default() -> Self {
        Self {
            input_dim: 32,
            trunk_hidden: vec![256],
            repr_dim: 128,
            proj_hidden: 256,
            proj_dim: 32,
        }
    }
}

impl StackDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.input_dim, self.repr_dim, self.proj_hidden, self.proj_dim];
        if all.iter().chain(&self.trunk_hidden).any(|&d| d == 0) {
            return Err(Error::Config(format!("stack dims must be positive: {self:?}")));
        }
        if self.proj_dim < 2 {
            return Err(Error::Config("proj_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Which sub-network to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Net {
    Trunk,
    Projection,
    Predictor,
    BHead,
    DHead,
}

/// Batch-standardization behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left alone (target network).
    TrainFrozen,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Linear { w: usize, b: usize },
    Standardize { gain: usize, bias: usize, stats: usize },
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    layers: Vec<Layer>,
}

/// Ordered named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Graph handles for one parameter set.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Arch {
    trunk: Mlp,
    proj: Mlp,
    pred: Option<Mlp>,
    bhead: Option<Mlp>,
    dhead: Option<Mlp>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    dims: StackDims,
    variant: Variant,
    arch: Arch,
    online: ParamSet,
    /// Number of leading online parameters that belong to trunk + projection.
    shared: usize,
    target: ParamSet,
    stats: Vec<RunningStats>,
    stat_names: Vec<String>,
    target_stats: Vec<RunningStats>,
}

struct Builder<'a, R: rand::Rng> {
    params: ParamSet,
    stat_names: Vec<String>,
    stat_sizes: Vec<usize>,
    rng: &'a mut R,
}

impl<R: rand::Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Layer {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| self.rng.gen_range(-limit..=limit)).collect();
        let w = self.params.push(format!("{name}.w"), Tensor::from_parts(vec![fan_in, fan_out], w));
        let b = self.params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Layer::Linear { w, b }
    }

    fn standardize(&mut self, name: &str, n: usize) -> Layer {
        let gain = self.params.push(format!("{name}.gain"), Tensor::filled(&[n], 1.0));
        let bias = self.params.push(format!("{name}.bias"), Tensor::zeros(&[n]));
        self.stat_names.push(name.to_string());
        self.stat_sizes.push(n);
        Layer::Standardize { gain, bias, stats: self.stat_sizes.len() - 1 }
    }

    /// Linear -> standardize -> relu -> linear.
    fn two_layer(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Mlp {
        let layers = vec![
            self.linear(&format!("{name}.0"), d_in, hidden),
            self.standardize(&format!("{name}.bn"), hidden),
            Layer::Relu,
            self.linear(&format!("{name}.1"), hidden, d_out),
        ];
        Mlp { layers }
    }
}

impl EncoderStack {
    /// Fresh stack with fan-in/fan-out uniform weights, zero biases, unit
    /// standardization gains, and a target that copies the online network.
    pub fn new(dims: StackDims, variant: Variant, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let mut b = Builder { params: ParamSet::new(), stat_names: vec![], stat_sizes: vec![], rng: &mut rng };

        let mut layers = Vec::new();
        let mut d = dims.input_dim;
        let widths: Vec<usize> = dims.trunk_hidden.iter().copied().chain([dims.repr_dim]).collect();
        for (i, &w) in widths.iter().enumerate() {
            layers.push(b.linear(&format!("trunk.{i}"), d, w));
            layers.push(Layer::Relu);
            d = w;
        }
        let trunk = Mlp { layers };
        let proj = b.two_layer("proj", dims.repr_dim, dims.proj_hidden, dims.proj_dim);
        let shared = b.params.len();
        let shared_stats = b.stat_sizes.len();

        let pred = variant
            .is_byol()
            .then(|| b.two_layer("pred", dims.proj_dim, dims.proj_hidden, dims.proj_dim));
        let (bhead, dhead) = if variant == Variant::CByol {
            let m = b.two_layer("bhead", dims.proj_dim, dims.proj_hidden, dims.proj_dim);
            let l = Mlp { layers: vec![b.linear("dhead", dims.proj_dim, dims.proj_dim)] };
            (Some(m), Some(l))
        } else {
            (None, None)
        };

        let Builder { params, stat_names, stat_sizes, .. } = b;
        let stats: Vec<RunningStats> = stat_sizes.iter().map(|&n| RunningStats::new(n)).collect();
        let mut target = ParamSet::new();
        for i in 0..shared {
            target.push(params.names[i].clone(), params.values[i].clone());
        }
        let target_stats = stats[..shared_stats].to_vec();
        Ok(Self {
            dims,
            variant,
            arch: Arch { trunk, proj, pred, bhead, dhead },
            online: params,
            shared,
            target,
            stats,
            stat_names,
            target_stats,
        })
    }

    pub fn dims(&self) -> &StackDims {
        &self.dims
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn online(&self) -> &ParamSet {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut ParamSet {
        &mut self.online
    }

    pub fn target(&self) -> &ParamSet {
        &self.target
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn target_running_stats(&self) -> &[RunningStats] {
        &self.target_stats
    }

    /// True for standardization gains and biases (excluded from weight decay).
    pub fn is_norm_param(&self, index: usize) -> bool {
        let n = &self.online.names[index];
        n.ends_with(".gain") || n.ends_with(".bias")
    }

    /// Registers online parameters; trainable ones receive gradients.
    pub fn bind_online(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .online
            .values
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Binding { vars }
    }

    /// Registers target parameters as constants.
    pub fn bind_target(&self, g: &mut Graph) -> Binding {
        Binding { vars: self.target.values.iter().map(|t| g.constant(t.clone())).collect() }
    }

    fn mlp(&self, net: Net) -> Result<&Mlp> {
        let m = match net {
            Net::Trunk => Some(&self.arch.trunk),
            Net::Projection => Some(&self.arch.proj),
            Net::Predictor => self.arch.pred.as_ref(),
            Net::BHead => self.arch.bhead.as_ref(),
            Net::DHead => self.arch.dhead.as_ref(),
        };
        m.ok_or_else(|| Error::Config(format!("{net:?} is not part of a {} stack", self.variant)))
    }

    /// Runs one sub-network of the online stack.
    pub fn forward(&mut self, g: &mut Graph, b: &Binding, net: Net, x: Var, mode: Mode) -> Result<Var> {
        let mlp = self.mlp(net)?.clone();
        run_mlp(g, &mlp, &b.vars, &mut self.stats, x, mode)
    }

    /// Runs trunk + projection of the target network.
    pub fn forward_target(&mut self, g: &mut Graph, b: &Binding, x: Var, mode: Mode) -> Result<Var> {
        let trunk = self.arch.trunk.clone();
        let proj = self.arch.proj.clone();
        let h = run_mlp(g, &trunk, &b.vars, &mut self.target_stats, x, mode)?;
        run_mlp(g, &proj, &b.vars, &mut self.target_stats, h, mode)
    }

    /// `(h, r)` for a batch. Train mode updates running statistics.
    pub fn encode(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        check_input(&self.dims, x)?;
        let mut g = Graph::new();
        let b = self.bind_online(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.forward(&mut g, &b, Net::Trunk, xv, mode)?;
        let p = self.forward(&mut g, &b, Net::Projection, h, mode)?;
        let r = g.l2_normalize(p)?;
        Ok((g.value(h).clone(), g.value(r).clone()))
    }

    /// Eval-mode representation `h`; never touches running statistics.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.dims, x)?;
        let mut g = Graph::new();
        let b = self.bind_online(&mut g, false);
        let xv = g.constant(x.clone());
        let mut stats = self.stats.clone();
        let h = run_mlp(&mut g, &self.arch.trunk, &b.vars, &mut stats, xv, Mode::Eval)?;
        Ok(g.value(h).clone())
    }

    /// Eval-mode mean direction of the forward encoder `e(z|x)`: `r` for
    /// SimCLR variants and `normalize(q(proj))` for BYOL variants.
    pub fn mean_direction(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.dims, x)?;
        let mut g = Graph::new();
        let b = self.bind_online(&mut g, false);
        let xv = g.constant(x.clone());
        let mut stats = self.stats.clone();
        let h = run_mlp(&mut g, &self.arch.trunk, &b.vars, &mut stats, xv, Mode::Eval)?;
        let mut p = run_mlp(&mut g, &self.arch.proj, &b.vars, &mut stats, h, Mode::Eval)?;
        if let Some(q) = &self.arch.pred {
            p = run_mlp(&mut g, q, &b.vars, &mut stats, p, Mode::Eval)?;
        }
        let r = g.l2_normalize(p)?;
        Ok(g.value(r).clone())
    }

    /// `target <- alpha * target + (1 - alpha) * online` over trunk + projection,
    /// running statistics included.
    pub fn ema_update(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::domain(format!("ema alpha must be in [0, 1], got {alpha}")));
        }
        for i in 0..self.shared {
            let (t, o) = (&mut self.target.values[i], &self.online.values[i]);
            if t.shape() != o.shape() {
                return Err(Error::shape("ema_update", format!("{} differs", self.target.names[i])));
            }
            for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = ema(*tv, ov, alpha);
            }
        }
        for (t, o) in self.target_stats.iter_mut().zip(&self.stats) {
            for (tv, &ov) in t.mean.iter_mut().zip(&o.mean) {
                *tv = ema(*tv, ov, alpha);
            }
            for (tv, &ov) in t.var.iter_mut().zip(&o.var) {
                *tv = ema(*tv, ov, alpha);
            }
        }
        Ok(())
    }

    /// Rebuilds a stack from parts, validating every shape.
    pub(crate) fn from_parts(
        dims: StackDims,
        variant: Variant,
        online: Vec<(String, Tensor)>,
        target: Vec<(String, Tensor)>,
        stats: Vec<(String, RunningStats)>,
        target_stats: Vec<(String, RunningStats)>,
    ) -> Result<Self> {
        let mut s = Self::new(dims, variant, 0)?;
        let fill = |set: &mut ParamSet, src: Vec<(String, Tensor)>, what: &str| -> Result<()> {
            if src.len() != set.len() {
                return Err(Error::Checkpoint(format!("{what}: expected {} tensors, got {}", set.len(), src.len())));
            }
            for (i, (name, t)) in src.into_iter().enumerate() {
                if set.names[i] != name || set.values[i].shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{what}: unexpected tensor {name} {:?}", t.shape())));
                }
                set.values[i] = t;
            }
            Ok(())
        };
        fill(&mut s.online, online, "online")?;
        fill(&mut s.target, target, "target")?;
        let fill_stats = |dst: &mut Vec<RunningStats>, names: &[String], src: Vec<(String, RunningStats)>| -> Result<()> {
            if src.len() != dst.len() {
                return Err(Error::Checkpoint("running statistics count differs".into()));
            }
            for (i, (name, st)) in src.into_iter().enumerate() {
                if names[i] != name || st.mean.len() != dst[i].mean.len() || st.var.len() != dst[i].var.len() {
                    return Err(Error::Checkpoint(format!("unexpected running statistics {name}")));
                }
                dst[i] = st;
            }
            Ok(())
        };
        let names = s.stat_names.clone();
        fill_stats(&mut s.stats, &names, stats)?;
        fill_stats(&mut s.target_stats, &names, target_stats)?;
        Ok(s)
    }
}

fn ema(target: f64, online: f64, alpha: f64) -> f64 {
    alpha * target + (1.0 - alpha) * online
}

fn check_input(dims: &StackDims, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != dims.input_dim {
        return Err(Error::shape(
            "encode",
            format!("expected [B, {}], got {:?}", dims.input_dim, x.shape()),
        ));
    }
    Ok(())
}

fn run_mlp(
    g: &mut Graph,
    mlp: &Mlp,
    vars: &[Var],
    stats: &mut [RunningStats],
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let mut a = x;
    for layer in &mlp.layers {
        a = match *layer {
            Layer::Linear { w, b } => {
                let m = g.matmul(a, vars[w])?;
                g.add_row(m, vars[b])?
            }
            Layer::Relu => g.relu(a)?,
            Layer::Standardize { gain, bias, stats: s } => {
                let st = match mode {
                    Mode::Train => Standardize::Train(Some(&mut stats[s])),
                    Mode::TrainFrozen => Standardize::Train(None),
                    Mode::Eval => Standardize::Eval(&stats[s]),
                };
                let n = g.batch_standardize(a, st)?;
                let scaled = g.mul_row(n, vars[gain])?;
                g.add_row(scaled, vars[bias])?
            }
        };
    }
    if !g.value(a).all_finite() {
        return Err(Error::NonFinite("encoder activations"));
    }
    Ok(a)
}

/// Per-step EMA decay `alpha = 1 - (1 - alpha_base)(cos(pi k / K) + 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaSchedule {
    pub alpha_base: f64,
    pub total_steps: u64,
}

impl EmaSchedule {
    pub fn alpha(&self, step: u64) -> Result<f64> {
        ema_alpha(step, self.total_steps, self.alpha_base)
    }
}

pub fn ema_alpha(step: u64, total_steps: u64, alpha_base: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::domain(format!("ema step {step} beyond {total_steps}")));
    }
    if !(0.0..1.0).contains(&alpha_base) || alpha_base == 0.0 {
        return Err(Error::domain(format!("alpha_base must be in (0, 1), got {alpha_base}")));
    }
    if total_steps == 0 {
        return Ok(alpha_base);
    }
    if step == total_steps {
        return Ok(1.0);
    }
    let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    Ok(1.0 - (1.0 - alpha_base) * (c + 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_dims() -> StackDims {
        StackDims { input_dim: 6, trunk_hidden: vec![5], repr_dim: 4, proj_hidden: 5, proj_dim: 3 }
    }

    fn batch(b: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        Tensor::new(vec![b, d], (0..b * d).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn ema_alpha_examples() {
        assert_eq!(ema_alpha(0, 100, 0.99).unwrap(), 0.99);
        assert_eq!(ema_alpha(100, 100, 0.99).unwrap(), 1.0);
        assert!((ema_alpha(50, 100, 0.99).unwrap() - 0.995).abs() < 1e-15);
        assert!(ema_alpha(101, 100, 0.99).is_err());
        let mut prev = 0.0;
        for k in 0..=100 {
            let a = ema_alpha(k, 100, 0.9).unwrap();
            assert!(a >= prev);
            prev = a;
        }
    }

    #[test]
    fn target_starts_as_copy() {
        for v in Variant::ALL {
            let s = EncoderStack::new(small_dims(), v, 3).unwrap();
            assert_eq!(s.target.values(), &s.online.values()[..s.shared]);
            assert_eq!(s.target.names(), &s.online.names()[..s.shared]);
            assert_eq!(s.arch.pred.is_some(), v.is_byol());
            assert_eq!(s.arch.dhead.is_some(), v == Variant::CByol);
        }
    }

    #[test]
    fn ema_update_examples() {
        let mut s = EncoderStack::new(small_dims(), Variant::Byol, 1).unwrap();
        for t in s.online.values_mut() {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        let before = s.target.clone();
        s.ema_update(1.0).unwrap();
        assert_eq!(s.target, before);
        s.ema_update(0.5).unwrap();
        for (i, t) in s.target.values().iter().enumerate() {
            for ((&a, &b), &o) in t.data().iter().zip(before.values()[i].data()).zip(s.online.values()[i].data()) {
                assert!(a >= b.min(o) && a <= b.max(o));
            }
        }
        s.ema_update(0.0).unwrap();
        assert_eq!(s.target.values(), &s.online.values()[..s.shared]);
        assert!(s.ema_update(1.5).is_err());
    }

    #[test]
    fn ema_scalar_arithmetic() {
        assert_eq!(ema(2.0, 4.0, 0.5), 3.0);
    }

    #[test]
    fn identity_trunk_passes_positive_inputs() {
        let dims = StackDims { input_dim: 4, trunk_hidden: vec![4], repr_dim: 4, proj_hidden: 4, proj_dim: 4 };
        let mut s = EncoderStack::new(dims, Variant::Simclr, 0).unwrap();
        for name in ["trunk.0.w", "trunk.1.w"] {
            *s.online.get_mut(name).unwrap() = Tensor::identity(4);
        }
        let x = batch(3, 4, 9).map(f64::abs);
        let (h, r) = s.encode(&x, Mode::Eval).unwrap();
        assert_eq!(h, x);
        for i in 0..3 {
            assert!((crate::tensor::norm(r.row(i)) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_weights_give_zero_features_and_undefined_direction() {
        let mut s = EncoderStack::new(small_dims(), Variant::Simclr, 0).unwrap();
        for t in s.online.values_mut() {
            t.data_mut().fill(0.0);
        }
        let x = batch(4, 6, 2);
        assert!(s.features(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s.encode(&x, Mode::Eval).is_err());
    }

    #[test]
    fn eval_encode_is_deterministic_and_train_updates_stats() {
        let mut s = EncoderStack::new(small_dims(), Variant::CSimclr, 4).unwrap();
        let x = batch(8, 6, 5);
        let a = s.encode(&x, Mode::Eval).unwrap();
        let b = s.encode(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let before = s.stats.clone();
        s.encode(&x, Mode::Train).unwrap();
        assert_ne!(before, s.stats);
        let after = s.stats.clone();
        s.encode(&x, Mode::TrainFrozen).unwrap();
        assert_eq!(after, s.stats);
    }

    #[test]
    fn norm_params_are_flagged() {
        let s = EncoderStack::new(small_dims(), Variant::CByol, 0).unwrap();
        let flagged: Vec<&str> = (0..s.online.len())
            .filter(|&i| s.is_norm_param(i))
            .map(|i| s.online.names()[i].as_str())
            .collect();
        assert_eq!(flagged, ["proj.bn.gain", "proj.bn.bias", "pred.bn.gain", "pred.bn.bias", "bhead.bn.gain", "bhead.bn.bias"]);
    }

    #[test]
    fn glorot_limits_hold() {
        let s = EncoderStack::new(StackDims::default(), Variant::Simclr, 0).unwrap();
        let w = s.online.get("trunk.0.w").unwrap();
        let limit = (6.0f64 / (32 + 256) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(s.online.get("trunk.0.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_head_is_an_error() {
        let mut s = EncoderStack::new(small_dims(), Variant::Simclr, 0).unwrap();
        let mut g = Graph::new();
        let b = s.bind_online(&mut g, true);
        let x = g.constant(batch(2, 3, 0));
        assert!(s.forward(&mut g, &b, Net::Predictor, x, Mode::Train).is_err());
    }
}
