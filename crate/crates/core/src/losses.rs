//! Training objectives.
//!
//! All functions build onto a caller-provided [`Graph`] so gradients reach
//! the encoder parameters. Per-sample values are returned alongside the
//! scalar loss for diagnostics.
//!
//! The contrastive CEB objective per direction is
//! `beta * (log e(z|x) - log b(z|y)) - (log B - h(y|z))`, where `h` is the
//! cross-entropy of the in-batch categorical built from `b`, and the total
//! sums the two directions with the roles of the views swapped. The
//! BYOL-style CEB objective per direction is
//! `w_byol * |y_hat - y'|^2 + beta * (log e(z|x) - log b(z|y))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::vmf::{self, Draw};

/// Rows fed to the objectives must be unit length within this tolerance.
pub const UNIT_ROW_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Simclr,
    CSimclr,
    Byol,
    CByol,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Simclr, Variant::CSimclr, Variant::Byol, Variant::CByol];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Simclr => "simclr",
            Variant::CSimclr => "c_simclr",
            Variant::Byol => "byol",
            Variant::CByol => "c_byol",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn is_byol(self) -> bool {
        matches!(self, Variant::Byol | Variant::CByol)
    }

    pub fn is_compressed(self) -> bool {
        matches!(self, Variant::CSimclr | Variant::CByol)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Objective hyperparameters.
///
/// Unset values fall back to per-variant defaults; [`LossConfig::resolved`]
/// writes them out. The temperature and BYOL weight are derived
/// (`tau = 1 / kappa_b`, `w_byol = kappa_d / 2`) and never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_d: Option<f64>,
    /// Use the mean direction instead of a vMF sample for `z`.
    #[serde(default)]
    pub deterministic: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(Variant::CSimclr)
    }
}

impl LossConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            beta: None,
            kappa_e: None,
            kappa_b: None,
            kappa_d: None,
            deterministic: false,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.variant {
            Variant::Simclr | Variant::Byol => 0.0,
            Variant::CSimclr | Variant::CByol => 1.0,
        })
    }

    pub fn kappa_e(&self) -> f64 {
        self.kappa_e.unwrap_or(match self.variant {
            Variant::CByol | Variant::Byol => 16384.0,
            Variant::CSimclr | Variant::Simclr => 1024.0,
        })
    }

    pub fn kappa_b(&self) -> f64 {
        self.kappa_b.unwrap_or(10.0)
    }

    pub fn kappa_d(&self) -> f64 {
        self.kappa_d.unwrap_or(4.0)
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.kappa_b()
    }

    pub fn w_byol(&self) -> f64 {
        self.kappa_d() / 2.0
    }

    /// Copy with every default written out.
    pub fn resolved(&self) -> Self {
        Self {
            variant: self.variant,
            beta: Some(self.beta()),
            kappa_e: Some(self.kappa_e()),
            kappa_b: Some(self.kappa_b()),
            kappa_d: Some(self.kappa_d()),
            deterministic: self.deterministic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta = self.beta();
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        for (name, k) in [
            ("kappa_e", self.kappa_e()),
            ("kappa_b", self.kappa_b()),
            ("kappa_d", self.kappa_d()),
        ] {
            if !(k > 0.0 && k <= vmf::MAX_ARG) {
                return Err(Error::Config(format!("{name} must be in (0, {}], got {k}", vmf::MAX_ARG)));
            }
        }
        Ok(())
    }
}

/// Per-sample terms of one direction of an objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirectionTerms {
    /// `log e(z|x) - log b(z|y)`; empty for uncompressed objectives.
    pub i_xzy: Vec<f64>,
    /// `log B - h(y|z)` for contrastive objectives.
    pub i_yz: Vec<f64>,
    /// `|y_hat - y'|^2` (unweighted) for BYOL-style objectives.
    pub byol_term: Vec<f64>,
}

/// Scalar loss plus its decomposition, summed over both directions.
#[derive(Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub total_value: f64,
    /// Sum over directions of the batch mean of `i_xzy`.
    pub i_xzy: f64,
    /// Sum over directions of the batch mean of `i_yz` (contrastive only).
    pub i_yz: f64,
    /// Sum over directions of the batch mean of the BYOL regression term.
    pub byol_term: f64,
    pub directions: [DirectionTerms; 2],
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_unit_rows(g: &Graph, v: Var, what: &'static str) -> Result<()> {
    let t = g.value(v);
    if t.shape().len() != 2 {
        return Err(Error::shape(what, format!("expected [B, n], got {:?}", t.shape())));
    }
    for i in 0..t.rows() {
        let r = crate::tensor::norm(t.row(i));
        if (r - 1.0).abs() > UNIT_ROW_TOL {
            return Err(Error::domain(format!("{what}: row {i} has norm {r}")));
        }
    }
    Ok(())
}

/// In-batch contrastive bound.
///
/// `h_yz[i] = -log softmax_j(kappa_b z_i^T m_j)` at `j = i` and
/// `i_yz[i] = log B - h_yz[i]`. Returns `(h_yz, i_yz)`, each of shape `[B]`.
pub fn info_nce(g: &mut Graph, z: Var, mean_dirs: Var, kappa_b: f64) -> Result<(Var, Var)> {
    check_unit_rows(g, z, "info_nce z")?;
    check_unit_rows(g, mean_dirs, "info_nce mean_dirs")?;
    if g.value(z).shape() != g.value(mean_dirs).shape() {
        return Err(Error::shape("info_nce", "z and mean_dirs differ in shape"));
    }
    let b = g.value(z).rows();
    let mt = g.transpose(mean_dirs)?;
    let sims = g.matmul(z, mt)?;
    let logits = g.scale(sims, kappa_b)?;
    let log_p = g.log_softmax_rows(logits)?;
    let diag = g.diag(log_p)?;
    let h = g.scale(diag, -1.0)?;
    let neg_h = diag;
    let i_yz = g.add_scalar(neg_h, (b as f64).ln())?;
    Ok((h, i_yz))
}

/// Bidirectional SimCLR objective: batch mean of `L_NCE(r_x, r_y) + L_NCE(r_y, r_x)`.
pub fn simclr_loss(g: &mut Graph, r_x: Var, r_y: Var, tau: f64) -> Result<Var> {
    Ok(simclr_breakdown(g, r_x, r_y, tau)?.total)
}

pub(crate) fn simclr_breakdown(g: &mut Graph, r_x: Var, r_y: Var, tau: f64) -> Result<LossBreakdown> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    let mut parts = Vec::with_capacity(2);
    let mut dirs: [DirectionTerms; 2] = Default::default();
    for (d, (a, b)) in [(r_x, r_y), (r_y, r_x)].into_iter().enumerate() {
        let (h, i_yz) = info_nce(g, a, b, 1.0 / tau)?;
        dirs[d].i_yz = g.value(i_yz).data().to_vec();
        parts.push(g.mean(h)?);
    }
    let total = g.add(parts[0], parts[1])?;
    Ok(LossBreakdown {
        total,
        total_value: g.value(total).item(),
        i_xzy: 0.0,
        i_yz: dirs.iter().map(|d| mean(&d.i_yz)).sum(),
        byol_term: 0.0,
        directions: dirs,
    })
}

/// Contrastive CEB objective, both directions.
///
/// Per direction: `e = vMF(r_x, kappa_e)`, `b = vMF(r_y, kappa_b)`,
/// `z ~ e`, `i_xzy = log e(z|x) - log b(z|y)`, `i_yz` from [`info_nce`]
/// against `r_y`, loss `beta * i_xzy - i_yz` averaged over the batch.
pub fn c_simclr_loss(
    g: &mut Graph,
    r_x: Var,
    r_y: Var,
    cfg: &LossConfig,
    draw: &mut Draw<'_>,
) -> Result<LossBreakdown> {
    check_unit_rows(g, r_x, "c_simclr r_x")?;
    check_unit_rows(g, r_y, "c_simclr r_y")?;
    let (beta, kappa_e, kappa_b) = (cfg.beta(), cfg.kappa_e(), cfg.kappa_b());
    let mut parts = Vec::with_capacity(2);
    let mut dirs: [DirectionTerms; 2] = Default::default();
    for (d, (a, b)) in [(r_x, r_y), (r_y, r_x)].into_iter().enumerate() {
        let z = vmf::sample_rows(g, a, kappa_e, draw)?;
        let log_e = vmf::log_prob_rows(g, a, z, kappa_e)?;
        let log_b = vmf::log_prob_rows(g, b, z, kappa_b)?;
        let i_xzy = g.sub(log_e, log_b)?;
        let (_, i_yz) = info_nce(g, z, b, kappa_b)?;
        let weighted = g.scale(i_xzy, beta)?;
        let per_sample = g.sub(weighted, i_yz)?;
        dirs[d].i_xzy = g.value(i_xzy).data().to_vec();
        dirs[d].i_yz = g.value(i_yz).data().to_vec();
        parts.push(g.mean(per_sample)?);
    }
    let total = g.add(parts[0], parts[1])?;
    Ok(LossBreakdown {
        total,
        total_value: g.value(total).item(),
        i_xzy: dirs.iter().map(|d| mean(&d.i_xzy)).sum(),
        i_yz: dirs.iter().map(|d| mean(&d.i_yz)).sum(),
        byol_term: 0.0,
        directions: dirs,
    })
}

/// Per-sample `|a - b|^2`, shape `[B]`.
fn squared_distance_rows(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    g.dot_rows(d, d)
}

/// Batch mean of `w_byol * |mu_e - y'|^2`. `y_prime` must not carry gradient.
pub fn byol_loss(g: &mut Graph, mu_e: Var, y_prime: Var, w_byol: f64) -> Result<Var> {
    check_unit_rows(g, mu_e, "byol mu_e")?;
    check_unit_rows(g, y_prime, "byol y_prime")?;
    if g.requires_grad(y_prime) {
        return Err(Error::Graph("byol target must be under stop_gradient".into()));
    }
    let sq = squared_distance_rows(g, mu_e, y_prime)?;
    let m = g.mean(sq)?;
    g.scale(m, w_byol)
}

/// Symmetrized plain BYOL objective over the two (prediction, target) pairs.
pub(crate) fn byol_breakdown(
    g: &mut Graph,
    pairs: [(Var, Var); 2],
    w_byol: f64,
) -> Result<LossBreakdown> {
    let mut parts = Vec::with_capacity(2);
    let mut dirs: [DirectionTerms; 2] = Default::default();
    for (d, (mu_e, y_prime)) in pairs.into_iter().enumerate() {
        parts.push(byol_loss(g, mu_e, y_prime, w_byol)?);
        let sq = squared_distance_rows(g, mu_e, y_prime)?;
        dirs[d].byol_term = g.value(sq).data().to_vec();
    }
    let total = g.add(parts[0], parts[1])?;
    Ok(LossBreakdown {
        total,
        total_value: g.value(total).item(),
        i_xzy: 0.0,
        i_yz: 0.0,
        byol_term: dirs.iter().map(|d| mean(&d.byol_term)).sum(),
        directions: dirs,
    })
}

/// Inputs to one direction of the BYOL-style CEB objective.
#[derive(Clone, Copy, Debug)]
pub struct CByolInputs {
    /// `normalize(q(f(x)))`, online path.
    pub mu_e: Var,
    /// `normalize(m(y))` with `y = sg(normalize(f_target(x)))`.
    pub mu_b: Var,
    /// `sg(normalize(f_target(x')))`.
    pub y_prime: Var,
}

/// BYOL-style CEB objective applied symmetrically.
///
/// `d_head` is the linear map `l` applied to `z` before normalization.
pub fn c_byol_loss<F>(
    g: &mut Graph,
    paths: [CByolInputs; 2],
    mut d_head: F,
    cfg: &LossConfig,
    draw: &mut Draw<'_>,
) -> Result<LossBreakdown>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    let (beta, kappa_e, kappa_b, w) = (cfg.beta(), cfg.kappa_e(), cfg.kappa_b(), cfg.w_byol());
    let mut parts = Vec::with_capacity(2);
    let mut dirs: [DirectionTerms; 2] = Default::default();
    for (d, p) in paths.into_iter().enumerate() {
        check_unit_rows(g, p.mu_e, "c_byol mu_e")?;
        check_unit_rows(g, p.mu_b, "c_byol mu_b")?;
        check_unit_rows(g, p.y_prime, "c_byol y_prime")?;
        if g.requires_grad(p.y_prime) {
            return Err(Error::Graph("c_byol target must be under stop_gradient".into()));
        }
        let z = vmf::sample_rows(g, p.mu_e, kappa_e, draw)?;
        let lz = d_head(g, z)?;
        let y_hat = g.l2_normalize(lz)?;
        let sq = squared_distance_rows(g, y_hat, p.y_prime)?;
        let log_e = vmf::log_prob_rows(g, p.mu_e, z, kappa_e)?;
        let log_b = vmf::log_prob_rows(g, p.mu_b, z, kappa_b)?;
        let i_xzy = g.sub(log_e, log_b)?;
        let a = g.scale(sq, w)?;
        let c = g.scale(i_xzy, beta)?;
        let per_sample = g.add(a, c)?;
        dirs[d].i_xzy = g.value(i_xzy).data().to_vec();
        dirs[d].byol_term = g.value(sq).data().to_vec();
        parts.push(g.mean(per_sample)?);
    }
    let total = g.add(parts[0], parts[1])?;
    Ok(LossBreakdown {
        total,
        total_value: g.value(total).item(),
        i_xzy: dirs.iter().map(|d| mean(&d.i_xzy)).sum(),
        i_yz: 0.0,
        byol_term: dirs.iter().map(|d| mean(&d.byol_term)).sum(),
        directions: dirs,
    })
}

/// Per-sample `-log d(y'|z) = -kappa_d y'^T y_hat - log C_n(kappa_d)`.
pub fn decoder_nll(g: &mut Graph, y_hat: Var, y_prime: Var, kappa_d: f64) -> Result<Var> {
    let lp = vmf::log_prob_rows(g, y_hat, y_prime, kappa_d)?;
    g.scale(lp, -1.0)
}
