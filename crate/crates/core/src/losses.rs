//! Semantic prediction, domain-adaptation, attention, consistency and total
//! losses.
//!
//! Every loss is a positive negative log-likelihood over probabilities
//! clamped to `[eps, 1 − eps]`. The adversarial min-max is realized by the
//! gradient reversal on discriminator inputs, so the domain losses enter the
//! total with weight `|λ1|`.
//!
//! Batched inputs are NCHW (or `(N, K)` for image-level vectors). The
//! per-image reductions are averaged over the batch, so a batch of one gives
//! the plain per-image value.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-7;
pub const DEFAULT_GAMMA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub eps_clamp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: -1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            gamma: DEFAULT_GAMMA,
            eps_clamp: DEFAULT_EPS,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 0.5) {
            return Err(Error::InvalidConfig(format!("eps_clamp {} must lie in (0, 0.5)", self.eps_clamp)));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if ![self.lambda1, self.lambda2, self.lambda3].iter().all(|l| l.is_finite()) {
            return Err(Error::InvalidConfig("loss weights must be finite".into()));
        }
        Ok(())
    }

    /// Weight applied to the three domain losses.
    pub fn w_da(&self) -> f64 {
        self.lambda1.abs()
    }
}

/// Domain label: source is 0, target is 1. Serialized as the integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum DomainTag {
    Source,
    Target,
}

impl TryFrom<u8> for DomainTag {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(DomainTag::Source),
            1 => Ok(DomainTag::Target),
            other => Err(format!("domain must be 0 or 1, got {other}")),
        }
    }
}

impl From<DomainTag> for u8 {
    fn from(d: DomainTag) -> u8 {
        d as u8
    }
}

impl DomainTag {
    pub fn value(self) -> f64 {
        match self {
            DomainTag::Source => 0.0,
            DomainTag::Target => 1.0,
        }
    }
}

fn batch(tape: &Tape, v: Var, op: &'static str) -> Result<usize> {
    match tape.shape(v).first() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::shape(op, tape.shape(v), &[1])),
    }
}

fn check_same(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn check_channels(tape: &Tape, v: Var, c: usize, op: &'static str) -> Result<()> {
    let s = tape.shape(v);
    if s.len() != 4 || s[1] != c {
        return Err(Error::shape(op, s, &[0, c, 0, 0]));
    }
    Ok(())
}

/// Mean BCE over positions. `p`, `target`: (N,1,H,W).
pub fn loss_spm_local(tape: &mut Tape, p: Var, target: Var, eps: f64) -> Result<Var> {
    check_channels(tape, p, 1, "loss_spm_local")?;
    check_same(tape, p, target, "loss_spm_local")?;
    let l = tape.bce(p, target, eps)?;
    tape.mean(l)
}

/// Class-summed, position-averaged BCE. `p`, `target`: (N,K,H,W).
pub fn loss_spm_mid(tape: &mut Tape, p: Var, target: Var, eps: f64) -> Result<Var> {
    check_same(tape, p, target, "loss_spm_mid")?;
    let (n, _, h, w) = tape
        .value(p)
        .dims4()
        .ok_or_else(|| Error::shape("loss_spm_mid", tape.shape(p), &[0, 0, 0, 0]))?;
    let l = tape.bce(p, target, eps)?;
    let s = tape.sum(l)?;
    tape.scale(s, 1.0 / (n * h * w) as f64)
}

/// Class-summed BCE. `p`, `target`: (N,K).
pub fn loss_spm_global(tape: &mut Tape, p: Var, target: Var, eps: f64) -> Result<Var> {
    check_same(tape, p, target, "loss_spm_global")?;
    if tape.shape(p).len() != 2 {
        return Err(Error::shape("loss_spm_global", tape.shape(p), &[0, 0]));
    }
    let n = batch(tape, p, "loss_spm_global")?;
    let l = tape.bce(p, target, eps)?;
    let s = tape.sum(l)?;
    tape.scale(s, 1.0 / n as f64)
}

fn domain_target(tape: &mut Tape, like: Var, d: DomainTag) -> Var {
    let shape = tape.shape(like).to_vec();
    tape.constant(Tensor::full(&shape, d.value()))
}

/// Mean over positions of `BCE(D, d)`, shared by the local and mid levels.
pub fn loss_da_pixel(tape: &mut Tape, d_map: Var, d: DomainTag, eps: f64) -> Result<Var> {
    let t = domain_target(tape, d_map, d);
    let l = tape.bce(d_map, t, eps)?;
    tape.mean(l)
}

/// Focal-modulated BCE on the image-level discriminator output (N,1):
/// target `(1−D)^γ·(−ln D)`, source `D^γ·(−ln(1−D))`.
pub fn loss_da_global(tape: &mut Tape, d_g: Var, d: DomainTag, gamma: f64, eps: f64) -> Result<Var> {
    let t = domain_target(tape, d_g, d);
    let l = tape.bce(d_g, t, eps)?;
    let pc = tape.clamp(d_g, eps, 1.0 - eps)?;
    let base = match d {
        DomainTag::Target => tape.rsub_scalar(1.0, pc)?,
        DomainTag::Source => pc,
    };
    let m = tape.pow_scalar(base, gamma)?;
    let fl = tape.mul(m, l)?;
    tape.mean(fl)
}

/// `1 + P_l`, range [1, 2].
pub fn attention_weight_local(tape: &mut Tape, p_local: Var) -> Result<Var> {
    check_channels(tape, p_local, 1, "attention_weight_local")?;
    tape.add_scalar(p_local, 1.0)
}

/// `2 − max_c P_m`, range [1, 2]; output (N,1,H,W).
pub fn attention_weight_mid(tape: &mut Tape, p_mid: Var) -> Result<Var> {
    let m = tape.channel_max(p_mid)?;
    tape.rsub_scalar(2.0, m)
}

/// Mean over positions of `weight · BCE(D, d)`.
pub fn loss_da_pixel_attended(tape: &mut Tape, d_map: Var, d: DomainTag, weight: Var, eps: f64) -> Result<Var> {
    check_same(tape, d_map, weight, "loss_da_pixel_attended")?;
    let t = domain_target(tape, d_map, d);
    let l = tape.bce(d_map, t, eps)?;
    let wl = tape.mul(weight, l)?;
    tape.mean(wl)
}

/// Pool size actually used on an `(h, w)` mid grid: the request clamped to
/// the grid.
pub fn effective_pool(requested: (usize, usize), grid: (usize, usize)) -> (usize, usize) {
    (requested.0.min(grid.0).max(1), requested.1.min(grid.1).max(1))
}

/// Semantic consistency on source images.
///
/// `y_m = adaptive_max(adaptive_mean(P_mid, H_a×W_a))` per class, and the
/// loss is `Σ_c BCE(y_m^c, y_g^c)` with the global prediction `y_g` as a
/// gradient-stopped target. `p_mid`: (N,K,H,W), `y_global`: (N,K).
pub fn loss_consistency(tape: &mut Tape, p_mid: Var, y_global: Var, pool_hw: (usize, usize), eps: f64) -> Result<Var> {
    let (n, k, h, w) = tape
        .value(p_mid)
        .dims4()
        .ok_or_else(|| Error::shape("loss_consistency", tape.shape(p_mid), &[0, 0, 0, 0]))?;
    if tape.shape(y_global) != [n, k] {
        return Err(Error::shape("loss_consistency", tape.shape(y_global), &[n, k]));
    }
    let (ha, wa) = pool_hw;
    if ha == 0 || wa == 0 || ha > h || wa > w {
        return Err(Error::OutOfRange {
            what: "consistency pool size",
            index: ha.max(wa) as i64,
            valid: format!("1..={h} x 1..={w}"),
        });
    }
    let pooled = tape.adaptive_mean_pool(p_mid, ha, wa)?;
    let ym = tape.adaptive_max_pool(pooled, 1, 1)?;
    let ym = tape.reshape(ym, &[n, k])?;
    let yg = tape.detach(y_global);
    let l = tape.bce(ym, yg, eps)?;
    let s = tape.sum(l)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Component values of the total objective; absent terms contribute nothing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub det: Option<T>,
    pub local: Option<T>,
    pub mid: Option<T>,
    pub global: Option<T>,
    pub s_local: Option<T>,
    pub s_mid: Option<T>,
    pub s_global: Option<T>,
    pub cr: Option<T>,
}

impl<T> Default for LossTerms<T> {
    fn default() -> Self {
        Self {
            det: None,
            local: None,
            mid: None,
            global: None,
            s_local: None,
            s_mid: None,
            s_global: None,
            cr: None,
        }
    }
}

impl<T: Copy> LossTerms<T> {
    /// `(term, coefficient)` pairs in a fixed order.
    fn weighted(&self, w: &LossWeights) -> [(Option<T>, f64); 8] {
        [
            (self.det, 1.0),
            (self.local, w.w_da()),
            (self.mid, w.w_da()),
            (self.global, w.w_da()),
            (self.s_local, w.lambda2),
            (self.s_mid, w.lambda2),
            (self.s_global, w.lambda2),
            (self.cr, w.lambda3),
        ]
    }
}

/// `L_all = L_det + |λ1|·(L̂_l + L̂_m + L_g) + λ2·(L_Sl + L_Sm + L_Sg) + λ3·L_CR`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms<Var>, w: &LossWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, coef) in terms.weighted(w) {
        let Some(v) = term else { continue };
        if tape.value(v).numel() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(v).to_vec()));
        }
        let v = tape.reshape(v, &[])?;
        let scaled = tape.scale(v, coef)?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// The same combination over plain numbers, in the same order.
pub fn total_loss_value(terms: &LossTerms<f64>, w: &LossWeights) -> f64 {
    let mut acc: Option<f64> = None;
    for (term, coef) in terms.weighted(w) {
        let Some(v) = term else { continue };
        let scaled = v * coef;
        acc = Some(acc.map_or(scaled, |a| a + scaled));
    }
    acc.unwrap_or(0.0)
}
