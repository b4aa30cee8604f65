//! Segmentation losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! each probability map it reads. Squared norms are means over voxels, so
//! magnitudes do not depend on the volume size. Logical operators on soft
//! predictions use the product relaxations `AND(a, b) = a b` and
//! `XOR(a, b) = a + b - 2 a b`, which agree with the boolean operators on
//! binary inputs.

pub mod gradcheck;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::{Head, PredictionSet, Targets};
use crate::error::{Error, Result};
use crate::manifest::Format;
use crate::volume::{Grid, Mask, Volume};

/// How XOR-based penalty terms are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XorMode {
    /// Literal XOR against the reference map.
    AsWritten,
    /// Containment penalties: only predicted mass outside the reference is
    /// penalized.
    #[default]
    Intent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_long: f64,
    pub lambda_vol: f64,
    pub lambda_spat: f64,
    pub alpha_high: f64,
    pub alpha_low: f64,
    /// Fraction of the epochs trained on Dice alone before constraints switch on.
    pub curriculum_fraction: f64,
    pub xor_mode: XorMode,
    pub smooth_eps: f64,
    /// Unit in which lesion volumes enter the volumetric loss, in mm³.
    pub volume_unit_mm3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_long: 2.0,
            lambda_vol: 1.0,
            lambda_spat: 1.0,
            alpha_high: 1.2,
            alpha_low: 0.8,
            curriculum_fraction: 0.5,
            xor_mode: XorMode::Intent,
            smooth_eps: 1.0,
            volume_unit_mm3: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_long, self.lambda_vol, self.lambda_spat];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Argument(format!("loss weights must be >= 0, got {lambdas:?}")));
        }
        if !(self.alpha_low <= 1.0 && 1.0 <= self.alpha_high) || !(self.alpha_low >= 0.0) {
            return Err(Error::Argument(format!(
                "need 0 <= alpha_low <= 1 <= alpha_high, got ({}, {})",
                self.alpha_low, self.alpha_high
            )));
        }
        if !(self.curriculum_fraction > 0.0 && self.curriculum_fraction <= 1.0) {
            return Err(Error::Argument(format!(
                "curriculum_fraction must lie in (0, 1], got {}",
                self.curriculum_fraction
            )));
        }
        if !(self.smooth_eps >= 0.0) {
            return Err(Error::Argument(format!("smooth_eps must be >= 0, got {}", self.smooth_eps)));
        }
        if !(self.volume_unit_mm3 > 0.0) {
            return Err(Error::Argument(format!(
                "volume_unit_mm3 must be > 0, got {}",
                self.volume_unit_mm3
            )));
        }
        Ok(())
    }

    /// First epoch (0-based) at which the constraint terms are active.
    pub fn switch_epoch(&self, n_epochs: usize) -> usize {
        (self.curriculum_fraction * n_epochs as f64 + 1e-9).floor() as usize
    }

    /// Loads a config from `.json` or `.toml`; missing fields take defaults.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: LossConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Parse {
                pointer: "/".into(),
                message: e.to_string(),
            })?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A loss value with one gradient map per input map.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm<const N: usize> {
    pub value: f64,
    pub grads: [Vec<f64>; N],
}

#[inline]
fn bit(v: u8) -> f64 {
    v as f64
}

/// Soft Dice loss `1 - (2 Σpy + ε) / (Σp + Σy + ε)` on raw buffers.
pub fn dice_loss_raw(p: &[f64], y: &[u8], eps: f64) -> LossTerm<1> {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sy = 0.0;
    for (&pv, &yv) in p.iter().zip(y) {
        inter += pv * bit(yv);
        sp += pv;
        sy += bit(yv);
    }
    let num = 2.0 * inter + eps;
    let den = sp + sy + eps;
    if den == 0.0 {
        return LossTerm { value: 0.0, grads: [vec![0.0; p.len()]] };
    }
    let grad = y
        .iter()
        .map(|&yv| -(2.0 * bit(yv) * den - num) / (den * den))
        .collect();
    LossTerm { value: 1.0 - num / den, grads: [grad] }
}

/// Soft Dice loss of a probability map against a binary label.
pub fn dice_loss(p: &Volume, y: &Mask, smooth_eps: f64) -> Result<(f64, Volume)> {
    p.grid().ensure_compatible(y.grid(), "dice_loss")?;
    let t = dice_loss_raw(p.data(), y.data(), smooth_eps);
    let [g] = t.grads;
    Ok((t.value, Volume::new(p.grid().clone(), g)?))
}

/// Accumulates `mean(f²)` and its gradient `2 f f' / n` for a per-voxel residual.
fn mse_term(n: usize, mut residual: impl FnMut(usize) -> (f64, f64), grad: &mut [f64]) -> f64 {
    let inv = 1.0 / n as f64;
    let mut acc = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        let (f, df) = residual(i);
        acc += f * f;
        *g += 2.0 * f * df * inv;
    }
    acc * inv
}

/// Longitudinal consistency of the new and vanishing heads on raw buffers.
///
/// Terms, each a mean over voxels:
/// 1. `(y1 ∧ p_n)²`: new lesions must not overlap lesions already present.
/// 2. `(y2 ⊕ p_n)²` as written, or `(p_n ∧ ¬y2)²` in intent mode.
/// 3. `(y1 ⊕ p_v)²` as written, or `(p_v ∧ ¬y1)²` in intent mode.
/// 4. `(y2 ∧ p_v)²`: vanished lesions must be absent at the second timepoint.
pub fn longitudinal_loss_raw(p_n: &[f64], p_v: &[f64], y1: &[u8], y2: &[u8], mode: XorMode) -> LossTerm<2> {
    let n = p_n.len();
    let mut g_n = vec![0.0; n];
    let mut g_v = vec![0.0; n];
    let mut value = mse_term(n, |i| (bit(y1[i]) * p_n[i], bit(y1[i])), &mut g_n);
    value += match mode {
        XorMode::AsWritten => mse_term(
            n,
            |i| {
                let y = bit(y2[i]);
                (y + p_n[i] - 2.0 * y * p_n[i], 1.0 - 2.0 * y)
            },
            &mut g_n,
        ),
        XorMode::Intent => mse_term(
            n,
            |i| {
                let out = 1.0 - bit(y2[i]);
                (p_n[i] * out, out)
            },
            &mut g_n,
        ),
    };
    value += match mode {
        XorMode::AsWritten => mse_term(
            n,
            |i| {
                let y = bit(y1[i]);
                (y + p_v[i] - 2.0 * y * p_v[i], 1.0 - 2.0 * y)
            },
            &mut g_v,
        ),
        XorMode::Intent => mse_term(
            n,
            |i| {
                let out = 1.0 - bit(y1[i]);
                (p_v[i] * out, out)
            },
            &mut g_v,
        ),
    };
    value += mse_term(n, |i| (bit(y2[i]) * p_v[i], bit(y2[i])), &mut g_v);
    LossTerm { value, grads: [g_n, g_v] }
}

/// Longitudinal loss on the new (`p_n`) and vanishing (`p_v`) maps.
///
/// Returns `(value, d/dp_n, d/dp_v)`.
pub fn longitudinal_loss(
    p_n: &Volume,
    p_v: &Volume,
    y_a_t1: Option<&Mask>,
    y_a_t2: Option<&Mask>,
    mode: XorMode,
) -> Result<(f64, Volume, Volume)> {
    let (Some(y1), Some(y2)) = (y_a_t1, y_a_t2) else {
        return Err(Error::Precondition(
            "longitudinal loss needs all-lesion labels at both timepoints".into(),
        ));
    };
    let g = p_n.grid();
    for (what, other) in [("p_v", p_v.grid()), ("y_a_t1", y1.grid()), ("y_a_t2", y2.grid())] {
        g.ensure_compatible(other, what)?;
    }
    let t = longitudinal_loss_raw(p_n.data(), p_v.data(), y1.data(), y2.data(), mode);
    let [gn, gv] = t.grads;
    Ok((t.value, Volume::new(g.clone(), gn)?, Volume::new(g.clone(), gv)?))
}

/// Hinge-band volumetric loss on raw buffers.
///
/// `unit` converts a soft voxel count to the volume unit (voxel volume in mm³
/// divided by the configured unit). The loss is zero while
/// `alpha_low V1 < V2 < alpha_high V1` and quadratic in the overshoot outside.
pub fn volumetric_loss_raw(p1: &[f64], p2: &[f64], alpha_high: f64, alpha_low: f64, unit: f64) -> LossTerm<2> {
    let v1 = p1.iter().sum::<f64>() * unit;
    let v2 = p2.iter().sum::<f64>() * unit;
    let n = p1.len();
    let alpha = if v2 >= alpha_high * v1 {
        Some(alpha_high)
    } else if v2 <= alpha_low * v1 {
        Some(alpha_low)
    } else {
        None
    };
    match alpha {
        None => LossTerm { value: 0.0, grads: [vec![0.0; n], vec![0.0; n]] },
        Some(a) => {
            let d = v2 - a * v1;
            LossTerm {
                value: d * d,
                grads: [vec![-2.0 * a * d * unit; n], vec![2.0 * d * unit; n]],
            }
        }
    }
}

/// Volumetric loss between the all-lesion maps of the two timepoints.
///
/// Volumes are soft voxel sums times the voxel volume, in units of
/// `volume_unit_mm3`. Returns `(value, d/dp_t1, d/dp_t2)`.
pub fn volumetric_loss(
    p_a_t1: &Volume,
    p_a_t2: &Volume,
    alpha_high: f64,
    alpha_low: f64,
    volume_unit_mm3: f64,
) -> Result<(f64, Volume, Volume)> {
    if alpha_low > alpha_high {
        return Err(Error::Argument(format!(
            "alpha_low {alpha_low} exceeds alpha_high {alpha_high}"
        )));
    }
    let g = p_a_t1.grid();
    g.ensure_compatible(p_a_t2.grid(), "volumetric_loss")?;
    let unit = g.voxel_volume() / volume_unit_mm3;
    let t = volumetric_loss_raw(p_a_t1.data(), p_a_t2.data(), alpha_high, alpha_low, unit);
    let [g1, g2] = t.grads;
    Ok((t.value, Volume::new(g.clone(), g1)?, Volume::new(g.clone(), g2)?))
}

/// White-matter constraint for one map on raw buffers.
pub fn spatial_loss_raw(p: &[f64], wm: &[u8], mode: XorMode) -> LossTerm<1> {
    let n = p.len();
    let mut g = vec![0.0; n];
    let value = match mode {
        XorMode::AsWritten => mse_term(
            n,
            |i| {
                let q = 1.0 - bit(wm[i]);
                (p[i] + q - 2.0 * p[i] * q, 1.0 - 2.0 * q)
            },
            &mut g,
        ),
        XorMode::Intent => mse_term(
            n,
            |i| {
                let q = 1.0 - bit(wm[i]);
                (p[i] * q, q)
            },
            &mut g,
        ),
    };
    LossTerm { value, grads: [g] }
}

/// White-matter constraint on one probability map.
///
/// In intent mode this is the mean of `(p (1 - wm))²`: lesion probability
/// outside the white matter is penalized. As written it is the mean of
/// `(p ⊕ (1 - wm))²`.
pub fn spatial_loss(p: &Volume, wm: &Mask, mode: XorMode) -> Result<(f64, Volume)> {
    p.grid().ensure_compatible(wm.grid(), "spatial_loss")?;
    let t = spatial_loss_raw(p.data(), wm.data(), mode);
    let [g] = t.grads;
    Ok((t.value, Volume::new(p.grid().clone(), g)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    /// `None` when the sample is cross-sectional or lacks both all-lesion labels.
    pub longitudinal: Option<f64>,
    pub volumetric: f64,
    pub spatial: f64,
    pub total: f64,
    pub active_constraints: bool,
}

/// Per-voxel derivatives of the total loss for each head.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_s_a_t1: Volume,
    pub d_s_a_t2: Volume,
    pub d_s_n_t2: Volume,
    pub d_s_v_t2: Volume,
}

impl GradientSet {
    pub fn get(&self, head: Head) -> &Volume {
        match head {
            Head::AllT1 => &self.d_s_a_t1,
            Head::AllT2 => &self.d_s_a_t2,
            Head::NewT2 => &self.d_s_n_t2,
            Head::VanishingT2 => &self.d_s_v_t2,
        }
    }
}

/// Raw-buffer form of [`total_loss`], used by the trainer.
///
/// `preds` and the returned gradients are indexed by [`Head::index`].
pub(crate) fn total_loss_raw(
    preds: [&[f64]; 4],
    labels: &Targets,
    wm: &[u8],
    grid: &Grid,
    cfg: &LossConfig,
    active: bool,
    kind: Format,
) -> (LossBreakdown, [Vec<f64>; 4]) {
    let n = wm.len();
    let mut grads: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; n]);

    let mut dice = 0.0;
    for head in Head::ALL {
        if let Some(y) = labels.get(head) {
            let t = dice_loss_raw(preds[head.index()], y.data(), cfg.smooth_eps);
            dice += t.value;
            for (g, d) in grads[head.index()].iter_mut().zip(&t.grads[0]) {
                *g += d;
            }
        }
    }

    let longitudinal = match (kind, &labels.all_t1, &labels.all_t2) {
        (Format::Longitudinal, Some(y1), Some(y2)) => Some(longitudinal_loss_raw(
            preds[Head::NewT2.index()],
            preds[Head::VanishingT2.index()],
            y1.data(),
            y2.data(),
            cfg.xor_mode,
        )),
        _ => None,
    };

    let (alpha_high, alpha_low) = match kind {
        Format::CrossSectional => (1.0, 1.0),
        Format::Longitudinal => (cfg.alpha_high, cfg.alpha_low),
    };
    let unit = grid.voxel_volume() / cfg.volume_unit_mm3;
    let vol = volumetric_loss_raw(
        preds[Head::AllT1.index()],
        preds[Head::AllT2.index()],
        alpha_high,
        alpha_low,
        unit,
    );

    let spat: Vec<LossTerm<1>> = Head::ALL
        .iter()
        .map(|h| spatial_loss_raw(preds[h.index()], wm, cfg.xor_mode))
        .collect();
    let spatial: f64 = spat.iter().map(|t| t.value).sum();

    let mut total = dice;
    if active {
        if let Some(t) = &longitudinal {
            total += cfg.lambda_long * t.value;
            for (g, d) in grads[Head::NewT2.index()].iter_mut().zip(&t.grads[0]) {
                *g += cfg.lambda_long * d;
            }
            for (g, d) in grads[Head::VanishingT2.index()].iter_mut().zip(&t.grads[1]) {
                *g += cfg.lambda_long * d;
            }
        }
        total += cfg.lambda_vol * vol.value;
        for (slot, head) in [(0, Head::AllT1), (1, Head::AllT2)] {
            for (g, d) in grads[head.index()].iter_mut().zip(&vol.grads[slot]) {
                *g += cfg.lambda_vol * d;
            }
        }
        total += cfg.lambda_spat * spatial;
        for (head, t) in Head::ALL.iter().zip(&spat) {
            for (g, d) in grads[head.index()].iter_mut().zip(&t.grads[0]) {
                *g += cfg.lambda_spat * d;
            }
        }
    }

    let breakdown = LossBreakdown {
        dice,
        longitudinal: longitudinal.map(|t| t.value),
        volumetric: vol.value,
        spatial,
        total,
        active_constraints: active,
    };
    (breakdown, grads)
}

/// Curriculum-weighted total loss for one sample.
///
/// Before `cfg.switch_epoch(n_epochs)` only the Dice terms count; from then
/// on the total is `dice + λ_L long + λ_V vol + λ_S spat`. Dice terms are
/// summed over the heads that have labels. The longitudinal term is computed
/// only for longitudinal samples with all-lesion labels at both timepoints,
/// and cross-sectional samples use `alpha_high = alpha_low = 1`. The spatial
/// term is summed over all four heads. Constraint values are always reported
/// in the breakdown, weighted or not.
pub fn total_loss(
    preds: &PredictionSet,
    labels: &Targets,
    wm: &Mask,
    cfg: &LossConfig,
    epoch: usize,
    n_epochs: usize,
    kind: Format,
) -> Result<(LossBreakdown, GradientSet)> {
    cfg.validate()?;
    let grid = preds.s_a_t1.grid();
    grid.ensure_compatible(wm.grid(), "white-matter mask")?;
    for head in Head::ALL {
        grid.ensure_compatible(preds.get(head).grid(), head.name())?;
        if let Some(y) = labels.get(head) {
            grid.ensure_compatible(y.grid(), head.name())?;
        }
    }
    let active = epoch >= cfg.switch_epoch(n_epochs);
    let raw = [
        preds.s_a_t1.data(),
        preds.s_a_t2.data(),
        preds.s_n_t2.data(),
        preds.s_v_t2.data(),
    ];
    let (breakdown, grads) = total_loss_raw(raw, labels, wm.data(), grid, cfg, active, kind);
    let [a, b, c, d] = grads.map(|g| Volume::new(grid.clone(), g));
    Ok((
        breakdown,
        GradientSet {
            d_s_a_t1: a?,
            d_s_a_t2: b?,
            d_s_n_t2: c?,
            d_s_v_t2: d?,
        },
    ))
}
