//! Central finite-difference verification of the analytic loss gradients.

use rand::Rng;
use serde::Serialize;

use super::{
    dice_loss_raw, longitudinal_loss_raw, spatial_loss_raw, total_loss_raw, volumetric_loss_raw,
    LossConfig, XorMode,
};
use crate::assembly::Targets;
use crate::manifest::Format;
use crate::rng::{seeded, Rng64};
use crate::volume::{Grid, Mask};

pub const FD_STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, instances: usize, max_rel_err: f64) -> Self {
        CheckOutcome {
            name: name.into(),
            instances,
            max_rel_err,
            passed: max_rel_err <= REL_TOLERANCE,
        }
    }
}

pub(crate) const SIDE: usize = 8;

fn probs(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.02..0.98)).collect()
}

fn bits(rng: &mut Rng64, n: usize, density: f64) -> Vec<u8> {
    (0..n).map(|_| rng.random_bool(density) as u8).collect()
}

/// Perturbs one map at a time and compares against the analytic gradient of
/// that map.
fn check_maps<const N: usize>(
    maps: &[Vec<f64>; N],
    analytic: &[Vec<f64>; N],
    f: impl Fn(&[Vec<f64>; N]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..N {
        let numeric = central_difference(
            |x| {
                let mut m = maps.clone();
                m[k] = x.to_vec();
                f(&m)
            },
            &maps[k],
            FD_STEP,
        );
        worst = worst.max(max_relative_error(&analytic[k], &numeric));
    }
    worst
}

/// Runs the finite-difference suite over `instances` random 8³ problems per loss.
pub fn run_loss_suite(instances: usize, seed: u64) -> Vec<CheckOutcome> {
    let n = SIDE * SIDE * SIDE;
    let grid = Grid::isotropic([SIDE; 3], 1.0).expect("valid grid");
    let mut rng = seeded(seed);
    let mut worst = [0.0f64; 8];

    for _ in 0..instances {
        let p = probs(&mut rng, n);
        let y = bits(&mut rng, n, 0.3);
        let eps = [0.0, 1.0][rng.random_range(0..2)];
        let t = dice_loss_raw(&p, &y, eps);
        worst[0] = worst[0].max(check_maps(&[p], &t.grads, |m| dice_loss_raw(&m[0], &y, eps).value));

        let (pn, pv) = (probs(&mut rng, n), probs(&mut rng, n));
        let (y1, y2) = (bits(&mut rng, n, 0.3), bits(&mut rng, n, 0.3));
        for (slot, mode) in [(1, XorMode::AsWritten), (2, XorMode::Intent)] {
            let t = longitudinal_loss_raw(&pn, &pv, &y1, &y2, mode);
            let err = check_maps(&[pn.clone(), pv.clone()], &t.grads, |m| {
                longitudinal_loss_raw(&m[0], &m[1], &y1, &y2, mode).value
            });
            worst[slot] = worst[slot].max(err);
        }

        // scale the second map so all three branches of the band get exercised
        let p1 = probs(&mut rng, n);
        let factor = [0.5, 1.0, 1.6][rng.random_range(0..3)];
        let p2: Vec<f64> = probs(&mut rng, n).into_iter().map(|v| v * factor).collect();
        let t = volumetric_loss_raw(&p1, &p2, 1.2, 0.8, 1.0);
        let err = check_maps(&[p1, p2], &t.grads, |m| volumetric_loss_raw(&m[0], &m[1], 1.2, 0.8, 1.0).value);
        worst[3] = worst[3].max(err);

        let p = probs(&mut rng, n);
        let wm = bits(&mut rng, n, 0.6);
        for (slot, mode) in [(4, XorMode::AsWritten), (5, XorMode::Intent)] {
            let t = spatial_loss_raw(&p, &wm, mode);
            let err = check_maps(&[p.clone()], &t.grads, |m| spatial_loss_raw(&m[0], &wm, mode).value);
            worst[slot] = worst[slot].max(err);
        }

        for (slot, mode) in [(6, XorMode::AsWritten), (7, XorMode::Intent)] {
            let cfg = LossConfig {
                xor_mode: mode,
                volume_unit_mm3: 100.0,
                ..LossConfig::default()
            };
            let labels = random_targets(&mut rng, &grid);
            let wm = bits(&mut rng, n, 0.6);
            let maps: [Vec<f64>; 4] = std::array::from_fn(|_| probs(&mut rng, n));
            let (_, grads) = total_loss_raw(refs(&maps), &labels, &wm, &grid, &cfg, true, Format::Longitudinal);
            let err = check_maps(&maps, &grads, |m| {
                total_loss_raw(refs(m), &labels, &wm, &grid, &cfg, true, Format::Longitudinal).0.total
            });
            worst[slot] = worst[slot].max(err);
        }
    }

    let names = [
        "dice_loss",
        "longitudinal_loss[as_written]",
        "longitudinal_loss[intent]",
        "volumetric_loss",
        "spatial_loss[as_written]",
        "spatial_loss[intent]",
        "total_loss[as_written]",
        "total_loss[intent]",
    ];
    names
        .iter()
        .zip(worst)
        .map(|(name, w)| CheckOutcome::new(*name, instances, w))
        .collect()
}

fn refs(m: &[Vec<f64>; 4]) -> [&[f64]; 4] {
    [m[0].as_slice(), m[1].as_slice(), m[2].as_slice(), m[3].as_slice()]
}

fn random_targets(rng: &mut Rng64, grid: &Grid) -> Targets {
    let mask = |rng: &mut Rng64| {
        Mask::new(grid.clone(), bits(rng, grid.len(), 0.25)).expect("binary")
    };
    Targets {
        all_t1: Some(mask(rng)),
        all_t2: Some(mask(rng)),
        new_t2: Some(mask(rng)),
        vanishing_t2: Some(mask(rng)),
    }
}
