//! Separable Gaussian smoothing and voxel-centre-aligned resampling.

use serde::{Deserialize, Serialize};

use super::{Grid, Volume};
use crate::error::{Error, Result};

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as usize;
    if sigma_vox <= 0.0 || radius == 0 {
        return vec![1.0];
    }
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolves along one axis, replicating edge voxels.
fn convolve_axis(grid: &Grid, src: &[f64], axis: usize, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return src.to_vec();
    }
    let radius = (kernel.len() / 2) as isize;
    let dims = grid.dims;
    let n = dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let mut out = vec![0.0; src.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = grid.coords(i);
        let pos = c[axis] as isize;
        let base = i - c[axis] * stride;
        let mut acc = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let q = (pos + t as isize - radius).clamp(0, n - 1) as usize;
            acc += w * src[base + q * stride];
        }
        *o = acc;
    }
    out
}

/// Gaussian blur with `sigma_mm` converted to voxels per axis.
///
/// Kernels are truncated at 3σ and renormalized; edges replicate the border
/// voxel. `sigma_mm == 0` returns the input unchanged.
pub fn gaussian_blur(v: &Volume, sigma_mm: f64) -> Result<Volume> {
    if !(sigma_mm >= 0.0) || !sigma_mm.is_finite() {
        return Err(Error::Argument(format!("sigma must be non-negative, got {sigma_mm}")));
    }
    if sigma_mm == 0.0 {
        return Ok(v.clone());
    }
    let grid = v.grid();
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / grid.spacing[axis]);
        data = convolve_axis(grid, &data, axis, &kernel);
    }
    Volume::new(grid.clone(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// Resamples onto a grid with `target_spacing`, keeping the physical extent.
///
/// The new size per axis is `round(n * s / t)`. Output voxel `i` samples the
/// source at continuous index `(i + 0.5) * t / s - 0.5`, i.e. voxel centres
/// of both grids are laid out over the same extent. Samples outside the
/// source are clamped to the border.
pub fn resample(v: &Volume, target_spacing: [f64; 3], mode: Interpolation) -> Result<Volume> {
    if target_spacing.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::Argument(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    let src = v.grid();
    if src.spacing == target_spacing {
        return Ok(v.clone());
    }
    let ratio: [f64; 3] = std::array::from_fn(|a| target_spacing[a] / src.spacing[a]);
    let dims: [usize; 3] = std::array::from_fn(|a| {
        ((src.dims[a] as f64 / ratio[a]).round() as usize).max(1)
    });
    let affine = src.affine.map(|a| {
        let mut out = a;
        for r in 0..3 {
            // new index i maps to old index i * ratio + (ratio - 1) / 2
            let shift: f64 = (0..3).map(|c| a[r][c] * (ratio[c] - 1.0) / 2.0).sum();
            for c in 0..3 {
                out[r][c] = a[r][c] * ratio[c];
            }
            out[r][3] = a[r][3] + shift;
        }
        out
    });
    let grid = Grid::new(dims, target_spacing)?.with_affine(affine);

    let src_pos = |a: usize, i: usize| -> f64 {
        ((i as f64 + 0.5) * ratio[a] - 0.5).clamp(0.0, (src.dims[a] - 1) as f64)
    };
    let mut data = Vec::with_capacity(grid.len());
    for z in 0..dims[2] {
        let pz = src_pos(2, z);
        for y in 0..dims[1] {
            let py = src_pos(1, y);
            for x in 0..dims[0] {
                let px = src_pos(0, x);
                let value = match mode {
                    Interpolation::Nearest => v.get(
                        (px + 0.5).floor() as usize,
                        (py + 0.5).floor() as usize,
                        (pz + 0.5).floor() as usize,
                    ),
                    Interpolation::Trilinear => trilinear(v, [px, py, pz]),
                };
                data.push(value);
            }
        }
    }
    Volume::new(grid, data)
}

fn trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let dims = v.dims();
    let lo: [usize; 3] = std::array::from_fn(|a| p[a].floor() as usize);
    let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + 1).min(dims[a] - 1));
    let f: [f64; 3] = std::array::from_fn(|a| p[a] - lo[a] as f64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| (corner >> a) & 1 == 1;
        let idx: [usize; 3] = std::array::from_fn(|a| if pick(a) { hi[a] } else { lo[a] });
        let w: f64 = (0..3).map(|a| if pick(a) { f[a] } else { 1.0 - f[a] }).product();
        if w != 0.0 {
            acc += w * v.get(idx[0], idx[1], idx[2]);
        }
    }
    acc
}
