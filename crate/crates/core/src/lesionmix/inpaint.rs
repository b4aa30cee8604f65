//! Fast-marching inpainting of lesion regions.
//!
//! Unknown voxels are filled in order of arrival time from the known region,
//! each as a weighted first-order extrapolation of known voxels within
//! [`BAND_RADIUS`]. Weights combine direction, distance and level-set terms.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::Result;
use crate::volume::{gaussian_blur, Grid, Volume};

/// Radius in voxels of the neighbourhood each filled voxel draws from.
pub const BAND_RADIUS: f64 = 3.0;

const SIX: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

/// Axis-aligned box of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Crop {
    pub origin: [usize; 3],
    pub dims: [usize; 3],
}

impl Crop {
    /// Inclusive bounding box grown by `margin`, clamped to `dims`.
    pub fn around(bbox: [[usize; 2]; 3], margin: usize, dims: [usize; 3]) -> Crop {
        let mut origin = [0; 3];
        let mut size = [0; 3];
        for a in 0..3 {
            let lo = bbox[a][0].saturating_sub(margin);
            let hi = (bbox[a][1] + margin).min(dims[a] - 1);
            origin[a] = lo;
            size[a] = hi - lo + 1;
        }
        Crop { origin, dims: size }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn global(&self, grid: &Grid, local: usize) -> usize {
        let [nx, ny, _] = self.dims;
        let (x, y, z) = (local % nx, (local / nx) % ny, local / (nx * ny));
        grid.index(x + self.origin[0], y + self.origin[1], z + self.origin[2])
    }

    pub fn local(&self, grid: &Grid, global: usize) -> usize {
        let [x, y, z] = grid.coords(global);
        let [nx, ny, _] = self.dims;
        (x - self.origin[0]) + nx * ((y - self.origin[1]) + ny * (z - self.origin[2]))
    }
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    Known,
    Unknown,
    Off,
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Lattice {
    dims: [usize; 3],
}

impl Lattice {
    fn step(&self, i: usize, d: [isize; 3]) -> Option<usize> {
        let [nx, ny, nz] = self.dims;
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        let x = x.checked_add_signed(d[0]).filter(|&v| v < nx)?;
        let y = y.checked_add_signed(d[1]).filter(|&v| v < ny)?;
        let z = z.checked_add_signed(d[2]).filter(|&v| v < nz)?;
        Some(x + nx * (y + ny * z))
    }
}

/// Eikonal update from the smallest known arrival time along each axis.
fn solve_eikonal(mut a: [f64; 3]) -> f64 {
    a.sort_by(f64::total_cmp);
    let mut t = a[0] + 1.0;
    if t > a[1] {
        let d = a[0] - a[1];
        t = (a[0] + a[1] + (2.0 - d * d).max(0.0).sqrt()) / 2.0;
        if t > a[2] {
            let s = a[0] + a[1] + a[2];
            let q = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
            t = (s + (s * s - 3.0 * (q - 1.0)).max(0.0).sqrt()) / 3.0;
        }
    }
    t
}

/// Fills `unknown` voxels of `image` (x-fastest over `dims`).
///
/// Voxels that are neither unknown nor `usable` are never read or written.
/// Unknown voxels with no path to a usable voxel are set to the mean of
/// the usable voxels, or left unchanged when there are none.
pub(crate) fn telea(image: &mut [f64], dims: [usize; 3], unknown: &[bool], usable: &[bool]) {
    let n = image.len();
    let lat = Lattice { dims };
    let mut state: Vec<State> = (0..n)
        .map(|i| {
            if unknown[i] {
                State::Unknown
            } else if usable[i] {
                State::Known
            } else {
                State::Off
            }
        })
        .collect();
    let mut t = vec![f64::INFINITY; n];
    let (mut lo, mut hi, mut sum, mut count) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for i in 0..n {
        if state[i] == State::Known {
            t[i] = 0.0;
            lo = lo.min(image[i]);
            hi = hi.max(image[i]);
            sum += image[i];
            count += 1;
        }
    }
    if count == 0 {
        return;
    }

    let r = BAND_RADIUS as isize;
    let mut ball = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                if d2 > 0.0 && d2 <= BAND_RADIUS * BAND_RADIUS {
                    ball.push([dx, dy, dz]);
                }
            }
        }
    }

    let arrival = |i: usize, state: &[State], t: &[f64]| -> f64 {
        let mut a = [f64::INFINITY; 3];
        for (k, d) in SIX.iter().enumerate() {
            if let Some(j) = lat.step(i, *d) {
                if state[j] == State::Known {
                    a[k / 2] = a[k / 2].min(t[j]);
                }
            }
        }
        solve_eikonal(a)
    };

    let mut heap = BinaryHeap::new();
    for i in 0..n {
        if state[i] == State::Unknown
            && SIX.iter().any(|d| lat.step(i, *d).is_some_and(|j| state[j] == State::Known))
        {
            t[i] = arrival(i, &state, &t);
            heap.push(Entry(t[i], i));
        }
    }

    // one-sided where needed; 0 when neither neighbour is usable
    let gradient = |i: usize, values: &[f64], state: &[State], centre: f64| -> [f64; 3] {
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate() {
            let known = |d: isize| {
                let mut off = [0; 3];
                off[a] = d;
                lat.step(i, off).filter(|&j| state[j] == State::Known).map(|j| values[j])
            };
            *ga = match (known(-1), known(1)) {
                (Some(m), Some(p)) => (p - m) / 2.0,
                (None, Some(p)) => p - centre,
                (Some(m), None) => centre - m,
                (None, None) => 0.0,
            };
        }
        g
    };

    while let Some(Entry(tp, p)) = heap.pop() {
        if state[p] != State::Unknown || tp > t[p] {
            continue;
        }
        let grad_t = gradient(p, &t, &state, tp);
        let norm = grad_t.iter().map(|g| g * g).sum::<f64>().sqrt();
        let (mut acc, mut wsum) = (0.0, 0.0);
        for d in &ball {
            let Some(q) = lat.step(p, *d) else { continue };
            if state[q] != State::Known {
                continue;
            }
            let rv = [-d[0] as f64, -d[1] as f64, -d[2] as f64];
            let len2 = rv.iter().map(|v| v * v).sum::<f64>();
            let len = len2.sqrt();
            let mut dir = if norm > 0.0 {
                (rv[0] * grad_t[0] + rv[1] * grad_t[1] + rv[2] * grad_t[2]) / (len * norm)
            } else {
                1.0
            };
            if dir.abs() <= 0.01 {
                dir = 1e-6;
            }
            let dst = 1.0 / (len2 * len);
            let lev = 1.0 / (1.0 + (t[q] - tp).abs());
            let w = (dir * dst * lev).abs();
            let gi = gradient(q, image, &state, image[q]);
            acc += w * (image[q] + gi[0] * rv[0] + gi[1] * rv[1] + gi[2] * rv[2]);
            wsum += w;
        }
        image[p] = if wsum > 0.0 { (acc / wsum).clamp(lo, hi) } else { sum / count as f64 };
        state[p] = State::Known;
        for d in &SIX {
            if let Some(j) = lat.step(p, *d) {
                if state[j] == State::Unknown {
                    let tj = arrival(j, &state, &t);
                    if tj < t[j] {
                        t[j] = tj;
                        heap.push(Entry(tj, j));
                    }
                }
            }
        }
    }
    let mean = sum / count as f64;
    for i in 0..n {
        if state[i] == State::Unknown {
            image[i] = mean;
        }
    }
}

/// Inpaints one region in place, peeling its 6-connected boundary layer by
/// layer. Each layer takes the blurred marching result; deeper voxels are
/// re-marched from the updated layer.
///
/// `region` and `lesion` are crop-local; voxels in `lesion` but outside
/// `region` are never used as sources.
pub(crate) fn peel_inpaint(
    image: &mut [f64],
    crop_grid: &Grid,
    region: &[bool],
    lesion: &[bool],
    sigma_mm: f64,
) -> Result<()> {
    let dims = crop_grid.dims;
    let lat = Lattice { dims };
    let mut remaining = region.to_vec();
    let mut usable: Vec<bool> = lesion.iter().map(|&l| !l).collect();
    while remaining.iter().any(|&r| r) {
        let mut f = image.to_vec();
        telea(&mut f, dims, &remaining, &usable);
        let g = if sigma_mm > 0.0 {
            // normalized blur so excluded lesions never leak into the fill
            let w: Vec<f64> = (0..f.len()).map(|i| (usable[i] || remaining[i]) as u8 as f64).collect();
            let fw: Vec<f64> = f.iter().zip(&w).map(|(v, w)| v * w).collect();
            let num = gaussian_blur(&Volume::new(crop_grid.clone(), fw)?, sigma_mm)?.into_data();
            let den = gaussian_blur(&Volume::new(crop_grid.clone(), w)?, sigma_mm)?.into_data();
            (0..f.len()).map(|i| if den[i] > 1e-12 { num[i] / den[i] } else { f[i] }).collect()
        } else {
            f
        };
        let ring: Vec<usize> = (0..remaining.len())
            .filter(|&i| {
                remaining[i] && SIX.iter().any(|d| lat.step(i, *d).is_none_or(|j| !remaining[j]))
            })
            .collect();
        for i in ring {
            image[i] = g[i];
            remaining[i] = false;
            usable[i] = true;
        }
    }
    Ok(())
}
