//! 3D grids and the image-processing primitives the rest of the crate builds on.
//!
//! Voxels are stored x-fastest (`index = x + nx * (y + ny * z)`), matching the
//! on-disk NIfTI order.

mod components;
mod filter;
mod nifti;

pub use components::{boundary, connected_components, filter_small_components, Component};
pub use filter::{gaussian_blur, resample, Interpolation};
pub use nifti::{load_mask, load_nifti, read_grid, save_mask, save_nifti, NiftiDatatype};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Affine = [[f64; 4]; 4];

/// Lattice geometry shared by volumes and masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// Voxel size in millimetres.
    pub spacing: [f64; 3],
    /// Voxel-to-world transform, when known.
    pub affine: Option<Affine>,
}

const SPACING_TOL: f64 = 1e-6;

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Grid {
            dims,
            spacing,
            affine: None,
        })
    }

    pub fn isotropic(dims: [usize; 3], spacing_mm: f64) -> Result<Self> {
        Grid::new(dims, [spacing_mm; 3])
    }

    pub fn with_affine(mut self, affine: Option<Affine>) -> Self {
        self.affine = affine;
        self
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Equal dims and spacing; the affine is not compared.
    pub fn compatible(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= SPACING_TOL * a.abs().max(b.abs()).max(1.0))
    }

    pub fn ensure_compatible(&self, other: &Grid, what: &str) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "{what}: grid mismatch ({:?} @ {:?} vs {:?} @ {:?})",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Physical extent `dims * spacing` per axis in millimetres.
    pub fn extent_mm(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// In-bounds neighbours of `index` under `conn`.
    pub fn neighbors(&self, index: usize, conn: Connectivity) -> impl Iterator<Item = usize> + '_ {
        let [x, y, z] = self.coords(index);
        conn.offsets().iter().filter_map(move |&[dx, dy, dz]| {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            let nz = z as isize + dz;
            if nx < 0
                || ny < 0
                || nz < 0
                || nx >= self.dims[0] as isize
                || ny >= self.dims[1] as isize
                || nz >= self.dims[2] as isize
            {
                None
            } else {
                Some(self.index(nx as usize, ny as usize, nz as usize))
            }
        })
    }

    /// Number of neighbour positions under `conn` that fall outside the grid.
    pub(crate) fn out_of_bounds_neighbors(&self, index: usize, conn: Connectivity) -> usize {
        conn.offsets().len() - self.neighbors(index, conn).count()
    }
}

/// Voxel adjacency: faces (6), faces and edges (18), or all touching (26).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "18")]
    Eighteen,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

const fn build_offsets<const N: usize>(max_nonzero: usize) -> [[isize; 3]; N] {
    let mut out = [[0isize; 3]; N];
    let mut n = 0;
    let mut dz = -1isize;
    while dz <= 1 {
        let mut dy = -1isize;
        while dy <= 1 {
            let mut dx = -1isize;
            while dx <= 1 {
                let nonzero = (dx != 0) as usize + (dy != 0) as usize + (dz != 0) as usize;
                if nonzero > 0 && nonzero <= max_nonzero {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
}

static OFFSETS_6: [[isize; 3]; 6] = build_offsets::<6>(1);
static OFFSETS_18: [[isize; 3]; 18] = build_offsets::<18>(2);
static OFFSETS_26: [[isize; 3]; 26] = build_offsets::<26>(3);

impl Connectivity {
    pub fn offsets(self) -> &'static [[isize; 3]] {
        match self {
            Connectivity::Six => &OFFSETS_6,
            Connectivity::Eighteen => &OFFSETS_18,
            Connectivity::TwentySix => &OFFSETS_26,
        }
    }

    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::Argument(format!(
                "connectivity must be 6, 18 or 26, got {n}"
            ))),
        }
    }

    pub fn count(self) -> u32 {
        self.offsets().len() as u32
    }
}

/// A real-valued 3D image (intensities, probability maps, gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Validation(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite voxel value {} at index {:?}",
                data[i],
                grid.coords(i)
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        let n = grid.len();
        Volume {
            grid,
            data: vec![value; n],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume::filled(grid, 0.0)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        Volume::new(self.grid.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Voxelwise `value >= threshold`.
    pub fn threshold(&self, threshold: f64) -> Mask {
        Mask {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }
}

/// A binary 3D label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: Grid,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Validation(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "mask is not binary: value {} at index {:?}",
                data[i],
                grid.coords(i)
            )));
        }
        Ok(Mask { grid, data })
    }

    pub fn from_bools(grid: Grid, data: impl IntoIterator<Item = bool>) -> Result<Self> {
        Mask::new(grid, data.into_iter().map(u8::from).collect())
    }

    pub fn empty(grid: Grid) -> Self {
        let n = grid.len();
        Mask {
            grid,
            data: vec![0; n],
        }
    }

    pub fn from_indices(grid: Grid, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Mask::empty(grid);
        for i in indices {
            m.data[i] = 1;
        }
        m
    }

    /// Interprets a volume as a mask; every value must be exactly 0 or 1.
    pub fn from_volume(v: &Volume) -> Result<Self> {
        if let Some(i) = v.data().iter().position(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Validation(format!(
                "mask is not binary: value {} at index {:?}",
                v.data()[i],
                v.grid().coords(i)
            )));
        }
        Ok(Mask {
            grid: v.grid().clone(),
            data: v.data().iter().map(|&x| x as u8).collect(),
        })
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&b| b as f64).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn contains(&self, index: usize) -> bool {
        self.data[index] != 0
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.contains(self.grid.index(x, y, z))
    }

    pub fn set(&mut self, index: usize, on: bool) {
        self.data[index] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    /// Foreground volume in mm³.
    pub fn volume_mm3(&self) -> f64 {
        self.count() as f64 * self.grid.voxel_volume()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i)
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        debug_assert!(self.grid.compatible(&other.grid));
        Mask {
            grid: self.grid.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a != 0, b != 0) as u8)
                .collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn symmetric_difference(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a != b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            grid: self.grid.clone(),
            data: self.data.iter().map(|&b| (b == 0) as u8).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data
            .iter()
            .zip(other.data.iter())
            .all(|(&a, &b)| a == 0 || b != 0)
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data
            .iter()
            .zip(other.data.iter())
            .any(|(&a, &b)| a != 0 && b != 0)
    }
}
