//! Connected-component labelling and simple morphology on binary masks.

use serde::{Deserialize, Serialize};

use super::{Connectivity, Grid, Mask};
use crate::error::{Error, Result};

/// One connected foreground region of a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub volume_mm3: f64,
    /// Inclusive `[min, max]` index range per axis (x, y, z).
    pub bounding_box: [[usize; 2]; 3],
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn coords<'a>(&'a self, grid: &'a Grid) -> impl Iterator<Item = [usize; 3]> + 'a {
        self.voxels.iter().map(|&i| grid.coords(i))
    }

    pub fn to_mask(&self, grid: &Grid) -> Mask {
        Mask::from_indices(grid.clone(), self.voxels.iter().copied())
    }

    fn sort_key(&self) -> (usize, usize, usize, usize) {
        let b = &self.bounding_box;
        (b[2][0], b[1][0], b[0][0], self.voxels[0])
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels the foreground of `m` into connected components.
///
/// Two-pass union-find over the raster order. Components are returned sorted
/// by the (z, y, x) minimum corner of their bounding box, ties broken by the
/// first voxel in raster order.
pub fn connected_components(m: &Mask, conn: Connectivity) -> Vec<Component> {
    let grid = m.grid();
    let [nx, ny, nz] = grid.dims;
    // offsets that precede the current voxel in raster order
    let backward: Vec<[isize; 3]> = conn
        .offsets()
        .iter()
        .copied()
        .filter(|&[dx, dy, dz]| dz < 0 || (dz == 0 && (dy < 0 || (dy == 0 && dx < 0))))
        .collect();

    let mut ds = DisjointSet {
        parent: (0..grid.len() as u32).collect(),
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = grid.index(x, y, z);
                if !m.contains(i) {
                    continue;
                }
                for &[dx, dy, dz] in &backward {
                    let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx as isize || qy >= ny as isize {
                        continue;
                    }
                    let j = grid.index(qx as usize, qy as usize, qz as usize);
                    if m.contains(j) {
                        ds.union(i as u32, j as u32);
                    }
                }
            }
        }
    }

    let mut slot_of_root = std::collections::HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in m.indices() {
        let root = ds.find(i as u32);
        let slot = *slot_of_root.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(i);
    }

    let voxel_volume = grid.voxel_volume();
    let mut comps: Vec<Component> = groups
        .into_iter()
        .map(|voxels| {
            let mut bb = [[usize::MAX, 0]; 3];
            for &i in &voxels {
                let c = grid.coords(i);
                for a in 0..3 {
                    bb[a][0] = bb[a][0].min(c[a]);
                    bb[a][1] = bb[a][1].max(c[a]);
                }
            }
            Component {
                volume_mm3: voxels.len() as f64 * voxel_volume,
                voxels,
                bounding_box: bb,
            }
        })
        .collect();
    comps.sort_by_key(Component::sort_key);
    comps
}

/// Removes components smaller than `min_volume_mm3`.
pub fn filter_small_components(m: &Mask, min_volume_mm3: f64, conn: Connectivity) -> Result<Mask> {
    if !(min_volume_mm3 >= 0.0) {
        return Err(Error::Argument(format!(
            "min_volume_mm3 must be non-negative, got {min_volume_mm3}"
        )));
    }
    if min_volume_mm3 == 0.0 {
        return Ok(m.clone());
    }
    let keep = connected_components(m, conn)
        .into_iter()
        .filter(|c| c.volume_mm3 >= min_volume_mm3)
        .flat_map(|c| c.voxels);
    Ok(Mask::from_indices(m.grid().clone(), keep))
}

/// Foreground voxels with at least one background neighbour.
///
/// Neighbours outside the grid count as background.
pub fn boundary(m: &Mask, conn: Connectivity) -> Mask {
    let grid = m.grid();
    let on = m.indices().filter(|&i| {
        grid.out_of_bounds_neighbors(i, conn) > 0 || grid.neighbors(i, conn).any(|j| !m.contains(j))
    });
    Mask::from_indices(grid.clone(), on.collect::<Vec<_>>())
}
