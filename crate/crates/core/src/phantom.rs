//! Synthetic brain-like phantoms with white-matter lesions.
//!
//! A phantom is an ellipsoidal head: a dark central ventricle, a bright
//! white-matter shell, and a grey-matter rim at `background_intensity`.
//! Lesions are unions of one to three jittered spheres placed inside the
//! white matter, brighter than it. Optional distractors are equally bright
//! blobs in the grey matter that carry no label.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assembly::{SubjectData, TimepointData};
use crate::error::{Error, Result};
use crate::lesionmix::{build_bank, synth_longitudinal, AugmentPlan, SynthConfig};
use crate::manifest::{Format, LabelAvailability, Split, SubjectRecord, TimepointRecord};
use crate::rng::{seeded, Rng64};
use crate::volume::{save_mask, save_nifti, Connectivity, Grid, Mask, Volume};

/// Attempts per lesion before placement gives up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 500;

/// Normalized ellipsoidal radius bounds of the white-matter shell.
const WM_SHELL: (f64, f64) = (0.3, 0.65);
/// Distractor centres are drawn from this normalized radius band.
const GM_BAND: (f64, f64) = (0.78, 0.9);
/// Distractor radii are capped here so they fit in the grey-matter rim.
const DISTRACTOR_MAX_RADIUS_MM: f64 = 1.5;
const VENTRICLE_INTENSITY: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background_intensity: f64,
    pub wm_intensity: f64,
    pub lesion_intensity_range: (f64, f64),
    pub n_lesions: usize,
    pub lesion_radius_range_mm: (f64, f64),
    pub noise_sigma: f64,
    /// Unlabelled hyperintense blobs outside the white matter.
    pub n_distractors: usize,
    /// Distractor intensities; the lesion range when unset.
    pub distractor_intensity_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            background_intensity: 0.5,
            wm_intensity: 1.0,
            lesion_intensity_range: (1.6, 2.0),
            n_lesions: 6,
            lesion_radius_range_mm: (1.5, 2.5),
            noise_sigma: 0.05,
            n_distractors: 0,
            distractor_intensity_range: None,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lesion_intensity_range;
        let (rlo, rhi) = self.lesion_radius_range_mm;
        if lo <= self.wm_intensity || lo > hi {
            return Err(Error::Argument(format!(
                "lesion intensities {lo}..{hi} must lie strictly above white matter {}",
                self.wm_intensity
            )));
        }
        if let Some((dlo, dhi)) = self.distractor_intensity_range {
            if dlo <= self.wm_intensity || dlo > dhi {
                return Err(Error::Argument(format!(
                    "distractor intensities {dlo}..{dhi} must lie strictly above white matter {}",
                    self.wm_intensity
                )));
            }
        }
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Argument(format!("lesion radii {rlo}..{rhi} must be positive and ordered")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Argument(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Argument(format!("phantom dims {:?} too small, need at least 8", self.dims)));
        }
        Grid::new(self.dims, self.spacing).map(|_| ())
    }

    fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, self.spacing)
    }
}

/// One generated timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub wm: Mask,
    pub all: Mask,
    pub distractors: Mask,
}

/// Normalized ellipsoidal radius of each voxel; 1 on the head surface.
fn radius_map(grid: &Grid) -> Vec<f64> {
    let d = grid.dims;
    let semi = d.map(|n| 0.45 * n as f64);
    let centre = d.map(|n| (n as f64 - 1.0) / 2.0);
    (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            (0..3)
                .map(|a| ((c[a] as f64 - centre[a]) / semi[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Union of one to three jittered spheres around `centre` (voxel coords).
fn blob<R: Rng + ?Sized>(grid: &Grid, centre: [usize; 3], radius_mm: (f64, f64), rng: &mut R) -> Vec<usize> {
    let sp = grid.spacing;
    let r0 = rng.random_range(radius_mm.0..=radius_mm.1);
    let mut spheres = vec![(centre.map(|c| c as f64), r0)];
    for _ in 1..rng.random_range(1..=3) {
        let jitter = [0; 3].map(|_| rng.random_range(-r0..=r0));
        let c = [0, 1, 2].map(|a| centre[a] as f64 + jitter[a] / sp[a]);
        spheres.push((c, r0 * rng.random_range(0.6..=1.0)));
    }
    let reach = spheres
        .iter()
        .map(|(c, r)| [0, 1, 2].map(|a| ((c[a] - r / sp[a]).floor(), (c[a] + r / sp[a]).ceil())))
        .collect::<Vec<_>>();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for b in &reach {
        for a in 0..3 {
            lo[a] = lo[a].min(b[a].0);
            hi[a] = hi[a].max(b[a].1);
        }
    }
    let d = grid.dims;
    let range = |a: usize| (lo[a].max(0.0) as usize)..=(hi[a].min(d[a] as f64 - 1.0).max(0.0) as usize);
    let mut out = Vec::new();
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let p = [x as f64, y as f64, z as f64];
                let inside = spheres.iter().any(|(c, r)| {
                    (0..3).map(|a| ((p[a] - c[a]) * sp[a]).powi(2)).sum::<f64>() <= r * r
                });
                if inside {
                    out.push(grid.index(x, y, z));
                }
            }
        }
    }
    out
}

/// Places `n` blobs whose voxels all satisfy `allowed` and do not touch
/// `blocked`; the new voxels and their neighbours are added to `blocked`.
#[allow(clippy::too_many_arguments)]
fn place_blobs(
    grid: &Grid,
    n: usize,
    centres: &[usize],
    allowed: impl Fn(usize) -> bool,
    blocked: &mut [bool],
    radius_mm: (f64, f64),
    what: &str,
    rng: &mut Rng64,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            if centres.is_empty() {
                break;
            }
            let c = grid.coords(centres[rng.random_range(0..centres.len())]);
            let voxels = blob(grid, c, radius_mm, rng);
            if !voxels.is_empty() && voxels.iter().all(|&v| allowed(v) && !blocked[v]) {
                placed = Some(voxels);
                break;
            }
        }
        let voxels = placed.ok_or_else(|| {
            Error::Precondition(format!(
                "could not place {what} {k} of {n} within {MAX_PLACEMENT_ATTEMPTS} attempts: \
                 it must fit inside its region without touching earlier blobs"
            ))
        })?;
        for &v in &voxels {
            blocked[v] = true;
            for nb in grid.neighbors(v, Connectivity::TwentySix) {
                blocked[nb] = true;
            }
        }
        out.push(voxels);
    }
    Ok(out)
}

fn noiseless(spec: &PhantomSpec, rng: &mut Rng64) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid()?;
    let rho = radius_map(&grid);
    let wm = Mask::from_bools(grid.clone(), rho.iter().map(|&r| r >= WM_SHELL.0 && r <= WM_SHELL.1))?;
    let mut data: Vec<f64> = rho
        .iter()
        .map(|&r| {
            if r > 1.0 {
                0.0
            } else if r < WM_SHELL.0 {
                VENTRICLE_INTENSITY
            } else if r <= WM_SHELL.1 {
                spec.wm_intensity
            } else {
                spec.background_intensity
            }
        })
        .collect();

    let mut blocked = vec![false; grid.len()];
    let wm_voxels: Vec<usize> = wm.indices().collect();
    let lesions = place_blobs(
        &grid,
        spec.n_lesions,
        &wm_voxels,
        |v| wm.contains(v),
        &mut blocked,
        spec.lesion_radius_range_mm,
        "lesion",
        rng,
    )?;

    // distractors keep a one-voxel gap from the white matter
    let near_wm: Vec<bool> = (0..grid.len())
        .map(|i| wm.contains(i) || grid.neighbors(i, Connectivity::TwentySix).any(|n| wm.contains(n)))
        .collect();
    let gm_centres: Vec<usize> = (0..grid.len()).filter(|&i| rho[i] >= GM_BAND.0 && rho[i] <= GM_BAND.1).collect();
    let distractors = place_blobs(
        &grid,
        spec.n_distractors,
        &gm_centres,
        |v| !near_wm[v] && rho[v] <= 1.0,
        &mut blocked,
        (
            spec.lesion_radius_range_mm.0.min(DISTRACTOR_MAX_RADIUS_MM),
            spec.lesion_radius_range_mm.1.min(DISTRACTOR_MAX_RADIUS_MM),
        ),
        "distractor",
        rng,
    )?;

    let (lo, hi) = spec.lesion_intensity_range;
    let (dlo, dhi) = spec.distractor_intensity_range.unwrap_or(spec.lesion_intensity_range);
    for (k, voxels) in lesions.iter().chain(&distractors).enumerate() {
        let value = if k < lesions.len() {
            rng.random_range(lo..=hi)
        } else {
            rng.random_range(dlo..=dhi)
        };
        for &v in voxels {
            data[v] = value;
        }
    }
    Ok(Phantom {
        image: Volume::new(grid.clone(), data)?,
        wm,
        all: Mask::from_indices(grid.clone(), lesions.into_iter().flatten()),
        distractors: Mask::from_indices(grid, distractors.into_iter().flatten()),
    })
}

fn add_noise(v: &Volume, sigma: f64, rng: &mut Rng64) -> Result<Volume> {
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let data = v.data().iter().map(|x| x + normal.sample(rng)).collect();
    Volume::new(v.grid().clone(), data)
}

/// A single phantom, deterministic in `spec.seed`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let mut rng = seeded(spec.seed);
    let mut p = noiseless(spec, &mut rng)?;
    p.image = add_noise(&p.image, spec.noise_sigma, &mut rng)?;
    Ok(p)
}

/// A phantom followed over time.
///
/// `new[k]` and `vanishing[k]` describe the change from timepoint `k` to
/// `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSeries {
    pub timepoints: Vec<Phantom>,
    pub new: Vec<Mask>,
    pub vanishing: Vec<Mask>,
    pub plans: Vec<AugmentPlan>,
}

/// Allowed per-step load ratios.
pub const ALPHA_RANGE: (f64, f64) = (0.5, 2.0);

/// Builds a `alphas.len() + 1` timepoint series by repeated
/// [`synth_longitudinal`] with the load ratio of each step fixed.
///
/// Noise is added once to the first scan; later scans differ from their
/// predecessor only where lesions were added or removed.
pub fn make_longitudinal(spec: &PhantomSpec, alphas: &[f64]) -> Result<PhantomSeries> {
    if alphas.is_empty() {
        return Err(Error::Argument("a series needs at least 2 timepoints".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(*a)) {
        return Err(Error::Argument(format!(
            "load ratio {a} outside [{}, {}]",
            ALPHA_RANGE.0, ALPHA_RANGE.1
        )));
    }
    let first = make_phantom(spec)?;
    let mut rng = seeded(crate::rng::derive_seed(spec.seed, 1));
    let bank = if first.all.is_empty_mask() {
        None
    } else {
        Some(build_bank(&[(&first.image, &first.all)], Connectivity::TwentySix)?)
    };
    let mut series = PhantomSeries {
        timepoints: vec![first],
        new: Vec::new(),
        vanishing: Vec::new(),
        plans: Vec::new(),
    };
    for &alpha in alphas {
        let prev = series.timepoints.last().expect("nonempty");
        let empty = Mask::empty(prev.wm.grid().clone());
        let (image, all, new, vanishing, plan) = match &bank {
            None if alpha == 1.0 => (
                prev.image.clone(),
                prev.all.clone(),
                empty.clone(),
                empty,
                AugmentPlan {
                    target_load_mm3: 0.0,
                    alpha_sample: Some(alpha),
                    ops: Vec::new(),
                    warning: None,
                },
            ),
            None => {
                return Err(Error::Precondition(format!(
                    "load ratio {alpha} needs lesions, but the phantom has none"
                )))
            }
            Some(bank) => {
                let cfg = SynthConfig {
                    alpha: Some(alpha),
                    ..Default::default()
                };
                let r = synth_longitudinal(&prev.image, &prev.all, bank, &prev.wm, &cfg, &mut rng)?;
                (r.image, r.all, r.new, r.vanishing, r.plan)
            }
        };
        let next = Phantom {
            image,
            wm: prev.wm.clone(),
            all,
            distractors: prev.distractors.clone(),
        };
        series.timepoints.push(next);
        series.new.push(new);
        series.vanishing.push(vanishing);
        series.plans.push(plan);
    }
    Ok(series)
}

impl PhantomSeries {
    pub fn single(p: Phantom) -> Self {
        PhantomSeries {
            timepoints: vec![p],
            new: Vec::new(),
            vanishing: Vec::new(),
            plans: Vec::new(),
        }
    }

    /// In-memory subject equivalent to what [`PhantomSeries::write`] stores.
    pub fn to_subject(&self, id: &str) -> SubjectData {
        let timepoints = self
            .timepoints
            .iter()
            .enumerate()
            .map(|(k, tp)| TimepointData {
                image: tp.image.clone(),
                wm: Some(tp.wm.clone()),
                all: Some(tp.all.clone()),
                new: (k > 0).then(|| self.new[k - 1].clone()),
                vanishing: (k > 0).then(|| self.vanishing[k - 1].clone()),
            })
            .collect::<Vec<_>>();
        SubjectData {
            id: id.to_string(),
            format: if timepoints.len() > 1 { Format::Longitudinal } else { Format::CrossSectional },
            timepoints,
        }
    }

    /// Writes every map as `<id>_tp<k>_<kind>.nii.gz` under `dir` and returns
    /// the manifest record, with paths relative to `dir`.
    ///
    /// One timepoint gives a cross-sectional record with an all-lesion
    /// label; longer series carry all four label kinds.
    pub fn write(&self, dir: &Path, id: &str, split: Split) -> Result<SubjectRecord> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = |k: usize, kind: &str| format!("{id}_tp{k}_{kind}.nii.gz");
        let mut tps = Vec::with_capacity(self.timepoints.len());
        for (k, tp) in self.timepoints.iter().enumerate() {
            save_nifti(&tp.image, dir.join(name(k, "image")))?;
            save_mask(&tp.wm, dir.join(name(k, "wm")))?;
            save_mask(&tp.all, dir.join(name(k, "all")))?;
            let mut rec = TimepointRecord {
                image: name(k, "image").into(),
                wm: Some(name(k, "wm").into()),
                all: Some(name(k, "all").into()),
                new: None,
                vanishing: None,
            };
            if k > 0 {
                save_mask(&self.new[k - 1], dir.join(name(k, "new")))?;
                save_mask(&self.vanishing[k - 1], dir.join(name(k, "vanishing")))?;
                rec.new = Some(name(k, "new").into());
                rec.vanishing = Some(name(k, "vanishing").into());
            }
            tps.push(rec);
        }
        let longitudinal = tps.len() > 1;
        Ok(SubjectRecord {
            id: id.to_string(),
            dataset: None,
            format: if longitudinal { Format::Longitudinal } else { Format::CrossSectional },
            availability: if longitudinal {
                LabelAvailability::full()
            } else {
                LabelAvailability {
                    all_t1: true,
                    ..Default::default()
                }
            },
            split,
            timepoints: tps,
        })
    }
}
