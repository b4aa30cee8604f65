//! Lesion-level augmentation: populating and inpainting with load control.
//!
//! Populating composites augmented bank lesions into white matter:
//! `X' = X(1 - M) + F M` and `Y' = Y(1 - M) + M`. Inpainting removes lesion
//! components by fast marching with a blurred boundary and sets `Y' = Y - M`.

mod balance;
mod inpaint;

pub use balance::{balance_dataset, BalanceOutcome};
pub use inpaint::BAND_RADIUS;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::volume::{connected_components, Connectivity, Grid, Mask, Volume};
use inpaint::Crop;

/// Consecutive placement failures after which populating gives up.
pub const MAX_PLACEMENT_FAILURES: usize = 50;
/// Augmentation draws tried before a sample passes through unchanged.
pub const AUGMENT_RETRIES: usize = 5;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);
pub const INTENSITY_RANGE: (f64, f64) = (0.9, 1.1);
/// Noise standard deviation as a fraction of the patch intensity range.
pub const NOISE_FRACTION: f64 = 0.02;

/// A lesion cropped to its bounding box plus a one-voxel margin.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionSample {
    pub intensity: Volume,
    pub mask: Mask,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionBank {
    samples: Vec<LesionSample>,
}

impl LesionBank {
    pub fn new(samples: Vec<LesionSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("lesion bank is empty".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.mask.is_empty_mask()) {
            return Err(Error::Validation(format!("bank sample {} has an empty mask", s.source_id)));
        }
        Ok(LesionBank { samples })
    }

    pub fn samples(&self) -> &[LesionSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn sample(&self, id: usize) -> Result<&LesionSample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::Argument(format!("bank has no sample {id}")))
    }
}

fn crop_volume(v: &Volume, crop: Crop) -> Result<Volume> {
    let grid = Grid::new(crop.dims, v.spacing())?;
    let data = (0..crop.len()).map(|l| v.data()[crop.global(v.grid(), l)]).collect();
    Volume::new(grid, data)
}

/// One sample per connected lesion component of each `(image, mask)` pair.
///
/// Each sample mask holds only the voxels of its own component. Source ids
/// are `img<i>_c<j>`.
pub fn build_bank(images: &[(&Volume, &Mask)], conn: Connectivity) -> Result<LesionBank> {
    let mut samples = Vec::new();
    for (i, (image, mask)) in images.iter().enumerate() {
        image.grid().ensure_compatible(mask.grid(), "lesion mask")?;
        for (j, c) in connected_components(mask, conn).iter().enumerate() {
            let crop = Crop::around(c.bounding_box, 1, image.dims());
            let intensity = crop_volume(image, crop)?;
            let local = c.voxels.iter().map(|&v| crop.local(image.grid(), v));
            let mask = Mask::from_indices(intensity.grid().clone(), local);
            samples.push(LesionSample {
                intensity,
                mask,
                source_id: format!("img{i}_c{j}"),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Validation("no lesion voxels in any bank source".into()));
    }
    LesionBank::new(samples)
}

/// Parameters of one sample augmentation; applying them is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: [bool; 3],
    pub scale: f64,
    pub intensity_factor: f64,
    pub noise_fraction: f64,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: [false; 3],
            scale: 1.0,
            intensity_factor: 1.0,
            noise_fraction: 0.0,
            noise_seed: 0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            flip: [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)],
            scale: rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            intensity_factor: rng.random_range(INTENSITY_RANGE.0..=INTENSITY_RANGE.1),
            noise_fraction: NOISE_FRACTION,
            noise_seed: rng.random(),
        }
    }
}

/// Applies `p` to a sample. Returns `None` when the transformed mask is empty.
///
/// Scaling is isotropic about the patch centre with nearest-neighbour
/// lookup; output voxel `i` reads source `floor((i - c')/s + c + 0.5)`.
pub fn apply_augment(s: &LesionSample, p: &AugmentParams) -> Result<Option<LesionSample>> {
    if !(p.scale > 0.0) || !p.intensity_factor.is_finite() || !(p.noise_fraction >= 0.0) {
        return Err(Error::Argument(format!("invalid augmentation parameters {p:?}")));
    }
    let src = s.intensity.dims();
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = ((src[a] as f64 * p.scale).round() as usize).max(1);
    }
    let lookup = |a: usize, i: usize| -> Option<usize> {
        let c_out = (out[a] as f64 - 1.0) / 2.0;
        let c_src = (src[a] as f64 - 1.0) / 2.0;
        let x = ((i as f64 - c_out) / p.scale + c_src + 0.5).floor();
        if x < 0.0 || x >= src[a] as f64 {
            return None;
        }
        let x = x as usize;
        Some(if p.flip[a] { src[a] - 1 - x } else { x })
    };
    let grid = Grid::new(out, s.intensity.spacing())?;
    let mut values = vec![0.0; grid.len()];
    let mut mask = vec![0u8; grid.len()];
    for z in 0..out[2] {
        let Some(sz) = lookup(2, z) else { continue };
        for y in 0..out[1] {
            let Some(sy) = lookup(1, y) else { continue };
            for x in 0..out[0] {
                let Some(sx) = lookup(0, x) else { continue };
                let i = grid.index(x, y, z);
                let j = s.intensity.grid().index(sx, sy, sz);
                values[i] = s.intensity.data()[j] * p.intensity_factor;
                mask[i] = s.mask.data()[j];
            }
        }
    }
    if mask.iter().all(|&m| m == 0) {
        return Ok(None);
    }
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let sigma = p.noise_fraction * (hi - lo);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Argument(e.to_string()))?;
        let mut rng = seeded(p.noise_seed);
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Some(LesionSample {
        intensity: Volume::new(grid.clone(), values)?,
        mask: Mask::new(grid, mask)?,
        source_id: s.source_id.clone(),
    }))
}

/// Random flips, scaling, intensity scaling and noise.
///
/// Draws up to [`AUGMENT_RETRIES`] parameter sets; if every one empties the
/// mask the sample passes through with identity parameters.
pub fn augment_sample<R: Rng + ?Sized>(s: &LesionSample, rng: &mut R) -> Result<(LesionSample, AugmentParams)> {
    for _ in 0..AUGMENT_RETRIES {
        let p = AugmentParams::draw(rng);
        if let Some(out) = apply_augment(s, &p)? {
            return Ok((out, p));
        }
    }
    Ok((s.clone(), AugmentParams::identity()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Populate {
        sample_id: usize,
        params: AugmentParams,
        /// Grid position of the patch origin; may be negative when the
        /// patch margin hangs over the border.
        offset: [isize; 3],
        volume_mm3: f64,
    },
    Inpaint {
        /// Index into the connected components of the input label.
        component_id: usize,
        volume_mm3: f64,
    },
}

/// Record of one augmentation, sufficient to replay it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub target_load_mm3: f64,
    pub alpha_sample: Option<f64>,
    pub ops: Vec<AugmentOp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl AugmentPlan {
    fn new(target_load_mm3: f64) -> Self {
        AugmentPlan {
            target_load_mm3,
            alpha_sample: None,
            ops: Vec::new(),
            warning: None,
        }
    }

    /// Largest single lesion volume added or removed.
    pub fn max_lesion_mm3(&self) -> f64 {
        self.ops
            .iter()
            .map(|op| match op {
                AugmentOp::Populate { volume_mm3, .. } | AugmentOp::Inpaint { volume_mm3, .. } => *volume_mm3,
            })
            .fold(0.0, f64::max)
    }
}

/// Grid indices of a patch's mask voxels at `offset`, or `None` if any falls outside.
fn placed_voxels(patch: &Mask, offset: [isize; 3], grid: &Grid) -> Option<Vec<usize>> {
    patch
        .indices()
        .map(|l| {
            let c = patch.grid().coords(l);
            let mut g = [0usize; 3];
            for a in 0..3 {
                g[a] = (c[a] as isize + offset[a]).try_into().ok().filter(|&v: &usize| v < grid.dims[a])?;
            }
            Some(grid.index(g[0], g[1], g[2]))
        })
        .collect()
}

fn composite(x: &mut [f64], y: &mut Mask, patch: &LesionSample, voxels: &[usize]) {
    for (l, &g) in patch.mask.indices().zip(voxels) {
        x[g] = patch.intensity.data()[l];
        y.set(g, true);
    }
}

/// Adds augmented bank lesions until the load reaches `target_load_mm3`.
///
/// Each lesion lies inside `wm` and does not touch (26-neighbourhood) any
/// existing or placed lesion. After [`MAX_PLACEMENT_FAILURES`] consecutive
/// failed placements the partial result is returned with a plan warning.
pub fn populate<R: Rng + ?Sized>(
    x: &Volume,
    y: &Mask,
    bank: &LesionBank,
    wm: &Mask,
    target_load_mm3: f64,
    rng: &mut R,
) -> Result<(Volume, Mask, AugmentPlan)> {
    let grid = x.grid();
    grid.ensure_compatible(y.grid(), "lesion mask")?;
    grid.ensure_compatible(wm.grid(), "white-matter mask")?;
    let mut load = y.volume_mm3();
    if target_load_mm3 < load {
        return Err(Error::Argument(format!(
            "target load {target_load_mm3} mm3 below current {load} mm3; use inpainting"
        )));
    }
    if wm.is_empty_mask() {
        return Err(Error::Argument("white-matter mask is empty".into()));
    }
    let mut plan = AugmentPlan::new(target_load_mm3);
    let mut xd = x.data().to_vec();
    let mut yo = y.clone();
    let mut blocked = vec![false; grid.len()];
    let block = |blocked: &mut [bool], v: usize| {
        blocked[v] = true;
        for n in grid.neighbors(v, Connectivity::TwentySix) {
            blocked[n] = true;
        }
    };
    for v in y.indices() {
        block(&mut blocked, v);
    }
    let wm_voxels: Vec<usize> = wm.indices().collect();
    let mut failures = 0;
    while load < target_load_mm3 {
        if failures >= MAX_PLACEMENT_FAILURES {
            plan.warning = Some(format!(
                "placement failed {MAX_PLACEMENT_FAILURES} consecutive times at load {load} mm3"
            ));
            break;
        }
        let sample_id = rng.random_range(0..bank.len());
        let (patch, params) = augment_sample(&bank.samples[sample_id], rng)?;
        let centre = grid.coords(wm_voxels[rng.random_range(0..wm_voxels.len())]);
        let pd = patch.mask.dims();
        let offset = [0, 1, 2].map(|a| centre[a] as isize - (pd[a] / 2) as isize);
        let fits = placed_voxels(&patch.mask, offset, grid)
            .filter(|vs| vs.iter().all(|&v| wm.contains(v) && !blocked[v]));
        let Some(voxels) = fits else {
            failures += 1;
            continue;
        };
        failures = 0;
        composite(&mut xd, &mut yo, &patch, &voxels);
        for &v in &voxels {
            block(&mut blocked, v);
        }
        let volume_mm3 = voxels.len() as f64 * grid.voxel_volume();
        load += volume_mm3;
        plan.ops.push(AugmentOp::Populate {
            sample_id,
            params,
            offset,
            volume_mm3,
        });
    }
    Ok((Volume::new(grid.clone(), xd)?, yo, plan))
}

/// Removes the listed components of `y` (indices into its 26-connected
/// components) by fast-marching inpainting.
///
/// Only voxels inside the removed components change; the label becomes
/// exactly `Y - M`. Components are processed in list order.
pub fn inpaint(x: &Volume, y: &Mask, components: &[usize], sigma_mm: f64) -> Result<(Volume, Mask, AugmentPlan)> {
    let grid = x.grid();
    grid.ensure_compatible(y.grid(), "lesion mask")?;
    if !(sigma_mm >= 0.0) {
        return Err(Error::Argument(format!("sigma_mm must be >= 0, got {sigma_mm}")));
    }
    let comps = connected_components(y, Connectivity::TwentySix);
    let mut seen = vec![false; comps.len()];
    for &c in components {
        if c >= comps.len() || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Argument(format!(
                "component {c} invalid or repeated ({} components)",
                comps.len()
            )));
        }
    }
    let mut plan = AugmentPlan::new(y.volume_mm3() - components.iter().map(|&c| comps[c].volume_mm3).sum::<f64>());
    let mut xd = x.data().to_vec();
    let mut yo = y.clone();
    let min_spacing = grid.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let margin = BAND_RADIUS.ceil() as usize + (3.0 * sigma_mm / min_spacing).ceil() as usize + 1;
    for &c in components {
        let comp = &comps[c];
        let crop = Crop::around(comp.bounding_box, margin, grid.dims);
        let crop_grid = Grid::new(crop.dims, grid.spacing)?;
        let mut local: Vec<f64> = (0..crop.len()).map(|l| xd[crop.global(grid, l)]).collect();
        let mut region = vec![false; crop.len()];
        for &v in &comp.voxels {
            region[crop.local(grid, v)] = true;
        }
        let lesion: Vec<bool> = (0..crop.len()).map(|l| y.contains(crop.global(grid, l))).collect();
        inpaint::peel_inpaint(&mut local, &crop_grid, &region, &lesion, sigma_mm)?;
        for &v in &comp.voxels {
            xd[v] = local[crop.local(grid, v)];
            yo.set(v, false);
        }
        plan.ops.push(AugmentOp::Inpaint {
            component_id: c,
            volume_mm3: comp.volume_mm3,
        });
    }
    Ok((Volume::new(grid.clone(), xd)?, yo, plan))
}

/// Re-applies a recorded plan. Populate ops are placed without re-checking
/// constraints; consecutive inpaint ops run as one [`inpaint`] call.
pub fn replay_plan(x: &Volume, y: &Mask, bank: &LesionBank, plan: &AugmentPlan, sigma_mm: f64) -> Result<(Volume, Mask)> {
    let grid = x.grid().clone();
    let mut xv = x.clone();
    let mut yo = y.clone();
    let mut pending = Vec::new();
    let flush = |xv: &mut Volume, yo: &mut Mask, pending: &mut Vec<usize>| -> Result<()> {
        if !pending.is_empty() {
            let (a, b, _) = inpaint(xv, yo, pending, sigma_mm)?;
            *xv = a;
            *yo = b;
            pending.clear();
        }
        Ok(())
    };
    for op in &plan.ops {
        match op {
            AugmentOp::Inpaint { component_id, .. } => pending.push(*component_id),
            AugmentOp::Populate {
                sample_id, params, offset, ..
            } => {
                flush(&mut xv, &mut yo, &mut pending)?;
                let src = bank.sample(*sample_id)?;
                let patch = match apply_augment(src, params)? {
                    Some(p) => p,
                    None => src.clone(),
                };
                let voxels = placed_voxels(&patch.mask, *offset, &grid)
                    .ok_or_else(|| Error::Argument("plan places a lesion outside the grid".into()))?;
                let mut xd = xv.into_data();
                composite(&mut xd, &mut yo, &patch, &voxels);
                xv = Volume::new(grid.clone(), xd)?;
            }
        }
    }
    flush(&mut xv, &mut yo, &mut pending)?;
    Ok((xv, yo))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub alpha_low: f64,
    pub alpha_high: f64,
    /// Fixed load ratio instead of a uniform draw.
    pub alpha: Option<f64>,
    pub sigma_mm: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alpha_low: 0.8,
            alpha_high: 1.2,
            alpha: None,
            sigma_mm: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_low > 0.0
            && self.alpha_low <= self.alpha_high
            && self.alpha_high.is_finite()
            && self.sigma_mm >= 0.0
            && self.alpha.is_none_or(|a| a > 0.0 && a.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid synthesis config {self:?}")))
        }
    }
}

/// A synthesized second timepoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthResult {
    pub image: Volume,
    pub all: Mask,
    pub new: Mask,
    pub vanishing: Mask,
    pub plan: AugmentPlan,
}

/// Synthesizes a follow-up scan whose lesion load is `alpha` times the
/// current one.
///
/// `alpha >= 1` populates and the added lesions form `new`; `alpha < 1`
/// inpaints components smallest first until the load is at most the target,
/// and the removed lesions form `vanishing`.
pub fn synth_longitudinal<R: Rng + ?Sized>(
    x: &Volume,
    y: &Mask,
    bank: &LesionBank,
    wm: &Mask,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<SynthResult> {
    cfg.validate()?;
    if y.is_empty_mask() {
        return Err(Error::Precondition("lesion mask is empty".into()));
    }
    let alpha = match cfg.alpha {
        Some(a) => a,
        None if cfg.alpha_low == cfg.alpha_high => cfg.alpha_low,
        None => rng.random_range(cfg.alpha_low..=cfg.alpha_high),
    };
    let load = y.volume_mm3();
    let target = alpha * load;
    let empty = Mask::empty(y.grid().clone());
    let (image, all, mut plan, new, vanishing) = if alpha >= 1.0 {
        let (image, all, plan) = populate(x, y, bank, wm, target, rng)?;
        let new = all.difference(y);
        (image, all, plan, new, empty)
    } else {
        let comps = connected_components(y, Connectivity::TwentySix);
        let mut order: Vec<usize> = (0..comps.len()).collect();
        order.sort_by_key(|&c| comps[c].len());
        let mut remaining = load;
        let mut chosen = Vec::new();
        for c in order {
            if remaining <= target {
                break;
            }
            remaining -= comps[c].volume_mm3;
            chosen.push(c);
        }
        let (image, all, plan) = inpaint(x, y, &chosen, cfg.sigma_mm)?;
        let vanishing = y.difference(&all);
        (image, all, plan, empty, vanishing)
    };
    plan.target_load_mm3 = target;
    plan.alpha_sample = Some(alpha);
    Ok(SynthResult {
        image,
        all,
        new,
        vanishing,
        plan,
    })
}
