//! Per-voxel logistic segmenter with four heads, trained on the full
//! constrained objective.
//!
//! Each voxel is described by a fixed bank of local statistics (see
//! [`FEATURE_NAMES`]). Every head is a logistic regression on the features its
//! mask allows; the all-lesion head at the first timepoint never reads the
//! prior-label channel.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble, run_subject, Head, InputFlags, ModelInput, PredictionSet, Prior, RunOptions, SubjectData, Targets,
};
use crate::error::{Error, Result};
use crate::losses::gradcheck::{central_difference, max_relative_error, CheckOutcome};
use crate::losses::{total_loss_raw, LossBreakdown, LossConfig, XorMode};
use crate::manifest::{DatasetManifest, Format, Split};
use crate::rng::{derive_seed, seeded};
use crate::volume::{Grid, Mask, Volume};

/// Identifier of the feature extractor, stored with serialized models.
pub const FEATURE_BANK: &str = "local-stats-v1";

pub const N_FEATURES: usize = 8;

pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["x_t1", "x_t2", "x_t2_minus_x_t1", "mean3_x_t1", "mean3_x_t2", "wm", "prior", "bias"];

const PRIOR: usize = 6;
const BIAS: usize = 7;

type Features = Vec<[f64; N_FEATURES]>;

/// Whether `head` may read feature `f`.
pub fn head_reads(head: Head, f: usize) -> bool {
    !(head == Head::AllT1 && f == PRIOR)
}

/// Mean over 3×3×3 neighbourhoods, with out-of-range indices clamped to the border.
fn box3(data: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let stride = [1, nx, nx * ny];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let s = stride[axis];
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let c = (i / s) % n;
            let lo = if c == 0 { i } else { i - s };
            let hi = if c + 1 == n { i } else { i + s };
            *out = (cur[lo] + cur[i] + cur[hi]) / 3.0;
        }
        cur = next;
    }
    debug_assert_eq!(cur.len(), nx * ny * nz);
    cur
}

/// Feature rows for every voxel of `input`.
///
/// Intensities are divided by the mean of `x_t1` over the white matter, so
/// scanners with different gains give comparable features.
pub fn extract_features(input: &ModelInput) -> Result<Features> {
    let grid = input.grid();
    for (what, g) in [
        ("x_t2", input.x_t2.grid()),
        ("y_a_t1", input.y_a_t1.grid()),
        ("wm_t2", input.wm_t2.grid()),
    ] {
        grid.ensure_compatible(g, what)?;
    }
    let x1 = input.x_t1.data();
    let x2 = input.x_t2.data();
    let wm = input.wm_t2.data();
    let (sum, n) = x1
        .iter()
        .zip(wm)
        .filter(|(_, &w)| w != 0)
        .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
    let scale = if n > 0 && sum > 0.0 {
        sum / n as f64
    } else {
        let m = x1.iter().map(|v| v.abs()).sum::<f64>() / x1.len() as f64;
        if m > 0.0 {
            m
        } else {
            1.0
        }
    };
    let a: Vec<f64> = x1.iter().map(|v| v / scale).collect();
    let b: Vec<f64> = x2.iter().map(|v| v / scale).collect();
    let ma = box3(&a, grid.dims);
    let mb = box3(&b, grid.dims);
    let prior = input.y_a_t1.data();
    Ok((0..grid.len())
        .map(|i| [a[i], b[i], b[i] - a[i], ma[i], mb[i], wm[i] as f64, prior[i] as f64, 1.0])
        .collect())
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadWeights {
    pub all_t1: Vec<f64>,
    pub all_t2: Vec<f64>,
    pub new_t2: Vec<f64>,
    pub vanishing_t2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModel {
    pub feature_bank: String,
    pub weights: HeadWeights,
}

impl ToyModel {
    /// All weights zero: every output is 0.5.
    pub fn zeros() -> Self {
        Self::with_bias(0.0)
    }

    /// Zero weights except a shared bias.
    pub fn with_bias(bias: f64) -> Self {
        let mut w = [0.0; N_FEATURES];
        w[BIAS] = bias;
        Self::from_heads([w; 4])
    }

    /// Builds a model from per-head weights indexed by [`Head::index`].
    /// Weights a head may not read are forced to zero.
    pub fn from_heads(mut heads: [[f64; N_FEATURES]; 4]) -> Self {
        for head in Head::ALL {
            for (f, w) in heads[head.index()].iter_mut().enumerate() {
                if !head_reads(head, f) {
                    *w = 0.0;
                }
            }
        }
        let [a, b, c, d] = heads.map(|h| h.to_vec());
        ToyModel {
            feature_bank: FEATURE_BANK.to_string(),
            weights: HeadWeights {
                all_t1: a,
                all_t2: b,
                new_t2: c,
                vanishing_t2: d,
            },
        }
    }

    pub fn head(&self, head: Head) -> &[f64] {
        match head {
            Head::AllT1 => &self.weights.all_t1,
            Head::AllT2 => &self.weights.all_t2,
            Head::NewT2 => &self.weights.new_t2,
            Head::VanishingT2 => &self.weights.vanishing_t2,
        }
    }

    fn heads(&self) -> [[f64; N_FEATURES]; 4] {
        Head::ALL.map(|h| {
            let mut w = [0.0; N_FEATURES];
            w.copy_from_slice(self.head(h));
            w
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_bank != FEATURE_BANK {
            return Err(Error::Validation(format!(
                "model uses feature bank {:?}, this build provides {FEATURE_BANK:?}",
                self.feature_bank
            )));
        }
        for head in Head::ALL {
            let w = self.head(head);
            if w.len() != N_FEATURES {
                return Err(Error::Validation(format!(
                    "head {} has {} weights, expected {N_FEATURES}",
                    head.name(),
                    w.len()
                )));
            }
            if let Some(f) = (0..N_FEATURES).find(|&f| !w[f].is_finite() || (!head_reads(head, f) && w[f] != 0.0)) {
                return Err(Error::Validation(format!(
                    "head {} weight for {} is {} but must be finite, and zero when masked",
                    head.name(),
                    FEATURE_NAMES[f],
                    w[f]
                )));
            }
        }
        Ok(())
    }
}

/// Per-head probability buffers for precomputed feature rows.
fn probabilities(heads: &[[f64; N_FEATURES]; 4], features: &[[f64; N_FEATURES]]) -> [Vec<f64>; 4] {
    std::array::from_fn(|h| {
        let w = &heads[h];
        features
            .iter()
            .map(|row| logistic(row.iter().zip(w).map(|(x, w)| x * w).sum()))
            .collect()
    })
}

/// Applies the model to one input.
pub fn forward(m: &ToyModel, input: &ModelInput) -> Result<PredictionSet> {
    m.validate()?;
    let features = extract_features(input)?;
    let grid = input.grid();
    let maps = probabilities(&m.heads(), &features).map(|p| Volume::new(grid.clone(), p));
    let [a, b, c, d] = maps;
    PredictionSet::new(a?, b?, c?, d?)
}

/// Models averaged voxelwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ensemble {
    pub feature_bank: String,
    pub members: Vec<ToyModel>,
}

impl Ensemble {
    pub fn new(members: Vec<ToyModel>) -> Result<Self> {
        let e = Ensemble {
            feature_bank: FEATURE_BANK.to_string(),
            members,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::Validation("ensemble has no members".into()));
        }
        if let Some(m) = self.members.iter().find(|m| m.feature_bank != self.feature_bank) {
            return Err(Error::Validation(format!(
                "member feature bank {:?} differs from ensemble bank {:?}",
                m.feature_bank, self.feature_bank
            )));
        }
        self.members.iter().try_for_each(ToyModel::validate)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let e: Ensemble = serde_path_to_error::deserialize(de).map_err(|err| Error::Parse {
            pointer: err.path().to_string(),
            message: err.inner().to_string(),
        })?;
        e.validate()?;
        Ok(e)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Voxelwise mean of the members' outputs.
pub fn ensemble_predict(e: &Ensemble, input: &ModelInput) -> Result<PredictionSet> {
    e.validate()?;
    let outs = e
        .members
        .iter()
        .map(|m| forward(m, input))
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::mean(&outs)
}

/// Runs the ensemble over every window of a subject.
pub fn predict_subject(e: &Ensemble, subject: &SubjectData, opts: RunOptions) -> Result<Vec<PredictionSet>> {
    run_subject(subject, |input| ensemble_predict(e, input), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Samples per gradient step.
    pub batch_size: usize,
    pub loss: LossConfig,
    pub patch_size: [usize; 3],
    pub seed: u64,
    /// Probability that a ground-truth prior label is shown for a training window.
    pub prior_prob: f64,
    /// Ensemble members trained by [`train_ensemble`].
    pub folds: usize,
    /// Initial bias of every head; other weights start at zero.
    pub init_bias: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 2.0,
            batch_size: 4,
            loss: LossConfig {
                volume_unit_mm3: 1000.0,
                ..LossConfig::default()
            },
            patch_size: [32, 32, 32],
            seed: 0,
            prior_prob: 0.5,
            folds: 2,
            init_bias: -2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be > 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.prior_prob) {
            return Err(Error::Argument(format!("prior_prob {} outside [0, 1]", self.prior_prob)));
        }
        if self.patch_size.contains(&0) {
            return Err(Error::Argument(format!("patch_size {:?} has a zero side", self.patch_size)));
        }
        if !self.init_bias.is_finite() {
            return Err(Error::Argument("init_bias must be finite".into()));
        }
        self.loss.validate()
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Parse {
                pointer: "/".into(),
                message: e.to_string(),
            })?
        } else {
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|err| Error::Parse {
                pointer: err.path().to_string(),
                message: err.inner().to_string(),
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A trained model with one loss record per epoch, averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub history: Vec<LossBreakdown>,
}

/// One timepoint pair of a training subject with its features precomputed.
struct Sample {
    grid: Grid,
    features: Features,
    /// Whether the prior column holds a ground-truth label that may be dropped.
    droppable_prior: bool,
    labels: Targets,
    wm: Vec<u8>,
    kind: Format,
}

fn training_pairs(s: &SubjectData) -> Vec<(usize, usize)> {
    if s.effective_format() == Format::CrossSectional {
        return vec![(0, 0)];
    }
    std::iter::once((0, 0)).chain((1..s.len()).map(|b| (b - 1, b))).collect()
}

fn build_samples(subjects: &[SubjectData]) -> Result<Vec<Sample>> {
    let mut rng = seeded(0);
    let mut out = Vec::new();
    for s in subjects {
        for pair in training_pairs(s) {
            // probability 1 keeps the label; dropout is applied per draw during training
            let input = assemble(s, pair, Prior::GroundTruth, 1.0, &mut rng)?;
            out.push(Sample {
                grid: input.grid().clone(),
                features: extract_features(&input)?,
                droppable_prior: !input.flags.label_zero_substituted,
                labels: s.targets(pair)?,
                wm: input.wm_t2.data().to_vec(),
                kind: s.pair_kind(pair),
            });
        }
    }
    Ok(out)
}

/// Voxel indices of a patch with origin `o` and size `size`.
fn patch_indices(grid: &Grid, o: [usize; 3], size: [usize; 3]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(size.iter().product());
    for z in o[2]..o[2] + size[2] {
        for y in o[1]..o[1] + size[1] {
            for x in o[0]..o[0] + size[0] {
                idx.push(grid.index(x, y, z));
            }
        }
    }
    idx
}

fn crop_mask(m: &Mask, grid: &Grid, idx: &[usize]) -> Result<Mask> {
    Mask::new(grid.clone(), idx.iter().map(|&i| m.data()[i]).collect())
}

/// Loss and weight gradient of one (possibly cropped) sample.
fn sample_gradient(
    heads: &[[f64; N_FEATURES]; 4],
    features: &[[f64; N_FEATURES]],
    labels: &Targets,
    wm: &[u8],
    grid: &Grid,
    cfg: &LossConfig,
    active: bool,
    kind: Format,
) -> (LossBreakdown, [[f64; N_FEATURES]; 4]) {
    let p = probabilities(heads, features);
    let (breakdown, dp) = total_loss_raw(
        [p[0].as_slice(), p[1].as_slice(), p[2].as_slice(), p[3].as_slice()],
        labels,
        wm,
        grid,
        cfg,
        active,
        kind,
    );
    let mut grad = [[0.0; N_FEATURES]; 4];
    for head in Head::ALL {
        let h = head.index();
        for ((row, &pv), &g) in features.iter().zip(&p[h]).zip(&dp[h]) {
            let dz = g * pv * (1.0 - pv);
            if dz != 0.0 {
                for (acc, x) in grad[h].iter_mut().zip(row) {
                    *acc += dz * x;
                }
            }
        }
        for (f, acc) in grad[h].iter_mut().enumerate() {
            if !head_reads(head, f) {
                *acc = 0.0;
            }
        }
    }
    (breakdown, grad)
}

fn mean_breakdown(rows: &[LossBreakdown], active: bool) -> LossBreakdown {
    let n = rows.len() as f64;
    let long: Vec<f64> = rows.iter().filter_map(|r| r.longitudinal).collect();
    LossBreakdown {
        dice: rows.iter().map(|r| r.dice).sum::<f64>() / n,
        longitudinal: (!long.is_empty()).then(|| long.iter().sum::<f64>() / long.len() as f64),
        volumetric: rows.iter().map(|r| r.volumetric).sum::<f64>() / n,
        spatial: rows.iter().map(|r| r.spatial).sum::<f64>() / n,
        total: rows.iter().map(|r| r.total).sum::<f64>() / n,
        active_constraints: active,
    }
}

/// Trains one model on in-memory subjects.
///
/// Every subject contributes its duplicated first window plus each
/// consecutive pair. Windows are shuffled every epoch and processed in
/// batches of `batch_size` with plain gradient descent on the batch mean.
/// Heads without a label in a sample get no Dice gradient from it.
pub fn train_subjects(subjects: &[SubjectData], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if subjects.is_empty() {
        return Err(Error::Argument("no training subjects".into()));
    }
    let samples = build_samples(subjects)?;
    for s in &samples {
        if (0..3).any(|a| cfg.patch_size[a] > s.grid.dims[a]) {
            return Err(Error::Argument(format!(
                "patch {:?} does not fit volume {:?}",
                cfg.patch_size, s.grid.dims
            )));
        }
    }
    let mut rng = seeded(cfg.seed);
    let mut heads = ToyModel::with_bias(cfg.init_bias).heads();
    let switch = cfg.loss.switch_epoch(cfg.epochs);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let active = epoch >= switch;
        order.shuffle(&mut rng);
        let mut rows = Vec::with_capacity(samples.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = [[0.0; N_FEATURES]; 4];
            for &si in batch {
                let s = &samples[si];
                let keep = !s.droppable_prior || cfg.prior_prob >= 1.0 || rng.random_bool(cfg.prior_prob);
                let full = cfg.patch_size == s.grid.dims;
                let (idx, grid) = if full {
                    (None, s.grid.clone())
                } else {
                    let o = [0, 1, 2].map(|a| rng.random_range(0..=s.grid.dims[a] - cfg.patch_size[a]));
                    let g = Grid::new(cfg.patch_size, s.grid.spacing)?;
                    (Some(patch_indices(&s.grid, o, cfg.patch_size)), g)
                };
                let mut features = match &idx {
                    None => s.features.clone(),
                    Some(idx) => idx.iter().map(|&i| s.features[i]).collect(),
                };
                if !keep {
                    features.iter_mut().for_each(|row| row[PRIOR] = 0.0);
                }
                let (labels, wm) = match &idx {
                    None => (s.labels.clone(), s.wm.clone()),
                    Some(idx) => {
                        let crop = |m: &Option<Mask>| m.as_ref().map(|m| crop_mask(m, &grid, idx)).transpose();
                        (
                            Targets {
                                all_t1: crop(&s.labels.all_t1)?,
                                all_t2: crop(&s.labels.all_t2)?,
                                new_t2: crop(&s.labels.new_t2)?,
                                vanishing_t2: crop(&s.labels.vanishing_t2)?,
                            },
                            idx.iter().map(|&i| s.wm[i]).collect(),
                        )
                    }
                };
                let (b, g) = sample_gradient(&heads, &features, &labels, &wm, &grid, &cfg.loss, active, s.kind);
                if !b.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        message: format!("loss became {}", b.total),
                    });
                }
                rows.push(b);
                for h in 0..4 {
                    for f in 0..N_FEATURES {
                        grad[h][f] += g[h][f];
                    }
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for h in 0..4 {
                for f in 0..N_FEATURES {
                    heads[h][f] -= scale * grad[h][f];
                }
            }
            if heads.iter().flatten().any(|w| !w.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    message: "weights became non-finite".into(),
                });
            }
        }
        history.push(mean_breakdown(&rows, active));
    }
    Ok(TrainOutcome {
        model: ToyModel::from_heads(heads),
        history,
    })
}

fn load_train(manifest: &DatasetManifest) -> Result<Vec<SubjectData>> {
    manifest
        .subjects
        .iter()
        .filter(|s| s.split == Split::Train)
        .map(|s| SubjectData::load(manifest, s))
        .collect()
}

/// Trains one model on the manifest's training split.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_subjects(&load_train(manifest)?, cfg)
}

/// Trains `cfg.folds` members, member `k` on the subjects whose index
/// modulo `folds` differs from `k`. With one fold the single member sees
/// every subject. Member seeds are derived from `cfg.seed`.
pub fn train_ensemble_subjects(subjects: &[SubjectData], cfg: &TrainConfig) -> Result<(Ensemble, Vec<TrainOutcome>)> {
    let folds = cfg.folds.max(1);
    let mut outcomes = Vec::with_capacity(folds);
    for k in 0..folds {
        let part: Vec<SubjectData> = if folds == 1 {
            subjects.to_vec()
        } else {
            subjects
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds != k)
                .map(|(_, s)| s.clone())
                .collect()
        };
        if part.is_empty() {
            return Err(Error::Argument(format!(
                "{folds} folds leave member {k} without training subjects ({} subjects)",
                subjects.len()
            )));
        }
        let member_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, k as u64),
            ..*cfg
        };
        outcomes.push(train_subjects(&part, &member_cfg)?);
    }
    let ensemble = Ensemble::new(outcomes.iter().map(|o| o.model.clone()).collect())?;
    Ok((ensemble, outcomes))
}

pub fn train_ensemble(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<(Ensemble, Vec<TrainOutcome>)> {
    train_ensemble_subjects(&load_train(manifest)?, cfg)
}

/// Analytic weight gradient of the total loss for one input, indexed by
/// [`Head::index`]. Masked weights have zero gradient.
pub fn weight_gradient(
    m: &ToyModel,
    input: &ModelInput,
    labels: &Targets,
    cfg: &LossConfig,
    active: bool,
    kind: Format,
) -> Result<(LossBreakdown, [[f64; N_FEATURES]; 4])> {
    m.validate()?;
    cfg.validate()?;
    let grid = input.grid();
    for head in Head::ALL {
        if let Some(y) = labels.get(head) {
            grid.ensure_compatible(y.grid(), head.name())?;
        }
    }
    let features = extract_features(input)?;
    Ok(sample_gradient(&m.heads(), &features, labels, input.wm_t2.data(), grid, cfg, active, kind))
}

/// Finite-difference step for [`grad_check`]. The loss composed with the
/// logistic heads has much larger third derivatives than the loss alone, so
/// the step is smaller than the loss-level one.
pub const CHAINED_FD_STEP: f64 = 1e-4;

/// Largest relative error between the analytic weight gradient and central
/// finite differences, over every weight the heads may read.
pub fn grad_check(
    m: &ToyModel,
    input: &ModelInput,
    labels: &Targets,
    cfg: &LossConfig,
    active: bool,
    kind: Format,
) -> Result<f64> {
    if input.grid().len() > 512 {
        return Err(Error::Argument(format!(
            "grad_check expects at most 8³ voxels, got {:?}",
            input.grid().dims
        )));
    }
    let (_, analytic) = weight_gradient(m, input, labels, cfg, active, kind)?;
    let features = extract_features(input)?;
    let grid = input.grid();
    let free: Vec<(usize, usize)> = Head::ALL
        .iter()
        .flat_map(|&h| (0..N_FEATURES).filter(move |&f| head_reads(h, f)).map(move |f| (h.index(), f)))
        .collect();
    let base = m.heads();
    let x: Vec<f64> = free.iter().map(|&(h, f)| base[h][f]).collect();
    let loss = |w: &[f64]| {
        let mut heads = base;
        for (&(h, f), &v) in free.iter().zip(w) {
            heads[h][f] = v;
        }
        let p = probabilities(&heads, &features);
        let refs = [p[0].as_slice(), p[1].as_slice(), p[2].as_slice(), p[3].as_slice()];
        total_loss_raw(refs, labels, input.wm_t2.data(), grid, cfg, active, kind).0.total
    };
    let numeric = central_difference(loss, &x, CHAINED_FD_STEP);
    let analytic: Vec<f64> = free.iter().map(|&(h, f)| analytic[h][f]).collect();
    Ok(max_relative_error(&analytic, &numeric))
}

/// Finite-difference check of the chained weight gradient over `instances`
/// random 8³ problems, alternating loss modes, sample kinds and curriculum
/// phase.
pub fn run_chained_suite(instances: usize, seed: u64) -> Result<CheckOutcome> {
    let grid = Grid::isotropic([8; 3], 1.0)?;
    let n = grid.len();
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for k in 0..instances {
        let vol = |rng: &mut crate::rng::Rng64| {
            Volume::new(grid.clone(), (0..n).map(|_| rng.random_range(0.0..2.0)).collect())
        };
        let (x_t1, x_t2) = (vol(&mut rng)?, vol(&mut rng)?);
        let mask = |rng: &mut crate::rng::Rng64, d: f64| Mask::from_bools(grid.clone(), (0..n).map(|_| rng.random_bool(d)));
        let input = ModelInput {
            x_t1,
            x_t2,
            y_a_t1: mask(&mut rng, 0.2)?,
            wm_t2: mask(&mut rng, 0.6)?,
            flags: InputFlags::default(),
        };
        let labels = Targets {
            all_t1: Some(mask(&mut rng, 0.15)?),
            all_t2: Some(mask(&mut rng, 0.15)?),
            new_t2: Some(mask(&mut rng, 0.05)?),
            vanishing_t2: Some(mask(&mut rng, 0.05)?),
        };
        let m = ToyModel::from_heads(std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))));
        let cfg = LossConfig {
            xor_mode: if k % 2 == 0 { XorMode::Intent } else { XorMode::AsWritten },
            volume_unit_mm3: 50.0,
            ..LossConfig::default()
        };
        let kind = if k % 4 < 2 { Format::Longitudinal } else { Format::CrossSectional };
        let active = k % 3 != 0;
        worst = worst.max(grad_check(&m, &input, &labels, &cfg, active, kind)?);
    }
    Ok(CheckOutcome::new("toy_model_chained", instances, worst))
}
