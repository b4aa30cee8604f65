//! Four-channel model input and the sliding temporal window.
//!
//! A model sees `(x_t1, x_t2, y_a_t1, wm_t2)`: two scans, the all-lesion map
//! of the first scan, and the white-matter mask of the second. Missing inputs
//! are substituted: a missing second scan duplicates the first, and a missing
//! first-timepoint label becomes an all-zero map. Series longer than two
//! timepoints are processed as the pairs `(1,1), (1,2), (2,3), ...`.

mod heads;

pub use heads::{Head, PredictionSet, Targets};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Format, SubjectRecord};
use crate::volume::{load_mask, load_nifti, resample, save_mask, save_nifti, Grid, Interpolation, Mask, Volume};

/// Images and labels of one timepoint, loaded onto the subject grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimepointData {
    pub image: Volume,
    pub wm: Option<Mask>,
    pub all: Option<Mask>,
    pub new: Option<Mask>,
    pub vanishing: Option<Mask>,
}

/// A subject with every referenced file loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub format: Format,
    pub timepoints: Vec<TimepointData>,
}

fn onto(grid: &Grid, v: Volume, mode: Interpolation) -> Result<Volume> {
    let v = if v.grid().compatible(grid) {
        v
    } else {
        resample(&v, grid.spacing, mode)?
    };
    grid.ensure_compatible(v.grid(), "timepoint after resampling")?;
    Ok(v)
}

impl SubjectData {
    /// Loads every file of `record`, resampling later timepoints onto the
    /// first image's spacing.
    pub fn load(manifest: &DatasetManifest, record: &SubjectRecord) -> Result<Self> {
        let mut timepoints = Vec::with_capacity(record.timepoints.len());
        let mut grid: Option<Grid> = None;
        for tp in &record.timepoints {
            let image = load_nifti(manifest.resolve(&tp.image))?;
            let g = grid.get_or_insert_with(|| image.grid().clone()).clone();
            let image = onto(&g, image, Interpolation::Trilinear)?;
            let mask = |p: &Option<std::path::PathBuf>| -> Result<Option<Mask>> {
                p.as_ref()
                    .map(|p| {
                        let m = load_mask(manifest.resolve(p))?;
                        Mask::from_volume(&onto(&g, m.to_volume(), Interpolation::Nearest)?)
                    })
                    .transpose()
            };
            timepoints.push(TimepointData {
                wm: mask(&tp.wm)?,
                all: mask(&tp.all)?,
                new: mask(&tp.new)?,
                vanishing: mask(&tp.vanishing)?,
                image,
            });
        }
        Ok(SubjectData {
            id: record.id.clone(),
            format: record.format,
            timepoints,
        })
    }

    pub fn len(&self) -> usize {
        self.timepoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timepoints.is_empty()
    }

    /// Single-timepoint subjects are handled as cross-sectional whatever their label.
    pub fn effective_format(&self) -> Format {
        if self.timepoints.len() < 2 {
            Format::CrossSectional
        } else {
            self.format
        }
    }

    pub fn grid(&self) -> &Grid {
        self.timepoints[0].image.grid()
    }

    /// Ground-truth maps for the heads of `pair`.
    ///
    /// For a duplicated pair `(k, k)` both all-lesion heads target the label
    /// of timepoint `k` and the change heads carry no target.
    pub fn targets(&self, pair: (usize, usize)) -> Result<Targets> {
        let (a, b) = self.check_pair(pair)?;
        let ta = &self.timepoints[a];
        if a == b {
            return Ok(Targets {
                all_t1: ta.all.clone(),
                all_t2: ta.all.clone(),
                new_t2: None,
                vanishing_t2: None,
            });
        }
        let tb = &self.timepoints[b];
        Ok(Targets {
            all_t1: ta.all.clone(),
            all_t2: tb.all.clone(),
            new_t2: tb.new.clone(),
            vanishing_t2: tb.vanishing.clone(),
        })
    }

    /// Sample kind of a pair: duplicated pairs count as cross-sectional.
    pub fn pair_kind(&self, pair: (usize, usize)) -> Format {
        if pair.0 == pair.1 {
            Format::CrossSectional
        } else {
            Format::Longitudinal
        }
    }

    fn check_pair(&self, (a, b): (usize, usize)) -> Result<(usize, usize)> {
        if a > b || b >= self.timepoints.len() {
            return Err(Error::Argument(format!(
                "pair ({a}, {b}) invalid for subject {} with {} timepoints",
                self.id,
                self.timepoints.len()
            )));
        }
        Ok((a, b))
    }

    pub fn plan(&self, with_prior: bool) -> Result<WindowPlan> {
        build_plan(
            self.format,
            self.timepoints.len(),
            self.timepoints.first().is_some_and(|tp| tp.all.is_some()),
            with_prior,
        )
    }
}

/// Records which substitutions produced a [`ModelInput`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFlags {
    pub t2_duplicated: bool,
    pub label_zero_substituted: bool,
    pub label_from_prediction: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub x_t1: Volume,
    pub x_t2: Volume,
    pub y_a_t1: Mask,
    pub wm_t2: Mask,
    pub flags: InputFlags,
}

impl ModelInput {
    pub fn grid(&self) -> &Grid {
        self.x_t1.grid()
    }

    /// Writes the four channels as NIfTI plus `flags.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_nifti(&self.x_t1, dir.join("x_t1.nii.gz"))?;
        save_nifti(&self.x_t2, dir.join("x_t2.nii.gz"))?;
        save_mask(&self.y_a_t1, dir.join("y_a_t1.nii.gz"))?;
        save_mask(&self.wm_t2, dir.join("wm_t2.nii.gz"))?;
        let path = dir.join("flags.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.flags)?).map_err(|e| Error::io(path, e))
    }
}

/// Where the prior all-lesion channel of a window comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    GroundTruth,
    PreviousPrediction,
    Zero,
}

/// Prior channel supplied to [`assemble`].
#[derive(Debug, Clone, Copy)]
pub enum Prior<'a> {
    /// The stored label of the first timepoint, kept with probability `prior_prob`.
    GroundTruth,
    /// A binarized earlier prediction.
    Prediction(&'a Mask),
    Zero,
}

/// Builds the model input for timepoint pair `(a, b)` (0-based, `a <= b`).
///
/// A duplicated pair `(k, k)` always receives a zero prior: its second
/// channel is the first scan itself, so the label would leak the target.
/// With [`Prior::GroundTruth`] the stored label is included with probability
/// `prior_prob`, drawn from `rng`; a probability of 1 consumes no randomness.
pub fn assemble<R: Rng + ?Sized>(
    subject: &SubjectData,
    pair: (usize, usize),
    prior: Prior<'_>,
    prior_prob: f64,
    rng: &mut R,
) -> Result<ModelInput> {
    if !(0.0..=1.0).contains(&prior_prob) {
        return Err(Error::Argument(format!("prior_prob {prior_prob} outside [0, 1]")));
    }
    let (a, b) = subject.check_pair(pair)?;
    let ta = &subject.timepoints[a];
    let tb = &subject.timepoints[b];
    let grid = ta.image.grid();
    let wm = tb.wm.clone().ok_or_else(|| {
        Error::Validation(format!(
            "subject {}: timepoint {b} has no white-matter mask",
            subject.id
        ))
    })?;
    grid.ensure_compatible(tb.image.grid(), "x_t2")?;
    grid.ensure_compatible(wm.grid(), "wm_t2")?;

    let mut flags = InputFlags {
        t2_duplicated: a == b,
        ..Default::default()
    };
    let x_t2 = tb.image.clone();

    let y_a_t1 = match (a == b, prior) {
        (true, _) | (false, Prior::Zero) => None,
        (false, Prior::GroundTruth) => match &ta.all {
            Some(label) if prior_prob >= 1.0 || rng.random_bool(prior_prob) => Some(label.clone()),
            _ => None,
        },
        (false, Prior::Prediction(m)) => {
            flags.label_from_prediction = true;
            Some(m.clone())
        }
    };
    let y_a_t1 = match y_a_t1 {
        Some(m) => {
            grid.ensure_compatible(m.grid(), "y_a_t1")?;
            m
        }
        None => {
            flags.label_zero_substituted = true;
            Mask::empty(grid.clone())
        }
    };

    Ok(ModelInput {
        x_t1: ta.image.clone(),
        x_t2,
        y_a_t1,
        wm_t2: wm,
        flags,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowStep {
    pub a: usize,
    pub b: usize,
    pub prior: PriorSource,
}

/// Ordered timepoint pairs for a series, 0-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub steps: Vec<WindowStep>,
}

impl WindowPlan {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.steps.iter().map(|s| (s.a, s.b)).collect()
    }
}

fn build_plan(format: Format, t: usize, first_label: bool, with_prior: bool) -> Result<WindowPlan> {
    if format == Format::CrossSectional {
        return Err(Error::Argument(
            "window plans apply to longitudinal subjects; a cross-sectional subject is the single pair (1,1)".into(),
        ));
    }
    if t == 0 {
        return Err(Error::Argument("subject has no timepoints".into()));
    }
    let mut steps = vec![WindowStep { a: 0, b: 0, prior: PriorSource::Zero }];
    for b in 1..t {
        let prior = match (with_prior, b) {
            (false, _) => PriorSource::Zero,
            (true, 1) if first_label => PriorSource::GroundTruth,
            (true, _) => PriorSource::PreviousPrediction,
        };
        steps.push(WindowStep { a: b - 1, b, prior });
    }
    Ok(WindowPlan { steps })
}

/// Window plan for a manifest record.
///
/// `with_prior = false` feeds zero priors everywhere. With priors, the second
/// window uses the first timepoint's stored label when there is one, and
/// every later window uses the binarized all-lesion prediction of the window
/// before it.
pub fn plan_windows(subject: &SubjectRecord, with_prior: bool) -> Result<WindowPlan> {
    build_plan(
        subject.format,
        subject.timepoints.len(),
        subject.timepoints.first().is_some_and(|tp| tp.all.is_some()),
        with_prior,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub with_prior: bool,
    /// Threshold used to binarize predictions fed forward as priors.
    pub threshold: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            with_prior: true,
            threshold: 0.5,
        }
    }
}

/// Runs `model` over every window of a subject, in timepoint order.
///
/// Element `k` of the result is the prediction set of the window whose
/// second timepoint is `k`.
pub fn run_subject<F>(subject: &SubjectData, mut model: F, opts: RunOptions) -> Result<Vec<PredictionSet>>
where
    F: FnMut(&ModelInput) -> Result<PredictionSet>,
{
    let mut call = |input: &ModelInput| -> Result<PredictionSet> {
        let out = model(input)?;
        out.check()?;
        input
            .grid()
            .ensure_compatible(out.s_a_t1.grid(), "model output")
            .map_err(|e| Error::Contract(e.to_string()))?;
        Ok(out)
    };
    // no stochastic choices are made at inference; the generator is never drawn from
    let mut rng = crate::rng::seeded(0);

    if subject.effective_format() == Format::CrossSectional {
        let input = assemble(subject, (0, 0), Prior::Zero, 1.0, &mut rng)?;
        return Ok(vec![call(&input)?]);
    }

    let plan = subject.plan(opts.with_prior)?;
    let mut outputs: Vec<PredictionSet> = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        let previous = match (step.prior, outputs.last()) {
            (PriorSource::PreviousPrediction, Some(prev)) => {
                let map = if outputs.len() == 1 { &prev.s_a_t1 } else { &prev.s_a_t2 };
                Some(map.threshold(opts.threshold))
            }
            _ => None,
        };
        let prior = match step.prior {
            PriorSource::Zero => Prior::Zero,
            PriorSource::GroundTruth => Prior::GroundTruth,
            PriorSource::PreviousPrediction => match &previous {
                Some(m) => Prior::Prediction(m),
                None => Prior::Zero,
            },
        };
        let input = assemble(subject, (step.a, step.b), prior, 1.0, &mut rng)?;
        outputs.push(call(&input)?);
    }
    Ok(outputs)
}
