//! Padding each dataset's training split with synthesized longitudinal subjects.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use super::{synth_longitudinal, AugmentPlan, LesionBank, SynthConfig};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Format, LabelAvailability, Split, SubjectRecord, TimepointRecord, SCHEMA_VERSION};
use crate::rng::seeded;
use crate::volume::{load_mask, load_nifti, save_mask, save_nifti, Mask, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceOutcome {
    /// Input subjects with absolute paths plus the generated ones, rooted at the output directory.
    pub manifest: DatasetManifest,
    pub generated: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum LabelKind {
    All,
    New,
    Vanishing,
}

/// Image, white matter and lesion map a generated subject starts from.
#[derive(Debug, Clone)]
struct Source {
    subject: String,
    timepoint: usize,
    kind: LabelKind,
    image: PathBuf,
    wm: PathBuf,
    label: PathBuf,
}

/// Picks the first timepoint with an all-lesion label. Without one, a
/// new-lesion label marks lesions visible in its own scan, and a
/// vanishing-lesion label marks lesions visible in the previous scan.
fn find_source(s: &SubjectRecord) -> Option<Source> {
    let tps = &s.timepoints;
    let make = |img: usize, kind: LabelKind, label: &PathBuf| {
        Some(Source {
            subject: s.id.clone(),
            timepoint: img,
            kind,
            image: tps[img].image.clone(),
            wm: tps[img].wm.clone()?,
            label: label.clone(),
        })
    };
    let by_all = tps.iter().enumerate().find_map(|(k, tp)| make(k, LabelKind::All, tp.all.as_ref()?));
    let by_new = || tps.iter().enumerate().find_map(|(k, tp)| make(k, LabelKind::New, tp.new.as_ref()?));
    let by_vanishing = || {
        tps.iter()
            .enumerate()
            .skip(1)
            .find_map(|(k, tp)| make(k - 1, LabelKind::Vanishing, tp.vanishing.as_ref()?))
    };
    by_all.or_else(by_new).or_else(by_vanishing)
}

#[derive(Serialize)]
struct PlanRecord<'a> {
    source_subject: &'a str,
    source_timepoint: usize,
    label_kind: LabelKind,
    seed: u64,
    plan: &'a AugmentPlan,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Pads every dataset's training split to `per_dataset_target` subjects.
///
/// Each generated subject has two timepoints: a source scan with its lesion
/// map, and a synthesized follow-up with all, new and vanishing labels, so
/// all four availability flags hold. Files go to `out_dir` as
/// `<id>_tp<k>_<kind>.nii.gz` plus `<id>_plan.json`.
pub fn balance_dataset<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    bank: &LesionBank,
    per_dataset_target: usize,
    cfg: &SynthConfig,
    out_dir: &Path,
    rng: &mut R,
) -> Result<BalanceOutcome> {
    cfg.validate()?;
    let subjects = manifest.tagged_subjects();
    let mut by_dataset: BTreeMap<String, Vec<&SubjectRecord>> = BTreeMap::new();
    for s in &subjects {
        let entry = by_dataset.entry(manifest.dataset_of(s).to_string()).or_default();
        if s.split == Split::Train {
            entry.push(s);
        }
    }
    for (name, train) in &by_dataset {
        if train.len() > per_dataset_target {
            return Err(Error::Argument(format!(
                "dataset {name} already has {} training subjects, above target {per_dataset_target}",
                train.len()
            )));
        }
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out_dir = std::path::absolute(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut ids: HashSet<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let mut generated_records = Vec::new();
    let mut generated = Vec::new();

    for (name, train) in &by_dataset {
        let need = per_dataset_target - train.len();
        if need == 0 {
            continue;
        }
        let sources: Vec<Source> = train.iter().filter_map(|s| find_source(s)).collect();
        if sources.is_empty() {
            return Err(Error::Validation(format!(
                "dataset {name} has no training subject with a lesion label and white-matter mask"
            )));
        }
        let mut loaded: Vec<Option<(Volume, Mask, Mask)>> = vec![None; sources.len()];
        let mut k = 0usize;
        for n in 0..need {
            let si = n % sources.len();
            let src = &sources[si];
            if loaded[si].is_none() {
                let image = load_nifti(&src.image)?;
                let wm = load_mask(&src.wm)?;
                let label = load_mask(&src.label)?;
                image.grid().ensure_compatible(wm.grid(), "source white matter")?;
                image.grid().ensure_compatible(label.grid(), "source label")?;
                if label.is_empty_mask() {
                    return Err(Error::Validation(format!(
                        "source {} timepoint {} has an empty lesion label",
                        src.subject, src.timepoint
                    )));
                }
                loaded[si] = Some((image, wm, label));
            }
            let (image, wm, label) = loaded[si].as_ref().expect("loaded above");

            let id = loop {
                let candidate = format!("{name}_aug{k:03}");
                k += 1;
                if ids.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let seed: u64 = rng.random();
            let res = synth_longitudinal(image, label, bank, wm, cfg, &mut seeded(seed))?;

            let file = |tp: usize, kind: &str| PathBuf::from(format!("{id}_tp{tp}_{kind}.nii.gz"));
            let tp0_all = if src.kind == LabelKind::All {
                src.label.clone()
            } else {
                let p = file(0, "all");
                save_mask(label, out_dir.join(&p))?;
                p
            };
            save_nifti(&res.image, out_dir.join(file(1, "image")))?;
            save_mask(&res.all, out_dir.join(file(1, "all")))?;
            save_mask(&res.new, out_dir.join(file(1, "new")))?;
            save_mask(&res.vanishing, out_dir.join(file(1, "vanishing")))?;
            write_json(
                &out_dir.join(format!("{id}_plan.json")),
                &PlanRecord {
                    source_subject: &src.subject,
                    source_timepoint: src.timepoint,
                    label_kind: src.kind,
                    seed,
                    plan: &res.plan,
                },
            )?;

            generated_records.push(SubjectRecord {
                id: id.clone(),
                dataset: Some(name.clone()),
                format: Format::Longitudinal,
                availability: LabelAvailability::full(),
                split: Split::Train,
                timepoints: vec![
                    TimepointRecord {
                        image: src.image.clone(),
                        wm: Some(src.wm.clone()),
                        all: Some(tp0_all),
                        new: None,
                        vanishing: None,
                    },
                    TimepointRecord {
                        image: file(1, "image"),
                        wm: Some(src.wm.clone()),
                        all: Some(file(1, "all")),
                        new: Some(file(1, "new")),
                        vanishing: Some(file(1, "vanishing")),
                    },
                ],
            });
            generated.push(id);
        }
    }

    let mut all_subjects = subjects;
    all_subjects.extend(generated_records);
    Ok(BalanceOutcome {
        manifest: DatasetManifest {
            schema: SCHEMA_VERSION,
            name: manifest.name.clone(),
            subjects: all_subjects,
            root: out_dir,
        },
        generated,
    })
}
