//! Dataset manifests: which images and labels each subject provides.
//!
//! A manifest is a JSON document (schema version 1). Paths inside it are
//! resolved relative to the directory containing the manifest file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Add;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::read_grid;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    CrossSectional,
    Longitudinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Which label maps a subject carries.
///
/// `all_t1` refers to the first timepoint; the `*_t2` flags refer to the
/// later timepoints of a longitudinal subject.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelAvailability {
    pub all_t1: bool,
    pub all_t2: bool,
    pub new_t2: bool,
    pub vanishing_t2: bool,
}

impl LabelAvailability {
    pub fn full() -> Self {
        LabelAvailability {
            all_t1: true,
            all_t2: true,
            new_t2: true,
            vanishing_t2: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimepointRecord {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wm: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanishing: Option<PathBuf>,
}

impl TimepointRecord {
    fn paths(&self) -> impl Iterator<Item = (&'static str, &PathBuf)> {
        [
            ("image", Some(&self.image)),
            ("wm", self.wm.as_ref()),
            ("all", self.all.as_ref()),
            ("new", self.new.as_ref()),
            ("vanishing", self.vanishing.as_ref()),
        ]
        .into_iter()
        .filter_map(|(k, p)| p.map(|p| (k, p)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    /// Source dataset when a manifest pools several; defaults to the manifest name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    pub format: Format,
    pub availability: LabelAvailability,
    pub split: Split,
    pub timepoints: Vec<TimepointRecord>,
}

impl SubjectRecord {
    pub fn is_longitudinal(&self) -> bool {
        self.format == Format::Longitudinal
    }

    /// Checks the record-level invariants, pushing one message per problem.
    fn check(&self, issues: &mut Vec<String>) {
        let id = &self.id;
        let t = self.timepoints.len();
        match self.format {
            Format::CrossSectional if t != 1 => {
                issues.push(format!("subject {id}: cross_sectional needs exactly 1 timepoint, has {t}"))
            }
            Format::Longitudinal if t < 2 => {
                issues.push(format!("subject {id}: longitudinal needs at least 2 timepoints, has {t}"))
            }
            _ => {}
        }
        let a = self.availability;
        if (a.new_t2 || a.vanishing_t2 || a.all_t2) && !self.is_longitudinal() {
            issues.push(format!(
                "subject {id}: second-timepoint labels require a longitudinal subject"
            ));
        }
        if let Some(first) = self.timepoints.first() {
            if a.all_t1 != first.all.is_some() {
                issues.push(format!(
                    "subject {id}: all_t1 = {} but first timepoint {} an `all` label",
                    a.all_t1,
                    if first.all.is_some() { "has" } else { "lacks" }
                ));
            }
            if first.new.is_some() || first.vanishing.is_some() {
                issues.push(format!(
                    "subject {id}: new/vanishing labels are not defined at the first timepoint"
                ));
            }
        }
        let later = self.timepoints.iter().skip(1);
        let flags = [
            ("all_t2", a.all_t2, later.clone().any(|tp| tp.all.is_some())),
            ("new_t2", a.new_t2, later.clone().any(|tp| tp.new.is_some())),
            ("vanishing_t2", a.vanishing_t2, later.clone().any(|tp| tp.vanishing.is_some())),
        ];
        for (name, flag, present) in flags {
            if self.is_longitudinal() && flag != present {
                issues.push(format!(
                    "subject {id}: {name} = {flag} but later timepoints {} such labels",
                    if present { "carry" } else { "carry no" }
                ));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema: u32,
    pub name: String,
    pub subjects: Vec<SubjectRecord>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            schema: SCHEMA_VERSION,
            name: name.into(),
            subjects: Vec::new(),
            root: root.into(),
        }
    }

    /// Parses and checks structural invariants only (no filesystem access).
    pub fn from_json_str(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut m: DatasetManifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            pointer: json_pointer(&e.path().to_string()),
            message: e.inner().to_string(),
        })?;
        m.root = root.into();
        let mut issues = Vec::new();
        m.check_structure(&mut issues);
        into_result(issues)?;
        Ok(m)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }

    pub fn dataset_of<'a>(&'a self, s: &'a SubjectRecord) -> &'a str {
        s.dataset.as_deref().unwrap_or(&self.name)
    }

    fn check_structure(&self, issues: &mut Vec<String>) {
        if self.schema != SCHEMA_VERSION {
            issues.push(format!(
                "unsupported schema version {}, expected {SCHEMA_VERSION}",
                self.schema
            ));
        }
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                issues.push(format!("duplicate subject id {}", s.id));
            }
            s.check(issues);
        }
    }

    /// Checks that every referenced file exists and that grids agree.
    ///
    /// Within a timepoint the image, white-matter mask and labels must share
    /// one lattice. Across timepoints the physical extents must agree to
    /// within one voxel, so the series can be resampled onto a common grid.
    fn check_files(&self, issues: &mut Vec<String>) {
        let mut missing = Vec::new();
        for s in &self.subjects {
            for tp in &s.timepoints {
                for (_, p) in tp.paths() {
                    let full = self.resolve(p);
                    if !full.exists() {
                        missing.push(full.display().to_string());
                    }
                }
            }
        }
        if !missing.is_empty() {
            issues.push(format!("missing files:\n  {}", missing.join("\n  ")));
            return;
        }
        for s in &self.subjects {
            let mut first_extent: Option<([f64; 3], [f64; 3])> = None;
            for (k, tp) in s.timepoints.iter().enumerate() {
                let image_grid = match read_grid(self.resolve(&tp.image)) {
                    Ok(g) => g,
                    Err(e) => {
                        issues.push(format!("subject {} timepoint {k}: {e}", s.id));
                        continue;
                    }
                };
                for (kind, p) in tp.paths().skip(1) {
                    match read_grid(self.resolve(p)) {
                        Ok(g) if !g.compatible(&image_grid) => issues.push(format!(
                            "subject {} timepoint {k}: {kind} grid {:?} differs from image grid {:?}",
                            s.id, g.dims, image_grid.dims
                        )),
                        Ok(_) => {}
                        Err(e) => issues.push(format!("subject {} timepoint {k}: {e}", s.id)),
                    }
                }
                let extent = image_grid.extent_mm();
                match first_extent {
                    None => first_extent = Some((extent, image_grid.spacing)),
                    Some((e0, sp0)) => {
                        for a in 0..3 {
                            let tol = sp0[a].max(image_grid.spacing[a]);
                            if (extent[a] - e0[a]).abs() > tol {
                                issues.push(format!(
                                    "subject {} timepoint {k}: extent {:?} mm incompatible with {:?} mm",
                                    s.id, extent, e0
                                ));
                                break;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Runs every structural and filesystem check, reporting all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        self.check_structure(&mut issues);
        self.check_files(&mut issues);
        into_result(issues)
    }

    /// Subjects tagged with their dataset, with every path made absolute.
    pub fn tagged_subjects(&self) -> Vec<SubjectRecord> {
        let abs = |p: &Path| {
            let p = self.resolve(p);
            std::path::absolute(&p).unwrap_or(p)
        };
        self.subjects
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.dataset = Some(self.dataset_of(&s).to_string());
                for tp in &mut s.timepoints {
                    tp.image = abs(&tp.image);
                    for p in [&mut tp.wm, &mut tp.all, &mut tp.new, &mut tp.vanishing]
                        .into_iter()
                        .flatten()
                    {
                        *p = abs(p);
                    }
                }
                s
            })
            .collect()
    }

    /// Pools two manifests; subjects keep their dataset tags and absolute paths.
    pub fn concat(&self, other: &DatasetManifest) -> DatasetManifest {
        let mut subjects = self.tagged_subjects();
        subjects.extend(other.tagged_subjects());
        DatasetManifest {
            schema: SCHEMA_VERSION,
            name: format!("{}+{}", self.name, other.name),
            subjects,
            root: self.root.clone(),
        }
    }
}

fn into_result(issues: Vec<String>) -> Result<()> {
    if issues.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(issues.join("\n")))
    }
}

/// Converts a serde path like `subjects[0].format` to `/subjects/0/format`.
fn json_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        if let Some(idx) = rest.find('[') {
            if idx > 0 {
                out.push('/');
                out.push_str(&rest[..idx]);
            }
            rest = &rest[idx..];
            while let Some(stripped) = rest.strip_prefix('[') {
                let end = stripped.find(']').unwrap_or(stripped.len());
                out.push('/');
                out.push_str(&stripped[..end]);
                rest = stripped.get(end + 1..).unwrap_or("");
            }
        } else if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// Reads, parses and fully validates a manifest file.
pub fn parse_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = DatasetManifest::from_json_str(&text, root)?;
    m.validate()?;
    Ok(m)
}

/// Subject, scan and label-flag counts for one split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub subjects: usize,
    pub scans: usize,
    pub cross_sectional: usize,
    pub longitudinal: usize,
    pub all_t1: usize,
    pub all_t2: usize,
    pub new_t2: usize,
    pub vanishing_t2: usize,
}

impl Add for SplitCounts {
    type Output = SplitCounts;

    fn add(self, o: SplitCounts) -> SplitCounts {
        SplitCounts {
            subjects: self.subjects + o.subjects,
            scans: self.scans + o.scans,
            cross_sectional: self.cross_sectional + o.cross_sectional,
            longitudinal: self.longitudinal + o.longitudinal,
            all_t1: self.all_t1 + o.all_t1,
            all_t2: self.all_t2 + o.all_t2,
            new_t2: self.new_t2 + o.new_t2,
            vanishing_t2: self.vanishing_t2 + o.vanishing_t2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub train: SplitCounts,
    pub test: SplitCounts,
}

impl Add for DatasetCounts {
    type Output = DatasetCounts;

    fn add(self, o: DatasetCounts) -> DatasetCounts {
        DatasetCounts {
            train: self.train + o.train,
            test: self.test + o.test,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub datasets: BTreeMap<String, DatasetCounts>,
    pub total: DatasetCounts,
}

pub fn summarize(m: &DatasetManifest) -> Summary {
    let mut out = Summary::default();
    for s in &m.subjects {
        let c = SplitCounts {
            subjects: 1,
            scans: s.timepoints.len(),
            cross_sectional: (s.format == Format::CrossSectional) as usize,
            longitudinal: s.is_longitudinal() as usize,
            all_t1: s.availability.all_t1 as usize,
            all_t2: s.availability.all_t2 as usize,
            new_t2: s.availability.new_t2 as usize,
            vanishing_t2: s.availability.vanishing_t2 as usize,
        };
        let d = match s.split {
            Split::Train => DatasetCounts { train: c, ..Default::default() },
            Split::Test => DatasetCounts { test: c, ..Default::default() },
        };
        let entry = out.datasets.entry(m.dataset_of(s).to_string()).or_default();
        *entry = *entry + d;
        out.total = out.total + d;
    }
    out
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>9} {:>9} {:>11} {:>10} {:>6} {:>6} {:>6} {:>6}",
            "dataset", "train", "test", "train_scans", "test_scans", "Ya_t1", "Ya_t2", "Yn_t2", "Yv_t2"
        )?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, c: &DatasetCounts| {
            let both = c.train + c.test;
            writeln!(
                f,
                "{:<16} {:>9} {:>9} {:>11} {:>10} {:>6} {:>6} {:>6} {:>6}",
                name,
                c.train.subjects,
                c.test.subjects,
                c.train.scans,
                c.test.scans,
                both.all_t1,
                both.all_t2,
                both.new_t2,
                both.vanishing_t2
            )
        };
        for (name, c) in &self.datasets {
            row(f, name, c)?;
        }
        row(f, "Total", &self.total)
    }
}
