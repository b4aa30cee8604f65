use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;

use lesionforge::assembly::{assemble, Prior, RunOptions, SubjectData};
use lesionforge::lesionmix::{balance_dataset, build_bank, SynthConfig};
use lesionforge::losses::gradcheck::{run_loss_suite, REL_TOLERANCE};
use lesionforge::manifest::{parse_manifest, summarize, DatasetManifest, Format, Split};
use lesionforge::metrics::{detection_f1, dice_score, DetectionParams, DetectionReport, OverlapRule};
use lesionforge::phantom::{make_longitudinal, make_phantom, PhantomSeries, PhantomSpec};
use lesionforge::rng::{derive_seed, seeded};
use lesionforge::toytrain::{predict_subject, run_chained_suite, train_ensemble, Ensemble, TrainConfig};
use lesionforge::volume::{load_mask, save_mask, save_nifti, Connectivity};
use lesionforge::{Error, Result};

#[derive(Parser)]
#[command(name = "lesionforge", version, about = "Lesion segmentation toolkit for heterogeneous longitudinal datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    GroundTruth,
    Zero,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Task {
    All,
    New,
    Vanishing,
}

impl Task {
    fn suffix(self) -> &'static str {
        match self {
            Task::All => "all",
            Task::New => "new",
            Task::Vanishing => "vanishing",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Literal,
    LowerOnly,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write the four input channels of one window plus flags.json.
    Assemble {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        out: PathBuf,
        /// 0-based timepoint pair "a,b"; defaults to (0,1), or (0,0) for a single scan.
        #[arg(long, value_parser = parse_pair)]
        pair: Option<(usize, usize)>,
        #[arg(long, value_enum, default_value = "ground-truth")]
        prior: PriorArg,
    },
    /// Finite-difference verification of every loss gradient.
    LossCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pad every dataset's training split with synthesized subjects.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// Split whose lesions fill the bank.
        #[arg(long, value_enum, default_value = "train")]
        bank_from: SplitArg,
        #[arg(long)]
        target_per_dataset: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON or TOML synthesis settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice and lesion-wise detection for every prediction mask, against the
    /// same-named file in the ground-truth directory.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        task: Task,
        #[arg(long, value_enum, default_value = "lower-only")]
        rule: RuleArg,
        #[arg(long, default_value_t = 3.0)]
        min_volume_mm3: f64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate phantom subjects and their manifest.
    Synth {
        /// JSON phantom settings; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, default_value_t = 2)]
        timepoints: usize,
        /// Lowest and highest per-step load ratio, "lo,hi".
        #[arg(long, value_parser = parse_range, default_value = "0.8,1.25")]
        alpha_range: (f64, f64),
        /// The last N subjects go to the test split.
        #[arg(long, default_value_t = 0)]
        test_subjects: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy segmenter on a manifest's training split.
    TrainToy {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON or TOML training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss records of every member.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run a trained model over a manifest and write maps and masks.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Feed zero priors instead of stored or predicted labels.
        #[arg(long)]
        without_prior: bool,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected a,b")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err(format!("{lo} > {hi}"));
    }
    Ok((lo, hi))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Error::Parse {
            pointer: "/".into(),
            message: e.to_string(),
        })
    } else {
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            pointer: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }
}

fn in_split(split: SplitArg, s: Split) -> bool {
    match split {
        SplitArg::All => true,
        SplitArg::Train => s == Split::Train,
        SplitArg::Test => s == Split::Test,
    }
}

fn cmd_assemble(manifest: &Path, id: &str, out: &Path, pair: Option<(usize, usize)>, prior: PriorArg) -> Result<()> {
    let m = parse_manifest(manifest)?;
    let record = m
        .subject(id)
        .ok_or_else(|| Error::Argument(format!("subject {id} not in manifest")))?;
    let subject = SubjectData::load(&m, record)?;
    let pair = pair.unwrap_or(if subject.effective_format() == Format::CrossSectional { (0, 0) } else { (0, 1) });
    let prior = match prior {
        PriorArg::GroundTruth => Prior::GroundTruth,
        PriorArg::Zero => Prior::Zero,
    };
    let input = assemble(&subject, pair, prior, 1.0, &mut seeded(0))?;
    input.save(out)?;
    println!(
        "wrote window ({}, {}) of {id} to {}: {:?}",
        pair.0,
        pair.1,
        out.display(),
        input.flags
    );
    Ok(())
}

fn cmd_loss_check(instances: usize, seed: u64) -> Result<bool> {
    let mut rows = run_loss_suite(instances, seed);
    rows.push(run_chained_suite(instances, derive_seed(seed, 1))?);
    println!("{:<32} {:>9} {:>12}  result (tolerance {REL_TOLERANCE:e})", "gradient", "instances", "max rel err");
    for r in &rows {
        println!(
            "{:<32} {:>9} {:>12.3e}  {}",
            r.name,
            r.instances,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(rows.iter().all(|r| r.passed))
}

fn cmd_augment(
    manifest: &Path,
    bank_from: SplitArg,
    target: usize,
    seed: u64,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let m = parse_manifest(manifest)?;
    let cfg: SynthConfig = match config {
        Some(p) => read_config(p)?,
        None => SynthConfig::default(),
    };
    let mut pairs = Vec::new();
    for record in m.subjects.iter().filter(|s| in_split(bank_from, s.split)) {
        let subject = SubjectData::load(&m, record)?;
        if let Some(tp) = subject.timepoints.iter().find(|tp| tp.all.as_ref().is_some_and(|a| !a.is_empty_mask())) {
            pairs.push((tp.image.clone(), tp.all.clone().expect("checked above")));
        }
    }
    let refs: Vec<_> = pairs.iter().map(|(v, m)| (v, m)).collect();
    let bank = build_bank(&refs, Connectivity::TwentySix)?;
    let outcome = balance_dataset(&m, &bank, target, &cfg, out, &mut seeded(seed))?;
    let path = out.join("manifest.json");
    outcome.manifest.save(&path)?;
    let summary = summarize(&outcome.manifest);
    println!(
        "bank of {} lesions; generated {} subjects; {} training subjects in total; manifest at {}",
        bank.len(),
        outcome.generated.len(),
        summary.total.train.subjects,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ScoreCase {
    case: String,
    dice: f64,
    detection: DetectionReport,
}

#[derive(Serialize)]
struct ScoreReport {
    task: Task,
    params: DetectionParams,
    cases: Vec<ScoreCase>,
    mean_dice: f64,
    mean_f1: f64,
}

fn cmd_score(pred: &Path, gt: &Path, task: Task, rule: RuleArg, min_volume: f64, json: Option<&Path>) -> Result<()> {
    let params = DetectionParams {
        rule: match rule {
            RuleArg::Literal => OverlapRule::Literal,
            RuleArg::LowerOnly => OverlapRule::LowerOnly,
        },
        min_volume_mm3: min_volume,
        ..DetectionParams::default()
    };
    let suffix = format!("_{}.nii.gz", task.suffix());
    // the prediction directory defines the cases
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .map_err(|e| Error::Io {
            path: pred.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(&suffix))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Argument(format!("no *{suffix} files in {}", pred.display())));
    }
    let mut cases = Vec::with_capacity(names.len());
    for name in names {
        let g_path = gt.join(&name);
        if !g_path.exists() {
            return Err(Error::Argument(format!("ground truth {} missing", g_path.display())));
        }
        let g = load_mask(&g_path)?;
        let p_path = pred.join(&name);
        let p = load_mask(&p_path)?;
        cases.push(ScoreCase {
            case: name.trim_end_matches(".nii.gz").to_string(),
            dice: dice_score(&p, &g)?,
            detection: detection_f1(&p, &g, &params)?,
        });
    }
    let n = cases.len() as f64;
    let report = ScoreReport {
        task,
        params,
        mean_dice: cases.iter().map(|c| c.dice).sum::<f64>() / n,
        mean_f1: cases.iter().map(|c| c.detection.f1).sum::<f64>() / n,
        cases,
    };
    for c in &report.cases {
        println!("{:<40} dice {:.4}  f1 {:.4}", c.case, c.dice, c.detection.f1);
    }
    println!("mean dice {:.4}  mean f1 {:.4} over {} cases", report.mean_dice, report.mean_f1, report.cases.len());
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_synth(
    spec: Option<&Path>,
    n: usize,
    t: usize,
    alpha_range: (f64, f64),
    test_subjects: usize,
    out: &Path,
) -> Result<()> {
    if t == 0 || n == 0 {
        return Err(Error::Argument("need at least one subject and one timepoint".into()));
    }
    if test_subjects > n {
        return Err(Error::Argument(format!("{test_subjects} test subjects out of {n}")));
    }
    let base: PhantomSpec = match spec {
        Some(p) => read_config(p)?,
        None => PhantomSpec::default(),
    };
    base.validate()?;
    let out = std::path::absolute(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut manifest = DatasetManifest::new("phantoms", &out);
    let mut rng = seeded(derive_seed(base.seed, 0xA1));
    for k in 0..n {
        let spec = PhantomSpec {
            seed: derive_seed(base.seed, k as u64),
            ..base.clone()
        };
        let series = if t == 1 {
            PhantomSeries::single(make_phantom(&spec)?)
        } else {
            let alphas: Vec<f64> = (1..t).map(|_| rng.random_range(alpha_range.0..=alpha_range.1)).collect();
            make_longitudinal(&spec, &alphas)?
        };
        let split = if k + test_subjects >= n { Split::Test } else { Split::Train };
        manifest.subjects.push(series.write(&out, &format!("phantom{k:03}"), split)?);
    }
    manifest.validate()?;
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    println!("wrote {n} subjects with {t} timepoints; manifest at {}", path.display());
    Ok(())
}

fn cmd_train(manifest: &Path, config: Option<&Path>, out: &Path, history: Option<&Path>) -> Result<()> {
    let m = parse_manifest(manifest)?;
    let cfg = match config {
        Some(p) => TrainConfig::from_path(p)?,
        None => TrainConfig::default(),
    };
    let (ensemble, outcomes) = train_ensemble(&m, &cfg)?;
    ensemble.save(out)?;
    for (k, o) in outcomes.iter().enumerate() {
        if let Some(last) = o.history.last() {
            println!("member {k}: final loss {:.5} (dice {:.5})", last.total, last.dice);
        }
    }
    if let Some(path) = history {
        let rows: Vec<_> = outcomes.iter().map(|o| &o.history).collect();
        write_json(path, &rows)?;
    }
    println!("model with {} members written to {}", ensemble.members.len(), out.display());
    Ok(())
}

fn cmd_predict(model: &Path, manifest: &Path, out: &Path, split: SplitArg, without_prior: bool, threshold: f64) -> Result<()> {
    let e = Ensemble::load(model)?;
    let m = parse_manifest(manifest)?;
    let opts = RunOptions {
        with_prior: !without_prior,
        threshold,
    };
    std::fs::create_dir_all(out).map_err(|err| Error::Io {
        path: out.to_path_buf(),
        source: err,
    })?;
    let mut count = 0;
    for record in m.subjects.iter().filter(|s| in_split(split, s.split)) {
        let subject = SubjectData::load(&m, record)?;
        let outputs = predict_subject(&e, &subject, opts)?;
        for (k, p) in outputs.iter().enumerate() {
            let name = |kind: &str| out.join(format!("{}_tp{k}_{kind}.nii.gz", subject.id));
            save_nifti(&p.s_a_t1, name("all_t1_prob"))?;
            save_nifti(&p.s_a_t2, name("all_prob"))?;
            save_mask(&p.s_a_t2.threshold(threshold), name("all"))?;
            // the first scan has no predecessor, so no change outputs
            if k > 0 {
                save_nifti(&p.s_n_t2, name("new_prob"))?;
                save_nifti(&p.s_v_t2, name("vanishing_prob"))?;
                save_mask(&p.s_n_t2.threshold(threshold), name("new"))?;
                save_mask(&p.s_v_t2.threshold(threshold), name("vanishing"))?;
            }
        }
        count += 1;
    }
    println!("predicted {count} subjects into {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Assemble {
            manifest,
            subject,
            out,
            pair,
            prior,
        } => cmd_assemble(&manifest, &subject, &out, pair, prior).map(|_| true),
        Command::LossCheck { instances, seed } => cmd_loss_check(instances, seed),
        Command::Augment {
            manifest,
            bank_from,
            target_per_dataset,
            seed,
            config,
            out,
        } => cmd_augment(&manifest, bank_from, target_per_dataset, seed, config.as_deref(), &out).map(|_| true),
        Command::Score {
            pred,
            gt,
            task,
            rule,
            min_volume_mm3,
            json,
        } => cmd_score(&pred, &gt, task, rule, min_volume_mm3, json.as_deref()).map(|_| true),
        Command::Synth {
            spec,
            subjects,
            timepoints,
            alpha_range,
            test_subjects,
            out,
        } => cmd_synth(spec.as_deref(), subjects, timepoints, alpha_range, test_subjects, &out).map(|_| true),
        Command::TrainToy {
            manifest,
            config,
            out,
            history,
        } => cmd_train(&manifest, config.as_deref(), &out, history.as_deref()).map(|_| true),
        Command::Predict {
            model,
            manifest,
            out,
            split,
            without_prior,
            threshold,
        } => cmd_predict(&model, &manifest, &out, split, without_prior, threshold).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
