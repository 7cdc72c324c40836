//! Subcommand implementations.

use std::path::{Path, PathBuf};

use log::{info, warn};
use qup_core::phantom::{simulate_dwi, synthetic_scheme, two_bar_phantom};
use qup_core::pipeline::checkpoint::Checkpoint;
use qup_core::pipeline::config::TrainConfig;
use qup_core::pipeline::dataset::{subject_dirs, BuildOptions, DatasetManifest, Split};
use qup_core::pipeline::evaluate::{evaluate_sets, GenerationInfo};
use qup_core::pipeline::train::{smoothed, train_to_dir, TrainFiles};
use qup_core::pipeline::upsample::{upsample_volume, UpsampleOptions};
use qup_core::qspace::{parse_directions, GradientScheme};
use qup_core::registry::{MethodRegistry, ModelSource};
use qup_core::rng::derive_seed;
use qup_core::tensorfit::{colored_fa, fit_set};
use qup_core::volume::DwiSet;
use qup_core::{Error, Result};
use serde::Serialize;

use crate::cli::{BuildArgs, Command, DatasetCommand, EvaluateArgs, ExportLowArgs, GenerateArgs, PhantomArgs, TrainArgs};

/// Name of the resolved-settings copy written next to a command's outputs.
pub const RESOLVED: &str = "resolved.json";
pub const TARGET_BVALS: &str = "targets.bvals";
pub const TARGET_BVECS: &str = "targets.bvecs";

pub fn run(command: Command) -> Result<()> {
    let registry = MethodRegistry::builtin();
    match command {
        Command::Phantom(a) => phantom(&a),
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(&a),
        Command::Dataset(DatasetCommand::ExportLow(a)) => export_low(&a),
        Command::Train(a) => train(&registry, &a),
        Command::Generate(a) => generate(&registry, &a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Methods => {
            for m in registry.iter() {
                let kind = if m.trainable() { "trained" } else { "untrained" };
                println!("{:<10} {:<10} {}", m.name(), kind, m.description());
            }
            Ok(())
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(io(path))
}

#[derive(Serialize)]
struct PhantomSettings {
    shape: [usize; 3],
    snr: Option<f64>,
    seed: u64,
    directions: usize,
    b0: usize,
    bvalue: f64,
    subjects: Vec<PhantomSubject>,
}

#[derive(Serialize)]
struct PhantomSubject {
    id: String,
    field_seed: u64,
    noise_seed: u64,
}

fn phantom(a: &PhantomArgs) -> Result<()> {
    if a.subjects == 0 {
        return Err(Error::Validation("--subjects must be at least 1".into()));
    }
    if a.snr.is_nan() || a.snr < 0.0 {
        return Err(Error::Validation(format!("--snr must be non-negative, got {}", a.snr)));
    }
    let snr = (a.snr > 0.0).then_some(a.snr);
    let scheme = synthetic_scheme(a.directions, a.b0, a.bvalue)?;
    let mut subjects = Vec::with_capacity(a.subjects);
    for i in 0..a.subjects {
        let (id, dir) = if a.subjects == 1 {
            (a.out.file_name().map_or_else(|| "subject".into(), |n| n.to_string_lossy().into_owned()), a.out.clone())
        } else {
            let id = format!("subject_{i:02}");
            (id.clone(), a.out.join(id))
        };
        let field_seed = derive_seed(a.seed, &[i as u64, 0]);
        let noise_seed = derive_seed(a.seed, &[i as u64, 1]);
        let field = two_bar_phantom(a.shape, field_seed)?;
        DwiSet::new(simulate_dwi(&field, &scheme, snr, noise_seed)?)?.write(&dir)?;
        info!("wrote {} volumes of {:?} to {}", scheme.len(), a.shape, dir.display());
        subjects.push(PhantomSubject { id, field_seed, noise_seed });
    }
    let settings = PhantomSettings {
        shape: a.shape,
        snr,
        seed: a.seed,
        directions: a.directions,
        b0: a.b0,
        bvalue: a.bvalue,
        subjects,
    };
    write_json(&a.out.join("phantom.json"), &settings)
}

fn dataset_build(a: &BuildArgs) -> Result<()> {
    let dwi = std::fs::canonicalize(&a.dwi).map_err(io(&a.dwi))?;
    let options = BuildOptions { k_low: a.k_low, references: a.refs, seed: a.seed, metric: a.metric.into(), split: a.split };
    let manifest = DatasetManifest::build_from_dir(&dwi, options)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    manifest.write(&a.out)?;
    let count = |s: Split| manifest.subjects_in(s).count();
    info!(
        "{} low and {} target directions, {} records per subject, subjects {}/{}/{} (train/val/test)",
        manifest.plan.low.len(),
        manifest.plan.targets.len(),
        manifest.records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn export_low(a: &ExportLowArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let chosen: Vec<(PathBuf, PathBuf)> = match (&a.subject, a.split) {
        (Some(id), _) => {
            let s = manifest
                .subjects
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Validation(format!("manifest has no subject '{id}'")))?;
            vec![(s.path.clone(), a.out.clone())]
        }
        (None, Some(split)) => manifest.subjects_in(split).map(|s| (s.path.clone(), a.out.join(&s.id))).collect(),
        (None, None) => return Err(Error::Validation("pass --subject or --split".into())),
    };
    if chosen.is_empty() {
        return Err(Error::Validation("no subjects selected".into()));
    }
    let targets = manifest.target_scheme();
    for (src, dst) in chosen {
        manifest.low_set(&DwiSet::read(&src)?)?.write(&dst)?;
        targets.write(&dst.join(TARGET_BVALS), &dst.join(TARGET_BVECS))?;
        info!("exported {} to {}", src.display(), dst.display());
    }
    Ok(())
}

fn train(registry: &MethodRegistry, a: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let config = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    let name = a.method.as_deref().or(config.method.as_deref()).ok_or_else(|| {
        Error::Config("no method given; pass --method or set \"method\" in the config".into())
    })?;
    let method = registry.get(name)?;
    let resume = a.resume.as_deref().map(Checkpoint::read).transpose()?;
    let outcome = train_to_dir(&manifest, method, &config, &a.out, resume.as_ref())?;
    let losses: Vec<f64> = outcome.losses.iter().map(|r| r.loss).collect();
    if let Some(last) = smoothed(&losses, 50).last() {
        info!("final smoothed loss {last:.5}");
    }
    if let Some(v) = outcome.validation.last() {
        info!("final validation SSIM {:.4}", v.ssim);
    }
    let files = TrainFiles { dir: a.out.clone() };
    println!("{}", files.latest().display());
    Ok(())
}

#[derive(Serialize)]
struct GenerateSettings<'a> {
    method: &'a str,
    references: usize,
    checkpoint: Option<String>,
    low: String,
    targets: String,
    target_bvals: Option<String>,
    seed: u64,
    chunk: usize,
    metric: qup_core::qspace::DistanceMetric,
}

/// The target scheme, taking b-values from a file or from the single
/// weighted shell of the acquired set.
fn read_targets(a: &GenerateArgs, low: &DwiSet) -> Result<GradientScheme> {
    if let Some(bvals) = &a.target_bvals {
        return GradientScheme::read(bvals, &a.targets);
    }
    let text = std::fs::read_to_string(&a.targets).map_err(io(&a.targets))?;
    let dirs = parse_directions(&text)?;
    let mut shells: Vec<f64> = low.weighted().iter().map(|&i| low.volumes[i].bvalue).collect();
    shells.sort_by(f64::total_cmp);
    shells.dedup_by(|x, y| (*x - *y).abs() <= 1e-6 * x.abs().max(1.0));
    match shells.as_slice() {
        [b] => GradientScheme::shell(dirs, *b),
        [] => Err(Error::Validation("the low-resolution set has no weighted volumes".into())),
        _ => Err(Error::Validation("the low-resolution set has several shells; pass --target-bvals".into())),
    }
}

fn generate(registry: &MethodRegistry, a: &GenerateArgs) -> Result<()> {
    if let Some(m) = &a.method {
        registry.get(m)?;
    }
    let low = DwiSet::read(&a.low)?;
    let targets = read_targets(a, &low)?;
    let checkpoint = a.checkpoint.as_deref().map(Checkpoint::read).transpose()?;
    let upsampler = match (&checkpoint, a.method.as_deref()) {
        (Some(c), requested) => {
            if let Some(m) = requested.filter(|m| *m != c.method) {
                return Err(Error::Config(format!("--method {m} disagrees with the checkpoint's method '{}'", c.method)));
            }
            let up = registry.get(&c.method)?.upsampler(ModelSource::Checkpoint(c))?;
            if let Some(r) = a.refs.filter(|&r| r != up.references()) {
                return Err(Error::Config(format!("--refs {r} disagrees with the checkpoint's {} references", up.references())));
            }
            up
        }
        (None, Some(m)) => registry.get(m)?.upsampler(ModelSource::Untrained { references: a.refs.unwrap_or(3) })?,
        (None, None) => return Err(Error::Config("pass --checkpoint or --method".into())),
    };
    let options = UpsampleOptions { metric: a.metric.into(), chunk: a.chunk, ..UpsampleOptions::default() };
    let result = upsample_volume(&low, &targets, upsampler.as_ref(), a.seed, &options)?;
    result.set.write(&a.out)?;
    let display = |p: &Path| p.display().to_string();
    let info = GenerationInfo {
        method: upsampler.method().to_string(),
        references: upsampler.references(),
        seed: a.seed,
        checkpoint: a.checkpoint.as_deref().map(display),
        generated: result.set.len() - low.len(),
        passed_through: result.passed_through.len(),
    };
    info.write(&a.out)?;
    let settings = GenerateSettings {
        method: upsampler.method(),
        references: upsampler.references(),
        checkpoint: a.checkpoint.as_deref().map(display),
        low: display(&a.low),
        targets: display(&a.targets),
        target_bvals: a.target_bvals.as_deref().map(display),
        seed: a.seed,
        chunk: a.chunk,
        metric: options.metric,
    };
    write_json(&a.out.join(RESOLVED), &settings)?;
    info!("wrote {} volumes ({} generated) to {}", result.set.len(), info.generated, a.out.display());
    Ok(())
}

/// Pairs predicted and true subject directories by name, or the two
/// directories themselves when `pred` holds a single subject.
fn subject_pairs(pred: &Path, truth: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if pred.join("bvals").is_file() {
        let name = pred.file_name().map_or_else(|| "subject".into(), |n| n.to_string_lossy().into_owned());
        let t = if truth.join("bvals").is_file() { truth.to_path_buf() } else { truth.join(&name) };
        return Ok(vec![(name, pred.to_path_buf(), t)]);
    }
    subject_dirs(pred)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            let t = truth.join(&name);
            if !t.join("bvals").is_file() {
                return Err(Error::Validation(format!("no true subject '{name}' under {}", truth.display())));
            }
            Ok((name, p, t))
        })
        .collect()
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let pairs = subject_pairs(&a.pred, &a.truth)?;
    let recorded = GenerationInfo::read(&pairs[0].1)?;
    let method = a.method.clone().or_else(|| recorded.as_ref().map(|g| g.method.clone())).unwrap_or_else(|| "unknown".into());
    let refs = a.refs.or(recorded.as_ref().map(|g| g.references)).unwrap_or(0);
    let mut sets = Vec::with_capacity(pairs.len());
    for (name, p, t) in &pairs {
        let (pred, truth) = (DwiSet::read(p)?, DwiSet::read(t)?);
        if let Some(dir) = &a.fa_png {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
            for (label, set) in [("pred", &pred), ("truth", &truth)] {
                let fa = colored_fa(&fit_set(set)?);
                fa.write_color_png(fa.shape[2] / 2, &dir.join(format!("{name}_{label}_fa.png")))?;
            }
        }
        sets.push((pred, truth));
    }
    if sets.iter().any(|(p, _)| p.volumes.iter().all(|v| v.source.is_none())) {
        warn!("a predicted set records no generated volumes; only FA scores will reflect it");
    }
    let report = evaluate_sets(&sets, &method, refs)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    report.write_json(&a.report)?;
    print!("{}", qup_core::metrics::EvaluationReport::table(std::slice::from_ref(&report)));
    Ok(())
}
