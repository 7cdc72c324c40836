use qup_core::diffusion::{ConditioningSample, ScheduleParams};
use qup_core::phantom::{simulate_dwi, synthetic_scheme, two_bar_phantom};
use qup_core::pipeline::checkpoint::Checkpoint;
use qup_core::pipeline::config::TrainConfig;
use qup_core::pipeline::dataset::{build_dataset, BuildOptions, DatasetManifest, Split};
use qup_core::pipeline::train::{read_loss_log, smoothed, train_samples, train_to_dir, LossRecord, TrainFiles};
use qup_core::registry::{MethodRegistry, ModelSource, SliceRequest};
use qup_core::volume::DwiSet;
use qup_core::Error;

fn phantom_set(shape: [usize; 3], seed: u64) -> DwiSet {
    let scheme = synthetic_scheme(30, 1, 1000.0).unwrap();
    let field = two_bar_phantom(shape, seed).unwrap();
    DwiSet::new(simulate_dwi(&field, &scheme, Some(20.0), seed + 100).unwrap()).unwrap()
}

fn samples(shape: [usize; 3], r: usize) -> Vec<ConditioningSample> {
    let set = phantom_set(shape, 1);
    build_dataset(&set, 10, r, 0).unwrap().samples_of(&set).unwrap()
}

fn quiet(config: TrainConfig) -> TrainConfig {
    TrainConfig { log_every: 0, ..config }
}

fn run(method: &str, config: &TrainConfig, data: &[ConditioningSample], resume: Option<&Checkpoint>) -> (Checkpoint, Vec<LossRecord>) {
    let registry = MethodRegistry::builtin();
    let m = registry.get(method).unwrap();
    let config = config.resolve(Some(method), 3).unwrap();
    let out = train_samples(m, &config, data, &[], resume, &mut |_| Ok(())).unwrap();
    (out.checkpoint, out.losses)
}

#[test]
fn diffusion_loss_falls_on_ten_fixed_samples() {
    let data = samples([16, 16, 1], 3);
    let config = quiet(TrainConfig {
        steps: 500,
        preset: "compact".into(),
        max_train_samples: Some(10),
        ..TrainConfig::default()
    });
    let (_, losses) = run("diffusion", &config, &data, None);
    let s = smoothed(&losses.iter().map(|r| r.loss).collect::<Vec<_>>(), 50);
    assert!(s[499] < s[49], "smoothed loss {} at 500 vs {} at 50", s[499], s[49]);
}

#[test]
fn cgan_updates_the_discriminator_every_second_step() {
    let data = samples([8, 8, 1], 3);
    let mut config = quiet(TrainConfig { steps: 100, batch_size: 2, preset: "toy".into(), ..TrainConfig::default() });
    config.gan.discriminator = qup_core::baselines::cgan::DiscriminatorConfig::small();
    let (ckpt, losses) = run("cgan", &config, &data, None);
    assert_eq!(ckpt.counter("generator_steps"), 100);
    assert_eq!(ckpt.counter("discriminator_steps"), 50);
    assert_eq!(losses.iter().filter(|r| r.discriminator_loss.is_some()).count(), 50);
}

fn resume_matches(method: &str) {
    let data = samples([8, 8, 1], 3);
    let mut config = quiet(TrainConfig {
        steps: 6,
        batch_size: 2,
        preset: "toy".into(),
        schedule: ScheduleParams { steps: 20, ..ScheduleParams::default() },
        ..TrainConfig::default()
    });
    config.gan.discriminator = qup_core::baselines::cgan::DiscriminatorConfig::small();
    let (full_ckpt, full) = run(method, &config, &data, None);
    let (half, _) = run(method, &TrainConfig { steps: 3, ..config.clone() }, &data, None);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.json");
    half.write(&path).unwrap();
    let reloaded = Checkpoint::read(&path).unwrap();
    assert_eq!(reloaded, half);

    let (resumed_ckpt, rest) = run(method, &config, &data, Some(&reloaded));
    assert_eq!(rest, full[3..].to_vec(), "{method}");
    assert_eq!(resumed_ckpt.weights, full_ckpt.weights, "{method}");
    assert_eq!(resumed_ckpt.ema_weights, full_ckpt.ema_weights, "{method}");
}

#[test]
fn resumed_diffusion_repeats_the_loss_trajectory() {
    resume_matches("diffusion");
}

#[test]
fn resumed_cgan_repeats_the_loss_trajectory() {
    resume_matches("cgan");
}

#[test]
fn checkpointed_models_generate_like_the_trainer() {
    let data = samples([8, 8, 1], 3);
    let config = quiet(TrainConfig {
        steps: 2,
        batch_size: 2,
        preset: "toy".into(),
        schedule: ScheduleParams { steps: 10, ..ScheduleParams::default() },
        ..TrainConfig::default()
    })
    .resolve(Some("diffusion"), 3)
    .unwrap();
    let registry = MethodRegistry::builtin();
    let method = registry.get("diffusion").unwrap();
    let mut trainer = method.trainer(&config).unwrap();
    let refs: Vec<&ConditioningSample> = data.iter().take(2).collect();
    let mut rng = qup_core::rng::keyed_rng(0, &[]);
    trainer.train_step(&refs, &mut rng).unwrap();
    let requests: Vec<SliceRequest> = data.iter().take(3).enumerate().map(|(i, s)| SliceRequest::from_sample(s, i as u64)).collect();
    let live = trainer.upsampler().generate(&requests).unwrap();
    let ckpt = trainer.checkpoint(&config);
    let restored = method.upsampler(ModelSource::Checkpoint(&ckpt)).unwrap().generate(&requests).unwrap();
    assert_eq!(live, restored);
    assert!(live.iter().all(|s| s.pixels.iter().all(|v| *v >= 0.0)));
}

#[test]
fn reference_count_mismatch_fails_before_training() {
    let data = samples([8, 8, 1], 4);
    let registry = MethodRegistry::builtin();
    let config = quiet(TrainConfig { preset: "toy".into(), ..TrainConfig::default() }).resolve(Some("diffusion"), 3).unwrap();
    let mut steps = 0;
    let e = train_samples(registry.get("diffusion").unwrap(), &config, &data, &[], None, &mut |_| {
        steps += 1;
        Ok(())
    })
    .err()
    .unwrap();
    assert!(matches!(e, Error::Config(_)), "{e}");
    assert_eq!(steps, 0);
}

#[test]
fn unknown_methods_are_named_in_the_error() {
    let registry = MethodRegistry::builtin();
    let e = registry.get("qgan").err().unwrap();
    assert_eq!(e.kind(), "unknown_method");
    assert_eq!(e.to_string(), "unknown method 'qgan' (known: cgan, diffusion, interp)");
}

#[test]
fn training_directory_holds_logs_config_and_checkpoints() {
    let root = tempfile::tempdir().unwrap();
    for i in 0..3 {
        phantom_set([8, 8, 1], i).write(&root.path().join(format!("s{i}"))).unwrap();
    }
    let options = BuildOptions { k_low: 10, references: 3, seed: 0, metric: Default::default(), split: Default::default() };
    let manifest = DatasetManifest::build_from_dir(root.path(), options).unwrap();
    assert_eq!(manifest.subjects_in(Split::Train).count(), 1);
    let out = root.path().join("run");
    let config = quiet(TrainConfig {
        steps: 4,
        batch_size: 2,
        preset: "toy".into(),
        checkpoint_every: 2,
        validate_every: 2,
        validation_samples: 2,
        schedule: ScheduleParams { steps: 10, ..ScheduleParams::default() },
        ..TrainConfig::default()
    });
    let registry = MethodRegistry::builtin();
    let method = registry.get("diffusion").unwrap();
    let outcome = train_to_dir(&manifest, method, &config, &out, None).unwrap();
    let files = TrainFiles { dir: out.clone() };
    assert_eq!(read_loss_log(&files.loss_log()).unwrap(), outcome.losses);
    assert_eq!(outcome.validation.len(), 2);
    assert!(files.at_step(2).is_file() && files.at_step(4).is_file());
    let resolved = TrainConfig::read(&files.resolved_config()).unwrap();
    assert_eq!(resolved.method.as_deref(), Some("diffusion"));
    assert!(resolved.denoiser.is_some());

    let mid = Checkpoint::read(&files.at_step(2)).unwrap();
    let resumed = train_to_dir(&manifest, method, &config, &out, Some(&mid)).unwrap();
    assert_eq!(resumed.losses, outcome.losses[2..].to_vec());
    assert_eq!(read_loss_log(&files.loss_log()).unwrap(), outcome.losses);
}
