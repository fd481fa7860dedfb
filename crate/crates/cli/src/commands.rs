use std::io::Write;
use std::path::{Path, PathBuf};

use spikegrad::data::{save_checkpoint, load_checkpoint, Batch, Dataset};
use spikegrad::normalization::normalize_thresholds;
use spikegrad::snn::{architecture, ArchOptions, Network, NetworkSpec, NeuronConfig};
use spikegrad::train::{
    evaluate, lr_range_test, train as run_training, write_metrics_csv, LrSchedule, NetworkRangeTest, TrainConfig,
};
use spikegrad::tuner::{
    balance_ratio, profile_gradients, tune_gamma as search_gamma, write_history_csv, write_profile_csv, TuneOptions,
    TuneResult,
};

use crate::config::{
    DataConfig, DataSource, OutputLayout, Resolved, RunManifest, ScheduleKind, Setting, SynthKind, TrainRun, TuneConfig,
};
use crate::{BracketArgs, CliError, DataArgs, DiagArgs, EvalArgs, ModelArgs, TrainArgs, TuneArgs};

const RANGE_TEST_MIN_LR: f64 = 1e-6;
const RANGE_TEST_MAX_LR: f64 = 1.0;

fn data_config(args: &DataArgs) -> Result<DataConfig, CliError> {
    let files = [
        &args.train_images,
        &args.train_labels,
        &args.test_images,
        &args.test_labels,
    ];
    let source = if let Some(generator) = args.synthetic {
        if args.data_dir.is_some() || files.iter().any(|f| f.is_some()) {
            return Err(CliError::Usage("--synthetic excludes --data-dir and explicit data files".into()));
        }
        let size = args.synthetic_size.unwrap_or(match generator {
            SynthKind::Twoclass => 2,
            SynthKind::Clusters => 64,
            SynthKind::Patterns => 16,
        });
        DataSource::Synthetic {
            generator,
            train_samples: args.synthetic_train,
            test_samples: args.synthetic_test,
            classes: if generator == SynthKind::Twoclass { 2 } else { args.synthetic_classes },
            size,
            seed: args.data_seed,
        }
    } else {
        let pick = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf, CliError> {
            match (explicit, &args.data_dir) {
                (Some(p), _) => Ok(p.clone()),
                (None, Some(dir)) => Ok(dir.join(name)),
                (None, None) => Err(CliError::Usage(
                    "no data: pass --data-dir, explicit --train-images/--train-labels/--test-images/--test-labels, or --synthetic".into(),
                )),
            }
        };
        DataSource::Idx {
            train_images: pick(&args.train_images, "train-images-idx3-ubyte")?,
            train_labels: pick(&args.train_labels, "train-labels-idx1-ubyte")?,
            test_images: pick(&args.test_images, "t10k-images-idx3-ubyte")?,
            test_labels: pick(&args.test_labels, "t10k-labels-idx1-ubyte")?,
        }
    };
    Ok(DataConfig {
        source,
        train_limit: args.train_limit,
        test_limit: args.test_limit,
    })
}

/// Named architecture, or a JSON network description when `arch` names a file.
fn build_spec(
    arch: &str,
    reset: spikegrad::snn::ResetMode,
    batch_norm: bool,
    dropout: f64,
    data: &Dataset,
    gamma: f64,
) -> Result<NetworkSpec, CliError> {
    let path = Path::new(arch);
    if arch.ends_with(".json") {
        let text = std::fs::read(path)
            .map_err(|e| CliError::Usage(format!("cannot read network description {arch}: {e}")))?;
        let mut spec: NetworkSpec = serde_json::from_slice(&text)
            .map_err(|e| CliError::Usage(format!("malformed network description {arch}: {e}")))?;
        spec.map_neurons(|n| n.gamma = gamma);
        spec.validate()?;
        return Ok(spec);
    }
    let mut input_shape = data.sample_shape().to_vec();
    if arch == "deep16" {
        input_shape = vec![input_shape.iter().product()];
    }
    let opts = ArchOptions {
        input_shape,
        classes: data.classes,
        neuron: NeuronConfig {
            reset,
            gamma,
            ..NeuronConfig::default()
        },
        batch_norm,
        dropout,
        ..ArchOptions::default()
    };
    architecture(arch, &opts).map_err(|e| CliError::Usage(e.to_string()))
}

/// Flatten samples when the network expects vectors.
fn fit_to(spec: &NetworkSpec, data: Dataset) -> Result<Dataset, CliError> {
    if data.sample_shape() == spec.input_shape.as_slice() {
        return Ok(data);
    }
    let flat = data.flattened();
    if flat.sample_shape() == spec.input_shape.as_slice() {
        return Ok(flat);
    }
    Err(CliError::Usage(format!(
        "data samples {:?} do not fit network input {:?}",
        data.sample_shape(),
        spec.input_shape
    )))
}

fn profile_batches(data: &Dataset, batch_size: usize, count: usize, seed: u64) -> Vec<Batch> {
    data.shuffled_batches(batch_size, seed).take(count.max(1)).collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| spikegrad::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn tune_options(t: &TuneConfig, timesteps: usize, seed: u64) -> TuneOptions {
    TuneOptions {
        gamma_lo: t.gamma_lo,
        gamma_hi: t.gamma_hi,
        tol: t.tol,
        max_iter: t.max_iter,
        timesteps,
        seed,
    }
}

fn bracket_config(b: &BracketArgs) -> Result<TuneConfig, CliError> {
    if !(b.gamma_lo > 0.0 && b.gamma_lo < b.gamma_hi) {
        return Err(CliError::Usage(format!(
            "gamma bracket needs 0 < lo < hi, got [{}, {}]",
            b.gamma_lo, b.gamma_hi
        )));
    }
    if !(b.tol > 0.0) || b.max_iter == 0 {
        return Err(CliError::Usage("--tol must be positive and --max-iter at least 1".into()));
    }
    Ok(TuneConfig {
        gamma_lo: b.gamma_lo,
        gamma_hi: b.gamma_hi,
        tol: b.tol,
        max_iter: b.max_iter,
        batches: b.profile_batches,
    })
}

fn report_tune(result: &TuneResult) {
    println!(
        "gamma {} ratio {:.4} iterations {} status {} monotone {}",
        result.gamma,
        result.ratio,
        result.iterations,
        serde_json::to_string(&result.status).unwrap_or_default().trim_matches('"'),
        result.monotone
    );
}

fn write_tune_outputs(dir: &Path, result: &TuneResult, profile_name: &str) -> Result<Vec<String>, CliError> {
    let mut written = Vec::new();
    if !result.history.is_empty() {
        write_history_csv(dir.join("tune_history.csv"), &result.history)?;
    }
    if let Some(profile) = &result.profile {
        write_profile_csv(dir.join(profile_name), profile)?;
        written.push(profile_name.to_string());
    }
    Ok(written)
}

fn warn_flat(gamma: f64) {
    if gamma == 0.0 {
        log::warn!("gamma = 0 gives a flat surrogate: every potential receives the full gradient");
    }
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let run = match &args.manifest {
        Some(path) => RunManifest::load(path)?.config,
        None => TrainRun {
            arch: args.model.arch.clone(),
            data: data_config(&args.data)?,
            timesteps: args.model.timesteps,
            epochs: args.epochs,
            batch_size: args.model.batch_size,
            gamma: args.gamma,
            max_lr: args.max_lr,
            schedule: args.schedule,
            weight_decay: args.weight_decay,
            seed: args.model.seed,
            batch_norm: !args.model.no_batchnorm,
            calib_samples: args.calib_samples,
            reset: args.model.reset,
            dropout: args.model.dropout,
            val_fraction: args.val_fraction,
            tune: bracket_config(&args.bracket)?,
            range_test_steps: args.range_test_steps,
        },
    };
    run.validate()?;
    let dir = args.out_dir.clone();
    create_dir(&dir)?;
    let run_id = run.run_id();
    log::info!("run {run_id} -> {}", dir.display());

    let data = run.data.load()?;
    let initial_gamma = match run.gamma {
        Setting::Value(v) => v,
        Setting::Auto => run.tune.gamma_lo,
    };
    let spec = build_spec(&run.arch, run.reset, run.batch_norm, run.dropout, &data.train, initial_gamma)?;
    let train_full = fit_to(&spec, data.train)?;
    let test = fit_to(&spec, data.test)?;
    let (train_set, val_set) = train_full.split_validation(run.val_fraction, run.seed)?;
    let mut net = Network::<f32>::init(spec, run.seed)?;
    let mut resolved = Resolved::default();
    let mut profiles = Vec::new();

    let gamma = match run.gamma {
        Setting::Value(v) => v,
        Setting::Auto => {
            let batches = profile_batches(&train_set, run.batch_size, run.tune.batches, run.seed);
            let result = search_gamma(&net, &batches, &tune_options(&run.tune, run.timesteps, run.seed))?;
            report_tune(&result);
            profiles.extend(write_tune_outputs(&dir, &result, "profile_tuned.csv")?);
            if !result.converged() {
                return Err(CliError::Tuner(format!("{:?} after {} iterations", result.status, result.iterations)));
            }
            result.gamma
        }
    };
    warn_flat(gamma);
    net.set_gamma(gamma);
    resolved.gamma = Some(gamma);

    if !run.batch_norm {
        let calib = train_set.take(run.calib_samples)?;
        resolved.thresholds = normalize_thresholds(&mut net, &calib, run.timesteps, run.batch_size)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        log::info!("calibrated thresholds {:?}", resolved.thresholds);
    }

    let mut cfg = TrainConfig {
        epochs: run.epochs,
        batch_size: run.batch_size,
        timesteps: run.timesteps,
        weight_decay: run.weight_decay,
        schedule: LrSchedule::Constant { lr: 1e-3 },
        seed: run.seed,
    };
    let max_lr = match run.max_lr {
        Setting::Value(v) => v,
        Setting::Auto => {
            let mut subject = NetworkRangeTest::new(&net, &train_set, &cfg);
            let r = lr_range_test(&mut subject, RANGE_TEST_MIN_LR, RANGE_TEST_MAX_LR, run.range_test_steps)?;
            log::info!("range test suggests max lr {}", r.suggested_lr);
            r.suggested_lr
        }
    };
    resolved.max_lr = Some(max_lr);
    cfg.schedule = match run.schedule {
        ScheduleKind::OneCycle => LrSchedule::OneCycle { max_lr },
        ScheduleKind::Constant => LrSchedule::Constant { lr: max_lr },
    };

    let manifest = RunManifest {
        run_id,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: run.clone(),
        resolved,
        outputs: OutputLayout {
            manifest: "manifest.json".into(),
            metrics: "metrics.csv".into(),
            checkpoint: "model.ckpt".into(),
            profiles,
        },
    };
    manifest.write(&dir)?;

    let outcome = run_training(net, &train_set, &val_set, &cfg)?;
    write_metrics_csv(dir.join(&manifest.outputs.metrics), &outcome.history)?;
    save_checkpoint(dir.join(&manifest.outputs.checkpoint), &outcome.checkpoint)?;
    if let Some(d) = outcome.diverged {
        return Err(CliError::Divergence(format!(
            "epoch {} step {}: {}; last good checkpoint saved",
            d.epoch + 1,
            d.step,
            d.reason
        )));
    }
    if let Some(last) = outcome.history.last() {
        println!(
            "epoch {} train_loss {:.6} val_acc {:.4}",
            last.epoch, last.train_loss, last.val_acc
        );
    }
    let mut net = outcome.checkpoint.network;
    if !test.is_empty() {
        let result = evaluate(&mut net, &test, run.timesteps, run.batch_size)?;
        println!("test accuracy {:.4} (T = {})", result.accuracy, run.timesteps);
    }
    Ok(())
}

fn parse_sweep(text: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("--sweep-timesteps expects lo:hi:step, got {text:?}"));
    let parts: Vec<usize> = text
        .split(':')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let &[lo, hi, step] = parts.as_slice() else {
        return Err(bad());
    };
    if lo == 0 || step == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo..=hi).step_by(step).collect())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    if !args.checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", args.checkpoint.display())));
    }
    let sweep = args.sweep_timesteps.as_deref().map(parse_sweep).transpose()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = data_config(&args.data)?.load()?;
    let mut net = ckpt.network;
    let test = fit_to(net.spec(), data.test)?;
    let trained_t = ckpt.meta.timesteps.max(1);
    match sweep {
        None => {
            let t = args.timesteps.unwrap_or(trained_t);
            let r = evaluate(&mut net, &test, t, args.batch_size)?;
            println!("accuracy {:.6} loss {:.6} timesteps {t} samples {}", r.accuracy, r.loss, test.len());
        }
        Some(steps) => {
            let mut text = String::from("timesteps,accuracy\n");
            for t in steps {
                let r = evaluate(&mut net, &test, t, args.batch_size)?;
                text.push_str(&format!("{t},{}\n", r.accuracy));
            }
            match &args.out {
                Some(path) => std::fs::write(path, text).map_err(|e| spikegrad::Error::Io {
                    path: path.clone(),
                    source: e,
                })?,
                None => std::io::stdout()
                    .write_all(text.as_bytes())
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            }
        }
    }
    Ok(())
}

fn model_setup(model: &ModelArgs, data: &DataArgs, gamma: f64) -> Result<(Network<f32>, Dataset), CliError> {
    let loaded = data_config(data)?.load()?;
    let spec = build_spec(&model.arch, model.reset, !model.no_batchnorm, model.dropout, &loaded.train, gamma)?;
    let train = fit_to(&spec, loaded.train)?;
    Ok((Network::init(spec, model.seed)?, train))
}

pub fn tune_gamma(args: TuneArgs) -> Result<(), CliError> {
    let tune = bracket_config(&args.bracket)?;
    if args.model.timesteps == 0 {
        return Err(CliError::Usage("--timesteps must be at least 1".into()));
    }
    let (net, train) = model_setup(&args.model, &args.data, tune.gamma_lo)?;
    create_dir(&args.out_dir)?;
    let batches = profile_batches(&train, args.model.batch_size, tune.batches, args.model.seed);
    let result = search_gamma(&net, &batches, &tune_options(&tune, args.model.timesteps, args.model.seed))?;
    report_tune(&result);
    write_tune_outputs(&args.out_dir, &result, "profile_final.csv")?;
    if result.status == spikegrad::tuner::TuneStatus::TrivialDepth {
        println!("notice: fewer than two spiking layers, nothing to balance");
    }
    if !result.converged() {
        return Err(CliError::Tuner(format!(
            "{:?}; visited {} points, see tune_history.csv",
            result.status,
            result.history.len()
        )));
    }
    Ok(())
}

pub fn diag_grad(args: DiagArgs) -> Result<(), CliError> {
    if args.gamma.is_empty() || args.gamma.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(CliError::Usage("--gamma needs non-negative values".into()));
    }
    let (net, train) = model_setup(&args.model, &args.data, args.gamma[0])?;
    create_dir(&args.out_dir)?;
    let batches = profile_batches(&train, args.model.batch_size, args.profile_batches, args.model.seed);
    for &gamma in &args.gamma {
        warn_flat(gamma);
        let profile = profile_gradients(&net, &batches, gamma, args.model.timesteps, args.model.seed)?;
        let name = format!("profile_gamma_{gamma}.csv");
        write_profile_csv(args.out_dir.join(&name), &profile)?;
        match balance_ratio(&profile) {
            Ok(r) => println!("gamma {gamma} ratio {r:.6e} -> {name}"),
            Err(_) => println!("gamma {gamma} -> {name}"),
        }
    }
    Ok(())
}
