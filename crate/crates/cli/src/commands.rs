use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use pdqat_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pdqat_core::config::RunConfig;
use pdqat_core::data::{derive_seed, Dataset};
use pdqat_core::error::{Error, Result};
use pdqat_core::metrics::{
    write_metrics_csv, write_mixed_eval_csv, write_probe_csv, write_rank_csv, write_sweep_csv,
    MixedEvalRow,
};
use pdqat_core::sensitivity::{
    epsilon_sweep, mixed_precision_eval, rank_layers, rank_layers_by_trajectory_mean,
    subgradient_probe, ProbeTarget, RunSetup, SelectMode, SweepParam, SweepRow,
};
use pdqat_core::shadow::ShadowModel;
use pdqat_core::tensor::Tensor;
use pdqat_core::trainer::{
    lagrangian_gradcheck, train_baseline_ste, train_pdqat, DualState, TrainReport,
};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Input(format!("cannot create output dir {}: {e}", dir.display())))
}

fn summarize(report: &TrainReport) {
    if let Some(last) = report.metrics.last() {
        println!(
            "epochs: {} (best {}), train loss {:.4}, full acc {:.4}, quant acc {:.4}",
            report.stopping_epoch,
            report.best_epoch,
            last.train_loss,
            last.full_acc,
            last.quant_acc
        );
    } else {
        println!("epochs: 0 (initialization only)");
    }
}

pub fn train(config_path: &Path, baseline: bool) -> Result<ExitCode> {
    let config = RunConfig::load(config_path)?;
    let spec = config.model_spec()?;
    let quant = config.quant_spec()?;
    let train_config = config.train_config()?;
    let constraints = config.constraint_set(&quant)?;
    let (train_set, test_set) = config.load_data()?;
    let out_dir = config.output_dir();
    ensure_dir(&out_dir)?;

    let mut model = ShadowModel::<f32>::build(spec, quant, train_config.seed)?;
    let interior = model.interior_ids().len();
    let (report, duals) = if baseline {
        let report = train_baseline_ste(&mut model, &constraints, &train_config, &train_set)?;
        (report, None)
    } else {
        let ids = if train_config.layerwise {
            model.interior_ids()
        } else {
            Vec::new()
        };
        let mut duals = DualState::new(&ids, train_config.dual_lr);
        let report = train_pdqat(
            &mut model,
            &mut duals,
            &constraints,
            &train_config,
            &train_set,
        )?;
        (report, Some(duals))
    };

    write_metrics_csv(&out_dir.join("metrics.csv"), &report, interior)?;
    save_checkpoint(
        &out_dir.join("checkpoint.bin"),
        &model,
        duals.as_ref(),
        config.raw(),
    )?;
    summarize(&report);
    if !report.metrics.is_empty() {
        let test_full = model.full_eval_accuracy(&test_set)?;
        let test_quant = model.quantized_eval_accuracy(&test_set)?;
        println!("test acc: full {test_full:.4}, quant {test_quant:.4}");
    }
    println!("wrote {}", out_dir.join("metrics.csv").display());
    println!("wrote {}", out_dir.join("checkpoint.bin").display());
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_duals(ck: &Checkpoint) -> Result<&DualState> {
    ck.duals.as_ref().ok_or_else(|| {
        Error::Input(
            "checkpoint carries no dual state (baseline checkpoints cannot be ranked)".into(),
        )
    })
}

/// Output directory for checkpoint-driven commands: the explicit flag, the
/// checkpoint's configured directory, or the checkpoint's parent.
fn resolve_out_dir(flag: Option<PathBuf>, ck: &Checkpoint, checkpoint_path: &Path) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Ok(config) = RunConfig::parse(&ck.config_echo) {
        return config.output_dir();
    }
    checkpoint_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn rank(checkpoint_path: &Path, stat: &str, out: Option<PathBuf>) -> Result<ExitCode> {
    let ck = load_checkpoint(checkpoint_path)?;
    let duals = checkpoint_duals(&ck)?;
    let ranking = match stat {
        "mean" => rank_layers_by_trajectory_mean(duals),
        _ => rank_layers(duals),
    };
    let out_dir = resolve_out_dir(out, &ck, checkpoint_path);
    ensure_dir(&out_dir)?;
    let path = out_dir.join("rank.csv");
    write_rank_csv(&path, &ranking)?;
    for (i, &(layer, lambda)) in ranking.entries.iter().enumerate() {
        println!("rank {}: layer {} (lambda {lambda:.6})", i + 1, layer + 1);
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn echoed_config(ck: &Checkpoint) -> Result<RunConfig> {
    if ck.config_echo.trim().is_empty() {
        return Err(Error::Input(
            "checkpoint carries no config echo; cannot reconstruct the dataset".into(),
        ));
    }
    RunConfig::parse(&ck.config_echo)
}

pub fn mixed_eval(
    checkpoint_path: &Path,
    k: usize,
    mode: &str,
    seeds: &[u64],
    split: &str,
    out: Option<PathBuf>,
) -> Result<ExitCode> {
    let ck = load_checkpoint(checkpoint_path)?;
    let mode_sel = SelectMode::parse(mode)?;
    let mut config = echoed_config(&ck)?;
    // pin the dataset before any seed override so every retrain sees the
    // same data
    let original_seed = config.train.seed;
    if let Some(section) = &mut config.data {
        section.seed = Some(section.seed.unwrap_or(original_seed));
    }
    let (train_set, test_set) = config.load_data()?;
    let eval_set = if split == "train" {
        &train_set
    } else {
        &test_set
    };

    let mut rows = Vec::new();
    if seeds.is_empty() {
        let duals = checkpoint_duals(&ck)?;
        let ranking = rank_layers(duals);
        let mut model = ck.to_model()?;
        let accuracy = mixed_precision_eval(&mut model, &ranking, k, mode_sel, eval_set)?;
        rows.push(MixedEvalRow {
            k,
            mode: mode.to_string(),
            accuracy,
            seed: original_seed,
        });
    } else {
        let spec = config.model_spec()?;
        let quant = config.quant_spec()?;
        let constraints = config.constraint_set(&quant)?;
        for &seed in seeds {
            let mut train_config = config.train_config()?;
            train_config.seed = seed;
            let mut model = ShadowModel::<f32>::build(spec.clone(), quant.clone(), seed)?;
            let ids = if train_config.layerwise {
                model.interior_ids()
            } else {
                Vec::new()
            };
            let mut duals = DualState::new(&ids, train_config.dual_lr);
            train_pdqat(
                &mut model,
                &mut duals,
                &constraints,
                &train_config,
                &train_set,
            )?;
            let ranking = rank_layers(&duals);
            let accuracy = mixed_precision_eval(&mut model, &ranking, k, mode_sel, eval_set)?;
            rows.push(MixedEvalRow {
                k,
                mode: mode.to_string(),
                accuracy,
                seed,
            });
        }
    }

    let out_dir = resolve_out_dir(out, &ck, checkpoint_path);
    ensure_dir(&out_dir)?;
    let path = out_dir.join("mixed_eval.csv");
    write_mixed_eval_csv(&path, &rows)?;
    for row in &rows {
        println!(
            "k={} mode={} seed={} accuracy={:.4}",
            row.k, row.mode, row.seed, row.accuracy
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_setup(config: &RunConfig) -> Result<RunSetup> {
    let quant = config.quant_spec()?;
    Ok(RunSetup {
        spec: config.model_spec()?,
        quant: quant.clone(),
        constraints: config.constraint_set(&quant)?,
        config: config.train_config()?,
        init_seed: config.train.seed,
    })
}

pub fn sweep(config_path: &Path, param: &str, values: &[f64], jobs: usize) -> Result<ExitCode> {
    let config = RunConfig::load(config_path)?;
    let setup = run_setup(&config)?;
    let param = SweepParam::parse(param)?;
    let (train_set, test_set) = config.load_data()?;
    let out_dir = config.output_dir();
    ensure_dir(&out_dir)?;

    let rows = if jobs <= 1 || values.len() <= 1 {
        epsilon_sweep(&setup, param, values, &train_set, &test_set)?
    } else {
        sweep_parallel(&setup, param, values, &train_set, &test_set, jobs)?
    };
    let path = out_dir.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    for row in &rows {
        println!(
            "value={} test_acc={:.4} lambda_final={:.6}",
            row.value, row.test_acc, row.lambda_final
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Fan the sweep out over a bounded worker pool; each run is independent
/// and results are reassembled in input order.
fn sweep_parallel(
    setup: &RunSetup,
    param: SweepParam,
    values: &[f64],
    train_set: &Dataset,
    test_set: &Dataset,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    // validate duplicates up front, as the sequential path would
    for (i, a) in values.iter().enumerate() {
        if values[i + 1..].contains(a) {
            return Err(Error::Input(format!("duplicate sweep value {a}")));
        }
    }
    let workers = jobs.min(values.len());
    let mut slots: Vec<Option<Result<SweepRow>>> = Vec::new();
    slots.resize_with(values.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots_mutex = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= values.len() {
                    break;
                }
                let row = epsilon_sweep(setup, param, &values[i..=i], train_set, test_set)
                    .map(|mut rows| rows.remove(0));
                slots_mutex.lock().unwrap()[i] = Some(row);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every sweep slot is filled"))
        .collect()
}

pub fn probe(
    config_path: &Path,
    param: &str,
    grid: &[f64],
    layer: Option<usize>,
    convergence_loss: Option<f64>,
) -> Result<ExitCode> {
    let config = RunConfig::load(config_path)?;
    let setup = run_setup(&config)?;
    let target = match param {
        "eps_layer" => {
            let layer = layer
                .ok_or_else(|| Error::Input("--layer is required when probing eps_layer".into()))?;
            if layer == 0 {
                return Err(Error::Input("--layer is 1-based".into()));
            }
            ProbeTarget::Layer(layer - 1)
        }
        _ => ProbeTarget::Output,
    };
    let (train_set, _) = config.load_data()?;
    // default convergence bar: the uniform-prediction risk ln(K)
    let threshold = convergence_loss.unwrap_or_else(|| (config.model.classes as f64).ln());
    let probe = subgradient_probe(&setup, target, grid, &train_set, threshold)?;
    let out_dir = config.output_dir();
    ensure_dir(&out_dir)?;
    let path = out_dir.join("probe.csv");
    write_probe_csv(&path, &probe)?;
    for i in 0..probe.grid.len() {
        println!(
            "eps={} objective={:.6} lambda={:.6} worst_margin={} converged={}",
            probe.grid[i],
            probe.objectives[i],
            probe.lambdas[i],
            probe.worst_margins[i],
            probe.converged[i]
        );
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(config_path: &Path, points: usize) -> Result<ExitCode> {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let config = RunConfig::load(config_path)?;
    let spec = config.model_spec()?;
    let quant = config.quant_spec()?;
    let constraints = config.constraint_set(&quant)?;
    let layerwise = config.train_config()?.layerwise;
    let batch = config.train.batch_size.clamp(2, 16);
    let width: usize = spec.input_dims.iter().product();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut attempt = 0usize;
    let max_attempts = points.saturating_mul(20).max(40);
    while checked < points {
        if attempt >= max_attempts {
            return Err(Error::Input(format!(
                "found only {checked}/{points} generic points in {max_attempts} draws; \
                 the quantized chain varies smoothly with some parameter \
                 (is an unquantized layer feeding the quantized output?)"
            )));
        }
        let seed = derive_seed(config.train.seed, 0x6763 + attempt as u64);
        attempt += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ShadowModel::<f64>::build(spec.clone(), quant.clone(), seed)?;
        let interior = model.interior_ids();
        let mut duals = DualState::new(
            if layerwise { &interior } else { &[] },
            config.train.dual_lr.unwrap_or(0.01),
        );
        // random multipliers in (0, 1]
        for slot in duals.layer_lambdas.iter_mut() {
            slot.1 = 1.0 - rng.gen_range(0.0..1.0);
        }
        duals.lambda_out = 1.0 - rng.gen_range(0.0..1.0);
        let mut shape = vec![batch];
        shape.extend_from_slice(&spec.input_dims);
        let x = Tensor::new(
            shape,
            (0..batch * width)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )?;
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..spec.classes)).collect();
        let report = lagrangian_gradcheck(&mut model, &x, &labels, &duals, &constraints, 1e-5)?;
        if !report.generic {
            println!("draw {attempt}: skipped (quantization boundary inside the probe window)");
            continue;
        }
        checked += 1;
        println!(
            "point {checked}: max relative error {:.3e}",
            report.max_rel_error
        );
        if report.max_rel_error > worst {
            worst = report.max_rel_error;
        }
    }
    println!("max relative error over {points} generic points: {worst:.3e}");
    if worst < GRADCHECK_TOLERANCE {
        println!("gradcheck PASS (tolerance {GRADCHECK_TOLERANCE:.0e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAIL (tolerance {GRADCHECK_TOLERANCE:.0e})");
        Ok(ExitCode::from(1))
    }
}
