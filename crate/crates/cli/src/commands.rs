use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ArgMatches;
use serde_json::json;
use snapshot_core::benchmark::{
    build_benchmark as write_benchmark, fnv1a64, load_split, observation_window, Split,
};
use snapshot_core::dataset::{build_instances, Instance};
use snapshot_core::eval::{
    ablation_csv, evaluate, latency_bench, parse_grid, run_ablation, sweep_svg, ConstantVelocity,
    Observed,
};
use snapshot_core::features::{extract, FeatureConfig};
use snapshot_core::model::{init_model, Checkpoint, Model};
use snapshot_core::scene::{generate_synthetic, load_scenarios, save_scenarios};
use snapshot_core::training::{metrics_csv, Stage, Trainer};

use crate::config::{apply, RunConfig};
use crate::{
    AblateArgs, BenchArgs, Cli, CliError, EvalArgs, GenArgs, LatencyArgs, PredictArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "{flag} {}: no such file",
            path.display()
        )))
    }
}

fn require_dir(flag: &str, path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "{flag} {}: no such directory",
            path.display()
        )))
    }
}

fn positive(flag: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(usage(format!("{flag} must be at least 1")));
    }
    Ok(())
}

fn non_negative(flag: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(usage(format!(
            "{flag} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

fn config_beside(file: &Path) -> PathBuf {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    file.with_file_name(format!("{stem}.config.toml"))
}

fn scenarios_path(cli: &Cli) -> PathBuf {
    cli.data_dir.join("scenarios.jsonl")
}

fn benchmark_dir(cli: &Cli, given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| cli.data_dir.join("benchmark"))
}

fn model_path(cli: &Cli, given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| cli.data_dir.join("run").join("best.ckpt"))
}

/// FNV-1a of the benchmark's manifest.json, as hex.
fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

fn load_model(flag: &str, path: &Path) -> Result<Checkpoint<f32>> {
    require_file(flag, path)?;
    Ok(Checkpoint::<f32>::load(path)?)
}

fn split_instances(dir: &Path, split: Split, features: &FeatureConfig) -> Result<Vec<Instance>> {
    let samples = load_split(dir, split)?;
    Ok(build_instances(&samples, features)?)
}

fn features_for(model: &Model<f32>, base: &FeatureConfig) -> FeatureConfig {
    FeatureConfig {
        map_rows: model.hyper().map_rows,
        ..*base
    }
}

pub fn gen_synthetic(cli: &Cli, a: &GenArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply(m, "num", &mut cfg.generator.num_scenarios);
    apply(m, "agents", &mut cfg.generator.agents_per_scenario);
    apply(m, "length", &mut cfg.generator.length);
    apply(m, "seed", &mut cfg.seed);
    positive("--num", cfg.generator.num_scenarios)?;
    positive("--agents", cfg.generator.agents_per_scenario)?;
    positive("--length", cfg.generator.length)?;
    let out = a.out.clone().unwrap_or_else(|| scenarios_path(cli));

    let scenarios = generate_synthetic(&cfg.generator, cfg.seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_scenarios(&scenarios, &out)?;
    cfg.write(&config_beside(&out))?;
    let tracks: usize = scenarios.iter().map(|s| s.tracks.len()).sum();
    println!(
        "wrote {} scenarios ({tracks} tracks) to {}",
        scenarios.len(),
        out.display()
    );
    Ok(())
}

pub fn build_benchmark(cli: &Cli, a: &BenchArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply(m, "window", &mut cfg.benchmark.window);
    apply(m, "stride", &mut cfg.benchmark.stride);
    positive("--window", cfg.benchmark.window)?;
    positive("--stride", cfg.benchmark.stride)?;
    let input = a.input.clone().unwrap_or_else(|| scenarios_path(cli));
    require_file("--in", &input)?;
    let out = benchmark_dir(cli, &a.out);

    let scenarios = load_scenarios(&input)?;
    let manifest = write_benchmark(&scenarios, &out, &cfg.benchmark)?;
    cfg.write(&out.join("config.toml"))?;
    println!(
        "benchmark in {} (window {}, stride {})",
        out.display(),
        manifest.window,
        manifest.stride
    );
    for split in Split::ALL {
        let c = manifest.counts(split);
        println!(
            "  {:5} scenarios {:5}  samples {:6}  scored tracks {:6}  multi-pedestrian {:.1}%",
            split.name(),
            c.scenarios,
            c.samples,
            c.scored_tracks,
            100.0 * c.multi_pedestrian_fraction
        );
    }
    Ok(())
}

pub fn train(cli: &Cli, a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply(m, "epochs", &mut cfg.train.max_epochs);
    apply(m, "batch", &mut cfg.train.batch_size);
    apply(m, "lr", &mut cfg.train.lr);
    apply(m, "wd", &mut cfg.train.weight_decay);
    apply(m, "noise_std", &mut cfg.train.noise_std);
    apply(m, "seed", &mut cfg.train.seed);
    apply(m, "selection", &mut cfg.features.selection);
    cfg.train.threads = cli.threads;
    if a.no_timing {
        cfg.train.record_seconds = false;
    }
    positive("--epochs", cfg.train.max_epochs)?;
    positive("--batch", cfg.train.batch_size)?;
    non_negative("--lr", cfg.train.lr)?;
    non_negative("--wd", cfg.train.weight_decay)?;
    non_negative("--noise-std", cfg.train.noise_std)?;
    cfg.train.validate()?;
    let stage = Stage::parse(&a.stage).ok_or_else(|| usage(format!("--stage {}", a.stage)))?;
    if stage == Stage::Two && a.init.is_none() && !a.resume {
        return Err(usage("--stage 2 requires --init <checkpoint>"));
    }
    let data = benchmark_dir(cli, &a.data);
    require_dir("--data", &data)?;
    let out = a.out.clone().unwrap_or_else(|| cli.data_dir.join("run"));
    let last_path = out.join("last.ckpt");
    if a.resume {
        require_file("--resume", &last_path)?;
    }
    let hash = manifest_hash(&data)?;

    let start = if a.resume {
        Some(Checkpoint::<f32>::load(&last_path)?)
    } else {
        None
    };
    let model = match (&start, &a.init) {
        (Some(ck), _) => ck.model.clone(),
        (None, Some(init)) => {
            let ck = load_model("--init", init)?;
            if ck.manifest_hash.as_deref().is_some_and(|h| h != hash) {
                eprintln!("note: --init was trained on a different benchmark");
            }
            if cli.config.is_some() && cfg.model != *ck.model.hyper() {
                eprintln!("note: model settings come from --init, not --config");
            }
            ck.model
        }
        (None, None) => init_model::<f32>(&cfg.model, cfg.train.seed)?,
    };
    cfg.model = model.hyper().clone();
    let features = features_for(&model, &cfg.features);
    cfg.features = features;
    let train = split_instances(&data, Split::Train, &features)?;
    let val = split_instances(&data, Split::Val, &features)?;
    println!(
        "training {} parameters on {} instances, validating on {}",
        model.num_params(),
        train.len(),
        val.len()
    );

    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let mut trainer = match start {
        Some(ck) => Trainer::resume(ck, &train, &val, cli.threads)?,
        None => {
            let mut init = Checkpoint::new(model.clone());
            init.manifest_hash = Some(hash.clone());
            init.save(out.join("init.ckpt"))?;
            Trainer::new(model, &train, &val, cfg.train.clone(), stage)?
        }
    };
    cfg.write(&out.join("config.toml"))?;
    let metrics_path = out.join("metrics.csv");
    let tag = |mut ck: Checkpoint<f32>| {
        ck.manifest_hash = Some(hash.clone());
        ck
    };
    loop {
        let t = Instant::now();
        let step = trainer.run_epoch();
        write_file(&metrics_path, metrics_csv(trainer.log()))?;
        let Some(e) = step? else { break };
        tag(trainer.checkpoint()).save(&last_path)?;
        tag(trainer.best_checkpoint()).save(out.join("best.ckpt"))?;
        println!(
            "stage {} epoch {:3}  loss {:.4}  val ADE {:.4}  FDE {:.4}  lr {:.2e}  ({:.1}s)",
            e.stage,
            e.epoch,
            e.train_loss,
            e.val_ade,
            e.val_fde,
            e.lr,
            t.elapsed().as_secs_f64()
        );
    }
    if !out.join("best.ckpt").exists() {
        tag(trainer.best_checkpoint()).save(out.join("best.ckpt"))?;
    }
    println!("checkpoints and metrics.csv in {}", out.display());
    Ok(())
}

pub fn eval(cli: &Cli, a: &EvalArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply(m, "selection", &mut cfg.features.selection);
    let model_file = model_path(cli, &a.model);
    let data = benchmark_dir(cli, &a.data);
    require_dir("--data", &data)?;
    let split = Split::parse(&a.split).ok_or_else(|| usage(format!("--split {}", a.split)))?;
    let ck = load_model("--model", &model_file)?;
    let hash = manifest_hash(&data)?;
    if ck.manifest_hash.as_deref().is_some_and(|h| h != hash) {
        eprintln!("note: the checkpoint was trained on a different benchmark");
    }
    let out = a.out.clone().unwrap_or_else(|| {
        model_file
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", split.name()))
    });

    let model = ck.model;
    cfg.model = model.hyper().clone();
    cfg.features = features_for(&model, &cfg.features);
    let instances = split_instances(&data, split, &cfg.features)?;
    let observed = if a.sweep {
        Observed::Full
    } else {
        Observed::Steps(10)
    };
    let report = evaluate(&model, &instances, observed)?;
    let baseline = evaluate(&ConstantVelocity, &instances, observed)?;

    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_file(&out.join("report.json"), report.to_json())?;
    write_file(&out.join("cvm.json"), baseline.to_json())?;
    if a.sweep {
        write_file(&out.join("sweep.csv"), report.sweep_csv())?;
        write_file(&out.join("cvm_sweep.csv"), baseline.sweep_csv())?;
        let svg = sweep_svg(&[
            ("snapshot".into(), report.sweep.clone()),
            ("cvm".into(), baseline.sweep.clone()),
        ]);
        write_file(&out.join("sweep.svg"), svg)?;
    }
    cfg.write(&out.join("config.toml"))?;
    println!("{} split, {} agents", split.name(), report.n_agents);
    println!("  snapshot  ADE {:.4}  FDE {:.4}", report.ade, report.fde);
    println!(
        "  cvm       ADE {:.4}  FDE {:.4}",
        baseline.ade, baseline.fde
    );
    if a.sweep {
        println!("  observed  snapshot ADE   cvm ADE");
        for (s, b) in report.sweep.iter().zip(&baseline.sweep) {
            println!("  {:8}  {:12.4}  {:8.4}", s.observed_steps, s.ade, b.ade);
        }
    }
    println!("reports in {}", out.display());
    Ok(())
}

pub fn ablate(cli: &Cli, a: &AblateArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply(m, "epochs", &mut cfg.train.max_epochs);
    apply(m, "batch", &mut cfg.train.batch_size);
    apply(m, "lr", &mut cfg.train.lr);
    apply(m, "wd", &mut cfg.train.weight_decay);
    apply(m, "seed", &mut cfg.train.seed);
    cfg.train.threads = cli.threads;
    cfg.train.record_seconds = false;
    positive("--epochs", cfg.train.max_epochs)?;
    positive("--batch", cfg.train.batch_size)?;
    non_negative("--lr", cfg.train.lr)?;
    non_negative("--wd", cfg.train.weight_decay)?;
    cfg.train.validate()?;
    let grid = parse_grid(&a.grid).map_err(|e| usage(format!("--grid: {e}")))?;
    let data = benchmark_dir(cli, &a.data);
    require_dir("--data", &data)?;
    let split = Split::parse(&a.split).ok_or_else(|| usage(format!("--split {}", a.split)))?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cli.data_dir.join("ablation"));

    let train = load_split(&data, Split::Train)?;
    let val = load_split(&data, Split::Val)?;
    let eval_samples = load_split(&data, split)?;
    let rows = run_ablation(
        &grid,
        &train,
        &val,
        &eval_samples,
        &cfg.model,
        &cfg.features,
        &cfg.train,
    )?;
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_file(&out.join("ablation.csv"), ablation_csv(&rows))?;
    let json = serde_json::to_string_pretty(&rows).expect("ablation rows serialize");
    write_file(&out.join("ablation.json"), json)?;
    cfg.write(&out.join("config.toml"))?;
    println!("map vectors  selection    ADE     FDE");
    for r in &rows {
        println!(
            "{:11}  {:9}  {:.4}  {:.4}",
            r.cell.map_rows,
            r.cell.selection.name(),
            r.report.ade,
            r.report.fde
        );
    }
    println!("results in {}", out.display());
    Ok(())
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("--batch-sizes: `{v}` is not a batch size")))
        })
        .collect()
}

pub fn bench(cli: &Cli, a: &LatencyArgs) -> Result<()> {
    let sizes = parse_sizes(&a.batch_sizes)?;
    if sizes.is_empty() || sizes.contains(&0) || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage(
            "--batch-sizes must be positive and strictly increasing",
        ));
    }
    positive("--reps", a.reps)?;
    let model_file = model_path(cli, &a.model);
    let data = benchmark_dir(cli, &a.data);
    require_dir("--data", &data)?;
    let ck = load_model("--model", &model_file)?;
    let features = features_for(&ck.model, &FeatureConfig::default());
    let pool = split_instances(&data, Split::Test, &features)?;
    let report = latency_bench(&ck.model, &pool, &sizes, a.warmup, a.reps)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(out) = &a.out {
        write_file(out, &csv)?;
    }
    Ok(())
}

pub fn predict(cli: &Cli, a: &PredictArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply(m, "selection", &mut cfg.features.selection);
    require_file("--scenario", &a.scenario)?;
    let model_file = model_path(cli, &a.model);
    let ck = load_model("--model", &model_file)?;
    let scenarios = load_scenarios(&a.scenario)?;
    let scenario = scenarios
        .iter()
        .find(|s| s.track(&a.focal).is_some())
        .ok_or_else(|| {
            usage(format!(
                "--focal {}: no such track in {}",
                a.focal,
                a.scenario.display()
            ))
        })?;
    let sample = observation_window(scenario, a.start, &a.focal)
        .map_err(|e| usage(format!("--focal {} --start {}: {e}", a.focal, a.start)))?;
    cfg.model = ck.model.hyper().clone();
    cfg.features = features_for(&ck.model, &cfg.features);
    let f = extract(&sample, &a.focal, &cfg.features)?;
    let p = ck.model.predict(&f.social, &f.map)?;
    let world: Vec<[f64; 2]> = p.full.iter().map(|q| f.frame.invert(*q)).collect();
    let first_t = a.start + 10;
    let doc = json!({
        "scenario": scenario.id,
        "focal": a.focal,
        "first_timestep": first_t,
        "frame": { "origin": f.frame.origin, "rotation": f.frame.rotation },
        "coarse": p.coarse,
        "local": p.full,
        "world": world,
    });
    let text = serde_json::to_string_pretty(&doc).expect("prediction serializes");
    match &a.out {
        Some(out) => {
            write_file(out, format!("{text}\n"))?;
            cfg.write(&config_beside(out))?;
            let last = world[world.len() - 1];
            println!(
                "predicted {} steps for `{}` from t = {first_t}; final position ({:.2}, {:.2}) written to {}",
                world.len(),
                a.focal,
                last[0],
                last[1],
                out.display()
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}
