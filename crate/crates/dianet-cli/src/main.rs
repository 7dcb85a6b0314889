//! Experiment command line: `dianet train|eval|params|gradcheck|analyze|sweep`.
//!
//! Exit codes: 0 success, 1 failed verification, 2 configuration or usage
//! error, 3 numerical explosion, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dianet::analysis::{capture_traces, emit_heatmap_csv, integration_matrix};
use dianet::backbone::{count_model_params, StageAttention};
use dianet::config::{parse_config_file, ExperimentConfig};
use dianet::data::{load_splits, normalize, IMAGE_SIDE, IMAGE_VALUES};
use dianet::error::Error;
use dianet::gradcheck;
use dianet::tensor::Tensor;
use dianet::train::{evaluate, load_checkpoint, train};

#[derive(Parser)]
#[command(name = "dianet", about = "Channel-attention residual network experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `out` key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override; replaces the config's `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes run.csv and checkpoint.dia to the output dir.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the config's test split.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print per-stage parameter counts and closed-form checks.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify gradients against central finite differences.
    Gradcheck {
        /// ops | cell | block | network | all
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Corrupt one analytic gradient to prove the checker notices.
        #[arg(long, default_value_t = false)]
        inject_fault: bool,
    },
    /// Capture attention traces and emit integration heatmap CSVs.
    Analyze {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based stage to analyze; all recurrent stages when omitted.
        #[arg(long)]
        stage: Option<usize>,
    },
    /// Train several configs concurrently, one thread and subdir each.
    Sweep {
        /// Config files; may be given multiple times.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::ShapeMismatch { .. } => 2,
        Error::Explosion(_) => 3,
        Error::Io(_) | Error::Format(_) => 4,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code_for(&err))
}

fn load_experiment(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = parse_config_file(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn cmd_train(args: &ConfigArgs) -> ExitCode {
    let cfg = match load_experiment(args) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match train(&cfg.network, &cfg.train, &cfg.out) {
        Ok(outcome) => {
            println!("run csv: {}", outcome.csv_path.display());
            println!("checkpoint: {}", outcome.checkpoint_path.display());
            println!("wall_seconds: {:.3}", outcome.record.wall_seconds);
            if let Some(ev) = outcome.record.explosion {
                println!(
                    "explosion: step {} epoch {} site {:?}",
                    ev.step, ev.epoch, ev.site
                );
                return ExitCode::from(3);
            }
            if let (Some(tr), Some(te)) = (outcome.final_train_accuracy, outcome.final_test_accuracy) {
                println!("train_accuracy: {tr:.4}");
                println!("test_accuracy: {te:.4}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn cmd_eval(common: &ConfigArgs, checkpoint: &Path) -> ExitCode {
    let cfg = match load_experiment(common) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let run = || -> Result<f64, Error> {
        let (net, stats) = load_checkpoint(&cfg.network, checkpoint, cfg.train.seed)?;
        let (_, test_raw) = load_splits(
            &cfg.train.data,
            cfg.train.seed,
            cfg.train.subset,
            cfg.train.test_subset,
        )?;
        let test = normalize(&test_raw, &stats);
        evaluate(&net, &test, cfg.train.batch_size)
    };
    match run() {
        Ok(acc) => {
            println!("top1 {acc:.4}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn cmd_params(config: &Path) -> ExitCode {
    let cfg = match parse_config_file(config) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let counts = match count_model_params(&cfg.network) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    println!("stage  channels  blocks  backbone  attn_weights  attn_biases  closed_form  check");
    let mut all_match = true;
    for s in &counts.stages {
        let (cf, check) = match s.closed_form {
            Some(cf) => {
                let ok = cf == s.attention_weights;
                all_match &= ok;
                (cf.to_string(), if ok { "MATCH" } else { "MISMATCH" })
            }
            None => ("-".to_string(), "-"),
        };
        println!(
            "{:<6} {:<9} {:<7} {:<9} {:<13} {:<12} {:<12} {}",
            s.stage + 1,
            s.channels,
            s.blocks,
            s.backbone,
            s.attention_weights,
            s.attention_biases,
            cf,
            check
        );
    }
    println!("stem: {}", counts.stem);
    println!("classifier: {}", counts.classifier);
    println!("attention_increment: {}", counts.attention_increment());
    println!("total: {}", counts.total);
    if all_match {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_gradcheck(scope: &str, seed: u64, inject_fault: bool) -> ExitCode {
    let fault = if inject_fault { 0.05 } else { 0.0 };
    let results = match scope {
        "ops" => gradcheck::suite_ops(seed, fault),
        "cell" => gradcheck::suite_cell(seed, fault),
        "block" => gradcheck::suite_block(seed, fault),
        "network" => gradcheck::suite_network(seed, fault),
        "all" => {
            let mut all = gradcheck::suite_ops(seed, fault);
            all.extend(gradcheck::suite_cell(seed, fault));
            all.extend(gradcheck::suite_block(seed, fault));
            all.extend(gradcheck::suite_network(seed, fault));
            all
        }
        other => {
            return fail(Error::Usage(format!(
                "unknown gradcheck scope '{other}' (ops|cell|block|network|all)"
            )))
        }
    };
    let mut ok = true;
    for r in &results {
        println!(
            "{:<24} max_rel_err {:>12.3e}  tol {:.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_analyze(common: &ConfigArgs, checkpoint: &Path, stage: Option<usize>) -> ExitCode {
    let cfg = match load_experiment(common) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let run = || -> Result<Vec<PathBuf>, Error> {
        let (net, stats) = load_checkpoint(&cfg.network, checkpoint, cfg.train.seed)?;
        let (_, test_raw) = load_splits(
            &cfg.train.data,
            cfg.train.seed,
            cfg.train.subset,
            cfg.train.test_subset.max(cfg.analysis.samples),
        )?;
        let test = normalize(&test_raw, &stats);
        let b = cfg.analysis.samples.min(test.len());
        let mut data = Vec::with_capacity(b * IMAGE_VALUES);
        for i in 0..b {
            data.extend_from_slice(test.image(i));
        }
        let images = Tensor::from_vec(data, &[b, 3, IMAGE_SIDE, IMAGE_SIDE]);

        let stages: Vec<usize> = match stage {
            Some(s) => {
                if s == 0 || s > net.stages.len() {
                    return Err(Error::Config(format!(
                        "stage {s} out of range 1..{}",
                        net.stages.len()
                    )));
                }
                vec![s - 1]
            }
            None => net
                .stages
                .iter()
                .enumerate()
                .filter(|(_, st)| {
                    matches!(
                        st.attention,
                        StageAttention::Dia(_) | StageAttention::StandardLstm(_)
                    )
                })
                .map(|(i, _)| i)
                .collect(),
        };
        if stages.is_empty() {
            return Err(Error::Config(
                "no stage carries a recurrent attention unit to analyze".into(),
            ));
        }
        std::fs::create_dir_all(&cfg.out)?;
        let mut written = Vec::new();
        for s in stages {
            let trace = capture_traces(&net, &images, s)?;
            let hp = cfg.analysis.forest_params(cfg.train.seed);
            let matrix = integration_matrix(&trace, &hp)?;
            let path = cfg.out.join(format!("integration_stage{}.csv", s + 1));
            emit_heatmap_csv(&matrix, &path)?;
            written.push(path);
        }
        Ok(written)
    };
    match run() {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn cmd_sweep(configs: &[PathBuf], out: &Option<PathBuf>, seed: Option<u64>) -> ExitCode {
    let mut worst = 0u8;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for path in configs {
            let out = out.clone();
            handles.push((
                path.clone(),
                scope.spawn(move || -> Result<(PathBuf, bool), Error> {
                    let mut cfg = parse_config_file(&path)?;
                    if let Some(seed) = seed {
                        cfg.train.seed = seed;
                    }
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "run".into());
                    let base = out.unwrap_or_else(|| cfg.out.clone());
                    let dir = base.join(stem);
                    let outcome = train(&cfg.network, &cfg.train, &dir)?;
                    Ok((dir, outcome.exploded))
                }),
            ));
        }
        for (path, h) in handles {
            match h.join() {
                Ok(Ok((dir, exploded))) => {
                    println!(
                        "{}: {} ({})",
                        path.display(),
                        if exploded { "exploded" } else { "ok" },
                        dir.display()
                    );
                    if exploded {
                        worst = worst.max(3);
                    }
                }
                Ok(Err(e)) => {
                    eprintln!("{}: error: {e}", path.display());
                    worst = worst.max(exit_code_for(&e));
                }
                Err(_) => {
                    eprintln!("{}: worker panicked", path.display());
                    worst = worst.max(2);
                }
            }
        }
    });
    ExitCode::from(worst)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Params { config } => cmd_params(config),
        Command::Gradcheck { scope, seed, inject_fault } => cmd_gradcheck(scope, *seed, *inject_fault),
        Command::Analyze { common, checkpoint, stage } => cmd_analyze(common, checkpoint, *stage),
        Command::Sweep { config, out, seed } => cmd_sweep(config, out, *seed),
    }
}
