use std::io::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use flowdistill_cli::ablate::{run_grid, AblationGrid, TABLE_COLUMNS};
use flowdistill_cli::config::RunConfig;
use flowdistill_cli::pipeline;
use flowdistill_cli::report;
use flowdistill_core::rng::derive_seed;
use flowdistill_core::toydata::DataSpec;
use flowdistill_core::{Error, Result, TrainEnd};

#[derive(Parser)]
#[command(name = "flowdistill", version, about = "Progressive distillation of a conditional flow-matching model on synthetic sequence data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        /// DataSpec as a JSON document.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's sample count.
        #[arg(long)]
        count: Option<usize>,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the flow-matching teacher.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the teacher into the 4-step student.
    DistillDmd {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Progressive adversarial distillation from a stage-0 checkpoint.
    DistillPad {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated stage indices, e.g. 1,2,3.
        #[arg(long, default_value = "1,2,3")]
        stages: String,
        /// Output directory for stage checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint at a fixed per-sample evaluation budget.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        nfe: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        n_eval: usize,
        /// Classifier-free guidance scale (two evaluations per step).
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Metrics CSV to append to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid over a shared per-seed distilled base.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metrics CSV to append to (resumes completed cells).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a metrics CSV into a markdown summary and SVG charts.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plots: PathBuf,
    },
}

fn read_data_spec(path: &PathBuf) -> Result<DataSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read spec {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid data spec: {e}")))
}

/// Held-out evaluation set: same shape as the training spec, disjoint seed.
fn eval_dataset(spec: &DataSpec, n_eval: usize) -> Result<flowdistill_core::Dataset> {
    let spec = DataSpec {
        count: n_eval.max(1024),
        seed: derive_seed(spec.seed, 0x5eed_e7a1),
        ..spec.clone()
    };
    flowdistill_core::generate(&spec)
}

fn parse_stages(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let k: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad stage index {part}")))?;
        out.push(k);
    }
    if out.is_empty() {
        return Err(Error::config("no stages requested"));
    }
    Ok(out)
}

fn append_metrics_row(
    out: &PathBuf,
    seed: u64,
    report: &flowdistill_core::MetricsReport,
) -> Result<()> {
    let new = !out.exists();
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(out)?;
    if new {
        writeln!(f, "{}", TABLE_COLUMNS.join(","))?;
    }
    writeln!(
        f,
        "eval,,,,,,{seed},{:.6},{:.6},{:.6},{},{:.3}",
        report.fd, report.energy, report.sync, report.nfe_per_sample, report.wall_ms
    )?;
    Ok(())
}

fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { spec, out, count, seed } => {
            let mut spec = read_data_spec(&spec)?;
            if let Some(c) = count {
                spec.count = c;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            let ds = pipeline::gen_data(&spec, &out)?;
            println!("wrote {} samples to {}", ds.samples.len(), out.display());
            Ok(0)
        }
        Command::TrainTeacher { config, data, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let data = pipeline::load_data(&data)?;
            match pipeline::train_teacher_to(&cfg, &data, &out)? {
                TrainEnd::Completed(_) => {
                    println!("teacher checkpoint: {}", out.display());
                    Ok(0)
                }
                TrainEnd::Diverged { step, .. } => {
                    eprintln!("error: kind=numeric msg=\"teacher diverged at step {step}; last finite checkpoint saved\"");
                    Ok(4)
                }
            }
        }
        Command::DistillDmd { teacher, config, data, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let data = pipeline::load_data(&data)?;
            match pipeline::distill_dmd_to(&cfg, &teacher, &data, &out)? {
                TrainEnd::Completed(()) => {
                    println!("stage-0 checkpoint: {}", out.display());
                    Ok(0)
                }
                TrainEnd::Diverged { step, .. } => {
                    eprintln!("error: kind=numeric msg=\"dmd diverged at step {step}; last finite checkpoint saved\"");
                    Ok(4)
                }
            }
        }
        Command::DistillPad { init, config, data, stages, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let data = pipeline::load_data(&data)?;
            let ks = parse_stages(&stages)?;
            match pipeline::distill_pad_to(&cfg, &init, &data, &ks, &out)? {
                TrainEnd::Completed(paths) => {
                    for p in paths {
                        println!("stage checkpoint: {}", p.display());
                    }
                    Ok(0)
                }
                TrainEnd::Diverged { state, step } => {
                    for p in state {
                        println!("stage checkpoint: {}", p.display());
                    }
                    eprintln!("error: kind=numeric msg=\"pad diverged at step {step}; last finite checkpoints saved\"");
                    Ok(4)
                }
            }
        }
        Command::Eval { ckpt, nfe, data, n_eval, guidance, seed, out } => {
            let data = pipeline::load_data(&data)?;
            let (report, _) = pipeline::eval_checkpoint(&ckpt, nfe, guidance, &data, n_eval, seed)?;
            append_metrics_row(&out, seed, &report)?;
            println!(
                "fd {:.6} energy {:.6} sync {:.4} nfe/sample {} wall {:.3} ms",
                report.fd, report.energy, report.sync, report.nfe_per_sample, report.wall_ms
            );
            Ok(0)
        }
        Command::Ablate { grid, config, data, out } => {
            let cfg = RunConfig::from_file(&config)?;
            let grid = AblationGrid::from_file(&grid)?;
            let train = pipeline::load_data(&data)?;
            let eval = eval_dataset(&train.spec, cfg.eval.n_eval)?;
            let work_dir = PathBuf::from(&cfg.out_dir);
            let n = run_grid(&cfg, &grid, &train, &eval, &work_dir, &out)?;
            println!("completed {n} grid cells; table: {}", out.display());
            Ok(0)
        }
        Command::Report { input, plots } => {
            let paths = report::emit(&input, &plots)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(0)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Shape(_) => "config",
        Error::Data(_) | Error::Io(_) => "data",
        Error::Numeric(_) => "numeric",
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: kind={} msg=\"{e}\"", kind(&e));
            exit_code(&e)
        }
    };
    std::process::exit(code);
}
