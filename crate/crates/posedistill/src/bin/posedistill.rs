//! Command-line interface for the pose-distillation pipeline.
//!
//! Four verbs cover the pipeline end to end:
//!
//! * `generate` — render a synthetic dataset from a config file;
//! * `train`    — train the multi-modal teacher or an image-only student;
//! * `eval`     — score a checkpoint on a dataset split and write metrics.json;
//! * `ablate`   — run the full strategy/ablation grid over several seeds.
//!
//! All hyperparameters live in the config file (see `RunConfig`); flags only
//! choose verbs and paths. Every output directory receives a
//! `config.resolved.cfg` snapshot with the configuration hash, so artifacts
//! always record what produced them.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or corrupt-file
//! error, 4 incompatible artifacts, 5 numerical failure.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as ProcCommand};

use clap::{Parser, Subcommand};

use posedistill::config::RunConfig;
use posedistill::datagen::{generate_dataset, read_dataset, write_dataset, Dataset, SplitSpec};
use posedistill::error::{Error, Result};
use posedistill::evalharness::{
    evaluate, run_ablation, run_ablation_entry, AblationSpec, EvalSplit, ABLATION_CSV,
};
use posedistill::trainer::{
    train_jointcl, train_stage1_teacher, train_stage2_student, StageReport, Strategy,
};

/// Environment variable capping how many worker processes `ablate` may run
/// concurrently (default 1 = run everything in this process).
const THREADS_VAR: &str = "POSEDISTILL_THREADS";

#[derive(Parser)]
#[command(
    name = "posedistill",
    version,
    about = "Synthetic-benchmark pipeline for distilling a multi-modal pose \
             teacher into an image-only student",
    after_help = "Exit codes: 2 configuration, 3 I/O or corrupt file, \
                  4 incompatible artifacts, 5 numerical failure."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic pose dataset into a directory.
    Generate {
        /// Run configuration file (key = value); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher (`--stage teacher`) or a student (`--stage student`).
    Train {
        /// Training stage: "teacher" or "student".
        #[arg(long)]
        stage: String,
        /// Recipe: teacher|jointcl for --stage teacher, or
        /// baseline|3daug|onesidecl for --stage student.
        /// Defaults: "teacher" for the teacher stage, "3daug" for the student stage.
        #[arg(long)]
        strategy: Option<String>,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Run configuration file (key = value); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Teacher checkpoint directory (required for 3daug/onesidecl students).
        #[arg(long = "teacher-ckpt")]
        teacher_ckpt: Option<PathBuf>,
        /// Output run directory (checkpoints, train.log.jsonl, config snapshot).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split; writes a metrics report.
    Eval {
        /// Checkpoint directory (a `best/` or `last/` directory of a run).
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// Which split to score: "train" or "val" (val never overlaps train).
        #[arg(long, default_value = "val")]
        split: String,
        /// Where to write the JSON metrics report.
        #[arg(long, default_value = "metrics.json")]
        report: PathBuf,
    },
    /// Run the full strategy/ablation grid and write ablation.csv.
    Ablate {
        /// Run configuration file (key = value); defaults apply if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of seeds (0, 1, ..., seeds-1); one run of every
        /// configuration per seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Output directory (dataset, per-run directories, ablation.csv).
        #[arg(long)]
        out: PathBuf,
        /// Internal: run only this seed's share of the grid, then exit.
        #[arg(long, hide = true)]
        worker_seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Generate { config, out } => cmd_generate(config.as_deref(), &out),
        Cmd::Train { stage, strategy, data, config, teacher_ckpt, out } => cmd_train(
            &stage,
            strategy.as_deref(),
            &data,
            config.as_deref(),
            teacher_ckpt.as_deref(),
            &out,
        ),
        Cmd::Eval { ckpt, data, split, report } => cmd_eval(&ckpt, &data, &split, &report),
        Cmd::Ablate { config, seeds, out, worker_seed } => {
            cmd_ablate(config.as_deref(), seeds, &out, worker_seed)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn split_text(split: &SplitSpec) -> String {
    match split {
        SplitSpec::FullySupervised => "fully_supervised".to_string(),
        SplitSpec::ZeroShot { unseen } => format!(
            "zero_shot (unseen: {})",
            unseen.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
        ),
        SplitSpec::FewShot { unseen, k } => format!(
            "few_shot k={k} (unseen: {})",
            unseen.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
        ),
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

fn cmd_generate(config: Option<&Path>, out: &Path) -> Result<i32> {
    let cfg = load_config(config)?;
    let dataset = generate_dataset(&cfg.dataset)?;
    write_dataset(out, &dataset)?;
    cfg.write_snapshot(out)?;

    let m = &dataset.manifest;
    println!("dataset: {}", out.display());
    println!("config sha256: {}", cfg.sha256_hex());
    println!(
        "categories ({}): {}",
        m.config.categories.len(),
        m.config.categories.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
    );
    println!(
        "samples: {} ({} train / {} val)",
        m.total_samples,
        m.split.train.len(),
        m.split.val.len()
    );
    println!(
        "resolution: {r}x{r}   points per cloud: {p}   noise sigma: {s}",
        r = m.config.resolution,
        p = m.config.n_points,
        s = m.config.noise_sigma
    );
    println!("split: {}", split_text(&m.config.split));
    println!("blob crc32: {:08x}", m.blob_crc32);
    Ok(0)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(
    stage: &str,
    strategy: Option<&str>,
    data: &Path,
    config: Option<&Path>,
    teacher_ckpt: Option<&Path>,
    out: &Path,
) -> Result<i32> {
    let cfg = load_config(config)?;
    let dataset = read_dataset(data)?;
    cfg.write_snapshot(out)?;

    let report: StageReport;
    let resolved: Strategy;
    match stage {
        "teacher" => {
            if teacher_ckpt.is_some() {
                return Err(Error::Config(
                    "--teacher-ckpt only applies to --stage student".to_string(),
                ));
            }
            resolved = Strategy::from_name(strategy.unwrap_or("teacher"))?;
            report = match resolved {
                Strategy::TeacherOnly => {
                    train_stage1_teacher(&dataset, &cfg.encoder, &cfg.train, out)?
                }
                Strategy::JointCL => train_jointcl(&dataset, &cfg.encoder, &cfg.train, out)?,
                other => {
                    return Err(Error::Config(format!(
                        "strategy {other} trains a student; use --stage student"
                    )))
                }
            };
        }
        "student" => {
            resolved = Strategy::from_name(strategy.unwrap_or("3daug"))?;
            report = train_stage2_student(
                &dataset,
                teacher_ckpt,
                &cfg.encoder,
                &cfg.train,
                resolved,
                out,
            )?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown stage {other:?}; expected teacher or student"
            )))
        }
    }

    println!("stage: {stage}   strategy: {resolved}");
    println!("config sha256: {}", cfg.sha256_hex());
    println!("epochs run: {}", report.epochs_run);
    println!(
        "best epoch: {}   val Acc30: {}   val MedErr: {}",
        report.best.epoch, report.best.acc30, report.best.mederr
    );
    println!(
        "checkpoints: {} , {}",
        report.out_dir.join("best").display(),
        report.out_dir.join("last").display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(ckpt: &Path, data: &Path, split: &str, report_path: &Path) -> Result<i32> {
    let split = EvalSplit::from_name(split)?;
    let dataset = read_dataset(data)?;
    let report = evaluate(ckpt, &dataset, split)?;
    report.write(report_path)?;

    println!("checkpoint: {}", ckpt.display());
    println!("split: {}   samples: {}", report.split, report.count);
    println!("Acc30: {}", report.acc30);
    println!("MedErr: {}", report.mederr);
    println!("report: {}", report_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// Read and validate the worker-process cap (default 1).
fn worker_cap() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(Error::Config(format!("{THREADS_VAR}: {e}"))),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_VAR} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

/// The dataset used by an ablation lives inside its output directory; reuse
/// it on resume, but never a dataset generated from a different config.
fn ablation_dataset(cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    let dir = out.join("dataset");
    if dir.join("manifest.json").is_file() {
        let ds = read_dataset(&dir)?;
        if ds.manifest.config != cfg.dataset {
            return Err(Error::Config(format!(
                "{} holds a dataset generated from a different config; \
                 use a fresh --out directory",
                dir.display()
            )));
        }
        return Ok(ds);
    }
    let ds = generate_dataset(&cfg.dataset)?;
    write_dataset(&dir, &ds)?;
    Ok(ds)
}

/// Run every grid cell for one seed in-process (worker mode body).
fn run_seed_share(spec: &AblationSpec, seed: u64, cfg: &RunConfig, out: &Path, ds: &Dataset) -> Result<()> {
    for entry in &spec.entries {
        let report = run_ablation_entry(entry, seed, ds, &cfg.encoder, &cfg.train, out)?;
        println!(
            "{} seed {}: Acc30 {}  MedErr {}",
            entry.name, seed, report.acc30, report.mederr
        );
    }
    Ok(())
}

/// Spawn one worker process per seed, at most `cap` alive at a time. Each
/// worker re-invokes this binary with `--worker-seed`; run directories are
/// disjoint across seeds, so workers never contend on files. On a worker
/// failure the remaining workers are stopped and its exit code is returned.
fn run_workers(config: Option<&Path>, seeds: u64, out: &Path, cap: usize) -> Result<i32> {
    let exe = std::env::current_exe()?;
    let spawn = |seed: u64| -> Result<(u64, Child)> {
        let mut cmd = ProcCommand::new(&exe);
        cmd.arg("ablate")
            .arg("--seeds")
            .arg(seeds.to_string())
            .arg("--out")
            .arg(out)
            .arg("--worker-seed")
            .arg(seed.to_string());
        if let Some(c) = config {
            cmd.arg("--config").arg(c);
        }
        Ok((seed, cmd.spawn()?))
    };

    let mut pending: VecDeque<u64> = (0..seeds).collect();
    let mut running: VecDeque<(u64, Child)> = VecDeque::new();
    loop {
        while running.len() < cap {
            let Some(seed) = pending.pop_front() else { break };
            running.push_back(spawn(seed)?);
        }
        let Some((seed, mut child)) = running.pop_front() else { break };
        let status = child.wait()?;
        if !status.success() {
            for (_, other) in running.iter_mut() {
                let _ = other.kill();
                let _ = other.wait();
            }
            eprintln!("error: ablation worker for seed {seed} failed");
            return Ok(status.code().unwrap_or(1));
        }
    }
    Ok(0)
}

fn cmd_ablate(config: Option<&Path>, seeds: u64, out: &Path, worker_seed: Option<u64>) -> Result<i32> {
    let cfg = load_config(config)?;
    let spec = AblationSpec::standard((0..seeds).collect());
    spec.validate()?;

    if let Some(seed) = worker_seed {
        // Worker mode: the parent already generated the dataset.
        let ds = read_dataset(&out.join("dataset"))?;
        run_seed_share(&spec, seed, &cfg, out, &ds)?;
        return Ok(0);
    }

    let ds = ablation_dataset(&cfg, out)?;
    cfg.write_snapshot(out)?;

    let cap = worker_cap()?;
    if cap > 1 && seeds > 1 {
        let code = run_workers(config, seeds, out, cap)?;
        if code != 0 {
            return Ok(code);
        }
        // All runs exist now; this pass just re-scores them and writes the
        // table, so the CSV bytes never depend on worker scheduling.
    }
    let table = run_ablation(&spec, &ds, &cfg.encoder, &cfg.train, out)?;

    println!("ablation: {}", out.join(ABLATION_CSV).display());
    println!("config sha256: {}", cfg.sha256_hex());
    println!("rows: {}", table.rows.len());
    println!("configuration        runs  median Acc30  median MedErr");
    for s in &table.summary {
        println!(
            "{:<20} {:<5} {:<13} {}",
            s.configuration, s.runs, s.median_acc30, s.median_mederr
        );
    }
    Ok(0)
}
