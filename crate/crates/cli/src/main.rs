use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use seqada::active::{write_atomic, RunRecord, Strategy};
use seqada::experiment::{outcome, prepare_seed, pretrain, run_arm, ExperimentConfig, ModalityMode};
use seqada::metrics::{aggregate, comparison_csv, comparison_text, ArmOutcome};
use seqada::model::{load_model, save_model};
use seqada::phantom::{read_dataset, write_dataset};
use seqada::Error;

#[derive(Parser)]
#[command(name = "seqada", version, about = "Active sequential domain adaptation on synthetic multi-modal volumes")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source and target datasets.
    Gen,
    /// Train the source model and report its held-out source Dice.
    Pretrain,
    /// Run every arm for every seed.
    Run,
    /// Aggregate run records into comparison tables.
    Report,
}

#[derive(Args)]
struct Overrides {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds: `a..b` (inclusive), a single seed, or a comma list.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Comma-separated strategies: ours, random, oneoff, entropy.
    #[arg(long, global = true)]
    strategies: Option<String>,
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    /// Total fine-tuning epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Parallel runs (defaults to the number of CPUs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Also write each run's per-round candidate scores as CSV.
    #[arg(long, global = true)]
    score_dump: bool,
    /// `multi` or `single:<l>`.
    #[arg(long, global = true)]
    modality: Option<String>,
    /// Skip the lower and upper bound arms.
    #[arg(long, global = true)]
    no_bounds: bool,
}

/// `println!` that ignores a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    let bad = || Error::Config(format!("cannot parse seeds {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

fn load_config(o: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &o.out {
        cfg.output_dir = p.clone();
    }
    if let Some(s) = &o.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(s) = &o.strategies {
        cfg.strategies = s
            .split(',')
            .filter(|x| !x.trim().is_empty())
            .map(str::parse::<Strategy>)
            .collect::<Result<_, _>>()?;
    }
    if let Some(b) = o.budget {
        cfg.budget = b;
    }
    if let Some(s) = o.stride {
        cfg.stride = s;
    }
    if let Some(t) = o.epochs {
        cfg.train.total_epochs = t;
    }
    if let Some(m) = &o.modality {
        cfg.modality_mode = m.parse::<ModalityMode>()?;
    }
    if o.no_bounds {
        cfg.bounds = false;
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("config error: {p}");
        }
        return Err(Error::Config(format!("{} problem(s) in the configuration", problems.len())));
    }
    Ok(cfg)
}

fn model_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .join("models")
        .join(format!("source_{}.aseg", cfg.modality_mode.slug()))
}

fn mkdir(p: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn cmd_gen(cfg: &ExperimentConfig) -> Result<(), Error> {
    mkdir(&cfg.output_dir)?;
    let source = cfg.gen_source()?;
    write_dataset(cfg.output_dir.join("source"), &source)?;
    let target = cfg.gen_target()?;
    write_dataset(cfg.output_dir.join("target"), &target)?;
    write_atomic(cfg.output_dir.join("experiment.json"), cfg.to_json().as_bytes())?;
    say!(
        "wrote {} source and {} target samples to {}",
        source.len(),
        target.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<(), Error> {
    let source = read_dataset(cfg.output_dir.join("source"))?;
    let (model, report) = pretrain(cfg, &source)?;
    mkdir(&cfg.output_dir.join("models"))?;
    let path = model_path(cfg);
    save_model(&path, &model)?;
    let json = serde_json::json!({
        "modality": cfg.modality_mode.to_string(),
        "epochs": cfg.pretrain.total_epochs,
        "source_eval_dice_pct": report.dice_pct,
        "source_eval_miou_pct": report.miou_pct,
        "checksum": model.checksum(),
    });
    write_atomic(path.with_extension("json"), format!("{json:#}\n").as_bytes())?;
    say!(
        "source model ({}) held-out source Dice {:.2}% mIoU {:.2}% -> {}",
        cfg.modality_mode,
        report.dice_pct,
        report.miou_pct,
        path.display()
    );
    Ok(())
}

fn write_record(dir: &Path, r: &RunRecord, secs: f64, score_dump: bool) -> Result<(), Error> {
    let stem = r.file_stem();
    write_atomic(dir.join(format!("{stem}.json")), (r.to_json()? + "\n").as_bytes())?;
    write_atomic(dir.join(format!("{stem}.epochs.csv")), r.epoch_csv().as_bytes())?;
    write_atomic(
        dir.join(format!("{stem}.timing.json")),
        format!("{{\"wall_clock_s\": {secs:.3}}}\n").as_bytes(),
    )?;
    if score_dump && !r.rounds.is_empty() {
        write_atomic(dir.join(format!("{stem}.scores.csv")), r.score_dump_csv().as_bytes())?;
    }
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig, jobs: Option<usize>, score_dump: bool) -> Result<(), Error> {
    let target = read_dataset(cfg.output_dir.join("target"))?;
    let model = load_model(model_path(cfg))?;
    let dir = cfg.output_dir.join("runs").join(cfg.modality_mode.slug());
    mkdir(&dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let arms = cfg.arms();
    let done: Vec<Vec<ArmOutcome>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let data = prepare_seed(cfg, &target, seed)?;
                arms.par_iter()
                    .map(|&arm| {
                        let start = Instant::now();
                        let r = run_arm(cfg, &data, &model, arm)?;
                        write_record(&dir, &r, start.elapsed().as_secs_f64(), score_dump)?;
                        eprintln!(
                            "seed {seed:>3} {:<8} Dice {:6.2}%",
                            r.arm, r.final_eval.dice_pct
                        );
                        Ok(outcome(&r))
                    })
                    .collect::<Result<Vec<_>, Error>>()
            })
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let n: usize = done.iter().map(Vec::len).sum();
    say!("{n} run records written to {}", dir.display());
    Ok(())
}

fn read_records(dir: &Path) -> Result<Vec<RunRecord>, Error> {
    let io = |p: &Path, e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    let mut paths = Vec::new();
    if dir.is_dir() {
        for sub in std::fs::read_dir(dir).map_err(|e| io(dir, e))? {
            let sub = sub.map_err(|e| io(dir, e))?.path();
            if !sub.is_dir() {
                continue;
            }
            for f in std::fs::read_dir(&sub).map_err(|e| io(&sub, e))? {
                let f = f.map_err(|e| io(&sub, e))?.path();
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.ends_with(".json") && !name.ends_with(".timing.json") {
                    paths.push(f);
                }
            }
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            RunRecord::from_json(&text).map_err(|e| Error::Format {
                offset: 0,
                message: format!("{}: {e}", p.display()),
            })
        })
        .collect()
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<(), Error> {
    let runs = cfg.output_dir.join("runs");
    let records = read_records(&runs)?;
    if records.is_empty() {
        return Err(Error::Io {
            path: runs,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no run records"),
        });
    }
    let mut modes: Vec<&str> = records.iter().map(|r| r.modality.as_str()).collect();
    modes.sort_unstable();
    modes.dedup();
    let main_mode = if modes.contains(&"multi") { "multi" } else { modes[0] };
    let main: Vec<ArmOutcome> = records
        .iter()
        .filter(|r| r.modality == main_mode)
        .map(outcome)
        .collect();
    let table = aggregate(&main)?;
    let ablation: Vec<ArmOutcome> = records
        .iter()
        .filter(|r| r.arm == "ours")
        .map(|r| ArmOutcome {
            arm: r.modality.clone(),
            ..outcome(r)
        })
        .collect();
    let dir = cfg.output_dir.join("report");
    mkdir(&dir)?;
    write_atomic(dir.join("comparison.csv"), comparison_csv(&table).as_bytes())?;
    let text = comparison_text(&table);
    write_atomic(dir.join("comparison.txt"), text.as_bytes())?;
    say!("strategies ({main_mode})\n{text}");
    if !ablation.is_empty() {
        let rows = aggregate(&ablation)?;
        write_atomic(dir.join("ablation.csv"), comparison_csv(&rows).as_bytes())?;
        let text = comparison_text(&rows);
        write_atomic(dir.join("ablation.txt"), text.as_bytes())?;
        say!("modalities (ours)\n{text}");
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli.opts).and_then(|cfg| match cli.cmd {
        Cmd::Gen => cmd_gen(&cfg),
        Cmd::Pretrain => cmd_pretrain(&cfg),
        Cmd::Run => cmd_run(&cfg, cli.opts.jobs, cli.opts.score_dump),
        Cmd::Report => cmd_report(&cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
