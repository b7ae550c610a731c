//! `upcycle`: command-line front end for the experiment pipelines.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use upcycle_core::lora::RankScale;
use upcycle_core::merging::{compute_task_vector, merge, tune};
use upcycle_core::moe::moefy;
use upcycle_core::store::{load_archive, load_checkpoint, save, save_archive};
use upcycle_core::{LoraModel, MergeConfig, MergeMethod, MoeModel};
use upcycle_harness::pipelines::post_train_moe_model;
use upcycle_harness::setup::{build_context, generate_datasets, train_expert, ExpertPlan, SeedContext};
use upcycle_harness::{ExperimentConfig, Mode, Runner};
use upcycle_train::synthetic::{write_dataset, Split};
use upcycle_train::train::write_metrics;
use upcycle_train::NoHooks;

#[derive(Parser)]
#[command(name = "upcycle", version, about = "Merge, MoE-fy and analyze fine-tuned checkpoints")]
struct Cli {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true, env = "UPCYCLE_SEED")]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SweepKind {
    Duration,
    Rank,
    Moe,
    Difficulty,
    EarlyStop,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as JSON.
    PrintConfig,
    /// Write every task's dataset as CSV plus a JSON spec sidecar.
    GenData,
    /// Pretrain the shared base model and save it.
    Pretrain,
    /// Fine-tune one expert from the pretrained base.
    Finetune {
        #[arg(long)]
        task: String,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        early_stop: bool,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Merge expert checkpoints into the base with fixed hyperparameters.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        experts: Vec<PathBuf>,
        #[arg(long)]
        method: MergeMethod,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 20.0)]
        keep_pct: f64,
        #[arg(long, default_value_t = 0.9)]
        drop_prob: f64,
        #[arg(long, default_value_t = 0)]
        merge_seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Grid-search merge hyperparameters on the validation splits.
    Tune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        experts: Vec<PathBuf>,
        #[arg(long)]
        method: MergeMethod,
        /// Save the merged checkpoint for the selected config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Build a MoE model from LoRA adapter files with Arrow routing.
    Moefy {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        adapters: Vec<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Post-train the routers and experts of a MoE model.
    TrainMoe {
        #[arg(long)]
        moe: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// EL2N difficulty scores of the train splits.
    Score,
    /// Loss shares, forgotten examples and the pruning sweep.
    Analyze,
    /// Compare longest, best and early-stopped experts.
    EarlyStop,
    /// Run one of the sweeps (or all of them).
    Sweep {
        #[arg(long, value_enum, default_value_t = SweepKind::Duration)]
        kind: SweepKind,
    },
    /// Rebuild tables from cached cells without computing anything.
    Report,
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds[0]
}

/// Context whose base is read from disk instead of pretrained.
fn context_with_base(cfg: &ExperimentConfig, base: upcycle_core::Checkpoint) -> anyhow::Result<SeedContext> {
    let seed = first_seed(cfg);
    let datasets = generate_datasets(cfg, seed)?;
    Ok(SeedContext {
        seed,
        task_ids: datasets.iter().map(|d| d.spec.task_id.clone()).collect(),
        datasets,
        base,
    })
}

fn expert_task_vectors(base: &upcycle_core::Checkpoint, experts: &[PathBuf]) -> anyhow::Result<Vec<upcycle_core::TaskVector>> {
    experts
        .iter()
        .map(|p| {
            let e = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(compute_task_vector(&e, base)?)
        })
        .collect()
}

fn create_dir(p: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::PrintConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
        Command::GenData => {
            for &seed in &cfg.seeds {
                let dir = out.join("data").join(format!("seed{seed}"));
                create_dir(&dir)?;
                for ds in generate_datasets(&cfg, seed)? {
                    write_dataset(&ds, &dir, &ds.spec.task_id)?;
                }
                println!("{}", dir.display());
            }
        }
        Command::Pretrain => {
            let dir = out.join("checkpoints");
            create_dir(&dir)?;
            for &seed in &cfg.seeds {
                let ctx = build_context(&cfg, seed)?;
                let path = dir.join(format!("base_seed{seed}.upck"));
                save(&ctx.base, &path)?;
                println!(
                    "{} test_acc={:.4}",
                    path.display(),
                    ctx.mean_accuracy(&ctx.base, Split::Test)?
                );
            }
        }
        Command::Finetune {
            task,
            steps,
            early_stop,
            rank,
            scale,
        } => {
            let seed = first_seed(&cfg);
            let ctx = build_context(&cfg, seed)?;
            let t = ctx
                .task_ids
                .iter()
                .position(|id| *id == task)
                .with_context(|| format!("unknown task {task:?}"))?;
            let mut pair = cfg.lora_pairs[0];
            if let Some(r) = rank {
                pair = RankScale {
                    rank: r,
                    scale: scale.unwrap_or(pair.scale),
                };
            }
            let mut plan = ExpertPlan::new(t, steps, cfg.mode, pair);
            plan.early_stop = early_stop;
            let e = train_expert(&cfg, &ctx, &plan, &mut NoHooks)?;
            let dir = out.join("checkpoints");
            create_dir(&dir)?;
            let stem = format!("{task}_s{steps}_seed{seed}");
            save(&e.checkpoint, dir.join(format!("{stem}.upck")))?;
            if let Some(lm) = &e.lora {
                save_archive(&lm.to_archive(&task), dir.join(format!("{stem}.lora.upck")))?;
            }
            write_metrics(&e.history, &dir.join(format!("{stem}.metrics.csv")))?;
            let m = ctx.model(&e.checkpoint)?;
            println!(
                "{stem} steps_run={} test_acc={:.4}",
                e.steps_run,
                m.accuracy(&ctx.datasets[t].test)?
            );
        }
        Command::Merge {
            base,
            experts,
            method,
            alpha,
            keep_pct,
            drop_prob,
            merge_seed,
            output,
        } => {
            let base = load_checkpoint(&base)?;
            let tvs = expert_task_vectors(&base, &experts)?;
            let mc = MergeConfig {
                method,
                alpha,
                keep_pct,
                drop_prob,
                seed: merge_seed,
            };
            save(&merge(&base, &tvs, &mc)?, &output)?;
            println!("{} {mc}", output.display());
        }
        Command::Tune {
            base,
            experts,
            method,
            output,
        } => {
            let base = load_checkpoint(&base)?;
            let tvs = expert_task_vectors(&base, &experts)?;
            let ctx = context_with_base(&cfg, base)?;
            let grid = cfg.grid(method, ctx.seed);
            let (best, val) = tune(&ctx.base, &tvs, &grid, |m| ctx.mean_accuracy(m, Split::Val))?;
            let merged = merge(&ctx.base, &tvs, &best)?;
            let test = ctx.mean_accuracy(&merged, Split::Test)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "config": best, "val_acc": val, "test_acc": test, "grid_size": grid.len(),
                }))?
            );
            if let Some(p) = output {
                save(&merged, &p)?;
            }
        }
        Command::Moefy {
            base,
            adapters,
            top_k,
            output,
        } => {
            let base = load_checkpoint(&base)?;
            let lms = adapters
                .iter()
                .map(|p| Ok(LoraModel::from_archive(&load_archive(p)?)?))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let moe = moefy(&base, &lms, top_k.unwrap_or(cfg.moe.top_k), first_seed(&cfg))?;
            save_archive(&moe.to_archive(), &output)?;
            println!("{} init={} experts={}", output.display(), moe.init, lms.len());
        }
        Command::TrainMoe { moe, steps, output } => {
            let moe = MoeModel::from_archive(&load_archive(&moe)?)?;
            let mut cfg = cfg.clone();
            if let Some(s) = steps {
                cfg.moe.post_train_steps = s;
            }
            let ctx = context_with_base(&cfg, moe.base.clone())?;
            let (row, trained) = post_train_moe_model(&cfg, &ctx, &moe, ctx.seed)?;
            save_archive(&trained.to_archive(), &output)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
        }
        Command::Score => {
            let runner = Runner::new(cfg, cli.jobs, false)?;
            for &s in &runner.cfg.seeds.clone() {
                let sc = runner.scores(s)?;
                println!("seed {s}: {} examples scored", sc.entries.len());
            }
            let analysis_scores: Vec<_> = runner
                .cfg
                .seeds
                .iter()
                .map(|&s| runner.scores(s).map(|c| (s, c)))
                .collect::<Result<_, _>>()?;
            let rows: Vec<(u64, &[upcycle_harness::report::ScoreEntry])> =
                analysis_scores.iter().map(|(s, c)| (*s, c.entries.as_slice())).collect();
            upcycle_harness::report::write_scores(&runner.out().join("scores.csv"), &rows)?;
        }
        Command::Analyze => {
            let runner = Runner::new(cfg, cli.jobs, false)?;
            let a = runner.run_difficulty_analysis()?;
            if let Some(share) = a.top_bin_share(runner.cfg.max_duration(), 3) {
                println!("forgotten share of the 3 hardest bins: {share:.4}");
            }
        }
        Command::EarlyStop => {
            let runner = Runner::new(cfg, cli.jobs, false)?;
            let r = runner.run_early_stop()?;
            for row in &r.rows {
                println!("{:<16} {:<20} {:.4}", row.method, row.label, row.mean());
            }
        }
        Command::Sweep { kind } => {
            let runner = Runner::new(cfg, cli.jobs, false)?;
            run_sweeps(&runner, kind)?;
        }
        Command::Report => {
            let runner = Runner::new(cfg, cli.jobs, true)?;
            let mut kinds = vec![SweepKind::Duration, SweepKind::Difficulty, SweepKind::EarlyStop];
            if runner.cfg.mode == Mode::Lora {
                kinds.extend([SweepKind::Rank, SweepKind::Moe]);
            }
            // rebuild whatever the cache covers; incomplete sweeps are skipped
            for kind in kinds {
                if let Err(e) = run_sweeps(&runner, kind) {
                    eprintln!("skipped {kind:?}: {e}");
                }
            }
        }
    }
    Ok(())
}

fn run_sweeps(runner: &Runner, kind: SweepKind) -> anyhow::Result<()> {
    let lora = runner.cfg.mode == Mode::Lora;
    let all = matches!(kind, SweepKind::All);
    if matches!(kind, SweepKind::Rank | SweepKind::Moe) && !lora {
        bail!("this sweep needs mode = lora");
    }
    if matches!(kind, SweepKind::Duration) || all {
        let s = runner.run_duration_sweep()?;
        for m in &runner.cfg.methods {
            println!("{m}: {:?}", s.mean_merge_acc(*m));
        }
    }
    if matches!(kind, SweepKind::Rank) || (all && lora) {
        runner.run_rank_sweep()?;
    }
    if matches!(kind, SweepKind::Moe) || (all && lora) {
        runner.run_moe_sweep()?;
    }
    if matches!(kind, SweepKind::Difficulty) || all {
        runner.run_difficulty_analysis()?;
    }
    if matches!(kind, SweepKind::EarlyStop) || all {
        runner.run_early_stop()?;
    }
    println!("tables written to {}", runner.out().display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
