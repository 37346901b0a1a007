//! `trajopt`: runs the pipeline phases, baselines and sweeps from a config file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use trajopt::baselines::{gp_ei_run, grad_ascent_baseline, random_hypercube_baseline, GpConfig, GradAscentConfig};
use trajopt::harness::config::OUT_ROOT_ENV;
use trajopt::harness::experiments::{default_sweep, GP_CANDIDATES, GP_INIT, GP_ITERS, GP_TASKS};
use trajopt::harness::pipeline::{make_dataset, stage_build_trajs, stage_gen_data, stage_rollout, stage_train};
use trajopt::harness::{ablate, ablation_csv, emit_plotdata, reproduce, PlotKind, RunConfig};
use trajopt::seed::SeedStream;
use trajopt::theory::{check_fixture, interior_fixture_family, premise_fixture_family};
use trajopt::TaskSpec;

#[derive(Parser)]
#[command(name = "trajopt", version, about = "Offline black-box optimization with regret-conditioned sequence models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML). Without it the task preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task preset when no config file is given.
    #[arg(long, global = true, default_value = "branin")]
    task: String,
    /// Preset size: paper or desk.
    #[arg(long, global = true, default_value = "paper")]
    profile: String,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override (default from the config or $TRAJOPT_OUT).
    #[arg(long, global = true, env = OUT_ROOT_ENV)]
    out: Option<PathBuf>,
    /// Directory for trained models keyed by their training settings.
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and truncate the offline dataset.
    GenData,
    /// Build trajectories from the saved dataset.
    BuildTrajs,
    /// Train on the saved trajectories.
    Train,
    /// Roll out the saved model and score its candidates.
    Rollout,
    /// Non-sequence baselines on the configured dataset.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        /// Box half-width as a fraction of the domain (hypercube only).
        #[arg(long, default_value_t = 0.1)]
        width: f64,
    },
    /// GP-EI runs on the synthetic 2-D functions.
    GpObserve {
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
    /// Monte-Carlo checks of the narrow-high-region propositions.
    CheckTheory {
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
    },
    /// Sweep one setting over several seeds.
    Ablate {
        name: String,
        /// Comma-separated sweep values (default: the built-in sweep).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Multi-seed summary table for a task.
    Reproduce {
        task: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Write CSV data for histograms, IRB sweeps or GP traces.
    Plotdata {
        #[arg(value_enum)]
        kind: PlotArg,
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    GradAscent,
    Hypercube,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotArg {
    Hist,
    Irb,
    Gp,
}

fn load_config(g: &Global, task_override: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::preset(task_override.unwrap_or(&g.task), g.profile.parse()?)?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output.dir = o.clone();
    }
    if let Some(c) = &g.cache {
        cfg.output.cache_dir = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn seed_list(base: u64, n: u64) -> Vec<u64> {
    (0..n).map(|i| base + i).collect()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    let threads = if g.deterministic { Some(1) } else { g.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let reproduce_task = match &cli.command {
        Command::Reproduce { task, .. } => Some(task.as_str()),
        _ => None,
    };
    let cfg = load_config(g, reproduce_task)?;
    let dir = cfg.output.dir.clone();
    match cli.command {
        Command::GenData => println!("wrote {}", stage_gen_data(&cfg, &dir)?.display()),
        Command::BuildTrajs => println!("wrote {}", stage_build_trajs(&cfg, &dir)?.display()),
        Command::Train => println!("wrote {}", stage_train(&cfg, &dir)?.display()),
        Command::Rollout => {
            let r = stage_rollout(&cfg, &dir)?;
            println!(
                "best {} median {} dataset best {} queries {}",
                r.best_value, r.median_value, r.dataset_best, r.queries_used
            );
        }
        Command::Baseline { kind, width } => {
            let ds = make_dataset(&cfg)?;
            let seeds = SeedStream::new(cfg.seed);
            match kind {
                BaselineKind::GradAscent => {
                    let r = grad_ascent_baseline(&ds, &GradAscentConfig::default(), seeds.derive("grad_ascent", 0))?;
                    println!("best {} surrogate mse {}", r.best_value, r.surrogate_mse);
                    write_json(&dir.join("grad_ascent.json"), &r)?;
                }
                BaselineKind::Hypercube => {
                    let q = cfg.rollout.query_budget;
                    let r = random_hypercube_baseline(&ds, width, q, seeds.derive("hypercube", 0))?;
                    println!("best {}", r.best_value);
                    write_json(&dir.join("hypercube.json"), &r)?;
                }
            }
        }
        Command::GpObserve { runs } => {
            let mut rows = Vec::new();
            for name in GP_TASKS {
                let task = TaskSpec::by_name(name)?;
                let mut up = 0;
                for r in 0..runs {
                    let seed = SeedStream::new(cfg.seed).derive("gp", r as u64);
                    let run = gp_ei_run(&task, GP_INIT, GP_ITERS, GP_CANDIDATES, &GpConfig::default(), seed)?;
                    let gain = run.half_gain();
                    up += usize::from(gain > 0.0);
                    rows.push(serde_json::json!({"task": name, "run": r, "half_gain": gain, "best": run.best_so_far().last()}));
                }
                println!("{name}: second half above first in {up}/{runs} runs");
            }
            write_json(&dir.join("gp_observe.json"), &rows)?;
        }
        Command::CheckTheory { samples } => {
            let mut reports = Vec::new();
            for fx in premise_fixture_family().iter().chain(&interior_fixture_family()) {
                let r = check_fixture(fx, samples, cfg.seed)?;
                println!(
                    "{:<12} eps {:.2} |H| {:.4} |Hc| {:.4} sep {:.1} sigma, L {:.4} <= {:.4}: {}, boundary not high: {}",
                    r.name, r.epsilon, r.vol_h, r.vol_hc, r.separation_sigma, r.lipschitz_estimate, r.premise_bound,
                    r.premise_holds, r.boundary_not_high
                );
                reports.push(r);
            }
            write_json(&dir.join("theory.json"), &reports)?;
        }
        Command::Ablate { name, values, seeds } => {
            let values = match values {
                Some(v) => v,
                None => default_sweep(&name, &cfg.task_spec()?)?,
            };
            let rows = ablate(&name, &cfg, &values, &seed_list(cfg.seed, seeds))?;
            let path = dir.join(format!("ablate_{name}.csv"));
            fs::create_dir_all(&dir)?;
            fs::write(&path, ablation_csv(&rows))?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
        }
        Command::Reproduce { task, seeds } => {
            if cfg.task.name != task {
                bail!("config task {} does not match requested task {task}", cfg.task.name);
            }
            let s = reproduce(&cfg, &seed_list(cfg.seed, seeds))?;
            for row in &s.rows {
                println!("{:<14} {:.3} +- {:.3}", row.method, row.mean, row.std);
            }
            write_json(&dir.join(format!("reproduce_{task}.json")), &s)?;
        }
        Command::Plotdata { kind, runs } => {
            let kind = match kind {
                PlotArg::Hist => PlotKind::Hist,
                PlotArg::Irb => PlotKind::Irb,
                PlotArg::Gp => PlotKind::Gp,
            };
            for p in emit_plotdata(&cfg, kind, &dir, runs)? {
                println!("wrote {}", p.display());
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}
