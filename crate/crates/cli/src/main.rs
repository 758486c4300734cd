use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dwva_core::config::RunConfig;
use dwva_core::train::{
    ablation_csv, datasets, evaluate, evaluate_expert, losses_csv, plan_at, run_ablation, Ablation, Checkpoint,
    EvalOptions, MetricsReport, Selection, Trainer,
};
use dwva_core::world::{
    generate_dataset, read_dataset, render_frame, write_dataset, Episode, Overlay, EXPERT_COLOR, PREDICTED_COLOR,
};
use dwva_core::Error;

#[derive(Parser)]
#[command(
    name = "dwva",
    version,
    about = "Latent world model planner on a synthetic driving world"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate an episode dataset.
    Gen {
        /// Run config JSON; the toy preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Episode count; defaults to the config's training split size.
        #[arg(long)]
        count: Option<usize>,
        /// Base seed, or `auto` to draw one from the OS.
        #[arg(long)]
        seed: Option<String>,
    },
    /// Run one training stage, or all three in order.
    Train {
        #[arg(long)]
        stage: StageArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Initialization seed (or `auto`); ignored when resuming from a checkpoint.
        #[arg(long)]
        seed: Option<String>,
        /// Loss CSV path; defaults to the checkpoint path with `.losses.csv`.
        #[arg(long)]
        losses: Option<PathBuf>,
        /// Stop after this many optimizer steps; the checkpoint can be resumed.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Evaluate a checkpoint or the expert on a dataset.
    Eval {
        #[arg(long, value_enum, default_value = "closed")]
        mode: EvalMode,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `metrics.jsonl` and `summary.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "model")]
        policy: Policy,
        /// Gaussian noise std added to the latents at inference.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Worker threads; 0 reads DWVA_THREADS.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Run an ablation over the configured seeds.
    Ablate {
        /// stages | non-progressive | freeze-backbone | feature-noise
        #[arg(long)]
        variant: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one PPM per frame of an episode with trajectory overlays.
    Render {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        episode: usize,
        #[arg(long, value_enum, default_value = "expert")]
        traj_source: TrajSource,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pixels per grid cell.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
}

#[derive(Clone, Copy, Debug)]
enum StageArg {
    One,
    Two,
    Three,
    All,
}

impl std::str::FromStr for StageArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "1" => StageArg::One,
            "2" => StageArg::Two,
            "3" => StageArg::Three,
            "all" => StageArg::All,
            _ => return Err(format!("expected 1, 2, 3 or all, got '{s}'")),
        })
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalMode {
    Closed,
    Open,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Policy {
    Model,
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum TrajSource {
    Expert,
    Ckpt,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Usage(msg.into()).into()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::toy()),
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
    }
}

fn parse_seed(s: Option<&str>, default: u64) -> Result<u64> {
    match s {
        None => Ok(default),
        Some("auto") => {
            let seed = rand::random::<u64>();
            eprintln!("seed {seed}");
            Ok(seed)
        }
        Some(v) => v
            .parse()
            .map_err(|_| usage(format!("seed must be an integer or 'auto', got '{v}'"))),
    }
}

fn load_data(path: &Path) -> Result<Vec<Episode>> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_gen(config: Option<&Path>, out: &Path, count: Option<usize>, seed: Option<&str>) -> Result<()> {
    let cfg = load_config(config)?;
    let count = count.unwrap_or(cfg.eval.train_episodes);
    let seed = parse_seed(seed, cfg.eval.data_seed)?;
    let t0 = Instant::now();
    let eps = generate_dataset(&cfg.world, count, seed)?;
    write_dataset(out, &eps)?;
    let agents = eps.iter().map(|e| e.current().agents.len()).sum::<usize>() as f64 / count.max(1) as f64;
    println!(
        "{}",
        serde_json::json!({
            "path": out,
            "episodes": count,
            "seed": seed,
            "mean_agents": agents,
            "seconds": t0.elapsed().as_secs_f64(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    stage: StageArg,
    config: Option<&Path>,
    data: &Path,
    ckpt_in: Option<&Path>,
    ckpt_out: &Path,
    seed: Option<&str>,
    losses: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let eps = load_data(data)?;
    let mut trainer = Trainer::new(&cfg, &eps)?;
    let mut state = match ckpt_in {
        Some(p) => load_ckpt(p)?,
        None => {
            if !matches!(stage, StageArg::One | StageArg::All) {
                return Err(usage("stages 2 and 3 need --ckpt-in from the preceding stage"));
            }
            trainer.init(parse_seed(seed, cfg.train.seed)?)?
        }
    };
    let stages: Vec<u8> = match stage {
        StageArg::One => vec![1],
        StageArg::Two => vec![2],
        StageArg::Three => vec![3],
        StageArg::All => {
            let first = if state.complete { state.stage + 1 } else { state.stage };
            if first > 3 {
                return Err(usage(format!("checkpoint already finished stage {}", state.stage)));
            }
            (first.max(1)..=3).collect()
        }
    };
    let mut log = Vec::new();
    let mut budget = stop_after;
    for s in stages {
        let before = log.len();
        trainer.run_stage(&mut state, s, budget, &mut log)?;
        let ran = (log.len() - before) as u64;
        eprintln!(
            "stage {s}: {ran} steps, step {} of {}",
            state.step,
            trainer.stage_steps(s)
        );
        if let Some(b) = budget.as_mut() {
            *b -= ran.min(*b);
        }
        if !state.complete {
            break;
        }
    }
    state.save(ckpt_out)?;
    let csv_path = losses
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt_out.with_extension("losses.csv"));
    std::fs::write(&csv_path, losses_csv(&log))?;
    println!("{}", ckpt_out.display());
    println!("{}", csv_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    mode: EvalMode,
    ckpt: Option<&Path>,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    policy: Policy,
    noise: f64,
    threads: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    let eps = load_data(data)?;
    let report = match policy {
        Policy::Expert => evaluate_expert(&cfg.world, &eps, threads)?,
        Policy::Model => {
            let path = ckpt.ok_or_else(|| usage("--ckpt is required unless --policy expert"))?;
            let state = load_ckpt(path)?;
            let model = cfg.model()?;
            model.check_params(&state.params)?;
            if !(noise >= 0.0) || !noise.is_finite() {
                return Err(usage("--noise must be finite and non-negative"));
            }
            let mut o = EvalOptions::new(Selection::for_stage(state.stage), cfg.eval.eval_seed);
            o.noise_std = noise;
            o.threads = threads;
            evaluate(&model, &state.params, &eps, &o)?
        }
    };
    write_report(out, &report)?;
    let s = &report.summary;
    let view = match mode {
        EvalMode::Closed => serde_json::json!({
            "episodes": s.episodes,
            "pdms": s.pdms,
            "nc": s.nc,
            "dac": s.dac,
            "ttc": s.ttc,
            "comfort": s.comfort,
            "ep": s.ep,
        }),
        EvalMode::Open => serde_json::json!({
            "episodes": s.episodes,
            "horizons": s.horizons,
            "l2": s.l2,
            "l2_avg": s.l2_avg,
            "cr": s.cr,
            "cr_avg": s.cr_avg,
        }),
    };
    println!("{view}");
    Ok(())
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.jsonl"), report.to_jsonl())?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report.summary)?)?;
    Ok(())
}

fn cmd_ablate(variant: &str, config: Option<&Path>, out: &Path) -> Result<()> {
    let variant: Ablation = variant.parse()?;
    let cfg = load_config(config)?;
    let (train, held_out) = datasets(&cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let rows = run_ablation(&cfg, variant, &train, &held_out, Some(out))?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

fn cmd_render(
    data: &Path,
    episode: usize,
    source: TrajSource,
    ckpt: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    scale: usize,
) -> Result<()> {
    let eps = load_data(data)?;
    let ep = eps
        .get(episode)
        .ok_or_else(|| usage(format!("episode {episode} out of range (dataset has {})", eps.len())))?;
    let origin = ep.current().ego;
    let world = |w: &[[f64; 2]]| w.iter().map(|p| origin.to_world(*p)).collect::<Vec<_>>();
    let mut overlays = vec![Overlay {
        points: world(&ep.expert.waypoints),
        color: EXPERT_COLOR,
    }];
    match (source, ckpt) {
        (TrajSource::Ckpt, None) => return Err(usage("--traj-source ckpt needs --ckpt")),
        (TrajSource::Expert, Some(_)) | (TrajSource::Ckpt, Some(_)) => {
            let cfg = load_config(config)?;
            let state = load_ckpt(ckpt.expect("matched"))?;
            let model = cfg.model()?;
            model.check_params(&state.params)?;
            if !ep.cfg.same_layout(&model.world) {
                bail!(Error::Config(
                    "episode does not match the configured world layout".into()
                ));
            }
            let opts = EvalOptions::new(Selection::for_stage(state.stage), cfg.eval.eval_seed);
            let (traj, _) = plan_at(&model, &state.params, ep, episode, &opts)?;
            overlays.push(Overlay {
                points: world(&traj.waypoints),
                color: PREDICTED_COLOR,
            });
        }
        (TrajSource::Expert, None) => {}
    }
    std::fs::create_dir_all(out)?;
    for (i, frame) in ep.frames.iter().enumerate() {
        let path = out.join(format!("frame_{i:02}.ppm"));
        render_frame(&ep.cfg, frame, &overlays, scale, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            config,
            out,
            count,
            seed,
        } => cmd_gen(config.as_deref(), &out, count, seed.as_deref()),
        Cmd::Train {
            stage,
            config,
            data,
            ckpt_in,
            ckpt_out,
            seed,
            losses,
            stop_after,
        } => cmd_train(
            stage,
            config.as_deref(),
            &data,
            ckpt_in.as_deref(),
            &ckpt_out,
            seed.as_deref(),
            losses.as_deref(),
            stop_after,
        ),
        Cmd::Eval {
            mode,
            ckpt,
            config,
            data,
            out,
            policy,
            noise,
            threads,
        } => cmd_eval(
            mode,
            ckpt.as_deref(),
            config.as_deref(),
            &data,
            &out,
            policy,
            noise,
            threads,
        ),
        Cmd::Ablate { variant, config, out } => cmd_ablate(&variant, config.as_deref(), &out),
        Cmd::Render {
            data,
            episode,
            traj_source,
            ckpt,
            config,
            out,
            scale,
        } => cmd_render(
            &data,
            episode,
            traj_source,
            ckpt.as_deref(),
            config.as_deref(),
            &out,
            scale,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Usage(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
