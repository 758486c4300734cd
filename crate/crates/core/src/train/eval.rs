//! Closed- and open-loop evaluation of a checkpoint on held-out episodes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, BevLatent, HiddenState, Inputs, Model};
use crate::tensor::{Graph, ParameterStore, Tensor};
use crate::world::{
    derive_seed, open_loop_metrics_at, score_pdm, Episode, Trajectory, WorldConfig, OPEN_LOOP_HORIZONS,
};

/// How the executed trajectory is picked among the K modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest mode logit.
    Logit,
    /// Highest predicted reward of the imagined future.
    Reward,
}

impl Selection {
    /// Reward selection once the reward model has been trained.
    pub fn for_stage(stage: u8) -> Self {
        if stage >= 3 {
            Selection::Reward
        } else {
            Selection::Logit
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub selection: Selection,
    pub noise_std: f64,
    pub eval_seed: u64,
    /// Worker threads; 0 defers to [`worker_count`].
    pub threads: usize,
}

impl EvalOptions {
    pub fn new(selection: Selection, eval_seed: u64) -> Self {
        Self {
            selection,
            noise_std: 0.0,
            eval_seed,
            threads: 0,
        }
    }
}

/// `requested` if positive, else `DWVA_THREADS`, else 1.
pub fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::env::var("DWVA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub mode: usize,
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub comfort: f64,
    pub ep: f64,
    pub pdms: f64,
    /// L2 to the expert at 1, 2, 3 s.
    pub l2: Vec<f64>,
    /// Collision flags at 1, 2, 3 s.
    pub collision: Vec<bool>,
    pub trajectory: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(v: impl Iterator<Item = f64> + Clone) -> Self {
        let n = v.clone().count();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0 };
        }
        let mean = v.clone().sum::<f64>() / n as f64;
        let var = v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub pdms: MeanStd,
    pub nc: MeanStd,
    pub dac: MeanStd,
    pub ttc: MeanStd,
    pub comfort: MeanStd,
    pub ep: MeanStd,
    pub horizons: Vec<f64>,
    pub l2: Vec<f64>,
    pub l2_avg: f64,
    /// Collision rate in percent at each horizon.
    pub cr: Vec<f64>,
    pub cr_avg: f64,
}

impl Summary {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let n = records.len();
        let field = |f: fn(&EpisodeRecord) -> f64| MeanStd::of(records.iter().map(f));
        let nh = records.first().map_or(OPEN_LOOP_HORIZONS.len(), |r| r.l2.len());
        let denom = n.max(1) as f64;
        let l2: Vec<f64> = (0..nh)
            .map(|i| records.iter().map(|r| r.l2[i]).sum::<f64>() / denom)
            .collect();
        let cr: Vec<f64> = (0..nh)
            .map(|i| 100.0 * records.iter().filter(|r| r.collision[i]).count() as f64 / denom)
            .collect();
        Self {
            episodes: n,
            pdms: field(|r| r.pdms),
            nc: field(|r| r.nc),
            dac: field(|r| r.dac),
            ttc: field(|r| r.ttc),
            comfort: field(|r| r.comfort),
            ep: field(|r| r.ep),
            horizons: OPEN_LOOP_HORIZONS[..nh].to_vec(),
            l2_avg: l2.iter().sum::<f64>() / nh.max(1) as f64,
            cr_avg: cr.iter().sum::<f64>() / nh.max(1) as f64,
            l2,
            cr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<EpisodeRecord>,
    pub summary: Summary,
}

impl MetricsReport {
    pub fn from_records(records: Vec<EpisodeRecord>) -> Self {
        let summary = Summary::from_records(&records);
        Self { records, summary }
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpisodeRecord>, _>>()?;
        Ok(Self::from_records(records))
    }
}

fn noisy(g: &mut Graph, v: crate::tensor::Var, std: f64, rng: &mut ChaCha8Rng) -> crate::tensor::Var {
    if std == 0.0 {
        return v;
    }
    let mut t = g.value(v).clone();
    t.add_assign(&Tensor::randn(t.shape(), std, rng));
    g.constant(t)
}

/// Trajectory the planner executes for one episode, with the chosen mode.
pub fn plan(
    model: &Model,
    store: &ParameterStore,
    ep: &Episode,
    opts: &EvalOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, usize)> {
    let mut g = Graph::no_grad(store);
    let ctx = model.context(&mut g, &Inputs::current(ep)?)?;
    let h = HiddenState {
        latents: noisy(&mut g, ctx.h.latents, opts.noise_std, rng),
    };
    let bev_c = BevLatent {
        tokens: noisy(&mut g, ctx.bev_c.tokens, opts.noise_std, rng),
        grid_hw: ctx.bev_c.grid_hw,
    };
    let set = model.act_predict(&mut g, &h, &bev_c, &ctx.act)?;
    let trajs = set.trajectories(&g);
    let k = match opts.selection {
        Selection::Logit => set.best_logit(&g),
        Selection::Reward => {
            let b_hist = model.history_predict(&mut g, &h, &bev_c, &ctx.act)?;
            let bc = g.value(bev_c.tokens).clone();
            let mut r = Vec::with_capacity(trajs.len());
            for t in &trajs {
                let row = t.to_row();
                let img = model.euler_sample(store, &bc, &row, rng)?;
                let bi = BevLatent {
                    tokens: g.constant(img),
                    grid_hw: bev_c.grid_hw,
                };
                let tr = g.constant(row);
                let s = model.reward_score(&mut g, &bi, &b_hist, tr)?;
                r.push(g.value(s).item());
            }
            argmax(&r)
        }
    };
    Ok((trajs[k].clone(), k))
}

/// The standard 1, 2, 3 s horizons that fit inside the prediction horizon.
pub fn open_loop_horizons(world: &WorldConfig) -> Result<Vec<f64>> {
    let max = world.horizon_fut as f64 * world.dt;
    let hs: Vec<f64> = OPEN_LOOP_HORIZONS
        .iter()
        .copied()
        .filter(|&h| h <= max * (1.0 + 1e-12))
        .collect();
    if hs.is_empty() {
        return Err(Error::Config(format!("prediction horizon {max} s is shorter than 1 s")));
    }
    Ok(hs)
}

fn record(ep: &Episode, idx: usize, traj: Trajectory, mode: usize, horizons: &[f64]) -> Result<EpisodeRecord> {
    let s = score_pdm(ep, &traj)?;
    let ol = open_loop_metrics_at(&traj, &ep.expert, ep, horizons)?;
    Ok(EpisodeRecord {
        episode: idx,
        seed: ep.seed,
        mode,
        nc: s.nc,
        dac: s.dac,
        ttc: s.ttc,
        comfort: s.comfort,
        ep: s.ep,
        pdms: s.pdms,
        l2: ol.l2,
        collision: ol.collision,
        trajectory: traj.waypoints,
    })
}

/// Scores `policy` on every episode; `threads` as in [`worker_count`]. Records come back in episode order and
/// do not depend on the worker count.
pub fn evaluate_with<P>(world: &WorldConfig, episodes: &[Episode], threads: usize, policy: P) -> Result<MetricsReport>
where
    P: Fn(&Episode, usize) -> Result<(Trajectory, usize)> + Sync,
{
    for ep in episodes {
        if !ep.cfg.same_layout(world) {
            return Err(Error::Config(format!(
                "episode {} does not match the configured world layout or horizons",
                ep.seed
            )));
        }
    }
    let horizons = open_loop_horizons(world)?;
    let one = |i: usize, ep: &Episode| {
        let (traj, mode) = policy(ep, i)?;
        record(ep, i, traj, mode, &horizons)
    };
    let workers = worker_count(threads).min(episodes.len()).max(1);
    let records = if workers == 1 {
        episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| one(i, ep))
            .collect::<Result<Vec<_>>>()?
    } else {
        let chunk = episodes.len().div_ceil(workers);
        let one = &one;
        let parts: Vec<Result<Vec<EpisodeRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = episodes
                .chunks(chunk)
                .enumerate()
                .map(|(c, eps)| {
                    s.spawn(move || {
                        eps.iter()
                            .enumerate()
                            .map(|(j, ep)| one(c * chunk + j, ep))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("eval worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(episodes.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    Ok(MetricsReport::from_records(records))
}

/// Scores the model's planner with per-episode rng streams.
pub fn evaluate(
    model: &Model,
    store: &ParameterStore,
    episodes: &[Episode],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    evaluate_with(&model.world, episodes, opts.threads, |ep, idx| {
        plan_at(model, store, ep, idx, opts)
    })
}

/// [`plan`] with the rng stream `evaluate` uses for episode `idx`.
pub fn plan_at(
    model: &Model,
    store: &ParameterStore,
    ep: &Episode,
    idx: usize,
    opts: &EvalOptions,
) -> Result<(Trajectory, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.eval_seed, idx as u64));
    plan(model, store, ep, opts, &mut rng)
}

/// Scores the scripted expert; mode is reported as 0.
pub fn evaluate_expert(world: &WorldConfig, episodes: &[Episode], threads: usize) -> Result<MetricsReport> {
    evaluate_with(world, episodes, threads, |ep, _| Ok((ep.expert.clone(), 0)))
}
