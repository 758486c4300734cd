//! Progressive three-stage training, evaluation and checkpoints.

mod checkpoint;
mod eval;
mod pipeline;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageConfig};
use crate::error::{Error, Result};
use crate::model::{act_winner, BevLatent, HiddenState, Inputs, Model, TokenSeq};
use crate::tensor::{AdamW, Graph, ParameterStore, Tensor, Var};
use crate::world::{score_pdm, Episode, ScoreBreakdown, Trajectory};

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use eval::{
    evaluate, evaluate_expert, evaluate_with, open_loop_horizons, worker_count, EpisodeRecord, EvalOptions, MeanStd,
    MetricsReport, Selection, Summary,
};
pub use eval::{plan, plan_at};
pub use pipeline::{
    ablation_csv, datasets, losses_csv, run_ablation, run_seed, Ablation, AblationRow, SeedPlan, SeedRun,
    HELD_OUT_STREAM,
};

/// Stage code of the joint Stage-2/3 phase used by the non-progressive schedule.
pub const JOINT: u8 = 4;

/// Per-step loss components averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub seg: f64,
    pub act: f64,
    pub fm: f64,
    pub rew: f64,
}

impl StepLosses {
    fn add(&mut self, o: &StepLosses) {
        self.total += o.total;
        self.seg += o.seg;
        self.act += o.act;
        self.fm += o.fm;
        self.rew += o.rew;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.seg *= s;
        self.act *= s;
        self.fm *= s;
        self.rew *= s;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: u8,
    pub step: u64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

/// Frozen per-episode features for the stages that do not touch the encoder.
#[derive(Clone, Debug)]
struct Cached {
    h: Tensor,
    bev_c: Tensor,
    act: Tensor,
    /// History-branch future latent.
    b_hist: Tensor,
    /// Re-encoded future frame (the flow-matching target).
    target: Tensor,
    /// Expert action row.
    expert: Tensor,
}

type Grads = BTreeMap<String, Tensor>;

fn accumulate(acc: &mut Grads, g: BTreeMap<String, Tensor>) {
    for (n, t) in g {
        match acc.get_mut(&n) {
            Some(a) => a.add_assign(&t),
            None => {
                acc.insert(n, t);
            }
        }
    }
}

fn traj_key(t: &Trajectory) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for w in &t.waypoints {
        w[0].to_bits().hash(&mut h);
        w[1].to_bits().hash(&mut h);
    }
    h.finish()
}

/// Stage runner bound to one configuration and training set.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub model: Model,
    pub data: &'a [Episode],
    cache: Vec<Cached>,
    cache_key: Option<u64>,
    scores: HashMap<(usize, u64), ScoreBreakdown>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a [Episode]) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model()?;
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        for ep in data {
            if !ep.cfg.same_layout(&cfg.world) {
                return Err(Error::Config(format!(
                    "episode {} was generated with a different world layout",
                    ep.seed
                )));
            }
        }
        Ok(Self {
            cfg,
            model,
            data,
            cache: Vec::new(),
            cache_key: None,
            scores: HashMap::new(),
        })
    }

    /// Fresh state for training seed `seed`.
    pub fn init(&self, seed: u64) -> Result<Checkpoint> {
        let params = self.model.init(seed)?;
        Ok(Checkpoint::fresh(params, crate::world::derive_seed(seed, 0x5eed)))
    }

    pub fn stage_steps(&self, stage: u8) -> usize {
        match stage {
            JOINT => self.stage_steps(2) + self.stage_steps(3),
            s => self.cfg.stage(s).n_steps(self.data.len()),
        }
    }

    fn frozen_names(&self, store: &ParameterStore, stage: u8) -> BTreeSet<String> {
        let mut s = store.clone();
        let st = self.cfg.stage(stage);
        let mut pats = st.freeze_paths.clone();
        if stage == 1 && self.cfg.train.freeze_backbone {
            pats.push("tokenizer".into());
            pats.push("backbone".into());
        }
        s.set_frozen_patterns(&pats);
        s.frozen().clone()
    }

    /// Freezes everything the stage must not update.
    pub fn apply_freeze(&self, store: &mut ParameterStore, stage: u8) {
        let frozen = if stage == JOINT {
            let a = self.frozen_names(store, 2);
            let b = self.frozen_names(store, 3);
            a.intersection(&b).cloned().collect()
        } else {
            self.frozen_names(store, stage)
        };
        store.unfreeze_all();
        for n in frozen {
            store.freeze(&n);
        }
    }

    /// Re-encodes the future frame with its own history and command; no
    /// gradients are recorded.
    pub fn encode_future_target(&self, store: &ParameterStore, ep: &Episode) -> Result<Tensor> {
        let fi = ep.future_index();
        ep.frame(fi)?;
        let mut g = Graph::no_grad(store);
        let inp = Inputs::at(ep, fi)?;
        let ctx = self.model.context(&mut g, &inp)?;
        Ok(g.value(ctx.bev_c.tokens).clone())
    }

    fn build_cache(&mut self, store: &ParameterStore) -> Result<()> {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for n in ["tokenizer", "backbone", "cross_attn", "hist_branch"] {
            for (name, fp) in store.fingerprints() {
                if crate::tensor::path_matches(n, &name) {
                    (name, fp).hash(&mut h);
                }
            }
        }
        let key = h.finish();
        if self.cache_key == Some(key) {
            return Ok(());
        }
        let m = &self.model;
        let mut cache = Vec::with_capacity(self.data.len());
        for ep in self.data {
            let mut g = Graph::no_grad(store);
            let ctx = m.context(&mut g, &Inputs::current(ep)?)?;
            let fut = m.history_predict(&mut g, &ctx.h, &ctx.bev_c, &ctx.act)?;
            cache.push(Cached {
                h: g.value(ctx.h.latents).clone(),
                bev_c: g.value(ctx.bev_c.tokens).clone(),
                act: g.value(ctx.act.emb).clone(),
                b_hist: g.value(fut.tokens).clone(),
                target: self.encode_future_target(store, ep)?,
                expert: m.traj_row(&ep.expert)?,
            });
        }
        self.cache = cache;
        self.cache_key = Some(key);
        Ok(())
    }

    fn score(&mut self, idx: usize, traj: &Trajectory) -> Result<ScoreBreakdown> {
        let key = (idx, traj_key(traj));
        if let Some(s) = self.scores.get(&key) {
            return Ok(*s);
        }
        let s = score_pdm(&self.data[idx], traj)?;
        self.scores.insert(key, s);
        Ok(s)
    }

    fn latent(&self, g: &mut Graph, t: &Tensor) -> BevLatent {
        BevLatent {
            tokens: g.constant(t.clone()),
            grid_hw: (self.model.world.grid_h, self.model.world.grid_w),
        }
    }

    fn stage1_loss(&self, g: &mut Graph, ep: &Episode) -> Result<(Var, StepLosses)> {
        let m = &self.model;
        let w = &self.cfg.stage(1).loss_weights;
        let ctx = m.context(g, &Inputs::current(ep)?)?;
        let s_t = m.seg_decode(g, &ctx.bev_c)?;
        let l_t = m.seg_loss(g, &s_t, ep.raster(ep.current_index())?)?;
        let fut = m.history_predict(g, &ctx.h, &ctx.bev_c, &ctx.act)?;
        let s_f = m.seg_decode(g, &fut)?;
        let l_f = m.seg_loss(g, &s_f, ep.raster(ep.future_index())?)?;
        let set = m.act_predict(g, &ctx.h, &ctx.bev_c, &ctx.act)?;
        let l_a = m.act_loss(g, &set, &ep.expert)?;
        let seg = g.add(l_t, l_f)?;
        let a = g.scale(seg, w.seg);
        let b = g.scale(l_a, w.act);
        let total = g.add(a, b)?;
        let losses = StepLosses {
            total: g.value(total).item(),
            seg: g.value(seg).item(),
            act: g.value(l_a).item(),
            ..StepLosses::default()
        };
        Ok((total, losses))
    }

    fn stage2_loss<R: Rng>(&self, g: &mut Graph, idx: usize, weight: f64, rng: &mut R) -> Result<(Var, StepLosses)> {
        let c = &self.cache[idx];
        let b = self.latent(g, &c.bev_c);
        let a = g.constant(c.expert.clone());
        let l = self.model.fm_loss(g, &c.target, &b, a, rng)?;
        let total = g.scale(l, weight);
        let losses = StepLosses {
            total: g.value(total).item(),
            fm: g.value(l).item(),
            ..StepLosses::default()
        };
        Ok((total, losses))
    }

    fn stage3_loss<R: Rng>(
        &mut self,
        g: &mut Graph,
        store: &ParameterStore,
        idx: usize,
        rng: &mut R,
    ) -> Result<(Var, StepLosses)> {
        let m = self.model.clone();
        let w = self.cfg.stage(3).loss_weights.clone();
        let c = self.cache[idx].clone();
        let ep = &self.data[idx];
        let h = HiddenState {
            latents: g.constant(c.h.clone()),
        };
        let bev_c = self.latent(g, &c.bev_c);
        let act = TokenSeq {
            emb: g.constant(c.act.clone()),
            tags: Vec::new(),
        };
        let b_hist = self.latent(g, &c.b_hist);
        let set = m.act_predict(g, &h, &bev_c, &act)?;
        let trajs = set.trajectories(g);
        let k = trajs.len();
        let mut r_hat = Vec::with_capacity(k);
        let mut l_rew: Option<Var> = None;
        let mut noise = Vec::with_capacity(k);
        let mut imagined = Vec::with_capacity(k);
        for t in &trajs {
            let row = t.to_row();
            let b0 = Tensor::randn(c.bev_c.shape(), 1.0, rng);
            let b_img = m.euler_sample_from(store, &c.bev_c, &row, b0.clone())?;
            let bi = self.latent(g, &b_img);
            let tr = g.constant(row);
            let r = m.reward_score(g, &bi, &b_hist, tr)?;
            let gt = self.score(idx, t)?.pdms;
            let l = m.reward_loss(g, r, gt)?;
            l_rew = Some(match l_rew {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
            r_hat.push(g.value(r).item());
            noise.push(b0);
            imagined.push(b_img);
        }
        let l_rew = l_rew.expect("at least one mode");
        let l_rew = g.scale(l_rew, 1.0 / k as f64);
        let l_act = m.reward_weighted_action_loss(g, &set, &ep.expert, &r_hat, self.cfg.train.reward_weighting)?;
        let win = act_winner(g.value(set.modes), &c.expert)?;
        let b_win = if self.cfg.train.stage3_grad_through_dit {
            let row = set.mode_row(g, win)?;
            m.euler_sample_on(g, &bev_c, row, noise[win].clone())?
        } else {
            self.latent(g, &imagined[win])
        };
        let fusion = m.fusion(g)?;
        let fused = m.fuse_latents(g, &b_hist, &b_win, fusion)?;
        let seg = m.seg_decode(g, &fused)?;
        let l_seg = m.seg_loss(g, &seg, ep.raster(ep.future_index())?)?;
        let a = g.scale(l_act, w.act);
        let s = g.scale(l_seg, w.seg);
        let r = g.scale(l_rew, w.rew);
        let total = g.add(a, s)?;
        let total = g.add(total, r)?;
        let losses = StepLosses {
            total: g.value(total).item(),
            seg: g.value(l_seg).item(),
            act: g.value(l_act).item(),
            rew: g.value(l_rew).item(),
            fm: 0.0,
        };
        Ok((total, losses))
    }

    fn sample_batch<R: Rng>(&self, rng: &mut R, stage: u8) -> Vec<usize> {
        let b = self.cfg.stage(stage).batch_size;
        (0..b).map(|_| rng.random_range(0..self.data.len())).collect()
    }

    /// Losses and summed gradients over a batch for one stage's objective.
    fn batch_grads(&mut self, state: &mut Checkpoint, stage: u8, batch: &[usize]) -> Result<(Grads, StepLosses)> {
        let mut grads = Grads::new();
        let mut losses = StepLosses::default();
        let store = state.params.clone();
        for &i in batch {
            let mut g = Graph::new(&store);
            let (loss, l) = match stage {
                1 => self.stage1_loss(&mut g, &self.data[i])?,
                2 => {
                    let w = self.cfg.stage(2).loss_weights.fm;
                    self.stage2_loss(&mut g, i, w, &mut state.rng)?
                }
                _ => self.stage3_loss(&mut g, &store, i, &mut state.rng)?,
            };
            if !l.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in stage {stage}")));
            }
            accumulate(&mut grads, g.backward(loss)?.into_params());
            losses.add(&l);
        }
        let s = 1.0 / batch.len() as f64;
        for t in grads.values_mut() {
            t.scale_assign(s);
        }
        Ok((grads, losses.scaled(s)))
    }

    fn apply(&self, state: &mut Checkpoint, opt: &mut AdamW, stage: u8, grads: &Grads, lr: f64) -> Result<()> {
        self.apply_freeze(&mut state.params, stage);
        let mut full = Grads::new();
        for n in state.params.trainable_names() {
            let t = match grads.get(&n) {
                Some(t) => t.clone(),
                None => Tensor::zeros(state.params.get(&n).expect("listed").shape()),
            };
            full.insert(n, t);
        }
        opt.step(&mut state.params, &full, lr)
    }

    fn one_step(&mut self, state: &mut Checkpoint, opt: &mut AdamW, stage: u8) -> Result<StepLosses> {
        if stage == JOINT {
            let b2 = self.sample_batch(&mut state.rng, 2);
            let b3 = self.sample_batch(&mut state.rng, 3);
            self.apply_freeze(&mut state.params, JOINT);
            let (g2, l2) = self.batch_grads(state, 2, &b2)?;
            let (g3, l3) = self.batch_grads(state, 3, &b3)?;
            let mut l = l3;
            l.fm = l2.fm;
            l.total += l2.total;
            let lr2 = self.cfg.stage(2).lr;
            let lr3 = self.cfg.stage(3).lr;
            self.apply(state, opt, 2, &g2, lr2)?;
            self.apply(state, opt, 3, &g3, lr3)?;
            self.apply_freeze(&mut state.params, JOINT);
            Ok(l)
        } else {
            let batch = self.sample_batch(&mut state.rng, stage);
            self.apply_freeze(&mut state.params, stage);
            let (grads, l) = self.batch_grads(state, stage, &batch)?;
            let lr = self.cfg.stage(stage).lr;
            self.apply(state, opt, stage, &grads, lr)?;
            Ok(l)
        }
    }

    /// Runs (or resumes) `stage` on `state`. A state that completed an
    /// earlier stage starts the stage from step 0 with fresh optimizer
    /// moments; an unfinished state of the same stage continues where it
    /// stopped. `stop_after` interrupts after that many steps of this call.
    pub fn run_stage(
        &mut self,
        state: &mut Checkpoint,
        stage: u8,
        stop_after: Option<u64>,
        log: &mut Vec<LossRecord>,
    ) -> Result<()> {
        if !(1..=JOINT).contains(&stage) {
            return Err(Error::Usage(format!("unknown stage {stage}")));
        }
        self.model.check_params(&state.params)?;
        let resuming = state.stage == stage && !state.complete;
        if !resuming {
            let prev_ok = match stage {
                1 => state.stage == 0,
                JOINT => state.stage == 1,
                s => state.stage == s - 1,
            };
            if !prev_ok || !state.complete {
                return Err(Error::Usage(format!(
                    "stage {stage} needs a completed stage-{} checkpoint, got stage {} ({})",
                    if stage == JOINT { 1 } else { stage - 1 },
                    state.stage,
                    if state.complete { "complete" } else { "incomplete" }
                )));
            }
            state.stage = stage;
            state.step = 0;
            state.complete = false;
            state.opt = BTreeMap::new();
        }
        let total = self.stage_steps(stage) as u64;
        if stage != 1 {
            self.build_cache(&state.params)?;
        }
        let mut opt = AdamW::new(self.cfg.optim.clone());
        opt.set_state(std::mem::take(&mut state.opt));
        let mut done = 0u64;
        let result = (|| -> Result<()> {
            while state.step < total {
                if stop_after.is_some_and(|s| done >= s) {
                    return Ok(());
                }
                let l = self.one_step(state, &mut opt, stage)?;
                state.step += 1;
                done += 1;
                log.push(LossRecord {
                    stage,
                    step: state.step,
                    losses: l,
                });
            }
            Ok(())
        })();
        state.opt = opt.state().clone();
        state.params.unfreeze_all();
        result?;
        if state.step >= total {
            state.complete = true;
        }
        Ok(())
    }

    pub fn stage_config(&self, stage: u8) -> &StageConfig {
        self.cfg.stage(stage.min(3))
    }
}
