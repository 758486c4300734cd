//! The world model and planner: tokenizers, shared-latent encoder, the two
//! future-latent branches and the task heads.

mod backbone;
mod denoiser;
mod heads;
pub(crate) mod nn;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParameterStore, Tensor, Var};
use crate::world::{Command, Episode, WorldConfig};

pub use denoiser::{euler_integrate, Fusion};
pub use heads::{act_winner, argmax, reward_loss, RewardWeighting, SegLogits, TrajectorySet};
pub use nn::sinusoidal;

/// Top-level parameter namespaces.
pub const NAMESPACES: [&str; 9] = [
    "tokenizer",
    "backbone",
    "cross_attn",
    "hist_branch",
    "dit",
    "seg_head",
    "action_head",
    "reward",
    "fusion",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Mean,
    Gate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_latent: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    /// Number of latent queries.
    pub n_latents: usize,
    /// Cells per patch side.
    pub patch: usize,
    /// Trajectory modes.
    pub modes: usize,
    pub dit_depth: usize,
    pub hist_depth: usize,
    pub mlp_ratio: usize,
    pub act_hidden: usize,
    pub reward_hidden: usize,
    /// Waypoints are predicted in units of this many meters.
    pub action_scale: f64,
    pub fusion: FusionMode,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_latent: 32,
            n_heads: 4,
            enc_layers: 4,
            n_latents: 8,
            patch: 4,
            modes: 5,
            dit_depth: 2,
            hist_depth: 2,
            mlp_ratio: 4,
            act_hidden: 128,
            reward_hidden: 64,
            action_scale: 4.0,
            fusion: FusionMode::Mean,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Euler steps N.
    pub n_steps: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { n_steps: 25 }
    }
}

/// Token modality tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Obs,
    Bev,
    Action,
    Command,
}

impl Modality {
    fn index(self) -> usize {
        match self {
            Modality::Obs => 0,
            Modality::Bev => 1,
            Modality::Action => 2,
            Modality::Command => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TokenSeq {
    pub emb: Var,
    pub tags: Vec<Modality>,
}

#[derive(Clone, Copy, Debug)]
pub struct HiddenState {
    pub latents: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BevLatent {
    pub tokens: Var,
    pub grid_hw: (usize, usize),
}

/// Raw per-frame inputs.
#[derive(Clone, Debug)]
pub struct Inputs<'a> {
    pub obs: &'a [u8],
    pub bev: &'a [u8],
    pub hist: Vec<[f64; 2]>,
    pub command: Command,
}

impl<'a> Inputs<'a> {
    /// Inputs at frame `idx`: observation raster from the previous frame,
    /// BEV raster and ego history up to `idx`.
    pub fn at(ep: &'a Episode, idx: usize) -> Result<Self> {
        if idx == 0 {
            return Err(Error::Range("frame 0 has no previous observation".into()));
        }
        Ok(Self {
            obs: ep.raster(idx - 1)?,
            bev: ep.raster(idx)?,
            hist: ep.history_waypoints(idx)?,
            command: ep.command,
        })
    }

    pub fn current(ep: &'a Episode) -> Result<Self> {
        Self::at(ep, ep.current_index())
    }
}

/// Everything the heads and branches need from one frame.
#[derive(Clone, Debug)]
pub struct Context {
    pub h: HiddenState,
    pub bev: BevLatent,
    pub bev_c: BevLatent,
    pub act: TokenSeq,
}

/// Architecture description; parameters live in a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub world: WorldConfig,
    pub flow: FlowConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig, world: WorldConfig, flow: FlowConfig) -> Result<Self> {
        let m = Self { cfg, world, flow };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        let bad = |m: String| Err(Error::Config(m));
        self.world.validate()?;
        if c.patch == 0 || !self.world.grid_h.is_multiple_of(c.patch) || !self.world.grid_w.is_multiple_of(c.patch) {
            return bad(format!(
                "patch {} must divide the {}x{} grid",
                c.patch, self.world.grid_h, self.world.grid_w
            ));
        }
        for (name, v) in [
            ("d_model", c.d_model),
            ("d_latent", c.d_latent),
            ("n_heads", c.n_heads),
            ("n_latents", c.n_latents),
            ("modes", c.modes),
            ("mlp_ratio", c.mlp_ratio),
            ("act_hidden", c.act_hidden),
            ("reward_hidden", c.reward_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !c.d_model.is_multiple_of(c.n_heads) || !c.d_latent.is_multiple_of(c.n_heads) {
            return bad(format!(
                "n_heads {} must divide d_model {} and d_latent {}",
                c.n_heads, c.d_model, c.d_latent
            ));
        }
        if !c.d_latent.is_multiple_of(2) {
            return bad("d_latent must be even".into());
        }
        if !(c.action_scale > 0.0) || !(c.ln_eps > 0.0) {
            return bad("action_scale and ln_eps must be positive".into());
        }
        if self.flow.n_steps == 0 {
            return bad("flow.n_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.world.grid_h / self.cfg.patch) * (self.world.grid_w / self.cfg.patch)
    }

    /// One-hot width of a patch.
    pub fn patch_dim(&self) -> usize {
        self.cfg.patch * self.cfg.patch * self.world.n_classes
    }

    pub fn horizon(&self) -> usize {
        self.world.horizon_fut
    }

    /// Config error unless `store` holds exactly this model's parameter
    /// names and shapes.
    pub fn check_params(&self, store: &ParameterStore) -> Result<()> {
        let want = self.init(0)?;
        for (n, t) in want.iter() {
            match store.get(n) {
                None => return Err(Error::Config(format!("parameter '{n}' missing for this model config"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "parameter '{n}' has shape {:?}, config expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(n) = store.names().find(|n| !want.contains(n)) {
            return Err(Error::Config(format!(
                "parameter '{n}' is not part of this model config"
            )));
        }
        Ok(())
    }

    /// Fresh parameters, deterministic in `seed`.
    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let mut it = nn::Init {
            store: &mut store,
            rng: &mut rng,
        };
        let c = &self.cfg;
        let (dm, dl) = (c.d_model, c.d_latent);
        let np = self.n_patches();
        let pd = self.patch_dim();
        let hist = self.world.horizon_hist;
        let h2 = 2 * self.horizon();

        it.linear("tokenizer.obs", pd, dm)?;
        it.normal("tokenizer.obs.pos", np, dm, 0.1)?;
        it.linear("tokenizer.bev", pd, dl)?;
        it.linear("tokenizer.act", 2, dm)?;
        it.normal("tokenizer.act.pos", hist, dm, 0.1)?;
        it.normal("tokenizer.cmd.emb", 3, dm, 1.0)?;

        it.normal("backbone.type_emb", 4, dm, 0.1)?;
        it.linear("backbone.bev_in", dl, dm)?;
        it.normal("backbone.bev_pos", np, dm, 0.1)?;
        for i in 0..c.enc_layers {
            it.block(&format!("backbone.blocks.{i}"), dm, dm * c.mlp_ratio)?;
        }
        it.ln("backbone.ln_f", dm)?;
        it.linear("backbone.proj", dm, dl)?;
        it.normal("backbone.latents.q", c.n_latents, dl, 1.0)?;
        it.ln("backbone.latents.ln", dl)?;
        it.attn("backbone.latents.attn", dl, dl, dl, false)?;

        it.ln("cross_attn.ln", dl)?;
        it.attn("cross_attn.attn", dl, dl, dl, true)?;

        it.linear("hist_branch.act_proj", dm, dl)?;
        it.ln("hist_branch.ln", dl)?;
        it.attn("hist_branch.xattn", dl, dl, dl, false)?;
        for i in 0..c.hist_depth {
            it.block(&format!("hist_branch.blocks.{i}"), dl, dl * c.mlp_ratio)?;
        }
        it.ln("hist_branch.ln_f", dl)?;
        it.linear_zero("hist_branch.out", dl, dl)?;

        it.linear("dit.x_in", dl, dl)?;
        it.normal("dit.cond_in.w", dl, dl, 1.0 / (dl as f64).sqrt())?;
        it.normal("dit.pos", np, dl, 0.1)?;
        it.linear("dit.t_mlp.fc1", dl, dl)?;
        it.linear("dit.t_mlp.fc2", dl, dl)?;
        it.linear("dit.a_mlp.fc1", h2, dl)?;
        it.linear("dit.a_mlp.fc2", dl, dl)?;
        it.linear("dit.b_proj", dl, dl)?;
        for i in 0..c.dit_depth {
            let p = format!("dit.blocks.{i}");
            it.linear_zero(&format!("{p}.ada"), dl, 6 * dl)?;
            it.attn(&format!("{p}.attn"), dl, dl, dl, false)?;
            it.mlp(&format!("{p}.mlp"), dl, dl * c.mlp_ratio)?;
        }
        it.linear_zero("dit.final.ada", dl, 2 * dl)?;
        it.linear_zero("dit.final.out", dl, dl)?;

        it.linear_zero("seg_head", dl, pd)?;

        let act_in = c.n_latents * dl + dl + dm;
        it.linear("action_head.fc1", act_in, c.act_hidden)?;
        it.linear("action_head.fc2", c.act_hidden, c.act_hidden)?;
        it.linear_zero("action_head.out", c.act_hidden, c.modes * (h2 + 1))?;

        it.linear("reward.traj", h2, dl)?;
        it.linear("reward.fc1", 3 * dl, c.reward_hidden)?;
        it.linear("reward.fc2", c.reward_hidden, c.reward_hidden)?;
        it.linear_zero("reward.out", c.reward_hidden, 1)?;

        if c.fusion == FusionMode::Gate {
            it.zeros("fusion.gate", 1, 1)?;
        }
        Ok(store)
    }

    /// Tokenizes and encodes one frame, then conditions its BEV tokens.
    pub fn context(&self, g: &mut Graph, inp: &Inputs) -> Result<Context> {
        let obs = self.tokenize_obs(g, inp.obs)?;
        let bev = self.tokenize_bev(g, inp.bev)?;
        let act = self.tokenize_actions(g, &inp.hist)?;
        let cmd = self.tokenize_command(g, inp.command)?;
        let h = self.encode(g, &obs, &bev, &act, &cmd)?;
        let bev_c = self.cross_attend_bev(g, &bev, &h)?;
        Ok(Context { h, bev, bev_c, act })
    }

    pub fn fusion(&self, g: &mut Graph) -> Result<Fusion> {
        Ok(match self.cfg.fusion {
            FusionMode::Mean => Fusion::Mean,
            FusionMode::Gate => {
                let p = g.param("fusion.gate")?;
                Fusion::Gate(g.sigmoid(p))
            }
        })
    }

    /// Flattened trajectory row `1 × 2H`.
    pub fn traj_row(&self, traj: &crate::world::Trajectory) -> Result<Tensor> {
        traj.check(self.horizon())?;
        Ok(traj.to_row())
    }

    pub(crate) fn check_bev(&self, g: &Graph, b: &BevLatent) -> Result<()> {
        let s = g.shape(b.tokens);
        if s != (self.n_patches(), self.cfg.d_latent) {
            return Err(dim_err!(
                "BEV latent {:?}, expected ({}, {})",
                s,
                self.n_patches(),
                self.cfg.d_latent
            ));
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    #[test]
    fn namespaces_cover_all_parameters() {
        let m = small();
        let s = m.init(0).unwrap();
        for n in s.names() {
            let top = n.split('.').next().unwrap();
            assert!(NAMESPACES.contains(&top), "{n}");
        }
        assert!(!s.contains("fusion.gate"));
    }

    #[test]
    fn init_is_deterministic() {
        let m = small();
        assert_eq!(m.init(3).unwrap(), m.init(3).unwrap());
        assert_ne!(m.init(3).unwrap(), m.init(4).unwrap());
    }

    #[test]
    fn patch_must_divide_grid() {
        let mut m = small();
        m.cfg.patch = 5;
        assert!(matches!(m.validate(), Err(Error::Config(_))));
    }
}
