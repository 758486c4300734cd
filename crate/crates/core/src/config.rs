//! Run configuration: world, model, optimizer, the three stages and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FlowConfig, Model, ModelConfig, RewardWeighting};
use crate::tensor::AdamWConfig;
use crate::world::WorldConfig;

/// The preset shipped with the repository.
pub const TOY_PRESET: &str = include_str!("../../../configs/toy.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub seg: f64,
    pub act: f64,
    pub fm: f64,
    pub rew: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            act: 1.0,
            fm: 1.0,
            rew: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    #[serde(default)]
    pub epochs: usize,
    /// Step budget; when set it replaces `epochs`.
    #[serde(default)]
    pub steps: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Parameter-path patterns held fixed during this stage.
    #[serde(default)]
    pub freeze_paths: Vec<String>,
    #[serde(default)]
    pub loss_weights: LossWeights,
}

impl StageConfig {
    pub fn default_for(stage: u8) -> Self {
        Self {
            stage,
            epochs: 20,
            steps: None,
            lr: 1e-3,
            batch_size: 8,
            freeze_paths: default_freeze_paths(stage),
            loss_weights: LossWeights::default(),
        }
    }

    /// Optimizer steps for a training set of `n` episodes.
    pub fn n_steps(&self, n: usize) -> usize {
        match self.steps {
            Some(s) => s,
            None => self.epochs * n.div_ceil(self.batch_size.max(1)),
        }
    }
}

/// Frozen namespaces per stage: Stage 1 leaves the generative branch, the
/// reward model and the fusion gate alone, Stage 2 trains only the DiT and
/// Stage 3 only the reward model, action head and fusion gate.
pub fn default_freeze_paths(stage: u8) -> Vec<String> {
    let v: &[&str] = match stage {
        1 => &["dit", "reward", "fusion"],
        2 => &[
            "tokenizer",
            "backbone",
            "cross_attn",
            "hist_branch",
            "seg_head",
            "action_head",
            "reward",
            "fusion",
        ],
        _ => &["tokenizer", "backbone", "cross_attn", "hist_branch", "dit", "seg_head"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub reward_weighting: RewardWeighting,
    /// Keep the Euler sampler on the tape in Stage 3 so the segmentation
    /// loss reaches the action head through the frozen DiT.
    pub stage3_grad_through_dit: bool,
    /// Also freeze the tokenizers and encoder during Stage 1.
    pub freeze_backbone: bool,
    /// Steps between loss-log records.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            reward_weighting: RewardWeighting::PerMode,
            stage3_grad_through_dit: false,
            freeze_backbone: false,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// Base seed of the training set; the held-out set uses a derived seed.
    pub data_seed: u64,
    /// Base of the per-episode sampling seeds at evaluation time.
    pub eval_seed: u64,
    /// Training seeds for multi-seed runs.
    pub seeds: Vec<u64>,
    /// Latent noise injected at inference; 0 disables it.
    pub feature_noise_std: f64,
    /// Noise used by the feature-noise ablation.
    pub ablation_noise_std: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_episodes: 512,
            eval_episodes: 128,
            data_seed: 0,
            eval_seed: 0,
            seeds: vec![0, 1, 2],
            feature_noise_std: 0.0,
            ablation_noise_std: 5f64.sqrt(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub flow: FlowConfig,
    pub optim: AdamWConfig,
    pub stages: Vec<StageConfig>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            flow: FlowConfig::default(),
            optim: AdamWConfig::default(),
            stages: (1..=3).map(StageConfig::default_for).collect(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        Self::from_json(TOY_PRESET).expect("shipped preset is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage(&self, stage: u8) -> &StageConfig {
        &self.stages[stage as usize - 1]
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.model.clone(), self.world.clone(), self.flow.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model()?;
        if self.stages.len() != 3 {
            return bad(format!("expected 3 stages, found {}", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.stage as usize != i + 1 {
                return bad(format!("stage entry {} declares stage {}", i + 1, s.stage));
            }
            if !(s.lr > 0.0) || !s.lr.is_finite() {
                return bad(format!("stage {} lr must be positive", s.stage));
            }
            if s.batch_size == 0 {
                return bad(format!("stage {} batch_size must be positive", s.stage));
            }
            let w = &s.loss_weights;
            if [w.seg, w.act, w.fm, w.rew]
                .iter()
                .any(|v| !(*v >= 0.0) || !v.is_finite())
            {
                return bad(format!(
                    "stage {} loss weights must be finite and non-negative",
                    s.stage
                ));
            }
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optimizer betas must lie in [0, 1) and eps be positive".into());
        }
        if !(self.eval.feature_noise_std >= 0.0) || !(self.eval.ablation_noise_std >= 0.0) {
            return bad("noise std must be non-negative".into());
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds must list at least one seed".into());
        }
        Ok(())
    }
}
