//! Whole-curriculum runs and the ablation variants built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalOptions, MetricsReport, Selection, Summary};
use super::{Checkpoint, LossRecord, Trainer, JOINT};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::world::{derive_seed, generate_dataset, read_dataset, Episode};

/// Seed stream the held-out split is drawn from, far from the training
/// stream so the two never share an episode seed.
pub const HELD_OUT_STREAM: u64 = 1 << 40;

/// Training and held-out episodes: read from the configured paths when set,
/// otherwise generated from `eval.data_seed`.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let train = match &cfg.paths.train_data {
        Some(p) => read_dataset(p)?,
        None => generate_dataset(&cfg.world, cfg.eval.train_episodes, cfg.eval.data_seed)?,
    };
    let held_out = match &cfg.paths.eval_data {
        Some(p) => read_dataset(p)?,
        None => generate_dataset(
            &cfg.world,
            cfg.eval.eval_episodes,
            derive_seed(cfg.eval.data_seed, HELD_OUT_STREAM),
        )?,
    };
    Ok((train, held_out))
}

/// What one training seed produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    /// Checkpoints keyed by label: `stage1`, `stage2`, `stage3` and, when
    /// requested, `non_progressive`.
    pub checkpoints: BTreeMap<String, Checkpoint>,
    /// Evaluation reports keyed by label; `stage3_noise` holds the
    /// feature-noise evaluation of the final checkpoint.
    pub reports: BTreeMap<String, MetricsReport>,
    pub losses: Vec<LossRecord>,
}

impl SeedRun {
    pub fn pdms(&self, label: &str) -> f64 {
        self.reports[label].summary.pdms.mean
    }
}

/// Which extra runs to add to the progressive curriculum of one seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedPlan {
    pub non_progressive: bool,
    pub noise_std: Option<f64>,
    /// Evaluate only the final stage.
    pub final_only: bool,
}

fn write_report(dir: &Path, label: &str, r: &MetricsReport) -> Result<()> {
    std::fs::write(dir.join(format!("{label}.jsonl")), r.to_jsonl())?;
    std::fs::write(
        dir.join(format!("{label}.summary.json")),
        serde_json::to_string_pretty(&r.summary)?,
    )?;
    Ok(())
}

pub fn losses_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("stage,step,total,seg,act,fm,rew\n");
    for r in log {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.stage, r.step, l.total, l.seg, l.act, l.fm, l.rew
        );
    }
    s
}

/// Progressive curriculum for one seed with evaluation after every stage,
/// plus the optional non-progressive and feature-noise variants.
pub fn run_seed(
    cfg: &RunConfig,
    train: &[Episode],
    held_out: &[Episode],
    seed: u64,
    plan: &SeedPlan,
    out: Option<&Path>,
) -> Result<SeedRun> {
    let mut t = Trainer::new(cfg, train)?;
    let model = t.model.clone();
    let dir = match out {
        Some(o) => {
            let d = o.join(format!("seed_{seed}"));
            std::fs::create_dir_all(&d)?;
            std::fs::write(d.join("config.json"), cfg.to_json())?;
            Some(d)
        }
        None => None,
    };
    let mut run = SeedRun {
        seed,
        checkpoints: BTreeMap::new(),
        reports: BTreeMap::new(),
        losses: Vec::new(),
    };
    let eval = |state: &Checkpoint, noise: f64| {
        let mut o = EvalOptions::new(Selection::for_stage(state.stage), cfg.eval.eval_seed);
        o.noise_std = noise;
        evaluate(&model, &state.params, held_out, &o)
    };
    let mut state = t.init(seed)?;
    for stage in 1..=3u8 {
        t.run_stage(&mut state, stage, None, &mut run.losses)?;
        let label = format!("stage{stage}");
        if !plan.final_only || stage == 3 {
            let r = eval(&state, cfg.eval.feature_noise_std)?;
            if let Some(d) = &dir {
                write_report(d, &label, &r)?;
            }
            run.reports.insert(label.clone(), r);
        }
        if let Some(d) = &dir {
            state.save(&d.join(format!("{label}.dwva")))?;
        }
        run.checkpoints.insert(label, state.clone());
    }
    if let Some(std) = plan.noise_std {
        let r = eval(&state, std)?;
        if let Some(d) = &dir {
            write_report(d, "stage3_noise", &r)?;
        }
        run.reports.insert("stage3_noise".into(), r);
    }
    if plan.non_progressive {
        let mut np = run.checkpoints["stage1"].clone();
        t.run_stage(&mut np, JOINT, None, &mut run.losses)?;
        let r = eval(&np, cfg.eval.feature_noise_std)?;
        if let Some(d) = &dir {
            write_report(d, "non_progressive", &r)?;
            np.save(&d.join("non_progressive.dwva"))?;
        }
        run.reports.insert("non_progressive".into(), r);
        run.checkpoints.insert("non_progressive".into(), np);
    }
    if let Some(d) = &dir {
        std::fs::write(d.join("losses.csv"), losses_csv(&run.losses))?;
    }
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Stages,
    NonProgressive,
    FreezeBackbone,
    FeatureNoise,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stages" => Ablation::Stages,
            "non-progressive" => Ablation::NonProgressive,
            "freeze-backbone" => Ablation::FreezeBackbone,
            "feature-noise" => Ablation::FeatureNoise,
            other => return Err(Error::Usage(format!("unknown ablation variant '{other}'"))),
        })
    }
}

/// Seed-averaged metrics of one ablation arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<Summary>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&Summary) -> f64) -> f64 {
        self.per_seed.iter().map(f).sum::<f64>() / self.per_seed.len().max(1) as f64
    }

    pub fn pdms(&self) -> f64 {
        self.mean(|s| s.pdms.mean)
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seeds,pdms,nc,dac,ttc,comfort,ep,l2_avg,cr_avg,pdms_per_seed\n");
    for r in rows {
        let per: Vec<String> = r.per_seed.iter().map(|x| format!("{}", x.pdms.mean)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.label,
            r.seeds.len(),
            r.pdms(),
            r.mean(|x| x.nc.mean),
            r.mean(|x| x.dac.mean),
            r.mean(|x| x.ttc.mean),
            r.mean(|x| x.comfort.mean),
            r.mean(|x| x.ep.mean),
            r.mean(|x| x.l2_avg),
            r.mean(|x| x.cr_avg),
            per.join(";")
        );
    }
    s
}

/// Runs a variant against the default progressive pipeline over every
/// configured seed. Step budgets come from the shared configuration.
pub fn run_ablation(
    cfg: &RunConfig,
    variant: Ablation,
    train: &[Episode],
    held_out: &[Episode],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let seeds = cfg.eval.seeds.clone();
    let mut arms: BTreeMap<&str, Vec<Summary>> = BTreeMap::new();
    let labels: Vec<&str> = match variant {
        Ablation::Stages => vec!["stage1", "stage2", "stage3"],
        Ablation::NonProgressive => vec!["progressive", "non_progressive"],
        Ablation::FreezeBackbone => vec!["unfrozen", "freeze_backbone"],
        Ablation::FeatureNoise => vec!["noise_0", "noise"],
    };
    for &seed in &seeds {
        let sub = out.map(|o| o.join("default"));
        let plan = SeedPlan {
            non_progressive: variant == Ablation::NonProgressive,
            noise_std: (variant == Ablation::FeatureNoise).then_some(cfg.eval.ablation_noise_std),
            final_only: variant != Ablation::Stages,
        };
        let run = run_seed(cfg, train, held_out, seed, &plan, sub.as_deref())?;
        let mut push = |label: &'static str, key: &str| {
            arms.entry(label).or_default().push(run.reports[key].summary.clone());
        };
        match variant {
            Ablation::Stages => {
                push("stage1", "stage1");
                push("stage2", "stage2");
                push("stage3", "stage3");
            }
            Ablation::NonProgressive => {
                push("progressive", "stage3");
                push("non_progressive", "non_progressive");
            }
            Ablation::FeatureNoise => {
                push("noise_0", "stage3");
                push("noise", "stage3_noise");
            }
            Ablation::FreezeBackbone => {
                push("unfrozen", "stage3");
                let mut fc = cfg.clone();
                fc.train.freeze_backbone = true;
                let sub = out.map(|o| o.join("freeze_backbone"));
                let plan = SeedPlan {
                    final_only: true,
                    ..SeedPlan::default()
                };
                let r = run_seed(&fc, train, held_out, seed, &plan, sub.as_deref())?;
                arms.entry("freeze_backbone")
                    .or_default()
                    .push(r.reports["stage3"].summary.clone());
            }
        }
    }
    let rows: Vec<AblationRow> = labels
        .iter()
        .map(|l| AblationRow {
            label: l.to_string(),
            seeds: seeds.clone(),
            per_seed: arms.remove(l).unwrap_or_default(),
        })
        .collect();
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("ablation.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}
