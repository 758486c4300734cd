use serde::{Deserialize, Serialize};

use super::nn::linear;
use super::{BevLatent, HiddenState, Model, TokenSeq};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::world::Trajectory;

/// Segmentation logits, one row per BEV token holding `patch² × n_classes`
/// scores in in-patch cell order.
#[derive(Clone, Copy, Debug)]
pub struct SegLogits {
    pub logits: Var,
}

impl SegLogits {
    /// Logits in grid order, `grid_h·grid_w × n_classes`.
    pub fn to_grid(&self, g: &Graph, model: &Model) -> Tensor {
        let w = &model.world;
        let c = w.n_classes;
        let pd = model.patch_dim();
        let v = g.value(self.logits).data();
        let mut out = vec![0.0; w.n_cells() * c];
        for i in 0..w.grid_h {
            for j in 0..w.grid_w {
                let (tok, inner) = model.patch_position(i, j);
                let src = tok * pd + inner * c;
                let dst = (i * w.grid_w + j) * c;
                out[dst..dst + c].copy_from_slice(&v[src..src + c]);
            }
        }
        Tensor::from_rows(w.n_cells(), c, &out).expect("grid logits shape")
    }

    /// Argmax class per cell in grid order.
    pub fn classes(&self, g: &Graph, model: &Model) -> Vec<u8> {
        let t = self.to_grid(g, model);
        let c = t.cols();
        t.data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// K candidate trajectories (`K × 2H`, meters, ego frame) and their logits (`1 × K`).
#[derive(Clone, Copy, Debug)]
pub struct TrajectorySet {
    pub modes: Var,
    pub logits: Var,
}

impl TrajectorySet {
    pub fn k(&self, g: &Graph) -> usize {
        g.shape(self.modes).0
    }

    pub fn trajectories(&self, g: &Graph) -> Vec<Trajectory> {
        let t = g.value(self.modes);
        t.data().chunks(t.cols()).map(Trajectory::from_flat).collect()
    }

    pub fn mode_row(&self, g: &mut Graph, k: usize) -> Result<Var> {
        g.slice_rows(self.modes, k, 1)
    }

    /// Index of the highest logit, lowest index on ties.
    pub fn best_logit(&self, g: &Graph) -> usize {
        argmax(g.value(self.logits).data())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mode closest to `gt` in mean squared error; the lowest index wins ties.
pub fn act_winner(modes: &Tensor, gt: &Tensor) -> Result<usize> {
    if modes.cols() != gt.numel() || modes.rows() == 0 {
        return Err(dim_err!("modes {:?} vs target {:?}", modes.shape(), gt.shape()));
    }
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (k, row) in modes.data().chunks(modes.cols()).enumerate() {
        let e: f64 = row.iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        if e < best_err {
            best_err = e;
            best = k;
        }
    }
    Ok(best)
}

/// How predicted rewards weight the per-mode regression terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardWeighting {
    /// Every mode's error weighted by its own reward.
    #[default]
    PerMode,
    /// Only the highest-reward mode contributes.
    SingleBest,
}

impl Model {
    pub fn seg_decode(&self, g: &mut Graph, b: &BevLatent) -> Result<SegLogits> {
        self.check_bev(g, b)?;
        let logits = linear(g, "seg_head", b.tokens)?;
        Ok(SegLogits { logits })
    }

    /// Target class ids for each logit row after reshaping to one row per cell.
    fn seg_targets(&self, raster: &[u8]) -> Result<Vec<usize>> {
        let w = &self.world;
        if raster.len() != w.n_cells() {
            return Err(dim_err!(
                "target raster has {} cells, expected {}",
                raster.len(),
                w.n_cells()
            ));
        }
        let pp = self.cfg.patch * self.cfg.patch;
        let mut t = vec![0; w.n_cells()];
        for (idx, &cls) in raster.iter().enumerate() {
            if cls as usize >= w.n_classes {
                return Err(Error::Value(format!("target class {cls} >= {}", w.n_classes)));
            }
            let (tok, inner) = self.patch_position(idx / w.grid_w, idx % w.grid_w);
            t[tok * pp + inner] = cls as usize;
        }
        Ok(t)
    }

    /// Mean cross-entropy over cells.
    pub fn seg_loss(&self, g: &mut Graph, logits: &SegLogits, target: &[u8]) -> Result<Var> {
        let targets = self.seg_targets(target)?;
        let (r, c) = g.shape(logits.logits);
        if (r, c) != (self.n_patches(), self.patch_dim()) {
            return Err(dim_err!("seg logits {:?}", (r, c)));
        }
        let cells = g.reshape(logits.logits, self.world.n_cells(), self.world.n_classes)?;
        g.cross_entropy(cells, &targets)
    }

    pub fn act_predict(
        &self,
        g: &mut Graph,
        h: &HiddenState,
        b: &BevLatent,
        act_hist: &TokenSeq,
    ) -> Result<TrajectorySet> {
        let c = &self.cfg;
        self.check_bev(g, b)?;
        if g.shape(h.latents) != (c.n_latents, c.d_latent) {
            return Err(dim_err!("hidden state {:?}", g.shape(h.latents)));
        }
        let (na, da) = g.shape(act_hist.emb);
        if da != c.d_model {
            return Err(dim_err!("action tokens width {da} vs d_model {}", c.d_model));
        }
        let hf = g.reshape(h.latents, 1, c.n_latents * c.d_latent)?;
        let bm = g.mean_rows(b.tokens);
        let am = if na > 0 {
            g.mean_rows(act_hist.emb)
        } else {
            g.constant(Tensor::zeros(&[1, c.d_model]))
        };
        let x = g.concat_cols(&[hf, bm, am])?;
        let x = linear(g, "action_head.fc1", x)?;
        let x = g.silu(x);
        let x = linear(g, "action_head.fc2", x)?;
        let x = g.silu(x);
        let out = linear(g, "action_head.out", x)?;
        let h2 = 2 * self.horizon();
        let k = c.modes;
        let flat = g.slice_cols(out, 0, k * h2)?;
        let modes = g.reshape(flat, k, h2)?;
        let modes = g.scale(modes, c.action_scale);
        let logits = g.slice_cols(out, k * h2, k)?;
        Ok(TrajectorySet { modes, logits })
    }

    /// Winner-take-all regression plus mode classification.
    pub fn act_loss(&self, g: &mut Graph, pred: &TrajectorySet, gt: &Trajectory) -> Result<Var> {
        let gt = self.traj_row(gt)?;
        let k = act_winner(g.value(pred.modes), &gt)?;
        let row = pred.mode_row(g, k)?;
        let target = g.constant(gt);
        let reg = g.mse(row, target)?;
        if pred.k(g) == 1 {
            return Ok(reg);
        }
        let ce = g.cross_entropy(pred.logits, &[k])?;
        g.add(reg, ce)
    }

    /// Predicted score in `(0, 1)` for one candidate trajectory row (`1 × 2H`, meters).
    pub fn reward_score(&self, g: &mut Graph, b_imagined: &BevLatent, b_hist: &BevLatent, traj: Var) -> Result<Var> {
        self.check_bev(g, b_imagined)?;
        self.check_bev(g, b_hist)?;
        if g.shape(traj) != (1, 2 * self.horizon()) {
            return Err(dim_err!("trajectory row {:?}", g.shape(traj)));
        }
        let mi = g.mean_rows(b_imagined.tokens);
        let mh = g.mean_rows(b_hist.tokens);
        let diff = g.sub(mi, mh)?;
        let t = g.scale(traj, 1.0 / self.cfg.action_scale);
        let t = linear(g, "reward.traj", t)?;
        let x = g.concat_cols(&[mi, diff, t])?;
        let x = linear(g, "reward.fc1", x)?;
        let x = g.silu(x);
        let x = linear(g, "reward.fc2", x)?;
        let x = g.silu(x);
        let x = linear(g, "reward.out", x)?;
        Ok(g.sigmoid(x))
    }

    pub fn reward_loss(&self, g: &mut Graph, r_hat: Var, r_gt: f64) -> Result<Var> {
        reward_loss(g, r_hat, r_gt)
    }

    /// Sum over modes of reward-weighted mean squared error against `gt`.
    /// Rewards are plain numbers, so no gradient reaches the reward model.
    pub fn reward_weighted_action_loss(
        &self,
        g: &mut Graph,
        pred: &TrajectorySet,
        gt: &Trajectory,
        rewards: &[f64],
        weighting: RewardWeighting,
    ) -> Result<Var> {
        let k = pred.k(g);
        if rewards.len() != k {
            return Err(dim_err!("{} rewards for {k} modes", rewards.len()));
        }
        let gt = g.constant(self.traj_row(gt)?);
        let weights: Vec<f64> = match weighting {
            RewardWeighting::PerMode => rewards.to_vec(),
            RewardWeighting::SingleBest => {
                let best = argmax(rewards);
                (0..k).map(|i| if i == best { rewards[i] } else { 0.0 }).collect()
            }
        };
        let mut total: Option<Var> = None;
        for (i, &w) in weights.iter().enumerate() {
            let row = pred.mode_row(g, i)?;
            let e = g.mse(row, gt)?;
            let e = g.scale(e, w);
            total = Some(match total {
                None => e,
                Some(t) => g.add(t, e)?,
            });
        }
        Ok(total.expect("at least one mode"))
    }

    /// Unweighted sum of per-mode mean squared errors.
    pub fn regression_loss(&self, g: &mut Graph, pred: &TrajectorySet, gt: &Trajectory) -> Result<Var> {
        let gt = g.constant(self.traj_row(gt)?);
        let mut total: Option<Var> = None;
        for i in 0..pred.k(g) {
            let row = pred.mode_row(g, i)?;
            let e = g.mse(row, gt)?;
            total = Some(match total {
                None => e,
                Some(t) => g.add(t, e)?,
            });
        }
        total.ok_or_else(|| dim_err!("empty trajectory set"))
    }
}

pub fn reward_loss(g: &mut Graph, r_hat: Var, r_gt: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&r_gt) {
        return Err(Error::Value(format!("reward target {r_gt} outside [0, 1]")));
    }
    if g.shape(r_hat) != (1, 1) {
        return Err(dim_err!("reward prediction {:?}", g.shape(r_hat)));
    }
    let t = g.constant(Tensor::scalar(r_gt));
    g.mse(r_hat, t)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::testutil::*;
    use super::super::Inputs;
    use super::*;
    use crate::tensor::{grad_check, grad_check_params, grad_check_with, ParameterStore};
    use crate::world::Command;

    fn rand_latent(g: &mut Graph, m: &Model, seed: u64) -> BevLatent {
        let t = Tensor::randn(
            &[m.n_patches(), m.cfg.d_latent],
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        BevLatent {
            tokens: g.constant(t),
            grid_hw: (m.world.grid_h, m.world.grid_w),
        }
    }

    fn traj(m: &Model, seed: u64) -> Trajectory {
        let t = Tensor::randn(&[1, 2 * m.horizon()], 2.0, &mut ChaCha8Rng::seed_from_u64(seed));
        Trajectory::from_flat(t.data())
    }

    fn set_from(g: &mut Graph, modes: Tensor, k: usize) -> TrajectorySet {
        let modes = g.input(modes);
        let logits = g.input(Tensor::zeros(&[1, k]));
        TrajectorySet { modes, logits }
    }

    #[test]
    fn seg_softmax_is_categorical_and_zero_head_is_uniform() {
        let m = small();
        let mut s = m.init(0).unwrap();
        let mut g = Graph::no_grad(&s);
        let b = rand_latent(&mut g, &m, 1);
        let seg = m.seg_decode(&mut g, &b).unwrap();
        let t = seg.to_grid(&g, &m);
        assert_eq!(t.shape(), &[m.world.n_cells(), 4]);
        assert!(t.data().iter().all(|&x| x == 0.0));

        jitter(&mut s, 0, 1.0);
        let mut g = Graph::no_grad(&s);
        let b = rand_latent(&mut g, &m, 1);
        let seg = m.seg_decode(&mut g, &b).unwrap();
        let grid = seg.to_grid(&g, &m);
        let gv = g.constant(grid);
        let probs = g.softmax_rows(gv).unwrap();
        for row in g.value(probs).data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn seg_loss_uniform_and_confident() {
        let m = small();
        let s = m.init(0).unwrap();
        let target = raster(&m, 3);
        let mut g = Graph::no_grad(&s);
        let b = rand_latent(&mut g, &m, 1);
        let seg = m.seg_decode(&mut g, &b).unwrap();
        let l = m.seg_loss(&mut g, &seg, &target).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        // Large logits on the true class, placed through the patch layout.
        let mut data = vec![0.0; m.n_patches() * m.patch_dim()];
        for (idx, &c) in target.iter().enumerate() {
            let (tok, inner) = m.patch_position(idx / 16, idx % 16);
            data[tok * m.patch_dim() + inner * 4 + c as usize] = 50.0;
        }
        let lg = g.constant(Tensor::from_rows(m.n_patches(), m.patch_dim(), &data).unwrap());
        let seg = SegLogits { logits: lg };
        let l = m.seg_loss(&mut g, &seg, &target).unwrap();
        assert!(g.value(l).item() < 1e-15);
        assert_eq!(seg.classes(&g, &m), target);
    }

    #[test]
    fn seg_errors() {
        let m = small();
        let s = m.init(0).unwrap();
        let mut g = Graph::no_grad(&s);
        let b = rand_latent(&mut g, &m, 1);
        let seg = m.seg_decode(&mut g, &b).unwrap();
        let mut bad = raster(&m, 0);
        bad[5] = 4;
        assert!(matches!(m.seg_loss(&mut g, &seg, &bad), Err(Error::Value(_))));
        assert!(matches!(m.seg_loss(&mut g, &seg, &bad[1..]), Err(Error::Dimension(_))));
        let wrong = BevLatent {
            tokens: g.constant(Tensor::zeros(&[3, m.cfg.d_latent])),
            grid_hw: (16, 16),
        };
        assert!(matches!(m.seg_decode(&mut g, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn seg_loss_gradient() {
        let m = small();
        let target = raster(&m, 3);
        let x = Tensor::randn(&[m.n_patches(), m.patch_dim()], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let err = grad_check(|g, v| m.seg_loss(g, &SegLogits { logits: v }, &target), &x, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn act_predict_shape_and_zero_head() {
        let m = small();
        let s = m.init(0).unwrap();
        let (obs, bev, hist) = inputs(&m, 0);
        let mut g = Graph::no_grad(&s);
        let inp = Inputs {
            obs: &obs,
            bev: &bev,
            hist,
            command: Command::Right,
        };
        let ctx = m.context(&mut g, &inp).unwrap();
        let set = m.act_predict(&mut g, &ctx.h, &ctx.bev_c, &ctx.act).unwrap();
        assert_eq!(g.shape(set.modes), (3, 8));
        assert_eq!(g.shape(set.logits), (1, 3));
        let trajs = set.trajectories(&g);
        assert_eq!(trajs.len(), 3);
        for t in trajs {
            assert_eq!(t, Trajectory::zeros(4));
        }
    }

    #[test]
    fn act_loss_cases() {
        let m = small();
        let s = ParameterStore::new();
        let gt = traj(&m, 1);
        let mut rows = traj(&m, 2).to_row().data().to_vec();
        rows.extend_from_slice(gt.to_row().data());
        rows.extend(traj(&m, 3).to_row().data());
        let mut g = Graph::new(&s);
        let set = set_from(&mut g, Tensor::from_rows(3, 8, &rows).unwrap(), 3);
        let l = m.act_loss(&mut g, &set, &gt).unwrap();
        // Regression term vanishes; uniform logits leave ln 3.
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);

        let mut g = Graph::new(&s);
        let one = set_from(&mut g, traj(&m, 2).to_row(), 1);
        let l = m.act_loss(&mut g, &one, &gt).unwrap();
        let expect = traj(&m, 2).mse(&gt);
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn act_winner_ties_go_to_lowest_index() {
        let gt = Tensor::row(&[0.0, 0.0]);
        let modes = Tensor::from_rows(3, 2, &[5.0, 0.0, 1.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!(act_winner(&modes, &gt).unwrap(), 1);
        let swapped = Tensor::from_rows(3, 2, &[5.0, 0.0, 0.0, -1.0, 1.0, 0.0]).unwrap();
        assert_eq!(act_winner(&swapped, &gt).unwrap(), 1);
        assert!(act_winner(&modes, &Tensor::row(&[0.0])).is_err());
    }

    #[test]
    fn act_loss_gradient() {
        let m = small();
        let s = ParameterStore::new();
        let gt = traj(&m, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, 27], 2.0, &mut rng);
        let f = |g: &mut Graph, v: Var| {
            let flat = g.slice_cols(v, 0, 24)?;
            let modes = g.reshape(flat, 3, 8)?;
            let logits = g.slice_cols(v, 24, 3)?;
            m.act_loss(g, &TrajectorySet { modes, logits }, &gt)
        };
        let err = grad_check_with(&s, f, &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reward_range_and_zero_head() {
        let m = small();
        let mut s = m.init(0).unwrap();
        let mut g = Graph::no_grad(&s);
        let a = rand_latent(&mut g, &m, 1);
        let b = rand_latent(&mut g, &m, 2);
        let t = g.constant(traj(&m, 3).to_row());
        let r = m.reward_score(&mut g, &a, &b, t).unwrap();
        assert_eq!(g.value(r).item(), 0.5);

        jitter(&mut s, 4, 0.5);
        for seed in 0..20 {
            let mut g = Graph::no_grad(&s);
            let a = rand_latent(&mut g, &m, seed);
            let b = rand_latent(&mut g, &m, seed + 100);
            let t = g.constant(traj(&m, seed).to_row());
            let rv = m.reward_score(&mut g, &a, &b, t).unwrap();
            let r = g.value(rv).item();
            assert!(r > 0.0 && r < 1.0);
        }
        let mut g = Graph::no_grad(&s);
        let a = rand_latent(&mut g, &m, 1);
        let short = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            m.reward_score(&mut g, &a, &a, short),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn reward_loss_cases() {
        let s = ParameterStore::new();
        let mut g = Graph::new(&s);
        let r = g.input(Tensor::scalar(0.3));
        let l = reward_loss(&mut g, r, 0.3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let z = g.input(Tensor::scalar(0.0));
        let l = reward_loss(&mut g, z, 1.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        for bad in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(reward_loss(&mut g, r, bad), Err(Error::Value(_))));
        }
        let err = grad_check(|g, v| reward_loss(g, v, 0.8), &Tensor::scalar(0.37), 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reward_gradient() {
        let m = small();
        let mut s = m.init(0).unwrap();
        jitter(&mut s, 5, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[m.n_patches(), 8], 1.0, &mut rng);
        let b = Tensor::randn(&[m.n_patches(), 8], 1.0, &mut rng);
        let t = traj(&m, 7).to_row();
        let names = ["reward.traj.w", "reward.fc1.w", "reward.fc2.b", "reward.out.w"];
        let err = grad_check_params(&s, &names, 1e-6, |g| {
            let ai = BevLatent {
                tokens: g.constant(a.clone()),
                grid_hw: (16, 16),
            };
            let bi = BevLatent {
                tokens: g.constant(b.clone()),
                grid_hw: (16, 16),
            };
            let tv = g.constant(t.clone());
            let r = m.reward_score(g, &ai, &bi, tv)?;
            reward_loss(g, r, 0.9)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reward_weighting_cases() {
        let m = small();
        let s = ParameterStore::new();
        let gt = traj(&m, 1);
        let modes = Tensor::randn(&[3, 8], 2.0, &mut ChaCha8Rng::seed_from_u64(4));
        let run = |rewards: &[f64], w: RewardWeighting| {
            let mut g = Graph::new(&s);
            let set = set_from(&mut g, modes.clone(), 3);
            let l = m.reward_weighted_action_loss(&mut g, &set, &gt, rewards, w).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.wrt(set.modes).unwrap().clone())
        };
        let mse0 = Trajectory::from_flat(&modes.data()[..8]).mse(&gt);
        let (l, _) = run(&[1.0, 0.0, 0.0], RewardWeighting::PerMode);
        assert!((l - mse0).abs() < 1e-12);
        let (l, grad) = run(&[0.0; 3], RewardWeighting::PerMode);
        assert_eq!(l, 0.0);
        assert!(grad.data().iter().all(|&x| x == 0.0));
        let (l, _) = run(&[0.2, 0.9, 0.4], RewardWeighting::SingleBest);
        let mse1 = Trajectory::from_flat(&modes.data()[8..16]).mse(&gt);
        assert!((l - 0.9 * mse1).abs() < 1e-12);

        let mut g = Graph::new(&s);
        let set = set_from(&mut g, modes.clone(), 3);
        assert!(matches!(
            m.reward_weighted_action_loss(&mut g, &set, &gt, &[1.0], RewardWeighting::PerMode),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn unit_rewards_match_unweighted_loss_bitwise() {
        let m = small();
        let s = ParameterStore::new();
        let gt = traj(&m, 1);
        let modes = Tensor::randn(&[3, 8], 2.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new(&s);
        let set = set_from(&mut g, modes.clone(), 3);
        let a = m
            .reward_weighted_action_loss(&mut g, &set, &gt, &[1.0; 3], RewardWeighting::PerMode)
            .unwrap();
        let ga = g.backward(a).unwrap().wrt(set.modes).unwrap().clone();
        let mut g2 = Graph::new(&s);
        let set2 = set_from(&mut g2, modes, 3);
        let b = m.regression_loss(&mut g2, &set2, &gt).unwrap();
        let gb = g2.backward(b).unwrap().wrt(set2.modes).unwrap().clone();
        assert_eq!(g.value(a).item().to_bits(), g2.value(b).item().to_bits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn end_to_end_stage_one_loss_gradient() {
        let m = small();
        let mut s = m.init(0).unwrap();
        jitter(&mut s, 11, 0.2);
        let (obs, bev, hist) = inputs(&m, 5);
        let future = raster(&m, 99);
        let gt = traj(&m, 12);
        let names = [
            "tokenizer.obs.w",
            "tokenizer.bev.w",
            "tokenizer.act.w",
            "tokenizer.cmd.emb",
            "backbone.blocks.0.attn.wq",
            "backbone.latents.q",
            "cross_attn.attn.wo",
            "hist_branch.out.w",
            "seg_head.w",
            "action_head.fc1.w",
            "action_head.out.w",
        ];
        let err = grad_check_params(&s, &names, 1e-5, |g| {
            let inp = Inputs {
                obs: &obs,
                bev: &bev,
                hist: hist.clone(),
                command: Command::Left,
            };
            let ctx = m.context(g, &inp)?;
            let s_t = m.seg_decode(g, &ctx.bev_c)?;
            let l1 = m.seg_loss(g, &s_t, &bev)?;
            let fut = m.history_predict(g, &ctx.h, &ctx.bev_c, &ctx.act)?;
            let s_f = m.seg_decode(g, &fut)?;
            let l2 = m.seg_loss(g, &s_f, &future)?;
            let set = m.act_predict(g, &ctx.h, &ctx.bev_c, &ctx.act)?;
            let l3 = m.act_loss(g, &set, &gt)?;
            let l = g.add(l1, l2)?;
            g.add(l, l3)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
