use rand::Rng;

use super::nn::{block, linear, ln, ln_plain, mha, mlp, modulate, param, sinusoidal};
use super::{BevLatent, HiddenState, Model, TokenSeq};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

/// How the two future latents are combined for decoding.
#[derive(Clone, Copy, Debug)]
pub enum Fusion {
    Mean,
    /// Weight on the history-branch latent, in `[0, 1]`, as a `1×1` value.
    Gate(Var),
}

/// `N` Euler steps of size `1/N` from `b0`. The field is queried with the
/// current state and a step label in `1..=N`; the first step reuses label 1.
pub fn euler_integrate<F>(b0: Tensor, n: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if n == 0 {
        return Err(Error::Range("Euler integration needs at least one step".into()));
    }
    let mut b = b0;
    let h = 1.0 / n as f64;
    for j in 0..n {
        let mut v = field(&b, j.max(1))?;
        if v.shape() != b.shape() {
            return Err(dim_err!("velocity {:?} vs state {:?}", v.shape(), b.shape()));
        }
        v.scale_assign(h);
        b.add_assign(&v);
    }
    Ok(b)
}

impl Model {
    /// Deterministic future latent from the hidden state, the conditioned
    /// BEV tokens and the action history.
    pub fn history_predict(
        &self,
        g: &mut Graph,
        h: &HiddenState,
        bev_c: &BevLatent,
        act: &TokenSeq,
    ) -> Result<BevLatent> {
        let c = &self.cfg;
        self.check_bev(g, bev_c)?;
        if g.shape(h.latents).1 != c.d_latent {
            return Err(dim_err!("hidden width {} vs d_latent", g.shape(h.latents).1));
        }
        let mut kv = vec![h.latents];
        if g.shape(act.emb).0 > 0 {
            kv.push(linear(g, "hist_branch.act_proj", act.emb)?);
        }
        let kv = g.concat_rows(&kv)?;
        let q = ln(g, "hist_branch.ln", bev_c.tokens, c.ln_eps)?;
        let a = mha(g, "hist_branch.xattn", q, kv, c.n_heads)?;
        let mut x = g.add(bev_c.tokens, a)?;
        for i in 0..c.hist_depth {
            x = block(g, &format!("hist_branch.blocks.{i}"), x, c.n_heads, c.ln_eps)?;
        }
        let x = ln(g, "hist_branch.ln_f", x, c.ln_eps)?;
        let d = linear(g, "hist_branch.out", x)?;
        let tokens = g.add(bev_c.tokens, d)?;
        Ok(BevLatent {
            tokens,
            grid_hw: bev_c.grid_hw,
        })
    }

    /// Velocity predicted for sample `x` at step `k` of `N`, conditioned on
    /// the BEV latent and a future trajectory row (`1 × 2H`, meters).
    pub fn dit_velocity(&self, g: &mut Graph, x: Var, k: usize, bev_c: &BevLatent, act: Var) -> Result<Var> {
        let c = &self.cfg;
        let n = self.flow.n_steps;
        if k == 0 || k > n {
            return Err(Error::Range(format!("flow step {k} outside 1..={n}")));
        }
        self.check_bev(g, bev_c)?;
        if g.shape(x) != g.shape(bev_c.tokens) {
            return Err(dim_err!("sample {:?} vs BEV {:?}", g.shape(x), g.shape(bev_c.tokens)));
        }
        if g.shape(act) != (1, 2 * self.horizon()) {
            return Err(dim_err!(
                "action row {:?}, expected (1, {})",
                g.shape(act),
                2 * self.horizon()
            ));
        }
        let dl = c.d_latent;
        let eps = c.ln_eps;

        let temb = g.constant(sinusoidal(k as f64 / n as f64, dl));
        let t = linear(g, "dit.t_mlp.fc1", temb)?;
        let t = g.silu(t);
        let t = linear(g, "dit.t_mlp.fc2", t)?;
        let a = g.scale(act, 1.0 / c.action_scale);
        let a = linear(g, "dit.a_mlp.fc1", a)?;
        let a = g.silu(a);
        let a = linear(g, "dit.a_mlp.fc2", a)?;
        let bm = g.mean_rows(bev_c.tokens);
        let bm = linear(g, "dit.b_proj", bm)?;
        let cond = g.add(t, a)?;
        let cond = g.add(cond, bm)?;
        let cond = g.silu(cond);

        let xi = linear(g, "dit.x_in", x)?;
        let bn = ln_plain(g, bev_c.tokens, eps)?;
        let wc = g.param("dit.cond_in.w")?;
        let bc = g.matmul(bn, wc)?;
        let pos = g.param("dit.pos")?;
        let mut h = g.add(xi, bc)?;
        h = g.add(h, pos)?;

        for i in 0..c.dit_depth {
            let p = format!("dit.blocks.{i}");
            let m = linear(g, &format!("{p}.ada"), cond)?;
            let part = |g: &mut Graph, j: usize| g.slice_cols(m, j * dl, dl);
            let (sh1, sc1, g1) = (part(g, 0)?, part(g, 1)?, part(g, 2)?);
            let (sh2, sc2, g2) = (part(g, 3)?, part(g, 4)?, part(g, 5)?);
            let y = ln_plain(g, h, eps)?;
            let y = modulate(g, y, sh1, sc1)?;
            let y = mha(g, &format!("{p}.attn"), y, y, c.n_heads)?;
            let y = g.mul_row(y, g1)?;
            h = g.add(h, y)?;
            let y = ln_plain(g, h, eps)?;
            let y = modulate(g, y, sh2, sc2)?;
            let y = mlp(g, &format!("{p}.mlp"), y)?;
            let y = g.mul_row(y, g2)?;
            h = g.add(h, y)?;
        }
        let m = linear(g, "dit.final.ada", cond)?;
        let sh = g.slice_cols(m, 0, dl)?;
        let sc = g.slice_cols(m, dl, dl)?;
        let y = ln_plain(g, h, eps)?;
        let y = modulate(g, y, sh, sc)?;
        let w = param(g, "dit.final.out", "w")?;
        let b = param(g, "dit.final.out", "b")?;
        let y = g.matmul(y, w)?;
        g.add_row(y, b)
    }

    /// Flow-matching loss for a given noise sample and step.
    pub fn fm_loss_at(
        &self,
        g: &mut Graph,
        target: &Tensor,
        bev_c: &BevLatent,
        act: Var,
        x0: &Tensor,
        k: usize,
    ) -> Result<Var> {
        if target.shape() != x0.shape() {
            return Err(dim_err!("target {:?} vs noise {:?}", target.shape(), x0.shape()));
        }
        let s = k as f64 / self.flow.n_steps as f64;
        let xk = x0.zip_map(target, |a, b| (1.0 - s) * a + s * b)?;
        let vt = target.zip_map(x0, |a, b| a - b)?;
        let xk = g.constant(xk);
        let vt = g.constant(vt);
        let v = self.dit_velocity(g, xk, k, bev_c, act)?;
        g.mse(v, vt)
    }

    /// Flow-matching loss with `x0 ~ N(0, I)` and `k ~ U{1..N}` drawn from `rng`.
    pub fn fm_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        target: &Tensor,
        bev_c: &BevLatent,
        act: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let x0 = Tensor::randn(target.shape(), 1.0, rng);
        let k = rng.random_range(1..=self.flow.n_steps);
        self.fm_loss_at(g, target, bev_c, act, &x0, k)
    }

    /// Euler sampling from a given start, each step on a fresh gradient-free tape.
    pub fn euler_sample_from(
        &self,
        store: &ParameterStore,
        bev_c: &Tensor,
        act: &Tensor,
        b0: Tensor,
    ) -> Result<Tensor> {
        let grid_hw = (self.world.grid_h, self.world.grid_w);
        euler_integrate(b0, self.flow.n_steps, |b, k| {
            let mut g = Graph::no_grad(store);
            let x = g.constant(b.clone());
            let bc = BevLatent {
                tokens: g.constant(bev_c.clone()),
                grid_hw,
            };
            let a = g.constant(act.clone());
            let v = self.dit_velocity(&mut g, x, k, &bc, a)?;
            Ok(g.value(v).clone())
        })
    }

    /// Imagined future latent: `B⁰ ~ N(0, I)` integrated through the DiT.
    pub fn euler_sample<R: Rng + ?Sized>(
        &self,
        store: &ParameterStore,
        bev_c: &Tensor,
        act: &Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        let b0 = Tensor::randn(bev_c.shape(), 1.0, rng);
        self.euler_sample_from(store, bev_c, act, b0)
    }

    /// Euler sampling recorded on `g`, so gradients can reach `act`.
    pub fn euler_sample_on(&self, g: &mut Graph, bev_c: &BevLatent, act: Var, b0: Tensor) -> Result<BevLatent> {
        let n = self.flow.n_steps;
        let mut b = g.constant(b0);
        for j in 0..n {
            let v = self.dit_velocity(g, b, j.max(1), bev_c, act)?;
            let v = g.scale(v, 1.0 / n as f64);
            b = g.add(b, v)?;
        }
        Ok(BevLatent {
            tokens: b,
            grid_hw: bev_c.grid_hw,
        })
    }

    pub fn fuse_latents(
        &self,
        g: &mut Graph,
        b_hist: &BevLatent,
        b_gen: &BevLatent,
        fusion: Fusion,
    ) -> Result<BevLatent> {
        fuse_latents(g, b_hist, b_gen, fusion)
    }
}

pub(crate) fn fuse_latents(g: &mut Graph, b_hist: &BevLatent, b_gen: &BevLatent, fusion: Fusion) -> Result<BevLatent> {
    let (a, b) = (b_hist.tokens, b_gen.tokens);
    if g.shape(a) != g.shape(b) {
        return Err(dim_err!("fusing {:?} with {:?}", g.shape(a), g.shape(b)));
    }
    let tokens = match fusion {
        Fusion::Mean => {
            let s = g.add(a, b)?;
            g.scale(s, 0.5)
        }
        Fusion::Gate(w) => {
            if g.shape(w) != (1, 1) {
                return Err(dim_err!("gate weight must be 1x1"));
            }
            let d = g.shape(a).1;
            let ones = g.constant(Tensor::full(&[1, d], 1.0));
            let wr = g.matmul(w, ones)?;
            let neg = g.scale(wr, -1.0);
            let wr_c = g.add_scalar(neg, 1.0);
            let x = g.mul_row(a, wr)?;
            let y = g.mul_row(b, wr_c)?;
            g.add(x, y)?
        }
    };
    Ok(BevLatent {
        tokens,
        grid_hw: b_hist.grid_hw,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::testutil::*;
    use super::super::Inputs;
    use super::*;
    use crate::tensor::grad_check_params;
    use crate::world::Command;

    fn bev_latent(g: &mut Graph, m: &Model, seed: u64) -> BevLatent {
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

    fn act_row(m: &Model, seed: u64) -> Tensor {
        Tensor::randn(&[1, 2 * m.horizon()], 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn euler_of_constant_field_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 25] {
            let b0 = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let v = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let out = euler_integrate(b0.clone(), n, |_, _| Ok(v.clone())).unwrap();
            let expect = b0.zip_map(&v, |a, b| a + b).unwrap();
            assert!(out.max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn single_step_euler() {
        let b0 = Tensor::row(&[1.0, 2.0]);
        let out = euler_integrate(b0, 1, |b, k| {
            assert_eq!(k, 1);
            Ok(b.map(|x| 3.0 * x))
        })
        .unwrap();
        assert_eq!(out.data(), &[4.0, 8.0]);
    }

    #[test]
    fn zero_output_history_branch_returns_input() {
        let m = small();
        let s = m.init(0).unwrap();
        let (obs, bev, hist) = inputs(&m, 0);
        let mut g = Graph::no_grad(&s);
        let inp = Inputs {
            obs: &obs,
            bev: &bev,
            hist,
            command: Command::Left,
        };
        let ctx = m.context(&mut g, &inp).unwrap();
        let out = m.history_predict(&mut g, &ctx.h, &ctx.bev_c, &ctx.act).unwrap();
        assert_eq!(g.shape(out.tokens), g.shape(ctx.bev_c.tokens));
        assert_eq!(g.value(out.tokens), g.value(ctx.bev_c.tokens));
    }

    #[test]
    fn fresh_dit_predicts_zero_velocity() {
        let m = small();
        let s = m.init(1).unwrap();
        let mut g = Graph::no_grad(&s);
        let b = bev_latent(&mut g, &m, 1);
        let x = bev_latent(&mut g, &m, 2).tokens;
        let a = g.constant(act_row(&m, 3));
        for k in 1..=m.flow.n_steps {
            let v = m.dit_velocity(&mut g, x, k, &b, a).unwrap();
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn step_out_of_range() {
        let m = small();
        let s = m.init(1).unwrap();
        let mut g = Graph::no_grad(&s);
        let b = bev_latent(&mut g, &m, 1);
        let a = g.constant(act_row(&m, 3));
        for k in [0, m.flow.n_steps + 1] {
            assert!(matches!(
                m.dit_velocity(&mut g, b.tokens, k, &b, a),
                Err(Error::Range(_))
            ));
        }
    }

    #[test]
    fn degenerate_pair_has_zero_regression_target() {
        let m = small();
        let mut s = m.init(2).unwrap();
        jitter(&mut s, 0, 0.2);
        let mut g = Graph::no_grad(&s);
        let b = bev_latent(&mut g, &m, 1);
        let a = g.constant(act_row(&m, 3));
        let t = g.value(b.tokens).clone();
        // With x0 = target the loss is the squared velocity itself.
        let loss = m.fm_loss_at(&mut g, &t, &b, a, &t, 2).unwrap();
        let xk = g.constant(t.clone());
        let v = m.dit_velocity(&mut g, xk, 2, &b, a).unwrap();
        let vs = g.square(v);
        let direct = g.mean(vs);
        assert!((g.value(loss).item() - g.value(direct).item()).abs() < 1e-14);
    }

    #[test]
    fn zero_init_loss_matches_closed_form() {
        let m = small();
        let s = m.init(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::no_grad(&s);
        let b = bev_latent(&mut g, &m, 4);
        let a = g.constant(act_row(&m, 3));
        let target = Tensor::randn(&[m.n_patches(), m.cfg.d_latent], 0.7, &mut rng);
        let analytic = 1.0 + target.sq_norm() / target.numel() as f64;
        let n = 1000;
        let mut total = 0.0;
        for _ in 0..n {
            let mut g2 = Graph::no_grad(&s);
            let b2 = BevLatent {
                tokens: g2.constant(g.value(b.tokens).clone()),
                grid_hw: b.grid_hw,
            };
            let a2 = g2.constant(g.value(a).clone());
            let l = m.fm_loss(&mut g2, &target, &b2, a2, &mut rng).unwrap();
            total += g2.value(l).item();
        }
        let mc = total / n as f64;
        assert!((mc - analytic).abs() / analytic < 0.05, "{mc} vs {analytic}");
    }

    #[test]
    fn euler_sampling_is_deterministic_and_one_step_case() {
        let mut m = small();
        let mut s = m.init(4).unwrap();
        jitter(&mut s, 1, 0.2);
        let bc = Tensor::randn(&[m.n_patches(), m.cfg.d_latent], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let a = act_row(&m, 2);
        let r1 = m.euler_sample(&s, &bc, &a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let r2 = m.euler_sample(&s, &bc, &a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(r1, r2);

        m.flow.n_steps = 1;
        let b0 = Tensor::randn(bc.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let one = m.euler_sample_from(&s, &bc, &a, b0.clone()).unwrap();
        let mut g = Graph::no_grad(&s);
        let x = g.constant(b0.clone());
        let bl = BevLatent {
            tokens: g.constant(bc.clone()),
            grid_hw: (16, 16),
        };
        let av = g.constant(a.clone());
        let v = m.dit_velocity(&mut g, x, 1, &bl, av).unwrap();
        let expect = b0.zip_map(g.value(v), |p, q| p + q).unwrap();
        assert_eq!(one, expect);
    }

    #[test]
    fn taped_and_untaped_sampling_agree() {
        let m = small();
        let mut s = m.init(5).unwrap();
        jitter(&mut s, 2, 0.2);
        let bc = Tensor::randn(&[m.n_patches(), m.cfg.d_latent], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let a = act_row(&m, 2);
        let b0 = Tensor::randn(bc.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let fast = m.euler_sample_from(&s, &bc, &a, b0.clone()).unwrap();
        let mut g = Graph::new(&s);
        let bl = BevLatent {
            tokens: g.constant(bc),
            grid_hw: (16, 16),
        };
        let av = g.input(a);
        let taped = m.euler_sample_on(&mut g, &bl, av, b0).unwrap();
        assert!(g.value(taped.tokens).max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn fusion_cases() {
        let s = ParameterStore::new();
        let mut g = Graph::new(&s);
        let x = Tensor::randn(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let a = BevLatent {
            tokens: g.constant(x.clone()),
            grid_hw: (1, 1),
        };
        let neg = BevLatent {
            tokens: g.constant(x.map(|v| -v)),
            grid_hw: (1, 1),
        };
        let same = fuse_latents(&mut g, &a, &a, Fusion::Mean).unwrap();
        assert_eq!(g.value(same.tokens), &x);
        let z = fuse_latents(&mut g, &a, &neg, Fusion::Mean).unwrap();
        assert!(g.value(z.tokens).data().iter().all(|&v| v == 0.0));
        let one = g.constant(Tensor::scalar(1.0));
        let gated = fuse_latents(&mut g, &a, &neg, Fusion::Gate(one)).unwrap();
        assert_eq!(g.value(gated.tokens), &x);
        let other = BevLatent {
            tokens: g.constant(Tensor::zeros(&[2, 4])),
            grid_hw: (1, 1),
        };
        assert!(matches!(
            fuse_latents(&mut g, &a, &other, Fusion::Mean),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn branch_gradients() {
        let m = small();
        let mut s = m.init(6).unwrap();
        jitter(&mut s, 3, 0.3);
        let (obs, bev, hist) = inputs(&m, 4);
        let names = [
            "hist_branch.out.w",
            "hist_branch.xattn.wq",
            "hist_branch.blocks.0.mlp.fc1.w",
        ];
        let err = grad_check_params(&s, &names, 1e-6, |g| {
            let inp = Inputs {
                obs: &obs,
                bev: &bev,
                hist: hist.clone(),
                command: Command::Straight,
            };
            let ctx = m.context(g, &inp)?;
            let out = m.history_predict(g, &ctx.h, &ctx.bev_c, &ctx.act)?;
            let sq = g.square(out.tokens);
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let bc = Tensor::randn(&[m.n_patches(), m.cfg.d_latent], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let target = Tensor::randn(bc.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let x0 = Tensor::randn(bc.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = act_row(&m, 4);
        let names = [
            "dit.blocks.0.ada.w",
            "dit.final.out.w",
            "dit.a_mlp.fc1.w",
            "dit.blocks.0.attn.wk",
        ];
        let err = grad_check_params(&s, &names, 1e-6, |g| {
            let bl = BevLatent {
                tokens: g.constant(bc.clone()),
                grid_hw: (16, 16),
            };
            let av = g.constant(a.clone());
            m.fm_loss_at(g, &target, &bl, av, &x0, 3)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
