use super::nn::{block, linear, ln, mha};
use super::{BevLatent, HiddenState, Modality, Model, TokenSeq};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::world::Command;

impl Model {
    /// One-hot patches, `n_patches × patch²·n_classes`. Patches are ordered
    /// row-major over the grid; within a patch cells are row-major and each
    /// cell holds `n_classes` consecutive entries.
    pub fn one_hot_patches(&self, raster: &[u8]) -> Result<Tensor> {
        let w = &self.world;
        if raster.len() != w.n_cells() {
            return Err(dim_err!(
                "raster has {} cells, config expects {}x{}",
                raster.len(),
                w.grid_h,
                w.grid_w
            ));
        }
        let c = w.n_classes;
        let pd = self.patch_dim();
        let mut data = vec![0.0; self.n_patches() * pd];
        for (idx, &cls) in raster.iter().enumerate() {
            if cls as usize >= c {
                return Err(Error::Value(format!("class id {cls} >= {c}")));
            }
            let (tok, inner) = self.patch_position(idx / w.grid_w, idx % w.grid_w);
            data[tok * pd + inner * c + cls as usize] = 1.0;
        }
        Tensor::from_rows(self.n_patches(), pd, &data)
    }

    /// (token, in-patch cell) of grid cell `(i, j)`.
    pub fn patch_position(&self, i: usize, j: usize) -> (usize, usize) {
        let p = self.cfg.patch;
        let pw = self.world.grid_w / p;
        ((i / p) * pw + j / p, (i % p) * p + j % p)
    }

    pub fn tokenize_bev(&self, g: &mut Graph, raster: &[u8]) -> Result<BevLatent> {
        let x = self.one_hot_patches(raster)?;
        let x = g.constant(x);
        let tokens = linear(g, "tokenizer.bev", x)?;
        Ok(BevLatent {
            tokens,
            grid_hw: (self.world.grid_h, self.world.grid_w),
        })
    }

    /// Observation tokens in the encoder width, with patch positions.
    pub fn tokenize_obs(&self, g: &mut Graph, raster: &[u8]) -> Result<TokenSeq> {
        let x = self.one_hot_patches(raster)?;
        let x = g.constant(x);
        let e = linear(g, "tokenizer.obs", x)?;
        let pos = g.param("tokenizer.obs.pos")?;
        let emb = g.add(e, pos)?;
        Ok(TokenSeq {
            emb,
            tags: vec![Modality::Obs; self.n_patches()],
        })
    }

    /// Past ego waypoints through a shared affine map plus time embeddings.
    pub fn tokenize_actions(&self, g: &mut Graph, hist: &[[f64; 2]]) -> Result<TokenSeq> {
        let n = self.world.horizon_hist;
        if hist.len() != n {
            return Err(dim_err!("{} history waypoints, expected {n}", hist.len()));
        }
        if n == 0 {
            let emb = g.constant(Tensor::zeros(&[0, self.cfg.d_model]));
            return Ok(TokenSeq { emb, tags: vec![] });
        }
        let s = 1.0 / self.cfg.action_scale;
        let flat: Vec<f64> = hist.iter().flat_map(|p| [p[0] * s, p[1] * s]).collect();
        let x = g.constant(Tensor::from_rows(n, 2, &flat)?);
        let e = linear(g, "tokenizer.act", x)?;
        let pos = g.param("tokenizer.act.pos")?;
        let emb = g.add(e, pos)?;
        Ok(TokenSeq {
            emb,
            tags: vec![Modality::Action; n],
        })
    }

    pub fn tokenize_command(&self, g: &mut Graph, cmd: Command) -> Result<TokenSeq> {
        let table = g.param("tokenizer.cmd.emb")?;
        let emb = g.slice_rows(table, cmd.index(), 1)?;
        Ok(TokenSeq {
            emb,
            tags: vec![Modality::Command],
        })
    }

    fn typed(&self, g: &mut Graph, x: Var, m: Modality) -> Result<Var> {
        let table = g.param("backbone.type_emb")?;
        let row = g.slice_rows(table, m.index(), 1)?;
        g.add_row(x, row)
    }

    /// Shared-latent encoder: transformer over all tokens, projection to the
    /// latent width, then learnable queries attend into the projected sequence.
    pub fn encode(
        &self,
        g: &mut Graph,
        obs: &TokenSeq,
        bev: &BevLatent,
        act: &TokenSeq,
        cmd: &TokenSeq,
    ) -> Result<HiddenState> {
        let c = &self.cfg;
        let mut parts = Vec::new();
        for seq in [obs, act, cmd] {
            if g.shape(seq.emb).1 != c.d_model {
                return Err(dim_err!("token width {} vs d_model {}", g.shape(seq.emb).1, c.d_model));
            }
        }
        if g.shape(obs.emb).0 > 0 {
            parts.push(self.typed(g, obs.emb, Modality::Obs)?);
        }
        let nb = g.shape(bev.tokens).0;
        if nb > 0 {
            if g.shape(bev.tokens).1 != c.d_latent {
                return Err(dim_err!("BEV width {} vs d_latent", g.shape(bev.tokens).1));
            }
            let b = linear(g, "backbone.bev_in", bev.tokens)?;
            let pos = g.param("backbone.bev_pos")?;
            let b = if nb == self.n_patches() {
                g.add(b, pos)?
            } else {
                return Err(dim_err!("{nb} BEV tokens, expected {}", self.n_patches()));
            };
            parts.push(self.typed(g, b, Modality::Bev)?);
        }
        if g.shape(act.emb).0 > 0 {
            parts.push(self.typed(g, act.emb, Modality::Action)?);
        }
        if g.shape(cmd.emb).0 > 0 {
            parts.push(self.typed(g, cmd.emb, Modality::Command)?);
        }
        if parts.is_empty() {
            return Err(dim_err!("empty input sequence"));
        }
        let mut x = g.concat_rows(&parts)?;
        for i in 0..c.enc_layers {
            x = block(g, &format!("backbone.blocks.{i}"), x, c.n_heads, c.ln_eps)?;
        }
        let x = ln(g, "backbone.ln_f", x, c.ln_eps)?;
        let p = linear(g, "backbone.proj", x)?;
        let q = g.param("backbone.latents.q")?;
        let qn = ln(g, "backbone.latents.ln", q, c.ln_eps)?;
        let a = mha(g, "backbone.latents.attn", qn, p, c.n_heads)?;
        let latents = g.add(q, a)?;
        Ok(HiddenState { latents })
    }

    /// `B' = B + Attn(LN(B), H, H)`.
    pub fn cross_attend_bev(&self, g: &mut Graph, bev: &BevLatent, h: &HiddenState) -> Result<BevLatent> {
        let c = &self.cfg;
        let (_, dh) = g.shape(h.latents);
        let (_, db) = g.shape(bev.tokens);
        if dh != c.d_latent || db != c.d_latent {
            return Err(dim_err!(
                "cross attention widths: BEV {db}, hidden {dh}, d_latent {}",
                c.d_latent
            ));
        }
        let q = ln(g, "cross_attn.ln", bev.tokens, c.ln_eps)?;
        let a = mha(g, "cross_attn.attn", q, h.latents, c.n_heads)?;
        let tokens = g.add(bev.tokens, a)?;
        Ok(BevLatent {
            tokens,
            grid_hw: bev.grid_hw,
        })
    }
}
