//! Conditional noise-prediction network: latent tokens with a 2-D positional
//! grid, a time embedding driving per-block scale/shift modulation, and a
//! stack of transformer diffusion blocks (self-attention, cross-attention to
//! the caption, MLP).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{bail, Result};
use crate::nn::{positional_grid, sinusoid, Attention, LayerNorm, Linear, Mlp};
use crate::params::{Bound, Fwd, ParamStore};
use crate::tensor::Matrix;
use crate::textcond::{TextEmbedding, TextVar};

/// Latent channel count produced by the VAE.
pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub side: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Diffusion steps `T`; valid time indices are `1..=T`.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    modulation: Linear,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

/// Cross-attention weights of one head in one block, `(S·S) × 77`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub head: usize,
    pub weights: Matrix,
}

pub struct DenoiseVars {
    pub eps: Var,
    /// Cross-attention weights per block, then per head; empty unless
    /// recording was requested.
    pub maps: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    in_proj: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    out_proj: Linear,
    grid: Matrix,
}

/// `x ⊙ α + β` with `α`, `β` broadcast over rows.
pub fn time_scale_shift(tape: &mut Tape, x: Var, alpha: Var, beta: Var) -> Var {
    let y = tape.mul_row(x, alpha);
    tape.add_row(y, beta)
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DenoiserConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let in_proj = Linear::new(store, "den.in_proj", LATENT_CHANNELS, d, true, rng);
        let time1 = Linear::new(store, "den.time1", d, d, true, rng);
        let time2 = Linear::new(store, "den.time2", d, d, true, rng);
        let blocks = (0..config.blocks)
            .map(|i| {
                let name = format!("den.block{i}");
                let modulation = Linear::new(store, &format!("{name}.modulation"), d, 6 * d, true, rng);
                // scales start at 1 so the untrained block passes features through
                let bias = modulation.bias.expect("modulation has a bias");
                let offset = store.section(bias).offset;
                for pair in 0..3 {
                    let start = offset + 2 * pair * d;
                    store.flat_mut()[start..start + d].fill(1.0);
                }
                Block {
                    modulation,
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
                    self_attn: Attention::new(store, &format!("{name}.self_attn"), d, config.heads, true, rng),
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
                    cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, config.heads, false, rng),
                    ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
                    mlp: Mlp::new(store, &format!("{name}.mlp"), d, 4 * d, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, "den.ln_out", d);
        let out_proj = Linear::zeros(store, "den.out_proj", d, LATENT_CHANNELS);
        Self { config, in_proj, time1, time2, blocks, ln_out, out_proj, grid: positional_grid(config.side, d) }
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.steps {
            bail!(Argument, "time step {t} outside 1..={}", self.config.steps);
        }
        Ok(())
    }

    /// Sinusoid of `t` → Linear → SiLU → Linear.
    pub fn time_embedding(&self, f: &mut Fwd, t: usize) -> Result<Var> {
        self.check_time(t)?;
        let s = f.input(Matrix::row_vector(sinusoid(t as f64, self.config.dim)));
        let h = self.time1.forward(f, s);
        let h = f.tape.silu(h);
        Ok(self.time2.forward(f, h))
    }

    pub fn embed_time(&self, store: &ParamStore, t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(store);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let v = self.time_embedding(&mut f, t)?;
        Ok(f.tape.value(v).data().to_vec())
    }

    /// `z_t` is pixel-major, `(S·S) × 4`; returns ε̂ in the same layout.
    pub fn forward(&self, f: &mut Fwd, z_t: Var, t: usize, ctx: &TextVar, record_maps: bool) -> Result<DenoiseVars> {
        let tokens = self.config.side * self.config.side;
        if f.tape.value(z_t).shape() != (tokens, LATENT_CHANNELS) {
            bail!(Argument, "latent shape {:?} does not match side {}", f.tape.value(z_t).shape(), self.config.side);
        }
        let d = self.config.dim;
        let t_emb = self.time_embedding(f, t)?;
        let t_act = f.tape.silu(t_emb);
        let x = self.in_proj.forward(f, z_t);
        let grid = f.input(self.grid.clone());
        let mut x = f.tape.add(x, grid);
        let mut maps = Vec::new();
        for block in &self.blocks {
            let m = block.modulation.forward(f, t_act);
            let chunk: Vec<Var> = (0..6).map(|i| f.tape.slice_cols(m, i * d, d)).collect();

            let h = block.ln1.forward(f, x);
            let h = time_scale_shift(f.tape, h, chunk[0], chunk[1]);
            let a = block.self_attn.forward(f, h, h, None).output;
            x = f.tape.add(x, a);

            let h = block.ln2.forward(f, x);
            let h = time_scale_shift(f.tape, h, chunk[2], chunk[3]);
            let cross = block.cross_attn.forward(f, h, ctx.tokens, Some(&ctx.key_mask));
            x = f.tape.add(x, cross.output);
            if record_maps {
                maps.push(cross.weights);
            }

            let h = block.ln3.forward(f, x);
            let h = time_scale_shift(f.tape, h, chunk[4], chunk[5]);
            let h = block.mlp.forward(f, h);
            x = f.tape.add(x, h);
        }
        let x = self.ln_out.forward(f, x);
        Ok(DenoiseVars { eps: self.out_proj.forward(f, x), maps })
    }

    /// Value-level forward pass returning ε̂ and, when requested, every
    /// cross-attention map.
    pub fn denoise(
        &self,
        store: &ParamStore,
        z_t: &Matrix,
        t: usize,
        c: &TextEmbedding,
        record_maps: bool,
    ) -> Result<(Matrix, Vec<AttentionMap>)> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(store);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let z = f.input(z_t.clone());
        let ctx = TextVar { tokens: f.input(c.tokens_emb.clone()), key_mask: c.key_mask.clone(), pooled_row: 0 };
        let out = self.forward(&mut f, z, t, &ctx, record_maps)?;
        let maps = out
            .maps
            .iter()
            .enumerate()
            .flat_map(|(block, heads)| {
                let tape = &*f.tape;
                heads.iter().enumerate().map(move |(head, w)| AttentionMap { block, head, weights: tape.value(*w).clone() })
            })
            .collect();
        Ok((f.tape.value(out.eps).clone(), maps))
    }

    /// True while the output head still holds its all-zero initialization.
    pub fn is_untrained(&self, store: &ParamStore) -> bool {
        store.slice(self.out_proj.weight).iter().all(|&w| w == 0.0)
    }
}
