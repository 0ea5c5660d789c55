//! Layer building blocks shared by the VAE, the text encoder, the denoiser
//! and the reference classifier.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{GatherMap, Tape, Var};
use crate::params::{Fwd, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Affine map `x·W + b` over rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, fan_out));
        Self { weight, bias, fan_in, fan_out }
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add_zeros(format!("{name}.weight"), fan_in, fan_out);
        let bias = Some(store.add_zeros(format!("{name}.bias"), 1, fan_out));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let w = f.p(self.weight);
        let y = f.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                f.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0));
        let bias = store.add_zeros(format!("{name}.bias"), 1, width);
        Self { gain, bias }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let n = f.tape.layer_norm(x);
        let g = f.p(self.gain);
        let b = f.p(self.bias);
        let y = f.tape.mul_row(n, g);
        f.tape.add_row(y, b)
    }
}

/// Index map turning `batch` stacked `(side·side)×channels` pixel matrices
/// into their 3×3 zero-padded neighbourhoods, one row per pixel and
/// `9·channels` columns.
pub fn conv3x3_map(side: usize, channels: usize, batch: usize) -> GatherMap {
    let p = side * side;
    let mut src = Vec::with_capacity(batch * p * 9 * channels);
    for b in 0..batch {
        let base = b * p * channels;
        for r in 0..side as isize {
            for c in 0..side as isize {
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let (rr, cc) = (r + dr, c + dc);
                        let inside = rr >= 0 && cc >= 0 && rr < side as isize && cc < side as isize;
                        for ch in 0..channels {
                            src.push(inside.then(|| base + (rr as usize * side + cc as usize) * channels + ch));
                        }
                    }
                }
            }
        }
    }
    GatherMap::new(batch * p, 9 * channels, src)
}

/// 3×3, stride-1, zero-padded convolution over pixel-major matrices. Spatial
/// size is preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub linear: Linear,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let linear = Linear::new(store, name, 9 * in_channels, out_channels, true, rng);
        Self { linear, in_channels, out_channels }
    }

    /// `map` must come from [`conv3x3_map`] for this layer's input width.
    pub fn forward(&self, f: &mut Fwd, x: Var, map: &Rc<GatherMap>) -> Var {
        let cols = f.tape.gather(x, map.clone());
        self.linear.forward(f, cols)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// sources. Each head uses the scale `1/sqrt(head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Option<Linear>,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head weight matrices, `queries × keys`.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        out_proj: bool,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dimension {dim} not divisible by {heads} heads");
        let wq = Linear::new(store, &format!("{name}.q"), dim, dim, false, rng);
        let wk = Linear::new(store, &format!("{name}.k"), dim, dim, false, rng);
        let wv = Linear::new(store, &format!("{name}.v"), dim, dim, false, rng);
        let wo = out_proj.then(|| Linear::new(store, &format!("{name}.o"), dim, dim, true, rng));
        Self { wq, wk, wv, wo, heads, dim }
    }

    /// `key_mask[j] == false` excludes key `j` from every softmax row.
    pub fn forward(&self, f: &mut Fwd, queries: Var, context: Var, key_mask: Option<&[bool]>) -> AttentionOutput {
        let q = self.wq.forward(f, queries);
        let k = self.wk.forward(f, context);
        let v = self.wv.forward(f, context);
        let hd = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (f.tape.slice_cols(q, h * hd, hd), f.tape.slice_cols(k, h * hd, hd), f.tape.slice_cols(v, h * hd, hd))
            };
            let (o, w) = scaled_dot_product(f.tape, qh, kh, vh, key_mask);
            outs.push(o);
            weights.push(w);
        }
        let joined = if self.heads == 1 { outs[0] } else { f.tape.concat_cols(&outs) };
        let output = match &self.wo {
            Some(wo) => wo.forward(f, joined),
            None => joined,
        };
        AttentionOutput { output, weights }
    }
}

/// `softmax(Q·Kᵀ/sqrt(width))·V` for one head; returns the output and the
/// weight matrix.
pub fn scaled_dot_product(tape: &mut Tape, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> (Var, Var) {
    let width = tape.value(q).cols();
    let logits = tape.matmul_t(q, false, k, true);
    let logits = tape.scale(logits, 1.0 / libm::sqrt(width as f64));
    let w = match key_mask {
        Some(m) => tape.masked_softmax(logits, m),
        None => tape.softmax(logits),
    };
    (tape.matmul(w, v), w)
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Var {
        let h = self.fc1.forward(f, x);
        let h = f.tape.gelu(h);
        self.fc2.forward(f, h)
    }
}

/// Sinusoidal encoding of a scalar position into `dim` values: the first half
/// holds sines, the second half cosines.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = alloc::vec![0.0; dim];
    for k in 0..half {
        let freq = libm::pow(10_000.0, -(k as f64) / half.max(1) as f64);
        out[k] = libm::sin(position * freq);
        out[half + k] = libm::cos(position * freq);
    }
    out
}

/// 1-D sinusoidal positional table, `len × dim`.
pub fn positional_table(len: usize, dim: usize) -> Matrix {
    let data = (0..len).flat_map(|p| sinusoid(p as f64, dim)).collect();
    Matrix::from_vec(len, dim, data)
}

/// 2-D sinusoidal table over a `side × side` grid, `(side·side) × dim`: half
/// of the channels encode the row, half the column.
pub fn positional_grid(side: usize, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Matrix::zeros(side * side, dim);
    for r in 0..side {
        for c in 0..side {
            let row = out.row_mut(r * side + c);
            row[..half].copy_from_slice(&sinusoid(r as f64, half));
            row[half..half * 2].copy_from_slice(&sinusoid(c as f64, half));
        }
    }
    out
}
