//! Scaled dot-product and multi-head attention, masks, and sinusoidal
//! position signals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, NumericsError, Tensor, Var};

/// Additive mask: 0 where a key is visible, negative infinity where hidden.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask(Tensor);

impl AttentionMask {
    /// Wraps an additive mask, rejecting entries other than 0 and -inf.
    pub fn from_tensor(t: Tensor) -> Result<Self, NumericsError> {
        if t.rank() < 2 {
            return Err(NumericsError::InvalidArgument(format!(
                "attention mask needs rank >= 2, got {:?}",
                t.shape()
            )));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != f64::NEG_INFINITY) {
            return Err(NumericsError::InvalidArgument(
                "attention mask entries must be 0 or -inf".into(),
            ));
        }
        Ok(Self(t))
    }

    /// Lower-triangular visibility: query `i` sees keys `j <= i`.
    pub fn causal(t: usize) -> Result<Self, NumericsError> {
        if t == 0 {
            return Err(NumericsError::InvalidArgument("causal mask of length 0".into()));
        }
        let mut m = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in i + 1..t {
                m.set(&[i, j], f64::NEG_INFINITY);
            }
        }
        Ok(Self(m))
    }

    /// Hides key columns at or beyond `length` for all `t_q` queries.
    pub fn key_padding(length: usize, t_q: usize, t_k: usize) -> Result<Self, NumericsError> {
        if length == 0 {
            return Err(NumericsError::InvalidArgument("empty sequence in padding mask".into()));
        }
        if length > t_k || t_q == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "sequence length {length} exceeds padded length {t_k}"
            )));
        }
        let mut m = Tensor::zeros(&[t_q, t_k]);
        for i in 0..t_q {
            for j in length..t_k {
                m.set(&[i, j], f64::NEG_INFINITY);
            }
        }
        Ok(Self(m))
    }

    /// One square `t_max × t_max` padding mask per sequence length.
    pub fn padding(lengths: &[usize], t_max: usize) -> Result<Vec<Self>, NumericsError> {
        lengths
            .iter()
            .map(|&len| Self::key_padding(len, t_max, t_max))
            .collect()
    }

    /// Elementwise combination: hidden if hidden in either mask.
    pub fn union(&self, other: &Self) -> Result<Self, NumericsError> {
        Ok(Self(self.0.zip_map(&other.0, |a, b| a + b)?))
    }

    /// Stacks per-sequence masks into one `[B, t_q, t_k]` mask.
    pub fn stack(masks: &[Self]) -> Result<Self, NumericsError> {
        let parts: Vec<Tensor> = masks.iter().map(|m| m.0.clone()).collect();
        Ok(Self(Tensor::stack(&parts)?))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn is_visible(&self, index: &[usize]) -> bool {
        self.0.get(index) == 0.0
    }
}

/// Inverted dropout driven by a seeded generator.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n = g.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(&shape, mask)?);
        g.mul(x, m)
    }
}

/// `softmax(q·kᵀ/√d_k + mask)·v` over the last two axes; leading axes are
/// batch axes shared by `q`, `k` and `v`. Returns `(output, weights)`.
///
/// The mask's shape must equal the score shape or a trailing suffix of it.
pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
    dropout: Option<&mut Dropout>,
) -> Result<(Var, Var), NumericsError> {
    let d_k = *g.shape(q).last().unwrap_or(&0);
    if d_k == 0 {
        return Err(NumericsError::InvalidArgument("attention with d_k = 0".into()));
    }
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    if let Some(m) = mask {
        let mv = g.constant(m.tensor().clone());
        scores = g.add_broadcast(scores, mv)?;
    }
    let weights = g.softmax(scores);
    let attended = match dropout {
        Some(d) => d.apply(g, weights)?,
        None => weights,
    };
    let out = g.matmul(attended, v)?;
    Ok((out, weights))
}

/// Projection matrices of one multi-head attention block.
///
/// Head `h` uses columns `h·d_k .. (h+1)·d_k` of `w_q`, `w_k`, `w_v`;
/// `w_o` maps the concatenated heads back to `d_model`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub n_heads: usize,
}

impl MultiHeadParams {
    pub fn d_k(&self, d_model: usize) -> usize {
        d_model / self.n_heads
    }
}

/// `concat(head_1..head_N)·W_O` with `head_i = attention(x_q·W_Qi, x_kv·W_Ki, x_kv·W_Vi)`.
///
/// Inputs are `[T, d_model]` or `[B, T, d_model]`. The mask is `[Tq, Tk]`
/// (shared) or `[B, Tq, Tk]` (per sequence).
pub fn multi_head_attention(
    g: &mut Graph,
    x_q: Var,
    x_kv: Var,
    p: &MultiHeadParams,
    mask: Option<&AttentionMask>,
    dropout: Option<&mut Dropout>,
) -> Result<Var, NumericsError> {
    let sq = g.shape(x_q).to_vec();
    let skv = g.shape(x_kv).to_vec();
    let unbatched = sq.len() == 2;
    let (b, tq, d) = match sq.as_slice() {
        [t, d] => (1, *t, *d),
        [b, t, d] => (*b, *t, *d),
        _ => return Err(NumericsError::shape("multi_head_attention", &sq, &skv)),
    };
    let tk = skv[skv.len() - 2];
    if skv.len() != sq.len() || skv[skv.len() - 1] != d || (!unbatched && skv[0] != b) {
        return Err(NumericsError::shape("multi_head_attention", &sq, &skv));
    }
    let h = p.n_heads;
    if h == 0 || d % h != 0 {
        return Err(NumericsError::InvalidArgument(format!(
            "d_model {d} not divisible by {h} heads"
        )));
    }
    let dk = d / h;

    let split = |g: &mut Graph, x: Var, w: Var, t: usize| -> Result<Var, NumericsError> {
        let proj = g.matmul(x, w)?;
        let r = g.reshape(proj, &[b, t, h, dk])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let q = split(g, x_q, p.w_q, tq)?;
    let k = split(g, x_kv, p.w_k, tk)?;
    let v = split(g, x_kv, p.w_v, tk)?;

    let expanded;
    let mask = match mask {
        Some(m) if m.tensor().rank() == 3 => {
            let ms = m.tensor().shape();
            if ms != [b, tq, tk] {
                return Err(NumericsError::shape("attention mask", ms, &[b, tq, tk]));
            }
            let per_seq = tq * tk;
            let mut data = Vec::with_capacity(b * h * per_seq);
            for chunk in m.tensor().data().chunks_exact(per_seq) {
                for _ in 0..h {
                    data.extend_from_slice(chunk);
                }
            }
            expanded = AttentionMask(Tensor::new(&[b, h, tq, tk], data)?);
            Some(&expanded)
        }
        other => other,
    };

    let (heads, _) = scaled_dot_product_attention(g, q, k, v, mask, dropout)?;
    let merged = g.permute(heads, &[0, 2, 1, 3])?;
    let out_shape: Vec<usize> = if unbatched { vec![tq, d] } else { vec![b, tq, d] };
    let merged = g.reshape(merged, &out_shape)?;
    g.matmul(merged, p.w_o)
}

/// Sinusoidal position table: `sin(pos/10000^(2i/d))` in column `2i`,
/// `cos` of the same angle in column `2i+1`. For odd `d` the final column
/// holds the cosine of the final pair's angle.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    assert!(t > 0 && d > 0, "sinusoidal_positions({t}, {d})");
    let mut out = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for col in 0..d {
            let pair = col / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair as f64 / d as f64);
            let v = if col % 2 == 1 || col == d - 1 && d % 2 == 1 {
                angle.cos()
            } else {
                angle.sin()
            };
            out.set(&[pos, col], v);
        }
    }
    out
}
