use crate::attention::{multi_head_attention, sinusoidal_positions, AttentionMask, Dropout, MultiHeadParams};
use crate::corpus::PAD_ID;
use crate::numerics::{self, GradCheckReport, Graph, NumericsError, Tensor, Var, LAYER_NORM_EPS};

use super::{BoundParams, Model, ModelError, Variant};

/// Encoder output for a padded batch.
pub struct Encoded {
    /// `[B, T, d_model]`
    pub memory: Var,
    pub lengths: Vec<usize>,
    pub act: Option<ActTrace>,
}

/// Per-position bookkeeping of adaptive halting, flattened over `[B, T]`.
pub struct ActTrace {
    pub steps_used: Vec<usize>,
    pub remainders: Vec<f64>,
    /// `steps_used + remainder`
    pub ponder: Vec<f64>,
    /// Weight given to each step's state, `weights[step][position]`.
    pub weights: Vec<Vec<f64>>,
    /// State after each step, `[B, T, d_model]`.
    pub step_states: Vec<Var>,
    /// Mean ponder over non-padding positions (differentiable through the remainders).
    pub ponder_cost: Var,
}

pub struct ForwardOutput {
    /// Cross-entropy plus the weighted ponder cost when halting is enabled.
    pub loss: Var,
    pub cross_entropy: Var,
    /// `[B, T', vocab]`
    pub logits: Var,
    pub ponder_cost: Option<Var>,
}

fn as_batch(features: &Tensor) -> Result<Tensor, ModelError> {
    match features.rank() {
        2 => {
            let mut shape = vec![1];
            shape.extend_from_slice(features.shape());
            Ok(features.reshape(&shape)?)
        }
        3 => Ok(features.clone()),
        _ => Err(ModelError::Config(format!(
            "features must be [T, D] or [B, T, D], got {:?}",
            features.shape()
        ))),
    }
}

fn key_mask(lengths: &[usize], t_q: usize, t_k: usize) -> Result<Option<AttentionMask>, ModelError> {
    if lengths.iter().all(|&l| l == t_k) {
        return Ok(None);
    }
    let masks = lengths
        .iter()
        .map(|&l| AttentionMask::key_padding(l, t_q, t_k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some(AttentionMask::stack(&masks)?))
}

fn drop(g: &mut Graph, x: Var, dropout: Option<&mut Dropout>) -> Result<Var, ModelError> {
    Ok(match dropout {
        Some(d) => d.apply(g, x)?,
        None => x,
    })
}

impl Model {
    fn attention_params(&self, p: &BoundParams, prefix: &str) -> MultiHeadParams {
        MultiHeadParams {
            w_q: p.var(&format!("{prefix}.wq")),
            w_k: p.var(&format!("{prefix}.wk")),
            w_v: p.var(&format!("{prefix}.wv")),
            w_o: p.var(&format!("{prefix}.wo")),
            n_heads: self.config.n_heads,
        }
    }

    fn norm(&self, g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let gain = p.var(&format!("{prefix}.gain"));
        let bias = p.var(&format!("{prefix}.bias"));
        Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }

    fn feed_forward(&self, g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, ModelError> {
        let h = g.matmul(x, p.var(&format!("{prefix}.w1")))?;
        let h = g.add_broadcast(h, p.var(&format!("{prefix}.b1")))?;
        let h = g.relu(h);
        let o = g.matmul(h, p.var(&format!("{prefix}.w2")))?;
        Ok(g.add_broadcast(o, p.var(&format!("{prefix}.b2")))?)
    }

    /// Names of the encoder layer parameter groups: one per layer for the
    /// vanilla variant, a single shared group for the universal variant.
    pub fn encoder_layers(&self) -> Vec<String> {
        self.config.encoder_layer_names()
    }

    pub fn decoder_layers(&self) -> Vec<String> {
        self.config.decoder_layer_names()
    }

    /// Input projection (when widths differ) plus optional position signal.
    /// Accepts `[T, F]` or `[B, T, F]` and returns `[B, T, d_model]`.
    pub fn encoder_input(&self, g: &mut Graph, p: &BoundParams, features: &Tensor) -> Result<Var, ModelError> {
        let features = as_batch(features)?;
        let f = features.shape()[2];
        if f != self.config.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: self.config.feature_dim,
                got: f,
            });
        }
        if !features.all_finite() {
            return Err(ModelError::Config("features contain non-finite values".into()));
        }
        let t = features.shape()[1];
        let mut x = g.constant(features);
        if self.config.uses_input_projection() {
            x = g.matmul(x, p.var("enc.input.w"))?;
            x = g.add_broadcast(x, p.var("enc.input.b"))?;
        }
        if self.config.encoder_positions {
            let pos = g.constant(sinusoidal_positions(t, self.config.d_model));
            x = g.add_broadcast(x, pos)?;
        }
        Ok(x)
    }

    /// Adds row `step` of the `side` ("enc" or "dec") step-embedding table.
    pub fn add_step_embedding(&self, g: &mut Graph, p: &BoundParams, side: &str, step: usize, x: Var) -> Result<Var, ModelError> {
        let row = g.gather_rows(p.var(&format!("{side}.step_embedding")), &[step])?;
        let row = g.reshape(row, &[self.config.d_model])?;
        Ok(g.add_broadcast(x, row)?)
    }

    /// Self-attention and feed-forward sublayers, each with residual and
    /// post-norm.
    pub fn encoder_layer(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        layer: &str,
        x: Var,
        mask: Option<&AttentionMask>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, ModelError> {
        let attn = self.attention_params(p, &format!("{layer}.self_attn"));
        let a = multi_head_attention(g, x, x, &attn, mask, dropout.as_deref_mut())?;
        let a = drop(g, a, dropout.as_deref_mut())?;
        let r = g.add(x, a)?;
        let x = self.norm(g, p, &format!("{layer}.norm1"), r)?;
        let f = self.feed_forward(g, p, &format!("{layer}.ff"), x)?;
        let f = drop(g, f, dropout.as_deref_mut())?;
        let r = g.add(x, f)?;
        self.norm(g, p, &format!("{layer}.norm2"), r)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decoder_layer(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        layer: &str,
        y: Var,
        memory: Var,
        self_mask: &AttentionMask,
        cross_mask: Option<&AttentionMask>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, ModelError> {
        let self_attn = self.attention_params(p, &format!("{layer}.self_attn"));
        let a = multi_head_attention(g, y, y, &self_attn, Some(self_mask), dropout.as_deref_mut())?;
        let a = drop(g, a, dropout.as_deref_mut())?;
        let r = g.add(y, a)?;
        let y = self.norm(g, p, &format!("{layer}.norm1"), r)?;
        let cross = self.attention_params(p, &format!("{layer}.cross_attn"));
        let c = multi_head_attention(g, y, memory, &cross, cross_mask, dropout.as_deref_mut())?;
        let c = drop(g, c, dropout.as_deref_mut())?;
        let r = g.add(y, c)?;
        let y = self.norm(g, p, &format!("{layer}.norm2"), r)?;
        let f = self.feed_forward(g, p, &format!("{layer}.ff"), y)?;
        let f = drop(g, f, dropout.as_deref_mut())?;
        let r = g.add(y, f)?;
        self.norm(g, p, &format!("{layer}.norm3"), r)
    }

    /// Encodes a zero-padded feature batch `[B, T, F]` (or a single `[T, F]`
    /// sequence) whose true lengths are `lengths`.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        features: &Tensor,
        lengths: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Encoded, ModelError> {
        let batch = as_batch(features)?;
        let (b, t) = (batch.shape()[0], batch.shape()[1]);
        if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(ModelError::Config(format!(
                "lengths {lengths:?} do not fit a batch of {b} sequences of {t} rows"
            )));
        }
        let mask = key_mask(lengths, t, t)?;
        let x = self.encoder_input(g, p, &batch)?;
        let x = drop(g, x, dropout.as_deref_mut())?;

        if self.config.act.is_some() {
            return self.act_encode(g, p, x, lengths, mask.as_ref(), dropout);
        }
        let mut h = x;
        match self.config.variant {
            Variant::Vanilla => {
                for layer in self.encoder_layers() {
                    h = self.encoder_layer(g, p, &layer, h, mask.as_ref(), dropout.as_deref_mut())?;
                }
            }
            Variant::Universal => {
                for step in 0..self.config.n_layers {
                    h = self.add_step_embedding(g, p, "enc", step, h)?;
                    h = self.encoder_layer(g, p, "enc.shared", h, mask.as_ref(), dropout.as_deref_mut())?;
                }
            }
        }
        Ok(Encoded {
            memory: h,
            lengths: lengths.to_vec(),
            act: None,
        })
    }

    /// Shared-layer recurrence with per-position adaptive halting.
    ///
    /// At each step a position emits `p = σ(w·h + b)` from its new state. It
    /// halts at the first step where its running sum would exceed
    /// `1 - epsilon`, or at `max_steps`; that step receives the remainder
    /// `1 - Σ earlier p` and every earlier step receives its own `p`. The
    /// output is the weighted sum of step states. Halted positions keep
    /// their last state for the remaining steps so other positions can still
    /// attend to them.
    fn act_encode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        lengths: &[usize],
        mask: Option<&AttentionMask>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Encoded, ModelError> {
        let act = self.config.act.clone().expect("act config");
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let n = b * t;
        let threshold = 1.0 - act.epsilon;

        let mut cumulative = vec![0.0; n];
        let mut halted = vec![false; n];
        let mut steps_used = vec![0usize; n];
        let mut remainders = vec![0.0; n];
        let mut weights = Vec::new();
        let mut step_states = Vec::new();

        let mut cum_var: Option<Var> = None;
        let mut remainder_var: Option<Var> = None;
        let mut weighted: Option<Var> = None;
        let mut h = x;

        for step in 0..act.max_steps {
            if halted.iter().all(|&v| v) {
                break;
            }
            let input = self.add_step_embedding(g, p, "enc", step, h)?;
            let new = self.encoder_layer(g, p, "enc.shared", input, mask, dropout.as_deref_mut())?;
            h = if halted.iter().any(|&v| v) {
                let running: Vec<f64> = halted.iter().map(|&v| if v { 0.0 } else { 1.0 }).collect();
                let r = g.constant(Tensor::new(&[b, t], running)?);
                let r = g.expand_last(r, d)?;
                let delta = g.sub(new, h)?;
                let delta = g.mul(delta, r)?;
                g.add(h, delta)?
            } else {
                new
            };
            step_states.push(h);

            let logit = g.matmul(h, p.var("enc.halt.w"))?;
            let logit = g.add_broadcast(logit, p.var("enc.halt.b"))?;
            let logit = g.reshape(logit, &[b, t])?;
            let prob = g.sigmoid(logit);

            let mut cont = vec![0.0; n];
            let mut stop = vec![0.0; n];
            let last = step + 1 == act.max_steps;
            for i in 0..n {
                if halted[i] {
                    continue;
                }
                steps_used[i] = step + 1;
                let pi = g.value(prob).data()[i];
                if last || cumulative[i] + pi > threshold {
                    stop[i] = 1.0;
                    remainders[i] = 1.0 - cumulative[i];
                    halted[i] = true;
                } else {
                    cont[i] = 1.0;
                    cumulative[i] += pi;
                }
            }
            let cont_v = g.constant(Tensor::new(&[b, t], cont)?);
            let used = g.mul(prob, cont_v)?;
            let mut w = used;
            if stop.iter().any(|&s| s > 0.0) {
                let stop_v = g.constant(Tensor::new(&[b, t], stop)?);
                let rem = match cum_var {
                    Some(c) => {
                        let left = g.affine(c, -1.0, 1.0);
                        g.mul(left, stop_v)?
                    }
                    None => stop_v,
                };
                w = g.add(w, rem)?;
                remainder_var = Some(match remainder_var {
                    Some(r) => g.add(r, rem)?,
                    None => rem,
                });
            }
            cum_var = Some(match cum_var {
                Some(c) => g.add(c, used)?,
                None => used,
            });
            weights.push(g.value(w).data().to_vec());
            let wx = g.expand_last(w, d)?;
            let contrib = g.mul(wx, h)?;
            weighted = Some(match weighted {
                Some(acc) => g.add(acc, contrib)?,
                None => contrib,
            });
        }

        let ponder: Vec<f64> = steps_used.iter().zip(&remainders).map(|(&s, &r)| s as f64 + r).collect();
        let mut valid = vec![0.0; n];
        for (bi, &len) in lengths.iter().enumerate() {
            for ti in 0..len {
                valid[bi * t + ti] = 1.0;
            }
        }
        let count: f64 = valid.iter().sum();
        let steps_const = g.constant(Tensor::new(&[b, t], steps_used.iter().map(|&s| s as f64).collect())?);
        let remainder_var = remainder_var.expect("every position halts by max_steps");
        let per_position = g.add(steps_const, remainder_var)?;
        let valid_v = g.constant(Tensor::new(&[b, t], valid)?);
        let masked = g.mul(per_position, valid_v)?;
        let total = g.sum(masked);
        let ponder_cost = g.scale(total, 1.0 / count);

        Ok(Encoded {
            memory: weighted.expect("at least one step"),
            lengths: lengths.to_vec(),
            act: Some(ActTrace {
                steps_used,
                remainders,
                ponder,
                weights,
                step_states,
                ponder_cost,
            }),
        })
    }

    /// Teacher-forced decoder pass. `tokens` holds `batch` rows of equal
    /// length, flattened; returns logits `[B, T', vocab]`.
    pub fn decode_forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        tokens: &[usize],
        batch: usize,
        encoded: &Encoded,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var, ModelError> {
        let v = self.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&id| id >= v) {
            return Err(ModelError::Vocabulary { id, size: v });
        }
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(ModelError::Config(format!(
                "{} tokens do not split into {batch} rows",
                tokens.len()
            )));
        }
        let len = tokens.len() / batch;
        let d = self.config.d_model;
        let mem_shape = g.shape(encoded.memory).to_vec();
        if mem_shape[0] != batch {
            return Err(ModelError::Config(format!(
                "memory batch {} does not match token batch {batch}",
                mem_shape[0]
            )));
        }
        let t_enc = mem_shape[1];

        let emb = g.gather_rows(p.var("dec.token_embedding"), tokens)?;
        let emb = g.reshape(emb, &[batch, len, d])?;
        let pos = g.constant(sinusoidal_positions(len, d));
        let y = g.add_broadcast(emb, pos)?;
        let mut y = drop(g, y, dropout.as_deref_mut())?;

        let causal = AttentionMask::causal(len)?;
        let cross = key_mask(&encoded.lengths, len, t_enc)?;
        match self.config.variant {
            Variant::Vanilla => {
                for layer in self.decoder_layers() {
                    y = self.decoder_layer(g, p, &layer, y, encoded.memory, &causal, cross.as_ref(), dropout.as_deref_mut())?;
                }
            }
            Variant::Universal => {
                for step in 0..self.config.n_layers {
                    y = self.add_step_embedding(g, p, "dec", step, y)?;
                    y = self.decoder_layer(g, p, "dec.shared", y, encoded.memory, &causal, cross.as_ref(), dropout.as_deref_mut())?;
                }
            }
        }
        let logits = g.matmul(y, p.var("dec.output.w"))?;
        Ok(g.add_broadcast(logits, p.var("dec.output.b"))?)
    }

    /// Encoder, teacher-forced decoder and masked cross-entropy (plus the
    /// ponder penalty when halting is enabled).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_loss(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        features: &Tensor,
        lengths: &[usize],
        decoder_input: &[usize],
        targets: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<ForwardOutput, ModelError> {
        let encoded = self.encode(g, p, features, lengths, dropout.as_deref_mut())?;
        let logits = self.decode_forward(g, p, decoder_input, lengths.len(), &encoded, dropout)?;
        let ce = g.cross_entropy_masked(logits, targets, PAD_ID)?;
        let (loss, ponder_cost) = match (&encoded.act, &self.config.act) {
            (Some(trace), Some(act)) if act.ponder_weight > 0.0 => {
                let pen = g.scale(trace.ponder_cost, act.ponder_weight);
                (g.add(ce, pen)?, Some(trace.ponder_cost))
            }
            (Some(trace), _) => (ce, Some(trace.ponder_cost)),
            _ => (ce, None),
        };
        Ok(ForwardOutput {
            loss,
            cross_entropy: ce,
            logits,
            ponder_cost,
        })
    }

    /// Memory for one `[T, F]` sequence, outside any caller graph.
    pub fn encode_features(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let t = features.shape()[0];
        let enc = self.encode(&mut g, &p, features, &[t], None)?;
        let out = g.value(enc.memory);
        Ok(out.reshape(&out.shape()[1..])?)
    }

    /// Logits `[T', vocab]` for a token prefix given one `[T, F]` sequence.
    pub fn logits(&self, features: &Tensor, tokens: &[usize]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let t = features.shape()[0];
        let enc = self.encode(&mut g, &p, features, &[t], None)?;
        let logits = self.decode_forward(&mut g, &p, tokens, 1, &enc, None)?;
        let out = g.value(logits);
        Ok(out.reshape(&out.shape()[1..])?)
    }

    /// Binds parameters as constants, for inference-only graphs.
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.to_string(), g.constant(t.clone())))
                .collect(),
        }
    }

    /// Central-difference check of the loss gradient with respect to every
    /// parameter on one teacher-forced batch, dropout off.
    pub fn grad_check(
        &self,
        features: &Tensor,
        lengths: &[usize],
        decoder_input: &[usize],
        targets: &[usize],
        eps: f64,
    ) -> Result<GradCheckReport, ModelError> {
        let names: Vec<String> = self.params.iter().map(|(k, _)| k.to_string()).collect();
        let inputs: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        let loss = |g: &mut Graph, vars: &[Var]| -> Result<Var, NumericsError> {
            let p = BoundParams {
                vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
            };
            match self.forward_loss(g, &p, features, lengths, decoder_input, targets, None) {
                Ok(out) => Ok(out.loss),
                Err(ModelError::Numerics(e)) => Err(e),
                Err(e) => Err(NumericsError::InvalidArgument(e.to_string())),
            }
        };
        Ok(numerics::grad_check(loss, &inputs, eps)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EOS_ID, SOS_ID};
    use crate::model::{ActConfig, ModelConfig};
    use crate::numerics::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: Variant, layers: usize) -> ModelConfig {
        let mut c = ModelConfig::with_width(variant, layers, 8, 2, 11, 6);
        c.dropout = 0.0;
        c.feature_dim = 5;
        c
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn with_act(epsilon: f64, max_steps: usize) -> ModelConfig {
        let mut c = tiny(Variant::Universal, 2);
        c.act = Some(ActConfig { epsilon, max_steps, ponder_weight: 0.01 });
        c
    }

    #[test]
    fn single_row_and_zero_input() {
        let m = Model::build(tiny(Variant::Vanilla, 2), 0).unwrap();
        let mem = m.encode_features(&random(&[1, 5], 1)).unwrap();
        assert_eq!(mem.shape(), &[1, 8]);
        assert!(mem.all_finite());
        let zero = m.encode_features(&Tensor::zeros(&[4, 5])).unwrap();
        assert!(zero.all_finite());
        // post-norm rows have unit variance, so each row norm is about sqrt(d)
        for row in zero.rows() {
            assert!(row.iter().map(|v| v * v).sum::<f64>().sqrt() <= 8.0 * 1.01);
        }
    }

    #[test]
    fn feature_and_token_contracts() {
        let m = Model::build(tiny(Variant::Vanilla, 1), 0).unwrap();
        assert!(matches!(
            m.encode_features(&Tensor::zeros(&[3, 4])),
            Err(ModelError::FeatureDim { expected: 5, got: 4 })
        ));
        let f = random(&[3, 5], 2);
        assert_eq!(m.logits(&f, &[SOS_ID]).unwrap().shape(), &[1, 11]);
        assert!(matches!(m.logits(&f, &[SOS_ID, 11]), Err(ModelError::Vocabulary { id: 11, size: 11 })));
    }

    #[test]
    fn universal_matches_manual_unrolling() {
        let m = Model::build(tiny(Variant::Universal, 2), 4).unwrap();
        let f = random(&[4, 5], 3);
        let via_encode = m.encode_features(&f).unwrap();

        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let mut h = m.encoder_input(&mut g, &p, &f).unwrap();
        for step in 0..2 {
            h = m.add_step_embedding(&mut g, &p, "enc", step, h).unwrap();
            h = m.encoder_layer(&mut g, &p, "enc.shared", h, None, None).unwrap();
        }
        let manual = g.value(h).reshape(&[4, 8]).unwrap();
        assert!(via_encode.max_abs_diff(&manual) <= 1e-12);

        let mut three = m.config().clone();
        three.n_layers = 3;
        let m3 = Model::from_parts(three, m.params().clone()).unwrap();
        assert!(m3.encode_features(&f).unwrap().max_abs_diff(&via_encode) > 1e-6);
    }

    #[test]
    fn decoder_is_causal() {
        let m = Model::build(tiny(Variant::Vanilla, 2), 5).unwrap();
        let f = random(&[3, 5], 6);
        let base = vec![SOS_ID, 4, 5, 6, 7];
        let before = m.logits(&f, &base).unwrap();
        for j in 1..base.len() {
            let mut changed = base.clone();
            changed[j] = 9;
            let after = m.logits(&f, &changed).unwrap();
            for pos in 0..base.len() {
                let diff = before.row(pos).iter().zip(after.row(pos)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if pos < j {
                    assert!(diff <= 1e-12, "position {pos} moved after editing {j}");
                } else if pos == j {
                    assert!(diff > 1e-9);
                }
            }
        }
    }

    #[test]
    fn cross_attention_reads_memory() {
        let m = Model::build(tiny(Variant::Vanilla, 1), 7).unwrap();
        let run = |fill: f64| {
            let mut g = Graph::new();
            let p = m.bind_frozen(&mut g);
            let memory = g.constant(Tensor::new(&[1, 3, 8], (0..24).map(|i| fill * (i % 5) as f64).collect()).unwrap());
            let enc = Encoded { memory, lengths: vec![3], act: None };
            let out = m.decode_forward(&mut g, &p, &[SOS_ID, 4], 1, &enc, None).unwrap();
            g.value(out).clone()
        };
        assert!(run(0.0).max_abs_diff(&run(1.0)) > 1e-6);
    }

    #[test]
    fn padded_rows_do_not_leak() {
        let m = Model::build(tiny(Variant::Vanilla, 2), 8).unwrap();
        let short = random(&[2, 5], 9);
        let mut padded = short.data().to_vec();
        padded.extend(random(&[2, 5], 10).data());
        let batch = Tensor::new(&[1, 4, 5], padded).unwrap();
        let logits = |features: &Tensor, lengths: &[usize]| {
            let mut g = Graph::new();
            let p = m.bind_frozen(&mut g);
            let enc = m.encode(&mut g, &p, features, lengths, None).unwrap();
            let out = m.decode_forward(&mut g, &p, &[SOS_ID, 4, 5], 1, &enc, None).unwrap();
            g.value(out).clone()
        };
        let a = logits(&short, &[2]);
        let b = logits(&batch, &[2]);
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    fn act_trace(m: &Model, f: &Tensor, lengths: &[usize]) -> (Tensor, Vec<Tensor>, ActTrace) {
        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let enc = m.encode(&mut g, &p, f, lengths, None).unwrap();
        let trace = enc.act.unwrap();
        let states = trace.step_states.iter().map(|&s| g.value(s).clone()).collect();
        (g.value(enc.memory).clone(), states, trace)
    }

    #[test]
    fn act_saturated_high_bias_halts_at_first_step() {
        let mut m = Model::build(with_act(0.01, 8), 11).unwrap();
        m.params_mut().get_mut("enc.halt.b").unwrap().data_mut()[0] = 20.0;
        let (memory, states, trace) = act_trace(&m, &random(&[2, 6, 5], 12), &[6, 6]);
        assert!(trace.steps_used.iter().all(|&s| s == 1));
        assert_eq!(trace.weights.len(), 1);
        assert!(trace.weights[0].iter().all(|&w| w == 1.0));
        assert!(memory.max_abs_diff(&states[0]) <= 1e-12);
    }

    #[test]
    fn act_saturated_low_bias_runs_to_max_steps() {
        let mut m = Model::build(with_act(0.01, 4), 13).unwrap();
        m.params_mut().get_mut("enc.halt.b").unwrap().data_mut()[0] = -20.0;
        let (_, _, trace) = act_trace(&m, &random(&[1, 5, 5], 14), &[5]);
        assert!(trace.steps_used.iter().all(|&s| s == 4));
        for (&r, &pond) in trace.remainders.iter().zip(&trace.ponder) {
            assert!((r - 1.0).abs() < 1e-6, "{r}");
            assert!((pond - 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn act_output_is_weighted_sum_of_states() {
        let m = Model::build(with_act(0.01, 8), 15).unwrap();
        let (memory, states, trace) = act_trace(&m, &random(&[2, 5, 5], 16), &[5, 3]);
        let n = 10;
        for i in 0..n {
            let total: f64 = trace.weights.iter().map(|w| w[i]).sum();
            assert!((total - 1.0).abs() <= 1e-9);
            assert!(trace.steps_used[i] <= 8);
            for k in 0..8 {
                let expected: f64 = trace.weights.iter().zip(&states).map(|(w, s)| w[i] * s.data()[i * 8 + k]).sum();
                assert!((memory.data()[i * 8 + k] - expected).abs() <= 1e-12);
            }
        }
    }

    fn grad_batch() -> (Tensor, Vec<usize>, Vec<usize>, Vec<usize>) {
        let features = random(&[2, 3, 5], 20);
        let dec_in = vec![SOS_ID, 4, 5, SOS_ID, 6, 0];
        let targets = vec![4, 5, EOS_ID, 6, EOS_ID, 0];
        (features, vec![3, 2], dec_in, targets)
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let (f, lengths, dec_in, targets) = grad_batch();
        for config in [tiny(Variant::Vanilla, 1), tiny(Variant::Universal, 2), with_act(0.01, 3)] {
            let m = Model::build(config, 21).unwrap();
            let report = m.grad_check(&f, &lengths, &dec_in, &targets, numerics::GRAD_CHECK_EPS).unwrap();
            assert!(report.max_relative_error < 1e-5, "{:?}: {report:?}", m.config().variant);
        }
    }

    #[test]
    fn act_halting_parameters_receive_gradient() {
        let (f, lengths, dec_in, targets) = grad_batch();
        let m = Model::build(with_act(0.01, 3), 22).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let out = m.forward_loss(&mut g, &p, &f, &lengths, &dec_in, &targets, None).unwrap();
        let grads = g.backward(out.loss).unwrap();
        let gw = grads.get(p.var("enc.halt.w")).unwrap();
        assert!(gw.norm() > 0.0);
    }
}
