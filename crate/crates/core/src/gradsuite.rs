//! Finite-difference checks of every differentiable graph op and of small
//! whole models, shared by the test suites and the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_attention, scaled_dot_product_attention, AttentionMask, MultiHeadParams};
use crate::corpus::{EOS_ID, PAD_ID, SOS_ID};
use crate::model::{ActConfig, Model, ModelConfig, ModelError, Variant};
use crate::numerics::{grad_check, GradCheckReport, Graph, NumericsError, Tensor, Var, GRAD_CHECK_EPS, LAYER_NORM_EPS};

/// Name and outcome of one check.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).expect("non-empty shape")
}

/// `Σ y ⊙ c` for a fixed pseudo-random `c`, so no gradient is uniform.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = g.constant(random(g.shape(y), &mut rng));
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let mut cases: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 1)
        })),
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 3]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, 2)
        })),
        ("transpose_last2", vec![vec![2, 3, 4]], Box::new(|g, v| {
            let y = g.transpose_last2(v[0])?;
            probe(g, y, 3)
        })),
        ("add_sub_mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            let y = g.mul(a, s)?;
            probe(g, y, 4)
        })),
        ("add_broadcast", vec![vec![2, 3, 4], vec![4]], Box::new(|g, v| {
            let y = g.add_broadcast(v[0], v[1])?;
            probe(g, y, 5)
        })),
        ("affine_scale", vec![vec![5]], Box::new(|g, v| {
            let a = g.affine(v[0], -1.5, 0.25);
            let y = g.scale(a, 3.0);
            let y = g.mul(y, a)?;
            probe(g, y, 6)
        })),
        ("relu", vec![vec![4, 5]], Box::new(|g, v| {
            let y = g.relu(v[0]);
            probe(g, y, 7)
        })),
        ("sigmoid", vec![vec![4, 5]], Box::new(|g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y, 8)
        })),
        ("softmax", vec![vec![3, 6]], Box::new(|g, v| {
            let y = g.softmax(v[0]);
            probe(g, y, 9)
        })),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            probe(g, y, 10)
        })),
        ("reshape_permute", vec![vec![2, 3, 4]], Box::new(|g, v| {
            let r = g.reshape(v[0], &[2, 4, 3])?;
            let y = g.permute(r, &[2, 0, 1])?;
            probe(g, y, 11)
        })),
        ("gather_rows", vec![vec![5, 3]], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[4, 0, 4, 2])?;
            probe(g, y, 12)
        })),
        ("expand_sum_last", vec![vec![3, 2]], Box::new(|g, v| {
            let e = g.expand_last(v[0], 4)?;
            let w = probe(g, e, 13)?;
            let s = g.sum_last(v[0]);
            let s = g.mul(s, s)?;
            let s = g.sum(s);
            g.add(w, s)
        })),
        ("mean", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        })),
        ("cross_entropy_masked", vec![vec![2, 3, 7]], Box::new(|g, v| {
            g.cross_entropy_masked(v[0], &[SOS_ID, 5, PAD_ID, EOS_ID, 6, 4], PAD_ID)
        })),
        ("bce_with_logits", vec![vec![2, 3]], Box::new(|g, v| {
            g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0])
        })),
    ];
    cases.push(("scaled_dot_product_attention", vec![vec![2, 3, 4], vec![2, 5, 4], vec![2, 5, 4]], Box::new(|g, v| {
        let masks = [AttentionMask::key_padding(5, 3, 5)?, AttentionMask::key_padding(3, 3, 5)?];
        let mask = AttentionMask::stack(&masks)?;
        let (y, _) = scaled_dot_product_attention(g, v[0], v[1], v[2], Some(&mask), None)?;
        probe(g, y, 14)
    })));
    cases.push(("multi_head_attention", vec![vec![1, 4, 6], vec![6, 6], vec![6, 6], vec![6, 6], vec![6, 6]], Box::new(|g, v| {
        let p = MultiHeadParams { w_q: v[1], w_k: v[2], w_v: v[3], w_o: v[4], n_heads: 2 };
        let mask = AttentionMask::causal(4)?;
        let y = multi_head_attention(g, v[0], v[0], &p, Some(&mask), None)?;
        probe(g, y, 15)
    })));
    cases
}

/// Checks every op case on seeded random inputs.
pub fn op_suite() -> Result<Vec<SuiteEntry>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    op_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let report = grad_check(|g, v| f(g, v), &inputs, GRAD_CHECK_EPS)?;
            Ok(SuiteEntry { name: name.to_string(), report })
        })
        .collect()
}

/// The tiny whole-model configurations: width 8, vocabulary 11.
pub fn tiny_model_configs() -> Vec<(&'static str, ModelConfig)> {
    let base = |variant, layers| {
        let mut c = ModelConfig::with_width(variant, layers, 8, 2, 11, 6);
        c.dropout = 0.0;
        c.feature_dim = 5;
        c
    };
    let mut act = base(Variant::Universal, 2);
    act.act = Some(ActConfig { epsilon: 0.01, max_steps: 3, ponder_weight: 0.01 });
    vec![
        ("model_vanilla_1_layer", base(Variant::Vanilla, 1)),
        ("model_universal_2_steps", base(Variant::Universal, 2)),
        ("model_universal_act", act),
    ]
}

/// Checks the loss gradient of each tiny model with respect to every
/// parameter on a padded two-video batch.
pub fn model_suite() -> Result<Vec<SuiteEntry>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let features = random(&[2, 3, 5], &mut rng);
    let decoder_input = [SOS_ID, 4, 5, SOS_ID, 6, PAD_ID];
    let targets = [4, 5, EOS_ID, 6, EOS_ID, PAD_ID];
    tiny_model_configs()
        .into_iter()
        .map(|(name, config)| {
            let model = Model::build(config, 21)?;
            let report = model.grad_check(&features, &[3, 2], &decoder_input, &targets, GRAD_CHECK_EPS)?;
            Ok(SuiteEntry { name: name.to_string(), report })
        })
        .collect()
}

/// Ops followed by models.
pub fn full_suite() -> Result<Vec<SuiteEntry>, ModelError> {
    let mut all = op_suite()?;
    all.extend(model_suite()?);
    Ok(all)
}
