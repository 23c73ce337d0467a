//! Finite-difference checks of every differentiable primitive and of the
//! composed forward passes, at toy sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{adapt, AdapterConfig};
use crate::decoder::{
    decoder_forward, expert_attention, expert_ffn, DecoderConfig, MixedSequence, Modality, ModalityMask,
};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, DEFAULT_EPS};
use crate::params::{bind_names, Graph, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor, CHECK_MODE};
use crate::vision::{vit_forward, VitConfig};

pub const TOLERANCE: Scalar = 1e-4;

pub const MODULES: [&str; 9] = [
    "matmul",
    "conv2x2_s2",
    "swiglu",
    "softmax",
    "vit_forward",
    "adapt",
    "expert_attention",
    "expert_ffn",
    "decoder_forward",
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// `sum(x ⊙ weights)`: a scalar readout whose gradient is `weights`, so no
/// coordinate's gradient vanishes by symmetry.
fn readout(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.shape(x))?);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

/// Gradient-checks a model-level function whose parameters live in `store`:
/// every parameter and the extra `inputs` are perturbed.
fn check_with_params<F>(store: &ParamStore, inputs: Vec<Tensor>, f: F) -> Result<Scalar>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut all: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let k = all.len();
    all.extend(inputs);
    grad_check(
        |tape, vars| {
            let mut g = Graph::from_bound(tape, bind_names(&names, &vars[..k]));
            f(&mut g, &vars[k..])
        },
        &all,
        DEFAULT_EPS,
    )
}

pub fn toy_vit() -> VitConfig {
    VitConfig {
        channels: 1,
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_hidden: 8,
        grid_h: 2,
        grid_w: 2,
    }
}

pub fn toy_decoder(visual_expert: bool) -> DecoderConfig {
    DecoderConfig {
        visual_expert,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        vocab_size: 11,
        ffn_hidden: 12,
        vision_bidirectional: false,
    }
}

/// Replaces every parameter with a fresh random value so that no weight sits
/// at a special point (unit norms, zero biases). Norm scales stay near one:
/// small or sign-flipped scales shrink gradients into finite-difference noise.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n).expect("present").shape().to_vec();
        let mut t = rand_tensor(rng, &shape);
        if n.contains("norm") {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.5 * *v);
        } else {
            t.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        }
        store.insert(n, t);
    }
}

fn toy_sequence(x: Var) -> MixedSequence {
    use Modality::{Text as T, Vision as V};
    let mask = vec![T, V, V, T, T];
    let n = mask.len();
    MixedSequence {
        embeddings: x,
        mask: ModalityMask(mask.clone()),
        positions: (0..n).collect(),
        tokens: mask
            .iter()
            .enumerate()
            .map(|(i, m)| (*m == T).then_some(i as u32 % 11))
            .collect(),
    }
}

/// Maximum relative gradient error of one named check.
pub fn check_module(name: &str, seed: u64) -> Result<Scalar> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "matmul" => {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let w = rand_tensor(&mut rng, &[3, 2]);
            grad_check(
                |t, v| {
                    let c = t.matmul(v[0], v[1])?;
                    readout(t, c, &w)
                },
                &[a, b],
                DEFAULT_EPS,
            )
        }
        "conv2x2_s2" => {
            let x = rand_tensor(&mut rng, &[2, 4, 6]);
            let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
            let b = rand_tensor(&mut rng, &[3]);
            let r = rand_tensor(&mut rng, &[3, 2, 3]);
            grad_check(
                |t, v| {
                    let y = t.conv2x2_s2(v[0], v[1], v[2])?;
                    readout(t, y, &r)
                },
                &[x, w, b],
                DEFAULT_EPS,
            )
        }
        "swiglu" => {
            let inputs = [
                rand_tensor(&mut rng, &[3, 4]),
                rand_tensor(&mut rng, &[4, 5]),
                rand_tensor(&mut rng, &[4, 5]),
                rand_tensor(&mut rng, &[5, 2]),
            ];
            let r = rand_tensor(&mut rng, &[3, 2]);
            grad_check(
                |t, v| {
                    let y = t.swiglu(v[0], v[1], v[2], v[3])?;
                    readout(t, y, &r)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }
        "softmax" => {
            let x = rand_tensor(&mut rng, &[2, 3, 4]);
            let r = rand_tensor(&mut rng, &[2, 3, 4]);
            let mut worst: Scalar = 0.0;
            for axis in 0..3 {
                worst = worst.max(grad_check(
                    |t, v| {
                        let y = t.softmax(v[0], axis)?;
                        readout(t, y, &r)
                    },
                    &[x.clone()],
                    DEFAULT_EPS,
                )?);
            }
            Ok(worst)
        }
        "vit_forward" => {
            let cfg = toy_vit();
            let mut store = ParamStore::new();
            cfg.init(&mut rng, &mut store);
            randomize(&mut store, &mut rng);
            let patches = rand_tensor(&mut rng, &[4, cfg.patch_dim()]);
            let r = rand_tensor(&mut rng, &[4, cfg.embed_dim]);
            check_with_params(&store, vec![patches], |g, v| {
                let y = vit_forward(g, v[0], &cfg, (2, 2))?;
                readout(g, y, &r)
            })
        }
        "adapt" => {
            let cfg = AdapterConfig {
                in_dim: 3,
                hidden_dim: 5,
                out_dim: 4,
                grid_h: 2,
                grid_w: 4,
            };
            let mut store = ParamStore::new();
            cfg.init(&mut rng, &mut store);
            randomize(&mut store, &mut rng);
            let x = rand_tensor(&mut rng, &[8, 3]);
            let r = rand_tensor(&mut rng, &[2, 4]);
            check_with_params(&store, vec![x], |g, v| {
                let y = adapt(g, v[0], &cfg, (2, 4))?;
                readout(g, y, &r)
            })
        }
        "expert_attention" | "expert_ffn" => {
            let mut cfg = toy_decoder(true);
            cfg.depth = 1;
            let mut store = ParamStore::new();
            cfg.init(&mut rng, &mut store);
            randomize(&mut store, &mut rng);
            let x = rand_tensor(&mut rng, &[5, cfg.embed_dim]);
            let r = rand_tensor(&mut rng, &[5, cfg.embed_dim]);
            let attention = name == "expert_attention";
            check_with_params(&store, vec![x], |g, v| {
                let seq = toy_sequence(v[0]);
                let y = if attention {
                    expert_attention(g, v[0], &seq, &cfg, 0, None)?
                } else {
                    expert_ffn(g, v[0], &seq, &cfg, 0)?
                };
                readout(g, y, &r)
            })
        }
        "decoder_forward" => {
            let cfg = toy_decoder(true);
            let mut store = ParamStore::new();
            cfg.init(&mut rng, &mut store);
            randomize(&mut store, &mut rng);
            let x = rand_tensor(&mut rng, &[5, cfg.embed_dim]);
            check_with_params(&store, vec![x], |g, v| {
                let seq = toy_sequence(v[0]);
                let logits = decoder_forward(g, &seq, &cfg)?;
                let targets: Vec<Option<usize>> = (0..5).map(|i| Some((3 * i + 1) % 11)).collect();
                g.cross_entropy(logits, &targets)
            })
        }
        other => Err(Error::InvalidConfig(format!("no gradient check named {other:?}"))),
    }
}

/// Runs the named checks (all of them for `None`).
pub fn run_suite(only: Option<&str>) -> Result<Vec<(&'static str, Scalar)>> {
    if !CHECK_MODE {
        return Err(Error::InvalidConfig("gradient checks need the 64-bit build".into()));
    }
    let selected: Vec<&'static str> = match only {
        None => MODULES.to_vec(),
        Some(name) => vec![*MODULES
            .iter()
            .find(|m| **m == name)
            .ok_or_else(|| Error::InvalidConfig(format!("no gradient check named {name:?}")))?],
    };
    selected
        .into_iter()
        .enumerate()
        .map(|(i, m)| Ok((m, check_module(m, 17 + i as u64)?)))
        .collect()
}
