#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlm_core::decoder::{decoder_forward, DecoderConfig, MixedSequence, Modality, ModalityMask};
use vlm_core::params::{Graph, ParamStore};
use vlm_core::tape::Tape;
use vlm_core::tensor::{Scalar, Tensor};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn small_decoder(visual_expert: bool) -> DecoderConfig {
    DecoderConfig {
        visual_expert,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        vocab_size: 16,
        ffn_hidden: 12,
        vision_bidirectional: false,
    }
}

/// Initialized parameters with the `.vis` copies perturbed, so that routing
/// actually changes the output.
pub fn decoder_params(cfg: &DecoderConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    cfg.init(&mut rng, &mut store);
    let vis: Vec<String> = store.names().filter(|n| n.ends_with(".vis")).map(String::from).collect();
    for n in vis {
        let t = store.get_mut(&n).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    store
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub emb: Vec<Vec<Scalar>>,
    pub mask: Vec<Modality>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Instance {
    Instance {
        emb: (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        mask: (0..n)
            .map(|_| if rng.gen_bool(0.5) { Modality::Vision } else { Modality::Text })
            .collect(),
    }
}

/// Logits from the library's batched forward pass.
pub fn tape_logits(store: &ParamStore, cfg: &DecoderConfig, inst: &Instance) -> Vec<Vec<Scalar>> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store);
    let emb = g.constant(Tensor::from_rows(&inst.emb).unwrap());
    let n = inst.mask.len();
    let seq = MixedSequence {
        embeddings: emb,
        mask: ModalityMask(inst.mask.clone()),
        positions: (0..n).collect(),
        tokens: vec![None; n],
    };
    let logits = decoder_forward(&mut g, &seq, cfg).unwrap();
    let v = g.value(logits);
    (0..n).map(|i| v.row(i).to_vec()).collect()
}

// ---- brute-force oracle: one token at a time with a key/value cache ----

struct Mat<'a> {
    data: &'a [Scalar],
    cols: usize,
}

fn mat<'a>(store: &'a ParamStore, name: &str) -> Mat<'a> {
    let t = store.get(name).unwrap();
    Mat {
        data: t.data(),
        cols: *t.shape().last().unwrap(),
    }
}

fn vecmat(x: &[Scalar], m: &Mat) -> Vec<Scalar> {
    let mut out = vec![0.0; m.cols];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..m.cols {
            out[j] += xi * m.data[i * m.cols + j];
        }
    }
    out
}

fn rms(x: &[Scalar], scale: &[Scalar]) -> Vec<Scalar> {
    let ms = x.iter().map(|v| v * v).sum::<Scalar>() / x.len() as Scalar;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(scale).map(|(v, s)| v * inv * s).collect()
}

fn rotate(x: &mut [Scalar], heads: usize, pos: usize) {
    let hd = x.len() / heads;
    for h in 0..heads {
        for k in 0..hd / 2 {
            let angle = pos as Scalar / (10000.0 as Scalar).powf(2.0 * k as Scalar / hd as Scalar);
            let (a, b) = (x[h * hd + 2 * k], x[h * hd + 2 * k + 1]);
            x[h * hd + 2 * k] = a * angle.cos() - b * angle.sin();
            x[h * hd + 2 * k + 1] = a * angle.sin() + b * angle.cos();
        }
    }
}

fn swish(v: Scalar) -> Scalar {
    v / (1.0 + (-v).exp())
}

/// Logits computed token by token, each token using the weights of its own
/// modality and attending to cached keys/values of earlier tokens.
pub fn oracle_logits(store: &ParamStore, cfg: &DecoderConfig, inst: &Instance) -> Vec<Vec<Scalar>> {
    let d = cfg.embed_dim;
    let hd = d / cfg.heads;
    let mut cache: Vec<Vec<(Vec<Scalar>, Vec<Scalar>)>> = vec![Vec::new(); cfg.depth];
    let mut out = Vec::new();
    for (t, (e, m)) in inst.emb.iter().zip(&inst.mask).enumerate() {
        let set = if cfg.visual_expert && *m == Modality::Vision { "vis" } else { "lang" };
        let mut x = e.clone();
        for l in 0..cfg.depth {
            let w = |p: &str| mat(store, &format!("dec.{l}.{p}.{set}"));
            let h = rms(&x, store.get(&format!("dec.norm.{l}.attn")).unwrap().data());
            let mut q = vecmat(&h, &w("attn.q"));
            let mut k = vecmat(&h, &w("attn.k"));
            let v = vecmat(&h, &w("attn.v"));
            rotate(&mut q, cfg.heads, t);
            rotate(&mut k, cfg.heads, t);
            cache[l].push((k, v));
            let mut att = vec![0.0; d];
            for head in 0..cfg.heads {
                let r = head * hd..(head + 1) * hd;
                let scores: Vec<Scalar> = cache[l]
                    .iter()
                    .map(|(k, _)| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<Scalar>() / (hd as Scalar).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
                let exps: Vec<Scalar> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: Scalar = exps.iter().sum();
                for (p, (_, v)) in exps.iter().zip(&cache[l]) {
                    for c in r.clone() {
                        att[c] += p / z * v[c];
                    }
                }
            }
            let o = vecmat(&att, &w("attn.o"));
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = rms(&x, store.get(&format!("dec.norm.{l}.ffn")).unwrap().data());
            let gate = vecmat(&h, &w("ffn.W"));
            let up = vecmat(&h, &w("ffn.V"));
            let hidden: Vec<Scalar> = gate.iter().zip(&up).map(|(a, b)| swish(*a) * b).collect();
            let f = vecmat(&hidden, &w("ffn.W2"));
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let h = rms(&x, store.get("dec.norm.final").unwrap().data());
        out.push(vecmat(&h, &mat(store, "dec.head")));
    }
    out
}

pub fn max_diff(a: &[Vec<Scalar>], b: &[Vec<Scalar>]) -> Scalar {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Scalar::max)
}

/// Shared-mode parameters equal to `store`'s language weights.
pub fn drop_vis(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    let vis: Vec<String> = s.names().filter(|n| n.ends_with(".vis")).map(String::from).collect();
    for n in vis {
        s.remove(&n);
    }
    s
}

/// Expert-mode parameters whose `.vis` weights equal the `.lang` ones.
pub fn tie_vis(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    let lang: Vec<String> = s.names().filter(|n| n.ends_with(".lang")).map(String::from).collect();
    for n in lang {
        let t = s.get(&n).unwrap().clone();
        s.insert(n.replace(".lang", ".vis"), t);
    }
    s
}

// ---- synthetic image-caption data ----

/// 16×16 RGB images encoding five bits: which quadrants are lit (4 bits)
/// and whether the lit colour is red or blue. Captions spell the bits out.
pub fn synthetic_caption(code: u8) -> (vlm_core::vision::ImageGrid, String) {
    let red = code & 16 != 0;
    let mut data = vec![0.1; 3 * 16 * 16];
    for y in 0..16 {
        for x in 0..16 {
            let quadrant = (y / 8) * 2 + x / 8;
            if code & (1 << quadrant) != 0 {
                let c = if red { 0 } else { 2 };
                data[c * 256 + y * 16 + x] = 0.9;
            }
        }
    }
    let names = ["nw", "ne", "sw", "se"];
    let lit: Vec<&str> = (0..4).filter(|q| code & (1 << q) != 0).map(|q| names[q]).collect();
    let caption = if lit.is_empty() {
        "dark".to_string()
    } else {
        format!("{} {}", if red { "red" } else { "blue" }, lit.join(" "))
    };
    (vlm_core::vision::ImageGrid::new(3, 16, 16, data).unwrap(), caption)
}
