//! Causal decoder over mixed text/vision sequences.
//!
//! In visual-expert mode every attention projection and FFN has a second
//! weight set (`*.vis`) that is used for vision-tagged positions only; text
//! positions always go through the language weights (`*.lang`). In
//! shared-weight mode the `*.vis` tensors do not exist and every position uses
//! the language weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attend, causal_mask, NORM_EPS};
use crate::params::{normal_tensor, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Vision,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModalityMask(pub Vec<Modality>);

impl ModalityMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn vision_rows(&self) -> Vec<bool> {
        self.0.iter().map(|m| *m == Modality::Vision).collect()
    }

    pub fn vision_count(&self) -> usize {
        self.0.iter().filter(|m| **m == Modality::Vision).count()
    }

    /// Run-length view: `(modality, run length)` for each contiguous block.
    pub fn runs(&self) -> Vec<(Modality, usize)> {
        let mut out: Vec<(Modality, usize)> = Vec::new();
        for &m in &self.0 {
            match out.last_mut() {
                Some((last, n)) if *last == m => *n += 1,
                _ => out.push((m, 1)),
            }
        }
        out
    }
}

/// Decoder input: one embedding row per position with its modality tag.
#[derive(Debug, Clone)]
pub struct MixedSequence {
    pub embeddings: Var,
    pub mask: ModalityMask,
    pub positions: Vec<usize>,
    /// Token id at text positions, `None` at vision positions.
    pub tokens: Vec<Option<u32>>,
}

impl MixedSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Separate vision weights in attention and FFN; off means one shared
    /// weight set for every position.
    pub visual_expert: bool,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub ffn_hidden: usize,
    /// Let positions inside one contiguous vision block attend to each other
    /// in both directions. Off by default.
    #[serde(default)]
    pub vision_bidirectional: bool,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.heads >= 1
            && self.embed_dim % self.heads == 0
            && (self.embed_dim / self.heads) % 2 == 0
            && self.vocab_size >= 1
            && self.ffn_hidden >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("decoder config {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let d = self.embed_dim;
        let f = self.ffn_hidden;
        let resid = (2.0 * self.depth.max(1) as Scalar).sqrt();
        store.insert("dec.embed", normal_tensor(rng, &[self.vocab_size, d], 1.0));
        store.insert("dec.head", normal_tensor(rng, &[d, self.vocab_size], (1.0 / d as Scalar).sqrt()));
        store.insert("dec.norm.final", Tensor::ones(&[d]));
        for l in 0..self.depth {
            store.insert(format!("dec.norm.{l}.attn"), Tensor::ones(&[d]));
            store.insert(format!("dec.norm.{l}.ffn"), Tensor::ones(&[d]));
            let mut lang = Vec::new();
            for p in ["q", "k", "v", "o"] {
                let std = if p == "o" { 1.0 / resid } else { 1.0 } / (d as Scalar).sqrt();
                lang.push((format!("dec.{l}.attn.{p}"), normal_tensor(rng, &[d, d], std)));
            }
            lang.push((format!("dec.{l}.ffn.W"), normal_tensor(rng, &[d, f], (1.0 / d as Scalar).sqrt())));
            lang.push((format!("dec.{l}.ffn.V"), normal_tensor(rng, &[d, f], (1.0 / d as Scalar).sqrt())));
            lang.push((
                format!("dec.{l}.ffn.W2"),
                normal_tensor(rng, &[f, d], 1.0 / (resid * (f as Scalar).sqrt())),
            ));
            for (name, t) in lang {
                // the visual expert starts as a copy of the language weights
                if self.visual_expert {
                    store.insert(format!("{name}.vis"), t.clone());
                }
                store.insert(format!("{name}.lang"), t);
            }
        }
    }
}

/// Embeds token ids with `dec.embed`.
pub fn embed_tokens(g: &mut Graph, ids: &[u32]) -> Result<Var> {
    let table = g.p("dec.embed")?;
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    g.gather_rows(table, &ids)
}

/// Incrementally concatenates text and vision segments into a
/// [`MixedSequence`].
#[derive(Debug, Default)]
pub struct SequenceBuilder {
    parts: Vec<Var>,
    mask: Vec<Modality>,
    tokens: Vec<Option<u32>>,
}

impl SequenceBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn push_text(&mut self, g: &mut Graph, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        self.parts.push(embed_tokens(g, ids)?);
        self.mask.extend(std::iter::repeat(Modality::Text).take(ids.len()));
        self.tokens.extend(ids.iter().map(|&i| Some(i)));
        Ok(())
    }

    /// Appends vision embeddings, which must already have the decoder width.
    pub fn push_vision(&mut self, g: &mut Graph, features: Var, embed_dim: usize) -> Result<()> {
        let (n, d) = g.value(features).dims2()?;
        if d != embed_dim {
            return Err(Error::DimMismatch {
                expected: embed_dim,
                got: d,
            });
        }
        self.parts.push(features);
        self.mask.extend(std::iter::repeat(Modality::Vision).take(n));
        self.tokens.extend(std::iter::repeat(None).take(n));
        Ok(())
    }

    /// Appends another builder's segments.
    pub fn extend(&mut self, other: SequenceBuilder) {
        self.parts.extend(other.parts);
        self.mask.extend(other.mask);
        self.tokens.extend(other.tokens);
    }

    pub fn mask(&self) -> &[Modality] {
        &self.mask
    }

    pub fn build(self, g: &mut Graph) -> Result<MixedSequence> {
        let embeddings = match self.parts.len() {
            0 => return Err(Error::ShapeMismatch("empty sequence".into())),
            1 => self.parts[0],
            _ => g.concat_rows(&self.parts)?,
        };
        let n = self.mask.len();
        Ok(MixedSequence {
            embeddings,
            mask: ModalityMask(self.mask),
            positions: (0..n).collect(),
            tokens: self.tokens,
        })
    }
}

/// Prompt text, then vision tokens, then answer text.
pub fn assemble_sequence(
    g: &mut Graph,
    cfg: &DecoderConfig,
    prompt_tokens: &[u32],
    image_features: Option<Var>,
    answer_tokens: &[u32],
) -> Result<MixedSequence> {
    let mut b = SequenceBuilder::new();
    b.push_text(g, prompt_tokens)?;
    if let Some(f) = image_features {
        b.push_vision(g, f, cfg.embed_dim)?;
    }
    b.push_text(g, answer_tokens)?;
    b.build(g)
}

/// Attention mask for a sequence: causal, optionally widened to full
/// attention inside each contiguous vision block.
pub fn attention_mask(mask: &ModalityMask, vision_bidirectional: bool) -> Vec<bool> {
    let n = mask.len();
    let mut allowed = causal_mask(n);
    if vision_bidirectional {
        let mut block = vec![usize::MAX; n];
        let mut id = 0;
        for i in 0..n {
            if mask.0[i] == Modality::Vision {
                block[i] = id;
            } else if i > 0 && mask.0[i - 1] == Modality::Vision {
                id += 1;
            }
        }
        for i in 0..n {
            for j in 0..n {
                if block[i] != usize::MAX && block[i] == block[j] {
                    allowed[i * n + j] = true;
                }
            }
        }
    }
    allowed
}

/// `x · {base}.lang`, with vision rows replaced by `x · {base}.vis` when
/// routing is on and the sequence has vision positions.
fn routed_matmul(g: &mut Graph, x: Var, base: &str, vision_rows: &[bool], route: bool) -> Result<Var> {
    let w = g.p(&format!("{base}.lang"))?;
    let lang = g.matmul(x, w)?;
    if !route || !vision_rows.contains(&true) {
        return Ok(lang);
    }
    let wv = g.p(&format!("{base}.vis"))?;
    let vis = g.matmul(x, wv)?;
    g.select_rows(lang, vis, vision_rows)
}

/// Causal multi-head self-attention of layer `layer` over `x: [L, d]`, with
/// rotary positions and per-token routing of the Q/K/V/O projections.
pub fn expert_attention(
    g: &mut Graph,
    x: Var,
    seq: &MixedSequence,
    cfg: &DecoderConfig,
    layer: usize,
    trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let vision = seq.mask.vision_rows();
    let base = format!("dec.{layer}.attn");
    let route = cfg.visual_expert;
    let q = routed_matmul(g, x, &format!("{base}.q"), &vision, route)?;
    let k = routed_matmul(g, x, &format!("{base}.k"), &vision, route)?;
    let v = routed_matmul(g, x, &format!("{base}.v"), &vision, route)?;
    let q = g.rope(q, cfg.heads, &seq.positions)?;
    let k = g.rope(k, cfg.heads, &seq.positions)?;
    let allowed = attention_mask(&seq.mask, cfg.vision_bidirectional);
    let att = attend(g, q, k, v, cfg.heads, Some(&allowed), trace)?;
    routed_matmul(g, att, &format!("{base}.o"), &vision, route)
}

fn ffn_with(g: &mut Graph, x: Var, base: &str, set: &str) -> Result<Var> {
    let w = g.p(&format!("{base}.W.{set}"))?;
    let v = g.p(&format!("{base}.V.{set}"))?;
    let w2 = g.p(&format!("{base}.W2.{set}"))?;
    g.swiglu(x, w, v, w2)
}

/// Per-token SwiGLU feed-forward of layer `layer`, routed by modality.
pub fn expert_ffn(g: &mut Graph, x: Var, seq: &MixedSequence, cfg: &DecoderConfig, layer: usize) -> Result<Var> {
    let vision = seq.mask.vision_rows();
    let base = format!("dec.{layer}.ffn");
    let lang = ffn_with(g, x, &base, "lang")?;
    if !cfg.visual_expert || !vision.contains(&true) {
        return Ok(lang);
    }
    let vis = ffn_with(g, x, &base, "vis")?;
    g.select_rows(lang, vis, &vision)
}

pub struct DecoderOutput {
    pub logits: Var,
    /// Attention weights per layer and head, each `[L, L]`.
    pub attention: Vec<Var>,
}

/// Logits `[L, vocab]` for a mixed sequence.
pub fn decoder_forward(g: &mut Graph, seq: &MixedSequence, cfg: &DecoderConfig) -> Result<Var> {
    Ok(decoder_forward_traced(g, seq, cfg, false)?.logits)
}

pub fn decoder_forward_traced(
    g: &mut Graph,
    seq: &MixedSequence,
    cfg: &DecoderConfig,
    trace: bool,
) -> Result<DecoderOutput> {
    let (n, d) = g.value(seq.embeddings).dims2()?;
    if d != cfg.embed_dim || n != seq.mask.len() || n != seq.positions.len() || n != seq.tokens.len() {
        return Err(Error::ShapeMismatch(format!(
            "sequence [{n},{d}] with {} tags for embed width {}",
            seq.mask.len(),
            cfg.embed_dim
        )));
    }
    let mut attention = Vec::new();
    let mut x = seq.embeddings;
    for l in 0..cfg.depth {
        let s = g.p(&format!("dec.norm.{l}.attn"))?;
        let h = g.rms_norm(x, s, NORM_EPS)?;
        let a = expert_attention(g, h, seq, cfg, l, trace.then_some(&mut attention))?;
        x = g.add(x, a)?;
        let s = g.p(&format!("dec.norm.{l}.ffn"))?;
        let h = g.rms_norm(x, s, NORM_EPS)?;
        let f = expert_ffn(g, h, seq, cfg, l)?;
        x = g.add(x, f)?;
    }
    let s = g.p("dec.norm.final")?;
    let h = g.rms_norm(x, s, NORM_EPS)?;
    let head = g.p("dec.head")?;
    let logits = g.matmul(h, head)?;
    Ok(DecoderOutput { logits, attention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Modality::{Text as T, Vision as V};

    fn cfg(visual_expert: bool) -> DecoderConfig {
        DecoderConfig {
            visual_expert,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            vocab_size: 16,
            ffn_hidden: 12,
            vision_bidirectional: false,
        }
    }

    #[test]
    fn assemble_orders_and_tags() {
        let c = cfg(true);
        let mut store = ParamStore::new();
        c.init(&mut ChaCha8Rng::seed_from_u64(0), &mut store);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store);
        let img = g.constant(Tensor::zeros(&[4, 8]));
        let seq = assemble_sequence(&mut g, &c, &[1, 2], Some(img), &[3, 4, 5]).unwrap();
        assert_eq!(seq.mask.0, vec![T, T, V, V, V, V, T, T, T]);
        assert_eq!(seq.positions, (0..9).collect::<Vec<_>>());
        assert_eq!(g.shape(seq.embeddings), &[9, 8]);

        let seq = assemble_sequence(&mut g, &c, &[1, 2], None, &[3]).unwrap();
        assert!(seq.mask.0.iter().all(|m| *m == T));

        let wrong = g.constant(Tensor::zeros(&[4, 6]));
        assert!(matches!(
            assemble_sequence(&mut g, &c, &[1], Some(wrong), &[2]),
            Err(Error::DimMismatch { expected: 8, got: 6 })
        ));
    }

    #[test]
    fn shared_mode_has_no_vision_tensors() {
        let mut store = ParamStore::new();
        cfg(false).init(&mut ChaCha8Rng::seed_from_u64(0), &mut store);
        assert!(store.names().all(|n| !n.ends_with(".vis")));
        let mut store = ParamStore::new();
        cfg(true).init(&mut ChaCha8Rng::seed_from_u64(0), &mut store);
        assert_eq!(store.names().filter(|n| n.ends_with(".vis")).count(), 7);
    }

    #[test]
    fn bidirectional_vision_blocks() {
        let mask = ModalityMask(vec![T, V, V, T, V]);
        let causal = attention_mask(&mask, false);
        assert!(!causal[5 + 2]);
        let bi = attention_mask(&mask, true);
        assert!(bi[5 + 2]);
        // separate vision blocks stay causal
        assert!(!bi[5 + 4]);
        assert!(!bi[3 * 5 + 4]);
        assert_eq!(mask.runs(), vec![(T, 1), (V, 2), (T, 1), (V, 1)]);
    }
}
