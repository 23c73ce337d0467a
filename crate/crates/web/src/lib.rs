//! Browser bindings for the demo page. Every export returns JSON text; the
//! plain functions underneath are what the native tests exercise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use vlm_core::adapter::adapter_output_len;
use vlm_core::decoder::{decoder_forward_traced, DecoderConfig, SequenceBuilder};
use vlm_core::params::{Graph, ParamStore};
use vlm_core::tape::Tape;
use vlm_core::tensor::Tensor;
use vlm_core::tokenizer::ByteTokenizer;
use vlm_core::video::{render_timestamp, sample_indices};
use vlm_core::vision::token_count;
use vlm_core::Result;

/// Sequence lengths through the vision path for a square image.
pub fn token_counts(resolution: usize, patch: usize) -> Result<Value> {
    let vit = token_count(resolution, patch)?;
    let side = resolution / patch;
    let image = adapter_output_len(side, side)?;
    // video frames pass an extra 2×2 convolution first
    let frame = (side % 4 == 0).then(|| adapter_output_len(side / 2, side / 2)).transpose()?;
    Ok(json!({
        "grid": side,
        "vit_tokens": vit,
        "image_tokens": image,
        "video_frame_tokens": frame,
    }))
}

/// Which of `len` frames are kept when sampling `n`, with their labels.
pub fn frame_sampling(len: usize, n: usize, fps: f64) -> Result<Value> {
    let idx = sample_indices(len, n)?;
    let labels = idx
        .iter()
        .map(|&i| render_timestamp(i as f64 / fps))
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "indices": idx, "labels": labels }))
}

fn push_text(b: &mut SequenceBuilder, g: &mut Graph, labels: &mut Vec<String>, part: &[u32]) -> Result<()> {
    if !part.is_empty() {
        b.push_text(g, part)?;
        labels.extend(part.iter().map(|&t| ByteTokenizer.decode(&[t])));
    }
    Ok(())
}

fn demo_decoder(visual_expert: bool, vision_bidirectional: bool) -> DecoderConfig {
    DecoderConfig {
        visual_expert,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        vocab_size: ByteTokenizer::VOCAB_SIZE,
        ffn_hidden: 32,
        vision_bidirectional,
    }
}

/// Attention weights of a small seeded decoder over `text`, with
/// `vision_tokens` random vision embeddings spliced in after `split` bytes.
pub fn attention_map(
    text: &str,
    vision_tokens: usize,
    split: usize,
    layer: usize,
    head: usize,
    bidirectional: bool,
    seed: u64,
) -> Result<Value> {
    let cfg = demo_decoder(true, bidirectional);
    if layer >= cfg.depth || head >= cfg.heads {
        return Err(vlm_core::Error::InvalidConfig(format!(
            "layer {layer}/head {head} outside {} layers x {} heads",
            cfg.depth, cfg.heads
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    cfg.init(&mut rng, &mut store);

    let ids = ByteTokenizer.encode(text);
    let split = split.min(ids.len());
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store);
    let mut b = SequenceBuilder::new();
    let mut labels: Vec<String> = Vec::new();
    push_text(&mut b, &mut g, &mut labels, &ids[..split])?;
    if vision_tokens > 0 {
        let data = (0..vision_tokens * cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = g.constant(Tensor::new(vec![vision_tokens, cfg.embed_dim], data)?);
        b.push_vision(&mut g, v, cfg.embed_dim)?;
        labels.extend((0..vision_tokens).map(|i| format!("<v{i}>")));
    }
    push_text(&mut b, &mut g, &mut labels, &ids[split..])?;
    if b.is_empty() {
        return Err(vlm_core::Error::EmptyTarget);
    }
    let vision: Vec<bool> = b.mask().iter().map(|m| *m == vlm_core::decoder::Modality::Vision).collect();
    let seq = b.build(&mut g)?;
    let out = decoder_forward_traced(&mut g, &seq, &cfg, true)?;
    let w = g.value(out.attention[layer * cfg.heads + head]);
    let n = seq.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| w.row(i).iter().map(|&v| v as f64).collect()).collect();
    Ok(json!({ "labels": labels, "vision": vision, "weights": rows }))
}

fn to_js(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = tokenCounts)]
pub fn token_counts_js(resolution: usize, patch: usize) -> std::result::Result<String, JsValue> {
    to_js(token_counts(resolution, patch))
}

#[wasm_bindgen(js_name = frameSampling)]
pub fn frame_sampling_js(len: usize, n: usize, fps: f64) -> std::result::Result<String, JsValue> {
    to_js(frame_sampling(len, n, fps))
}

#[wasm_bindgen(js_name = attentionMap)]
pub fn attention_map_js(
    text: &str,
    vision_tokens: usize,
    split: usize,
    layer: usize,
    head: usize,
    bidirectional: bool,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(attention_map(text, vision_tokens, split, layer, head, bidirectional, seed as u64))
}
