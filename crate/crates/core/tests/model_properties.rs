mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use vlm_core::adapter::{adapt, AdapterConfig};
use vlm_core::decoder::{attention_mask, decoder_forward_traced, MixedSequence, Modality, ModalityMask};
use vlm_core::params::{Graph, ParamStore};
use vlm_core::tape::Tape;
use vlm_core::tensor::{Scalar, Tensor};
use vlm_core::vision::{patchify, vit_forward, vit_forward_traced, ImageGrid, VitConfig};

fn vit_cfg() -> VitConfig {
    VitConfig {
        channels: 2,
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_hidden: 16,
        grid_h: 3,
        grid_w: 4,
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageGrid {
    ImageGrid::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Rebuilds the image from its patches.
fn unpatchify(p: &Tensor, c: usize, h: usize, w: usize, ps: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; c * h * w];
    let gw = w / ps;
    for (k, row) in (0..p.shape()[0]).map(|k| (k, p.row(k))) {
        let (pr, pc) = (k / gw, k % gw);
        for (i, v) in row.iter().enumerate() {
            let ch = i / (ps * ps);
            let y = (i / ps) % ps;
            let x = i % ps;
            out[ch * h * w + (pr * ps + y) * w + pc * ps + x] = *v;
        }
    }
    out
}

proptest! {
    #[test]
    fn patchify_roundtrips(seed in 0u64..1000, c in 1usize..4, gh in 1usize..4, gw in 1usize..4, ps in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, c, gh * ps, gw * ps);
        let p = patchify(&img, ps).unwrap();
        prop_assert_eq!(p.shape(), &[gh * gw, c * ps * ps][..]);
        prop_assert_eq!(unpatchify(&p, c, gh * ps, gw * ps, ps), img.data().to_vec());
    }
}

#[test]
fn patchify_rejects_ragged_images() {
    let img = ImageGrid::new(1, 5, 4, vec![0.0; 20]).unwrap();
    assert!(matches!(patchify(&img, 2), Err(vlm_core::Error::IndivisibleImage { .. })));
}

#[test]
fn zeroed_blocks_leave_patch_embedding_untouched() {
    let cfg = vit_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    cfg.init(&mut rng, &mut store);
    let block_params: Vec<String> = store
        .names()
        .filter(|n| n.contains(".attn.") || n.contains(".mlp."))
        .map(String::from)
        .collect();
    for n in block_params {
        store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let img = random_image(&mut rng, 2, 6, 8);
    let patches = patchify(&img, 2).unwrap();

    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store);
    let p = g.constant(patches.clone());
    let out = vit_forward(&mut g, p, &cfg, (3, 4)).unwrap();
    let out = g.value(out).clone();

    // expected: patches · W + b + pos, computed by hand
    let w = store.get("vit.patch.w").unwrap();
    let b = store.get("vit.patch.b").unwrap();
    let pos = store.get("vit.pos").unwrap();
    for k in 0..12 {
        for j in 0..cfg.embed_dim {
            let mut v = b.data()[j] + pos.row(k)[j];
            for (i, x) in patches.row(k).iter().enumerate() {
                v += x * w.row(i)[j];
            }
            assert!((out.row(k)[j] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn vit_attention_rows_sum_to_one() {
    let cfg = vit_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    cfg.init(&mut rng, &mut store);
    let img = random_image(&mut rng, 2, 6, 8);
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store);
    let p = g.constant(patchify(&img, 2).unwrap());
    let out = vit_forward_traced(&mut g, p, &cfg, (3, 4), true).unwrap();
    assert_eq!(out.attention.len(), cfg.depth * cfg.heads);
    for a in &out.attention {
        let a = g.value(*a);
        assert_eq!(a.shape(), &[12, 12]);
        for i in 0..12 {
            assert!((a.row(i).iter().sum::<Scalar>() - 1.0).abs() < 1e-12);
            assert!(a.row(i).iter().all(|v| *v > 0.0), "encoder attention is not masked");
        }
    }
}

#[test]
fn smaller_grid_uses_top_left_positions() {
    let cfg = vit_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    cfg.init(&mut rng, &mut store);
    let img = random_image(&mut rng, 2, 4, 4);
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store);
    let p = g.constant(patchify(&img, 2).unwrap());
    let out = vit_forward(&mut g, p, &cfg, (2, 2)).unwrap();
    assert_eq!(g.shape(out), &[4, 8]);
    let p = g.constant(patchify(&img, 2).unwrap());
    assert!(vit_forward(&mut g, p, &cfg, (4, 1)).is_err());
}

#[test]
fn adapter_output_depends_only_on_its_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (gh, gw) = (4, 6);
    let cfg = AdapterConfig::new(3, 5, gh, gw);
    let mut store = ParamStore::new();
    cfg.init(&mut rng, &mut store);
    let base: Vec<Scalar> = (0..gh * gw * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let run = |data: &[Scalar]| {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store);
        let x = g.constant(Tensor::new(vec![gh * gw, 3], data.to_vec()).unwrap());
        let y = adapt(&mut g, x, &cfg, (gh, gw)).unwrap();
        g.value(y).clone()
    };
    let before = run(&base);
    assert_eq!(before.shape(), &[6, 5]);
    for r in 0..gh {
        for c in 0..gw {
            let mut data = base.clone();
            data[(r * gw + c) * 3 + 1] += 0.5;
            let after = run(&data);
            let owner = (r / 2) * (gw / 2) + c / 2;
            for k in 0..6 {
                let changed = before.row(k) != after.row(k);
                assert_eq!(changed, k == owner, "input ({r},{c}) moved output {k}");
            }
        }
    }
}

#[test]
fn adapter_rejects_odd_grids() {
    let cfg = AdapterConfig::new(3, 5, 3, 4);
    assert!(matches!(cfg.validate(), Err(vlm_core::Error::OddGrid { .. })));
}

#[test]
fn decoder_matches_token_loop_oracle_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for expert in [true, false] {
        let cfg = small_decoder(expert);
        for i in 0..10 {
            let store = decoder_params(&cfg, i);
            let n = rng.gen_range(1..12);
            let inst = random_instance(&mut rng, cfg.embed_dim, n);
            let d = max_diff(&tape_logits(&store, &cfg, &inst), &oracle_logits(&store, &cfg, &inst));
            assert!(d < 1e-9, "expert={expert} instance {i}: {d}");
        }
    }
}

#[test]
fn vision_routing_changes_only_vision_influenced_positions() {
    let cfg = small_decoder(true);
    let store = decoder_params(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut inst = random_instance(&mut rng, cfg.embed_dim, 6);
    inst.mask = vec![Modality::Text, Modality::Text, Modality::Text, Modality::Vision, Modality::Vision, Modality::Text];
    let tied = tape_logits(&tie_vis(&store), &cfg, &inst);
    let routed = tape_logits(&store, &cfg, &inst);
    // text prefix never sees vision tokens or weights
    for j in 0..3 {
        assert_eq!(tied[j], routed[j]);
    }
    for j in 3..6 {
        assert_ne!(tied[j], routed[j]);
    }
}

#[test]
fn bidirectional_vision_blocks_only_widen_inside_blocks() {
    use Modality::{Text as T, Vision as V};
    let mask = ModalityMask(vec![T, V, V, T, V, V, V]);
    let causal = attention_mask(&mask, false);
    let bidi = attention_mask(&mask, true);
    let n = 7;
    for i in 0..n {
        for j in 0..n {
            let same_block = matches!((i, j), (1..=2, 1..=2) | (4..=6, 4..=6));
            assert_eq!(causal[i * n + j], j <= i);
            assert_eq!(bidi[i * n + j], j <= i || same_block, "({i},{j})");
        }
    }

    // in the forward pass, a later vision token now reaches an earlier one
    let mut cfg = small_decoder(true);
    cfg.vision_bidirectional = true;
    let store = decoder_params(&cfg, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let emb: Vec<Vec<Scalar>> = (0..n).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let run = |emb: &[Vec<Scalar>]| {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store);
        let e = g.constant(Tensor::from_rows(emb).unwrap());
        let seq = MixedSequence {
            embeddings: e,
            mask: mask.clone(),
            positions: (0..n).collect(),
            tokens: vec![None; n],
        };
        let out = decoder_forward_traced(&mut g, &seq, &cfg, false).unwrap();
        g.value(out.logits).clone()
    };
    let before = run(&emb);
    let mut pert = emb.clone();
    pert[5][0] += 1.0;
    let after = run(&pert);
    assert_eq!(before.row(3), after.row(3));
    assert_ne!(before.row(4), after.row(4));
}
