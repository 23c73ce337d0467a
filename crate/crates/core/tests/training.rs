mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::*;
use vlm_core::model::{Media, ModelConfig, Vlm};
use vlm_core::params::ParamStore;
use vlm_core::tensor::Scalar;
use vlm_core::trainer::{is_text_batch, load_dataset, mix_batches, run_stage, Batch, Example, StageConfig};

fn stage(steps: usize, global_batch: usize) -> StageConfig {
    StageConfig {
        lr: 1e-3,
        vit_lr_ratio: 0.5,
        global_batch,
        micro_batch: None,
        steps,
        trainable_groups: ["vit", "adapter", "decoder", "visual_expert"].map(String::from).into(),
        resolution_schedule: Vec::new(),
        text_mix_ratio: 0.0,
        seed: 3,
    }
}

fn image_data(n: u8) -> Vec<Example> {
    (0..n)
        .map(|code| {
            let (img, caption) = synthetic_caption(code);
            Example::new("Describe.", Media::Image(img), &caption)
        })
        .collect()
}

fn max_param_diff(a: &ParamStore, b: &ParamStore) -> Scalar {
    a.iter()
        .map(|(name, t)| {
            let u = b.get(name).unwrap();
            t.data().iter().zip(u.data()).map(|(x, y)| (x - y).abs()).fold(0.0, Scalar::max)
        })
        .fold(0.0, Scalar::max)
}

#[test]
fn micro_batches_accumulate_to_the_full_batch() {
    let data = image_data(8);
    let full = stage(3, 6);
    let split = StageConfig {
        micro_batch: Some(4),
        ..full.clone()
    };
    let mut a = Vlm::new(ModelConfig::toy(true), 1).unwrap();
    let mut b = Vlm::new(ModelConfig::toy(true), 1).unwrap();
    let ra = run_stage(&mut a, &data, &full).unwrap();
    let rb = run_stage(&mut b, &data, &split).unwrap();
    for ((_, la), (_, lb)) in ra.losses.iter().zip(&rb.losses) {
        assert!((la - lb).abs() < 1e-10, "{la} vs {lb}");
    }
    // only the summation order differs
    assert!(max_param_diff(&a.params, &b.params) < 1e-9);
}

#[test]
fn seeded_runs_repeat_and_seeds_matter() {
    let data = image_data(6);
    let run = |seed| {
        let mut m = Vlm::new(ModelConfig::toy(false), 2).unwrap();
        let report = run_stage(&mut m, &data, &StageConfig { seed, ..stage(4, 2) }).unwrap();
        (m.params, report.losses)
    };
    let (pa, la) = run(5);
    let (pb, lb) = run(5);
    let (pc, _) = run(6);
    assert_eq!(la, lb);
    assert_eq!(max_param_diff(&pa, &pb), 0.0);
    assert!(max_param_diff(&pa, &pc) > 0.0);
}

#[test]
fn dataset_loads_images_and_prefixes_short_answers() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = synthetic_caption(5);
    std::fs::create_dir(dir.path().join("img")).unwrap();
    std::fs::write(dir.path().join("img/a.cgimg"), img.to_text()).unwrap();
    let jsonl = dir.path().join("train.jsonl");
    std::fs::write(
        &jsonl,
        concat!(
            "{\"prompt\":\"What is lit?\",\"answer\":\"nw\",\"type\":0,\"image\":\"img/a.cgimg\"}\n",
            "\n",
            "{\"prompt\":\"Say hi.\",\"answer\":\"hi\",\"type\":1}\n",
        ),
    )
    .unwrap();
    let data = load_dataset(&jsonl, 4).unwrap();
    assert_eq!(data.len(), 2);
    match &data[0].media {
        Media::Image(g) => assert_eq!(g, &img),
        other => panic!("expected image, got {other:?}"),
    }
    let mut want = b"Short Answer: nw".map(u32::from).to_vec();
    want.push(257);
    assert_eq!(data[0].answer, want);
    assert!(data[1].is_text_only());

    std::fs::write(&jsonl, "{\"prompt\":\"x\",\"answer\":\"\",\"type\":0}\n").unwrap();
    assert!(load_dataset(&jsonl, 4).is_err());
    std::fs::write(&jsonl, "{\"prompt\":\"x\",\"answer\":\"y\",\"type\":0,\"image\":\"missing.cgimg\"}\n").unwrap();
    assert!(load_dataset(&jsonl, 4).unwrap_err().is_io());
}

#[test]
fn co_training_touches_text_and_vision_weights() {
    let mut data = image_data(4);
    data.push(Example::new("Count:", Media::None, "one two three"));
    data.push(Example::new("Spell:", Media::None, "abc"));
    let mut m = Vlm::new(ModelConfig::toy(true), 3).unwrap();
    let before = m.params.clone();
    let cfg = StageConfig {
        text_mix_ratio: 0.5,
        ..stage(4, 2)
    };
    let report = run_stage(&mut m, &data, &cfg).unwrap();
    assert_eq!(report.losses.len(), 4);
    assert!(report.losses.iter().all(|(_, l)| l.is_finite() && *l > 0.0));
    for name in ["vit.patch.w", "adapter.conv.w", "adapter.swiglu.W"] {
        if let Ok(t) = before.get(name) {
            assert_ne!(m.params.get(name).unwrap(), t, "{name} never trained");
        }
    }
    assert_ne!(m.params.get("dec.embed").unwrap(), before.get("dec.embed").unwrap());
}

#[test]
fn progressive_resolution_trains_at_each_size() {
    let data = image_data(4);
    let mut m = Vlm::new(ModelConfig::toy(true), 4).unwrap();
    let cfg = StageConfig {
        resolution_schedule: vec![(0, 8), (2, 16)],
        ..stage(4, 2)
    };
    let report = run_stage(&mut m, &data, &cfg).unwrap();
    assert!(report.losses.iter().all(|(_, l)| l.is_finite()));

    let bad = StageConfig {
        resolution_schedule: vec![(1, 8)],
        ..stage(1, 1)
    };
    assert!(run_stage(&mut m, &data, &bad).is_err());
}

#[test]
fn frozen_groups_keep_their_weights() {
    let data = image_data(2);
    let mut m = Vlm::new(ModelConfig::toy(true), 8).unwrap();
    let before = m.params.clone();
    let cfg = StageConfig {
        trainable_groups: BTreeSet::from(["decoder".to_string()]),
        ..stage(2, 2)
    };
    run_stage(&mut m, &data, &cfg).unwrap();
    for (name, t) in before.iter() {
        if name.starts_with("vit") || name.starts_with("adapter") {
            assert_eq!(m.params.get(name).unwrap(), t, "{name}");
        }
    }
}

proptest! {
    #[test]
    fn mixing_keeps_the_requested_share(ratio in 0.0f64..=1.0, n in 1usize..200) {
        let mixed: Vec<Batch<usize, usize>> = mix_batches(0.., 0.., ratio).take(n).collect();
        let text = mixed.iter().filter(|b| matches!(b, Batch::Text(_))).count();
        prop_assert_eq!(text, (n as f64 * ratio).floor() as usize);
        // each stream is consumed in order
        let ts: Vec<usize> = mixed.iter().filter_map(|b| match b { Batch::Text(t) => Some(*t), _ => None }).collect();
        prop_assert_eq!(ts, (0..text).collect::<Vec<_>>());
        for (t, b) in mixed.iter().enumerate() {
            prop_assert_eq!(matches!(b, Batch::Text(_)), is_text_batch(t, ratio));
        }
    }

    #[test]
    fn mixing_stops_when_the_due_stream_runs_dry(text_len in 0usize..10, vl_len in 0usize..10) {
        let mixed: Vec<_> = mix_batches(0..text_len, 0..vl_len, 0.5).collect();
        let text = mixed.iter().filter(|b| matches!(b, Batch::Text(_))).count();
        prop_assert!(text <= text_len && mixed.len() - text <= vl_len);
        prop_assert!(text == text_len || mixed.len() - text == vl_len);
    }
}
