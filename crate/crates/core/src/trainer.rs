//! Training stages: per-group learning rates and freezing, text/vision batch
//! mixing, progressive resolution, answer-only loss and an Adam optimizer.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{decoder_forward, MixedSequence};
use crate::error::{Error, Result};
use crate::model::{Media, Vlm};
use crate::params::{check_group, group_of, Graph, ParamStore, ALL_GROUPS, GROUP_VIT};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::tokenizer::ByteTokenizer;
use crate::video::load_bundle;
use crate::vision::ImageGrid;

pub const SHORT_ANSWER_PREFIX: &str = "Short Answer: ";
pub const DEFAULT_VIT_LR_RATIO: Scalar = 0.1;
pub const ADAM_BETA1: Scalar = 0.9;
pub const ADAM_BETA2: Scalar = 0.95;
pub const ADAM_EPS: Scalar = 1e-8;

fn default_vit_ratio() -> Scalar {
    DEFAULT_VIT_LR_RATIO
}

/// One training stage. Serialized with the keys of the JSON config file.
///
/// `global_batch` records contribute to every optimizer step. They are
/// processed `micro_batch` at a time with gradients accumulated in between,
/// so `global_batch = micro_batch × accumulation steps` (the last micro batch
/// may be short).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub lr: Scalar,
    #[serde(default = "default_vit_ratio")]
    pub vit_lr_ratio: Scalar,
    pub global_batch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batch: Option<usize>,
    pub steps: usize,
    pub trainable_groups: BTreeSet<String>,
    #[serde(default)]
    pub resolution_schedule: Vec<(usize, usize)>,
    #[serde(default)]
    pub text_mix_ratio: Scalar,
    #[serde(default)]
    pub seed: u64,
}

pub const PRESETS: [&str; 4] = ["image-stage1", "image-stage2", "video-stage1", "video-stage2"];

fn groups(names: &[&str]) -> BTreeSet<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl StageConfig {
    /// Shipped recipes.
    ///
    /// Image SFT: 3000 steps at lr 1e-5 with global batch 2340, then 750
    /// steps with batch 1150; every parameter trains and the encoder runs at
    /// a tenth of the base rate. Video tuning: all parameters at 4e-6, then
    /// 1e-6; batch size and step count are not published for these and the
    /// values here are placeholders.
    pub fn preset(name: &str) -> Result<Self> {
        let image_groups = groups(&["vit", "adapter", "decoder", "visual_expert"]);
        let video_groups = groups(&ALL_GROUPS);
        let base = |lr, global_batch, steps, trainable_groups| Self {
            lr,
            vit_lr_ratio: DEFAULT_VIT_LR_RATIO,
            global_batch,
            micro_batch: None,
            steps,
            trainable_groups,
            resolution_schedule: Vec::new(),
            text_mix_ratio: 0.0,
            seed: 0,
        };
        Ok(match name {
            "image-stage1" => base(1e-5, 2340, 3000, image_groups),
            "image-stage2" => base(1e-5, 1150, 750, image_groups),
            "video-stage1" => base(4e-6, 128, 1000, video_groups),
            "video-stage2" => base(1e-6, 128, 1000, video_groups),
            other => return Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.vit_lr_ratio >= 0.0) {
            return Err(Error::InvalidConfig("vit_lr_ratio must be >= 0".into()));
        }
        if self.steps == 0 || self.global_batch == 0 || self.micro_batch == Some(0) {
            return Err(Error::InvalidConfig("steps and batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.text_mix_ratio) {
            return Err(Error::InvalidConfig("text_mix_ratio must lie in [0, 1]".into()));
        }
        if let Some(&(first, _)) = self.resolution_schedule.first() {
            if first != 0 {
                return Err(Error::InvalidConfig("resolution schedule must start at step 0".into()));
            }
        }
        if self.resolution_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidConfig("resolution schedule steps must increase".into()));
        }
        for g in &self.trainable_groups {
            check_group(g)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stage config serializes")
    }

    fn micro(&self) -> usize {
        self.micro_batch.unwrap_or(self.global_batch).min(self.global_batch)
    }
}

/// Learning rate for a parameter group: zero when frozen, the base rate
/// scaled by `vit_lr_ratio` for the encoder, the base rate otherwise.
pub fn lr_for(group: &str, stage: &StageConfig) -> Result<Scalar> {
    let group = check_group(group)?;
    if !stage.trainable_groups.contains(group) {
        return Ok(0.0);
    }
    Ok(if group == GROUP_VIT {
        stage.lr * stage.vit_lr_ratio
    } else {
        stage.lr
    })
}

/// Names of the tensors of `params` that the stage updates.
pub fn trainable_set(stage: &StageConfig, params: &ParamStore) -> Result<BTreeSet<String>> {
    for g in &stage.trainable_groups {
        check_group(g)?;
    }
    Ok(params
        .names()
        .filter(|n| group_of(n).is_some_and(|g| stage.trainable_groups.contains(g)))
        .map(str::to_string)
        .collect())
}

/// Whether batch `t` of a mixed schedule is a text-only batch: true exactly
/// when `t·ratio` and `(t+1)·ratio` straddle an integer, so the first `T`
/// batches hold `floor(T·ratio)` text batches.
pub fn is_text_batch(t: usize, ratio: Scalar) -> bool {
    ((t + 1) as Scalar * ratio).floor() > (t as Scalar * ratio).floor()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch<T, V> {
    Text(T),
    VisionLanguage(V),
}

/// Interleaves two batch streams on the [`is_text_batch`] schedule. Ends as
/// soon as the stream due next is exhausted.
pub fn mix_batches<T, V>(
    text: impl IntoIterator<Item = T>,
    vl: impl IntoIterator<Item = V>,
    ratio: Scalar,
) -> impl Iterator<Item = Batch<T, V>> {
    let mut text = text.into_iter();
    let mut vl = vl.into_iter();
    (0..).map_while(move |t| {
        if is_text_batch(t, ratio) {
            text.next().map(Batch::Text)
        } else {
            vl.next().map(Batch::VisionLanguage)
        }
    })
}

/// Resolution in force at `step`: the last schedule entry starting at or
/// before it, or `default` for an empty schedule.
pub fn resolution_at(step: usize, stage: &StageConfig, default: usize) -> usize {
    stage
        .resolution_schedule
        .iter()
        .take_while(|(start, _)| *start <= step)
        .last()
        .map_or(default, |&(_, r)| r)
}

/// One supervised record, as stored in the JSON Lines dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: String,
    pub answer: String,
    /// 0 for concise answers, 1 for free-form responses.
    #[serde(rename = "type")]
    pub answer_type: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<String>,
}

impl SftRecord {
    pub fn validate(&self) -> Result<()> {
        if self.answer.is_empty() {
            return Err(Error::InvalidRecord("empty answer".into()));
        }
        if self.answer_type > 1 {
            return Err(Error::InvalidRecord(format!("answer type {}", self.answer_type)));
        }
        if self.image.is_some() && self.video.is_some() {
            return Err(Error::InvalidRecord("both image and video given".into()));
        }
        Ok(())
    }
}

/// Concise (type 0) answers get the `"Short Answer: "` prefix, once.
pub fn apply_short_answer_prefix(rec: &SftRecord) -> SftRecord {
    let mut out = rec.clone();
    if rec.answer_type == 0 && !rec.answer.starts_with(SHORT_ANSWER_PREFIX) {
        out.answer = format!("{SHORT_ANSWER_PREFIX}{}", rec.answer);
    }
    out
}

/// Mean next-token cross-entropy over the answer positions: the logits at
/// position `p - 1` are scored against the token at `p` for every `p` in
/// `answer_span`. All other positions contribute nothing.
pub fn mask_loss(g: &mut Graph, logits: Var, seq: &MixedSequence, answer_span: Range<usize>) -> Result<Var> {
    if answer_span.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if answer_span.start == 0 || answer_span.end > seq.len() {
        return Err(Error::InvalidRecord(format!(
            "answer span {answer_span:?} outside 1..{}",
            seq.len()
        )));
    }
    let mut targets = vec![None; seq.len()];
    for p in answer_span {
        let tok = seq.tokens[p]
            .ok_or_else(|| Error::InvalidRecord(format!("answer position {p} is not text")))?;
        targets[p - 1] = Some(tok as usize);
    }
    g.cross_entropy(logits, &targets)
}

/// A record with its media loaded and the answer tokenized.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompt: String,
    pub media: Media,
    /// Answer bytes followed by EOS.
    pub answer: Vec<u32>,
}

impl Example {
    pub fn new(prompt: &str, media: Media, answer: &str) -> Self {
        let mut ids = ByteTokenizer.encode(answer);
        ids.push(ByteTokenizer::EOS);
        Self {
            prompt: prompt.to_string(),
            media,
            answer: ids,
        }
    }

    pub fn is_text_only(&self) -> bool {
        matches!(self.media, Media::None)
    }
}

/// Loads a JSON Lines dataset, applying the short-answer prefix. Media paths
/// resolve against the dataset's directory; videos are sampled to
/// `n_frames`.
pub fn load_dataset(path: &Path, n_frames: usize) -> Result<Vec<Example>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SftRecord = serde_json::from_str(line)
            .map_err(|e| Error::InvalidRecord(format!("line {}: {e}", i + 1)))?;
        rec.validate()?;
        let rec = apply_short_answer_prefix(&rec);
        let media = match (&rec.image, &rec.video) {
            (Some(img), _) => Media::Image(ImageGrid::load(base.join(img))?),
            (_, Some(v)) => Media::Video(load_bundle(&base.join(v), n_frames)?),
            _ => Media::None,
        };
        out.push(Example::new(&rec.prompt, media, &rec.answer));
    }
    Ok(out)
}

#[derive(Debug, Default)]
struct AdamState {
    m: BTreeMap<String, Vec<Scalar>>,
    v: BTreeMap<String, Vec<Scalar>>,
    t: i32,
}

impl AdamState {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<Scalar>>, stage: &StageConfig) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (name, g) in grads {
            let group = group_of(name).ok_or_else(|| Error::UnknownGroup(name.clone()))?;
            let lr = lr_for(group, stage)?;
            if lr == 0.0 {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let p = params.get_mut(name)?.data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Draws examples in a seeded shuffled order, reshuffling every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            order: indices,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    /// `(step, mean loss over the step's batch)`, before the update.
    pub losses: Vec<(usize, Scalar)>,
}

/// Loss of one example on an existing graph.
pub fn example_loss(model: &Vlm, g: &mut Graph, ex: &Example, resolution: Option<usize>) -> Result<Var> {
    let built = model.build_sequence(g, &ex.prompt, &ex.media, &ex.answer, resolution)?;
    let logits = decoder_forward(g, &built.seq, &model.cfg.decoder)?;
    mask_loss(g, logits, &built.seq, built.answer_span)
}

/// Runs `stage.steps` optimizer steps on `model`.
///
/// Text-only and media examples form two pools. When both are non-empty,
/// each step's whole batch is drawn from one pool following
/// [`is_text_batch`] at `text_mix_ratio`; otherwise every batch comes from
/// the non-empty pool.
pub fn run_stage(model: &mut Vlm, dataset: &[Example], stage: &StageConfig) -> Result<StageReport> {
    stage.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let trainable = trainable_set(stage, &model.params)?;
    let (text_idx, vl_idx): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset[i].is_text_only());
    let mixed = !text_idx.is_empty() && !vl_idx.is_empty();
    let mut text_pool = Sampler::new(text_idx, stage.seed);
    let mut vl_pool = Sampler::new(vl_idx, stage.seed.wrapping_add(1));
    let groups = stage.trainable_groups.clone();
    let mut adam = AdamState::default();
    let mut losses = Vec::with_capacity(stage.steps);
    let default_res = model.cfg.vit.image_height();

    for step in 0..stage.steps {
        let use_text = if mixed {
            is_text_batch(step, stage.text_mix_ratio)
        } else {
            vl_pool.order.is_empty()
        };
        let pool = if use_text { &mut text_pool } else { &mut vl_pool };
        let batch: Vec<usize> = (0..stage.global_batch).map(|_| pool.next()).collect();
        let resolution = (!stage.resolution_schedule.is_empty())
            .then(|| resolution_at(step, stage, default_res));

        let mut grads: BTreeMap<String, Vec<Scalar>> = BTreeMap::new();
        let mut total = 0.0;
        for micro in batch.chunks(stage.micro()) {
            let mut tape = Tape::new();
            let mut g = Graph::with_trainable(&mut tape, &model.params, &groups);
            let mut parts = Vec::with_capacity(micro.len());
            for &i in micro {
                parts.push(example_loss(model, &mut g, &dataset[i], resolution)?);
            }
            let mut sum = parts[0];
            for &p in &parts[1..] {
                sum = g.add(sum, p)?;
            }
            let loss = g.scale(sum, 1.0 / stage.global_batch as Scalar);
            total += g.value(loss).item();
            let bound = g.bound().clone();
            drop(g);
            let back = tape.backward(loss)?;
            for (name, var) in bound {
                if !trainable.contains(&name) {
                    continue;
                }
                let gv = back.get(var).into_data();
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, gv);
                    }
                }
            }
        }
        losses.push((step, total));
        adam.step(&mut model.params, &grads, stage)?;
    }
    Ok(StageReport { losses })
}

/// Writes a `step,loss` CSV.
pub fn write_loss_trace(path: &Path, losses: &[(usize, Scalar)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss")?;
    for (step, loss) in losses {
        writeln!(f, "{step},{loss}")?;
    }
    f.flush()?;
    Ok(())
}
