//! Video input: uniform frame sampling, per-frame timestamp text, and the
//! extra 2×2 compression convolution between the encoder and the adapter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{adapt, downsample, AdapterConfig};
use crate::decoder::SequenceBuilder;
use crate::error::{Error, Result};
use crate::params::Graph;
use crate::tokenizer::ByteTokenizer;
use crate::vision::{patchify, vit_forward, ImageGrid, VitConfig};

pub const DEFAULT_FRAMES: usize = 24;

/// Literal timestamp template; `{s}` is the rendered second count.
pub const TIMESTAMP_TEMPLATE: &str = "Time {s}s:";

/// Prefix of the extra compression convolution's tensors.
pub const EXTRA_CONV: &str = "video.conv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoConfig {
    pub n_frames: usize,
    /// Whether the model carries the extra `video.conv` layer.
    pub extra_conv: bool,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self {
            n_frames: DEFAULT_FRAMES,
            extra_conv: true,
        }
    }
}

/// Frames with their timestamps in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    frames: Vec<ImageGrid>,
    timestamps: Vec<f64>,
}

impl FrameBundle {
    /// Timestamps must be non-negative and strictly increasing.
    pub fn new(frames: Vec<ImageGrid>, timestamps: Vec<f64>) -> Result<Self> {
        Self::checked(frames, timestamps, true)
    }

    fn checked(frames: Vec<ImageGrid>, timestamps: Vec<f64>, strict: bool) -> Result<Self> {
        if frames.len() != timestamps.len() {
            return Err(Error::InvalidBundle(format!(
                "{} frames with {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if frames.is_empty() {
            return Err(Error::EmptyManifest);
        }
        if let Some(&t) = timestamps.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(Error::NegativeTimestamp(t));
        }
        for w in timestamps.windows(2) {
            let bad = if strict { w[1] <= w[0] } else { w[1] < w[0] };
            if bad {
                return Err(Error::InvalidBundle(format!(
                    "timestamps out of order: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { frames, timestamps })
    }

    pub fn frames(&self) -> &[ImageGrid] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Centre-of-bin uniform sample of `n` indices from `len` items:
/// `floor((i + 0.5)·len / n)`.
pub fn sample_indices(len: usize, n: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::EmptyManifest);
    }
    if n == 0 {
        return Err(Error::InvalidConfig("frame count must be >= 1".into()));
    }
    Ok((0..n).map(|i| ((2 * i + 1) * len) / (2 * n)).collect())
}

/// Selects `n` entries of a timestamp-sorted manifest. Entries repeat when
/// the manifest is shorter than `n`.
pub fn select_entries<T: Clone>(manifest: &[(f64, T)], n: usize) -> Result<Vec<(f64, T)>> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if manifest.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::InvalidBundle("manifest timestamps must increase".into()));
    }
    Ok(sample_indices(manifest.len(), n)?
        .into_iter()
        .map(|i| manifest[i].clone())
        .collect())
}

pub fn select_frames(manifest: &[(f64, ImageGrid)], n: usize) -> Result<FrameBundle> {
    let (timestamps, frames) = select_entries(manifest, n)?.into_iter().unzip();
    FrameBundle::checked(frames, timestamps, false)
}

/// `"Time 3s:"` for whole seconds, `"Time 2.5s:"` otherwise.
pub fn render_timestamp(seconds: f64) -> Result<String> {
    if !(seconds >= 0.0) || !seconds.is_finite() {
        return Err(Error::NegativeTimestamp(seconds));
    }
    let s = if seconds.fract() == 0.0 {
        format!("{}", seconds as u64)
    } else {
        format!("{seconds:.1}")
    };
    Ok(TIMESTAMP_TEMPLATE.replace("{s}", &s))
}

/// Parses a manifest: one `"{seconds} {path}"` line per frame, ascending.
/// Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut out: Vec<(f64, PathBuf)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (t, path) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::InvalidBundle(format!("line {}: expected '<seconds> <path>'", lineno + 1)))?;
        let t: f64 = t
            .parse()
            .map_err(|_| Error::InvalidBundle(format!("line {}: bad timestamp {t:?}", lineno + 1)))?;
        if !(t >= 0.0) {
            return Err(Error::NegativeTimestamp(t));
        }
        if let Some((prev, _)) = out.last() {
            if t <= *prev {
                return Err(Error::InvalidBundle(format!(
                    "line {}: timestamp {t} not after {prev}",
                    lineno + 1
                )));
            }
        }
        out.push((t, base.join(path.trim())));
    }
    if out.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Reads a manifest, samples `n` frames and loads their images.
pub fn load_bundle(path: &Path, n: usize) -> Result<FrameBundle> {
    let entries = select_entries(&read_manifest(path)?, n)?;
    let mut frames = Vec::with_capacity(entries.len());
    let mut timestamps = Vec::with_capacity(entries.len());
    for (t, p) in entries {
        frames.push(ImageGrid::load(&p)?);
        timestamps.push(t);
    }
    FrameBundle::checked(frames, timestamps, false)
}

/// Encodes every frame as `[timestamp text, vision tokens]`, in timestamp
/// order. Vision tokens pass through the encoder, the extra 2×2 convolution
/// (when `extra_conv`) and the adapter.
pub fn encode_video(
    g: &mut Graph,
    bundle: &FrameBundle,
    vit: &VitConfig,
    adapter: &AdapterConfig,
    extra_conv: bool,
    tokenizer: &ByteTokenizer,
) -> Result<SequenceBuilder> {
    let mut fragment = SequenceBuilder::new();
    for (frame, &t) in bundle.frames().iter().zip(bundle.timestamps()) {
        let text = tokenizer.encode(&render_timestamp(t)?);
        fragment.push_text(g, &text)?;
        let patches = patchify(frame, vit.patch_size)?;
        let grid = (frame.height() / vit.patch_size, frame.width() / vit.patch_size);
        let patches = g.constant(patches);
        let mut features = vit_forward(g, patches, vit, grid)?;
        let mut grid = grid;
        if extra_conv {
            features = downsample(g, features, EXTRA_CONV, grid)?;
            grid = (grid.0 / 2, grid.1 / 2);
        }
        let tokens = adapt(g, features, adapter, grid)?;
        fragment.push_vision(g, tokens, adapter.out_dim)?;
    }
    Ok(fragment)
}
