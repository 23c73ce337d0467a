//! End-to-end driver over a directory of video manifests.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::client::{ModelClient, RetryPolicy};
use super::{caption_frames, filter_scene, generate_qa, TqaRecord};
use crate::error::{Error, Result};
use crate::video::{load_bundle, read_manifest, DEFAULT_FRAMES};

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    /// Upper bound on frames captioned per video; shorter videos are
    /// captioned frame by frame.
    pub frames_per_video: usize,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frames_per_video: DEFAULT_FRAMES,
            max_concurrency: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// Per-video outcome counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub videos: usize,
    /// Passed the scene filter.
    pub kept: usize,
    /// Rejected by the scene filter.
    pub filtered: usize,
    pub ambiguous_filter: usize,
    /// The model answered with the no-pair sentinel.
    pub no_qa: usize,
    pub parse_errors: usize,
    pub client_failures: usize,
    /// Unreadable manifests or frames, colliding timestamps.
    pub input_errors: usize,
    pub written: usize,
}

#[derive(Debug)]
enum Outcome {
    Record(TqaRecord),
    Filtered,
    Ambiguous,
    NoQa,
    ParseError,
    ClientFailure,
    InputError,
}

/// Manifest files of `dir` as `(video_id, path)`, sorted by id.
pub fn list_manifests(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

fn process(
    id: &str,
    manifest: &Path,
    caption_client: &dyn ModelClient,
    llm_client: &dyn ModelClient,
    cfg: &PipelineConfig,
) -> Outcome {
    let classify = |e: Error| match e {
        Error::ClientFailure(_) => Outcome::ClientFailure,
        Error::AmbiguousFilterResponse(_) => Outcome::Ambiguous,
        Error::ParseError(_) => Outcome::ParseError,
        _ => Outcome::InputError,
    };
    let run = || -> Result<Outcome> {
        let frames = read_manifest(manifest)?.len().min(cfg.frames_per_video);
        let bundle = load_bundle(manifest, frames)?;
        let captions = caption_frames(&bundle, caption_client, &cfg.retry)?;
        if !filter_scene(&captions, llm_client, &cfg.retry)? {
            return Ok(Outcome::Filtered);
        }
        Ok(match generate_qa(&captions, llm_client, &cfg.retry)? {
            Some((question, answer)) => Outcome::Record(TqaRecord {
                video: id.to_string(),
                question,
                answer,
            }),
            None => Outcome::NoQa,
        })
    };
    run().unwrap_or_else(classify)
}

/// Processes every manifest in `manifest_dir` and writes the generated
/// records to `out_path` as JSON Lines sorted by video id.
///
/// Videos run on up to `max_concurrency` worker threads, each issuing one
/// client call at a time. A failing video is counted and skipped.
pub fn run_pipeline(
    manifest_dir: &Path,
    caption_client: &dyn ModelClient,
    llm_client: &dyn ModelClient,
    out_path: &Path,
    cfg: &PipelineConfig,
) -> Result<Summary> {
    if cfg.max_concurrency == 0 {
        return Err(Error::InvalidConfig("max_concurrency must be >= 1".into()));
    }
    let videos = list_manifests(manifest_dir)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..videos.len()).map(|_| None).collect());
    let workers = cfg.max_concurrency.min(videos.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((id, path)) = videos.get(i) else { break };
                let outcome = process(id, path, caption_client, llm_client, cfg);
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });

    let mut summary = Summary {
        videos: videos.len(),
        ..Summary::default()
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    for outcome in results.into_inner().expect("results lock").into_iter().flatten() {
        match outcome {
            Outcome::Record(rec) => {
                summary.kept += 1;
                summary.written += 1;
                writeln!(out, "{}", serde_json::to_string(&rec)?)?;
            }
            Outcome::Filtered => summary.filtered += 1,
            Outcome::Ambiguous => summary.ambiguous_filter += 1,
            Outcome::NoQa => {
                summary.kept += 1;
                summary.no_qa += 1;
            }
            Outcome::ParseError => {
                summary.kept += 1;
                summary.parse_errors += 1;
            }
            Outcome::ClientFailure => summary.client_failures += 1,
            Outcome::InputError => summary.input_errors += 1,
        }
    }
    out.flush()?;
    Ok(summary)
}
