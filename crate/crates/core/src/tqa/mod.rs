//! Temporal-grounding QA data generation.
//!
//! Frames are captioned by a vision model, a language model decides from the
//! captions whether the video changes scene enough to be worth asking about,
//! and the same model then writes one time-anchored question/answer pair.
//! The three prompt templates are embedded byte-for-byte.

pub mod client;
pub mod pipeline;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::video::FrameBundle;
use client::{complete_with_retry, ModelClient, Request, RetryPolicy};

pub const CAPTION_PROMPT: &str = include_str!("prompts/caption.txt");
pub const SCENE_FILTER_TEMPLATE: &str = include_str!("prompts/scene_filter.txt");
pub const QA_TEMPLATE: &str = include_str!("prompts/qa_generation.txt");

/// Placeholder replaced by the rendered caption map.
pub const CAPTIONS_VAR: &str = "{images_caption}";

/// Literal response meaning no QA pair could be generated.
pub const NO_QA_SENTINEL: &str = "None";

/// Captions keyed by whole second, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CaptionMap(BTreeMap<u64, String>);

impl CaptionMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, second: u64, caption: String) -> Result<()> {
        if caption.trim().is_empty() {
            return Err(Error::InvalidRecord(format!("empty caption at {second}s")));
        }
        if self.0.contains_key(&second) {
            return Err(Error::DuplicateSecond {
                first: second as f64,
                second: second as f64,
            });
        }
        self.0.insert(second, caption);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u64, &String)> {
        self.0.iter()
    }

    /// `{"0": "caption", "3": "caption"}`: quoted decimal keys in ascending
    /// order, JSON-quoted captions, `", "` between entries.
    pub fn render(&self) -> String {
        let entries: Vec<String> = self
            .0
            .iter()
            .map(|(k, v)| format!("\"{k}\": {}", serde_json::to_string(v).expect("string serializes")))
            .collect();
        format!("{{{}}}", entries.join(", "))
    }
}

fn substitute(template: &str, captions: &CaptionMap) -> Result<String> {
    if captions.is_empty() {
        return Err(Error::EmptyCaptions);
    }
    Ok(template.replacen(CAPTIONS_VAR, &captions.render(), 1))
}

pub fn render_scene_filter_prompt(captions: &CaptionMap) -> Result<String> {
    substitute(SCENE_FILTER_TEMPLATE, captions)
}

pub fn render_qa_prompt(captions: &CaptionMap) -> Result<String> {
    substitute(QA_TEMPLATE, captions)
}

/// Captions every frame with the caption prompt, keyed by the rounded second.
pub fn caption_frames(bundle: &FrameBundle, client: &dyn ModelClient, retry: &RetryPolicy) -> Result<CaptionMap> {
    let mut map = CaptionMap::new();
    let mut seen: BTreeMap<u64, f64> = BTreeMap::new();
    for (frame, &t) in bundle.frames().iter().zip(bundle.timestamps()) {
        let key = t.round() as u64;
        if let Some(&first) = seen.get(&key) {
            return Err(Error::DuplicateSecond { first, second: t });
        }
        seen.insert(key, t);
        let caption = complete_with_retry(client, &Request::with_image(CAPTION_PROMPT, frame), retry)?;
        map.insert(key, caption.trim().to_string())?;
    }
    Ok(map)
}

/// Reads a yes/no verdict, tolerating case, surrounding whitespace and
/// trailing punctuation.
pub fn parse_filter_response(response: &str) -> Result<bool> {
    let norm = response
        .trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim()
        .to_lowercase();
    match norm.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(Error::AmbiguousFilterResponse(response.to_string())),
    }
}

/// Asks whether the captions show a significant scene change.
pub fn filter_scene(captions: &CaptionMap, client: &dyn ModelClient, retry: &RetryPolicy) -> Result<bool> {
    let prompt = render_scene_filter_prompt(captions)?;
    parse_filter_response(&complete_with_retry(client, &Request::text(&prompt), retry)?)
}

/// A generated question/answer pair for one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TqaRecord {
    pub video: String,
    pub question: String,
    pub answer: String,
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // drop an info string such as ```json
    let rest = rest.split_once('\n').map_or("", |(_, body)| body);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Parses a QA response: `None` for the no-pair sentinel, otherwise a JSON
/// object with exactly the non-empty string keys `"Human"` and `"Bot"`.
pub fn parse_qa_response(text: &str) -> Result<Option<(String, String)>> {
    let body = strip_fences(text);
    if body == NO_QA_SENTINEL {
        return Ok(None);
    }
    let value: Value = serde_json::from_str(body).map_err(|e| Error::ParseError(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(Error::ParseError("response is not a JSON object".into()));
    };
    if obj.len() != 2 {
        return Err(Error::ParseError(format!("expected keys Human and Bot, got {:?}", obj.keys().collect::<Vec<_>>())));
    }
    let field = |k: &str| -> Result<String> {
        match obj.get(k) {
            Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
            Some(_) => Err(Error::ParseError(format!("{k} must be a non-empty string"))),
            None => Err(Error::ParseError(format!("missing key {k}"))),
        }
    };
    Ok(Some((field("Human")?, field("Bot")?)))
}

/// Generates a QA pair from the captions. `Ok(None)` when the model declines.
pub fn generate_qa(captions: &CaptionMap, client: &dyn ModelClient, retry: &RetryPolicy) -> Result<Option<(String, String)>> {
    let prompt = render_qa_prompt(captions)?;
    parse_qa_response(&complete_with_retry(client, &Request::text(&prompt), retry)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(k: u64, v: &str) -> CaptionMap {
        let mut m = CaptionMap::new();
        m.insert(k, v.to_string()).unwrap();
        m
    }

    #[test]
    fn rendering() {
        assert_eq!(one(3, "a pool").render(), r#"{"3": "a pool"}"#);
        let mut m = one(10, "b");
        m.insert(2, "say \"hi\"".into()).unwrap();
        assert_eq!(m.render(), r#"{"2": "say \"hi\"", "10": "b"}"#);
        assert!(matches!(render_qa_prompt(&CaptionMap::new()), Err(Error::EmptyCaptions)));
        assert!(matches!(render_scene_filter_prompt(&CaptionMap::new()), Err(Error::EmptyCaptions)));
    }

    #[test]
    fn filter_normalization() {
        assert!(parse_filter_response("Yes").unwrap());
        assert!(parse_filter_response("  YES!\n").unwrap());
        assert!(!parse_filter_response("no.").unwrap());
        assert!(matches!(
            parse_filter_response("maybe"),
            Err(Error::AmbiguousFilterResponse(_))
        ));
        assert!(parse_filter_response("Yes, clearly").is_err());
    }

    #[test]
    fn qa_parsing() {
        let ex = r#"{"Human": "At what second does the girl appear?", "Bot": "The girl appears at the 3rd second in the video."}"#;
        assert_eq!(
            parse_qa_response(ex).unwrap(),
            Some((
                "At what second does the girl appear?".to_string(),
                "The girl appears at the 3rd second in the video.".to_string()
            ))
        );
        assert_eq!(parse_qa_response(" None \n").unwrap(), None);
        assert_eq!(parse_qa_response(&format!("```json\n{ex}\n```")).unwrap().unwrap().0.len(), 36);
        assert!(matches!(parse_qa_response(r#"{"Q": "a", "A": "b"}"#), Err(Error::ParseError(_))));
        assert!(parse_qa_response(r#"{'Human': 'a', 'Bot': 'b'}"#).is_err());
        assert!(parse_qa_response(r#"{"Human": "a", "Bot": ""}"#).is_err());
        assert!(parse_qa_response(r#"{"Human": "a", "Bot": "b", "x": "c"}"#).is_err());
        assert!(parse_qa_response("none").is_err());
    }

    #[test]
    fn templates_hold_one_placeholder() {
        assert_eq!(SCENE_FILTER_TEMPLATE.matches(CAPTIONS_VAR).count(), 1);
        assert_eq!(QA_TEMPLATE.matches(CAPTIONS_VAR).count(), 1);
        assert_eq!(CAPTION_PROMPT, "Give out the detailed description of this image.");
    }
}
