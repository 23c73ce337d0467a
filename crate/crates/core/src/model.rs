//! The assembled vision-language model: encoder, adapter, optional video
//! convolution and decoder, with checkpoint I/O and greedy decoding.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{adapt, init_downsample, AdapterConfig};
use crate::checkpoint::TensorMap;
use crate::decoder::{decoder_forward, DecoderConfig, MixedSequence, SequenceBuilder};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::ByteTokenizer;
use crate::video::{encode_video, FrameBundle, VideoConfig, EXTRA_CONV};
use crate::vision::{patchify, vit_forward, ImageGrid, VitConfig};

/// Name of the tensor holding the serialized [`ModelConfig`].
pub const META_CONFIG: &str = "meta.config";
const META_VERSION: Scalar = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: VitConfig,
    /// SwiGLU hidden width of the adapter.
    pub adapter_hidden: usize,
    pub decoder: DecoderConfig,
    pub video: VideoConfig,
}

impl ModelConfig {
    /// The small model used for tests and demos: 16×16 RGB images in 4×4
    /// patches, 64-wide decoder of depth 2 over the byte vocabulary.
    pub fn toy(visual_expert: bool) -> Self {
        Self {
            vit: VitConfig {
                channels: 3,
                patch_size: 4,
                embed_dim: 32,
                depth: 1,
                heads: 2,
                mlp_hidden: 64,
                grid_h: 4,
                grid_w: 4,
            },
            adapter_hidden: 256,
            decoder: DecoderConfig {
                visual_expert,
                embed_dim: 64,
                depth: 2,
                heads: 4,
                vocab_size: ByteTokenizer::VOCAB_SIZE,
                ffn_hidden: 128,
                vision_bidirectional: false,
            },
            video: VideoConfig::default(),
        }
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            in_dim: self.vit.embed_dim,
            hidden_dim: self.adapter_hidden,
            out_dim: self.decoder.embed_dim,
            grid_h: self.vit.grid_h,
            grid_w: self.vit.grid_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.adapter().validate()?;
        self.decoder.validate()?;
        if self.video.n_frames == 0 {
            return Err(Error::InvalidConfig("n_frames must be >= 1".into()));
        }
        Ok(())
    }

    fn to_meta(self) -> Tensor {
        let v = &self.vit;
        let d = &self.decoder;
        let fields = [
            META_VERSION,
            v.channels as Scalar,
            v.patch_size as Scalar,
            v.embed_dim as Scalar,
            v.depth as Scalar,
            v.heads as Scalar,
            v.mlp_hidden as Scalar,
            v.grid_h as Scalar,
            v.grid_w as Scalar,
            self.adapter_hidden as Scalar,
            d.embed_dim as Scalar,
            d.depth as Scalar,
            d.heads as Scalar,
            d.vocab_size as Scalar,
            d.ffn_hidden as Scalar,
            d.visual_expert as u8 as Scalar,
            d.vision_bidirectional as u8 as Scalar,
            self.video.n_frames as Scalar,
            self.video.extra_conv as u8 as Scalar,
        ];
        Tensor::new(vec![fields.len()], fields.to_vec()).expect("meta shape")
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let f = t.data();
        if f.len() != 19 || f[0] != META_VERSION {
            return Err(Error::Checkpoint("unrecognized meta.config".into()));
        }
        let u = |i: usize| f[i] as usize;
        let cfg = Self {
            vit: VitConfig {
                channels: u(1),
                patch_size: u(2),
                embed_dim: u(3),
                depth: u(4),
                heads: u(5),
                mlp_hidden: u(6),
                grid_h: u(7),
                grid_w: u(8),
            },
            adapter_hidden: u(9),
            decoder: DecoderConfig {
                embed_dim: u(10),
                depth: u(11),
                heads: u(12),
                vocab_size: u(13),
                ffn_hidden: u(14),
                visual_expert: f[15] != 0.0,
                vision_bidirectional: f[16] != 0.0,
            },
            video: VideoConfig {
                n_frames: u(17),
                extra_conv: f[18] != 0.0,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Visual input attached to a prompt.
#[derive(Debug, Clone, Default)]
pub enum Media {
    #[default]
    None,
    Image(ImageGrid),
    Video(FrameBundle),
}

/// A built training/inference sequence and the positions of its answer.
pub struct BuiltSequence {
    pub seq: MixedSequence,
    pub answer_span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vlm {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Vlm {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        cfg.vit.init(&mut rng, &mut params);
        cfg.adapter().init(&mut rng, &mut params);
        if cfg.video.extra_conv {
            init_downsample(&mut rng, &mut params, EXTRA_CONV, cfg.vit.embed_dim);
        }
        cfg.decoder.init(&mut rng, &mut params);
        Ok(Self { cfg, params })
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut map = self.params.as_map().clone();
        map.insert(META_CONFIG.to_string(), self.cfg.to_meta());
        map
    }

    pub fn from_tensors(mut map: TensorMap) -> Result<Self> {
        let meta = map
            .remove(META_CONFIG)
            .ok_or_else(|| Error::Checkpoint(format!("missing {META_CONFIG}")))?;
        let cfg = ModelConfig::from_meta(&meta)?;
        let has_vis = map.keys().any(|k| k.ends_with(".vis"));
        if has_vis != cfg.decoder.visual_expert {
            return Err(Error::Checkpoint("visual-expert tensors disagree with config".into()));
        }
        Ok(Self {
            cfg,
            params: ParamStore::from_map(map),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::checkpoint::save(&self.to_tensors(), path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_tensors(crate::checkpoint::load(path)?)
    }

    /// Decoder-width vision tokens for one image, resampled to `resolution`
    /// (square) when given.
    pub fn encode_image(&self, g: &mut Graph, img: &ImageGrid, resolution: Option<usize>) -> Result<Var> {
        let img = match resolution {
            Some(r) => img.resize(r, r)?,
            None => img.clone(),
        };
        if img.channels() != self.cfg.vit.channels {
            return Err(Error::ShapeMismatch(format!(
                "image has {} channels, model expects {}",
                img.channels(),
                self.cfg.vit.channels
            )));
        }
        let p = self.cfg.vit.patch_size;
        let grid = (img.height() / p, img.width() / p);
        let patches = g.constant(patchify(&img, p)?);
        let features = vit_forward(g, patches, &self.cfg.vit, grid)?;
        adapt(g, features, &self.cfg.adapter(), grid)
    }

    /// `[BOS] prompt, media tokens, answer` as a decoder sequence.
    pub fn build_sequence(
        &self,
        g: &mut Graph,
        prompt: &str,
        media: &Media,
        answer: &[u32],
        resolution: Option<usize>,
    ) -> Result<BuiltSequence> {
        let tok = ByteTokenizer;
        let mut prompt_ids = vec![ByteTokenizer::BOS];
        prompt_ids.extend(tok.encode(prompt));
        let mut b = SequenceBuilder::new();
        b.push_text(g, &prompt_ids)?;
        match media {
            Media::None => {}
            Media::Image(img) => {
                let v = self.encode_image(g, img, resolution)?;
                b.push_vision(g, v, self.cfg.decoder.embed_dim)?;
            }
            Media::Video(bundle) => {
                let frag = encode_video(
                    g,
                    bundle,
                    &self.cfg.vit,
                    &self.cfg.adapter(),
                    self.cfg.video.extra_conv,
                    &tok,
                )?;
                b.extend(frag);
            }
        }
        let start = b.len();
        b.push_text(g, answer)?;
        let end = b.len();
        Ok(BuiltSequence {
            seq: b.build(g)?,
            answer_span: start..end,
        })
    }

    /// Greedy decoding until EOS or `max_tokens`.
    pub fn generate(&self, prompt: &str, media: &Media, max_tokens: usize) -> Result<String> {
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_tokens {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &self.params);
            let built = self.build_sequence(&mut g, prompt, media, &out, None)?;
            let logits = decoder_forward(&mut g, &built.seq, &self.cfg.decoder)?;
            let lv = g.value(logits);
            let last = lv.row(built.seq.len() - 1);
            // first maximum wins, so ties resolve to the lowest id
            let next = last
                .iter()
                .enumerate()
                .fold((0, Scalar::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0 as u32;
            if next == ByteTokenizer::EOS {
                break;
            }
            out.push(next);
        }
        Ok(ByteTokenizer.decode(&out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_roundtrip() {
        for ve in [true, false] {
            let cfg = ModelConfig::toy(ve);
            assert_eq!(ModelConfig::from_meta(&cfg.to_meta()).unwrap(), cfg);
        }
    }

    #[test]
    fn image_becomes_quarter_grid_tokens() {
        let m = Vlm::new(ModelConfig::toy(true), 3).unwrap();
        let img = ImageGrid::new(3, 16, 16, vec![0.25; 768]).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &m.params);
        let v = m.encode_image(&mut g, &img, None).unwrap();
        assert_eq!(g.shape(v), &[4, 64]);
        let built = m
            .build_sequence(&mut g, "hi", &Media::Image(img), &[104, 105], None)
            .unwrap();
        assert_eq!(built.seq.len(), 3 + 4 + 2);
        assert_eq!(built.answer_span, 7..9);
    }

    #[test]
    fn generation_is_reproducible() {
        let m = Vlm::new(ModelConfig::toy(false), 9).unwrap();
        let a = m.generate("abc", &Media::None, 5).unwrap();
        let b = m.generate("abc", &Media::None, 5).unwrap();
        assert_eq!(a, b);
    }
}
