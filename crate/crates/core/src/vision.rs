//! Image input and the patch-based transformer encoder.
//!
//! The encoder is a small pre-norm ViT: a linear patch embedding, one learned
//! positional embedding per grid cell, then `depth` blocks of full
//! self-attention and an MLP, each with a residual connection. There is no
//! final normalization, so a zero-depth encoder is exactly the embedding.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attend, NORM_EPS};
use crate::params::{normal_tensor, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

/// Patch size of the paper-scale configurations.
pub const DEFAULT_PATCH: usize = 14;

/// A `C × H × W` image with values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<Scalar>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<Scalar>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ImageFormat("extents must be >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::ImageFormat(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ImageFormat(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> Scalar {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Parses the `CGIMG C H W` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        if tokens.next() != Some("CGIMG") {
            return Err(Error::ImageFormat("missing CGIMG header".into()));
        }
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::ImageFormat("bad header extents".into()))
        };
        let (c, h, w) = (dim()?, dim()?, dim()?);
        let data = tokens
            .map(|t| {
                t.parse::<Scalar>()
                    .map_err(|_| Error::ImageFormat(format!("bad value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(c, h, w, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical `CGIMG` text: header line, then one line per image row.
    pub fn to_text(&self) -> String {
        let mut s = format!("CGIMG {} {} {}\n", self.channels, self.height, self.width);
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = ((2 * y + 1) * self.height) / (2 * height);
                for x in 0..width {
                    let sx = ((2 * x + 1) * self.width) / (2 * width);
                    data.push(self.at(c, sy, sx));
                }
            }
        }
        Self::new(self.channels, height, width, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Largest supported patch grid; positional embeddings cover this grid.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.channels >= 1
            && self.patch_size >= 1
            && self.heads >= 1
            && self.embed_dim % self.heads == 0
            && self.mlp_hidden >= 1
            && self.grid_h >= 1
            && self.grid_w >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("vit config {self:?}")))
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn image_width(&self) -> usize {
        self.grid_w * self.patch_size
    }

    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let d = self.embed_dim;
        let std = 0.02;
        store.insert("vit.patch.w", normal_tensor(rng, &[self.patch_dim(), d], (1.0 / self.patch_dim() as Scalar).sqrt()));
        store.insert("vit.patch.b", Tensor::zeros(&[d]));
        store.insert("vit.pos", normal_tensor(rng, &[self.grid_h * self.grid_w, d], std));
        for l in 0..self.depth {
            store.insert(format!("vit.{l}.norm1"), Tensor::ones(&[d]));
            store.insert(format!("vit.{l}.norm2"), Tensor::ones(&[d]));
            for p in ["q", "k", "v", "o"] {
                store.insert(format!("vit.{l}.attn.{p}.w"), normal_tensor(rng, &[d, d], (1.0 / d as Scalar).sqrt()));
                // softmax cancels a key bias, so it would never train
                if p != "k" {
                    store.insert(format!("vit.{l}.attn.{p}.b"), Tensor::zeros(&[d]));
                }
            }
            store.insert(format!("vit.{l}.mlp.w1"), normal_tensor(rng, &[d, self.mlp_hidden], (1.0 / d as Scalar).sqrt()));
            store.insert(format!("vit.{l}.mlp.b1"), Tensor::zeros(&[self.mlp_hidden]));
            store.insert(
                format!("vit.{l}.mlp.w2"),
                normal_tensor(rng, &[self.mlp_hidden, d], (1.0 / self.mlp_hidden as Scalar).sqrt()),
            );
            store.insert(format!("vit.{l}.mlp.b2"), Tensor::zeros(&[d]));
        }
    }
}

/// Number of patch tokens for a square `resolution` image.
pub fn token_count(resolution: usize, patch_size: usize) -> Result<usize> {
    if patch_size == 0 || resolution % patch_size != 0 {
        return Err(Error::IndivisibleImage {
            h: resolution,
            w: resolution,
            patch: patch_size,
        });
    }
    let side = resolution / patch_size;
    Ok(side * side)
}

/// Splits an image into `[n_patches, patch_size²·C]`: patches in row-major
/// grid order, each flattened channel-major then row-major.
pub fn patchify(img: &ImageGrid, patch_size: usize) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::IndivisibleImage { h, w, patch: patch_size });
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * img.channels();
    let mut data = Vec::with_capacity(gh * gw * dim);
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..img.channels() {
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        data.push(img.at(c, pr * patch_size + y, pc * patch_size + x));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], data)
}

/// Output of [`vit_forward_traced`].
pub struct VitOutput {
    pub features: Var,
    /// Attention weights per block and head, each `[n, n]`.
    pub attention: Vec<Var>,
}

/// Encodes `patches: [grid_h·grid_w, patch_dim]` laid out on a
/// `grid_h × grid_w` grid, which must fit in the configured grid.
pub fn vit_forward(g: &mut Graph, patches: Var, cfg: &VitConfig, grid: (usize, usize)) -> Result<Var> {
    Ok(vit_forward_traced(g, patches, cfg, grid, false)?.features)
}

pub fn vit_forward_traced(
    g: &mut Graph,
    patches: Var,
    cfg: &VitConfig,
    (gh, gw): (usize, usize),
    trace: bool,
) -> Result<VitOutput> {
    let (n, pd) = g.value(patches).dims2()?;
    if n != gh * gw || pd != cfg.patch_dim() || gh > cfg.grid_h || gw > cfg.grid_w {
        return Err(Error::ShapeMismatch(format!(
            "{n} patches of width {pd} for a {gh}x{gw} grid (config {}x{}, width {})",
            cfg.grid_h,
            cfg.grid_w,
            cfg.patch_dim()
        )));
    }
    let w = g.p("vit.patch.w")?;
    let b = g.p("vit.patch.b")?;
    let mut x = g.linear(patches, w, Some(b))?;
    let pos_table = g.p("vit.pos")?;
    let ids: Vec<usize> = (0..gh)
        .flat_map(|r| (0..gw).map(move |c| r * cfg.grid_w + c))
        .collect();
    let pos = g.gather_rows(pos_table, &ids)?;
    x = g.add(x, pos)?;

    let mut attention = Vec::new();
    for l in 0..cfg.depth {
        let norm1 = g.p(&format!("vit.{l}.norm1"))?;
        let h = g.layer_norm(x, norm1, NORM_EPS)?;
        let proj = |g: &mut Graph, name: &str, input: Var| -> Result<Var> {
            let w = g.p(&format!("vit.{l}.attn.{name}.w"))?;
            let b = if name == "k" {
                None
            } else {
                Some(g.p(&format!("vit.{l}.attn.{name}.b"))?)
            };
            g.linear(input, w, b)
        };
        let q = proj(g, "q", h)?;
        let k = proj(g, "k", h)?;
        let v = proj(g, "v", h)?;
        let att = attend(g, q, k, v, cfg.heads, None, trace.then_some(&mut attention))?;
        let o = proj(g, "o", att)?;
        x = g.add(x, o)?;

        let norm2 = g.p(&format!("vit.{l}.norm2"))?;
        let h = g.layer_norm(x, norm2, NORM_EPS)?;
        let w1 = g.p(&format!("vit.{l}.mlp.w1"))?;
        let b1 = g.p(&format!("vit.{l}.mlp.b1"))?;
        let w2 = g.p(&format!("vit.{l}.mlp.w2"))?;
        let b2 = g.p(&format!("vit.{l}.mlp.b2"))?;
        let h = g.linear(h, w1, Some(b1))?;
        let h = g.swish(h);
        let h = g.linear(h, w2, Some(b2))?;
        x = g.add(x, h)?;
    }
    Ok(VitOutput {
        features: x,
        attention,
    })
}
