//! Vision-to-language adapter: a 2×2 stride-2 convolution over the encoder's
//! feature grid, which cuts the sequence to a quarter, followed by a biased
//! SwiGLU projection into the decoder width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal_tensor, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl AdapterConfig {
    /// Hidden width defaults to four times the output width.
    pub fn new(in_dim: usize, out_dim: usize, grid_h: usize, grid_w: usize) -> Self {
        Self {
            in_dim,
            hidden_dim: 4 * out_dim,
            out_dim,
            grid_h,
            grid_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h % 2 != 0 || self.grid_w % 2 != 0 {
            return Err(Error::OddGrid {
                h: self.grid_h,
                w: self.grid_w,
            });
        }
        if [self.in_dim, self.hidden_dim, self.out_dim, self.grid_h, self.grid_w].contains(&0) {
            return Err(Error::InvalidConfig(format!("adapter config {self:?}")));
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        init_downsample(rng, store, "adapter.conv", self.in_dim);
        let (i, h, o) = (self.in_dim, self.hidden_dim, self.out_dim);
        store.insert("adapter.swiglu.W", normal_tensor(rng, &[i, h], (1.0 / i as Scalar).sqrt()));
        store.insert("adapter.swiglu.V", normal_tensor(rng, &[i, h], (1.0 / i as Scalar).sqrt()));
        store.insert("adapter.swiglu.W2", normal_tensor(rng, &[h, o], (1.0 / h as Scalar).sqrt()));
        store.insert("adapter.swiglu.bW", Tensor::zeros(&[h]));
        store.insert("adapter.swiglu.bV", Tensor::zeros(&[h]));
        store.insert("adapter.swiglu.b2", Tensor::zeros(&[o]));
    }
}

/// Conv weights `{prefix}.w: [c, c, 2, 2]` and bias `{prefix}.b: [c]`.
pub(crate) fn init_downsample(rng: &mut impl Rng, store: &mut ParamStore, prefix: &str, channels: usize) {
    let std = (1.0 / (4 * channels) as Scalar).sqrt();
    store.insert(format!("{prefix}.w"), normal_tensor(rng, &[channels, channels, 2, 2], std));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[channels]));
}

/// Sequence length after the adapter.
pub fn adapter_output_len(grid_h: usize, grid_w: usize) -> Result<usize> {
    if grid_h % 2 != 0 || grid_w % 2 != 0 {
        return Err(Error::OddGrid { h: grid_h, w: grid_w });
    }
    Ok((grid_h / 2) * (grid_w / 2))
}

/// Applies the `{prefix}` 2×2 stride-2 convolution to a `[gh·gw, c]`
/// feature sequence on a `gh × gw` grid, returning `[(gh/2)·(gw/2), c]`.
pub fn downsample(g: &mut Graph, features: Var, prefix: &str, (gh, gw): (usize, usize)) -> Result<Var> {
    let (n, c) = g.value(features).dims2()?;
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(Error::OddGrid { h: gh, w: gw });
    }
    if n != gh * gw {
        return Err(Error::ShapeMismatch(format!("{n} tokens on a {gh}x{gw} grid")));
    }
    let w = g.p(&format!("{prefix}.w"))?;
    let b = g.p(&format!("{prefix}.b"))?;
    let channels_first = g.transpose(features)?;
    let grid = g.reshape(channels_first, &[c, gh, gw])?;
    let pooled = g.conv2x2_s2(grid, w, b)?;
    let flat = g.reshape(pooled, &[c, n / 4])?;
    g.transpose(flat)
}

/// `(swish(x·W + bW) ⊙ (x·V + bV))·W2 + b2` with the adapter's weights.
pub fn adapter_swiglu(g: &mut Graph, x: Var) -> Result<Var> {
    let w = g.p("adapter.swiglu.W")?;
    let v = g.p("adapter.swiglu.V")?;
    let w2 = g.p("adapter.swiglu.W2")?;
    let bw = g.p("adapter.swiglu.bW")?;
    let bv = g.p("adapter.swiglu.bV")?;
    let b2 = g.p("adapter.swiglu.b2")?;
    let gate = g.linear(x, w, Some(bw))?;
    let gate = g.swish(gate);
    let up = g.linear(x, v, Some(bv))?;
    let h = g.mul(gate, up)?;
    g.linear(h, w2, Some(b2))
}

/// Maps `[grid_h·grid_w, in_dim]` encoder features to
/// `[(grid_h/2)·(grid_w/2), out_dim]` decoder embeddings.
pub fn adapt(g: &mut Graph, features: Var, cfg: &AdapterConfig, grid: (usize, usize)) -> Result<Var> {
    let (_, c) = g.value(features).dims2()?;
    if c != cfg.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "adapter expects width {}, got {c}",
            cfg.in_dim
        )));
    }
    let pooled = downsample(g, features, "adapter.conv", grid)?;
    adapter_swiglu(g, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_lengths() {
        assert_eq!(adapter_output_len(96, 96).unwrap(), 2304);
        assert_eq!(adapter_output_len(80, 80).unwrap(), 1600);
        assert_eq!(adapter_output_len(2, 2).unwrap(), 1);
        assert!(matches!(adapter_output_len(3, 4), Err(Error::OddGrid { h: 3, w: 4 })));
    }

    #[test]
    fn single_window_and_odd_grid() {
        let cfg = AdapterConfig::new(3, 5, 2, 2);
        let mut store = ParamStore::new();
        cfg.init(&mut ChaCha8Rng::seed_from_u64(0), &mut store);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store);
        let x = g.constant(Tensor::full(&[4, 3], 0.5));
        let y = adapt(&mut g, x, &cfg, (2, 2)).unwrap();
        assert_eq!(g.shape(y), &[1, 5]);

        let x = g.constant(Tensor::full(&[6, 3], 0.5));
        assert!(matches!(adapt(&mut g, x, &cfg, (3, 2)), Err(Error::OddGrid { .. })));
        assert!(matches!(adapt(&mut g, x, &cfg, (2, 2)), Err(Error::ShapeMismatch(_))));
        assert!(AdapterConfig::new(3, 5, 3, 2).validate().is_err());
    }
}
