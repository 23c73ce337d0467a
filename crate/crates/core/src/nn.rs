//! Layer building blocks shared by the encoder and decoder.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const NORM_EPS: Scalar = 1e-5;

/// Multi-head scaled dot-product attention over `q, k, v: [n, heads·hd]`.
///
/// `allowed` is an `n × n` row-major mask of attendable (query, key) pairs;
/// `None` attends everywhere. When `trace` is given, each head's attention
/// weights are pushed onto it.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    allowed: Option<&[bool]>,
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let (n, d) = tape.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::ShapeMismatch(format!("{d} columns over {heads} heads")));
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as Scalar).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let kh = tape.slice_cols(k, h * hd, hd)?;
        let vh = tape.slice_cols(v, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = match allowed {
            Some(mask) => tape.masked_softmax(scores, mask)?,
            None => tape.softmax(scores, 1)?,
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(weights);
        }
        outs.push(tape.matmul(weights, vh)?);
    }
    debug_assert_eq!(tape.shape(outs[0])[0], n);
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Lower-triangular mask: position `i` sees positions `j <= i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n <= idx / n).collect()
}
