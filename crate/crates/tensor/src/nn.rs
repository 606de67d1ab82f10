//! Transformer building blocks composed from tape primitives.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Q/K/V/output projections of one attention layer. Heads are contiguous column blocks.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttentionVars,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub mlp: MlpVars,
}

/// Scaled dot-product self-attention over `tokens[n, d]`, split into `heads` heads.
/// Residual connections are left to the caller.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    tokens: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let [_, d] = shape[..] else {
        return Err(TensorError::Config(format!(
            "attention expects [n, d] tokens, got {:?}",
            shape
        )));
    };
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Config(format!(
            "model width {} is not divisible by {} heads",
            d, heads
        )));
    }
    let dh = d / heads;
    let q = g.linear(tokens, p.wq, Some(p.bq))?;
    let k = g.linear(tokens, p.wk, Some(p.bk))?;
    let v = g.linear(tokens, p.wv, Some(p.bv))?;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.col_slice(q, h * dh, dh)?;
        let kh = g.col_slice(k, h * dh, dh)?;
        let vh = g.col_slice(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.linear(merged, p.wo, Some(p.bo))
}

pub fn mlp<T: Element>(g: &mut Graph<T>, x: Var, p: &MlpVars) -> Result<Var> {
    let h = g.linear(x, p.w1, Some(p.b1))?;
    let h = g.gelu(h);
    g.linear(h, p.w2, Some(p.b2))
}

/// Pre-norm encoder block: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
pub fn encoder_block<T: Element>(g: &mut Graph<T>, x: Var, p: &BlockVars, heads: usize) -> Result<Var> {
    let h = g.layer_norm(x, p.ln1_g, p.ln1_b, LAYER_NORM_EPS)?;
    let h = multi_head_attention(g, h, &p.attn, heads)?;
    let x = g.add(x, h)?;
    let h = g.layer_norm(x, p.ln2_g, p.ln2_b, LAYER_NORM_EPS)?;
    let h = mlp(g, h, &p.mlp)?;
    g.add(x, h)
}
