//! Shared pre-norm transformer building block.
//!
//! Used by the agents (causal, with optional non-causal prefix memory in the
//! final layer) and by the transformer-tier reconstruction decoders (full
//! attention). The attention mask is expressed as one allowed prefix length
//! per query row, which covers both cases.

use crate::error::Result;
use crate::tensor::{Parameter, RngStream, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Attention rows visible to each local query position under causal masking
/// with `prefix` non-causal memory rows in front.
pub(crate) fn causal_allowed(prefix: usize, local: usize) -> Vec<usize> {
    (0..local).map(|t| prefix + t + 1).collect()
}

/// Free access to all rows (decoder-style full attention).
pub(crate) fn full_allowed(total: usize, queries: usize) -> Vec<usize> {
    vec![total; queries]
}

pub(crate) struct TransformerLayer {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub n_heads: usize,
}

pub(crate) struct LayerOutput {
    pub hidden: Tensor,
    /// Projected keys over the local rows only (before any prefix concat).
    pub k_local: Tensor,
    pub v_local: Tensor,
}

fn pick(p: &Parameter, frozen: bool) -> Tensor {
    if frozen {
        p.frozen()
    } else {
        p.tensor().clone()
    }
}

impl TransformerLayer {
    pub fn new(prefix: &str, d_model: usize, d_ff: usize, n_heads: usize, rng: &mut RngStream) -> Self {
        let w = |name: &str, r, c, rng: &mut RngStream| Parameter::randn(format!("{prefix}.{name}"), r, c, 0.02, rng);
        TransformerLayer {
            wq: w("wq", d_model, d_model, rng),
            wk: w("wk", d_model, d_model, rng),
            wv: w("wv", d_model, d_model, rng),
            wo: w("wo", d_model, d_model, rng),
            w1: w("w1", d_model, d_ff, rng),
            b1: Parameter::zeros(format!("{prefix}.b1"), 1, d_ff),
            w2: w("w2", d_ff, d_model, rng),
            b2: Parameter::zeros(format!("{prefix}.b2"), 1, d_model),
            n_heads,
        }
    }

    /// One block: `x + attn(LN(x))` then `x + mlp(LN(x))`.
    ///
    /// `prefix_kv` rows are prepended to this layer's projected keys/values
    /// as position-free memory; `allowed[t]` bounds the attention window of
    /// local row `t` over `prefix + local` rows.
    pub fn forward(
        &self,
        x: &Tensor,
        prefix_kv: Option<(&Tensor, &Tensor)>,
        allowed: &[usize],
        frozen: bool,
    ) -> Result<LayerOutput> {
        let d_model = x.cols();
        let dh = d_model / self.n_heads;
        let normed = x.layer_norm(LN_EPS)?;
        let q = normed.matmul(&pick(&self.wq, frozen))?;
        let k = normed.matmul(&pick(&self.wk, frozen))?;
        let v = normed.matmul(&pick(&self.wv, frozen))?;

        let (k_mem, v_mem) = match prefix_kv {
            Some((pk, pv)) => (
                Tensor::concat_rows(&[pk.clone(), k.clone()])?,
                Tensor::concat_rows(&[pv.clone(), v.clone()])?,
            ),
            None => (k.clone(), v.clone()),
        };

        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k_mem.slice_cols(h * dh, dh)?;
            let vh = v_mem.slice_cols(h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose())?.scale(scale);
            let attn = scores.masked_softmax(allowed)?;
            heads.push(attn.matmul(&vh)?);
        }
        let merged = Tensor::concat_cols(&heads)?.matmul(&pick(&self.wo, frozen))?;
        let x = x.add(&merged)?;

        let ff = x
            .layer_norm(LN_EPS)?
            .matmul(&pick(&self.w1, frozen))?
            .add_row(&pick(&self.b1, frozen))?
            .gelu()
            .matmul(&pick(&self.w2, frozen))?
            .add_row(&pick(&self.b2, frozen))?;
        let hidden = x.add(&ff)?;

        Ok(LayerOutput { hidden, k_local: k, v_local: v })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allowed_lengths() {
        assert_eq!(causal_allowed(0, 3), vec![1, 2, 3]);
        assert_eq!(causal_allowed(3, 4), vec![4, 5, 6, 7]);
        assert_eq!(full_allowed(7, 2), vec![7, 7]);
    }

    #[test]
    fn forward_shapes_and_kv_export() {
        let mut rng = RngStream::new(9);
        let layer = TransformerLayer::new("t", 8, 16, 2, &mut rng);
        let x = Tensor::randn(5, 8, 1.0, &mut rng);
        let out = layer.forward(&x, None, &causal_allowed(0, 5), true).unwrap();
        assert_eq!(out.hidden.shape(), (5, 8));
        assert_eq!(out.k_local.shape(), (5, 8));
        assert_eq!(out.v_local.shape(), (5, 8));

        let pk = Tensor::randn(3, 8, 1.0, &mut rng);
        let pv = Tensor::randn(3, 8, 1.0, &mut rng);
        let out2 = layer
            .forward(&x, Some((&pk, &pv)), &causal_allowed(3, 5), true)
            .unwrap();
        assert_eq!(out2.hidden.shape(), (5, 8));
        // prefix changes the attention result
        assert_ne!(out.hidden.values(), out2.hidden.values());
    }

    #[test]
    fn frozen_forward_records_nothing() {
        let mut rng = RngStream::new(10);
        let layer = TransformerLayer::new("t", 8, 16, 2, &mut rng);
        let x = Tensor::randn(4, 8, 1.0, &mut rng);
        let out = layer.forward(&x, None, &causal_allowed(0, 4), true).unwrap();
        assert!(!out.hidden.is_traced());
        let traced = layer.forward(&x, None, &causal_allowed(0, 4), false).unwrap();
        assert!(traced.hidden.is_traced());
    }
}
