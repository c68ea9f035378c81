//! Tiny decoder-only transformer agents.
//!
//! An agent encodes its token sequence with causal self-attention and emits
//! the final layer's key/value projections over its own positions as a
//! [`KVCache`] — the representation that gets communicated. Artifacts
//! received from upstream agents are injected at the final layer only, as
//! non-causal prefix memory rows that every local query may attend to.
//! Prefix rows carry no positional offsets and are not re-exported.

use crate::comm::Artifact;
use crate::error::{Error, Result};
use crate::nn::{causal_allowed, TransformerLayer, LN_EPS};
use crate::tensor::{Parameter, RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub d_ff: usize,
}

impl Default for AgentConfig {
    /// Desk-scale defaults: small enough for minutes-scale CPU training,
    /// large enough that leakage through the cache is measurable.
    fn default() -> Self {
        AgentConfig { vocab_size: 32, d_model: 64, n_layers: 2, n_heads: 4, max_seq: 64, d_ff: 128 }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Argument("vocab_size must be at least 4".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Shape(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_seq == 0 || self.d_ff == 0 {
            return Err(Error::Argument("n_layers, max_seq and d_ff must be positive".into()));
        }
        Ok(())
    }

    /// Width of the communicated key matrix (heads concatenated).
    pub fn d_k_total(&self) -> usize {
        self.d_model
    }

    pub fn d_v_total(&self) -> usize {
        self.d_model
    }

    /// Total trainable values for one agent; a pure function of the config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + d * self.d_ff + self.d_ff + self.d_ff * d + d;
        self.vocab_size * d
            + self.max_seq * d
            + self.n_layers * per_layer
            + d * self.vocab_size
            + self.vocab_size
    }
}

/// Final-layer key/value projections over an agent's own token positions.
pub struct KVCache {
    pub k: Tensor,
    pub v: Tensor,
    pub token_count: usize,
    pub producer: usize,
}

pub struct AgentParams {
    pub config: AgentConfig,
    pub id: usize,
    tok_emb: Parameter,
    pos_emb: Parameter,
    layers: Vec<TransformerLayer>,
    head_w: Parameter,
    head_b: Parameter,
}

impl AgentParams {
    pub fn new(id: usize, config: AgentConfig, rng: &mut RngStream) -> Result<AgentParams> {
        config.validate()?;
        let d = config.d_model;
        let prefix = format!("agent{id}");
        let layers = (0..config.n_layers)
            .map(|l| TransformerLayer::new(&format!("{prefix}.layer{l}"), d, config.d_ff, config.n_heads, rng))
            .collect();
        Ok(AgentParams {
            config,
            id,
            tok_emb: Parameter::randn(format!("{prefix}.tok_emb"), config.vocab_size, d, 0.02, rng),
            pos_emb: Parameter::randn(format!("{prefix}.pos_emb"), config.max_seq, d, 0.02, rng),
            layers,
            head_w: Parameter::randn(format!("{prefix}.head_w"), d, config.vocab_size, 0.02, rng),
            head_b: Parameter::zeros(format!("{prefix}.head_b"), 1, config.vocab_size),
        })
    }

    /// Causal encoding of `tokens` with `received` artifacts as final-layer
    /// prefix memory. Returns the exported cache and the final hidden states.
    pub fn encode(&self, tokens: &[usize], received: &[Artifact]) -> Result<(KVCache, Tensor)> {
        self.encode_impl(tokens, received, false)
    }

    /// Untraced encoding for evaluation and benchmarking.
    pub fn encode_frozen(&self, tokens: &[usize], received: &[Artifact]) -> Result<(KVCache, Tensor)> {
        self.encode_impl(tokens, received, true)
    }

    fn encode_impl(&self, tokens: &[usize], received: &[Artifact], frozen: bool) -> Result<(KVCache, Tensor)> {
        if tokens.is_empty() {
            return Err(Error::Argument("encode on empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Capacity(format!(
                "sequence of {} tokens exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        let d = self.config.d_model;
        for a in received {
            if a.k.cols() != d || a.v.cols() != d {
                return Err(Error::Shape(format!(
                    "artifact from agent {} is {}x{}/{}x{}, receiver expects width {d}",
                    a.src,
                    a.k.rows(),
                    a.k.cols(),
                    a.v.rows(),
                    a.v.cols()
                )));
            }
        }

        let t = tokens.len();
        let tok = if frozen { self.tok_emb.frozen() } else { self.tok_emb.tensor().clone() };
        let pos = if frozen { self.pos_emb.frozen() } else { self.pos_emb.tensor().clone() };
        let mut x = tok.gather_rows(tokens)?.add(&pos.slice_rows(0, t)?)?;

        let last = self.config.n_layers - 1;
        let mut exported: Option<(Tensor, Tensor)> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let (prefix_kv, prefix_rows);
            if l == last && !received.is_empty() {
                let ks: Vec<Tensor> = received.iter().map(|a| a.k.clone()).collect();
                let vs: Vec<Tensor> = received.iter().map(|a| a.v.clone()).collect();
                let pk = Tensor::concat_rows(&ks)?;
                let pv = Tensor::concat_rows(&vs)?;
                prefix_rows = pk.rows();
                prefix_kv = Some((pk, pv));
            } else {
                prefix_rows = 0;
                prefix_kv = None;
            }
            let allowed = causal_allowed(prefix_rows, t);
            let out = layer.forward(
                &x,
                prefix_kv.as_ref().map(|(a, b)| (a, b)),
                &allowed,
                frozen,
            )?;
            x = out.hidden;
            if l == last {
                exported = Some((out.k_local, out.v_local));
            }
        }
        let (k, v) = exported.expect("n_layers >= 1");
        let hidden = x.layer_norm(LN_EPS)?;
        Ok((KVCache { k, v, token_count: t, producer: self.id }, hidden))
    }

    /// Logits at the last `n_out` positions of `hidden`.
    pub fn predict(&self, hidden: &Tensor, n_out: usize) -> Result<Tensor> {
        self.predict_impl(hidden, n_out, false)
    }

    pub fn predict_frozen(&self, hidden: &Tensor, n_out: usize) -> Result<Tensor> {
        self.predict_impl(hidden, n_out, true)
    }

    fn predict_impl(&self, hidden: &Tensor, n_out: usize, frozen: bool) -> Result<Tensor> {
        if n_out == 0 {
            return Err(Error::Argument("predict needs n_out >= 1".into()));
        }
        if n_out > hidden.rows() {
            return Err(Error::Argument(format!(
                "n_out {} exceeds sequence length {}",
                n_out,
                hidden.rows()
            )));
        }
        let w = if frozen { self.head_w.frozen() } else { self.head_w.tensor().clone() };
        let b = if frozen { self.head_b.frozen() } else { self.head_b.tensor().clone() };
        hidden.slice_rows(hidden.rows() - n_out, n_out)?.matmul(&w)?.add_row(&b)
    }

    /// Greedy autoregressive extension by `n_steps` tokens. Re-encodes the
    /// whole sequence each step (no incremental cache at desk scale).
    pub fn decode_greedy(&self, prompt: &[usize], n_steps: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Argument("decode_greedy on empty prompt".into()));
        }
        let mut seq = prompt.to_vec();
        for _ in 0..n_steps {
            if seq.len() >= self.config.max_seq {
                return Err(Error::Capacity(format!(
                    "decoding past max_seq {}",
                    self.config.max_seq
                )));
            }
            let (_, hidden) = self.encode_frozen(&seq, &[])?;
            let logits = self.predict_frozen(&hidden, 1)?;
            seq.push(logits.argmax_rows()[0]);
        }
        Ok(seq)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.params());
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::sanitize_identity;

    fn agent(seed: u64) -> AgentParams {
        let cfg = AgentConfig { vocab_size: 16, d_model: 16, n_layers: 2, n_heads: 2, max_seq: 16, d_ff: 32 };
        AgentParams::new(0, cfg, &mut RngStream::new(seed)).unwrap()
    }

    fn artifact_from(a: &AgentParams, tokens: &[usize]) -> Artifact {
        let (cache, _) = a.encode_frozen(tokens, &[]).unwrap();
        sanitize_identity(&cache, a.id, 1)
    }

    #[test]
    fn cache_rows_match_token_count() {
        let a = agent(1);
        let (cache, hidden) = a.encode(&[2, 3, 4, 5], &[]).unwrap();
        assert_eq!(cache.token_count, 4);
        assert_eq!(cache.k.shape(), (4, 16));
        assert_eq!(cache.v.shape(), (4, 16));
        assert_eq!(hidden.shape(), (4, 16));
    }

    #[test]
    fn empty_tokens_rejected() {
        let a = agent(1);
        assert!(matches!(a.encode(&[], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn width_mismatch_rejected() {
        let a = agent(1);
        let bad = Artifact {
            k: Tensor::zeros(3, 8),
            v: Tensor::zeros(3, 8),
            src: 1,
            dst: 0,
        };
        assert!(matches!(a.encode(&[2, 3], &[bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_artifact_differs_from_no_artifact() {
        // even an all-zero prefix changes the softmax denominator
        let a = agent(3);
        let zero = Artifact { k: Tensor::zeros(3, 16), v: Tensor::zeros(3, 16), src: 1, dst: 0 };
        let (_, h_none) = a.encode_frozen(&[2, 3, 4], &[]).unwrap();
        let (_, h_zero) = a.encode_frozen(&[2, 3, 4], &[zero]).unwrap();
        assert_ne!(h_none.values(), h_zero.values());
    }

    #[test]
    fn exported_cache_ignores_prefix_rows() {
        let a = agent(3);
        let b = agent(4);
        let art = artifact_from(&b, &[5, 6, 7]);
        let (cache, _) = a.encode_frozen(&[2, 3, 4, 5], &[art]).unwrap();
        // local token count, not 3 + 4
        assert_eq!(cache.k.rows(), 4);
    }

    #[test]
    fn causality_of_final_hidden_states() {
        let a = agent(5);
        let base = [2usize, 3, 4, 5, 6];
        let (_, h) = a.encode_frozen(&base, &[]).unwrap();
        let mut perturbed = base;
        perturbed[3] = 9;
        let (_, hp) = a.encode_frozen(&perturbed, &[]).unwrap();
        let d = a.config.d_model;
        for t in 0..3 {
            assert_eq!(
                &h.values()[t * d..(t + 1) * d],
                &hp.values()[t * d..(t + 1) * d],
                "position {t} changed"
            );
        }
        assert_ne!(&h.values()[3 * d..4 * d], &hp.values()[3 * d..4 * d]);
    }

    #[test]
    fn artifact_order_determinism() {
        let a = agent(6);
        let b = agent(7);
        let c = agent(8);
        let art1 = artifact_from(&b, &[5, 6]);
        let art2 = artifact_from(&c, &[9, 10, 11]);
        let (_, h1) = a.encode_frozen(&[2, 3], &[art1.clone(), art2.clone()]).unwrap();
        let (_, h1b) = a.encode_frozen(&[2, 3], &[art1.clone(), art2.clone()]).unwrap();
        assert_eq!(h1.values(), h1b.values());
        let (_, h2) = a.encode_frozen(&[2, 3], &[art2, art1]).unwrap();
        assert_ne!(h1.values(), h2.values());
    }

    #[test]
    fn predict_contract() {
        let a = agent(9);
        let (_, hidden) = a.encode(&[2, 3, 4], &[]).unwrap();
        let logits = a.predict(&hidden, 2).unwrap();
        assert_eq!(logits.shape(), (2, 16));
        assert!(matches!(a.predict(&hidden, 0), Err(Error::Argument(_))));
        assert!(matches!(a.predict(&hidden, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn untrained_logits_near_uniform() {
        // average predictive entropy within 5% of ln V over 100 seeds
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..100 {
            let a = agent(1000 + seed);
            let (_, hidden) = a.encode_frozen(&[2, 5, 7, 3], &[]).unwrap();
            let logits = a.predict_frozen(&hidden, 4).unwrap();
            let probs = logits.masked_softmax(&vec![16; 4]).unwrap();
            for r in 0..4 {
                let row = &probs.values()[r * 16..(r + 1) * 16];
                total -= row.iter().map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>();
                count += 1;
            }
        }
        let mean_entropy = total / count as f64;
        let ln_v = 16f64.ln();
        assert!((mean_entropy - ln_v).abs() / ln_v < 0.05, "entropy {mean_entropy} vs ln V {ln_v}");
    }

    #[test]
    fn greedy_decode_deterministic_and_bounded() {
        let a = agent(11);
        let out0 = a.decode_greedy(&[2, 3], 0).unwrap();
        assert_eq!(out0, vec![2, 3]);
        let out1 = a.decode_greedy(&[2, 3], 5).unwrap();
        let out2 = a.decode_greedy(&[2, 3], 5).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(out1.len(), 7);
        assert!(matches!(a.decode_greedy(&[2; 16], 1), Err(Error::Capacity(_))));
        assert!(matches!(a.decode_greedy(&[], 1), Err(Error::Argument(_))));
    }

    #[test]
    fn param_count_matches_enumeration() {
        let a = agent(12);
        let total: usize = a.params().iter().map(|p| p.values().len()).sum();
        assert_eq!(total, a.config.param_count());
    }
}
