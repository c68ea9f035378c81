//! Synthetic planted-secret episodes.
//!
//! Every episode gives each agent a task input `x_i`, a private input `s_i`,
//! and the system one label sequence `y`. Task content is drawn from the
//! content alphabet `[2, V)` (ids 0 and 1 are reserved for padding and the
//! input separator); secrets are drawn uniformly over the full alphabet
//! `[0, V)` so the analytic reconstruction prior is exactly `ln V`.
//!
//! Three regimes control how secrets relate to the rest of the episode:
//! - `Decoupled`: secrets are independent of everything; the label is a
//!   function of task inputs alone.
//! - `Coupled`: the label is additionally shifted by agent 0's secret, so
//!   task success requires transmitting secret information.
//! - `Compositional`: agents 0 and 1 hold uniform shares and the output
//!   agent's secret is their elementwise sum mod V. Either share alone is
//!   useless; only their combination reveals the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Reserved padding id (never sampled).
pub const PAD: usize = 0;
/// Separator between task tokens and secret tokens in an agent's input.
pub const SEP: usize = 1;
/// First sampleable task-content id.
pub const CONTENT_BASE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Decoupled,
    Coupled,
    Compositional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `y` copies agent 0's task tokens.
    Copy,
    /// `y_t` is the sum of all agents' content values at position `t`,
    /// modulo the content alphabet.
    SumModV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub vocab_size: usize,
    pub task_len: usize,
    pub secret_len: usize,
    pub n_agents: usize,
    pub regime: Regime,
    pub task_kind: TaskKind,
    /// Strength of the secret shift in the `Coupled` regime; 0 reduces it
    /// to `Decoupled` exactly.
    pub coupling_weight: u64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Argument(format!(
                "vocab_size must be at least 4, got {}",
                self.vocab_size
            )));
        }
        if self.task_len == 0 {
            return Err(Error::Argument("task_len must be positive".into()));
        }
        if self.n_agents == 0 {
            return Err(Error::Argument("n_agents must be positive".into()));
        }
        if self.regime == Regime::Compositional {
            if self.n_agents < 3 {
                return Err(Error::Argument(
                    "compositional regime needs n_agents >= 3 (two shares plus the target holder)".into(),
                ));
            }
            if self.secret_len == 0 {
                return Err(Error::Argument("compositional regime needs secret_len >= 1".into()));
            }
        }
        Ok(())
    }

    /// Width of the content alphabet `[2, V)`.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - CONTENT_BASE
    }

    /// Length of the label sequence (the output agent's readout width).
    pub fn output_len(&self) -> usize {
        self.task_len
    }

    /// Tokens an agent feeds to its model: `x_i ++ [SEP] ++ s_i`.
    pub fn agent_seq_len(&self) -> usize {
        self.task_len + 1 + self.secret_len
    }
}

/// One episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub x: Vec<Vec<usize>>,
    pub s: Vec<Vec<usize>>,
    pub y: Vec<usize>,
}

impl DataRecord {
    /// The token sequence agent `i` encodes.
    pub fn agent_tokens(&self, i: usize) -> Vec<usize> {
        let mut t = self.x[i].clone();
        t.push(SEP);
        t.extend_from_slice(&self.s[i]);
        t
    }
}

/// Deterministic i.i.d. episode generation.
pub fn generate(spec: &DatasetSpec, n: usize) -> Result<Vec<DataRecord>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Argument("need at least one record".into()));
    }
    let v = spec.vocab_size;
    let content = spec.content_vocab();
    let mut rng = RngStream::new(spec.seed).substream(0x6461_7461); // "data"
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<Vec<usize>> = (0..spec.n_agents)
            .map(|_| (0..spec.task_len).map(|_| CONTENT_BASE + rng.next_usize(content)).collect())
            .collect();

        let mut s: Vec<Vec<usize>> = Vec::with_capacity(spec.n_agents);
        for i in 0..spec.n_agents {
            if spec.regime == Regime::Compositional && i == spec.n_agents - 1 {
                // target holder: derived below, never sampled
                s.push(vec![PAD; spec.secret_len]);
            } else {
                s.push((0..spec.secret_len).map(|_| rng.next_usize(v)).collect());
            }
        }
        if spec.regime == Regime::Compositional {
            let target: Vec<usize> =
                (0..spec.secret_len).map(|t| (s[0][t] + s[1][t]) % v).collect();
            let last = spec.n_agents - 1;
            s[last] = target;
        }

        let mut y: Vec<usize> = match spec.task_kind {
            TaskKind::Copy => x[0].clone(),
            TaskKind::SumModV => (0..spec.task_len)
                .map(|t| {
                    let sum: usize = x.iter().map(|xi| xi[t] - CONTENT_BASE).sum();
                    CONTENT_BASE + sum % content
                })
                .collect(),
        };
        if spec.regime == Regime::Coupled && spec.secret_len > 0 && spec.coupling_weight > 0 {
            for (t, yt) in y.iter_mut().enumerate() {
                let shift = (spec.coupling_weight as usize) * s[0][t % spec.secret_len];
                *yt = CONTENT_BASE + ((*yt - CONTENT_BASE) + shift) % content;
            }
        }
        out.push(DataRecord { x, s, y });
    }
    Ok(out)
}

/// Contiguous deterministic split by fractions summing to 1.
pub fn split(
    records: &[DataRecord],
    fractions: (f64, f64, f64),
) -> Result<(Vec<DataRecord>, Vec<DataRecord>, Vec<DataRecord>)> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "split fractions must be non-negative and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = records.len();
    let n_train = (n as f64 * a).round() as usize;
    let n_val = (n as f64 * b).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Ok((
        records[..n_train].to_vec(),
        records[n_train..n_train + n_val].to_vec(),
        records[n_train + n_val..].to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(regime: Regime) -> DatasetSpec {
        DatasetSpec {
            vocab_size: 16,
            task_len: 3,
            secret_len: 2,
            n_agents: 3,
            regime,
            task_kind: TaskKind::Copy,
            coupling_weight: 1,
            seed: 5,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(Regime::Decoupled);
        assert_eq!(generate(&s, 50).unwrap(), generate(&s, 50).unwrap());
    }

    #[test]
    fn token_ranges_respected() {
        let s = spec(Regime::Decoupled);
        for r in generate(&s, 200).unwrap() {
            for xi in &r.x {
                assert!(xi.iter().all(|&t| (CONTENT_BASE..s.vocab_size).contains(&t)));
            }
            for si in &r.s {
                assert!(si.iter().all(|&t| t < s.vocab_size));
            }
            assert!(r.y.iter().all(|&t| (CONTENT_BASE..s.vocab_size).contains(&t)));
        }
    }

    #[test]
    fn coupled_with_zero_weight_reduces_to_decoupled() {
        let mut c = spec(Regime::Coupled);
        c.coupling_weight = 0;
        let d = spec(Regime::Decoupled);
        let rc = generate(&c, 40).unwrap();
        let rd = generate(&d, 40).unwrap();
        for (a, b) in rc.iter().zip(&rd) {
            assert_eq!(a.y, b.y);
        }
    }

    #[test]
    fn coupled_label_shifts_with_secret() {
        let c = spec(Regime::Coupled);
        let d = spec(Regime::Decoupled);
        let rc = generate(&c, 100).unwrap();
        let rd = generate(&d, 100).unwrap();
        let mut diffs = 0;
        for (a, b) in rc.iter().zip(&rd) {
            if a.y != b.y {
                diffs += 1;
            }
        }
        assert!(diffs > 50, "only {diffs} labels shifted");
    }

    #[test]
    fn compositional_target_is_share_sum() {
        let s = spec(Regime::Compositional);
        for r in generate(&s, 300).unwrap() {
            for t in 0..s.secret_len {
                assert_eq!(r.s[2][t], (r.s[0][t] + r.s[1][t]) % s.vocab_size);
            }
        }
    }

    #[test]
    fn compositional_shares_are_uniform() {
        // chi-squared at the 1% level; df = V-1 = 15 => critical 30.58
        let s = spec(Regime::Compositional);
        let records = generate(&s, 10_000).unwrap();
        for share in 0..2 {
            let mut counts = vec![0usize; s.vocab_size];
            for r in &records {
                counts[r.s[share][0]] += 1;
            }
            let expected = records.len() as f64 / s.vocab_size as f64;
            let chi2: f64 =
                counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            assert!(chi2 < 30.58, "share {share}: chi2 {chi2}");
        }
    }

    #[test]
    fn split_counts_and_stability() {
        let s = spec(Regime::Decoupled);
        let records = generate(&s, 100).unwrap();
        let (tr, va, te) = split(&records, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert_eq!(tr[0], records[0]);
        assert_eq!(te[9], records[99]);

        let (tr2, va2, _) = split(&records, (0.9, 0.0, 0.1)).unwrap();
        assert_eq!(tr2.len(), 90);
        assert!(va2.is_empty());

        assert!(split(&records, (0.5, 0.2, 0.2)).is_err());
    }

    #[test]
    fn bad_specs_name_the_field() {
        let mut s = spec(Regime::Decoupled);
        s.vocab_size = 3;
        assert!(generate(&s, 1).unwrap_err().to_string().contains("vocab_size"));
        let mut s = spec(Regime::Compositional);
        s.n_agents = 2;
        assert!(generate(&s, 1).unwrap_err().to_string().contains("n_agents"));
    }

    #[test]
    fn agent_tokens_layout() {
        let s = spec(Regime::Decoupled);
        let r = &generate(&s, 1).unwrap()[0];
        let toks = r.agent_tokens(1);
        assert_eq!(toks.len(), s.agent_seq_len());
        assert_eq!(toks[s.task_len], SEP);
        assert_eq!(&toks[..s.task_len], &r.x[1][..]);
        assert_eq!(&toks[s.task_len + 1..], &r.s[1][..]);
    }
}
