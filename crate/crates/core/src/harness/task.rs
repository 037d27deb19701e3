//! Synthetic tasks: sequence reversal (tagging) and an order-1 Markov source
//! (language modelling) whose entropy rate is known in closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Reversal,
    MarkovLM,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    /// Tokens the model sees per example.
    pub seq_len: usize,
    /// Row-stochastic transition matrix (MarkovLM only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl TaskSpec {
    pub fn reversal(vocab_size: usize, seq_len: usize) -> Self {
        Self { kind: TaskKind::Reversal, vocab_size, seq_len, transition: None }
    }

    pub fn markov(transition: Vec<Vec<f64>>, seq_len: usize) -> Self {
        Self { kind: TaskKind::MarkovLM, vocab_size: transition.len(), seq_len, transition: Some(transition) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(config_err!("seq_len must be positive"));
        }
        match self.kind {
            TaskKind::Reversal => {
                if self.vocab_size < 2 {
                    return Err(config_err!("reversal needs a vocabulary of at least 2"));
                }
            }
            TaskKind::MarkovLM => {
                let p = self.transition.as_ref().ok_or_else(|| config_err!("MarkovLM needs a transition matrix"))?;
                if p.len() != self.vocab_size || p.is_empty() {
                    return Err(config_err!("transition matrix must be vocab_size x vocab_size"));
                }
                for (i, row) in p.iter().enumerate() {
                    if row.len() != self.vocab_size || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                        return Err(config_err!("transition row {i} is not a distribution"));
                    }
                    if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(config_err!("transition row {i} sums to {}", row.iter().sum::<f64>()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Generates `n` examples; identical for identical `(seed, stream)`.
    pub fn generate(&self, seed: u64, stream: u64, n: usize) -> Result<Vec<Example>> {
        match self.kind {
            TaskKind::Reversal => gen_reversal(self, seed, stream, n),
            TaskKind::MarkovLM => gen_markov_lm(self, seed, stream, n).map(|(ex, _)| ex),
        }
    }
}

pub fn reverse_target(input: &[usize]) -> Vec<usize> {
    input.iter().rev().copied().collect()
}

/// Uniform random inputs with `target[t] = input[T-1-t]`.
pub fn gen_reversal(spec: &TaskSpec, seed: u64, stream: u64, n: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut gen = rng::stream(seed, rng::stream_id(&[rng::tag::TASK, stream]));
    Ok((0..n)
        .map(|_| {
            let input: Vec<usize> = (0..spec.seq_len).map(|_| gen.gen_range(0..spec.vocab_size)).collect();
            let target = reverse_target(&input);
            Example { input, target }
        })
        .collect())
}

/// Stationary distribution by power iteration, to an L1 change below 1e-12.
pub fn stationary(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; n];
        for (i, row) in p.iter().enumerate() {
            for (j, &pij) in row.iter().enumerate() {
                next[j] += pi[i] * pij;
            }
        }
        // Damping keeps periodic chains (e.g. deterministic cycles) converging.
        let next: Vec<f64> = next.iter().zip(&pi).map(|(a, b)| 0.5 * (a + b)).collect();
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-12 {
            break;
        }
    }
    pi
}

/// Entropy rate `sum_s pi(s) sum_s' -P(s'|s) ln P(s'|s)` in nats.
pub fn entropy_rate(p: &[Vec<f64>]) -> f64 {
    let pi = stationary(p);
    p.iter()
        .zip(&pi)
        .map(|(row, w)| w * row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>())
        .sum()
}

fn sample_from(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Chains of `seq_len + 1` states started from the stationary distribution.
/// Inputs are the first `seq_len` states, targets the next ones. Also
/// returns the entropy floor.
pub fn gen_markov_lm(spec: &TaskSpec, seed: u64, stream: u64, n: usize) -> Result<(Vec<Example>, f64)> {
    spec.validate()?;
    let p = spec.transition.as_ref().ok_or_else(|| config_err!("MarkovLM needs a transition matrix"))?;
    let pi = stationary(p);
    let mut gen = rng::stream(seed, rng::stream_id(&[rng::tag::TASK, stream]));
    let examples = (0..n)
        .map(|_| {
            let mut chain = Vec::with_capacity(spec.seq_len + 1);
            chain.push(sample_from(&pi, gen.gen()));
            for _ in 0..spec.seq_len {
                let prev = *chain.last().expect("non-empty");
                chain.push(sample_from(&p[prev], gen.gen()));
            }
            Example { input: chain[..spec.seq_len].to_vec(), target: chain[1..].to_vec() }
        })
        .collect();
    Ok((examples, entropy_rate(p)))
}
