//! Perplexity (static and dynamic) and the long-range perturbation probe.

use std::fmt;

use rand::Rng;

use crate::corpus::SentenceBatch;
use crate::error::{Error, Result};
use crate::model::{Model, SoftmaxMode};
use crate::training::{adagrad_step, batch_gradients, TrainInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Static,
    Dynamic,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Static => "static",
            EvalMode::Dynamic => "dynamic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerplexityReport {
    pub mode: EvalMode,
    /// Includes one EOS per sentence.
    pub token_count: usize,
    pub total_nll: f64,
}

impl PerplexityReport {
    pub fn mean_nll(&self) -> f64 {
        self.total_nll / self.token_count as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }
}

impl fmt::Display for PerplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mode={} tokens={} ppl={:.6}",
            self.mode.name(),
            self.token_count,
            self.perplexity()
        )
    }
}

/// Online-update settings for dynamic evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicConfig {
    pub lr: f64,
    pub eps: f64,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig { lr: 0.05, eps: 1e-8 }
    }
}

fn non_empty(corpus: &SentenceBatch) -> Result<()> {
    if corpus.is_empty() {
        Err(Error::Contract("evaluation corpus is empty".into()))
    } else {
        Ok(())
    }
}

/// Perplexity with frozen parameters.
pub fn perplexity(model: &Model, corpus: &SentenceBatch, mode: SoftmaxMode) -> Result<PerplexityReport> {
    non_empty(corpus)?;
    let mut total_nll = 0.0;
    for s in corpus.sequences() {
        total_nll -= model.log_prob_sentence(s, mode)?;
    }
    Ok(PerplexityReport {
        mode: EvalMode::Static,
        token_count: corpus.token_count(),
        total_nll,
    })
}

/// Scores each sentence, then takes one AdaGrad step on that sentence's mean
/// loss before moving on. Works on a private copy; `model` is not modified.
pub fn dynamic_perplexity(
    model: &Model,
    corpus: &SentenceBatch,
    mode: SoftmaxMode,
    cfg: &DynamicConfig,
) -> Result<PerplexityReport> {
    non_empty(corpus)?;
    let mut live = model.clone();
    let mut total_nll = 0.0;
    for s in corpus.sequences() {
        let instances: Vec<TrainInstance<'_>> = (0..s.len())
            .map(|t| TrainInstance {
                history: &s[..t],
                target: s[t],
            })
            .collect();
        let (nll, grads) = batch_gradients(&live, &instances, mode)?;
        total_nll += nll;
        adagrad_step(live.params_mut(), &grads, cfg.lr, cfg.eps)?;
    }
    Ok(PerplexityReport {
        mode: EvalMode::Dynamic,
        token_count: corpus.token_count(),
        total_nll,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub k: usize,
    pub mean_abs_dlogp: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mean_abs_dlogp,n\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.9},{}\n", r.k, r.mean_abs_dlogp, r.n));
        }
        out
    }
}

/// For each trial, picks a sentence and a target position with at least
/// `k_max` words before it, then for every `k = 1..=k_max` replaces the word
/// `k` places back by a uniformly drawn different word and records
/// `|Δ log p(target)|`.
pub fn long_range_probe(
    model: &Model,
    corpus: &SentenceBatch,
    k_max: usize,
    trials: usize,
    mode: SoftmaxMode,
    rng: &mut impl Rng,
) -> Result<ProbeReport> {
    if k_max == 0 {
        return Err(Error::Contract("k_max must be ≥ 1".into()));
    }
    let usable: Vec<&Vec<usize>> = corpus.sequences().iter().filter(|s| s.len() > k_max).collect();
    if usable.is_empty() {
        return Err(Error::Contract(format!("no sentence has more than {k_max} tokens")));
    }
    let v = model.vocab().len();
    let mut sums = vec![0.0; k_max];
    for _ in 0..trials {
        let s = usable[rng.gen_range(0..usable.len())];
        let t = rng.gen_range(k_max..s.len());
        let base = model.log_prob(&s[..t], s[t], mode)?;
        let mut history = s[..t].to_vec();
        for k in 1..=k_max {
            let original = history[t - k];
            let mut replacement = rng.gen_range(0..v - 1);
            if replacement >= original {
                replacement += 1;
            }
            history[t - k] = replacement;
            let perturbed = model.log_prob(&history, s[t], mode)?;
            history[t - k] = original;
            sums[k - 1] += (perturbed - base).abs();
        }
    }
    let rows = sums
        .into_iter()
        .enumerate()
        .map(|(i, sum)| ProbeRow {
            k: i + 1,
            mean_abs_dlogp: if trials == 0 { 0.0 } else { sum / trials as f64 },
            n: trials,
        })
        .collect();
    Ok(ProbeReport { rows })
}
