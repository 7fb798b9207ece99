//! Free-running sampling and structural checks on generated token streams.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor;

pub const QUOTE_OPEN: &str = "``";
pub const QUOTE_CLOSE: &str = "''";
pub const HEAD_MARK: &str = "★";

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    /// Maximum tokens in the output, prefix included, EOS excluded.
    pub max_length: usize,
    pub temperature: f64,
    /// Always take the most probable word (the zero-temperature limit).
    pub greedy: bool,
    pub prefix: Vec<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_length: 100,
            temperature: 1.0,
            greedy: false,
            prefix: Vec::new(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_length == 0 {
            return Err(Error::Config("max_length must be ≥ 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    /// Prefix followed by sampled words; EOS is not included.
    pub tokens: Vec<usize>,
    /// True when `max_length` was reached before EOS was drawn.
    pub truncated: bool,
}

impl Generated {
    pub fn surface(&self, model: &Model) -> String {
        model.vocab().decode(&self.tokens)
    }
}

/// Draws words from the full-softmax distribution until EOS or `max_length`.
pub fn sample_sentence(model: &Model, cfg: &GenConfig, rng: &mut impl Rng) -> Result<Generated> {
    cfg.validate()?;
    let eos = model.vocab().eos_id();
    let mut tokens = cfg.prefix.clone();
    while tokens.len() < cfg.max_length {
        let phi = model.representation(&tokens)?;
        let mut scores = model.word_scores(&phi);
        let next = if cfg.greedy {
            tensor::argmax(&scores)
        } else {
            for s in &mut scores {
                *s /= cfg.temperature;
            }
            tensor::softmax_in_place(&mut scores);
            WeightedIndex::new(&scores)
                .map_err(|e| Error::Contract(format!("cannot sample: {e}")))?
                .sample(rng)
        };
        if next == eos {
            return Ok(Generated {
                tokens,
                truncated: false,
            });
        }
        tokens.push(next);
    }
    Ok(Generated {
        tokens,
        truncated: true,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuoteCheck {
    pub balanced: bool,
    /// Openers never closed.
    pub open_positions: Vec<usize>,
    /// Closers with no earlier opener.
    pub stray_closers: Vec<usize>,
}

/// Pairs every closer with the latest unclosed opener.
pub fn validate_quotes<S: AsRef<str>>(tokens: &[S]) -> QuoteCheck {
    let mut open = Vec::new();
    let mut stray = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        match t.as_ref() {
            QUOTE_OPEN => open.push(i),
            QUOTE_CLOSE => {
                if open.pop().is_none() {
                    stray.push(i);
                }
            }
            _ => {}
        }
    }
    QuoteCheck {
        balanced: open.is_empty() && stray.is_empty(),
        open_positions: open,
        stray_closers: stray,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepTagViolation {
    /// `)` with no open group.
    UnmatchedClose(usize),
    /// `(` never closed.
    UnclosedGroup(usize),
    /// Group opened at this position has no `★` constituent.
    MissingHead(usize),
    /// Group opened at this position has more than one `★` constituent.
    MultipleHeads(usize),
    /// `★` not followed by a word or `(`.
    DanglingMark(usize),
    /// `★` outside every group.
    TopLevelMark(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepTagCheck {
    pub well_formed: bool,
    pub violations: Vec<DepTagViolation>,
}

/// Checks bracket balance and exactly one head marker per group. A marker
/// may precede a word or a whole group.
pub fn validate_deptags<S: AsRef<str>>(tokens: &[S]) -> DepTagCheck {
    use DepTagViolation::*;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut violations = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        match t.as_ref() {
            "(" => stack.push((i, 0)),
            ")" => match stack.pop() {
                None => violations.push(UnmatchedClose(i)),
                Some((open, 0)) => violations.push(MissingHead(open)),
                Some((open, heads)) if heads > 1 => violations.push(MultipleHeads(open)),
                Some(_) => {}
            },
            HEAD_MARK => {
                let next = tokens.get(i + 1).map(AsRef::as_ref);
                if matches!(next, None | Some(")") | Some(HEAD_MARK)) {
                    violations.push(DanglingMark(i));
                }
                match stack.last_mut() {
                    Some((_, heads)) => *heads += 1,
                    None => violations.push(TopLevelMark(i)),
                }
            }
            _ => {}
        }
    }
    violations.extend(stack.iter().map(|&(open, _)| UnclosedGroup(open)));
    DepTagCheck {
        well_formed: violations.is_empty(),
        violations,
    }
}
