//! N-best list re-ranking in the Moses `id ||| hyp ||| features ||| total` format.

use crate::error::{Error, Result};
use crate::model::{Model, SoftmaxMode};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub text: String,
    /// Feature field as read, kept verbatim for output.
    pub feature_field: String,
    pub features: Vec<(String, Vec<f64>)>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub segment_id: String,
    pub hypotheses: Vec<Hypothesis>,
}

/// Accepts both `name= v1 v2` and `name=v` spellings.
fn parse_features(field: &str, line: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for tok in field.split_whitespace() {
        let value = match tok.split_once('=') {
            Some((name, rest)) => {
                out.push((name.to_string(), Vec::new()));
                if rest.is_empty() {
                    continue;
                }
                rest
            }
            None => tok,
        };
        let v: f64 = value.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("feature value `{value}` is not a number"),
        })?;
        match out.last_mut() {
            Some((_, values)) => values.push(v),
            None => out.push((String::new(), vec![v])),
        }
    }
    Ok(out)
}

/// Groups consecutive lines sharing an id; order within a group is kept.
pub fn parse_nbest(text: &str) -> Result<Vec<NBestList>> {
    let mut lists: Vec<NBestList> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split("|||").map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 `|||`-separated fields, found {}", fields.len()),
            });
        }
        let total: f64 = fields[3].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("total score `{}` is not a number", fields[3]),
        })?;
        let hyp = Hypothesis {
            text: fields[1].to_string(),
            feature_field: fields[2].to_string(),
            features: parse_features(fields[2], line)?,
            total,
        };
        match lists.last_mut() {
            Some(l) if l.segment_id == fields[0] => l.hypotheses.push(hyp),
            _ => lists.push(NBestList {
                segment_id: fields[0].to_string(),
                hypotheses: vec![hyp],
            }),
        }
    }
    Ok(lists)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RerankConfig {
    /// Weight of the language-model score; `1 − lambda` goes to the total.
    pub lambda: f64,
    /// Divide the log-probability by the token count (EOS included).
    pub length_norm: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            lambda: 0.5,
            length_norm: false,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rescored {
    pub hypothesis: Hypothesis,
    pub original_rank: usize,
    pub lm_score: f64,
    pub combined: f64,
}

/// Combines precomputed LM scores with the totals and sorts by the combined
/// score, highest first; ties keep input order.
pub fn rank_with_scores(list: &NBestList, lm_scores: &[f64], cfg: &RerankConfig) -> Result<Vec<Rescored>> {
    cfg.validate()?;
    if lm_scores.len() != list.hypotheses.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} hypotheses",
            lm_scores.len(),
            list.hypotheses.len()
        )));
    }
    let mut out: Vec<Rescored> = list
        .hypotheses
        .iter()
        .zip(lm_scores)
        .enumerate()
        .map(|(i, (h, &lm))| Rescored {
            hypothesis: h.clone(),
            original_rank: i,
            lm_score: lm,
            combined: cfg.lambda * lm + (1.0 - cfg.lambda) * h.total,
        })
        .collect();
    out.sort_by(|a, b| b.combined.total_cmp(&a.combined));
    Ok(out)
}

/// Scores every hypothesis with the model and re-ranks the list.
pub fn rescore(model: &Model, list: &NBestList, cfg: &RerankConfig, mode: SoftmaxMode) -> Result<Vec<Rescored>> {
    let scores = list
        .hypotheses
        .iter()
        .map(|h| {
            let ids = model.vocab().encode(&h.text);
            let lp = model.log_prob_sentence(&ids, mode)?;
            Ok(if cfg.length_norm { lp / ids.len() as f64 } else { lp })
        })
        .collect::<Result<Vec<_>>>()?;
    rank_with_scores(list, &scores, cfg)
}

/// One output line per hypothesis with `genCNN=<score>` appended to the
/// feature field and the combined score as the total.
pub fn format_rescored(segment_id: &str, ranked: &[Rescored]) -> String {
    let mut out = String::new();
    for r in ranked {
        let h = &r.hypothesis;
        let sep = if h.feature_field.is_empty() { "" } else { " " };
        out.push_str(&format!(
            "{segment_id} ||| {} ||| {}{sep}genCNN={} ||| {}\n",
            h.text, h.feature_field, r.lm_score, r.combined
        ));
    }
    out
}
