//! Maximum-likelihood training with mini-batch AdaGrad.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{SentenceBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParameterSet, SoftmaxMode};
use crate::tape::GradTape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EmbeddingInit {
    Uniform,
    /// Text file of `word v1 … vd` lines; words it lacks keep their uniform draw.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub adagrad_eps: f64,
    pub epochs: usize,
    pub shuffle_seed: u64,
    pub init_range: f64,
    pub softmax_mode: SoftmaxMode,
    pub embedding_init: EmbeddingInit,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 500,
            base_lr: 0.05,
            adagrad_eps: 1e-8,
            epochs: 10,
            shuffle_seed: 0,
            init_range: 0.1,
            softmax_mode: SoftmaxMode::Full,
            embedding_init: EmbeddingInit::Uniform,
        }
    }
}

impl TrainConfig {
    /// Zero learning rates and ranges are accepted here so that frozen and
    /// zero-initialized runs can be expressed; the command line is stricter.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.base_lr)));
        }
        if !(self.adagrad_eps >= 0.0 && self.adagrad_eps.is_finite()) {
            return Err(Error::Config(format!("adagrad eps {} is invalid", self.adagrad_eps)));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            return Err(Error::Config(format!("init range {} is invalid", self.init_range)));
        }
        Ok(())
    }
}

/// One prediction: `target` given the words before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainInstance<'a> {
    pub history: &'a [usize],
    pub target: usize,
}

/// A sentence of `T` tokens yields `T` instances, the EOS prediction included.
pub fn split_instances(batch: &SentenceBatch) -> Vec<TrainInstance<'_>> {
    batch
        .sequences()
        .iter()
        .flat_map(|s| {
            (0..s.len()).map(move |t| TrainInstance {
                history: &s[..t],
                target: s[t],
            })
        })
        .collect()
}

/// Reads `word v1 … vd` lines. A leading `count dim` header line is skipped.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dim: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if i == 0 && values.len() == 1 && word.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(Error::Format(format!(
                "{}:{}: embedding for `{word}` has {} values, expected {dim}",
                path.display(),
                i + 1,
                values.len()
            )));
        }
        let vector = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if let Some(id) = vocab.id(word) {
            rows.push((id, vector));
        }
    }
    Ok(rows)
}

/// A freshly initialized model: every tensor drawn from
/// `Uniform[−init_range, init_range]` in parameter order, embeddings
/// optionally overwritten from a file, accumulators zero.
pub fn init_model(config: ModelConfig, vocab: Vocabulary, train: &TrainConfig, seed: u64) -> Result<Model> {
    train.validate()?;
    let mut model = Model::new(config, vocab)?;
    if train.init_range > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-train.init_range, train.init_range);
        for t in model.params_mut().values_mut() {
            for v in t.data_mut() {
                *v = dist.sample(&mut rng);
            }
        }
    }
    if let EmbeddingInit::File(path) = &train.embedding_init {
        let d = model.config().embed_dim;
        let rows = load_embeddings(path, model.vocab(), d)?;
        let e = model.layout().embeddings;
        let table = &mut model.params_mut().values_mut()[e];
        for (id, v) in rows {
            table.data_mut()[id * d..(id + 1) * d].copy_from_slice(&v);
        }
    }
    Ok(model)
}

/// `G += g²; θ −= η·g/(√G + eps)` per coordinate. Coordinates with `g = 0`
/// are left untouched. Nothing is modified if any gradient is non-finite.
pub fn adagrad_step(params: &mut ParameterSet, grads: &[Tensor], lr: f64, eps: f64) -> Result<()> {
    let (names, values, accs) = params.split_mut();
    if grads.len() != values.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameter tensors",
            grads.len(),
            values.len()
        )));
    }
    for ((name, v), g) in names.iter().zip(values.iter()).zip(grads) {
        if g.shape() != v.shape() {
            return Err(Error::shape("adagrad_step", g.shape(), v.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    for ((v, acc), g) in values.iter_mut().zip(accs.iter_mut()).zip(grads) {
        for ((theta, big_g), &gi) in v.data_mut().iter_mut().zip(acc.data_mut()).zip(g.data()) {
            if gi != 0.0 {
                *big_g += gi * gi;
                *theta -= lr * gi / (big_g.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Summed NLL of `instances` and the gradient of their mean NLL, one tensor
/// per parameter.
pub fn batch_gradients(
    model: &Model,
    instances: &[TrainInstance<'_>],
    mode: SoftmaxMode,
) -> Result<(f64, Vec<Tensor>)> {
    if instances.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut tape = GradTape::new();
    let (vars, w) = model.trace(&mut tape);
    let mut total = None;
    for inst in instances {
        let layout = model.layout_history(inst.history);
        let phi = model.represent(&mut tape, &w, &layout)?;
        let lp = model.log_prob_on_tape(&mut tape, &w, phi, inst.target, mode)?;
        total = Some(match total {
            None => lp,
            Some(acc) => tape.add(acc, lp)?,
        });
    }
    let total = total.expect("non-empty batch");
    let nll = -tape.value(total).item()?;
    let mut grads = tape.backward_with_seed(total, -1.0 / instances.len() as f64)?;
    let out = vars
        .iter()
        .zip(model.params().values())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((nll, out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_nll: f64,
    pub tokens: usize,
    pub seconds: f64,
}

impl EpochStats {
    pub fn perplexity(&self) -> f64 {
        self.mean_nll.exp()
    }
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.4}\t{:.3}",
            self.epoch,
            self.mean_nll,
            self.perplexity(),
            self.seconds
        )
    }
}

/// One pass over `instances` in an order drawn from `rng`. The reported NLL
/// of each batch is measured before that batch's update.
pub fn train_epoch(
    model: &mut Model,
    instances: &[TrainInstance<'_>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Contract("no training instances".into()));
    }
    let start = Instant::now();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.shuffle(rng);
    let mut nll = 0.0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for chunk in order.chunks(cfg.batch_size) {
        batch.clear();
        batch.extend(chunk.iter().map(|&i| instances[i]));
        let (batch_nll, grads) = batch_gradients(model, &batch, cfg.softmax_mode)?;
        nll += batch_nll;
        adagrad_step(model.params_mut(), &grads, cfg.base_lr, cfg.adagrad_eps)?;
    }
    Ok(EpochStats {
        epoch,
        mean_nll: nll / instances.len() as f64,
        tokens: instances.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs up to `cfg.epochs` epochs, calling `after_epoch` with each epoch's
/// statistics; training stops early when it returns `false`.
pub fn train(
    model: &mut Model,
    corpus: &SentenceBatch,
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&Model, &EpochStats) -> bool,
) -> Result<Vec<EpochStats>> {
    let instances = split_instances(corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(model, &instances, cfg, &mut rng, epoch)?;
        let go_on = after_epoch(model, &stats);
        history.push(stats);
        if !go_on {
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::GateMode;
    use proptest::prelude::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            l_alpha: 6,
            l_beta: 4,
            embed_dim: 4,
            window: 2,
            tf_maps: vec![3, 2],
            ta_maps: vec![3, 2],
            beta_maps: vec![3, 3],
            fc_dim: 8,
            cluster_count: 3,
            gate_mode: GateMode::Soft,
            ..ModelConfig::default()
        }
    }

    fn toy_lines() -> Vec<String> {
        (0..50)
            .map(|i| {
                let n = 3 + i % 4;
                (0..n).map(|j| format!("w{}", (i * 7 + j * 3) % 13)).collect::<Vec<_>>().join(" ")
            })
            .collect()
    }

    fn toy() -> (Vocabulary, SentenceBatch) {
        let lines = toy_lines();
        let vocab = Vocabulary::build(&lines, 100, 3).unwrap();
        let batch = SentenceBatch::encode_lines(&vocab, &lines);
        (vocab, batch)
    }

    #[test]
    fn split_small_sentence() {
        let vocab = Vocabulary::build(&["a b"], 10, 1).unwrap();
        let batch = SentenceBatch::encode_lines(&vocab, &["a b", ""]);
        let inst = split_instances(&batch);
        let (a, b, eos) = (vocab.id("a").unwrap(), vocab.id("b").unwrap(), vocab.eos_id());
        assert_eq!(inst.len(), 4);
        assert_eq!(inst[0], TrainInstance { history: &[], target: a });
        assert_eq!(inst[1], TrainInstance { history: &[a], target: b });
        assert_eq!(inst[2], TrainInstance { history: &[a, b], target: eos });
        assert_eq!(inst[3], TrainInstance { history: &[], target: eos });
    }

    #[test]
    fn instance_count_equals_token_count() {
        let (_, batch) = toy();
        let inst = split_instances(&batch);
        assert_eq!(inst.len(), batch.token_count());
        for s in batch.sequences() {
            for (t, &tok) in s.iter().enumerate() {
                assert!(inst.iter().any(|i| i.history == &s[..t] && i.target == tok));
            }
        }
    }

    #[test]
    fn adagrad_first_step_is_unit_scaled() {
        let vocab = Vocabulary::build(&["a"], 10, 1).unwrap();
        let mut m = Model::new(tiny_config(), vocab).unwrap();
        let shapes: Vec<Vec<usize>> = m.params().values().iter().map(|t| t.shape().to_vec()).collect();
        let grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::filled(s, 3.0)).collect();
        adagrad_step(m.params_mut(), &grads, 1.0, 0.0).unwrap();
        assert!(m.params().values().iter().all(|t| t.data().iter().all(|&v| v == -1.0)));
        assert!(m.params().accumulators().iter().all(|t| t.data().iter().all(|&v| v == 9.0)));
    }

    #[test]
    fn adagrad_accumulates() {
        let vocab = Vocabulary::build(&["a"], 10, 1).unwrap();
        let mut m = Model::new(tiny_config(), vocab).unwrap();
        let ones: Vec<Tensor> = m.params().values().iter().map(|t| Tensor::filled(t.shape(), 1.0)).collect();
        adagrad_step(m.params_mut(), &ones, 1.0, 0.0).unwrap();
        let before = m.params().values()[0].data()[0];
        adagrad_step(m.params_mut(), &ones, 1.0, 0.0).unwrap();
        let delta = m.params().values()[0].data()[0] - before;
        assert!((delta + 1.0 / 2f64.sqrt()).abs() < 1e-15);
        let zeros: Vec<Tensor> = m.params().values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let snapshot = m.params().clone();
        adagrad_step(m.params_mut(), &zeros, 1.0, 0.0).unwrap();
        assert_eq!(m.params(), &snapshot);
    }

    #[test]
    fn adagrad_rejects_nan_by_name() {
        let vocab = Vocabulary::build(&["a"], 10, 1).unwrap();
        let mut m = Model::new(tiny_config(), vocab).unwrap();
        let mut grads: Vec<Tensor> = m.params().values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let idx = m.params().index_of("alpha.fc.b").unwrap();
        grads[idx].data_mut()[0] = f64::NAN;
        let snapshot = m.params().clone();
        match adagrad_step(m.params_mut(), &grads, 0.1, 1e-8) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "alpha.fc.b"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(m.params(), &snapshot);
    }

    proptest! {
        #[test]
        fn adagrad_first_touch_is_bounded_by_lr(g in -1e3f64..1e3, lr in 1e-3f64..1.0) {
            let vocab = Vocabulary::build(&["a"], 10, 1).unwrap();
            let mut m = Model::new(tiny_config(), vocab).unwrap();
            let grads: Vec<Tensor> = m.params().values().iter().map(|t| Tensor::filled(t.shape(), g)).collect();
            adagrad_step(m.params_mut(), &grads, lr, 1e-8).unwrap();
            for t in m.params().values() {
                for &v in t.data() {
                    prop_assert!(v.is_finite());
                    prop_assert!(v.abs() <= lr * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let (vocab, _) = toy();
        let cfg = TrainConfig::default();
        let a = init_model(tiny_config(), vocab.clone(), &cfg, 11).unwrap();
        let b = init_model(tiny_config(), vocab.clone(), &cfg, 11).unwrap();
        let c = init_model(tiny_config(), vocab, &cfg, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        for t in a.params().values() {
            assert!(t.data().iter().all(|v| v.abs() <= 0.1));
        }
        assert!(a.params().accumulators().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_range_gives_zero_parameters() {
        let (vocab, _) = toy();
        let cfg = TrainConfig {
            init_range: 0.0,
            ..TrainConfig::default()
        };
        let m = init_model(tiny_config(), vocab, &cfg, 1).unwrap();
        assert!(m.params().values().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn embedding_file_rows_are_copied() {
        let (vocab, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        std::fs::write(&path, "2 4\nw3 0.5 -1 2 0.25\nunseen 1 1 1 1\n").unwrap();
        let cfg = TrainConfig {
            embedding_init: EmbeddingInit::File(path.clone()),
            ..TrainConfig::default()
        };
        let m = init_model(tiny_config(), vocab.clone(), &cfg, 1).unwrap();
        let id = vocab.id("w3").unwrap();
        let e = &m.params().values()[m.layout().embeddings];
        assert_eq!(e.row(id), &[0.5, -1.0, 2.0, 0.25]);

        std::fs::write(&path, "w3 0.5 -1\n").unwrap();
        assert!(matches!(init_model(tiny_config(), vocab, &cfg, 1), Err(Error::Format(_))));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (vocab, batch) = toy();
        let cfg = TrainConfig {
            base_lr: 0.0,
            batch_size: 16,
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut m = init_model(tiny_config(), vocab, &cfg, 3).unwrap();
        let before = m.params().values().to_vec();
        train(&mut m, &batch, &cfg, |_, _| true).unwrap();
        assert_eq!(m.params().values(), &before[..]);
    }

    #[test]
    fn uniform_start_costs_log_v_per_token() {
        let (vocab, batch) = toy();
        let cfg = TrainConfig {
            batch_size: 10_000,
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut m = init_model(tiny_config(), vocab, &cfg, 3).unwrap();
        m.zero_softmax_head();
        let stats = train(&mut m, &batch, &cfg, |_, _| true).unwrap();
        let v = m.vocab().len() as f64;
        assert!((stats[0].mean_nll - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_and_is_reproducible() {
        let (vocab, batch) = toy();
        let cfg = TrainConfig {
            batch_size: 32,
            epochs: 5,
            shuffle_seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = init_model(tiny_config(), vocab.clone(), &cfg, 5).unwrap();
            let stats = train(&mut m, &batch, &cfg, |_, _| true).unwrap();
            (m, stats.iter().map(|s| s.mean_nll).collect::<Vec<_>>())
        };
        let (m1, losses1) = run();
        let (m2, losses2) = run();
        assert_eq!(losses1, losses2);
        assert_eq!(m1, m2);
        assert!(losses1[4] < losses1[0], "{losses1:?}");
    }

    #[test]
    fn hierarchical_training_runs() {
        let (vocab, batch) = toy();
        let cfg = TrainConfig {
            batch_size: 64,
            epochs: 3,
            softmax_mode: SoftmaxMode::Hierarchical,
            ..TrainConfig::default()
        };
        let mut m = init_model(tiny_config(), vocab, &cfg, 5).unwrap();
        let stats = train(&mut m, &batch, &cfg, |_, _| true).unwrap();
        assert!(stats[2].mean_nll < stats[0].mean_nll);
    }

    #[test]
    fn early_stop_callback() {
        let (vocab, batch) = toy();
        let cfg = TrainConfig {
            batch_size: 64,
            epochs: 10,
            ..TrainConfig::default()
        };
        let mut m = init_model(tiny_config(), vocab, &cfg, 5).unwrap();
        let stats = train(&mut m, &batch, &cfg, |_, s| s.epoch < 2).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[1].to_string().split('\t').count(), 4);
    }
}
