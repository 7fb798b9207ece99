#![allow(dead_code)]

use gencnn::corpus::{SentenceBatch, Vocabulary};
use gencnn::model::{Model, ModelConfig, SoftmaxMode};
use gencnn::tape::GradTape;
use gencnn::training::{init_model, TrainConfig};
use gencnn::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// L_α=6, L_β=4, d=2, k=2, one Time-Flow and one Time-Arrow map, fc=3, C=2.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        l_alpha: 6,
        l_beta: 4,
        embed_dim: 2,
        window: 2,
        tf_maps: vec![1, 1],
        ta_maps: vec![1, 1],
        beta_maps: vec![1, 1],
        fc_dim: 3,
        cluster_count: 2,
        ..ModelConfig::default()
    }
}

/// Seven entries: UNK, EOS and five words.
pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::build(&["a b c d e a b c a b a"], 7, 2).unwrap()
}

pub fn random_model(config: ModelConfig, vocab: Vocabulary, range: f64, seed: u64) -> Model {
    let train = TrainConfig {
        init_range: range,
        ..TrainConfig::default()
    };
    init_model(config, vocab, &train, seed).unwrap()
}

/// `−Σ log p` over every token of `sentence`, with gradients for every
/// parameter tensor.
pub fn sentence_loss_and_grads(model: &Model, sentence: &[usize], mode: SoftmaxMode) -> (f64, Vec<Tensor>) {
    let mut tape = GradTape::new();
    let (vars, w) = model.trace(&mut tape);
    let mut total = None;
    for t in 0..sentence.len() {
        let layout = model.layout_history(&sentence[..t]);
        let phi = model.represent(&mut tape, &w, &layout).unwrap();
        let lp = model.log_prob_on_tape(&mut tape, &w, phi, sentence[t], mode).unwrap();
        total = Some(match total {
            None => lp,
            Some(acc) => tape.add(acc, lp).unwrap(),
        });
    }
    let total = total.unwrap();
    let loss = -tape.value(total).item().unwrap();
    let grads = tape.backward_with_seed(total, -1.0).unwrap();
    let g = vars.iter().map(|&v| grads.wrt(v).unwrap()).collect();
    (loss, g)
}

pub fn sentence_loss(model: &Model, sentence: &[usize], mode: SoftmaxMode) -> f64 {
    -model.log_prob_sentence(sentence, mode).unwrap()
}

pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
}

/// Central differences (step `h`) for every coordinate of every tensor;
/// error per tensor is `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
pub fn gradient_check(model: &Model, sentence: &[usize], mode: SoftmaxMode, h: f64) -> Vec<TensorCheck> {
    let (_, analytic) = sentence_loss_and_grads(model, sentence, mode);
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let orig = probe.params().values()[i].data()[j];
            probe.params_mut().values_mut()[i].data_mut()[j] = orig + h;
            let plus = sentence_loss(&probe, sentence, mode);
            probe.params_mut().values_mut()[i].data_mut()[j] = orig - h;
            let minus = sentence_loss(&probe, sentence, mode);
            probe.params_mut().values_mut()[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * h));
        }
        let norm = |xs: &mut dyn Iterator<Item = f64>| xs.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut a.data().iter().zip(&numeric).map(|(x, y)| x - y));
        let scale = norm(&mut a.data().iter().copied()).max(norm(&mut numeric.iter().copied()));
        let rel_error = if scale == 0.0 { 0.0 } else { diff / scale };
        out.push(TensorCheck {
            name: model.params().names()[i].clone(),
            rel_error,
        });
    }
    out
}

pub fn encode(vocab: &Vocabulary, lines: &[String]) -> SentenceBatch {
    SentenceBatch::encode_lines(vocab, lines)
}

/// `n` sentences of `len` random filler words, each opened by its own
/// marker word so that no two sentences share a prefix.
pub fn memorization_corpus(n: usize, len: usize, fillers: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut words = vec![format!("s{i}")];
            words.extend((1..len).map(|_| format!("w{}", rng.gen_range(0..fillers))));
            words.join(" ")
        })
        .collect()
}

/// Sentences of `len` words over `v` symbols where word `t` is
/// `(3·w[t−1] + offset[t] + noise) mod v` with small noise, so both the
/// previous word and the position matter.
pub fn positional_corpus(n: usize, len: usize, v: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<usize> = (0..len).map(|_| rng.gen_range(0..v)).collect();
    (0..n)
        .map(|_| {
            let mut prev = rng.gen_range(0..v);
            let mut words = vec![format!("x{prev}")];
            for &off in &offsets[1..] {
                let noise = [0, 0, 0, 1, 2][rng.gen_range(0..5)];
                prev = (3 * prev + off + noise) % v;
                words.push(format!("x{prev}"));
            }
            words.join(" ")
        })
        .collect()
}

/// Concatenated segments: a key word, `gap` filler words, then an answer
/// word determined by the key. The answer sits further back than `gap`.
pub fn long_range_corpus(n: usize, keys: usize, gap: usize, fillers: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(0..keys);
            let mut words = vec![format!("k{k}"), ".".to_string()];
            words.extend((0..gap).map(|_| format!("f{}", rng.gen_range(0..fillers))));
            words.push(".".to_string());
            words.push(format!("a{k}"));
            words.join(" ")
        })
        .collect()
}

/// Sentences containing properly paired quotation marks.
pub fn quote_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = ["he", "she", "they", "we"];
    let verbs = ["said", "wrote", "asked", "noted"];
    let words = ["yes", "no", "maybe", "soon", "later", "never", "now", "here"];
    (0..n)
        .map(|_| {
            let mut t = vec![subjects.choose(&mut rng).unwrap().to_string(), verbs.choose(&mut rng).unwrap().to_string()];
            t.push("``".into());
            for _ in 0..rng.gen_range(1..4) {
                t.push(words.choose(&mut rng).unwrap().to_string());
            }
            t.push("''".into());
            if rng.gen_bool(0.3) {
                t.push("and".into());
                t.push("``".into());
                t.push(words.choose(&mut rng).unwrap().to_string());
                t.push("''".into());
            }
            t.push(".".into());
            t.join(" ")
        })
        .collect()
}
