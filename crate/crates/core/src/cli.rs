//! Command-line front end: `train`, `eval`, `generate`, `rerank`, `probe`.
//!
//! Exit status is 0 on success, 1 on usage or configuration errors and 2 on
//! I/O, format and runtime errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{read_lines, SentenceBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{dynamic_perplexity, long_range_probe, perplexity, DynamicConfig};
use crate::generation::{sample_sentence, GenConfig};
use crate::layers::GateMode;
use crate::model::{Ablation, Model, ModelConfig, SoftmaxMode};
use crate::model_file;
use crate::rerank::{format_rescored, parse_nbest, rescore, RerankConfig};
use crate::tensor::Activation;
use crate::training::{init_model, train, EmbeddingInit, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "gencnn", version, about = "Convolutional language model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a vocabulary, train a model and write the model file.
    Train(Box<TrainArgs>),
    /// Report static or dynamic perplexity on a corpus.
    Eval(EvalArgs),
    /// Sample sentences.
    Generate(GenerateArgs),
    /// Re-rank an n-best list.
    Rerank(RerankArgs),
    /// Measure how log-probabilities react to replacing distant words.
    Probe(ProbeArgs),
}

/// Comma-separated map counts, one per layer.
#[derive(Clone, Debug)]
pub struct MapList(pub Vec<usize>);

fn parse_maps(s: &str) -> std::result::Result<MapList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(MapList)
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("expected one of full, time_flow_only, time_arrow_only, alpha_only; got `{s}`"))
}

fn parse_gate(s: &str) -> std::result::Result<GateMode, String> {
    GateMode::parse(s).ok_or_else(|| format!("expected soft or hard; got `{s}`"))
}

fn parse_softmax(s: &str) -> std::result::Result<SoftmaxMode, String> {
    SoftmaxMode::parse(s).ok_or_else(|| format!("expected full or hierarchical; got `{s}`"))
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    Activation::parse(s).ok_or_else(|| format!("expected relu or sigmoid; got `{s}`"))
}

#[derive(Args, Debug)]
pub struct ModelFlags {
    #[arg(long, default_value_t = 30)]
    pub l_alpha: usize,
    #[arg(long, default_value_t = 20)]
    pub l_beta: usize,
    #[arg(long, default_value_t = 100)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Comma-separated Time-Flow map counts per front-end layer.
    #[arg(long, default_value = "150,100", value_parser = parse_maps)]
    pub tf_maps: MapList,
    /// Comma-separated Time-Arrow map counts per front-end layer.
    #[arg(long, default_value = "150,100", value_parser = parse_maps)]
    pub ta_maps: MapList,
    /// Comma-separated map counts per summarizer layer.
    #[arg(long, default_value = "150,150", value_parser = parse_maps)]
    pub beta_maps: MapList,
    #[arg(long, default_value_t = 400)]
    pub fc_dim: usize,
    #[arg(long, default_value_t = 200)]
    pub clusters: usize,
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    pub ablation: Ablation,
    #[arg(long, default_value = "soft", value_parser = parse_gate)]
    pub gate_mode: GateMode,
    #[arg(long, default_value = "full", value_parser = parse_softmax)]
    pub softmax: SoftmaxMode,
    #[arg(long, default_value = "relu", value_parser = parse_activation)]
    pub conv_activation: Activation,
}

impl ModelFlags {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            l_alpha: self.l_alpha,
            l_beta: self.l_beta,
            embed_dim: self.embed_dim,
            window: self.window,
            tf_maps: self.tf_maps.0.clone(),
            ta_maps: self.ta_maps.0.clone(),
            beta_maps: self.beta_maps.0.clone(),
            fc_dim: self.fc_dim,
            cluster_count: self.clusters,
            ablation: self.ablation,
            gate_mode: self.gate_mode,
            softmax: self.softmax,
            conv_activation: self.conv_activation,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use this vocabulary file instead of building one from the corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Also write the vocabulary to this file.
    #[arg(long)]
    pub vocab_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub vocab_size: usize,
    /// Append one `epoch  mean_nll  ppl  seconds` line per epoch here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adagrad_eps: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub init_range: f64,
    /// Initial word vectors, `word v1 … vd` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Update parameters online after scoring each sentence.
    #[arg(long)]
    pub dynamic: bool,
    /// Learning rate for dynamic evaluation.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Refuse to run unless the model's vocabulary equals this file.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Drop history beyond the front-end window.
    #[arg(long)]
    pub alpha_only: bool,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    /// Space-separated tokens every sample starts with.
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 100)]
    pub max_length: usize,
    /// Pick the most probable word at every step.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub nbest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long)]
    pub length_norm: bool,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub alpha_only: bool,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 1;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, err),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Rerank(a) => cmd_rerank(&a, out),
        Command::Probe(a) => cmd_probe(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_corpus(path: &std::path::Path, vocab: &Vocabulary) -> Result<SentenceBatch> {
    Ok(SentenceBatch::encode_lines(vocab, &read_lines(path)?))
}

fn with_layout(mut model: Model, alpha_only: bool) -> Result<Model> {
    if alpha_only {
        model.set_layout_ablation(Ablation::AlphaOnly).map_err(|e| usage(e.to_string()))?;
    }
    Ok(model)
}

pub fn cmd_train(a: &TrainArgs, log: &mut dyn Write) -> Result<()> {
    if !(a.lr > 0.0) {
        return Err(usage("--lr must be positive"));
    }
    if !(a.init_range > 0.0) {
        return Err(usage("--init-range must be positive"));
    }
    let config = a.model.config();
    config.validate()?;
    let train_cfg = TrainConfig {
        batch_size: a.batch_size,
        base_lr: a.lr,
        adagrad_eps: a.adagrad_eps,
        epochs: a.epochs,
        shuffle_seed: 0,
        init_range: a.init_range,
        softmax_mode: config.softmax,
        embedding_init: a.embeddings.clone().map_or(EmbeddingInit::Uniform, EmbeddingInit::File),
    };
    train_cfg.validate()?;
    let mut seeds = ChaCha8Rng::seed_from_u64(a.seed);
    let init_seed = seeds.next_u64();
    let train_cfg = TrainConfig {
        shuffle_seed: seeds.next_u64(),
        ..train_cfg
    };

    let lines = read_lines(&a.corpus)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(&lines, a.vocab_size, config.cluster_count)?,
    };
    if let Some(p) = &a.vocab_out {
        vocab.save(p)?;
    }
    let corpus = SentenceBatch::encode_lines(&vocab, &lines);
    let mut model = init_model(config, vocab, &train_cfg, init_seed)?;
    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut io_error = None;
    train(&mut model, &corpus, &train_cfg, |_, stats| {
        let _ = writeln!(log, "{stats}");
        if let (Some(f), Some(p)) = (log_file.as_mut(), a.log.as_ref()) {
            if let Err(e) = writeln!(f, "{stats}").and_then(|_| f.flush()) {
                io_error = Some(Error::io(p, e));
                return false;
            }
        }
        true
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    model_file::save(&model, &a.out)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = with_layout(model_file::load(&a.model)?, a.alpha_only)?;
    if let Some(p) = &a.vocab {
        let other = Vocabulary::load(p)?;
        if other.fingerprint() != model.vocab().fingerprint() {
            return Err(Error::VocabMismatch(format!(
                "{} does not match the vocabulary the model was trained with",
                p.display()
            )));
        }
    }
    let corpus = load_corpus(&a.corpus, model.vocab())?;
    let mode = model.config().softmax;
    let report = if a.dynamic {
        if !(a.lr > 0.0) {
            return Err(usage("--lr must be positive"));
        }
        dynamic_perplexity(&model, &corpus, mode, &DynamicConfig { lr: a.lr, eps: 1e-8 })?
    } else {
        perplexity(&model, &corpus, mode)?
    };
    writeln!(out, "{report}").map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let model = model_file::load(&a.model)?;
    let prefix = a
        .prefix
        .as_deref()
        .map(|p| p.split_whitespace().map(|w| model.vocab().id_or_unk(w)).collect())
        .unwrap_or_default();
    let cfg = GenConfig {
        max_length: a.max_length,
        temperature: a.temperature,
        greedy: a.greedy,
        prefix,
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for _ in 0..a.n {
        let g = sample_sentence(&model, &cfg, &mut rng)?;
        writeln!(out, "{}", g.surface(&model)).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

pub fn cmd_rerank(a: &RerankArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RerankConfig {
        lambda: a.lambda,
        length_norm: a.length_norm,
    };
    cfg.validate()?;
    let model = model_file::load(&a.model)?;
    let text = std::fs::read_to_string(&a.nbest).map_err(|e| Error::io(&a.nbest, e))?;
    for list in parse_nbest(&text)? {
        let ranked = rescore(&model, &list, &cfg, model.config().softmax)?;
        write!(out, "{}", format_rescored(&list.segment_id, &ranked)).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

pub fn cmd_probe(a: &ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let model = with_layout(model_file::load(&a.model)?, a.alpha_only)?;
    let corpus = load_corpus(&a.corpus, model.vocab())?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = long_range_probe(&model, &corpus, a.k_max, a.trials, model.config().softmax, &mut rng)?;
    write!(out, "{}", report.to_csv()).map_err(|e| Error::io("<stdout>", e))
}
