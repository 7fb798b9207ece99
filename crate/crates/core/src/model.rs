//! The full conditional model `p(next word | history)`.
//!
//! History is laid out right-aligned against the prediction point: the most
//! recent `L_α − 1` words fill the front-end network's word slots and its
//! leftmost slot carries a summary of everything older. Older words are cut
//! into chunks of `L_β − 1` words, right to left; every chunk is summarized by
//! the same shared-weight network whose own leftmost slot receives the summary
//! of the next older chunk (or a zero pad when there is none).

use std::fmt;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::layers::{Affine, ConvShape, ConvWeights, FcShape, GateMode, GateShape, GateWeights};
use crate::tape::{GradTape, Var};
use crate::tensor::{self, Activation, Tensor};

/// Architectural switches used for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Front-end network without Time-Arrow maps.
    TimeFlowOnly,
    /// Front-end network without Time-Flow maps.
    TimeArrowOnly,
    /// No history summarization; words older than `L_α − 1` are dropped.
    AlphaOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::TimeFlowOnly,
        Ablation::TimeArrowOnly,
        Ablation::AlphaOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::TimeFlowOnly => "time_flow_only",
            Ablation::TimeArrowOnly => "time_arrow_only",
            Ablation::AlphaOnly => "alpha_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Exact softmax over the whole vocabulary, or the two-factor cluster form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SoftmaxMode {
    Full,
    Hierarchical,
}

impl SoftmaxMode {
    pub fn name(self) -> &'static str {
        match self {
            SoftmaxMode::Full => "full",
            SoftmaxMode::Hierarchical => "hierarchical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(SoftmaxMode::Full),
            "hierarchical" => Some(SoftmaxMode::Hierarchical),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Slots of the front-end network (one summary slot plus `l_alpha − 1` words).
    pub l_alpha: usize,
    /// Slots of each summarizer network.
    pub l_beta: usize,
    pub embed_dim: usize,
    pub window: usize,
    /// Time-Flow maps per front-end convolution layer.
    pub tf_maps: Vec<usize>,
    /// Time-Arrow maps per front-end convolution layer.
    pub ta_maps: Vec<usize>,
    /// Maps per summarizer convolution layer (Time-Flow only).
    pub beta_maps: Vec<usize>,
    pub fc_dim: usize,
    pub cluster_count: usize,
    pub ablation: Ablation,
    pub gate_mode: GateMode,
    pub softmax: SoftmaxMode,
    pub conv_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l_alpha: 30,
            l_beta: 20,
            embed_dim: 100,
            window: 3,
            tf_maps: vec![150, 100],
            ta_maps: vec![150, 100],
            beta_maps: vec![150, 150],
            fc_dim: 400,
            cluster_count: 200,
            ablation: Ablation::Full,
            gate_mode: GateMode::Soft,
            softmax: SoftmaxMode::Full,
            conv_activation: Activation::Relu,
        }
    }
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// `(tf, ta)` map counts per front-end layer after applying the ablation.
    pub fn alpha_maps(&self) -> Vec<(usize, usize)> {
        self.tf_maps
            .iter()
            .zip(&self.ta_maps)
            .map(|(&tf, &ta)| match self.ablation {
                Ablation::TimeFlowOnly => (tf, 0),
                Ablation::TimeArrowOnly => (0, ta),
                Ablation::Full | Ablation::AlphaOnly => (tf, ta),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.window == 0 {
            return bad("window must be ≥ 1".into());
        }
        if self.l_alpha <= self.window {
            return bad(format!("l_alpha ({}) must exceed the window ({})", self.l_alpha, self.window));
        }
        if self.l_beta <= self.window {
            return bad(format!("l_beta ({}) must exceed the window ({})", self.l_beta, self.window));
        }
        if self.embed_dim == 0 || self.fc_dim == 0 || self.cluster_count == 0 {
            return bad("embed_dim, fc_dim and cluster_count must be ≥ 1".into());
        }
        if self.tf_maps.is_empty() || self.tf_maps.len() != self.ta_maps.len() {
            return bad("tf_maps and ta_maps must list the same, non-zero number of layers".into());
        }
        if self.beta_maps.is_empty() || self.beta_maps.contains(&0) {
            return bad("beta_maps must list positive map counts".into());
        }
        if self.alpha_maps().iter().any(|&(tf, ta)| tf + ta == 0) {
            return bad(format!("a front-end layer has no feature maps under {}", self.ablation));
        }
        self.alpha_shape()?;
        self.beta_shape()?;
        Ok(())
    }

    pub fn alpha_shape(&self) -> Result<ConvNetShape> {
        ConvNetShape::build(
            "alpha",
            self.l_alpha,
            self.embed_dim,
            self.window,
            &self.alpha_maps(),
            self.fc_dim,
            self.conv_activation,
        )
    }

    pub fn beta_shape(&self) -> Result<ConvNetShape> {
        let maps: Vec<(usize, usize)> = self.beta_maps.iter().map(|&m| (m, 0)).collect();
        ConvNetShape::build(
            "beta",
            self.l_beta,
            self.embed_dim,
            self.window,
            &maps,
            self.embed_dim,
            self.conv_activation,
        )
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "l_alpha={}\nl_beta={}\nembed_dim={}\nwindow={}\ntf_maps={}\nta_maps={}\nbeta_maps={}\n\
             fc_dim={}\ncluster_count={}\nablation={}\ngate_mode={}\nsoftmax={}\nconv_activation={}\n",
            self.l_alpha,
            self.l_beta,
            self.embed_dim,
            self.window,
            join(&self.tf_maps),
            join(&self.ta_maps),
            join(&self.beta_maps),
            self.fc_dim,
            self.cluster_count,
            self.ablation.name(),
            self.gate_mode.name(),
            self.softmax.name(),
            self.conv_activation.name(),
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|_| err(format!("bad number for {key}")));
            let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<_>>>();
            match key {
                "l_alpha" => cfg.l_alpha = num(value)?,
                "l_beta" => cfg.l_beta = num(value)?,
                "embed_dim" => cfg.embed_dim = num(value)?,
                "window" => cfg.window = num(value)?,
                "tf_maps" => cfg.tf_maps = list(value)?,
                "ta_maps" => cfg.ta_maps = list(value)?,
                "beta_maps" => cfg.beta_maps = list(value)?,
                "fc_dim" => cfg.fc_dim = num(value)?,
                "cluster_count" => cfg.cluster_count = num(value)?,
                "ablation" => {
                    cfg.ablation = Ablation::parse(value).ok_or_else(|| err(format!("unknown ablation {value}")))?
                }
                "gate_mode" => {
                    cfg.gate_mode = GateMode::parse(value).ok_or_else(|| err(format!("unknown gate mode {value}")))?
                }
                "softmax" => {
                    cfg.softmax =
                        SoftmaxMode::parse(value).ok_or_else(|| err(format!("unknown softmax mode {value}")))?
                }
                "conv_activation" => {
                    cfg.conv_activation =
                        Activation::parse(value).ok_or_else(|| err(format!("unknown activation {value}")))?
                }
                _ => return Err(err(format!("unknown config key {key}"))),
            }
            seen.push(key.to_string());
        }
        if seen.len() != 13 {
            return Err(Error::Format(format!("config block has {} of 13 fields", seen.len())));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Convolution + gating stacks
// ---------------------------------------------------------------------------

/// Geometry of a conv→gate→…→fc stack over a fixed number of input slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetShape {
    pub slots: usize,
    pub layers: Vec<(ConvShape, GateShape)>,
    pub fc: FcShape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetWeights<T> {
    pub convs: Vec<ConvWeights<T>>,
    pub gates: Vec<GateWeights<T>>,
    pub fc: Affine<T>,
}

impl<T> ConvNetWeights<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> ConvNetWeights<U> {
        ConvNetWeights {
            convs: self.convs.iter().map(|c| c.map(f)).collect(),
            gates: self.gates.iter().map(|g| g.map(f)).collect(),
            fc: self.fc.map(f),
        }
    }

    pub fn for_each<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        for (c, g) in self.convs.iter().zip(&self.gates) {
            c.for_each(f);
            g.for_each(f);
        }
        self.fc.for_each(f);
    }
}

impl ConvNetShape {
    pub fn build(
        name: &str,
        slots: usize,
        d: usize,
        window: usize,
        maps: &[(usize, usize)],
        fc_out: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut len = slots;
        let mut d_in = d;
        let mut layers = Vec::new();
        for (l, &(tf, ta)) in maps.iter().enumerate() {
            if len < window {
                return Err(Error::Config(format!(
                    "{name}: layer {l} receives {len} positions, fewer than the window {window}"
                )));
            }
            let conv = ConvShape {
                window,
                d_in,
                tf_maps: tf,
                ta_maps: ta,
                locations: len - window + 1,
                activation,
            };
            let gate = GateShape::after(&conv);
            len = gate.rows_out();
            d_in = conv.out_maps();
            layers.push((conv, gate));
        }
        Ok(ConvNetShape {
            slots,
            layers,
            fc: FcShape {
                d_in: len * d_in,
                d_out: fc_out,
                activation: Activation::Sigmoid,
            },
        })
    }

    pub fn allocate<T>(&self, prefix: &str, alloc: &mut impl FnMut(String, Vec<usize>) -> T) -> ConvNetWeights<T> {
        let mut convs = Vec::new();
        let mut gates = Vec::new();
        for (l, (conv, gate)) in self.layers.iter().enumerate() {
            convs.push(conv.allocate(&format!("{prefix}.conv{l}"), alloc));
            gates.push(gate.allocate(&format!("{prefix}.gate{l}"), alloc));
        }
        let fc = self.fc.allocate(&format!("{prefix}.fc"), alloc);
        ConvNetWeights { convs, gates, fc }
    }

    /// Runs the stack on `input[slots × d]`, returning `[1 × fc_out]`.
    pub fn forward(
        &self,
        tape: &mut GradTape<'_>,
        w: &ConvNetWeights<Var>,
        input: Var,
        gate_mode: GateMode,
    ) -> Result<Var> {
        let mut x = input;
        for (l, (conv, gate)) in self.layers.iter().enumerate() {
            let out = conv.forward(tape, &w.convs[l], x)?;
            x = gate.forward(tape, &w.gates[l], &out, gate_mode)?;
        }
        self.fc.forward(tape, &w.fc, x)
    }
}

// ---------------------------------------------------------------------------
// History layout
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Word(usize),
    /// Zero vector (missing history or a switched-off summary).
    Pad,
    /// Output of the next older summarizer chunk.
    Summary,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryLayout {
    pub alpha: Vec<Slot>,
    /// Summarizer inputs, oldest first.
    pub beta_chunks: Vec<Vec<Slot>>,
}

/// Slot list of length `1 + width`: the reserved first slot, left pads, then
/// `words` right-aligned.
fn fill(first: Slot, words: &[usize], width: usize) -> Vec<Slot> {
    let mut slots = Vec::with_capacity(width + 1);
    slots.push(first);
    slots.extend(std::iter::repeat_n(Slot::Pad, width - words.len()));
    slots.extend(words.iter().map(|&w| Slot::Word(w)));
    slots
}

/// Assigns history words to network slots; see the module docs.
pub fn layout_history(history: &[usize], config: &ModelConfig) -> HistoryLayout {
    let alpha_words = config.l_alpha - 1;
    let history = if config.ablation == Ablation::AlphaOnly && history.len() > alpha_words {
        &history[history.len() - alpha_words..]
    } else {
        history
    };
    if history.len() <= alpha_words {
        return HistoryLayout {
            alpha: fill(Slot::Pad, history, alpha_words),
            beta_chunks: Vec::new(),
        };
    }
    let split = history.len() - alpha_words;
    let alpha = fill(Slot::Summary, &history[split..], alpha_words);
    let chunk = config.l_beta - 1;
    let rest = &history[..split];
    let mut pieces: Vec<&[usize]> = rest.rchunks(chunk).collect();
    pieces.reverse();
    let beta_chunks = pieces
        .iter()
        .enumerate()
        .map(|(i, words)| fill(if i == 0 { Slot::Pad } else { Slot::Summary }, words, chunk))
        .collect();
    HistoryLayout { alpha, beta_chunks }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Parameter roles. `T` is a parameter index, a tensor or a tape handle.
#[derive(Clone, Debug, PartialEq)]
pub struct NetLayout<T> {
    pub embeddings: T,
    pub alpha: ConvNetWeights<T>,
    pub beta: ConvNetWeights<T>,
    pub cluster: Affine<T>,
    pub word: Affine<T>,
}

impl<T> NetLayout<T> {
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&'a T) -> U) -> NetLayout<U> {
        NetLayout {
            embeddings: f(&self.embeddings),
            alpha: self.alpha.map(f),
            beta: self.beta.map(f),
            cluster: self.cluster.map(f),
            word: self.word.map(f),
        }
    }
}

/// Named parameter tensors with one AdaGrad accumulator each.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    accumulators: Vec<Tensor>,
}

impl ParameterSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accumulators
    }

    /// Simultaneous mutable access to values and accumulators.
    pub fn split_mut(&mut self) -> (&[String], &mut [Tensor], &mut [Tensor]) {
        (&self.names, &mut self.values, &mut self.accumulators)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Configuration, vocabulary and parameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    alpha: ConvNetShape,
    beta: ConvNetShape,
    layout: NetLayout<usize>,
    params: ParameterSet,
}

impl Model {
    /// A model with every parameter and accumulator set to zero.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let alpha = config.alpha_shape()?;
        let beta = config.beta_shape()?;
        let mut names = Vec::new();
        let mut values = Vec::new();
        let mut alloc = |name: String, shape: Vec<usize>| {
            names.push(name);
            values.push(Tensor::zeros(&shape));
            values.len() - 1
        };
        let (v, d, fc, c) = (vocab.len(), config.embed_dim, config.fc_dim, vocab.cluster_count());
        let embeddings = alloc("embeddings".into(), vec![v, d]);
        let alpha_w = alpha.allocate("alpha", &mut alloc);
        let beta_w = beta.allocate("beta", &mut alloc);
        let cluster = Affine {
            w: alloc("softmax.cluster.w".into(), vec![c, fc]),
            b: alloc("softmax.cluster.b".into(), vec![c]),
        };
        let word = Affine {
            w: alloc("softmax.word.w".into(), vec![v, fc]),
            b: alloc("softmax.word.b".into(), vec![v]),
        };
        let layout = NetLayout {
            embeddings,
            alpha: alpha_w,
            beta: beta_w,
            cluster,
            word,
        };
        let accumulators = values.iter().map(|t: &Tensor| Tensor::zeros(t.shape())).collect();
        Ok(Model {
            config,
            vocab,
            alpha,
            beta,
            layout,
            params: ParameterSet {
                names,
                values,
                accumulators,
            },
        })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match the
    /// layout implied by `config` and `vocab` exactly.
    pub fn from_tensors(
        config: ModelConfig,
        vocab: Vocabulary,
        values: Vec<(String, Tensor)>,
        accumulators: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut model = Model::new(config, vocab)?;
        let expect = model.params.names.len();
        if values.len() != expect || accumulators.len() != expect {
            return Err(Error::Format(format!(
                "expected {expect} parameter tensors and accumulators, got {} and {}",
                values.len(),
                accumulators.len()
            )));
        }
        for (i, ((name, v), (acc_name, a))) in values.into_iter().zip(accumulators).enumerate() {
            let want = &model.params.names[i];
            if &name != want || &acc_name != want {
                return Err(Error::Format(format!("tensor {i} is `{name}`, expected `{want}`")));
            }
            let shape = model.params.values[i].shape();
            if v.shape() != shape || a.shape() != shape {
                return Err(Error::shape("load tensor", v.shape(), shape));
            }
            model.params.values[i] = v;
            model.params.accumulators[i] = a;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn layout(&self) -> &NetLayout<usize> {
        &self.layout
    }

    pub fn alpha_shape(&self) -> &ConvNetShape {
        &self.alpha
    }

    pub fn beta_shape(&self) -> &ConvNetShape {
        &self.beta
    }

    /// Switches the ablation used when laying out histories. Only
    /// `Full ↔ AlphaOnly` keeps the parameter layout valid.
    pub fn set_layout_ablation(&mut self, ablation: Ablation) -> Result<()> {
        let compatible = |a: Ablation| matches!(a, Ablation::Full | Ablation::AlphaOnly);
        if !(compatible(ablation) && compatible(self.config.ablation)) {
            return Err(Error::Config(format!(
                "cannot switch from {} to {} without changing parameter shapes",
                self.config.ablation, ablation
            )));
        }
        self.config.ablation = ablation;
        Ok(())
    }

    /// Sets the softmax head (cluster and word weights and biases) to zero.
    pub fn zero_softmax_head(&mut self) {
        let l = &self.layout;
        for i in [l.cluster.w, l.cluster.b, l.word.w, l.word.b] {
            self.params.values[i] = Tensor::zeros(self.params.values[i].shape());
        }
    }

    pub fn layout_history(&self, history: &[usize]) -> HistoryLayout {
        layout_history(history, &self.config)
    }

    /// Registers every parameter on `tape`; handles are indexed like the
    /// parameter set.
    pub fn trace<'p>(&'p self, tape: &mut GradTape<'p>) -> (Vec<Var>, NetLayout<Var>) {
        let vars: Vec<Var> = self.params.values.iter().map(|t| tape.param(t)).collect();
        let roles = self.layout.map(&mut |&i| vars[i]);
        (vars, roles)
    }

    fn assemble(&self, tape: &mut GradTape<'_>, emb: Var, slots: &[Slot], summary: Option<Var>) -> Result<Var> {
        let ids: Vec<Option<usize>> = slots
            .iter()
            .map(|s| match *s {
                Slot::Word(id) => Some(id),
                Slot::Pad | Slot::Summary => None,
            })
            .collect();
        match (slots.first(), summary) {
            (Some(Slot::Summary), Some(summary)) => {
                let rest = tape.gather_rows(emb, &ids[1..])?;
                tape.stack_rows(&[summary, rest])
            }
            (Some(Slot::Summary), None) => Err(Error::Contract("summary slot without a summary".into())),
            _ => tape.gather_rows(emb, &ids),
        }
    }

    /// The representation `φ` of a laid-out history, `[1 × fc_dim]`.
    pub fn represent(&self, tape: &mut GradTape<'_>, w: &NetLayout<Var>, layout: &HistoryLayout) -> Result<Var> {
        let mut summary = None;
        for chunk in &layout.beta_chunks {
            let input = self.assemble(tape, w.embeddings, chunk, summary)?;
            summary = Some(self.beta.forward(tape, &w.beta, input, self.config.gate_mode)?);
        }
        let input = self.assemble(tape, w.embeddings, &layout.alpha, summary)?;
        self.alpha.forward(tape, &w.alpha, input, self.config.gate_mode)
    }

    /// `log p(target | φ)` as a tape scalar.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut GradTape<'_>,
        w: &NetLayout<Var>,
        phi: Var,
        target: usize,
        mode: SoftmaxMode,
    ) -> Result<Var> {
        if target >= self.vocab.len() {
            return Err(Error::Contract(format!("word id {target} outside the vocabulary")));
        }
        match mode {
            SoftmaxMode::Full => {
                let logits = tape.matmul_bt(phi, w.word.w)?;
                let logits = tape.add_bias(logits, w.word.b)?;
                tape.log_softmax_at(logits, target)
            }
            SoftmaxMode::Hierarchical => {
                let cluster = self.vocab.cluster_of(target);
                let cl = tape.matmul_bt(phi, w.cluster.w)?;
                let cl = tape.add_bias(cl, w.cluster.b)?;
                let lp_cluster = tape.log_softmax_at(cl, cluster)?;
                let members: Vec<Option<usize>> =
                    self.vocab.cluster_members(cluster).iter().map(|&m| Some(m)).collect();
                let mw = tape.gather_rows(w.word.w, &members)?;
                let mb = tape.gather_rows(w.word.b, &members)?;
                let ml = tape.matmul_bt(phi, mw)?;
                let ml = tape.add_bias(ml, mb)?;
                let lp_word = tape.log_softmax_at(ml, self.vocab.position_in_cluster(target))?;
                tape.add(lp_cluster, lp_word)
            }
        }
    }

    /// `φ(history)` as a plain vector of length `fc_dim`.
    pub fn representation(&self, history: &[usize]) -> Result<Tensor> {
        let layout = self.layout_history(history);
        let mut tape = GradTape::new();
        let (_, w) = self.trace(&mut tape);
        let phi = self.represent(&mut tape, &w, &layout)?;
        tape.value(phi).reshape(&[self.config.fc_dim])
    }

    fn scores(&self, phi: &Tensor, w: usize, b: usize, rows: impl Iterator<Item = usize>) -> Vec<f64> {
        let wt = &self.params.values[w];
        let bt = self.params.values[b].data();
        let fc = self.config.fc_dim;
        rows.map(|r| tensor::dot(&wt.data()[r * fc..(r + 1) * fc], phi.data()) + bt[r])
            .collect()
    }

    /// Raw word scores `μ_e·φ + b_e` for every word.
    pub fn word_scores(&self, phi: &Tensor) -> Vec<f64> {
        self.scores(phi, self.layout.word.w, self.layout.word.b, 0..self.vocab.len())
    }

    /// Softmax over all word scores.
    pub fn predict_full(&self, phi: &Tensor) -> Vec<f64> {
        let mut p = self.word_scores(phi);
        tensor::softmax_in_place(&mut p);
        p
    }

    /// `p(cluster(word) | φ) · p(word | cluster, φ)`.
    pub fn predict_hierarchical(&self, phi: &Tensor, word: usize) -> Result<f64> {
        if word >= self.vocab.len() {
            return Err(Error::Contract(format!("word id {word} outside the vocabulary")));
        }
        let cluster = self.vocab.cluster_of(word);
        let mut pc = self.scores(
            phi,
            self.layout.cluster.w,
            self.layout.cluster.b,
            0..self.vocab.cluster_count(),
        );
        tensor::softmax_in_place(&mut pc);
        let members = self.vocab.cluster_members(cluster);
        let mut pw = self.scores(phi, self.layout.word.w, self.layout.word.b, members.iter().copied());
        tensor::softmax_in_place(&mut pw);
        Ok(pc[cluster] * pw[self.vocab.position_in_cluster(word)])
    }

    /// `log p(target | history)`.
    pub fn log_prob(&self, history: &[usize], target: usize, mode: SoftmaxMode) -> Result<f64> {
        let layout = self.layout_history(history);
        let mut tape = GradTape::new();
        let (_, w) = self.trace(&mut tape);
        let phi = self.represent(&mut tape, &w, &layout)?;
        let lp = self.log_prob_on_tape(&mut tape, &w, phi, target, mode)?;
        tape.value(lp).item()
    }

    /// Sum of `log p(token_t | tokens_<t)` over every token, EOS included.
    pub fn log_prob_sentence(&self, sentence: &[usize], mode: SoftmaxMode) -> Result<f64> {
        if sentence.is_empty() {
            return Err(Error::Contract("empty sentence".into()));
        }
        if sentence.last() != Some(&self.vocab.eos_id()) {
            return Err(Error::Contract("sentence must end with EOS".into()));
        }
        (0..sentence.len())
            .map(|t| self.log_prob(&sentence[..t], sentence[t], mode))
            .sum()
    }

    /// Full-softmax next-word distribution after `history`.
    pub fn next_word_distribution(&self, history: &[usize]) -> Result<Vec<f64>> {
        Ok(self.predict_full(&self.representation(history)?))
    }
}
