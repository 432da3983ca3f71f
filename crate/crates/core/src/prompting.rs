//! Zero-shot classification with handcrafted templates, and few-shot tuning of
//! continuous prompt vectors in front of the frozen text encoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{sample_neighbors, ClassId, FewShotTask, GraphTextCorpus, NodeId};
use crate::encoders::{row_l2_normalize, DualEncoder, TextEncoder, TextVars, PAD};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::Matrix;

pub const CLASS_PLACEHOLDER: &str = "[CLASS]";

/// A natural-language template with exactly one `[CLASS]` slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DiscretePromptTemplate {
    template: String,
}

impl DiscretePromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        match template.matches(CLASS_PLACEHOLDER).count() {
            1 => Ok(Self { template }),
            n => Err(Error::Template(format!(
                "template {template:?} has {n} {CLASS_PLACEHOLDER} placeholders, expected exactly one"
            ))),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.template
    }

    pub fn fill(&self, label: &str) -> String {
        self.template.replace(CLASS_PLACEHOLDER, label)
    }

    /// One template per nonblank line.
    pub fn parse_lines(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(Self::new)
            .collect()
    }
}

impl Default for DiscretePromptTemplate {
    fn default() -> Self {
        Self {
            template: CLASS_PLACEHOLDER.into(),
        }
    }
}

impl TryFrom<String> for DiscretePromptTemplate {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<DiscretePromptTemplate> for String {
    fn from(t: DiscretePromptTemplate) -> Self {
        t.template
    }
}

fn class_text(class_texts: &BTreeMap<ClassId, String>, class: ClassId) -> Result<&str> {
    let text = class_texts
        .get(&class)
        .ok_or_else(|| Error::Lookup(format!("no label text for class {class}")))?;
    if text.trim().is_empty() {
        return Err(Error::Parameter(format!("label text of class {class} is empty")));
    }
    Ok(text)
}

/// Row `k` is the L2-normalised encoding of the template filled with the
/// label text of `class_ids[k]`.
pub fn class_weights_discrete(
    encoder: &DualEncoder,
    template: &DiscretePromptTemplate,
    class_texts: &BTreeMap<ClassId, String>,
    class_ids: &[ClassId],
) -> Result<Matrix> {
    let seqs = class_ids
        .iter()
        .map(|&c| Ok(encoder.tokenize(&template.fill(class_text(class_texts, c)?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(row_l2_normalize(&encoder.text.encode_batch(&seqs)?))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Softmax over `cos(z, w_y)`; a zero vector has cosine 0 with everything.
pub fn classify(z: &[f64], weights: &Matrix) -> Vec<f64> {
    let z = Matrix::row_vector(z);
    classify_rows(&z, weights).row(0).to_vec()
}

/// [`classify`] for every row of `z`.
pub fn classify_rows(z: &Matrix, weights: &Matrix) -> Matrix {
    softmax_rows(&crate::encoders::cosine_matrix(z, weights))
}

pub(crate) fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let p = softmax(out.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Learnable context vectors plus the frozen label-token embeddings of every
/// class they may be paired with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    /// `M × d_w`; row `m` is `h_{m+1}`.
    pub tokens: Matrix,
    pub class_tokens: BTreeMap<ClassId, Matrix>,
}

impl PromptState {
    /// Pairs `tokens` with the embedded label text (including `<eos>`) of
    /// every class in `class_texts`.
    pub fn for_classes(
        encoder: &DualEncoder,
        tokens: Matrix,
        class_texts: &BTreeMap<ClassId, String>,
    ) -> Result<Self> {
        let class_tokens = class_texts
            .keys()
            .map(|&c| {
                let seq = encoder.tokenize(class_text(class_texts, c)?);
                Ok((c, encoder.text.embed_tokens(&seq)))
            })
            .collect::<Result<_>>()?;
        let state = Self { tokens, class_tokens };
        state.validate(&encoder.text)?;
        Ok(state)
    }

    pub fn validate(&self, text: &TextEncoder) -> Result<()> {
        if self.tokens.rows() == 0 {
            return Err(Error::Parameter("a prompt needs at least one context vector".into()));
        }
        if self.tokens.cols() != text.width() {
            return Err(Error::Parameter(format!(
                "prompt vectors have width {} but the encoder expects {}",
                self.tokens.cols(),
                text.width()
            )));
        }
        for (c, t) in &self.class_tokens {
            if self.tokens.rows() + t.rows() > text.max_len() {
                return Err(Error::Contract(format!(
                    "{} prompt vectors plus {} label tokens of class {c} exceed the maximum length {}",
                    self.tokens.rows(),
                    t.rows(),
                    text.max_len()
                )));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.tokens.rows()
    }

    /// Trainable entries: `M · d_w`.
    pub fn param_count(&self) -> usize {
        self.tokens.len()
    }

    /// Label-token matrices of `class_ids`, stacked, with each class's row span.
    pub(crate) fn class_stack(&self, class_ids: &[ClassId]) -> Result<(Matrix, Vec<(usize, usize)>)> {
        let mut parts = Vec::with_capacity(class_ids.len());
        let mut spans = Vec::with_capacity(class_ids.len());
        let mut start = 0;
        for c in class_ids {
            let t = self
                .class_tokens
                .get(c)
                .ok_or_else(|| Error::Lookup(format!("prompt has no label tokens for class {c}")))?;
            spans.push((start, t.rows()));
            start += t.rows();
            parts.push(t);
        }
        if parts.is_empty() {
            return Err(Error::Parameter("no classes to build weights for".into()));
        }
        Ok((Matrix::vstack(&parts)?, spans))
    }

    /// The encoder input `[h_1 … h_M, h_CLASS(y)]`.
    pub fn sequence(&self, class: ClassId) -> Result<Matrix> {
        let (stack, _) = self.class_stack(&[class])?;
        Matrix::vstack(&[&self.tokens, &stack])
    }
}

/// `M` context vectors drawn uniformly with the token-embedding scale.
pub fn random_prompt(m: usize, width: usize, seed: u64) -> Matrix {
    let mut r = rng::stream(seed, rng::STREAM_INIT);
    crate::encoders::text::uniform(&mut r, m, width, 0.02)
}

/// Position-wise mean of the first-`M`-token embeddings of every support
/// document and up to `eta` sampled neighbours of each; short documents are
/// padded with the `<pad>` embedding.
pub fn init_prompt_from_context(
    corpus: &GraphTextCorpus,
    task: &FewShotTask,
    encoder: &DualEncoder,
    m: usize,
    eta: usize,
    seed: u64,
) -> Result<Matrix> {
    if task.support.is_empty() {
        return Err(Error::Contract("context initialisation needs a nonempty support set".into()));
    }
    if m == 0 {
        return Err(Error::Parameter("a prompt needs at least one context vector".into()));
    }
    let mut sum = Matrix::zeros(m, encoder.text.width());
    let mut count = 0usize;
    for &(node, _) in &task.support {
        let context = sample_neighbors(corpus, node, eta, rng::sub_seed(seed, &[node as u64]))?;
        for doc in std::iter::once(node).chain(context) {
            let mut ids = encoder.vocab.tokenize(corpus.text(doc)?, m + 1);
            ids.pop(); // <eos>
            ids.resize(m, PAD);
            sum.add_assign(&encoder.text.embed_tokens(&ids));
            count += 1;
        }
    }
    Ok(sum.scale(1.0 / count as f64))
}

/// Row `k` is the (unnormalised) encoding of `[h_1 … h_M, h_CLASS(class_ids[k])]`.
pub fn class_weights_continuous(
    text: &TextEncoder,
    prompt: &PromptState,
    class_ids: &[ClassId],
) -> Result<Matrix> {
    prompt.validate(text)?;
    let seqs = class_ids
        .iter()
        .map(|&c| prompt.sequence(c))
        .collect::<Result<Vec<_>>>()?;
    text.encode_embedded_batch(&seqs)
}

/// Records class weights for every prefix on `tape`: row `p · N + y` encodes
/// `[prefixes[p], class_stack span y]`.
pub(crate) fn prompted_weights(
    tape: &mut Tape,
    text: &TextVars,
    prefixes: &[Var],
    class_stack: Var,
    spans: &[(usize, usize)],
) -> Result<Var> {
    let mut sources = prefixes.to_vec();
    sources.push(class_stack);
    let stack_src = prefixes.len();
    let mut index = Vec::new();
    let mut lengths = Vec::with_capacity(prefixes.len() * spans.len());
    for (p, &prefix) in prefixes.iter().enumerate() {
        let m = tape.value(prefix).rows();
        for &(start, len) in spans {
            index.extend((0..m).map(|r| (p, r)));
            index.extend((start..start + len).map(|r| (stack_src, r)));
            lengths.push(m + len);
        }
    }
    let input = tape.gather_multi(sources, index);
    text.encode_embedded(tape, input, crate::encoders::segments(lengths))
}

/// Support and validation examples of a task with their target indices.
pub(crate) struct Examples {
    pub nodes: Vec<NodeId>,
    pub targets: Vec<usize>,
    pub n_support: usize,
}

impl Examples {
    pub(crate) fn new(task: &FewShotTask, labelled: &[&[(NodeId, ClassId)]]) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut targets = Vec::new();
        for set in labelled {
            for &(n, c) in *set {
                let t = task
                    .class_index(c)
                    .ok_or_else(|| Error::Lookup(format!("class {c} is not part of the task")))?;
                nodes.push(n);
                targets.push(t);
            }
        }
        let n_support = labelled.first().map_or(0, |s| s.len());
        Ok(Self {
            nodes,
            targets,
            n_support,
        })
    }

    pub(crate) fn node_rows(&self, z_all: &Matrix) -> Result<Matrix> {
        if let Some(&bad) = self.nodes.iter().find(|&&n| n >= z_all.rows()) {
            return Err(Error::Lookup(format!("no node embedding for node {bad}")));
        }
        Ok(z_all.select_rows(&self.nodes))
    }
}

/// Hyperparameters of prompt tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            steps: 100,
        }
    }
}

/// Support loss and validation metrics of the state before step `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub support_loss: f64,
    pub validation_accuracy: f64,
    pub validation_loss: f64,
}

pub(crate) struct TuningRun {
    pub params: Vec<Matrix>,
    pub best_step: usize,
    pub history: Vec<StepRecord>,
}

fn mean_ce_and_accuracy(logits: &Matrix, rows: std::ops::Range<usize>, targets: &[usize]) -> (f64, f64) {
    let n = rows.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for r in rows {
        let p = softmax(logits.row(r));
        loss -= p[targets[r]].ln();
        if argmax(logits.row(r)) == targets[r] {
            correct += 1;
        }
    }
    (loss / n as f64, correct as f64 / n as f64)
}

/// Adam on `params`, minimising cross-entropy on the first `n_support`
/// logit rows; every visited state is scored on the remaining rows and the
/// best (highest accuracy, then lowest loss) is returned.
pub(crate) fn run_tuning(
    params: Vec<Matrix>,
    config: &TuneConfig,
    examples: &Examples,
    mut logits: impl FnMut(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<TuningRun> {
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Parameter(format!(
            "learning rate must be positive, got {}",
            config.learning_rate
        )));
    }
    let shapes: Vec<_> = params.iter().map(Matrix::shape).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate), &shapes);
    let mut params = params;
    let mut best = (params.clone(), 0, f64::NEG_INFINITY, f64::INFINITY);
    let mut history = Vec::with_capacity(config.steps + 1);
    let ns = examples.n_support;
    let total = examples.targets.len();
    for step in 0..=config.steps {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let all = logits(&mut tape, &vars)?;
        let support = tape.gather(all, (0..ns).collect());
        let loss = tape.softmax_cross_entropy(support, examples.targets[..ns].to_vec());
        let support_loss = tape.value(loss).item();
        if !support_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "prompt tuning loss is {support_loss} at step {step}"
            )));
        }
        let (validation_loss, validation_accuracy) =
            mean_ce_and_accuracy(tape.value(all), ns..total, &examples.targets);
        history.push(StepRecord {
            step,
            support_loss,
            validation_accuracy,
            validation_loss,
        });
        let improves = if ns == total {
            true
        } else {
            validation_accuracy > best.2 || (validation_accuracy == best.2 && validation_loss < best.3)
        };
        if improves {
            best = (params.clone(), step, validation_accuracy, validation_loss);
        }
        if step == config.steps {
            break;
        }
        let grads = tape.backward(loss);
        let slots: Vec<Option<&Matrix>> = vars.iter().map(|&v| grads.get(v)).collect();
        let mut refs: Vec<&mut Matrix> = params.iter_mut().collect();
        adam.step(&mut refs, &slots);
    }
    Ok(TuningRun {
        params: best.0,
        best_step: best.1,
        history,
    })
}

/// Logits `cos(z_i, w_y)` of the rows of `z` against the continuous-prompt
/// class weights, recorded on `tape` with `h` as the prompt node.
fn static_logits(
    tape: &mut Tape,
    text: &TextVars,
    h: Var,
    prompt: &PromptState,
    class_ids: &[ClassId],
    z: &Matrix,
) -> Result<Var> {
    let (stack, spans) = prompt.class_stack(class_ids)?;
    let stack = tape.constant(stack);
    let w = prompted_weights(tape, text, &[h], stack, &spans)?;
    let wn = tape.row_l2_normalize(w);
    let zn = tape.constant(row_l2_normalize(z));
    Ok(tape.matmul_nt(zn, wn))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunedPrompt {
    pub prompt: PromptState,
    pub best_step: usize,
    pub history: Vec<StepRecord>,
}

/// Tunes only the context vectors on the task's support set with the
/// encoders frozen, keeping the state with the best validation score.
pub fn tune_prompt(
    encoder: &DualEncoder,
    z_all: &Matrix,
    task: &FewShotTask,
    prompt0: PromptState,
    config: &TuneConfig,
) -> Result<TunedPrompt> {
    if task.support.is_empty() {
        return Err(Error::Contract("prompt tuning needs at least one support instance".into()));
    }
    prompt0.validate(&encoder.text)?;
    let examples = Examples::new(task, &[&task.support, &task.validation])?;
    let z = examples.node_rows(z_all)?;
    let run = run_tuning(vec![prompt0.tokens.clone()], config, &examples, |tape, vars| {
        let text = encoder.text.bind(tape, false);
        static_logits(tape, &text, vars[0], &prompt0, &task.class_ids, &z)
    })?;
    let mut prompt = prompt0;
    prompt.tokens = run.params.into_iter().next().expect("one parameter");
    Ok(TunedPrompt {
        prompt,
        best_step: run.best_step,
        history: run.history,
    })
}

/// Mean cross-entropy of the continuous-prompt classifier on `examples`
/// (classes indexed by `class_ids`) and its gradient with respect to the
/// context vectors.
pub fn prompt_objective(
    encoder: &DualEncoder,
    z_all: &Matrix,
    class_ids: &[ClassId],
    examples: &[(NodeId, ClassId)],
    prompt: &PromptState,
) -> Result<(f64, Matrix)> {
    let task = FewShotTask {
        class_ids: class_ids.to_vec(),
        support: examples.to_vec(),
        validation: Vec::new(),
        query: Vec::new(),
    };
    let ex = Examples::new(&task, &[examples])?;
    let z = ex.node_rows(z_all)?;
    let mut tape = Tape::new();
    let text = encoder.text.bind(&mut tape, false);
    let h = tape.param(prompt.tokens.clone());
    let logits = static_logits(&mut tape, &text, h, prompt, class_ids, &z)?;
    let loss = tape.softmax_cross_entropy(logits, ex.targets);
    let mut grads = tape.backward(loss);
    let g = grads.take(h).unwrap_or_else(|| Matrix::zeros(prompt.tokens.rows(), prompt.tokens.cols()));
    Ok((tape.value(loss).item(), g))
}

#[cfg(test)]
mod tests;
