//! Node-conditioned prompts: a bottleneck MLP maps each node embedding to an
//! offset added to every context vector, so class weights vary per node.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::{ClassId, FewShotTask, NodeId};
use crate::encoders::{row_l2_normalize, DualEncoder, TextEncoder, TextVars};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::prompting::{prompted_weights, run_tuning, softmax_rows, Examples, PromptState, StepRecord, TuneConfig};
use crate::rng;
use crate::tensor::Matrix;

pub const DEFAULT_HIDDEN_DIM: usize = 8;

/// `π = W_outᵀ ReLU(W_inᵀ z + b_in) + b_out`, stored row-major so that a batch
/// of nodes is `ReLU(Z W_in + b_in) W_out + b_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaNetState {
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl MetaNetState {
    pub fn zeros(embed_dim: usize, hidden_dim: usize, width: usize) -> Self {
        Self {
            w_in: Matrix::zeros(embed_dim, hidden_dim),
            b_in: Matrix::zeros(1, hidden_dim),
            w_out: Matrix::zeros(hidden_dim, width),
            b_out: Matrix::zeros(1, width),
        }
    }

    /// Random input layer and zero output layer, so the freshly initialised
    /// network adds nothing to the prompt.
    pub fn new(embed_dim: usize, hidden_dim: usize, width: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::STREAM_INIT);
        Self {
            w_in: crate::encoders::text::uniform(&mut r, embed_dim, hidden_dim, (embed_dim as f64).powf(-0.5)),
            ..Self::zeros(embed_dim, hidden_dim, width)
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_in.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn width(&self) -> usize {
        self.w_out.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = (self.embed_dim(), self.hidden_dim(), self.width());
        let ok = self.b_in.shape() == (1, h) && self.w_out.rows() == h && self.b_out.shape() == (1, w);
        if !ok || d == 0 || h == 0 || w == 0 {
            return Err(Error::Parameter(format!(
                "inconsistent meta-net shapes: w_in {:?}, b_in {:?}, w_out {:?}, b_out {:?}",
                self.w_in.shape(),
                self.b_in.shape(),
                self.w_out.shape(),
                self.b_out.shape()
            )));
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> [Var; 4] {
        [&self.w_in, &self.b_in, &self.w_out, &self.b_out].map(|m| tape.leaf(m.clone(), trainable))
    }
}

impl Parameters for MetaNetState {
    fn named_params(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("meta.w_in".into(), &self.w_in),
            ("meta.b_in".into(), &self.b_in),
            ("meta.w_out".into(), &self.w_out),
            ("meta.b_out".into(), &self.b_out),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_in, &mut self.b_in, &mut self.w_out, &mut self.b_out]
    }
}

fn meta_rows(tape: &mut Tape, meta: &[Var; 4], z: Var) -> Var {
    let h = tape.linear(z, meta[0], meta[1]);
    let h = tape.relu(h);
    tape.linear(h, meta[2], meta[3])
}

/// `π` for each row of `z`.
pub fn meta_net_forward_rows(state: &MetaNetState, z: &Matrix) -> Result<Matrix> {
    state.validate()?;
    if z.cols() != state.embed_dim() {
        return Err(Error::Parameter(format!(
            "node embedding has {} entries but the meta-net expects {}",
            z.cols(),
            state.embed_dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = state.bind(&mut tape, false);
    let zv = tape.constant(z.clone());
    let pi = meta_rows(&mut tape, &vars, zv);
    Ok(tape.value(pi).clone())
}

pub fn meta_net_forward(state: &MetaNetState, z: &[f64]) -> Result<Vec<f64>> {
    Ok(meta_net_forward_rows(state, &Matrix::row_vector(z))?.into_vec())
}

/// Per-node prefixes `H + π_i` on `tape`.
fn conditioned_prefixes(tape: &mut Tape, h: Var, pi: Var) -> Vec<Var> {
    (0..tape.value(pi).rows())
        .map(|i| {
            let row = tape.gather(pi, vec![i]);
            tape.add_row(h, row)
        })
        .collect()
}

/// Logits `cos(z_i, w_{y,i})`, `n × N`, with every node's own class weights.
fn conditional_logits(
    tape: &mut Tape,
    text: &TextVars,
    h: Var,
    meta: &[Var; 4],
    prompt: &PromptState,
    class_ids: &[ClassId],
    z: &Matrix,
) -> Result<Var> {
    let (stack, spans) = prompt.class_stack(class_ids)?;
    let stack = tape.constant(stack);
    let zv = tape.constant(z.clone());
    let pi = meta_rows(tape, meta, zv);
    let prefixes = conditioned_prefixes(tape, h, pi);
    let w = prompted_weights(tape, text, &prefixes, stack, &spans)?;
    let wn = tape.row_l2_normalize(w);
    let zn = tape.constant(row_l2_normalize(z));
    let all = tape.matmul_nt(zn, wn);
    let (n, k) = (z.rows(), class_ids.len());
    let entries = (0..n).flat_map(|i| (0..k).map(move |y| (i, i * k + y))).collect();
    Ok(tape.pick(all, entries, n, k))
}

/// Row `k` encodes `[h_1 + π, …, h_M + π, h_CLASS(class_ids[k])]` with `π` the
/// meta-net output for `z`.
pub fn conditional_class_weights(
    text: &TextEncoder,
    prompt: &PromptState,
    meta: &MetaNetState,
    z: &[f64],
    class_ids: &[ClassId],
) -> Result<Matrix> {
    prompt.validate(text)?;
    let pi = meta_net_forward(meta, z)?;
    if pi.len() != prompt.tokens.cols() {
        return Err(Error::Parameter(format!(
            "meta-net output width {} differs from prompt width {}",
            pi.len(),
            prompt.tokens.cols()
        )));
    }
    let mut shifted = prompt.clone();
    for r in 0..shifted.tokens.rows() {
        for (h, p) in shifted.tokens.row_mut(r).iter_mut().zip(&pi) {
            *h += p;
        }
    }
    crate::prompting::class_weights_continuous(text, &shifted, class_ids)
}

/// Softmax over `cos(z, w_{y,z})` for one node.
pub fn classify_conditional(
    z: &[f64],
    encoder: &DualEncoder,
    prompt: &PromptState,
    meta: &MetaNetState,
    class_ids: &[ClassId],
) -> Result<Vec<f64>> {
    let w = conditional_class_weights(&encoder.text, prompt, meta, z, class_ids)?;
    Ok(crate::prompting::classify(z, &w))
}

/// Nodes encoded per inference pass of [`classify_conditional_rows`].
const NODE_CHUNK: usize = 64;

/// [`classify_conditional`] for every row of `z`, batched.
pub fn classify_conditional_rows(
    z: &Matrix,
    encoder: &DualEncoder,
    prompt: &PromptState,
    meta: &MetaNetState,
    class_ids: &[ClassId],
) -> Result<Matrix> {
    prompt.validate(&encoder.text)?;
    meta.validate()?;
    let mut parts = Vec::new();
    for start in (0..z.rows()).step_by(NODE_CHUNK) {
        let rows: Vec<usize> = (start..(start + NODE_CHUNK).min(z.rows())).collect();
        let zc = z.select_rows(&rows);
        let mut tape = Tape::new();
        let text = encoder.text.bind(&mut tape, false);
        let h = tape.constant(prompt.tokens.clone());
        let vars = meta.bind(&mut tape, false);
        let logits = conditional_logits(&mut tape, &text, h, &vars, prompt, class_ids, &zc)?;
        parts.push(softmax_rows(tape.value(logits)));
    }
    if parts.is_empty() {
        return Ok(Matrix::zeros(0, class_ids.len()));
    }
    Matrix::vstack(&parts.iter().collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunedConditional {
    pub prompt: PromptState,
    pub meta: MetaNetState,
    pub best_step: usize,
    pub history: Vec<StepRecord>,
}

/// Jointly tunes the context vectors and the meta-net on the support set of
/// `task` (typically every base class pooled into one task), encoders frozen.
pub fn tune_conditional(
    encoder: &DualEncoder,
    z_all: &Matrix,
    task: &FewShotTask,
    prompt0: PromptState,
    meta0: MetaNetState,
    config: &TuneConfig,
) -> Result<TunedConditional> {
    if task.support.is_empty() {
        return Err(Error::Contract("conditional tuning needs at least one support instance".into()));
    }
    prompt0.validate(&encoder.text)?;
    meta0.validate()?;
    let examples = Examples::new(task, &[&task.support, &task.validation])?;
    let z = examples.node_rows(z_all)?;
    let mut params = vec![prompt0.tokens.clone()];
    params.extend(meta0.named_params().into_iter().map(|(_, m)| m.clone()));
    let run = run_tuning(params, config, &examples, |tape, vars| {
        let text = encoder.text.bind(tape, false);
        let meta = [vars[1], vars[2], vars[3], vars[4]];
        conditional_logits(tape, &text, vars[0], &meta, &prompt0, &task.class_ids, &z)
    })?;
    let mut it = run.params.into_iter();
    let mut prompt = prompt0;
    prompt.tokens = it.next().expect("prompt parameter");
    let mut meta = meta0;
    for (dst, src) in meta.params_mut().into_iter().zip(it) {
        *dst = src;
    }
    Ok(TunedConditional {
        prompt,
        meta,
        best_step: run.best_step,
        history: run.history,
    })
}

/// Gradients of [`conditional_objective`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGradients {
    pub tokens: Matrix,
    pub meta: MetaNetState,
}

/// Mean cross-entropy of the conditional classifier on `examples` and its
/// gradient with respect to the context vectors and every meta-net parameter.
pub fn conditional_objective(
    encoder: &DualEncoder,
    z_all: &Matrix,
    class_ids: &[ClassId],
    examples: &[(NodeId, ClassId)],
    prompt: &PromptState,
    meta: &MetaNetState,
) -> Result<(f64, ConditionalGradients)> {
    meta.validate()?;
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
    let vars = meta.bind(&mut tape, true);
    let logits = conditional_logits(&mut tape, &text, h, &vars, prompt, class_ids, &z)?;
    let loss = tape.softmax_cross_entropy(logits, ex.targets);
    let mut grads = tape.backward(loss);
    let mut take = |v: Var, like: &Matrix| grads.take(v).unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()));
    let tokens = take(h, &prompt.tokens);
    let meta_grads = MetaNetState {
        w_in: take(vars[0], &meta.w_in),
        b_in: take(vars[1], &meta.b_in),
        w_out: take(vars[2], &meta.w_out),
        b_out: take(vars[3], &meta.b_out),
    };
    Ok((tape.value(loss).item(), ConditionalGradients { tokens, meta: meta_grads }))
}
