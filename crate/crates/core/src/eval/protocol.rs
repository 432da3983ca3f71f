use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{accuracy, aggregate_tasks, harmonic_mean, macro_f1, EvalReport, TaskMetrics};
use crate::conditional::{classify_conditional_rows, tune_conditional, MetaNetState, DEFAULT_HIDDEN_DIM};
use crate::corpus::{
    sample_task, split_base_unseen, ClassId, FewShotTask, GraphTextCorpus, NodeId, SplitMode, SplitSpec,
};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::prompting::{
    argmax, class_weights_continuous, class_weights_discrete, classify_rows, init_prompt_from_context,
    random_prompt, tune_prompt, DiscretePromptTemplate, PromptState, TuneConfig,
};
use crate::rng;
use crate::tensor::Matrix;

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Handcrafted template, no labelled data.
    ZeroDiscrete,
    /// Continuous prompt tuned on the support set.
    FewshotStatic,
    /// Continuous prompt plus meta-net, conditioned on each node.
    Conditional,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ZeroDiscrete => "zero-discrete",
            Method::FewshotStatic => "fewshot-static",
            Method::Conditional => "conditional",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-discrete" => Ok(Method::ZeroDiscrete),
            "fewshot-static" => Ok(Method::FewshotStatic),
            "conditional" => Ok(Method::Conditional),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected zero-discrete, fewshot-static or conditional"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub method: Method,
    pub n_way: usize,
    pub k_shot: usize,
    /// Tasks per seed in the standard and inductive protocols; the
    /// class-split protocols run one split per seed.
    pub tasks_per_seed: usize,
    pub seeds: Vec<u64>,
    pub template: DiscretePromptTemplate,
    /// `M`.
    pub prompt_len: usize,
    /// Neighbours per support node for context initialisation.
    pub context_eta: usize,
    /// Initialise prompts from graph context rather than randomly.
    pub context_init: bool,
    pub tune: TuneConfig,
    pub meta_hidden: usize,
    /// Keep the meta-net at zero (conditional method only).
    pub meta_zero: bool,
    /// Base classes per split; defaults to half the labelled classes.
    pub n_base: Option<usize>,
    /// Share of nodes pre-trained on in the inductive protocol when every node
    /// is labelled.
    pub inductive_fraction: f64,
    /// Pre-training used by the inductive protocol.
    pub pretrain: PretrainConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            method: Method::FewshotStatic,
            n_way: 5,
            k_shot: 5,
            tasks_per_seed: 5,
            seeds: DEFAULT_SEEDS.to_vec(),
            template: DiscretePromptTemplate::default(),
            prompt_len: 4,
            context_eta: 3,
            context_init: true,
            tune: TuneConfig::default(),
            meta_hidden: DEFAULT_HIDDEN_DIM,
            meta_zero: false,
            n_base: None,
            inductive_fraction: 0.5,
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Corpora and encoders a protocol runs on.
#[derive(Clone, Copy, Debug)]
pub struct ProtocolData<'a> {
    /// The evaluation corpus (the target domain for cross-domain runs).
    pub corpus: &'a GraphTextCorpus,
    /// Pre-trained encoders; for the inductive protocol, the initial encoders
    /// that are pre-trained on the held-in nodes.
    pub encoder: &'a DualEncoder,
    /// Tuning corpus for cross-domain runs.
    pub source: Option<&'a GraphTextCorpus>,
    /// Fixed base/unseen split, used by every seed instead of a random one.
    pub split: Option<&'a SplitSpec>,
}

impl<'a> ProtocolData<'a> {
    pub fn new(corpus: &'a GraphTextCorpus, encoder: &'a DualEncoder) -> Self {
        Self {
            corpus,
            encoder,
            source: None,
            split: None,
        }
    }
}

/// Pre-training nodes and disjoint evaluation nodes. Unlabelled nodes are
/// pre-trained on when the corpus has any; otherwise a seeded `fraction` of
/// all nodes is.
pub fn inductive_split(corpus: &GraphTextCorpus, fraction: f64, seed: u64) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    let (unlabelled, labelled): (Vec<NodeId>, Vec<NodeId>) =
        (0..corpus.len()).partition(|&n| corpus.label(n).is_none());
    if !unlabelled.is_empty() && !labelled.is_empty() {
        return Ok((unlabelled, labelled));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter(format!("inductive fraction must lie in (0, 1), got {fraction}")));
    }
    let mut nodes: Vec<NodeId> = (0..corpus.len()).collect();
    nodes.shuffle(&mut rng::stream(seed, rng::STREAM_CORPUS));
    let cut = ((corpus.len() as f64 * fraction).round() as usize).clamp(1, corpus.len() - 1);
    let mut held_in = nodes[..cut].to_vec();
    let mut held_out = nodes[cut..].to_vec();
    held_in.sort_unstable();
    held_out.sort_unstable();
    Ok((held_in, held_out))
}

/// What a method learned from its labelled data.
enum Adapted {
    Discrete,
    Static(PromptState),
    Conditional(PromptState, MetaNetState),
}

struct Seeds {
    task: u64,
    init: u64,
    context: u64,
}

impl Seeds {
    fn new(seed: u64, task: usize) -> Self {
        let t = [task as u64];
        Self {
            task: rng::sub_seed(rng::derive_seed(seed, rng::STREAM_TASKS), &t),
            init: rng::sub_seed(rng::derive_seed(seed, rng::STREAM_INIT), &t),
            context: rng::sub_seed(rng::derive_seed(seed, rng::STREAM_NEIGHBORS), &t),
        }
    }
}

fn split_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, rng::STREAM_TASKS)
}

fn adapt(
    config: &ProtocolConfig,
    corpus: &GraphTextCorpus,
    encoder: &DualEncoder,
    z_all: &Matrix,
    task: &FewShotTask,
    seeds: &Seeds,
) -> Result<Adapted> {
    if config.method == Method::ZeroDiscrete {
        return Ok(Adapted::Discrete);
    }
    let tokens = if config.context_init {
        init_prompt_from_context(corpus, task, encoder, config.prompt_len, config.context_eta, seeds.context)?
    } else {
        random_prompt(config.prompt_len, encoder.text.width(), seeds.init)
    };
    let prompt0 = PromptState::for_classes(encoder, tokens, corpus.class_texts())?;
    match config.method {
        Method::FewshotStatic => Ok(Adapted::Static(
            tune_prompt(encoder, z_all, task, prompt0, &config.tune)?.prompt,
        )),
        Method::Conditional => {
            let (d, w) = (encoder.text.embed_dim(), encoder.text.width());
            if config.meta_zero {
                // a frozen zero network adds nothing to the context vectors,
                // so only they are tuned
                let meta = MetaNetState::zeros(d, config.meta_hidden, w);
                let tuned = tune_prompt(encoder, z_all, task, prompt0, &config.tune)?;
                Ok(Adapted::Conditional(tuned.prompt, meta))
            } else {
                let meta0 = MetaNetState::new(d, config.meta_hidden, w, seeds.init);
                let tuned = tune_conditional(encoder, z_all, task, prompt0, meta0, &config.tune)?;
                Ok(Adapted::Conditional(tuned.prompt, tuned.meta))
            }
        }
        Method::ZeroDiscrete => unreachable!("handled above"),
    }
}

/// Predicted classes for `nodes` among `class_ids`, whose label texts come
/// from `class_texts`.
fn predict(
    adapted: &Adapted,
    config: &ProtocolConfig,
    encoder: &DualEncoder,
    class_texts: &BTreeMap<ClassId, String>,
    z_all: &Matrix,
    nodes: &[NodeId],
    class_ids: &[ClassId],
) -> Result<Vec<ClassId>> {
    let z = z_all.select_rows(nodes);
    let probs = match adapted {
        Adapted::Discrete => {
            let w = class_weights_discrete(encoder, &config.template, class_texts, class_ids)?;
            classify_rows(&z, &w)
        }
        Adapted::Static(p) => {
            let p = PromptState::for_classes(encoder, p.tokens.clone(), class_texts)?;
            classify_rows(&z, &class_weights_continuous(&encoder.text, &p, class_ids)?)
        }
        Adapted::Conditional(p, meta) => {
            let p = PromptState::for_classes(encoder, p.tokens.clone(), class_texts)?;
            classify_conditional_rows(&z, encoder, &p, meta, class_ids)?
        }
    };
    Ok(probs.row_iter().map(|r| class_ids[argmax(r)]).collect())
}

fn score(preds: &[ClassId], labelled: &[(NodeId, ClassId)], class_ids: &[ClassId]) -> Result<(f64, f64)> {
    let golds: Vec<ClassId> = labelled.iter().map(|&(_, c)| c).collect();
    Ok((accuracy(preds, &golds)?, macro_f1(preds, &golds, class_ids)?))
}

fn nodes_of(labelled: &[(NodeId, ClassId)]) -> Vec<NodeId> {
    labelled.iter().map(|&(n, _)| n).collect()
}

/// Prompt state learned for one task (or one split), handed to the sink of
/// [`run_protocol_with`].
#[derive(Clone, Copy, Debug)]
pub struct TunedState<'a> {
    pub seed: u64,
    pub task: usize,
    pub prompt: &'a PromptState,
    pub meta: Option<&'a MetaNetState>,
}

type Sink<'s> = &'s mut dyn FnMut(TunedState<'_>) -> Result<()>;

fn emit(sink: &mut Sink<'_>, seed: u64, task: usize, adapted: &Adapted) -> Result<()> {
    match adapted {
        Adapted::Discrete => Ok(()),
        Adapted::Static(p) => sink(TunedState { seed, task, prompt: p, meta: None }),
        Adapted::Conditional(p, m) => sink(TunedState { seed, task, prompt: p, meta: Some(m) }),
    }
}

/// Runs `config.method` under `protocol` and aggregates the results.
pub fn run_protocol(protocol: SplitMode, data: ProtocolData<'_>, config: &ProtocolConfig) -> Result<EvalReport> {
    run_protocol_with(protocol, data, config, &mut |_| Ok(()))
}

/// [`run_protocol`], passing every tuned prompt to `sink`.
pub fn run_protocol_with(
    protocol: SplitMode,
    data: ProtocolData<'_>,
    config: &ProtocolConfig,
    mut sink: Sink<'_>,
) -> Result<EvalReport> {
    if config.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let per_task = match protocol {
        SplitMode::Standard => {
            let z = data.encoder.node_embeddings(data.corpus)?;
            episodic(config, data.corpus, data.encoder, &z, data.split, &mut sink)?
        }
        SplitMode::Inductive => {
            let (held_in, held_out) = inductive_split(data.corpus, config.inductive_fraction, config.pretrain.seed)?;
            let (sub, _) = data.corpus.induced_subcorpus(&held_in)?;
            let encoder = pretrain(&sub, data.encoder.clone(), &config.pretrain)?.encoder;
            let eval_corpus = restrict_labels(data.corpus, &held_out)?;
            let z = encoder.node_embeddings(&eval_corpus)?;
            episodic(config, &eval_corpus, &encoder, &z, data.split, &mut sink)?
        }
        SplitMode::BaseUnseen | SplitMode::Continual => class_split(protocol, config, data, data.corpus, &mut sink)?,
        SplitMode::CrossDomain => {
            let source = data.source.ok_or_else(|| {
                Error::Config("the cross-domain protocol needs a source corpus".into())
            })?;
            class_split(protocol, config, data, source, &mut sink)?
        }
    };
    aggregate_tasks(protocol, config.method.as_str(), per_task)
}

/// `corpus` with labels kept only on `nodes`.
fn restrict_labels(corpus: &GraphTextCorpus, nodes: &[NodeId]) -> Result<GraphTextCorpus> {
    let labels = nodes
        .iter()
        .filter_map(|&n| corpus.label(n).map(|c| (n, c)))
        .collect();
    GraphTextCorpus::new(
        corpus.documents().to_vec(),
        corpus.edges().to_vec(),
        labels,
        corpus.class_texts().clone(),
    )?
    .with_node_features(corpus.node_features().clone())
}

fn episodic(
    config: &ProtocolConfig,
    corpus: &GraphTextCorpus,
    encoder: &DualEncoder,
    z: &Matrix,
    split: Option<&SplitSpec>,
    sink: &mut Sink<'_>,
) -> Result<Vec<TaskMetrics>> {
    let split = split.cloned().unwrap_or_else(|| SplitSpec::standard(corpus));
    let mut out = Vec::new();
    for &seed in &config.seeds {
        for t in 0..config.tasks_per_seed {
            let seeds = Seeds::new(seed, t);
            let task = sample_task(corpus, &split, config.n_way, config.k_shot, seeds.task)?;
            let adapted = adapt(config, corpus, encoder, z, &task, &seeds)?;
            emit(sink, seed, t, &adapted)?;
            let preds = predict(&adapted, config, encoder, corpus.class_texts(), z, &nodes_of(&task.query), &task.class_ids)?;
            let (acc, f1) = score(&preds, &task.query, &task.class_ids)?;
            out.push(TaskMetrics {
                seed,
                task: t,
                accuracy: acc,
                macro_f1: f1,
                base_accuracy: None,
                unseen_accuracy: None,
                harmonic_mean: None,
            });
        }
    }
    Ok(out)
}

fn default_n_base(corpus: &GraphTextCorpus) -> usize {
    (corpus.labelled_classes().len() / 2).max(1)
}

fn unseen_instances(corpus: &GraphTextCorpus, split: &SplitSpec) -> Vec<(NodeId, ClassId)> {
    split
        .unseen_classes
        .iter()
        .flat_map(|&c| corpus.nodes_of_class(c).into_iter().map(move |n| (n, c)))
        .collect()
}

/// Base/unseen, continual and cross-domain runs: tune once per seed on the
/// pooled base classes of `source`, then test on `data.corpus`.
fn class_split(
    protocol: SplitMode,
    config: &ProtocolConfig,
    data: ProtocolData<'_>,
    source: &GraphTextCorpus,
    sink: &mut Sink<'_>,
) -> Result<Vec<TaskMetrics>> {
    let target = data.corpus;
    let encoder = data.encoder;
    let cross = protocol == SplitMode::CrossDomain;
    let z_source = encoder.node_embeddings(source)?;
    let z_target = if cross { encoder.node_embeddings(target)? } else { z_source.clone() };
    let n_base = config
        .n_base
        .unwrap_or_else(|| default_n_base(source).min(default_n_base(target)));
    let mut out = Vec::new();
    for &seed in &config.seeds {
        let (source_split, target_split) = match data.split {
            Some(s) => (s.clone(), s.clone()),
            None => (
                split_base_unseen(source, n_base, split_seed(seed))?,
                split_base_unseen(target, n_base, split_seed(seed))?,
            ),
        };
        let seeds = Seeds::new(seed, 0);
        let n_tune = source_split.base_classes.len();
        let task = sample_task(source, &source_split, n_tune, config.k_shot, seeds.task)?;
        let adapted = adapt(config, source, encoder, &z_source, &task, &seeds)?;
        emit(sink, seed, 0, &adapted)?;

        let unseen = unseen_instances(target, &target_split);
        let unseen_classes: Vec<ClassId> = target_split.unseen_classes.iter().copied().collect();
        if unseen.is_empty() {
            return Err(Error::Sampling("the split has no unseen-class instances".into()));
        }
        let preds = predict(&adapted, config, encoder, target.class_texts(), &z_target, &nodes_of(&unseen), &unseen_classes)?;
        let (unseen_acc, unseen_f1) = score(&preds, &unseen, &unseen_classes)?;
        let mut m = TaskMetrics {
            seed,
            task: 0,
            accuracy: unseen_acc,
            macro_f1: unseen_f1,
            base_accuracy: None,
            unseen_accuracy: None,
            harmonic_mean: None,
        };
        if !cross {
            let base_preds = predict(&adapted, config, encoder, source.class_texts(), &z_source, &nodes_of(&task.query), &task.class_ids)?;
            let (base_acc, _) = score(&base_preds, &task.query, &task.class_ids)?;
            m.base_accuracy = Some(base_acc);
            m.unseen_accuracy = Some(unseen_acc);
            m.harmonic_mean = Some(harmonic_mean(base_acc, unseen_acc));
            if protocol == SplitMode::Continual {
                let mut all_classes = task.class_ids.clone();
                all_classes.extend(&unseen_classes);
                let mut union = task.query.clone();
                union.extend(&unseen);
                let preds = predict(&adapted, config, encoder, target.class_texts(), &z_target, &nodes_of(&union), &all_classes)?;
                let (acc, f1) = score(&preds, &union, &all_classes)?;
                m.accuracy = acc;
                m.macro_f1 = f1;
            }
        }
        out.push(m);
    }
    Ok(out)
}
