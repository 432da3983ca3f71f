//! Run configuration: built-in defaults, overlaid by a JSON file, overlaid by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use graphtext_core::corpus::{SplitMode, SyntheticConfig};
use graphtext_core::encoders::EncoderConfig;
use graphtext_core::eval::{Method, ProtocolConfig, DEFAULT_SEEDS};
use graphtext_core::pretrain::{Objective, PretrainConfig};
use graphtext_core::prompting::{DiscretePromptTemplate, TuneConfig};
use graphtext_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    /// Tuning corpus of the cross-domain protocol.
    pub source_corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Discrete templates, one per line.
    pub templates: Option<PathBuf>,
    pub template: String,

    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// `d`, shared by both encoders.
    pub embed_dim: usize,
    /// `d_in`, the node feature width.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
    /// Seed of the random word vectors behind the node features.
    pub feature_seed: u64,

    pub lambda: f64,
    pub eta: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_lr: f64,
    pub seed: u64,
    pub objective: Objective,

    pub prompt_len: usize,
    pub context_eta: usize,
    pub prompt_lr: f64,
    pub steps: usize,
    pub context_init: bool,
    pub meta_hidden: usize,
    pub meta_zero: bool,

    pub protocol: SplitMode,
    pub method: Method,
    pub n_way: usize,
    pub k_shot: usize,
    pub tasks_per_seed: usize,
    pub n_base: Option<usize>,
    pub inductive_fraction: f64,
    pub seeds: Vec<u64>,

    pub n_classes: usize,
    pub docs_per_class: usize,
    pub vocab_size: usize,
    pub keywords_per_class: usize,
    pub homophily: f64,
    pub keyword_rate: f64,
    pub shifted_keyword_rate: Option<f64>,
    pub edges_per_node: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::full_scale();
        let pre = PretrainConfig::default();
        let proto = ProtocolConfig::default();
        let synth = SyntheticConfig::default();
        Self {
            corpus: None,
            source_corpus: None,
            checkpoint: None,
            out: None,
            templates: None,
            template: DiscretePromptTemplate::default().as_str().to_string(),
            layers: enc.layers,
            width: enc.width,
            heads: enc.heads,
            embed_dim: enc.embed_dim,
            input_dim: enc.input_dim,
            hidden_dim: enc.hidden_dim,
            max_len: enc.max_len,
            mlp_ratio: enc.mlp_ratio,
            feature_seed: 0,
            lambda: pre.lambda,
            eta: pre.eta,
            batch_size: pre.batch_size,
            epochs: pre.epochs,
            pretrain_lr: pre.learning_rate,
            seed: pre.seed,
            objective: pre.objective,
            prompt_len: proto.prompt_len,
            context_eta: proto.context_eta,
            prompt_lr: proto.tune.learning_rate,
            steps: proto.tune.steps,
            context_init: proto.context_init,
            meta_hidden: proto.meta_hidden,
            meta_zero: proto.meta_zero,
            protocol: SplitMode::Standard,
            method: proto.method,
            n_way: proto.n_way,
            k_shot: proto.k_shot,
            tasks_per_seed: proto.tasks_per_seed,
            n_base: proto.n_base,
            inductive_fraction: proto.inductive_fraction,
            seeds: DEFAULT_SEEDS.to_vec(),
            n_classes: synth.n_classes,
            docs_per_class: synth.docs_per_class,
            vocab_size: synth.vocab_size,
            keywords_per_class: synth.keywords_per_class,
            homophily: synth.homophily,
            keyword_rate: synth.keyword_rate,
            shifted_keyword_rate: synth.shifted_keyword_rate,
            edges_per_node: synth.edges_per_node,
            min_doc_len: synth.min_doc_len,
            max_doc_len: synth.max_doc_len,
        }
    }
}

/// Flags mirroring the [`RunConfig`] keys; only the ones given override.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct Overrides {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_corpus: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_seed: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// full, node-text-only or summary-only
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_eta: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_init: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_hidden: Option<usize>,
    /// Freeze the meta-net at zero, reducing conditional to static prompts.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_zero: Option<bool>,

    /// standard, inductive, base-unseen, continual or cross-domain
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<String>,
    /// zero-discrete, fewshot-static or conditional (eval only)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_way: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_shot: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tasks_per_seed: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_base: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inductive_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub docs_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keywords_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub homophily: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keyword_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shifted_keyword_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edges_per_node: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_doc_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_doc_len: Option<usize>,
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                b.insert(k, v);
            }
        }
        (b, l) => *b = l,
    }
}

impl RunConfig {
    /// Defaults, then the JSON file at `file`, then `flags`.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let layer: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            if !layer.is_object() {
                return Err(Error::Config(format!("config {} must hold a JSON object", path.display())));
            }
            merge(&mut value, layer);
        }
        merge(&mut value, serde_json::to_value(flags)?);
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.check_paths()?;
        DiscretePromptTemplate::new(config.template.clone())?;
        Ok(config)
    }

    fn check_paths(&self) -> Result<()> {
        let inputs = [
            ("corpus", &self.corpus),
            ("source corpus", &self.source_corpus),
            ("checkpoint", &self.checkpoint),
            ("templates", &self.templates),
        ];
        for (what, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{what} {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            embed_dim: self.embed_dim,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            max_len: self.max_len,
            mlp_ratio: self.mlp_ratio,
            ..EncoderConfig::default()
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            lambda: self.lambda,
            eta: self.eta,
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.pretrain_lr,
            seed: self.seed,
            objective: self.objective,
        }
    }

    pub fn protocol_config(&self, method: Method, template: DiscretePromptTemplate) -> ProtocolConfig {
        ProtocolConfig {
            method,
            n_way: self.n_way,
            k_shot: self.k_shot,
            tasks_per_seed: self.tasks_per_seed,
            seeds: self.seeds.clone(),
            template,
            prompt_len: self.prompt_len,
            context_eta: self.context_eta,
            context_init: self.context_init,
            tune: TuneConfig {
                learning_rate: self.prompt_lr,
                steps: self.steps,
            },
            meta_hidden: self.meta_hidden,
            meta_zero: self.meta_zero,
            n_base: self.n_base,
            inductive_fraction: self.inductive_fraction,
            pretrain: self.pretrain(),
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_classes: self.n_classes,
            docs_per_class: self.docs_per_class,
            vocab_size: self.vocab_size,
            keywords_per_class: self.keywords_per_class,
            homophily: self.homophily,
            seed: self.seed,
            min_doc_len: self.min_doc_len,
            max_doc_len: self.max_doc_len,
            keyword_rate: self.keyword_rate,
            edges_per_node: self.edges_per_node,
            shifted_keyword_rate: self.shifted_keyword_rate,
            feature_dim: self.input_dim,
            feature_seed: self.feature_seed,
        }
    }

    /// Discrete templates: the templates file when given, else `template`.
    pub fn discrete_templates(&self) -> Result<Vec<DiscretePromptTemplate>> {
        match &self.templates {
            Some(path) => DiscretePromptTemplate::parse_lines(&fs::read_to_string(path)?),
            None => Ok(vec![DiscretePromptTemplate::new(self.template.clone())?]),
        }
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory (--out) is required".into()))
    }
}
