//! The subcommands, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};

use graphtext_core::corpus::{
    build_node_features, generate_synthetic_corpus, read_corpus_dir, write_corpus_dir, EmbeddingTable,
    GraphTextCorpus, SplitMode,
};
use graphtext_core::encoders::DualEncoder;
use graphtext_core::eval::{run_protocol_with, EvalReport, Method, ProtocolData, TunedState};
use graphtext_core::pretrain::{pretrain, LossRecord};
use graphtext_core::{Error, Result};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const LOSSES_FILE: &str = "losses.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const PROMPTS_DIR: &str = "prompts";

/// Reads a corpus directory and attaches `dim`-wide node features from the
/// random word vectors of `feature_seed`.
pub fn load_corpus(dir: &Path, dim: usize, feature_seed: u64) -> Result<GraphTextCorpus> {
    let corpus = read_corpus_dir(dir)?;
    let table = EmbeddingTable::random_for_corpus(&corpus, dim, feature_seed);
    let features = build_node_features(&corpus, &table, dim)?;
    corpus.with_node_features(features)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("a {what} path is required")))
}

/// Writes a synthetic corpus directory to `out`.
pub fn cmd_synth(config: &RunConfig) -> Result<PathBuf> {
    let out = config.out_dir()?;
    let corpus = generate_synthetic_corpus(&config.synthetic())?;
    write_corpus_dir(&corpus, out)?;
    eprintln!(
        "wrote {} documents, {} edges, {} classes to {}",
        corpus.len(),
        corpus.edges().len(),
        corpus.class_texts().len(),
        out.display()
    );
    Ok(out.to_path_buf())
}

pub fn write_losses(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    for r in history {
        w.serialize(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// The run configuration as recorded in checkpoints. The output directory is
/// left out so that identical runs written to different places match.
fn config_snapshot(config: &RunConfig) -> Result<serde_json::Value> {
    let mut value = serde_json::to_value(config)?;
    if let Some(map) = value.as_object_mut() {
        map.remove("out");
    }
    Ok(value)
}

/// Pre-trains fresh encoders on the corpus and writes the checkpoint and the
/// loss history to `out`.
pub fn cmd_pretrain(config: &RunConfig) -> Result<Checkpoint> {
    let out = config.out_dir()?;
    let corpus = load_corpus(required(&config.corpus, "corpus")?, config.input_dim, config.feature_seed)?;
    let enc_config = config.encoder();
    let encoder = DualEncoder::new(DualEncoder::vocabulary_for(&corpus), &enc_config, config.seed)?;
    let outcome = pretrain(&corpus, encoder, &config.pretrain())?;
    let ck = Checkpoint::from_encoder(
        &outcome.encoder,
        &enc_config,
        config.feature_seed,
        config.seed,
        config_snapshot(config)?,
    );
    ck.save(out)?;
    write_losses(&out.join(LOSSES_FILE), &outcome.history)?;
    if let Some(last) = outcome.history.last() {
        eprintln!(
            "{} batches; last loss {:.4} (L1 {:.4}, L2 {:.4}, L3 {:.4}), exp(tau) {:.2}",
            outcome.history.len(),
            last.total,
            last.l1,
            last.l2,
            last.l3,
            last.exp_tau
        );
    }
    Ok(ck)
}

#[derive(Serialize)]
struct Reports<'a> {
    reports: &'a [EvalReport],
}

fn prompt_dir(out: &Path, s: &TunedState<'_>) -> PathBuf {
    out.join(PROMPTS_DIR).join(format!("seed-{}-task-{}", s.seed, s.task))
}

/// Runs `method` under the configured protocol, writes the reports (and any
/// tuned prompts) to `out` and prints the tables.
///
/// The inductive protocol pre-trains on held-in nodes starting from the
/// checkpoint, or from fresh encoders when no checkpoint is given.
pub fn cmd_evaluate(config: &RunConfig, method: Method) -> Result<Vec<EvalReport>> {
    let out = config.out_dir()?;
    let (encoder, input_dim, feature_seed) = match &config.checkpoint {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            let encoder = ck.to_encoder()?;
            let input_dim = encoder.graph.config.input_dim;
            (Some(encoder), input_dim, ck.manifest.feature_seed.unwrap_or(config.feature_seed))
        }
        None if config.protocol == SplitMode::Inductive => (None, config.input_dim, config.feature_seed),
        None => return Err(Error::Config("a checkpoint is required (--checkpoint)".into())),
    };
    let corpus = load_corpus(required(&config.corpus, "corpus")?, input_dim, feature_seed)?;
    let source = match (&config.source_corpus, config.protocol) {
        (Some(p), _) => Some(load_corpus(p, input_dim, feature_seed)?),
        (None, SplitMode::CrossDomain) => {
            return Err(Error::Config("the cross-domain protocol needs --source-corpus".into()))
        }
        (None, _) => None,
    };
    let encoder = match encoder {
        Some(e) => e,
        None => DualEncoder::new(DualEncoder::vocabulary_for(&corpus), &config.encoder(), config.seed)?,
    };
    let templates = match method {
        Method::ZeroDiscrete => config.discrete_templates()?,
        _ => vec![graphtext_core::prompting::DiscretePromptTemplate::new(config.template.clone())?],
    };
    let data = ProtocolData {
        source: source.as_ref(),
        ..ProtocolData::new(&corpus, &encoder)
    };
    let snapshot = config_snapshot(config)?;
    let mut reports = Vec::with_capacity(templates.len());
    for template in templates {
        let protocol_config = config.protocol_config(method, template);
        let report = run_protocol_with(config.protocol, data, &protocol_config, &mut |s| {
            Checkpoint::from_prompt(s.prompt, s.meta, s.seed, snapshot.clone()).save(&prompt_dir(out, &s))
        })?;
        if method == Method::ZeroDiscrete {
            println!("template: {}", protocol_config.template.as_str());
        }
        print!("{}", report.to_table());
        reports.push(report);
    }
    fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(&Reports { reports: &reports })?;
    fs::write(out.join(REPORT_JSON), json + "\n")?;
    let tables: Vec<String> = reports.iter().map(EvalReport::to_table).collect();
    fs::write(out.join(REPORT_TXT), tables.join("\n"))?;
    Ok(reports)
}
