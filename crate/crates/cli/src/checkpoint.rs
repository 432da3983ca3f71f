//! Checkpoint directories: `manifest.json` describing every tensor, and
//! `tensors.bin` holding their values as little-endian `f32`, row-major, in
//! manifest order.
//!
//! Values are held as `f64` in memory, so saving narrows them; a loaded
//! checkpoint saves back to the identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use graphtext_core::conditional::MetaNetState;
use graphtext_core::corpus::ClassId;
use graphtext_core::encoders::{DualEncoder, EncoderConfig, Vocabulary};
use graphtext_core::params::Parameters;
use graphtext_core::prompting::PromptState;
use graphtext_core::rng;
use graphtext_core::{Error, Matrix, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";

const PROMPT_TOKENS: &str = "prompt.tokens";
const CLASS_PREFIX: &str = "prompt.class.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
}

/// Master seed and the named streams derived from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub master: u64,
    pub streams: BTreeMap<String, u64>,
}

impl SeedProvenance {
    pub fn new(master: u64) -> Self {
        let names = [
            rng::STREAM_CORPUS,
            rng::STREAM_BATCHING,
            rng::STREAM_NEIGHBORS,
            rng::STREAM_TASKS,
            rng::STREAM_INIT,
        ];
        Self {
            master,
            streams: names.iter().map(|n| (n.to_string(), rng::derive_seed(master, n))).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Encoder,
    Prompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    pub seeds: SeedProvenance,
    /// Run configuration that produced the checkpoint.
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    /// Seed of the node-feature word vectors the encoder was trained with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Matrix)>,
}

fn encode(tensors: &[(String, Matrix)]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset: payload.len(),
        });
        for &v in m.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (entries, payload)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    fn build(
        kind: CheckpointKind,
        tensors: Vec<(String, Matrix)>,
        seed: u64,
        config: Value,
    ) -> Self {
        let (entries, payload) = encode(&tensors);
        // narrow now so the in-memory tensors equal what a reload would give
        let tensors = tensors
            .into_iter()
            .map(|(n, m)| (n, m.map(|v| v as f32 as f64)))
            .collect();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind,
                tensors: entries,
                payload_bytes: payload.len(),
                payload_sha256: sha256_hex(&payload),
                seeds: SeedProvenance::new(seed),
                config,
                encoder: None,
                vocab: None,
                feature_seed: None,
            },
            tensors,
        }
    }

    pub fn from_encoder(
        encoder: &DualEncoder,
        config: &EncoderConfig,
        feature_seed: u64,
        seed: u64,
        run_config: Value,
    ) -> Self {
        let tensors = encoder
            .named_params()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        let mut ck = Self::build(CheckpointKind::Encoder, tensors, seed, run_config);
        ck.manifest.encoder = Some(config.clone());
        ck.manifest.vocab = Some(encoder.vocab.tokens().to_vec());
        ck.manifest.feature_seed = Some(feature_seed);
        ck
    }

    pub fn from_prompt(prompt: &PromptState, meta: Option<&MetaNetState>, seed: u64, run_config: Value) -> Self {
        let mut tensors = vec![(PROMPT_TOKENS.to_string(), prompt.tokens.clone())];
        for (c, m) in &prompt.class_tokens {
            tensors.push((format!("{CLASS_PREFIX}{c}"), m.clone()));
        }
        if let Some(meta) = meta {
            tensors.extend(meta.named_params().into_iter().map(|(n, m)| (n, m.clone())));
        }
        Self::build(CheckpointKind::Prompt, tensors, seed, run_config)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (entries, payload) = encode(&self.tensors);
        debug_assert_eq!(entries, self.manifest.tensors);
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PAYLOAD_FILE), &payload)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
        let payload_path = dir.join(PAYLOAD_FILE);
        let bad = |message: String| Error::Format {
            path: payload_path.display().to_string(),
            message,
        };
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let payload = fs::read(&payload_path)?;
        if payload.len() != manifest.payload_bytes {
            return Err(bad(format!("{} bytes, manifest says {}", payload.len(), manifest.payload_bytes)));
        }
        if sha256_hex(&payload) != manifest.payload_sha256 {
            return Err(bad("payload checksum does not match the manifest".into()));
        }
        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let [rows, cols] = e.shape;
            let bytes = rows * cols * 4;
            if e.offset != expected_offset || e.offset + bytes > payload.len() {
                return Err(bad(format!("tensor {} at offset {} does not tile the payload", e.name, e.offset)));
            }
            let data = payload[e.offset..e.offset + bytes]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            tensors.push((e.name.clone(), Matrix::from_vec(rows, cols, data)?));
            expected_offset += bytes;
        }
        if expected_offset != payload.len() {
            return Err(bad(format!("{} trailing bytes", payload.len() - expected_offset)));
        }
        Ok(Self { manifest, tensors })
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.manifest.kind
            )));
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Option<Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m.clone())
    }

    pub fn to_encoder(&self) -> Result<DualEncoder> {
        self.expect_kind(CheckpointKind::Encoder)?;
        let missing = |what: &str| Error::Config(format!("encoder checkpoint has no {what}"));
        let config = self.manifest.encoder.as_ref().ok_or_else(|| missing("encoder config"))?;
        let vocab = self.manifest.vocab.clone().ok_or_else(|| missing("vocabulary"))?;
        let mut encoder = DualEncoder::new(Vocabulary::from_tokens(vocab)?, config, 0)?;
        encoder.load_named(|name| self.tensor(name))?;
        Ok(encoder)
    }

    pub fn to_prompt(&self) -> Result<(PromptState, Option<MetaNetState>)> {
        self.expect_kind(CheckpointKind::Prompt)?;
        let tokens = self
            .tensor(PROMPT_TOKENS)
            .ok_or_else(|| Error::Config(format!("prompt checkpoint has no {PROMPT_TOKENS}")))?;
        let mut class_tokens = BTreeMap::new();
        for (name, m) in &self.tensors {
            if let Some(id) = name.strip_prefix(CLASS_PREFIX) {
                let id: ClassId = id
                    .parse()
                    .map_err(|_| Error::Config(format!("bad class tensor name {name}")))?;
                class_tokens.insert(id, m.clone());
            }
        }
        let meta = match (self.tensor("meta.w_in"), self.tensor("meta.w_out")) {
            (Some(w_in), Some(w_out)) => {
                let mut meta = MetaNetState::zeros(w_in.rows(), w_in.cols(), w_out.cols());
                meta.load_named(|name| self.tensor(name))?;
                Some(meta)
            }
            (None, None) => None,
            _ => return Err(Error::Config("incomplete meta-net tensors".into())),
        };
        Ok((PromptState { tokens, class_tokens }, meta))
    }
}
