//! On-disk corpus directory:
//!
//! * `documents.jsonl`: one `{"id": .., "text": .., "label": ..}` object per
//!   line, `label` omitted for unlabelled nodes
//! * `edges.tsv`: two tab-separated node ids per line
//! * `classes.json`: object mapping class id to label text
//!
//! Node features are not stored; callers rebuild them from a word embedder.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassId, Document, GraphTextCorpus, NodeId};
use crate::error::{Error, Result};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const EDGES_FILE: &str = "edges.tsv";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Serialize, Deserialize)]
struct DocumentLine {
    id: NodeId,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<ClassId>,
}

pub fn write_corpus_dir(corpus: &GraphTextCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut docs = BufWriter::new(fs::File::create(dir.join(DOCUMENTS_FILE))?);
    for d in corpus.documents() {
        let line = DocumentLine {
            id: d.id,
            text: d.text.clone(),
            label: corpus.label(d.id),
        };
        serde_json::to_writer(&mut docs, &line)?;
        docs.write_all(b"\n")?;
    }
    docs.flush()?;

    let mut edges = BufWriter::new(fs::File::create(dir.join(EDGES_FILE))?);
    for (u, v) in corpus.edges() {
        writeln!(edges, "{u}\t{v}")?;
    }
    edges.flush()?;

    let classes = serde_json::to_string_pretty(corpus.class_texts())?;
    fs::write(dir.join(CLASSES_FILE), classes + "\n")?;
    Ok(())
}

/// Reads a corpus directory. Documents may appear in any order but their ids
/// must cover `0..n` exactly once. The returned corpus has no node features.
pub fn read_corpus_dir(dir: &Path) -> Result<GraphTextCorpus> {
    let format_err = |file: &str, message: String| Error::Format {
        path: dir.join(file).display().to_string(),
        message,
    };

    let reader = BufReader::new(open(dir, DOCUMENTS_FILE)?);
    let mut lines = Vec::new();
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DocumentLine = serde_json::from_str(&line)
            .map_err(|e| format_err(DOCUMENTS_FILE, format!("line {}: {e}", no + 1)))?;
        lines.push(parsed);
    }
    lines.sort_by_key(|d| d.id);
    let mut documents = Vec::with_capacity(lines.len());
    let mut labels = BTreeMap::new();
    for (i, d) in lines.into_iter().enumerate() {
        if d.id != i {
            return Err(format_err(
                DOCUMENTS_FILE,
                format!("document ids must be 0..n without gaps or repeats; found {} at position {i}", d.id),
            ));
        }
        if let Some(l) = d.label {
            labels.insert(d.id, l);
        }
        documents.push(Document { id: d.id, text: d.text });
    }

    let mut edges = Vec::new();
    let reader = BufReader::new(open(dir, EDGES_FILE)?);
    for (no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t').map(str::trim);
        let parse = |s: Option<&str>| -> Result<NodeId> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| format_err(EDGES_FILE, format!("line {}: expected two node ids", no + 1)))
        };
        let u = parse(cols.next())?;
        let v = parse(cols.next())?;
        edges.push((u, v));
    }

    let classes_raw = fs::read_to_string(dir.join(CLASSES_FILE))
        .map_err(|e| format_err(CLASSES_FILE, e.to_string()))?;
    let class_texts: BTreeMap<ClassId, String> =
        serde_json::from_str(&classes_raw).map_err(|e| format_err(CLASSES_FILE, e.to_string()))?;

    GraphTextCorpus::new(documents, edges, labels, class_texts)
}

fn open(dir: &Path, file: &str) -> Result<fs::File> {
    fs::File::open(dir.join(file)).map_err(|e| Error::Format {
        path: dir.join(file).display().to_string(),
        message: e.to_string(),
    })
}
