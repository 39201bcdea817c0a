//! Retrieval-enhanced generation support: a knowledge base of prior cases
//! and guidelines, an exact cosine top-k index, a pluggable reranker hook,
//! and deterministic chain-of-thought context assembly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_backends::{cosine, embed_text, BackendError, EmbedBackend, EmbeddingVector};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate doc id {0:?}")]
    DuplicateDocId(String),
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("doc id {0:?} exceeds {MAX_DOC_ID_BYTES} bytes")]
    DocIdTooLong(String),
    #[error("corrupt index file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocKind {
    Case,
    Guideline,
}

/// One knowledge-base document: a prior case or a guideline excerpt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub doc_id: String,
    pub kind: DocKind,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub doc_id: String,
    pub vector: EmbeddingVector,
    pub doc: KnowledgeDoc,
}

/// Immutable embedded knowledge base; entries keep insertion order.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dims: usize,
    entries: Vec<IndexEntry>,
}

impl VectorIndex {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }
}

/// Embed and index the documents. Ids must be unique; all vectors must share
/// one dimensionality.
pub fn index_documents(
    docs: &[KnowledgeDoc],
    embed_backend: &dyn EmbedBackend,
) -> Result<VectorIndex, IndexError> {
    if docs.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(docs.len());
    let mut dims = None;
    for doc in docs {
        if !seen.insert(doc.doc_id.clone()) {
            return Err(IndexError::DuplicateDocId(doc.doc_id.clone()));
        }
        let vector = embed_text(embed_backend, &doc.text)?;
        match dims {
            None => dims = Some(vector.dims()),
            Some(d) if d != vector.dims() => {
                return Err(IndexError::DimensionMismatch { expected: d, got: vector.dims() })
            }
            _ => {}
        }
        entries.push(IndexEntry { doc_id: doc.doc_id.clone(), vector, doc: doc.clone() });
    }
    Ok(VectorIndex { dims: dims.unwrap(), entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedHit {
    pub doc: KnowledgeDoc,
    pub score: f64,
}

/// Ranked retrieval output: scores non-increasing, ties broken by ascending
/// doc id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub hits: Vec<RetrievedHit>,
    pub k_requested: usize,
}

fn hit_order(a: &(f64, &IndexEntry), b: &(f64, &IndexEntry)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.doc_id.cmp(&b.1.doc_id))
}

/// Exact top-k by cosine similarity via bounded heap selection.
pub fn retrieve(
    index: &VectorIndex,
    query_text: &str,
    k: usize,
    embed_backend: &dyn EmbedBackend,
) -> Result<RetrievedSet, IndexError> {
    if index.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    let query = embed_text(embed_backend, query_text)?;
    if query.dims() != index.dims {
        return Err(IndexError::DimensionMismatch { expected: index.dims, got: query.dims() });
    }
    let k_eff = k.min(index.len());
    // Max-heap on the reversed order keeps the current worst candidate on
    // top so it can be evicted in O(log k).
    struct Candidate<'a>(f64, &'a IndexEntry);
    impl PartialEq for Candidate<'_> {
        fn eq(&self, other: &Self) -> bool {
            self.cmp(other) == Ordering::Equal
        }
    }
    impl Eq for Candidate<'_> {}
    impl PartialOrd for Candidate<'_> {
        fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Candidate<'_> {
        fn cmp(&self, other: &Self) -> Ordering {
            // hit_order ranks stronger hits Less, so the heap max is the
            // weakest candidate and gets evicted first
            hit_order(&(self.0, self.1), &(other.0, other.1))
        }
    }
    let mut heap = std::collections::BinaryHeap::with_capacity(k_eff + 1);
    for entry in &index.entries {
        let score = cosine(&query, &entry.vector)?;
        heap.push(Candidate(score, entry));
        if heap.len() > k_eff {
            heap.pop();
        }
    }
    let mut ranked: Vec<(f64, &IndexEntry)> =
        heap.into_iter().map(|Candidate(s, e)| (s, e)).collect();
    ranked.sort_by(hit_order);
    Ok(RetrievedSet {
        hits: ranked
            .into_iter()
            .map(|(score, entry)| RetrievedHit { doc: entry.doc.clone(), score })
            .collect(),
        k_requested: k,
    })
}

/// Post-retrieval hook standing in for the trainable filtering stage.
pub trait Reranker: Send + Sync {
    fn rerank(&self, hits: RetrievedSet) -> RetrievedSet;
}

/// Pass-through default.
pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn rerank(&self, hits: RetrievedSet) -> RetrievedSet {
        hits
    }
}

/// Keeps hits whose `kind` or metadata field equals the wanted value,
/// preserving order.
pub struct MetadataFilterReranker {
    pub field: String,
    pub value: String,
}

impl Reranker for MetadataFilterReranker {
    fn rerank(&self, hits: RetrievedSet) -> RetrievedSet {
        let kept = hits
            .hits
            .into_iter()
            .filter(|h| {
                if self.field == "kind" {
                    match h.doc.kind {
                        DocKind::Case => self.value == "case",
                        DocKind::Guideline => self.value == "guideline",
                    }
                } else {
                    h.doc.metadata.get(&self.field) == Some(&self.value)
                }
            })
            .collect();
        RetrievedSet { hits: kept, k_requested: hits.k_requested }
    }
}

/// Drops hits scoring below a floor.
pub struct ScoreThresholdReranker {
    pub min_score: f64,
}

impl Reranker for ScoreThresholdReranker {
    fn rerank(&self, hits: RetrievedSet) -> RetrievedSet {
        let kept = hits.hits.into_iter().filter(|h| h.score >= self.min_score).collect();
        RetrievedSet { hits: kept, k_requested: hits.k_requested }
    }
}

pub fn rerank(hits: RetrievedSet, reranker: &dyn Reranker) -> RetrievedSet {
    reranker.rerank(hits)
}

/// Default character budget for the assembled context block.
pub const DEFAULT_CONTEXT_BUDGET: usize = 8_000;

pub const SIMILAR_CASES_HEADER: &str = "SIMILAR CASES:";
pub const GUIDELINES_HEADER: &str = "GUIDELINES:";
pub const REASONING_HEADER: &str = "REASONING INSTRUCTIONS:";

const REASONING_SCAFFOLD: &str = "REASONING INSTRUCTIONS:\n\
Work through the evidence step by step: compare the patient against the \
similar cases, check each candidate against the guidelines, state the \
reasoning chain explicitly, then commit to a single final diagnosis and \
cite the supporting evidence by document id.";

fn render_hit(hit: &RetrievedHit) -> String {
    format!("[{}] (score {:.4})\n{}", hit.doc.doc_id, hit.score, hit.doc.text)
}

/// Deterministic context block: similar cases, then guidelines, then the
/// fixed reasoning scaffold. When the render overflows `budget`, whole hits
/// are dropped from the low-ranked tail until it fits.
pub fn assemble_cot_context(hits: &RetrievedSet, budget: usize) -> String {
    let render = |kept: &[RetrievedHit]| -> String {
        let mut sections = Vec::new();
        let cases: Vec<String> = kept
            .iter()
            .filter(|h| h.doc.kind == DocKind::Case)
            .map(render_hit)
            .collect();
        if !cases.is_empty() {
            sections.push(format!("{}\n{}", SIMILAR_CASES_HEADER, cases.join("\n")));
        }
        let guides: Vec<String> = kept
            .iter()
            .filter(|h| h.doc.kind == DocKind::Guideline)
            .map(render_hit)
            .collect();
        if !guides.is_empty() {
            sections.push(format!("{}\n{}", GUIDELINES_HEADER, guides.join("\n")));
        }
        sections.push(REASONING_SCAFFOLD.to_string());
        sections.join("\n\n")
    };
    let mut kept = hits.hits.clone();
    let mut out = render(&kept);
    while out.chars().count() > budget && !kept.is_empty() {
        kept.pop();
        out = render(&kept);
    }
    out
}

// ---------------------------------------------------------------------------
// Index file format: header (magic, version, dims, count), fixed-width
// records, then a JSON payload blob the records point into.
// ---------------------------------------------------------------------------

const INDEX_MAGIC: &[u8; 8] = b"MAPIDX01";
const INDEX_VERSION: u32 = 1;
pub const MAX_DOC_ID_BYTES: usize = 64;

pub fn write_index(index: &VectorIndex, path: &Path) -> Result<(), IndexError> {
    let mut payload: Vec<u8> = Vec::new();
    let mut records: Vec<u8> = Vec::new();
    for entry in &index.entries {
        let id_bytes = entry.doc_id.as_bytes();
        if id_bytes.len() > MAX_DOC_ID_BYTES {
            return Err(IndexError::DocIdTooLong(entry.doc_id.clone()));
        }
        let mut id_field = [0u8; MAX_DOC_ID_BYTES];
        id_field[..id_bytes.len()].copy_from_slice(id_bytes);
        records.extend_from_slice(&id_field);
        records.push(match entry.doc.kind {
            DocKind::Case => 0,
            DocKind::Guideline => 1,
        });
        for v in entry.vector.values() {
            records.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let doc_json = serde_json::to_vec(&entry.doc)
            .map_err(|e| IndexError::CorruptFile(e.to_string()))?;
        records.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        records.extend_from_slice(&(doc_json.len() as u64).to_le_bytes());
        payload.extend_from_slice(&doc_json);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(INDEX_MAGIC)?;
    file.write_all(&INDEX_VERSION.to_le_bytes())?;
    file.write_all(&(index.dims as u32).to_le_bytes())?;
    file.write_all(&(index.entries.len() as u64).to_le_bytes())?;
    file.write_all(&records)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<VectorIndex, IndexError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], IndexError> {
        if *off + n > bytes.len() {
            return Err(IndexError::CorruptFile("truncated file".into()));
        }
        let slice = &bytes[*off..*off + n];
        *off += n;
        Ok(slice)
    };
    if take(&mut off, 8)? != INDEX_MAGIC {
        return Err(IndexError::CorruptFile("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != INDEX_VERSION {
        return Err(IndexError::CorruptFile(format!("unsupported version {version}")));
    }
    let dims = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
    let record_width = MAX_DOC_ID_BYTES + 1 + dims * 4 + 16;
    let payload_start = off + count * record_width;
    if payload_start > bytes.len() {
        return Err(IndexError::CorruptFile("truncated records".into()));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id_field = take(&mut off, MAX_DOC_ID_BYTES)?;
        let id_len = id_field.iter().position(|&b| b == 0).unwrap_or(MAX_DOC_ID_BYTES);
        let doc_id = String::from_utf8(id_field[..id_len].to_vec())
            .map_err(|e| IndexError::CorruptFile(e.to_string()))?;
        let _kind = take(&mut off, 1)?[0];
        let mut values = Vec::with_capacity(dims);
        for _ in 0..dims {
            let v = f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
            values.push(v as f64);
        }
        let payload_off =
            u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let payload_len =
            u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        let lo = payload_start + payload_off;
        let hi = lo + payload_len;
        if hi > bytes.len() {
            return Err(IndexError::CorruptFile("payload out of range".into()));
        }
        let doc: KnowledgeDoc = serde_json::from_slice(&bytes[lo..hi])
            .map_err(|e| IndexError::CorruptFile(e.to_string()))?;
        entries.push(IndexEntry {
            doc_id,
            vector: EmbeddingVector::new(values),
            doc,
        });
    }
    if entries.is_empty() {
        return Err(IndexError::EmptyIndex);
    }
    Ok(VectorIndex { dims, entries })
}

/// Load KnowledgeDoc JSON files from a directory, sorted by file name so
/// index builds are reproducible.
pub fn load_docs_dir(dir: &Path) -> Result<Vec<KnowledgeDoc>, IndexError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut docs = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(&path)?;
        let doc: KnowledgeDoc = serde_json::from_str(&text)
            .map_err(|e| IndexError::CorruptFile(format!("{}: {e}", path.display())))?;
        docs.push(doc);
    }
    Ok(docs)
}
