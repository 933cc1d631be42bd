//! Leave-one-image-out retrieval: cosine ranking, k-reciprocal query
//! expansion re-ranking, and Top-1 / Hard-N / mAP evaluation.

use crate::encoding::GlobalDescriptor;
use crate::numerics::{dot, norm2};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cosine distance of a zero vector is undefined")]
    ZeroVector,
    #[error("k={k} is out of range for a list of {len}")]
    KOutOfRange { k: usize, len: usize },
    #[error("gallery needs at least 2 documents, got {0}")]
    EmptyGallery(usize),
    #[error("duplicate doc_id {0}")]
    DuplicateDoc(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("document {0} has no label")]
    UnknownDoc(String),
}

/// An immutable set of global descriptors with unique doc ids.
#[derive(Debug, Clone)]
pub struct Gallery {
    docs: Vec<GlobalDescriptor>,
}

impl Gallery {
    pub fn new(docs: Vec<GlobalDescriptor>) -> Result<Self, RetrievalError> {
        if docs.len() < 2 {
            return Err(RetrievalError::EmptyGallery(docs.len()));
        }
        let dim = docs[0].vector.len();
        let mut seen = BTreeSet::new();
        for d in &docs {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(RetrievalError::DuplicateDoc(d.doc_id.clone()));
            }
            if d.vector.len() != dim {
                return Err(RetrievalError::DimMismatch(format!(
                    "document {} has {} dims, expected {dim}",
                    d.doc_id,
                    d.vector.len()
                )));
            }
        }
        Ok(Self { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[GlobalDescriptor] {
        &self.docs
    }

    /// doc_id to writer_id map.
    pub fn labels(&self) -> BTreeMap<String, String> {
        self.docs
            .iter()
            .map(|d| (d.doc_id.clone(), d.writer_id.clone()))
            .collect()
    }
}

/// Gallery documents ranked for one query, ascending distance; ties broken by
/// doc_id. Contains every gallery document except the query exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: String,
    pub entries: Vec<(String, f64)>,
}

/// Cosine distance `1 - p.q / (|p||q|)`, in [0, 2].
pub fn cosine_distance(p: &[f64], q: &[f64]) -> Result<f64, RetrievalError> {
    if p.len() != q.len() {
        return Err(RetrievalError::DimMismatch(format!("{} vs {}", p.len(), q.len())));
    }
    let np = norm2(p);
    let nq = norm2(q);
    if np < 1e-12 || nq < 1e-12 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(1.0 - dot(p, q) / (np * nq))
}

fn sort_entries(entries: &mut [(String, f64)]) {
    entries.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then_with(|| a.0.cmp(&b.0)));
}

fn rank_one(
    query: &GlobalDescriptor,
    query_vector: &[f64],
    gallery: &Gallery,
) -> Result<RankedList, RetrievalError> {
    let mut entries = Vec::with_capacity(gallery.len() - 1);
    for other in gallery.docs() {
        if other.doc_id == query.doc_id {
            continue;
        }
        entries.push((other.doc_id.clone(), cosine_distance(query_vector, &other.vector)?));
    }
    sort_entries(&mut entries);
    Ok(RankedList { query: query.doc_id.clone(), entries })
}

/// Ranks every document against all others (leave-one-image-out); one ranked
/// list per gallery document, in gallery order. Queries run in parallel.
pub fn rank_all(gallery: &Gallery) -> Result<Vec<RankedList>, RetrievalError> {
    gallery
        .docs()
        .par_iter()
        .map(|q| rank_one(q, &q.vector, gallery))
        .collect()
}

/// First k entries of a ranked list.
pub fn knn<'a>(ranked: &'a RankedList, k: usize) -> Result<Vec<&'a str>, RetrievalError> {
    if k == 0 || k > ranked.entries.len() {
        return Err(RetrievalError::KOutOfRange { k, len: ranked.entries.len() });
    }
    Ok(ranked.entries[..k].iter().map(|(id, _)| id.as_str()).collect())
}

/// k-reciprocal nearest neighbors of `query`: gallery documents that appear
/// in the query's top-k while the query appears in theirs.
pub fn krnn(
    lists: &[RankedList],
    query: &str,
    k: usize,
) -> Result<BTreeSet<String>, RetrievalError> {
    let by_query: BTreeMap<&str, &RankedList> =
        lists.iter().map(|l| (l.query.as_str(), l)).collect();
    let list = by_query
        .get(query)
        .ok_or_else(|| RetrievalError::UnknownDoc(query.to_string()))?;
    let mut out = BTreeSet::new();
    for p in knn(list, k)? {
        let p_list = by_query
            .get(p)
            .ok_or_else(|| RetrievalError::UnknownDoc(p.to_string()))?;
        if knn(p_list, k)?.contains(&query) {
            out.insert(p.to_string());
        }
    }
    Ok(out)
}

/// Average query expansion: the arithmetic mean of the query vector and its
/// trusted neighbors. An empty neighbor set returns the query unchanged.
pub fn expand_query(
    query: &GlobalDescriptor,
    neighbors: &[&GlobalDescriptor],
) -> Result<Vec<f64>, RetrievalError> {
    let mut out = query.vector.clone();
    for n in neighbors {
        if n.vector.len() != out.len() {
            return Err(RetrievalError::DimMismatch(format!(
                "neighbor {} has {} dims, query has {}",
                n.doc_id,
                n.vector.len(),
                out.len()
            )));
        }
        for (o, v) in out.iter_mut().zip(&n.vector) {
            *o += v;
        }
    }
    let scale = (neighbors.len() + 1) as f64;
    for o in &mut out {
        *o /= scale;
    }
    Ok(out)
}

/// Single-pass krNN query expansion re-ranking.
///
/// Computes the initial ranking, expands each query over its k-reciprocal
/// neighbors from that ranking, and re-queries the original (unexpanded)
/// gallery vectors. Each query is expanded independently.
pub fn rerank(gallery: &Gallery, k: usize) -> Result<Vec<RankedList>, RetrievalError> {
    let initial = rank_all(gallery)?;
    let by_id: BTreeMap<&str, &GlobalDescriptor> =
        gallery.docs().iter().map(|d| (d.doc_id.as_str(), d)).collect();

    gallery
        .docs()
        .par_iter()
        .map(|query| {
            let reciprocal = krnn(&initial, &query.doc_id, k)?;
            let neighbors: Vec<&GlobalDescriptor> =
                reciprocal.iter().map(|id| by_id[id.as_str()]).collect();
            let expanded = expand_query(query, &neighbors)?;
            rank_one(query, &expanded, gallery)
        })
        .collect()
}

/// Retrieval quality over all queries.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Fraction of queries whose rank-1 document shares the writer.
    pub top1: f64,
    /// Fraction whose top 2 documents all share the writer.
    pub hard2: f64,
    /// Fraction whose top 3 documents all share the writer.
    pub hard3: f64,
    /// Mean average precision over queries with at least one relevant doc.
    pub map: f64,
    /// Per-query average precision (queries with relevant documents only).
    pub per_query: Vec<(String, f64)>,
    /// Queries excluded from mAP because no gallery document shares their writer.
    pub queries_without_relevant: usize,
}

impl EvalReport {
    /// Single TSV line: top1, hard2, hard3, map, queries, excluded.
    pub fn to_tsv_line(&self) -> String {
        format!(
            "{:.9}\t{:.9}\t{:.9}\t{:.9}\t{}\t{}\n",
            self.top1,
            self.hard2,
            self.hard3,
            self.map,
            self.per_query.len() + self.queries_without_relevant,
            self.queries_without_relevant
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "top-1 {:.2}%  hard-2 {:.2}%  hard-3 {:.2}%  mAP {:.2}%  ({} queries, {} without relevant docs)",
            100.0 * self.top1,
            100.0 * self.hard2,
            100.0 * self.hard3,
            100.0 * self.map,
            self.per_query.len() + self.queries_without_relevant,
            self.queries_without_relevant
        )
    }
}

/// Scores ranked lists against writer labels.
///
/// Hard-N requires at least N entries, all sharing the query's writer.
/// Average precision divides by the number of relevant gallery documents;
/// queries with none are excluded from mAP and counted separately.
pub fn evaluate(
    lists: &[RankedList],
    labels: &BTreeMap<String, String>,
) -> Result<EvalReport, RetrievalError> {
    if lists.is_empty() {
        return Err(RetrievalError::EmptyGallery(0));
    }
    let label_of = |doc: &str| -> Result<&str, RetrievalError> {
        labels
            .get(doc)
            .map(String::as_str)
            .ok_or_else(|| RetrievalError::UnknownDoc(doc.to_string()))
    };

    let mut top1_hits = 0usize;
    let mut hard2_hits = 0usize;
    let mut hard3_hits = 0usize;
    let mut per_query = Vec::new();
    let mut excluded = 0usize;

    for list in lists {
        let writer = label_of(&list.query)?;
        let rel: Vec<bool> = list
            .entries
            .iter()
            .map(|(doc, _)| Ok(label_of(doc)? == writer))
            .collect::<Result<_, RetrievalError>>()?;

        let all_relevant_up_to =
            |n: usize| rel.len() >= n && rel.iter().take(n).all(|&r| r);
        if all_relevant_up_to(1) {
            top1_hits += 1;
        }
        if all_relevant_up_to(2) {
            hard2_hits += 1;
        }
        if all_relevant_up_to(3) {
            hard3_hits += 1;
        }

        let relevant_total = rel.iter().filter(|&&r| r).count();
        if relevant_total == 0 {
            excluded += 1;
            continue;
        }
        let mut hits = 0usize;
        let mut precision_sum = 0.0f64;
        for (rank, &is_rel) in rel.iter().enumerate() {
            if is_rel {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
            }
        }
        per_query.push((list.query.clone(), precision_sum / relevant_total as f64));
    }

    let n = lists.len() as f64;
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, a)| a).sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalReport {
        top1: top1_hits as f64 / n,
        hard2: hard2_hits as f64 / n,
        hard3: hard3_hits as f64 / n,
        map,
        per_query,
        queries_without_relevant: excluded,
    })
}

/// TSV rows `query_doc<TAB>rank<TAB>gallery_doc<TAB>distance`, ranks 1-based,
/// distances printed with 9 significant digits.
pub fn ranked_lists_to_tsv(lists: &[RankedList]) -> String {
    let mut out = String::new();
    for list in lists {
        for (rank, (doc, dist)) in list.entries.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{:.8e}\n", list.query, rank + 1, doc, dist));
        }
    }
    out
}
