//! Case-based model pre-selection: lexical tf-idf cosine retrieval over the
//! case bank followed by a similarity-weighted vote over recommended models.
//!
//! Tokens are lowercase alphanumeric runs of length >= 2; tf is the raw
//! count and idf is `ln((1 + N) / (1 + df)) + 1`. No stemming, no stop words.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::banks::BankSet;
use crate::task::TaskKind;

/// Number of models shortlisted by default.
pub const DEFAULT_K: usize = 2;
/// Number of cases consulted for the vote by default.
pub const DEFAULT_CASES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("no cases of kind {0} in the bank")]
    EmptyBank(TaskKind),
    #[error("no retrieved case recommends a known model")]
    NoCandidates,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

/// Sparse vector as `(term index, weight)` sorted by term index.
type SparseVec = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct CaseIndex {
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    vectors: Vec<SparseVec>,
    case_ids: Vec<String>,
}

fn term_counts(tokens: &[String]) -> BTreeMap<&str, usize> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_str()).or_insert(0) += 1;
    }
    tf
}

fn normalize(mut v: SparseVec) -> SparseVec {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in &mut v {
            *w /= norm;
        }
    }
    v
}

fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

impl CaseIndex {
    /// Index arbitrary `(id, text)` documents.
    pub fn build(docs: &[(String, String)]) -> Self {
        let tokenized: Vec<Vec<String>> = docs.iter().map(|(_, text)| tokenize(text)).collect();
        let vocab_set: BTreeSet<&str> = tokenized.iter().flatten().map(String::as_str).collect();
        let vocabulary: BTreeMap<String, usize> =
            vocab_set.iter().enumerate().map(|(i, t)| (t.to_string(), i)).collect();
        let mut df = vec![0usize; vocabulary.len()];
        for tokens in &tokenized {
            let unique: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
            for t in unique {
                df[vocabulary[t]] += 1;
            }
        }
        let n = docs.len() as f64;
        let idf: Vec<f64> = df.iter().map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0).collect();
        let vectors = tokenized
            .iter()
            .map(|tokens| {
                let v = term_counts(tokens)
                    .into_iter()
                    .map(|(t, c)| {
                        let i = vocabulary[t];
                        (i, c as f64 * idf[i])
                    })
                    .collect();
                normalize(v)
            })
            .collect();
        Self {
            vocabulary,
            idf,
            vectors,
            case_ids: docs.iter().map(|(id, _)| id.clone()).collect(),
        }
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocabulary.get(term).map(|&i| self.idf[i])
    }

    pub fn len(&self) -> usize {
        self.case_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    /// Unit tf-idf vector of `text` under this index; unseen terms are dropped.
    fn embed(&self, text: &str) -> SparseVec {
        let tokens = tokenize(text);
        let mut v: SparseVec = term_counts(&tokens)
            .into_iter()
            .filter_map(|(t, c)| self.vocabulary.get(t).map(|&i| (i, c as f64 * self.idf[i])))
            .collect();
        v.sort_by_key(|(i, _)| *i);
        normalize(v)
    }

    /// Cosine similarity of `text` against every case, in index order.
    pub fn similarities(&self, text: &str) -> Vec<f64> {
        let q = self.embed(text);
        self.vectors
            .iter()
            .map(|v| sparse_dot(&q, v).clamp(0.0, 1.0))
            .collect()
    }
}

/// Index the descriptions of all cases of `kind`.
pub fn index_cases(banks: &BankSet, kind: TaskKind) -> Result<CaseIndex, RetrievalError> {
    let docs: Vec<(String, String)> = banks
        .cases()
        .iter()
        .filter(|c| c.task_kind == kind)
        .map(|c| (c.id.clone(), c.description.clone()))
        .collect();
    if docs.is_empty() {
        return Err(RetrievalError::EmptyBank(kind));
    }
    Ok(CaseIndex::build(&docs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCase {
    pub case_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVote {
    pub model_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVotes {
    pub votes: Vec<ModelVote>,
    /// Contributing case ids per model, in ranking order.
    pub contributors: BTreeMap<String, Vec<String>>,
    pub rationale: String,
    /// Fewer distinct models were available than requested.
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<RankedCase>,
    #[serde(default)]
    pub model_votes: Vec<ModelVote>,
    #[serde(default)]
    pub rationale: String,
}

fn by_score_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

/// Top `k_cases` cases by cosine similarity, ties broken by ascending id.
pub fn retrieve(index: &CaseIndex, query: &str, k_cases: usize) -> RetrievalResult {
    let sims = index.similarities(query);
    let mut ranked: Vec<RankedCase> = index
        .case_ids
        .iter()
        .zip(sims)
        .map(|(id, similarity)| RankedCase { case_id: id.clone(), similarity })
        .collect();
    ranked.sort_by(|a, b| by_score_then_id((a.similarity, &a.case_id), (b.similarity, &b.case_id)));
    ranked.truncate(k_cases.max(1));
    RetrievalResult { ranked, model_votes: Vec::new(), rationale: String::new() }
}

/// Similarity-weighted vote: each retrieved case adds its similarity to the
/// model it recommends. Returns the top `k` by (score desc, id asc).
pub fn top_k_models(ranked: &[RankedCase], banks: &BankSet, k: usize) -> Result<ModelVotes, RetrievalError> {
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    let mut contributors: BTreeMap<String, Vec<(f64, String)>> = BTreeMap::new();
    for rc in ranked {
        let Some(case) = banks.case(&rc.case_id) else { continue };
        if banks.model(&case.recommended_model).is_none() {
            continue;
        }
        *scores.entry(case.recommended_model.clone()).or_insert(0.0) += rc.similarity;
        contributors
            .entry(case.recommended_model.clone())
            .or_default()
            .push((rc.similarity, rc.case_id.clone()));
    }
    if scores.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    // Re-sum in a canonical order so the result is independent of input order.
    let mut votes: Vec<ModelVote> = contributors
        .iter_mut()
        .map(|(model, cs)| {
            cs.sort_by(|a, b| by_score_then_id((a.0, &a.1), (b.0, &b.1)));
            ModelVote { model_id: model.clone(), score: cs.iter().map(|(s, _)| s).sum() }
        })
        .collect();
    votes.sort_by(|a, b| by_score_then_id((a.score, &a.model_id), (b.score, &b.model_id)));
    let shortfall = votes.len() < k;
    votes.truncate(k.max(1));

    let contributors: BTreeMap<String, Vec<String>> = contributors
        .into_iter()
        .filter(|(m, _)| votes.iter().any(|v| &v.model_id == m))
        .map(|(m, cs)| (m, cs.into_iter().map(|(_, id)| id).collect()))
        .collect();
    let rationale = votes
        .iter()
        .map(|v| {
            format!(
                "{} (score {:.4}) recommended by {}",
                v.model_id,
                v.score,
                contributors[&v.model_id].join(", ")
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok(ModelVotes { votes, contributors, rationale, shortfall })
}
