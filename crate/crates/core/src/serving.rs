//! Online flow: the traditional recall path and the rewrite path run side by
//! side, and the rewrite path's documents are appended to the main results
//! only when it finishes within the main path's budget.
//!
//! Latency is a declared per-stage cost model evaluated on a simulated clock.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fakeindex::FakeIndex;
use crate::logstore::{DocCatalog, DocId, SearchBackend, Served, UserContext};
use crate::policy::{PolicyInput, PolicyParams, Provenance};
use crate::reward::RewardOracle;
use crate::text::{tokenize_terms, TermSet};

/// Size of the traditional recall list.
pub const RECALL_DEPTH: usize = 100;

/// Inverted index over document titles and tags.
#[derive(Debug, Clone, Default)]
pub struct DocStore {
    ids: Vec<DocId>,
    terms: Vec<TermSet>,
    by_id: HashMap<DocId, usize>,
    postings: HashMap<String, Vec<u32>>,
}

impl DocStore {
    pub fn new(docs: &DocCatalog) -> Self {
        let mut store = DocStore::default();
        // the catalog iterates in doc_id order, so posting lists are sorted by id
        for (i, (id, doc)) in docs.iter().enumerate() {
            let terms = tokenize_terms(&doc.text());
            for t in &terms {
                store.postings.entry(t.clone()).or_default().push(i as u32);
            }
            store.ids.push(id.clone());
            store.by_id.insert(id.clone(), i);
            store.terms.push(terms);
        }
        store
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn terms(&self, id: &DocId) -> Option<&TermSet> {
        self.by_id.get(id).map(|&i| &self.terms[i])
    }
}

/// Documents sharing at least one term with `q`, by shared-term count
/// descending then doc id, at most [`RECALL_DEPTH`].
pub fn traditional_recall(q: &str, store: &DocStore) -> Vec<DocId> {
    scored_recall(q, store).into_iter().map(|(d, _)| d).collect()
}

fn scored_recall(q: &str, store: &DocStore) -> Vec<(DocId, usize)> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for t in tokenize_terms(q) {
        if let Some(list) = store.postings.get(&t) {
            for &i in list {
                *counts.entry(i).or_default() += 1;
            }
        }
    }
    let mut hits: Vec<(u32, usize)> = counts.into_iter().collect();
    hits.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.truncate(RECALL_DEPTH);
    hits.into_iter()
        .map(|(i, c)| (store.ids[i as usize].clone(), c))
        .collect()
}

impl SearchBackend for DocStore {
    fn search(&self, query: &str, _ctx: &UserContext) -> Served {
        Served {
            docs: traditional_recall(query, self),
            rewrite_attempted: false,
            index_hit: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub request_id: String,
    pub query: String,
    #[serde(default)]
    pub context: UserContext,
}

impl SearchRequest {
    pub fn validate(&self) -> Result<()> {
        if self.query.trim().is_empty() {
            return Err(Error::Contract(format!("request {} has an empty query", self.request_id)));
        }
        Ok(())
    }
}

/// Fixed per-stage delays in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyModel {
    pub traditional_recall: f64,
    pub llm_inference: f64,
    pub index_lookup: f64,
    pub relevance_filter: f64,
    pub fusion: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            traditional_recall: 120.0,
            llm_inference: 80.0,
            index_lookup: 1.0,
            relevance_filter: 5.0,
            fusion: 2.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.traditional_recall,
            self.llm_inference,
            self.index_lookup,
            self.relevance_filter,
            self.fusion,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("latencies must be finite and non-negative".into()))
        }
    }

    pub fn rewrite_path_ms(&self) -> f64 {
        self.llm_inference + self.index_lookup + self.relevance_filter
    }

    /// True when the rewrite path completes no later than the main path.
    pub fn rewrite_fits(&self) -> bool {
        self.rewrite_path_ms() <= self.traditional_recall
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub rewrite_enabled: bool,
    pub relevance_threshold: f64,
    /// Additionally require every fake doc to share a term with the query.
    pub require_shared_term: bool,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            rewrite_enabled: true,
            relevance_threshold: 0.0,
            require_shared_term: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocSource {
    Main,
    Fake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDoc {
    pub doc_id: DocId,
    pub source: DocSource,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub request_id: String,
    pub docs: Vec<FusedDoc>,
    pub rewrite_used: Option<String>,
    pub e2e_latency_ms: f64,
    /// The policy proposed a rewrite other than identity or reject.
    pub rewrite_attempted: bool,
    pub index_hit: bool,
    /// The rewrite path was dropped for finishing after the main path.
    pub rewrite_timed_out: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewriteOutcome {
    /// The policy chose the identity rewrite or rejected.
    NotRewritten,
    Miss { rewrite: String },
    Hit { rewrite: String, docs: Vec<(DocId, f64)> },
}

/// Argmax policy decision followed by the fake index lookup.
pub fn decide_rewrite(
    query: &str,
    context: &UserContext,
    params: &PolicyParams,
    index: &FakeIndex,
    oracle: &RewardOracle,
) -> RewriteOutcome {
    let input = PolicyInput::new(query, context, oracle);
    let best = &input.candidates[input.argmax(params)];
    if matches!(best.provenance, Provenance::Reject | Provenance::Identity) {
        return RewriteOutcome::NotRewritten;
    }
    let rewrite = best.key();
    match index.lookup_normalized(&rewrite) {
        Some(e) => RewriteOutcome::Hit {
            rewrite,
            docs: e.docs.clone(),
        },
        None => RewriteOutcome::Miss { rewrite },
    }
}

pub fn rewrite_path(
    req: &SearchRequest,
    params: &PolicyParams,
    index: &FakeIndex,
    oracle: &RewardOracle,
) -> Option<(String, Vec<(DocId, f64)>)> {
    match decide_rewrite(&req.query, &req.context, params, index, oracle) {
        RewriteOutcome::Hit { rewrite, docs } => Some((rewrite, docs)),
        _ => None,
    }
}

fn jaccard(a: &TermSet, b: &TermSet) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Keeps docs whose term Jaccard with `q_orig` reaches `threshold` or that
/// share at least one term with it.
pub fn relevance_filter(
    q_orig: &str,
    docs: &[(DocId, f64)],
    store: &DocStore,
    threshold: f64,
) -> Vec<(DocId, f64)> {
    let q = tokenize_terms(q_orig);
    let empty = TermSet::new();
    docs.iter()
        .filter(|(d, _)| {
            let t = store.terms(d).unwrap_or(&empty);
            jaccard(&q, t) >= threshold || !q.is_disjoint(t)
        })
        .cloned()
        .collect()
}

fn serving_filter(q_orig: &str, docs: &[(DocId, f64)], store: &DocStore, cfg: &ServeConfig) -> Vec<(DocId, f64)> {
    if !cfg.require_shared_term {
        return relevance_filter(q_orig, docs, store, cfg.relevance_threshold);
    }
    let q = tokenize_terms(q_orig);
    docs.iter()
        .filter(|(d, _)| {
            store
                .terms(d)
                .is_some_and(|t| !q.is_disjoint(t) && jaccard(&q, t) >= cfg.relevance_threshold)
        })
        .cloned()
        .collect()
}

/// Main docs in order, then fake docs not already present.
pub fn fuse(main: &[(DocId, f64)], fake: &[(DocId, f64)]) -> Vec<FusedDoc> {
    let mut seen: HashSet<&DocId> = HashSet::with_capacity(main.len() + fake.len());
    let mut out = Vec::with_capacity(main.len() + fake.len());
    for (source, list) in [(DocSource::Main, main), (DocSource::Fake, fake)] {
        for (d, s) in list {
            if seen.insert(d) {
                out.push(FusedDoc {
                    doc_id: d.clone(),
                    source,
                    score: *s,
                });
            }
        }
    }
    out
}

/// Everything the online flow needs, borrowed.
#[derive(Clone, Copy)]
pub struct Server<'a> {
    pub params: &'a PolicyParams,
    pub index: &'a FakeIndex,
    pub oracle: &'a RewardOracle,
    pub store: &'a DocStore,
    pub latency: &'a LatencyModel,
    pub config: &'a ServeConfig,
}

impl Server<'_> {
    pub fn serve(&self, req: &SearchRequest) -> FusionResult {
        let (main, outcome) = rayon::join(
            || {
                scored_recall(&req.query, self.store)
                    .into_iter()
                    .map(|(d, c)| (d, c as f64))
                    .collect::<Vec<_>>()
            },
            || {
                if self.config.rewrite_enabled {
                    decide_rewrite(&req.query, &req.context, self.params, self.index, self.oracle)
                } else {
                    RewriteOutcome::NotRewritten
                }
            },
        );
        let lat = self.latency;
        let e2e_latency_ms = lat.traditional_recall + lat.fusion;
        let rewrite_attempted = !matches!(outcome, RewriteOutcome::NotRewritten);
        let timed_out = rewrite_attempted && !lat.rewrite_fits();
        let mut result = FusionResult {
            request_id: req.request_id.clone(),
            docs: Vec::new(),
            rewrite_used: None,
            e2e_latency_ms,
            rewrite_attempted,
            index_hit: matches!(outcome, RewriteOutcome::Hit { .. }),
            rewrite_timed_out: timed_out,
        };
        let fake = match outcome {
            RewriteOutcome::Hit { rewrite, docs } if !timed_out => {
                let kept = serving_filter(&req.query, &docs, self.store, self.config);
                Some((rewrite, kept))
            }
            _ => None,
        };
        match fake {
            Some((rewrite, kept)) => {
                result.docs = fuse(&main, &kept);
                if result.docs.len() > main.len() {
                    result.rewrite_used = Some(rewrite);
                }
            }
            None => result.docs = fuse(&main, &[]),
        }
        result
    }
}

pub fn serve(
    req: &SearchRequest,
    params: &PolicyParams,
    index: &FakeIndex,
    oracle: &RewardOracle,
    store: &DocStore,
    latency: &LatencyModel,
) -> FusionResult {
    Server {
        params,
        index,
        oracle,
        store,
        latency,
        config: &ServeConfig::default(),
    }
    .serve(req)
}

impl SearchBackend for Server<'_> {
    fn search(&self, query: &str, ctx: &UserContext) -> Served {
        let r = self.serve(&SearchRequest {
            request_id: String::new(),
            query: query.to_string(),
            context: ctx.clone(),
        });
        Served {
            docs: r.docs.into_iter().map(|d| d.doc_id).collect(),
            rewrite_attempted: r.rewrite_attempted,
            index_hit: r.index_hit,
        }
    }
}
