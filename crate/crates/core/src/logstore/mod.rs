//! Log data model, ingestion, sessionization and the user-context snapshot.
//!
//! A corpus directory holds `impressions.jsonl` (one search issuance per
//! line), `docs.jsonl` (the video catalog) and, for synthetic corpora,
//! `ground_truth.jsonl` with the planted reformulation events.

mod synth;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{
    synthesize_logs, synthesize_logs_with_stats, DwellConfig, EntitySpec, SimConfig, SynthStats,
    TopicSpec,
};
pub(crate) use synth::{Population, SearchBackend, Served, UserModelRun};

/// Default inactivity gap that closes a session.
pub const DEFAULT_SESSION_GAP_S: i64 = 1800;

pub const IMPRESSIONS_FILE: &str = "impressions.jsonl";
pub const DOCS_FILE: &str = "docs.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub String);

impl DocId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DocId {
    fn from(s: &str) -> Self {
        DocId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDoc {
    pub doc_id: DocId,
    pub title: String,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Latent topic label; only synthetic catalogs carry it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
}

impl VideoDoc {
    pub fn summary(&self) -> VideoSummary {
        VideoSummary {
            title: self.title.clone(),
            tags: self.tags.clone(),
        }
    }

    /// Title and tags as one piece of text, for term extraction.
    pub fn text(&self) -> String {
        let mut text = self.title.clone();
        for tag in &self.tags {
            text.push(' ');
            text.push_str(tag);
        }
        text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub doc_id: DocId,
    pub dwell_s: f64,
    pub clicked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub user_id: String,
    pub ts: i64,
    pub query: String,
    pub region: String,
    pub results: Vec<DocId>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
}

impl ImpressionRecord {
    /// Maximum dwell over all interactions; zero when nothing was played.
    pub fn max_dwell(&self) -> f64 {
        self.interactions
            .iter()
            .map(|i| i.dwell_s)
            .fold(0.0, f64::max)
    }

    pub fn clicked(&self) -> bool {
        self.interactions.iter().any(|i| i.clicked)
    }

    fn check(&self, docs: &DocCatalog) -> std::result::Result<(), String> {
        if self.results.is_empty() {
            return Err("impression has no results".into());
        }
        for id in &self.results {
            if !docs.contains_key(id) {
                return Err(format!("unknown doc_id {id}"));
            }
        }
        for i in &self.interactions {
            if !docs.contains_key(&i.doc_id) {
                return Err(format!("unknown doc_id {}", i.doc_id));
            }
            if !self.results.contains(&i.doc_id) {
                return Err(format!("interaction on {} which is not among the results", i.doc_id));
            }
            if !(i.dwell_s >= 0.0 && i.dwell_s.is_finite()) {
                return Err(format!("invalid dwell {} on {}", i.dwell_s, i.doc_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub user_id: String,
    pub impressions: Vec<ImpressionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub title: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

/// Recent history conditioning a rewrite decision. Lists are most recent first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserContext {
    #[serde(default)]
    pub h_query: Vec<String>,
    #[serde(default)]
    pub h_video: Vec<VideoSummary>,
    #[serde(default)]
    pub geo: String,
}

impl UserContext {
    /// Context terms in recency order: watched videos (title, then tags)
    /// followed by historical queries.
    pub fn terms_by_recency(&self) -> Vec<String> {
        let mut text = Vec::with_capacity(self.h_video.len() * 2 + self.h_query.len());
        for v in &self.h_video {
            text.push(v.title.as_str());
            text.extend(v.tags.iter().map(String::as_str));
        }
        text.extend(self.h_query.iter().map(String::as_str));
        crate::text::terms_in_order(&text.join(" "))
    }

    pub fn term_set(&self) -> crate::text::TermSet {
        self.terms_by_recency().into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub queries: usize,
    pub videos: usize,
}

impl Default for ContextWindow {
    fn default() -> Self {
        ContextWindow {
            queries: 10,
            videos: 20,
        }
    }
}

/// Rolling per-user history. `snapshot` gives the context as of now; `push`
/// records an impression after it happened.
#[derive(Debug, Clone, Default)]
pub struct ContextBuilder {
    window: ContextWindow,
    queries: VecDeque<String>,
    videos: VecDeque<VideoSummary>,
}

impl ContextBuilder {
    pub fn new(window: ContextWindow) -> Self {
        ContextBuilder {
            window,
            ..Default::default()
        }
    }

    pub fn snapshot(&self, geo: &str) -> UserContext {
        UserContext {
            h_query: self.queries.iter().cloned().collect(),
            h_video: self.videos.iter().cloned().collect(),
            geo: geo.to_string(),
        }
    }

    /// Watched videos are the clicked interactions, in interaction order.
    pub fn push(&mut self, imp: &ImpressionRecord, docs: &DocCatalog) {
        self.queries.push_front(imp.query.clone());
        self.queries.truncate(self.window.queries);
        for i in imp.interactions.iter().filter(|i| i.clicked) {
            if let Some(doc) = docs.get(&i.doc_id) {
                self.videos.push_front(doc.summary());
            }
        }
        self.videos.truncate(self.window.videos);
    }
}

/// A reformulation planted by the log generator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub session_id: String,
    pub user_id: String,
    pub orig_ts: i64,
    pub next_ts: i64,
    pub q_orig: String,
    pub q_next: String,
    pub topic: String,
}

pub type DocCatalog = BTreeMap<DocId, VideoDoc>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogCorpus {
    /// Sorted by user, then by start time.
    pub sessions: Vec<SessionRecord>,
    pub docs: DocCatalog,
    pub ground_truth: Option<Vec<GroundTruthEvent>>,
}

impl LogCorpus {
    pub fn impressions(&self) -> impl Iterator<Item = &ImpressionRecord> {
        self.sessions.iter().flat_map(|s| s.impressions.iter())
    }

    pub fn impression_count(&self) -> usize {
        self.sessions.iter().map(|s| s.impressions.len()).sum()
    }

    /// Sessions grouped per user, users in id order.
    pub fn sessions_by_user(&self) -> Vec<(&str, &[SessionRecord])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.sessions.len() {
            if i == self.sessions.len() || self.sessions[i].user_id != self.sessions[start].user_id
            {
                if start < i {
                    out.push((self.sessions[start].user_id.as_str(), &self.sessions[start..i]));
                }
                start = i;
            }
        }
        out
    }

    pub fn user_ids(&self) -> std::collections::BTreeSet<String> {
        self.sessions.iter().map(|s| s.user_id.clone()).collect()
    }

    /// Checks that every doc reference resolves and impressions are well formed.
    pub fn validate(&self) -> Result<()> {
        for s in &self.sessions {
            for imp in &s.impressions {
                imp.check(&self.docs).map_err(|e| {
                    Error::Integrity(format!("{} at ts {}: {e}", s.session_id, imp.ts))
                })?;
            }
        }
        Ok(())
    }
}

pub fn session_id(user_id: &str, ordinal: usize) -> String {
    format!("{user_id}-s{ordinal:04}")
}

/// Partitions records into per-user sessions. A new session starts whenever
/// the gap to the previous impression of the same user is at least
/// `gap_timeout` seconds. Records with equal timestamps keep input order.
pub fn sessionize(records: Vec<ImpressionRecord>, gap_timeout: i64) -> Vec<SessionRecord> {
    let mut per_user: BTreeMap<String, Vec<ImpressionRecord>> = BTreeMap::new();
    for r in records {
        per_user.entry(r.user_id.clone()).or_default().push(r);
    }
    let mut sessions = Vec::new();
    for (user, mut recs) in per_user {
        recs.sort_by_key(|r| r.ts);
        let mut current: Vec<ImpressionRecord> = Vec::new();
        for r in recs {
            if let Some(last) = current.last() {
                if r.ts - last.ts >= gap_timeout {
                    sessions.push(SessionRecord {
                        session_id: session_id(&user, sessions_for(&sessions, &user)),
                        user_id: user.clone(),
                        impressions: std::mem::take(&mut current),
                    });
                }
            }
            current.push(r);
        }
        if !current.is_empty() {
            sessions.push(SessionRecord {
                session_id: session_id(&user, sessions_for(&sessions, &user)),
                user_id: user.clone(),
                impressions: current,
            });
        }
    }
    sessions
}

fn sessions_for(sessions: &[SessionRecord], user: &str) -> usize {
    sessions
        .iter()
        .rev()
        .take_while(|s| s.user_id == user)
        .count()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_docs(path: &Path) -> Result<DocCatalog> {
    let mut catalog = DocCatalog::new();
    for doc in read_jsonl::<VideoDoc>(path)? {
        if doc.title.trim().is_empty() {
            return Err(Error::Integrity(format!("doc {} has an empty title", doc.doc_id)));
        }
        if catalog.contains_key(&doc.doc_id) {
            return Err(Error::Integrity(format!("duplicate doc_id {}", doc.doc_id)));
        }
        catalog.insert(doc.doc_id.clone(), doc);
    }
    Ok(catalog)
}

/// Reads an impression log and its doc catalog, then sessionizes with the
/// default gap.
pub fn ingest_files(impressions: &Path, docs: &Path) -> Result<LogCorpus> {
    let docs = load_docs(docs)?;
    let records: Vec<ImpressionRecord> = read_jsonl(impressions)?;
    for (idx, r) in records.iter().enumerate() {
        r.check(&docs).map_err(|e| {
            Error::Integrity(format!("{}:{}: {e}", impressions.display(), idx + 1))
        })?;
    }
    Ok(LogCorpus {
        sessions: sessionize(records, DEFAULT_SESSION_GAP_S),
        docs,
        ground_truth: None,
    })
}

/// Reads a corpus directory written by [`write_corpus`] or the `synth` command.
pub fn ingest_logs(dir: &Path) -> Result<LogCorpus> {
    let mut corpus = ingest_files(&dir.join(IMPRESSIONS_FILE), &dir.join(DOCS_FILE))?;
    let gt = dir.join(GROUND_TRUTH_FILE);
    if gt.exists() {
        corpus.ground_truth = Some(read_jsonl(&gt)?);
    }
    Ok(corpus)
}

pub fn write_corpus(corpus: &LogCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(IMPRESSIONS_FILE), corpus.impressions())?;
    write_jsonl(&dir.join(DOCS_FILE), corpus.docs.values())?;
    if let Some(gt) = &corpus.ground_truth {
        write_jsonl(&dir.join(GROUND_TRUTH_FILE), gt)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(user: &str, ts: i64, query: &str) -> ImpressionRecord {
        ImpressionRecord {
            user_id: user.into(),
            ts,
            query: query.into(),
            region: "north".into(),
            results: vec!["d1".into()],
            interactions: vec![],
        }
    }

    #[test]
    fn sessionize_empty() {
        assert!(sessionize(vec![], DEFAULT_SESSION_GAP_S).is_empty());
    }

    #[test]
    fn sessionize_gap_rule() {
        let close = sessionize(vec![imp("u", 0, "a"), imp("u", 100, "b")], 1800);
        assert_eq!(close.len(), 1);
        assert_eq!(close[0].impressions.len(), 2);

        let far = sessionize(vec![imp("u", 0, "a"), imp("u", 1801, "b")], 1800);
        assert_eq!(far.len(), 2);
        assert!(far.iter().all(|s| s.impressions.len() == 1));
        assert_eq!(far[0].session_id, "u-s0000");
        assert_eq!(far[1].session_id, "u-s0001");

        // exactly at the timeout also splits
        assert_eq!(sessionize(vec![imp("u", 0, "a"), imp("u", 1800, "b")], 1800).len(), 2);
    }

    #[test]
    fn sessionize_orders_and_separates_users() {
        let s = sessionize(
            vec![imp("b", 50, "x"), imp("a", 20, "y"), imp("a", 10, "z")],
            1800,
        );
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].user_id, "a");
        assert_eq!(s[0].impressions[0].query, "z");
        assert_eq!(s[1].user_id, "b");
    }

    #[test]
    fn context_builder_caps_and_orders() {
        let mut docs = DocCatalog::new();
        docs.insert(
            "d1".into(),
            VideoDoc {
                doc_id: "d1".into(),
                title: "t1".into(),
                tags: vec![],
                topic: None,
            },
        );
        let mut b = ContextBuilder::new(ContextWindow {
            queries: 2,
            videos: 1,
        });
        for (i, q) in ["a", "b", "c"].iter().enumerate() {
            let mut r = imp("u", i as i64, q);
            r.interactions.push(Interaction {
                doc_id: "d1".into(),
                dwell_s: 3.0,
                clicked: true,
            });
            b.push(&r, &docs);
        }
        let ctx = b.snapshot("east");
        assert_eq!(ctx.h_query, vec!["c", "b"]);
        assert_eq!(ctx.h_video.len(), 1);
        assert_eq!(ctx.geo, "east");
    }

    #[test]
    fn max_dwell_of_no_interactions_is_zero() {
        assert_eq!(imp("u", 0, "q").max_dwell(), 0.0);
    }
}
