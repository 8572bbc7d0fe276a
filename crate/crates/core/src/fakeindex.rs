//! Pre-computed query to documents cache.
//!
//! Head queries (at least `head_min_clicks` clicks) are indexed from user
//! feedback: clicked documents ranked by click-through rate, ties broken by
//! mean dwell. Every other logged query is indexed from how highly each
//! document was ranked in its logged result lists. Lookups are a single hash
//! probe on the normalized query.
//!
//! The on-disk layout is described in `docs/index-format.md`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logstore::{DocId, LogCorpus};
use crate::text::normalize_query;

pub const MAGIC: &[u8; 4] = b"QRFI";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Interaction,
    Retrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub query: String,
    pub docs: Vec<(DocId, f64)>,
    pub source: Source,
}

impl IndexEntry {
    pub fn doc_ids(&self) -> impl Iterator<Item = &DocId> {
        self.docs.iter().map(|(d, _)| d)
    }

    fn check(&self, k: usize) -> std::result::Result<(), String> {
        if self.docs.len() > k {
            return Err(format!("entry {:?} has {} docs, limit {k}", self.query, self.docs.len()));
        }
        let mut seen = HashSet::new();
        for (i, (d, s)) in self.docs.iter().enumerate() {
            if !s.is_finite() {
                return Err(format!("entry {:?} has a non-finite score", self.query));
            }
            if !seen.insert(d) {
                return Err(format!("entry {:?} repeats doc {d}", self.query));
            }
            if i > 0 && self.docs[i - 1].1 < *s {
                return Err(format!("entry {:?} is not sorted by score", self.query));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub k: usize,
    pub head_min_clicks: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            k: 50,
            head_min_clicks: 5,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.head_min_clicks == 0 {
            return Err(Error::Config("k and head_min_clicks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FakeIndex {
    k: usize,
    entries: HashMap<String, IndexEntry>,
}

impl Default for FakeIndex {
    fn default() -> Self {
        FakeIndex::new(BuildConfig::default().k)
    }
}

impl FakeIndex {
    pub fn new(k: usize) -> Self {
        FakeIndex {
            k,
            entries: HashMap::new(),
        }
    }

    /// Builds an index from explicit entries, validating each one.
    pub fn from_entries(k: usize, entries: impl IntoIterator<Item = IndexEntry>) -> Result<Self> {
        let mut index = FakeIndex::new(k);
        for e in entries {
            e.check(k).map_err(Error::Contract)?;
            if index.entries.insert(e.query.clone(), e).is_some() {
                return Err(Error::Contract("duplicate query in index entries".into()));
            }
        }
        Ok(index)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, q: &str) -> Option<&IndexEntry> {
        self.entries.get(&normalize_query(q))
    }

    /// Lookup by an already normalized key.
    pub fn lookup_normalized(&self, key: &str) -> Option<&IndexEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = &IndexEntry> {
        self.entries.values()
    }

    /// Entries sorted by query.
    pub fn sorted_entries(&self) -> Vec<&IndexEntry> {
        let mut v: Vec<&IndexEntry> = self.entries.values().collect();
        v.sort_by(|a, b| a.query.cmp(&b.query));
        v
    }
}

#[derive(Default)]
struct DocFeedback {
    shown: u64,
    clicks: u64,
    dwell_sum: f64,
    rank_score: f64,
}

#[derive(Default)]
struct QueryFeedback {
    impressions: u64,
    clicks: u64,
    docs: BTreeMap<DocId, DocFeedback>,
}

pub fn build_index(corpus: &LogCorpus, cfg: &BuildConfig) -> Result<FakeIndex> {
    cfg.validate()?;
    let k = cfg.k;
    let mut per_query: HashMap<String, QueryFeedback> = HashMap::new();
    for imp in corpus.impressions() {
        let key = normalize_query(&imp.query);
        if key.is_empty() {
            continue;
        }
        let qf = per_query.entry(key).or_default();
        qf.impressions += 1;
        for (rank, d) in imp.results.iter().enumerate() {
            let f = qf.docs.entry(d.clone()).or_default();
            f.shown += 1;
            if rank < k {
                f.rank_score += (k - rank) as f64 / k as f64;
            }
        }
        for it in imp.interactions.iter().filter(|it| it.clicked) {
            qf.clicks += 1;
            let f = qf.docs.entry(it.doc_id.clone()).or_default();
            f.clicks += 1;
            f.dwell_sum += it.dwell_s;
        }
    }

    let mut index = FakeIndex::new(k);
    for (query, qf) in per_query {
        let entry = if qf.clicks >= cfg.head_min_clicks as u64 {
            let mut scored: Vec<(DocId, f64, f64)> = qf
                .docs
                .into_iter()
                .filter(|(_, f)| f.clicks > 0)
                .map(|(d, f)| {
                    let shown = f.shown.max(f.clicks) as f64;
                    (d, f.clicks as f64 / shown, f.dwell_sum / f.clicks as f64)
                })
                .collect();
            scored.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then(b.2.total_cmp(&a.2))
                    .then_with(|| a.0.cmp(&b.0))
            });
            scored.truncate(k);
            IndexEntry {
                query,
                docs: scored.into_iter().map(|(d, s, _)| (d, s)).collect(),
                source: Source::Interaction,
            }
        } else {
            let n = qf.impressions as f64;
            let mut scored: Vec<(DocId, f64)> = qf
                .docs
                .into_iter()
                .filter(|(_, f)| f.rank_score > 0.0)
                .map(|(d, f)| (d, f.rank_score / n))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            scored.truncate(k);
            IndexEntry {
                query,
                docs: scored,
                source: Source::Retrieval,
            }
        };
        index.entries.insert(entry.query.clone(), entry);
    }
    Ok(index)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    let len = u32::try_from(b.len()).map_err(|_| Error::Format("field longer than 4 GiB".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(b);
    Ok(())
}

/// Serializes the index; entries are written sorted by query so equal indexes
/// produce identical bytes.
pub fn encode_index(index: &FakeIndex) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    let count = |n: usize| u32::try_from(n).map_err(|_| Error::Format("count overflows u32".into()));
    out.extend_from_slice(&count(index.k)?.to_le_bytes());
    out.extend_from_slice(&count(index.len())?.to_le_bytes());
    for e in index.sorted_entries() {
        put_bytes(&mut out, e.query.as_bytes())?;
        out.push(match e.source {
            Source::Interaction => 0,
            Source::Retrieval => 1,
        });
        out.extend_from_slice(&count(e.docs.len())?.to_le_bytes());
        for (d, s) in &e.docs {
            put_bytes(&mut out, d.as_str().as_bytes())?;
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("invalid utf-8 before byte {}", self.pos)))
    }
}

pub fn decode_index(buf: &[u8]) -> Result<FakeIndex> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let k = r.u32()?;
    if k == 0 {
        return Err(Error::Format("k must be at least 1".into()));
    }
    let n = r.u32()?;
    let mut entries = HashMap::with_capacity(n.min(buf.len()));
    for _ in 0..n {
        let query = r.string()?;
        let source = match r.u8()? {
            0 => Source::Interaction,
            1 => Source::Retrieval,
            other => return Err(Error::Format(format!("unknown source tag {other}"))),
        };
        let m = r.u32()?;
        let mut docs = Vec::with_capacity(m.min(k));
        for _ in 0..m {
            let d = r.string()?;
            docs.push((DocId(d), r.f64()?));
        }
        let e = IndexEntry { query, docs, source };
        e.check(k).map_err(Error::Format)?;
        if entries.insert(e.query.clone(), e).is_some() {
            return Err(Error::Format("duplicate query".into()));
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(FakeIndex { k, entries })
}

pub fn save_index(index: &FakeIndex, path: &Path) -> Result<()> {
    std::fs::write(path, encode_index(index)?).map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<FakeIndex> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_index(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logstore::{sessionize, DocCatalog, ImpressionRecord, Interaction, VideoDoc};

    fn docs(ids: &[&str]) -> DocCatalog {
        ids.iter()
            .map(|&id| {
                (
                    DocId::from(id),
                    VideoDoc {
                        doc_id: id.into(),
                        title: format!("title {id}"),
                        tags: vec![],
                        topic: None,
                    },
                )
            })
            .collect()
    }

    fn imp(ts: i64, q: &str, results: &[&str], clicks: &[(&str, f64)]) -> ImpressionRecord {
        ImpressionRecord {
            user_id: format!("u{ts}"),
            ts,
            query: q.into(),
            region: "r".into(),
            results: results.iter().map(|&d| d.into()).collect(),
            interactions: clicks
                .iter()
                .map(|&(d, dwell)| Interaction {
                    doc_id: d.into(),
                    dwell_s: dwell,
                    clicked: true,
                })
                .collect(),
        }
    }

    fn corpus(records: Vec<ImpressionRecord>) -> LogCorpus {
        LogCorpus {
            sessions: sessionize(records, 1800),
            docs: docs(&["A", "B", "C", "D"]),
            ground_truth: None,
        }
    }

    #[test]
    fn head_query_ranked_by_ctr() {
        // A: 5 of 10 impressions clicked, B: 2 of 10
        let mut records = Vec::new();
        for i in 0..10 {
            let mut clicks = Vec::new();
            if i < 5 {
                clicks.push(("A", 20.0));
            }
            if i >= 8 {
                clicks.push(("B", 20.0));
            }
            records.push(imp(i, "head q", &["A", "B"], &clicks));
        }
        let index = build_index(&corpus(records), &BuildConfig::default()).unwrap();
        let e = index.lookup("Head Q").unwrap();
        assert_eq!(e.source, Source::Interaction);
        assert_eq!(e.docs, vec![("A".into(), 0.5), ("B".into(), 0.2)]);
    }

    #[test]
    fn dwell_breaks_ctr_ties() {
        let records = (0..6)
            .map(|i| {
                let d = if i % 2 == 0 { ("C", 40.0) } else { ("D", 15.0) };
                imp(i, "q", &["C", "D"], &[d])
            })
            .collect();
        let index = build_index(&corpus(records), &BuildConfig::default()).unwrap();
        let ids: Vec<&str> = index.lookup("q").unwrap().doc_ids().map(DocId::as_str).collect();
        assert_eq!(ids, ["C", "D"]);
    }

    #[test]
    fn tail_query_from_ranks() {
        let index =
            build_index(&corpus(vec![imp(0, "tail", &["C", "D"], &[])]), &BuildConfig::default()).unwrap();
        let e = index.lookup("tail").unwrap();
        assert_eq!(e.source, Source::Retrieval);
        assert_eq!(e.docs, vec![("C".into(), 1.0), ("D".into(), 49.0 / 50.0)]);
        assert!(index.lookup("never logged").is_none());
    }

    #[test]
    fn entries_truncated_to_k() {
        let ids: Vec<String> = (0..80).map(|i| format!("d{i:03}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let mut c = corpus(vec![imp(0, "wide", &refs, &[])]);
        c.docs = docs(&refs);
        let index = build_index(&c, &BuildConfig::default()).unwrap();
        assert_eq!(index.lookup("wide").unwrap().docs.len(), 50);
    }

    #[test]
    fn empty_corpus() {
        let index = build_index(&LogCorpus::default(), &BuildConfig::default()).unwrap();
        assert!(index.is_empty());
        assert_eq!(decode_index(&encode_index(&index).unwrap()).unwrap(), index);
    }

    #[test]
    fn binary_round_trip_and_failures() {
        let records = vec![imp(0, "a", &["A", "B"], &[("A", 3.0)]), imp(1, "b", &["C"], &[])];
        let index = build_index(&corpus(records), &BuildConfig::default()).unwrap();
        let bytes = encode_index(&index).unwrap();
        assert_eq!(decode_index(&bytes).unwrap(), index);
        assert_eq!(encode_index(&decode_index(&bytes).unwrap()).unwrap(), bytes);
        for cut in 0..bytes.len() {
            assert!(matches!(decode_index(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_index(&v2), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(decode_index(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn from_entries_validates() {
        let bad = IndexEntry {
            query: "q".into(),
            docs: vec![("A".into(), 0.1), ("B".into(), 0.2)],
            source: Source::Retrieval,
        };
        assert!(FakeIndex::from_entries(50, [bad]).is_err());
    }
}
