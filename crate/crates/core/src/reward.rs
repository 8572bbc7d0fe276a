//! Posterior reward from historical query statistics.
//!
//! A query is "known to the system" when it was issued at least once inside
//! the trailing window. Known queries earn `lambda1 * ln(freq) + lambda2 * ctr`,
//! everything else gets the fixed penalty.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logstore::LogCorpus;
use crate::text::normalize_query;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub query: String,
    pub freq: u64,
    pub ctr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub r_penalty: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            lambda1: 1.0,
            lambda2: 2.0,
            r_penalty: -1.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if self.r_penalty < 0.0 && self.lambda1.is_finite() && self.lambda2.is_finite() {
            Ok(())
        } else {
            Err(Error::Config("r_penalty must be negative and weights finite".into()))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardOracle {
    stats: HashMap<String, QueryStats>,
    pub window_days: u32,
}

impl RewardOracle {
    pub fn from_stats(stats: impl IntoIterator<Item = QueryStats>, window_days: u32) -> Self {
        RewardOracle {
            stats: stats
                .into_iter()
                .map(|mut s| {
                    s.query = normalize_query(&s.query);
                    (s.query.clone(), s)
                })
                .collect(),
            window_days,
        }
    }

    pub fn get(&self, q: &str) -> Option<&QueryStats> {
        self.stats.get(&normalize_query(q))
    }

    /// Lookup by an already normalized key.
    pub(crate) fn get_normalized(&self, key: &str) -> Option<&QueryStats> {
        self.stats.get(key)
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// Stats sorted by query.
    pub fn sorted(&self) -> Vec<&QueryStats> {
        let mut v: Vec<&QueryStats> = self.stats.values().collect();
        v.sort_by(|a, b| a.query.cmp(&b.query));
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "# window_days\t{}", self.window_days).map_err(io)?;
        for s in self.sorted() {
            writeln!(w, "{}\t{}\t{}", s.query, s.freq, s.ctr).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut window_days = 0;
        let mut stats = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            if let Some(rest) = line.strip_prefix("# window_days\t") {
                window_days = rest.trim().parse().map_err(|e| parse_err(format!("{e}")))?;
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [query, freq, ctr] = cols[..] else {
                return Err(parse_err(format!("expected 3 columns, found {}", cols.len())));
            };
            let freq: u64 = freq.parse().map_err(|e| parse_err(format!("freq: {e}")))?;
            let ctr: f64 = ctr.parse().map_err(|e| parse_err(format!("ctr: {e}")))?;
            if freq == 0 || !(0.0..=1.0).contains(&ctr) {
                return Err(parse_err(format!("out-of-range stats for {query:?}")));
            }
            stats.push(QueryStats {
                query: query.to_string(),
                freq,
                ctr,
            });
        }
        Ok(RewardOracle::from_stats(stats, window_days))
    }
}

/// Counts impressions and clicked impressions per normalized query within the
/// trailing `window_days` ending at the newest impression.
pub fn build_oracle(corpus: &LogCorpus, window_days: u32) -> Result<RewardOracle> {
    if window_days == 0 {
        return Err(Error::Config("window_days must be at least 1".into()));
    }
    let Some(newest) = corpus.impressions().map(|i| i.ts).max() else {
        return Ok(RewardOracle {
            stats: HashMap::new(),
            window_days,
        });
    };
    let cutoff = newest - window_days as i64 * SECONDS_PER_DAY;
    let mut counts: HashMap<String, (u64, u64)> = HashMap::new();
    for imp in corpus.impressions().filter(|i| i.ts > cutoff) {
        let key = normalize_query(&imp.query);
        if key.is_empty() {
            continue;
        }
        let entry = counts.entry(key).or_default();
        entry.0 += 1;
        entry.1 += imp.clicked() as u64;
    }
    let stats = counts
        .into_iter()
        .map(|(query, (freq, clicks))| {
            (
                query.clone(),
                QueryStats {
                    query,
                    freq,
                    ctr: clicks as f64 / freq as f64,
                },
            )
        })
        .collect();
    Ok(RewardOracle { stats, window_days })
}

pub fn in_vocabulary(oracle: &RewardOracle, q: &str) -> bool {
    oracle.get(q).is_some()
}

/// Reward for serving the query `q`.
pub fn reward(oracle: &RewardOracle, q: &str, p: &RewardParams) -> f64 {
    reward_for(oracle.get(q), p)
}

pub(crate) fn reward_for(stats: Option<&QueryStats>, p: &RewardParams) -> f64 {
    match stats {
        Some(s) => p.lambda1 * (s.freq as f64).ln() + p.lambda2 * s.ctr,
        None => p.r_penalty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logstore::{sessionize, DocCatalog, ImpressionRecord, Interaction, VideoDoc};

    fn oracle_with(query: &str, freq: u64, ctr: f64) -> RewardOracle {
        RewardOracle::from_stats(
            [QueryStats {
                query: query.into(),
                freq,
                ctr,
            }],
            180,
        )
    }

    fn unit() -> RewardParams {
        RewardParams {
            lambda1: 1.0,
            lambda2: 1.0,
            r_penalty: -1.0,
        }
    }

    #[test]
    fn reward_examples() {
        assert_eq!(reward(&oracle_with("q", 1, 0.0), "q", &unit()), 0.0);
        // ln(100) + 0.2, evaluated independently: 4.605170185988092 + 0.2
        let r = reward(&oracle_with("q", 100, 0.2), "q", &unit());
        assert!((r - 4.805170185988092).abs() < 1e-9);
        assert_eq!(reward(&oracle_with("q", 100, 0.2), "other", &unit()), -1.0);
    }

    #[test]
    fn vocabulary_is_normalized() {
        let o = oracle_with("Guang Liang", 3, 0.5);
        assert!(in_vocabulary(&o, "guang liang"));
        assert!(in_vocabulary(&o, "  GUANG   liang "));
        assert!(!in_vocabulary(&o, "guang"));
    }

    fn corpus(events: &[(i64, &str, bool)]) -> LogCorpus {
        let mut docs = DocCatalog::new();
        docs.insert(
            "d".into(),
            VideoDoc {
                doc_id: "d".into(),
                title: "t".into(),
                tags: vec![],
                topic: None,
            },
        );
        let records = events
            .iter()
            .map(|&(ts, q, clicked)| ImpressionRecord {
                user_id: "u".into(),
                ts,
                query: q.into(),
                region: "r".into(),
                results: vec!["d".into()],
                interactions: if clicked {
                    vec![Interaction {
                        doc_id: "d".into(),
                        dwell_s: 5.0,
                        clicked: true,
                    }]
                } else {
                    vec![]
                },
            })
            .collect();
        LogCorpus {
            sessions: sessionize(records, 1800),
            docs,
            ground_truth: None,
        }
    }

    #[test]
    fn counts_impressions_and_clicks() {
        let events: Vec<(i64, &str, bool)> =
            (0..10).map(|i| (1_000_000 + i * 60, "q", i < 2)).collect();
        let o = build_oracle(&corpus(&events), 180).unwrap();
        let s = o.get("q").unwrap();
        assert_eq!(s.freq, 10);
        assert!((s.ctr - 0.2).abs() < 1e-15);
    }

    #[test]
    fn window_excludes_old_queries() {
        let day = SECONDS_PER_DAY;
        let o = build_oracle(&corpus(&[(0, "old", true), (10 * day, "new", false)]), 5).unwrap();
        assert!(!in_vocabulary(&o, "old"));
        assert!(in_vocabulary(&o, "new"));
    }

    #[test]
    fn empty_corpus_gives_empty_oracle() {
        let o = build_oracle(&LogCorpus::default(), 180).unwrap();
        assert!(o.is_empty());
        assert!(!in_vocabulary(&o, "anything"));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.tsv");
        let o = RewardOracle::from_stats(
            [
                QueryStats { query: "b q".into(), freq: 3, ctr: 1.0 / 3.0 },
                QueryStats { query: "a".into(), freq: 1, ctr: 0.0 },
            ],
            180,
        );
        o.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("a\t1\t"));
        assert_eq!(RewardOracle::load(&path).unwrap(), o);
    }
}
