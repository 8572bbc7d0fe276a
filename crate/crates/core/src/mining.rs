//! Mining "when to rewrite" training samples out of session logs.
//!
//! Positives are adjacent in-session query pairs where the first query failed
//! (short dwell) and the reformulation succeeded (valid consumption). They
//! pass two filters: a coarse context-overlap check on the gain terms and an
//! intent verification stage behind the [`IntentVerifier`] trait. Negatives
//! are queries that ended the session with a long consumption and become
//! reject samples.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logstore::{ContextBuilder, ContextWindow, LogCorpus, UserContext};
pub use crate::text::tokenize_terms;
use crate::text::{normalize_query, TermSet};

/// Distinguished target meaning "do not rewrite".
pub const REJECT_TOKEN: &str = "<reject>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningThresholds {
    pub tau_short: f64,
    pub tau_valid: f64,
    pub tau_long: f64,
}

impl Default for MiningThresholds {
    fn default() -> Self {
        MiningThresholds {
            tau_short: 2.4,
            tau_valid: 10.0,
            tau_long: 30.0,
        }
    }
}

impl MiningThresholds {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.tau_short && self.tau_short < self.tau_valid && self.tau_valid <= self.tau_long
        {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "thresholds must satisfy 0 < tau_short < tau_valid <= tau_long, got {self:?}"
            )))
        }
    }
}

/// A candidate reformulation with the context as of just before `q_orig`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewritePair {
    pub session_id: String,
    pub user_id: String,
    pub orig_ts: i64,
    pub next_ts: i64,
    pub context: UserContext,
    pub q_orig: String,
    pub q_next: String,
    pub gain_terms: TermSet,
}

impl RewritePair {
    pub fn new(
        session_id: &str,
        user_id: &str,
        orig_ts: i64,
        next_ts: i64,
        context: UserContext,
        q_orig: &str,
        q_next: &str,
    ) -> Self {
        let orig = tokenize_terms(q_orig);
        let gain_terms = tokenize_terms(q_next).difference(&orig).cloned().collect();
        RewritePair {
            session_id: session_id.to_string(),
            user_id: user_id.to_string(),
            orig_ts,
            next_ts,
            context,
            q_orig: q_orig.to_string(),
            q_next: q_next.to_string(),
            gain_terms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Rewrite(String),
    Reject,
}

impl Target {
    pub fn text(&self) -> &str {
        match self {
            Target::Rewrite(t) => t,
            Target::Reject => REJECT_TOKEN,
        }
    }

    pub fn from_text(text: &str) -> Self {
        if text == REJECT_TOKEN {
            Target::Reject
        } else {
            Target::Rewrite(text.to_string())
        }
    }
}

/// `(context, q_orig) -> target`; `target` serializes as the rewrite text or
/// the literal reject token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub context: UserContext,
    pub q_orig: String,
    #[serde(with = "target_text")]
    pub target: Target,
}

mod target_text {
    use super::Target;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Target, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(t.text())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Target, D::Error> {
        let text = String::deserialize(d)?;
        if text.trim().is_empty() {
            return Err(serde::de::Error::custom("empty target"));
        }
        Ok(Target::from_text(&text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Positive,
    Negative,
}

/// Fine-grained check that a reformulation is grounded in the user context.
/// An external teacher model can be plugged in behind this trait.
pub trait IntentVerifier: Sync {
    fn verify(&self, context: &UserContext, q_orig: &str, q_next: &str) -> Result<Verdict>;
}

/// Deterministic verifier: positive iff every gain term explicitly appears in
/// the user context.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceVerifier;

impl IntentVerifier for ReferenceVerifier {
    fn verify(&self, context: &UserContext, q_orig: &str, q_next: &str) -> Result<Verdict> {
        let orig = tokenize_terms(q_orig);
        let ctx = context.term_set();
        let mut gain = tokenize_terms(q_next).into_iter().filter(|t| !orig.contains(t)).peekable();
        if gain.peek().is_none() {
            return Ok(Verdict::Negative);
        }
        Ok(if gain.all(|t| ctx.contains(&t)) {
            Verdict::Positive
        } else {
            Verdict::Negative
        })
    }
}

/// Step 1: accepted iff some gain term occurs in a watched title/tag or a
/// historical query.
pub fn context_overlap_filter(pair: &RewritePair, context: &UserContext) -> bool {
    if pair.gain_terms.is_empty() {
        return false;
    }
    let ctx = context.term_set();
    pair.gain_terms.iter().any(|t| ctx.contains(t))
}

pub fn verify_intent(pair: &RewritePair, verifier: &dyn IntentVerifier) -> Result<Verdict> {
    verifier.verify(&pair.context, &pair.q_orig, &pair.q_next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectSample {
    pub session_id: String,
    pub ts: i64,
    pub context: UserContext,
    pub q_orig: String,
}

impl RejectSample {
    pub fn to_training_sample(&self) -> TrainingSample {
        TrainingSample {
            context: self.context.clone(),
            q_orig: self.q_orig.clone(),
            target: Target::Reject,
        }
    }
}

struct Mined {
    pairs: Vec<RewritePair>,
    rejects: Vec<RejectSample>,
}

fn mine_user(
    corpus: &LogCorpus,
    sessions: &[crate::logstore::SessionRecord],
    t: &MiningThresholds,
    window: ContextWindow,
) -> Mined {
    let mut ctx = ContextBuilder::new(window);
    let mut out = Mined {
        pairs: Vec::new(),
        rejects: Vec::new(),
    };
    for s in sessions {
        let imps = &s.impressions;
        let mut before = Vec::with_capacity(imps.len());
        for imp in imps {
            before.push(ctx.snapshot(&imp.region));
            ctx.push(imp, &corpus.docs);
        }
        for (i, imp) in imps.iter().enumerate() {
            match imps.get(i + 1) {
                Some(next) => {
                    if imp.max_dwell() < t.tau_short
                        && next.max_dwell() > t.tau_valid
                        && normalize_query(&imp.query) != normalize_query(&next.query)
                    {
                        out.pairs.push(RewritePair::new(
                            &s.session_id,
                            &s.user_id,
                            imp.ts,
                            next.ts,
                            before[i].clone(),
                            &imp.query,
                            &next.query,
                        ));
                    }
                }
                None => {
                    if imp.max_dwell() > t.tau_long {
                        out.rejects.push(RejectSample {
                            session_id: s.session_id.clone(),
                            ts: imp.ts,
                            context: before[i].clone(),
                            q_orig: imp.query.clone(),
                        });
                    }
                }
            }
        }
    }
    out
}

fn mine_all(corpus: &LogCorpus, t: &MiningThresholds) -> Vec<Mined> {
    corpus
        .sessions_by_user()
        .par_iter()
        .map(|(_, sessions)| mine_user(corpus, sessions, t, ContextWindow::default()))
        .collect()
}

/// Adjacent in-session pairs with a failed origin and a successful follow-up.
pub fn mine_candidates(corpus: &LogCorpus, t: &MiningThresholds) -> Vec<RewritePair> {
    mine_all(corpus, t).into_iter().flat_map(|m| m.pairs).collect()
}

/// Session-final impressions with a long consumption.
pub fn mine_negatives(corpus: &LogCorpus, t: &MiningThresholds) -> Vec<RejectSample> {
    mine_all(corpus, t).into_iter().flat_map(|m| m.rejects).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningReport {
    pub candidates: usize,
    pub step1_rejected: usize,
    pub step2_rejected: usize,
    pub verifier_dropped: usize,
    pub positives: usize,
    pub negatives: usize,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct MinedDataset {
    pub samples: Vec<TrainingSample>,
    pub positives: Vec<RewritePair>,
    pub negatives: Vec<RejectSample>,
    pub report: MiningReport,
}

/// Verified positives plus reject negatives, ordered by (session, timestamp).
pub fn build_dataset(
    corpus: &LogCorpus,
    t: &MiningThresholds,
    verifier: &dyn IntentVerifier,
) -> Result<MinedDataset> {
    t.validate()?;
    let mined = mine_all(corpus, t);
    let mut report = MiningReport::default();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for m in mined {
        negatives.extend(m.rejects);
        for pair in m.pairs {
            report.candidates += 1;
            if !context_overlap_filter(&pair, &pair.context) {
                report.step1_rejected += 1;
                continue;
            }
            match verify_intent(&pair, verifier) {
                Ok(Verdict::Positive) => positives.push(pair),
                Ok(Verdict::Negative) => report.step2_rejected += 1,
                Err(e) => {
                    log::warn!(
                        "dropping pair {} @ {} ({:?} -> {:?}): {e}",
                        pair.session_id,
                        pair.orig_ts,
                        pair.q_orig,
                        pair.q_next
                    );
                    report.verifier_dropped += 1;
                }
            }
        }
    }
    report.positives = positives.len();
    report.negatives = negatives.len();

    let mut keyed: Vec<((&str, i64), TrainingSample)> = positives
        .iter()
        .map(|p| {
            (
                (p.session_id.as_str(), p.orig_ts),
                TrainingSample {
                    context: p.context.clone(),
                    q_orig: p.q_orig.clone(),
                    target: Target::Rewrite(p.q_next.clone()),
                },
            )
        })
        .chain(
            negatives
                .iter()
                .map(|n| ((n.session_id.as_str(), n.ts), n.to_training_sample())),
        )
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    let samples: Vec<TrainingSample> = keyed.into_iter().map(|(_, s)| s).collect();
    report.samples = samples.len();
    Ok(MinedDataset {
        samples,
        positives,
        negatives,
        report,
    })
}

/// Key identifying a positive for set comparisons with ground truth.
pub fn pair_key(p: &RewritePair) -> (String, i64, String, String) {
    (p.session_id.clone(), p.orig_ts, p.q_orig.clone(), p.q_next.clone())
}

pub fn keys(pairs: &[RewritePair]) -> BTreeSet<(String, i64, String, String)> {
    pairs.iter().map(pair_key).collect()
}
