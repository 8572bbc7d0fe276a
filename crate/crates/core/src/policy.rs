//! Log-linear rewrite policy over a finite candidate set.
//!
//! For a query and user context the candidate set is generated
//! deterministically: the identity rewrite, the reject action, the query
//! extended by each recent context term, and in-vocabulary historical queries
//! that share a term with it. Each candidate is mapped to a fixed
//! eight-dimensional feature vector and the policy is `softmax(theta . phi)`,
//! so log-probabilities and their gradients are exact.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logstore::UserContext;
use crate::mining::REJECT_TOKEN;
use crate::reward::RewardOracle;
use crate::text::{normalize_query, tokenize_terms};

pub const DIM: usize = 8;

pub const FEATURE_NAMES: [&str; DIM] = [
    "bias",
    "is_reject",
    "is_identity",
    "in_vocab",
    "ln_freq_capped",
    "ctr",
    "gain_terms_in_context_frac",
    "char_len_delta_norm",
];

/// Maximum number of context terms appended to the query.
pub const MAX_APPENDED_TERMS: usize = 20;

const LN_FREQ_CAP: f64 = 15.0;

pub type FeatureVector = [f64; DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Identity,
    ContextTermAppend,
    ContextQuery,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub provenance: Provenance,
}

impl Candidate {
    pub fn reject() -> Self {
        Candidate {
            text: REJECT_TOKEN.to_string(),
            provenance: Provenance::Reject,
        }
    }

    pub fn is_reject(&self) -> bool {
        self.provenance == Provenance::Reject
    }

    /// Identity key: the reject token, or the normalized rewrite text.
    pub fn key(&self) -> String {
        if self.is_reject() {
            REJECT_TOKEN.to_string()
        } else {
            normalize_query(&self.text)
        }
    }
}

/// Key of an arbitrary target text, comparable with [`Candidate::key`].
pub fn target_key(text: &str) -> String {
    if text == REJECT_TOKEN {
        REJECT_TOKEN.to_string()
    } else {
        normalize_query(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: FeatureVector,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams { theta: [0.0; DIM] }
    }
}

impl PolicyParams {
    pub fn new(theta: FeatureVector) -> Self {
        PolicyParams { theta }
    }

    pub fn weight(&self, feature: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == feature).map(|i| self.theta[i])
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|w| w.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (name, weight) in FEATURE_NAMES.iter().zip(self.theta) {
            writeln!(w, "{name}\t{weight}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut theta = [f64::NAN; DIM];
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message,
            };
            let (name, weight) = line
                .split_once('\t')
                .ok_or_else(|| err("expected feature_name<TAB>weight".into()))?;
            let slot = FEATURE_NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| err(format!("unknown feature {name:?}")))?;
            theta[slot] = weight
                .trim()
                .parse()
                .map_err(|e| err(format!("bad weight: {e}")))?;
        }
        if let Some(missing) = theta.iter().position(|w| w.is_nan()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("missing feature {}", FEATURE_NAMES[missing]),
            });
        }
        let params = PolicyParams { theta };
        if !params.is_finite() {
            return Err(Error::Numerical(format!("non-finite weight in {}", path.display())));
        }
        Ok(params)
    }
}

fn dot(a: &FeatureVector, b: &FeatureVector) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-probabilities of a softmax over `theta . phi_i`, stabilized by
/// subtracting the largest logit.
pub fn log_softmax(theta: &FeatureVector, features: &[FeatureVector]) -> Vec<f64> {
    let logits: Vec<f64> = features.iter().map(|f| dot(theta, f)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.into_iter().map(|l| l - log_z).collect()
}

/// Deterministic candidate list for `q` in context `ctx`.
pub fn generate_candidates(q: &str, ctx: &UserContext, oracle: &RewardOracle) -> Vec<Candidate> {
    let query = normalize_query(q);
    let q_terms = tokenize_terms(&query);
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    let mut push = |c: Candidate, out: &mut Vec<Candidate>| {
        if seen.insert(c.key()) {
            out.push(c);
        }
    };
    push(
        Candidate {
            text: query.clone(),
            provenance: Provenance::Identity,
        },
        &mut out,
    );
    push(Candidate::reject(), &mut out);
    for term in ctx
        .terms_by_recency()
        .into_iter()
        .filter(|t| !q_terms.contains(t))
        .take(MAX_APPENDED_TERMS)
    {
        let text = if query.is_empty() { term } else { format!("{query} {term}") };
        push(
            Candidate {
                text,
                provenance: Provenance::ContextTermAppend,
            },
            &mut out,
        );
    }
    for past in &ctx.h_query {
        let key = normalize_query(past);
        if key.is_empty() || oracle.get_normalized(&key).is_none() {
            continue;
        }
        if tokenize_terms(&key).is_disjoint(&q_terms) {
            continue;
        }
        push(
            Candidate {
                text: key,
                provenance: Provenance::ContextQuery,
            },
            &mut out,
        );
    }
    out
}

/// Feature extraction for one query/context pair.
struct Featurizer<'a> {
    query: String,
    q_terms: crate::text::TermSet,
    ctx_terms: crate::text::TermSet,
    oracle: &'a RewardOracle,
}

impl<'a> Featurizer<'a> {
    fn new(q: &str, ctx: &UserContext, oracle: &'a RewardOracle) -> Self {
        let query = normalize_query(q);
        Featurizer {
            q_terms: tokenize_terms(&query),
            query,
            ctx_terms: ctx.term_set(),
            oracle,
        }
    }

    fn features(&self, c: &Candidate) -> FeatureVector {
        let mut phi = [0.0; DIM];
        phi[0] = 1.0;
        // rejecting leaves the original query in place, so it carries that
        // query's vocabulary statistics
        let key = if c.is_reject() {
            phi[1] = 1.0;
            self.query.clone()
        } else {
            normalize_query(&c.text)
        };
        phi[2] = (c.provenance == Provenance::Identity) as u8 as f64;
        if let Some(stats) = self.oracle.get_normalized(&key) {
            phi[3] = 1.0;
            phi[4] = (stats.freq as f64).ln().min(LN_FREQ_CAP);
            phi[5] = stats.ctr;
        }
        if c.is_reject() {
            return phi;
        }
        let gain: Vec<String> = tokenize_terms(&key)
            .into_iter()
            .filter(|t| !self.q_terms.contains(t))
            .collect();
        if !gain.is_empty() {
            let grounded = gain.iter().filter(|t| self.ctx_terms.contains(*t)).count();
            phi[6] = grounded as f64 / gain.len() as f64;
        }
        let q_len = self.query.chars().count();
        phi[7] = (key.chars().count() as f64 - q_len as f64) / q_len.max(1) as f64;
        phi
    }
}

pub fn featurize(c: &Candidate, q: &str, ctx: &UserContext, oracle: &RewardOracle) -> FeatureVector {
    Featurizer::new(q, ctx, oracle).features(c)
}

/// A query with its candidate set and feature matrix, ready for repeated
/// evaluation under different parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    pub query: String,
    pub candidates: Vec<Candidate>,
    pub features: Vec<FeatureVector>,
}

impl PolicyInput {
    pub fn new(q: &str, ctx: &UserContext, oracle: &RewardOracle) -> Self {
        let candidates = generate_candidates(q, ctx, oracle);
        let f = Featurizer::new(q, ctx, oracle);
        let features = candidates.iter().map(|c| f.features(c)).collect();
        PolicyInput {
            query: f.query,
            candidates,
            features,
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn position(&self, key: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.key() == key)
    }

    pub fn log_probs(&self, params: &PolicyParams) -> Vec<f64> {
        log_softmax(&params.theta, &self.features)
    }

    pub fn distribution(&self, params: &PolicyParams) -> PolicyDistribution {
        PolicyDistribution {
            candidates: self.candidates.clone(),
            probs: self.log_probs(params).into_iter().map(f64::exp).collect(),
        }
    }

    /// Probability-weighted mean feature vector.
    pub fn mean_features(&self, probs: &[f64]) -> FeatureVector {
        let mut mean = [0.0; DIM];
        for (p, phi) in probs.iter().zip(&self.features) {
            for k in 0..DIM {
                mean[k] += p * phi[k];
            }
        }
        mean
    }

    /// Log-probability of candidate `idx` and its gradient in theta.
    pub fn logprob_and_grad(&self, params: &PolicyParams, idx: usize) -> (f64, FeatureVector) {
        let logp = self.log_probs(params);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let mean = self.mean_features(&probs);
        let mut grad = self.features[idx];
        for k in 0..DIM {
            grad[k] -= mean[k];
        }
        (logp[idx], grad)
    }

    /// Index of the most likely candidate; ties go to the earliest one.
    pub fn argmax(&self, params: &PolicyParams) -> usize {
        let logp = self.log_probs(params);
        let mut best = 0;
        for (i, l) in logp.iter().enumerate() {
            if *l > logp[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDistribution {
    pub candidates: Vec<Candidate>,
    pub probs: Vec<f64>,
}

impl PolicyDistribution {
    pub fn prob_of(&self, key: &str) -> Option<f64> {
        self.candidates
            .iter()
            .position(|c| c.key() == key)
            .map(|i| self.probs[i])
    }
}

pub fn distribution(
    params: &PolicyParams,
    q: &str,
    ctx: &UserContext,
    oracle: &RewardOracle,
) -> PolicyDistribution {
    PolicyInput::new(q, ctx, oracle).distribution(params)
}

/// Draws `group_size` candidates i.i.d. with replacement.
pub fn sample_group(
    dist: &PolicyDistribution,
    rng_seed: u64,
    group_size: usize,
) -> Result<Vec<Candidate>> {
    Ok(sample_indices(&dist.probs, rng_seed, group_size)?
        .into_iter()
        .map(|i| dist.candidates[i].clone())
        .collect())
}

pub(crate) fn sample_indices(probs: &[f64], rng_seed: u64, group_size: usize) -> Result<Vec<usize>> {
    if group_size < 2 {
        return Err(Error::Config(format!("group size must be at least 2, got {group_size}")));
    }
    let weights = WeightedIndex::new(probs)
        .map_err(|e| Error::Numerical(format!("cannot sample from distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..group_size).map(|_| weights.sample(&mut rng)).collect())
}

pub fn logprob_and_grad(
    params: &PolicyParams,
    q: &str,
    ctx: &UserContext,
    oracle: &RewardOracle,
    chosen: &Candidate,
) -> Result<(f64, FeatureVector)> {
    let input = PolicyInput::new(q, ctx, oracle);
    let idx = input.position(&chosen.key()).ok_or_else(|| {
        Error::Contract(format!("{:?} is not a candidate for {:?}", chosen.text, input.query))
    })?;
    Ok(input.logprob_and_grad(params, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logstore::VideoSummary;
    use crate::reward::QueryStats;

    fn liquor_ctx() -> UserContext {
        UserContext {
            h_query: vec!["baijiu tasting".into()],
            h_video: vec![VideoSummary {
                title: "liquor baijiu tasting".into(),
                tags: vec!["liquor".into()],
            }],
            geo: "north".into(),
        }
    }

    fn oracle() -> RewardOracle {
        RewardOracle::from_stats(
            [
                QueryStats { query: "guang liang".into(), freq: 40, ctr: 0.3 },
                QueryStats { query: "guang liang liquor".into(), freq: 30, ctr: 1.0 },
                QueryStats { query: "baijiu tasting".into(), freq: 5, ctr: 1.0 },
            ],
            180,
        )
    }

    #[test]
    fn bare_query_has_identity_and_reject() {
        let c = generate_candidates("x", &UserContext::default(), &RewardOracle::default());
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].provenance, Provenance::Identity);
        assert_eq!(c[0].text, "x");
        assert!(c[1].is_reject());
    }

    #[test]
    fn appends_context_terms() {
        let c = generate_candidates("Guang Liang", &liquor_ctx(), &oracle());
        let texts: Vec<&str> = c.iter().map(|c| c.text.as_str()).collect();
        assert!(texts.contains(&"guang liang liquor"));
        assert!(texts.contains(&"guang liang baijiu"));
        // no shared term with the query, so the historical query is not offered
        assert!(!texts.contains(&"baijiu tasting"));
        assert_eq!(c, generate_candidates("Guang Liang", &liquor_ctx(), &oracle()));
        let keys: HashSet<String> = c.iter().map(Candidate::key).collect();
        assert_eq!(keys.len(), c.len());
    }

    #[test]
    fn offers_in_vocabulary_history_sharing_a_term() {
        let c = generate_candidates("baijiu", &liquor_ctx(), &oracle());
        assert!(c
            .iter()
            .any(|c| c.text == "baijiu tasting" && c.provenance != Provenance::Identity));
    }

    #[test]
    fn append_cap() {
        let ctx = UserContext {
            h_query: (0..30).map(|i| format!("w{i}")).collect(),
            ..Default::default()
        };
        let c = generate_candidates("q", &ctx, &RewardOracle::default());
        let appended = c
            .iter()
            .filter(|c| c.provenance == Provenance::ContextTermAppend)
            .count();
        assert_eq!(appended, MAX_APPENDED_TERMS);
        assert_eq!(c[2].text, "q w0");
    }

    #[test]
    fn features_for_grounded_rewrite() {
        let o = oracle();
        let c = Candidate {
            text: "guang liang liquor".into(),
            provenance: Provenance::ContextTermAppend,
        };
        let phi = featurize(&c, "guang liang", &liquor_ctx(), &o);
        assert_eq!(phi[..4], [1.0, 0.0, 0.0, 1.0]);
        assert!((phi[4] - 30f64.ln()).abs() < 1e-15);
        assert_eq!(phi[5], 1.0);
        assert_eq!(phi[6], 1.0);
        assert!((phi[7] - 7.0 / 11.0).abs() < 1e-15);
        let r = featurize(&Candidate::reject(), "guang liang", &liquor_ctx(), &o);
        assert_eq!(r, [1.0, 1.0, 0.0, 1.0, 40f64.ln(), 0.3, 0.0, 0.0]);
        let r = featurize(&Candidate::reject(), "unknown", &liquor_ctx(), &o);
        assert_eq!(r, [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_theta_is_uniform() {
        let d = distribution(&PolicyParams::default(), "guang liang", &liquor_ctx(), &oracle());
        let n = d.probs.len() as f64;
        assert!(d.probs.iter().all(|p| (p - 1.0 / n).abs() < 1e-15));
    }

    #[test]
    fn heavy_reject_weight_concentrates_mass() {
        let mut theta = [0.0; DIM];
        theta[1] = 20.0;
        let d = distribution(&PolicyParams::new(theta), "guang liang", &liquor_ctx(), &oracle());
        assert!(d.prob_of(REJECT_TOKEN).unwrap() > 0.99);
    }

    #[test]
    fn identical_features_get_equal_mass() {
        let phi = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.5];
        let lp = log_softmax(&[0.3, 1.0, -2.0, 0.5, 0.1, 0.2, 0.7, -0.4], &[phi, phi, [1.0; DIM]]);
        assert_eq!(lp[0], lp[1]);
    }

    #[test]
    fn group_sampling() {
        let d = PolicyDistribution {
            candidates: vec![Candidate::reject()],
            probs: vec![1.0],
        };
        let g = sample_group(&d, 3, 5).unwrap();
        assert!(g.iter().all(|c| c.is_reject()));
        assert!(matches!(sample_group(&d, 3, 1), Err(Error::Config(_))));

        let two = PolicyDistribution {
            candidates: vec![Candidate::reject(), Candidate { text: "a".into(), provenance: Provenance::Identity }],
            probs: vec![0.5, 0.5],
        };
        assert_eq!(sample_group(&two, 9, 50).unwrap(), sample_group(&two, 9, 50).unwrap());
        let n = 100_000;
        let draws = sample_indices(&two.probs, 42, n).unwrap();
        let ones = draws.iter().filter(|&&i| i == 1).count() as f64;
        // binomial: sigma = sqrt(n * 0.25)
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones - n as f64 * 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn logprob_at_zero_theta() {
        let o = oracle();
        let ctx = liquor_ctx();
        let input = PolicyInput::new("guang liang", &ctx, &o);
        let n = input.len() as f64;
        let chosen = input.candidates[2].clone();
        let (logp, grad) =
            logprob_and_grad(&PolicyParams::default(), "guang liang", &ctx, &o, &chosen).unwrap();
        assert!((logp + n.ln()).abs() < 1e-12);
        // phi(chosen) minus the plain average of all feature vectors
        for k in 0..DIM {
            let avg: f64 = input.features.iter().map(|f| f[k]).sum::<f64>() / n;
            assert!((grad[k] - (input.features[2][k] - avg)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_candidate_is_a_contract_error() {
        let c = Candidate { text: "unrelated".into(), provenance: Provenance::ContextQuery };
        let r = logprob_and_grad(&PolicyParams::default(), "x", &UserContext::default(), &RewardOracle::default(), &c);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn params_tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let p = PolicyParams::new([0.1, -2.5, 1e-9, 3.0, 0.0, 7.25, -0.125, 1.0 / 3.0]);
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);
        std::fs::write(&path, "bias\t1\n").unwrap();
        assert!(matches!(PolicyParams::load(&path), Err(Error::Parse { .. })));
    }
}
