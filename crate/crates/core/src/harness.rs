//! Session metrics and the simulated A/B test.
//!
//! Control serves traditional recall only; treatment serves the fused flow.
//! Both arms replay the same test users with the same random draws, so any
//! difference comes from the rewrite path.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fakeindex::FakeIndex;
use crate::logstore::{session_id, DocCatalog, Population, SearchBackend, SessionRecord, SimConfig, UserModelRun};
use crate::mining::MiningThresholds;
use crate::policy::PolicyParams;
use crate::reward::RewardOracle;
use crate::serving::{DocStore, LatencyModel, ServeConfig, Server};

pub use crate::cli::cli_main;

/// Dwell above which a play counts towards `vv_gt10`.
pub const VV_DWELL_S: f64 = 10.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Plays with dwell above 10 seconds.
    pub vv_gt10: u64,
    /// Share of searches whose result got a dwell below `tau_short` and that
    /// were followed by another query in the same session. A query issued
    /// right after such a failure is a reformulation, not a new search.
    pub reformulation_rate: f64,
    /// Share of rewrite attempts that hit the fake index.
    pub index_hit_rate: f64,
    pub impressions: u64,
    pub rewrite_attempts: u64,
    pub index_hits: u64,
}

pub fn compute_metrics(sessions: &[SessionRecord], t: &MiningThresholds) -> Metrics {
    let mut m = Metrics::default();
    let mut searches = 0u64;
    let mut reformulated = 0u64;
    for s in sessions {
        let mut after_failure = false;
        for (i, imp) in s.impressions.iter().enumerate() {
            m.impressions += 1;
            m.vv_gt10 += imp
                .interactions
                .iter()
                .filter(|it| it.clicked && it.dwell_s > VV_DWELL_S)
                .count() as u64;
            let failed = imp.max_dwell() < t.tau_short;
            if !after_failure {
                searches += 1;
                if failed && i + 1 < s.impressions.len() {
                    reformulated += 1;
                }
            }
            after_failure = failed;
        }
    }
    if searches > 0 {
        m.reformulation_rate = reformulated as f64 / searches as f64;
    }
    m
}

/// Relative change `(treatment - control) / control`, absent when control is 0.
pub fn relative_delta(control: f64, treatment: f64) -> Option<f64> {
    (control > 0.0).then(|| (treatment - control) / control)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub vv_gt10: Option<f64>,
    pub reformulation_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ABReport {
    pub seed: u64,
    pub control: Metrics,
    pub treatment: Metrics,
    pub deltas: Deltas,
    pub test_users: usize,
    pub config: SimConfig,
}

impl ABReport {
    pub fn tsv_header() -> &'static str {
        "seed\tcontrol_vv_gt10\ttreatment_vv_gt10\tdelta_vv_gt10\tcontrol_reform_rate\ttreatment_reform_rate\tdelta_reform_rate\tindex_hit_rate"
    }

    pub fn tsv_line(&self) -> String {
        let d = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}",
            self.seed,
            self.control.vv_gt10,
            self.treatment.vv_gt10,
            d(self.deltas.vv_gt10),
            self.control.reformulation_rate,
            self.treatment.reformulation_rate,
            d(self.deltas.reformulation_rate),
            self.treatment.index_hit_rate
        )
    }
}

/// Trained components plus the catalog and user ids they were built from.
pub struct Artifacts<'a> {
    pub params: &'a PolicyParams,
    pub index: &'a FakeIndex,
    pub oracle: &'a RewardOracle,
    pub docs: &'a DocCatalog,
    pub train_users: &'a BTreeSet<String>,
    pub latency: LatencyModel,
    pub serve: ServeConfig,
}

fn arm_metrics(runs: &[UserModelRun], t: &MiningThresholds) -> Metrics {
    let sessions: Vec<SessionRecord> = runs
        .iter()
        .flat_map(|r| {
            r.eval_sessions.iter().enumerate().filter(|(_, s)| !s.is_empty()).map(|(k, s)| SessionRecord {
                session_id: session_id(&s[0].user_id, k),
                user_id: s[0].user_id.clone(),
                impressions: s.clone(),
            })
        })
        .collect();
    let mut m = compute_metrics(&sessions, t);
    m.rewrite_attempts = runs.iter().map(|r| r.rewrite_attempts as u64).sum();
    m.index_hits = runs.iter().map(|r| r.index_hits as u64).sum();
    if m.rewrite_attempts > 0 {
        m.index_hit_rate = m.index_hits as f64 / m.rewrite_attempts as f64;
    }
    m
}

/// Paired simulation of fresh test users under both arms.
pub fn simulate_ab(sim: &SimConfig, artifacts: &Artifacts<'_>, seed: u64) -> Result<ABReport> {
    sim.validate()?;
    artifacts.latency.validate()?;
    let pop = Population {
        cfg: sim,
        docs: artifacts.docs,
        seed,
        prefix: &sim.test_user_prefix,
    };
    let users = pop.users(sim.test_users);
    if let Some(u) = users.iter().find(|u| artifacts.train_users.contains(&u.id)) {
        return Err(Error::Contract(format!("test user {} also appears in the training logs", u.id)));
    }
    let store = DocStore::new(artifacts.docs);
    let treatment = Server {
        params: artifacts.params,
        index: artifacts.index,
        oracle: artifacts.oracle,
        store: &store,
        latency: &artifacts.latency,
        config: &artifacts.serve,
    };
    let warmup = sim.warmup_sessions;
    let run_arm = |backend: &dyn SearchBackend| -> Vec<UserModelRun> {
        users
            .par_iter()
            .map(|u| pop.simulate_user(u, &store, backend, warmup, sim.ab_sessions, false))
            .collect()
    };
    let (control_runs, treatment_runs) = rayon::join(|| run_arm(&store), || run_arm(&treatment));
    let t = MiningThresholds::default();
    let control = arm_metrics(&control_runs, &t);
    let treatment = arm_metrics(&treatment_runs, &t);
    Ok(ABReport {
        seed,
        deltas: Deltas {
            vv_gt10: relative_delta(control.vv_gt10 as f64, treatment.vv_gt10 as f64),
            reformulation_rate: relative_delta(control.reformulation_rate, treatment.reformulation_rate),
        },
        control,
        treatment,
        test_users: users.len(),
        config: sim.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logstore::{ImpressionRecord, Interaction};

    fn imp(ts: i64, dwell: Option<f64>) -> ImpressionRecord {
        ImpressionRecord {
            user_id: "u".into(),
            ts,
            query: format!("q{ts}"),
            region: "r".into(),
            results: vec!["d".into()],
            interactions: dwell
                .map(|d| Interaction { doc_id: "d".into(), dwell_s: d, clicked: true })
                .into_iter()
                .collect(),
        }
    }

    fn session(imps: Vec<ImpressionRecord>) -> SessionRecord {
        SessionRecord { session_id: "u-s0000".into(), user_id: "u".into(), impressions: imps }
    }

    #[test]
    fn metric_definitions() {
        let t = MiningThresholds::default();
        let m = compute_metrics(&[session(vec![imp(0, Some(12.0))])], &t);
        assert_eq!((m.vv_gt10, m.reformulation_rate), (1, 0.0));
        let m = compute_metrics(&[session(vec![imp(0, Some(1.0)), imp(10, None)])], &t);
        assert_eq!(m.reformulation_rate, 1.0);
        // a failure that ends the session is not a reformulation
        let m = compute_metrics(
            &[session(vec![imp(0, Some(1.0))]), session(vec![imp(0, Some(1.0)), imp(5, Some(11.0)), imp(900, Some(20.0))])],
            &t,
        );
        assert_eq!(m.reformulation_rate, 1.0 / 3.0);
        assert_eq!(m.vv_gt10, 2);
        assert_eq!(compute_metrics(&[], &t), Metrics::default());
    }

    #[test]
    fn metrics_ignore_session_order() {
        let t = MiningThresholds::default();
        let a = session(vec![imp(0, Some(1.0)), imp(5, Some(30.0))]);
        let b = session(vec![imp(100, Some(12.0))]);
        assert_eq!(compute_metrics(&[a.clone(), b.clone()], &t), compute_metrics(&[b, a], &t));
    }

    #[test]
    fn deltas() {
        assert_eq!(relative_delta(0.0, 1.0), None);
        assert_eq!(relative_delta(2.0, 3.0), Some(0.5));
    }
}
