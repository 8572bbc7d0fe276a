#![allow(dead_code)]

use qrewrite::fakeindex::{build_index, BuildConfig, FakeIndex};
use qrewrite::logstore::{synthesize_logs, LogCorpus, SimConfig};
use qrewrite::mining::{build_dataset, MinedDataset, MiningThresholds, ReferenceVerifier};
use qrewrite::policy::PolicyParams;
use qrewrite::reward::{build_oracle, RewardOracle};
use qrewrite::trainer::{train, TrainConfig, TrainReport};

pub struct Trained {
    pub corpus: LogCorpus,
    pub mined: MinedDataset,
    pub oracle: RewardOracle,
    pub params: PolicyParams,
    pub report: TrainReport,
    pub index: FakeIndex,
}

pub fn pipeline(sim: &SimConfig, cfg: &TrainConfig, seed: u64) -> Trained {
    let corpus = synthesize_logs(sim, seed).expect("synth");
    let mined = build_dataset(&corpus, &MiningThresholds::default(), &ReferenceVerifier).expect("mine");
    let oracle = build_oracle(&corpus, 180).expect("oracle");
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let (params, report) = train(&mined.samples, &oracle, &cfg).expect("train");
    let index = build_index(&corpus, &BuildConfig::default()).expect("index");
    Trained {
        corpus,
        mined,
        oracle,
        params,
        report,
        index,
    }
}
