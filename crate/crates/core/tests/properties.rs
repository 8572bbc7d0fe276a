use std::collections::BTreeSet;

use proptest::prelude::*;
use qrewrite::fakeindex::{decode_index, encode_index, FakeIndex, IndexEntry, Source};
use qrewrite::harness::compute_metrics;
use qrewrite::logstore::{read_jsonl, sessionize, write_jsonl, DocCatalog, DocId, ImpressionRecord, Interaction, VideoDoc};
use qrewrite::mining::MiningThresholds;
use qrewrite::policy::{log_softmax, PolicyParams, DIM};
use qrewrite::reward::{QueryStats, RewardOracle};
use qrewrite::serving::{fuse, relevance_filter, DocStore};
use qrewrite::trainer::grpo_advantages;

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["liang", "guang", "liquor", "singer", "baijiu", "tour", "live", "cover"])
        .prop_map(str::to_string)
}

fn query() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..4).prop_map(|w| w.join(" "))
}

fn record() -> impl Strategy<Value = ImpressionRecord> {
    (
        prop::sample::select(vec!["u1", "u2", "u3"]),
        0i64..20_000,
        query(),
        prop::option::of(0.0f64..120.0),
    )
        .prop_map(|(user, ts, q, dwell)| ImpressionRecord {
            user_id: user.into(),
            ts,
            query: q,
            region: "north".into(),
            results: vec!["d1".into(), "d2".into()],
            interactions: dwell
                .map(|d| Interaction { doc_id: "d1".into(), dwell_s: d, clicked: true })
                .into_iter()
                .collect(),
        })
}

fn features() -> impl Strategy<Value = Vec<[f64; DIM]>> {
    prop::collection::vec(prop::array::uniform8(-5.0f64..5.0), 1..12)
}

fn entry() -> impl Strategy<Value = IndexEntry> {
    (query(), prop::collection::btree_map("[a-z0-9]{1,6}", -1.0f64..1.0, 0..8), any::<bool>()).prop_map(
        |(q, docs, interaction)| {
            let mut docs: Vec<(DocId, f64)> = docs.into_iter().map(|(d, s)| (DocId::from(d.as_str()), s)).collect();
            docs.sort_by(|a, b| b.1.total_cmp(&a.1));
            IndexEntry {
                query: qrewrite::text::normalize_query(&q),
                docs,
                source: if interaction { Source::Interaction } else { Source::Retrieval },
            }
        },
    )
}

proptest! {
    #[test]
    fn jsonl_round_trip(records in prop::collection::vec(record(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imp.jsonl");
        write_jsonl(&path, records.iter()).unwrap();
        let back: Vec<ImpressionRecord> = read_jsonl(&path).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn oracle_tsv_round_trip(stats in prop::collection::btree_map(query(), (1u64..1000, 0.0f64..=1.0), 0..10)) {
        let oracle = RewardOracle::from_stats(
            stats.into_iter().map(|(query, (freq, ctr))| QueryStats { query, freq, ctr }),
            180,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.tsv");
        oracle.save(&path).unwrap();
        prop_assert_eq!(RewardOracle::load(&path).unwrap(), oracle);
    }

    #[test]
    fn params_tsv_round_trip(theta in prop::array::uniform8(-100.0f64..100.0)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.tsv");
        let p = PolicyParams::new(theta);
        p.save(&path).unwrap();
        prop_assert_eq!(PolicyParams::load(&path).unwrap(), p);
    }

    #[test]
    fn sessions_partition_the_records(records in prop::collection::vec(record(), 0..40), gap in 1i64..5000) {
        let sessions = sessionize(records.clone(), gap);
        prop_assert_eq!(sessions.iter().map(|s| s.impressions.len()).sum::<usize>(), records.len());
        let ids: BTreeSet<&str> = sessions.iter().map(|s| s.session_id.as_str()).collect();
        prop_assert_eq!(ids.len(), sessions.len());
        for s in &sessions {
            prop_assert!(!s.impressions.is_empty());
            for w in s.impressions.windows(2) {
                prop_assert_eq!(&w[0].user_id, &s.user_id);
                prop_assert!(w[1].ts >= w[0].ts && w[1].ts - w[0].ts < gap);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(theta in prop::array::uniform8(-1e3f64..1e3), f in features(), shift in -50.0f64..50.0) {
        let lp = log_softmax(&theta, &f);
        prop_assert!(lp.iter().all(|x| x.is_finite() && *x <= 1e-12));
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        // adding the same vector to every candidate leaves the distribution unchanged
        let dir = [shift; DIM];
        let shifted: Vec<[f64; DIM]> = f.iter().map(|v| std::array::from_fn(|i| v[i] + dir[i])).collect();
        if theta.iter().map(|t| t.abs()).sum::<f64>() * shift.abs() < 1e4 {
            for (a, b) in lp.iter().zip(log_softmax(&theta, &shifted)) {
                prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-8i32..8, 2..16), k in -3i32..4, c in -16i32..16) {
        let r: Vec<f64> = rewards.iter().map(|&x| x as f64 / 4.0).collect();
        let a = grpo_advantages(&r, 1e-8).unwrap();
        prop_assert_eq!(a.len(), r.len());
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        let scale = 2f64.powi(k);
        let moved: Vec<f64> = r.iter().map(|x| scale * x + c as f64).collect();
        let b = grpo_advantages(&moved, 1e-8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
        }
    }

    #[test]
    fn index_round_trip(entries in prop::collection::vec(entry(), 0..8)) {
        let mut unique = std::collections::BTreeMap::new();
        for e in entries {
            unique.insert(e.query.clone(), e);
        }
        let index = FakeIndex::from_entries(50, unique.into_values()).unwrap();
        let bytes = encode_index(&index).unwrap();
        let back = decode_index(&bytes).unwrap();
        prop_assert_eq!(back.sorted_entries(), index.sorted_entries());
        prop_assert_eq!(encode_index(&back).unwrap(), bytes.clone());
        if !bytes.is_empty() {
            prop_assert!(decode_index(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn metrics_ignore_session_order(records in prop::collection::vec(record(), 0..30), seed in any::<u64>()) {
        let t = MiningThresholds::default();
        let sessions = sessionize(records, 1800);
        let mut shuffled = sessions.clone();
        let n = shuffled.len();
        if n > 1 {
            shuffled.rotate_left((seed % n as u64) as usize);
            shuffled.reverse();
        }
        let a = compute_metrics(&sessions, &t);
        let b = compute_metrics(&shuffled, &t);
        prop_assert_eq!(a.vv_gt10, b.vv_gt10);
        prop_assert!((a.reformulation_rate - b.reformulation_rate).abs() < 1e-12);
    }

    #[test]
    fn relevance_filter_is_idempotent(q in query(), titles in prop::collection::vec(query(), 1..10), threshold in 0.0f64..1.0) {
        let docs: DocCatalog = titles
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let id = format!("d{i}");
                (DocId::from(id.as_str()), VideoDoc { doc_id: id.as_str().into(), title: t.clone(), tags: vec![], topic: None })
            })
            .collect();
        let store = DocStore::new(&docs);
        let list: Vec<(DocId, f64)> = docs.keys().map(|d| (d.clone(), 1.0)).collect();
        let once = relevance_filter(&q, &list, &store, threshold);
        prop_assert_eq!(relevance_filter(&q, &once, &store, threshold), once.clone());
        // fusion never duplicates a doc and keeps the main list as a prefix
        let fused = fuse(&list[..list.len() / 2], &once);
        let ids: BTreeSet<&DocId> = fused.iter().map(|f| &f.doc_id).collect();
        prop_assert_eq!(ids.len(), fused.len());
        prop_assert!(fused.iter().zip(&list[..list.len() / 2]).all(|(f, (d, _))| &f.doc_id == d));
    }
}
