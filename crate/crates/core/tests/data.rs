mod common;

use isrf_core::data::{parse_interactions, sample_candidates, split_leave_one_out, InteractionDataset};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn short_users_are_dropped_and_duplicates_kept() {
    let (ds, report) = parse_interactions("u1 a b c\nu2 b c d\nu3 a b\nu4 c c c a\n").unwrap();
    assert_eq!(report.rejected_users, vec!["u3"]);
    assert_eq!(ds.n_users(), 3);
    assert_eq!(ds.sequences[2], vec![2, 2, 2, 0]);
    assert_eq!(ds.items.raw(3), Some("d"));
}

#[test]
fn negative_sampling_is_uniform() {
    // one user who touched items 0..5 out of 100; 95 eligible items
    let ds = InteractionDataset::from_sequences(vec![vec![0, 1, 2, 3, 4]], 100).unwrap();
    let (draws, n_neg) = (10_000u64, 10usize);
    let mut counts = vec![0usize; 100];
    for seed in 0..draws {
        for v in &sample_candidates(&ds, &[4], n_neg, seed).unwrap()[0].negatives {
            counts[*v] += 1;
        }
    }
    assert!(counts[..5].iter().all(|&c| c == 0));
    let p = n_neg as f64 / 95.0;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for &c in &counts[5..] {
        assert!((c as f64 - expect).abs() <= 3.0 * sigma, "count {c} vs {expect}");
        chi2 += (c as f64 - expect).powi(2) / expect;
    }
    // each draw is without replacement, so the statistic is scaled by (1 - p)
    let stat = chi2 / (1.0 - p);
    let pval = 1.0 - ChiSquared::new(94.0).unwrap().cdf(stat);
    assert!(pval > 0.001, "chi-square p = {pval}");
}

#[test]
fn sampling_is_seed_deterministic() {
    let data = common::toy_data(10, 60, 7, 9);
    let ds = &data.dataset;
    let pos = data.splits.test_targets();
    assert_eq!(
        sample_candidates(ds, &pos, 20, 3).unwrap(),
        sample_candidates(ds, &pos, 20, 3).unwrap()
    );
    assert_ne!(
        sample_candidates(ds, &pos, 20, 3).unwrap(),
        sample_candidates(ds, &pos, 20, 4).unwrap()
    );
}

#[test]
fn too_few_eligible_items_is_an_error() {
    let ds = InteractionDataset::from_sequences(vec![vec![0, 1, 2]], 5).unwrap();
    assert!(sample_candidates(&ds, &[2], 3, 0).is_err());
    assert!(sample_candidates(&ds, &[2], 2, 0).is_ok());
}

proptest! {
    #[test]
    fn split_reconstructs_sequence(seqs in prop::collection::vec(prop::collection::vec(0usize..30, 3..20), 1..15)) {
        let ds = InteractionDataset::from_sequences(seqs.clone(), 30).unwrap();
        let splits = split_leave_one_out(&ds).unwrap();
        for (s, seq) in splits.users.iter().zip(&seqs) {
            let mut back = s.train.clone();
            back.push(s.valid);
            back.push(s.test);
            prop_assert_eq!(&back, seq);
            prop_assert_eq!(s.history_for_test(), seq[..seq.len() - 1].to_vec());
        }
    }

    #[test]
    fn raw_ids_roundtrip(lines in prop::collection::vec(prop::collection::vec("[a-z]{1,3}", 3..8), 1..10)) {
        let text: String = lines
            .iter()
            .enumerate()
            .map(|(u, items)| format!("user{u} {}\n", items.join(" ")))
            .collect();
        let (ds, report) = parse_interactions(&text).unwrap();
        prop_assert!(report.rejected_users.is_empty());
        for (u, items) in lines.iter().enumerate() {
            let name = format!("user{u}");
            prop_assert_eq!(ds.users.raw(u), Some(name.as_str()));
            let back: Vec<&str> = ds.sequences[u].iter().map(|&v| ds.items.raw(v).unwrap()).collect();
            prop_assert_eq!(back, items.iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn negatives_avoid_history(seed in any::<u64>(), n_neg in 0usize..10) {
        let data = common::toy_data(6, 30, 6, seed);
        let sets = sample_candidates(&data.dataset, &data.splits.test_targets(), n_neg, seed).unwrap();
        for s in sets {
            let hist = &data.dataset.sequences[s.user];
            prop_assert_eq!(s.negatives.len(), n_neg);
            prop_assert!(s.negatives.iter().all(|v| !hist.contains(v)));
            let mut d = s.negatives.clone();
            d.sort_unstable();
            d.dedup();
            prop_assert_eq!(d.len(), n_neg);
        }
    }
}
