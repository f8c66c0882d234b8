use std::collections::BTreeSet;

use mprl::experiment::DatasetSpec;
use mprl::synthgen::{Dataset, MixRecord};
use mprl::trainer::{log_label_trajectory, train, Strategy, TrainConfig};

/// Puts the generated samples whose sources are exactly `pair` first.
fn track_pair(generated: &Dataset, records: &[MixRecord], pair: [usize; 2]) -> (Dataset, usize) {
    let wanted: BTreeSet<usize> = pair.into_iter().collect();
    let (mut hits, rest): (Vec<_>, Vec<_>) =
        generated.samples().iter().zip(records).partition(|(_, r)| {
            r.source_classes.iter().copied().collect::<BTreeSet<_>>() == wanted
        });
    let n = hits.len();
    hits.extend(rest);
    let samples = hits.into_iter().map(|(s, _)| s.clone()).collect();
    (
        Dataset::new(generated.classes(), generated.feature_dim(), samples).unwrap(),
        n,
    )
}

fn final_share_in(classes: &[usize], set: &BTreeSet<usize>) -> f64 {
    let tail = &classes[classes.len() - 10..];
    tail.iter().filter(|c| set.contains(c)).count() as f64 / 10.0
}

#[test]
fn mixed_sample_settles_on_its_sources() {
    let spec = DatasetSpec::default();
    let (real, generated, records) = spec.build(0, 400).unwrap();
    let (generated, n) = track_pair(&generated, &records, [2, 5]);
    assert!(n >= 3, "only {n} samples mix classes 2 and 5");
    let cfg = TrainConfig {
        track_generated: n,
        ..TrainConfig::new(Strategy::DMprlII, 0)
    };
    let out = train(&real, &generated, &cfg).unwrap();
    let traj = log_label_trajectory(&out.history).unwrap();
    assert_eq!(traj.len(), n);
    let pair: BTreeSet<usize> = [2, 5].into_iter().collect();
    for t in traj {
        assert_eq!(t.classes.len(), 50);
        let share = final_share_in(&t.classes, &pair);
        assert!(
            share >= 0.8,
            "sample {} spends {share} of the last 10 epochs in {{2,5}}: {:?}",
            t.sample_id,
            t.classes
        );
    }
}

#[test]
fn disjoint_pairs_have_distinct_supports() {
    let spec = DatasetSpec::default();
    let (real, generated, records) = spec.build(1, 400).unwrap();
    let first = records
        .iter()
        .position(|r| r.source_classes.contains(&0) && r.source_classes.contains(&1))
        .unwrap();
    let second = records
        .iter()
        .position(|r| r.source_classes.contains(&4) && r.source_classes.contains(&6))
        .unwrap();
    let mut samples = vec![
        generated.samples()[first].clone(),
        generated.samples()[second].clone(),
    ];
    samples.extend(
        generated
            .samples()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != first && i != second)
            .map(|(_, s)| s.clone()),
    );
    let generated = Dataset::new(generated.classes(), generated.feature_dim(), samples).unwrap();
    let cfg = TrainConfig {
        track_generated: 2,
        ..TrainConfig::new(Strategy::DMprlII, 1)
    };
    let out = train(&real, &generated, &cfg).unwrap();
    let traj = log_label_trajectory(&out.history).unwrap();
    let support = |i: usize| {
        traj[i].classes[40..]
            .iter()
            .copied()
            .collect::<BTreeSet<usize>>()
    };
    let (a, b) = (support(0), support(1));
    assert!(a.is_subset(&[0, 1].into_iter().collect()), "{a:?}");
    assert!(b.is_subset(&[4, 6].into_iter().collect()), "{b:?}");
    assert!(a.is_disjoint(&b));
}

#[test]
fn baseline_records_trajectories_without_training_on_them() {
    let spec = DatasetSpec {
        per_class: 12,
        ..DatasetSpec::default()
    };
    let (real, generated, _) = spec.build(2, 30).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        track_generated: 3,
        ..TrainConfig::new(Strategy::Baseline, 2)
    };
    let out = train(&real, &generated, &cfg).unwrap();
    let traj = log_label_trajectory(&out.history).unwrap();
    assert_eq!(traj.len(), 3);
    assert!(traj.iter().all(|t| t.classes.len() == 8));

    // the generated set has no influence on a baseline model
    let alone = train(
        &real,
        &Dataset::new(8, 16, Vec::new()).unwrap(),
        &TrainConfig {
            track_generated: 0,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(alone.params, out.params);
}
