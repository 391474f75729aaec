mod common;

use std::path::Path;

use common::random_batch;
use tpamtl::data::{
    generate_imbalanced_tasks, generate_temporal_tasks, ingest_csv, parse_csv, temporal_bayes_scores, write_csv,
    CsvSchema, DatasetSplit, EpisodeBatch, SplitFractions, SyntheticSpec, TaskLink, CSV_VERSION_LINE,
};
use tpamtl::diffcore::RngStream;
use tpamtl::error::Error;
use tpamtl::eval::auroc;

fn labelled(batch: &EpisodeBatch, d: usize, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (0..batch.len())
        .filter(|&b| batch.is_labeled(b, d))
        .map(|b| (scores[b], batch.label(b, d)))
        .unzip()
}

#[test]
fn imbalanced_counts_are_exact() {
    let spec = SyntheticSpec::imbalanced(3);
    let data = generate_imbalanced_tasks(&spec).unwrap();
    data.split.check_disjoint().unwrap();
    for (d, &want) in [5000, 5000, 1000, 1000, 500].iter().enumerate() {
        let got: usize = data.split.batches().iter().map(|b| b.count_labeled(d)).sum();
        assert_eq!(got, want, "task {d}");
        let pos: usize = data
            .split
            .batches()
            .iter()
            .map(|b| {
                (0..b.len())
                    .filter(|&i| b.is_labeled(i, d) && b.label(i, d) == 1.0)
                    .count()
            })
            .sum();
        assert_eq!(pos, want / 2, "task {d}");
    }
    for batch in data.split.batches() {
        assert_eq!(batch.steps, 1);
        for b in 0..batch.len() {
            assert_eq!((0..5).filter(|&d| batch.is_labeled(b, d)).count(), 1);
        }
    }
    let total: usize = data.split.batches().iter().map(|b| b.len()).sum();
    assert_eq!(total, 12_500);
}

#[test]
fn noiseless_imbalanced_tasks_have_perfect_bayes_scores() {
    let mut spec = SyntheticSpec::imbalanced(1);
    spec.counts = vec![400, 300, 200, 200, 100];
    spec.noise = vec![0.0; 5];
    let data = generate_imbalanced_tasks(&spec).unwrap();
    for (s, batch) in data.split.batches().iter().enumerate() {
        for d in 0..5 {
            let (scores, labels) = labelled(batch, d, &data.bayes[s][d]);
            assert_eq!(auroc(&scores, &labels).unwrap(), 1.0, "split {s} task {d}");
        }
    }
    spec.noise = vec![0.2; 5];
    let noisy = generate_imbalanced_tasks(&spec).unwrap();
    let (scores, labels) = labelled(&noisy.split.train, 0, &noisy.bayes[0][0]);
    assert!(auroc(&scores, &labels).unwrap() < 0.95);
}

#[test]
fn generators_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let write = |data: &DatasetSplit, name: &str| {
        let p = dir.path().join(name);
        data.save(&p, serde_json::Value::Null).unwrap();
        ["train.csv", "valid.csv", "test.csv", "manifest.json"].map(|f| std::fs::read(p.join(f)).unwrap())
    };
    let mut spec = SyntheticSpec::imbalanced(9);
    spec.counts = vec![50, 40, 30, 20, 10];
    let a = generate_imbalanced_tasks(&spec).unwrap();
    let b = generate_imbalanced_tasks(&spec).unwrap();
    assert_eq!(a.split, b.split);
    assert_eq!(write(&a.split, "a"), write(&b.split, "b"));
    spec.seed = 10;
    assert_ne!(generate_imbalanced_tasks(&spec).unwrap().split, a.split);

    let spec = SyntheticSpec::temporal(3, 6, 80, 2, 4);
    let a = generate_temporal_tasks(&spec).unwrap();
    let b = generate_temporal_tasks(&spec).unwrap();
    assert_eq!(a.split, b.split);
    assert_eq!(write(&a.split, "c"), write(&b.split, "d"));
}

#[test]
fn temporal_links_are_recorded_and_predictive() {
    let spec = SyntheticSpec::temporal(3, 8, 600, 3, 2);
    let data = generate_temporal_tasks(&spec).unwrap();
    assert_eq!(
        data.links,
        vec![TaskLink {
            source: 0,
            target: 1,
            lag: 3
        }]
    );
    let test = &data.split.test;
    for d in 0..3 {
        let scores = temporal_bayes_scores(&spec, test, d);
        let (s, l) = labelled(test, d, &scores);
        assert!(auroc(&s, &l).unwrap() > 0.95, "task {d}");
    }
}

#[test]
fn temporal_events_follow_their_links() {
    let spec = SyntheticSpec::temporal(3, 10, 300, 2, 4);
    let data = generate_temporal_tasks(&spec).unwrap();
    let splits = [&data.split.train, &data.split.valid, &data.split.test];
    let mut events = 0;
    for (batch, ev) in splits.iter().zip(&data.events) {
        assert_eq!(ev.len(), 3);
        for b in 0..batch.len() {
            assert_eq!(ev[1][b], ev[0][b].map(|t| t + 2).filter(|&t| t < 10));
            for d in 0..3 {
                let late = ev[d][b].is_some_and(|t| t >= 5);
                assert_eq!(batch.label(b, d), f64::from(u8::from(late)));
                events += usize::from(ev[d][b].is_some());
            }
        }
    }
    assert!(events > 300);
    let single = generate_imbalanced_tasks(&SyntheticSpec::imbalanced(0)).unwrap();
    assert!(single.events.iter().all(Vec::is_empty));
}

#[test]
fn shuffled_timesteps_destroy_predictability() {
    let spec = SyntheticSpec::temporal(2, 8, 4000, 2, 6);
    let data = generate_temporal_tasks(&spec).unwrap();
    let mut batch = data.split.train.clone();
    let (steps, m) = (batch.steps, batch.num_features);
    let mut rng = RngStream::new(31);
    for b in 0..batch.len() {
        let mut order: Vec<usize> = (0..steps).collect();
        rng.shuffle(&mut order);
        let orig = batch.instance_inputs(b).to_vec();
        for (t, &src) in order.iter().enumerate() {
            let base = (b * steps + t) * m;
            batch.inputs[base..base + m].copy_from_slice(&orig[src * m..(src + 1) * m]);
        }
    }
    for d in 0..2 {
        let scores = temporal_bayes_scores(&spec, &batch, d);
        let (s, l) = labelled(&batch, d, &scores);
        let a = auroc(&s, &l).unwrap();
        assert!(a <= 0.55, "task {d}: {a}");
    }
}

#[test]
fn zero_lag_gives_identical_predictors() {
    let spec = SyntheticSpec::temporal(2, 6, 300, 0, 1);
    let data = generate_temporal_tasks(&spec).unwrap();
    for batch in data.split.batches() {
        assert_eq!(
            temporal_bayes_scores(&spec, batch, 0),
            temporal_bayes_scores(&spec, batch, 1)
        );
        for b in 0..batch.len() {
            if batch.is_labeled(b, 0) && batch.is_labeled(b, 1) {
                assert_eq!(batch.label(b, 0), batch.label(b, 1));
            }
        }
    }
}

#[test]
fn temporal_counts_follow_the_spec() {
    let mut spec = SyntheticSpec::temporal(3, 6, 200, 1, 0);
    spec.counts = vec![200, 120, 40];
    spec.noise = vec![0.0, 0.1, 0.0];
    let data = generate_temporal_tasks(&spec).unwrap();
    for (d, &want) in spec.counts.iter().enumerate() {
        let got: usize = data.split.batches().iter().map(|b| b.count_labeled(d)).sum();
        assert_eq!(got, want);
    }
}

#[test]
fn infeasible_specs_name_the_field() {
    let base = SyntheticSpec::temporal(3, 6, 50, 1, 0);
    let cases: Vec<(SyntheticSpec, &str)> = vec![
        (
            SyntheticSpec {
                counts: vec![10, 0, 10],
                ..base.clone()
            },
            "counts[1]",
        ),
        (
            SyntheticSpec {
                links: vec![TaskLink {
                    source: 0,
                    target: 1,
                    lag: 6,
                }],
                ..base.clone()
            },
            "links[0].lag",
        ),
        (
            SyntheticSpec {
                noise: vec![0.0, 0.7, 0.0],
                ..base.clone()
            },
            "noise[1]",
        ),
        (
            SyntheticSpec {
                links: vec![
                    TaskLink {
                        source: 0,
                        target: 1,
                        lag: 1,
                    },
                    TaskLink {
                        source: 1,
                        target: 0,
                        lag: 1,
                    },
                ],
                ..base.clone()
            },
            "cycle",
        ),
    ];
    for (spec, field) in cases {
        let err = generate_temporal_tasks(&spec).unwrap_err();
        assert!(matches!(err, Error::Spec(_)));
        assert!(err.to_string().contains(field), "{err}");
    }
    let mut seq = SyntheticSpec::imbalanced(0);
    seq.timesteps = 3;
    assert!(generate_imbalanced_tasks(&seq).is_err());
}

fn parse(text: &str, m: usize, dn: usize) -> tpamtl::error::Result<(EpisodeBatch, tpamtl::data::IngestReport)> {
    parse_csv(
        text.as_bytes(),
        Path::new("mem.csv"),
        &CsvSchema {
            num_features: m,
            num_tasks: dn,
        },
    )
}

const HEADER: &str = "instance_id,timestep,feature_1,feature_2,label_task_1,label_task_2,mask_task_1,mask_task_2";

#[test]
fn empty_cells_become_zero() {
    let text = format!("{HEADER}\na,0,1.5,,1,,1,0\na,1,0.25,2,1,,1,0\n");
    let (batch, report) = parse(&text, 2, 2).unwrap();
    assert_eq!(batch.len(), 1);
    assert_eq!(batch.steps, 2);
    assert_eq!(batch.feature(0, 0, 1), 0.0);
    assert_eq!(batch.feature(0, 1, 1), 2.0);
    assert_eq!(report.imputed_cells, 1);
    assert_eq!(report.rows, 2);
    assert!(batch.is_labeled(0, 0));
    assert!(!batch.is_labeled(0, 1));
    assert_eq!(batch.task_weights(1), vec![0.0]);
}

#[test]
fn timestep_gaps_are_zero_filled() {
    let text = format!("{HEADER}\na,0,1,1,0,1,1,1\na,2,3,3,0,1,1,1\nb,0,4,4,1,0,1,1\n");
    let (batch, report) = parse(&text, 2, 2).unwrap();
    assert_eq!(batch.steps, 3);
    assert_eq!(batch.lengths, vec![3, 1]);
    assert_eq!(batch.instance_inputs(0), &[1.0, 1.0, 0.0, 0.0, 3.0, 3.0]);
    assert_eq!(report.rows_per_instance, vec![2, 1]);
    assert_eq!(report.rows_per_instance.iter().sum::<usize>(), report.rows);
}

#[test]
fn malformed_files_report_the_row() {
    let cases = [
        (
            format!("{HEADER}\na,0,1,1,0,1,1,1\na,0,2,2,0,1,1,1\n"),
            "row 3",
            "duplicate",
        ),
        (
            format!("{HEADER}\na,1,1,1,0,1,1,1\nb,0,1,1,0,1,1,1\na,0,2,2,0,1,1,1\n"),
            "row 4",
            "after",
        ),
        (format!("{HEADER}\na,0,1,x,0,1,1,1\n"), "row 2", "feature_2"),
        (format!("{HEADER}\na,0,1,1,2,1,1,1\n"), "row 2", "label_task_1"),
        (
            format!("{HEADER}\na,0,1,1,0,1,1,1\na,1,1,1,1,1,1,1\n"),
            "row 3",
            "changes",
        ),
        (
            "instance_id,timestep,feature_1,label_task_1,label_task_2,mask_task_1,mask_task_2\n".to_string(),
            "row 1",
            "feature_2",
        ),
    ];
    for (text, row, what) in cases {
        let err = parse(&text, 2, 2).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Ingest { .. }), "{msg}");
        assert!(msg.contains(row) && msg.contains(what), "{msg}");
    }
}

#[test]
fn csv_round_trip_is_lossless() {
    let mut batch = random_batch(4, 7, 5, 3, 2, Some(&[5, 2, 5, 1, 3, 4, 5]), 0.6);
    for i in 0..batch.labels.len() {
        if !batch.mask[i] {
            batch.labels[i] = 0.0;
        }
    }
    batch.inputs[3] = 1e-300;
    batch.inputs[4] = -123456.789e10;
    let mut buf = Vec::new();
    write_csv(&batch, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with(CSV_VERSION_LINE));
    let (back, report) = parse(&text, 3, 2).unwrap();
    assert_eq!(back, batch);
    assert_eq!(report.rows, batch.lengths.iter().sum::<usize>());
    assert_eq!(report.rows, text.lines().count() - 2);
}

#[test]
fn saved_splits_load_back_with_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::temporal(2, 4, 40, 1, 3);
    let data = generate_temporal_tasks(&spec).unwrap();
    let manifest = data
        .split
        .save(dir.path(), serde_json::to_value(&spec).unwrap())
        .unwrap();
    assert_eq!(manifest.splits.len(), 3);
    assert_eq!(manifest.splits.iter().map(|s| s.instances).sum::<usize>(), 40);
    let (back, m2) = DatasetSplit::load(dir.path()).unwrap();
    assert_eq!(back, data.split);
    assert_eq!(m2, manifest);
}

#[test]
fn ingest_splits_a_single_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut batch = random_batch(8, 40, 3, 2, 2, None, 1.0);
    batch.ids = (0..40).map(|i| format!("p{i}")).collect();
    let path = dir.path().join("all.csv");
    write_csv(&batch, std::fs::File::create(&path).unwrap()).unwrap();
    let schema = CsvSchema {
        num_features: 2,
        num_tasks: 2,
    };
    let (split, report) = ingest_csv(&path, &schema, SplitFractions::default(), 1).unwrap();
    split.check_disjoint().unwrap();
    assert_eq!(report.instances, 40);
    assert_eq!(report.rows, 120);
    assert_eq!([split.train.len(), split.valid.len(), split.test.len()], [20, 10, 10]);
    let bad = SplitFractions {
        train: 0.5,
        valid: 0.5,
        test: 0.5,
    };
    assert!(ingest_csv(&path, &schema, bad, 1).is_err());
}
