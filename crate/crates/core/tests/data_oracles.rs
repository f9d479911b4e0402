use std::io::Read;
use std::path::PathBuf;

use colearn_core::data::{
    load_csv, load_idx, partition, partition_indices, Dataset, PartitionMode, PartitionPlan,
};
use colearn_core::rng::CounterRng;
use proptest::prelude::*;

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

/// Naive parser used as an oracle: split on commas, scale by hand.
fn naive_csv_checksum(text: &str, label_col: usize) -> f64 {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != label_col)
                .map(|(_, c)| c.trim().parse::<f64>().unwrap())
                .collect()
        })
        .collect();
    let cols = rows[0].len();
    let mut sum = 0.0;
    for (r, row) in rows.iter().enumerate() {
        for c in 0..cols {
            let lo = rows.iter().map(|x| x[c]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|x| x[c]).fold(f64::NEG_INFINITY, f64::max);
            let v = if hi > lo { (row[c] - lo) / (hi - lo) } else { 0.0 };
            sum += v * (1.0 + r as f64 * 1e-3 + c as f64 * 1e-6);
        }
    }
    sum
}

#[test]
fn csv_matches_independent_parser() {
    let mut rng = CounterRng::new(77);
    let mut text = String::from("a,b,kind,c,d\n");
    for _ in 0..100 {
        let kind = ["cat", "dog", "eel"][rng.below(3) as usize];
        text.push_str(&format!(
            "{:.6},{},{kind},{:.3},4.5\n",
            rng.next_f64() * 100.0 - 50.0,
            rng.below(1000),
            rng.next_f64()
        ));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synthetic.csv");
    std::fs::write(&path, &text).unwrap();
    let d = load_csv(&path, "kind").unwrap();
    assert_eq!(d.len(), 100);
    assert_eq!(d.n_features(), 4);
    let mut ours = 0.0;
    for r in 0..d.len() {
        for (c, v) in d.row(r).iter().enumerate() {
            ours += v * (1.0 + r as f64 * 1e-3 + c as f64 * 1e-6);
        }
    }
    let oracle = naive_csv_checksum(&text, 2);
    assert!((ours - oracle).abs() < 1e-9, "{ours} vs {oracle}");
    // Constant column d scales to zero.
    assert!((0..d.len()).all(|r| d.row(r)[3] == 0.0));
}

fn reference_label_histogram(n: usize) -> Vec<usize> {
    let raw = std::fs::read(mnist_dir().join("labels-idx1-ubyte.gz")).unwrap();
    let mut bytes = Vec::new();
    flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], &[0, 0, 8, 1]);
    let mut h = vec![0; 10];
    for &b in &bytes[8..8 + n] {
        h[b as usize] += 1;
    }
    h
}

#[test]
fn idx_label_histogram_matches_reference_reader() {
    let dir = mnist_dir();
    let d = load_idx(dir.join("images-idx3-ubyte.gz"), dir.join("labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(d.n_features(), 784);
    assert_eq!(d.num_classes(), 10);
    let (first, _) = d.split_at(100);
    assert_eq!(first.label_histogram(), reference_label_histogram(100));
    assert!(d.features().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn labelled(rows: usize, classes: usize, seed: u64) -> Dataset {
    let mut rng = CounterRng::new(seed);
    let labels: Vec<usize> = (0..rows).map(|_| rng.below(classes as u64) as usize).collect();
    let features = (0..rows).map(|i| i as f64).collect();
    Dataset::new(features, 1, labels, classes, "labelled")
}

#[test]
fn huge_alpha_dirichlet_tracks_global_label_mix() {
    let d = labelled(4000, 4, 1);
    let global: Vec<f64> = d.label_histogram().iter().map(|&c| c as f64 / d.len() as f64).collect();
    for seed in 0..10 {
        let plan = PartitionPlan {
            num_clients: 5,
            mode: PartitionMode::Dirichlet { alpha: 1e6 },
            seed,
        };
        for part in partition(&d, &plan).unwrap() {
            let h = part.label_histogram();
            for (c, &g) in global.iter().enumerate() {
                let p = h[c] as f64 / part.len() as f64;
                assert!((p - g).abs() <= 0.05, "seed {seed} class {c}: {p} vs {g}");
            }
        }
    }
}

#[test]
fn union_of_partitions_is_the_corpus() {
    let d = labelled(10, 2, 3);
    let plan = PartitionPlan {
        num_clients: 2,
        mode: PartitionMode::Iid,
        seed: 4,
    };
    let mut rows: Vec<f64> = partition(&d, &plan).unwrap().iter().flat_map(|p| p.features().to_vec()).collect();
    rows.sort_by(f64::total_cmp);
    assert_eq!(rows, d.features());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_disjoint_covers_and_seed_stable(
        rows in 1usize..300,
        clients in 1usize..12,
        seed in any::<u64>(),
        dirichlet in any::<bool>(),
        alpha in 0.05f64..20.0,
    ) {
        prop_assume!(clients <= rows);
        let d = labelled(rows, 5, seed);
        let mode = if dirichlet { PartitionMode::Dirichlet { alpha } } else { PartitionMode::Iid };
        let plan = PartitionPlan { num_clients: clients, mode, seed };
        let parts = partition_indices(&d, &plan).unwrap();
        prop_assert_eq!(parts.len(), clients);
        prop_assert!(parts.iter().all(|p| !p.is_empty()));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..rows).collect::<Vec<_>>());
        prop_assert_eq!(partition_indices(&d, &plan).unwrap(), parts.clone());
        if !dirichlet {
            let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
