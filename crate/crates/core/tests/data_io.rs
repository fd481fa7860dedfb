mod common;

use proptest::prelude::*;
use spikegrad::data::{
    load_checkpoint, load_idx, parse_idx_images, parse_idx_labels, save_checkpoint, synth_clusters, synth_patterns,
    synth_twoclass, write_idx_images, write_idx_labels, Checkpoint, Dataset, TrainingMeta,
};
use spikegrad::snn::{architecture, ArchOptions, Network};
use spikegrad::train::{train, LrSchedule, TrainConfig};
use spikegrad::{Error, Tensor};

fn pixels(bytes: &[u8], rows: usize, cols: usize) -> Tensor<f32> {
    let n = bytes.len() / (rows * cols);
    let data = bytes[..n * rows * cols].iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::new(&[n, 1, rows, cols], data).unwrap()
}

proptest! {
    #[test]
    fn idx_round_trip_is_exact(
        raw in prop::collection::vec(any::<u8>(), 0..600),
        rows in 1usize..6,
        cols in 1usize..6,
        label_seed in any::<u64>(),
    ) {
        let images = pixels(&raw, rows, cols);
        let n = images.shape()[0];
        let labels: Vec<usize> = (0..n).map(|i| ((label_seed >> (i % 60)) as usize + i) % 10).collect();
        let img_bytes = write_idx_images(&images).unwrap();
        let lbl_bytes = write_idx_labels(&labels).unwrap();
        prop_assert_eq!(parse_idx_images(&img_bytes).unwrap(), images);
        prop_assert_eq!(parse_idx_labels(&lbl_bytes).unwrap(), labels);
        // Every proper prefix is a format error, never a panic.
        for cut in [0, 3, 7, img_bytes.len().saturating_sub(1)] {
            if cut < img_bytes.len() {
                let truncated = matches!(parse_idx_images(&img_bytes[..cut]), Err(Error::Format { .. }));
                prop_assert!(truncated, "prefix of {} bytes", cut);
            }
        }
    }
}

#[test]
fn idx_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_patterns(30, 4, 8, 3).unwrap();
    // Quantize to bytes the way an IDX file stores them.
    let images = data.images.map(|v| (v * 255.0).round() / 255.0);
    std::fs::write(dir.path().join("img"), write_idx_images(&images).unwrap()).unwrap();
    std::fs::write(dir.path().join("lbl"), write_idx_labels(&data.labels).unwrap()).unwrap();
    let back = load_idx(dir.path().join("img"), dir.path().join("lbl")).unwrap();
    assert_eq!(back.images, images);
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.classes, 10);
    assert!(matches!(
        load_idx(dir.path().join("missing"), dir.path().join("lbl")),
        Err(Error::Io { .. })
    ));
}

/// Least-squares fit of `[x, y, 1] -> ±1` via the 3x3 normal equations.
fn least_squares_direction(data: &Dataset) -> [f64; 3] {
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for i in 0..data.len() {
        let row = [
            f64::from(data.images.data()[2 * i]),
            f64::from(data.images.data()[2 * i + 1]),
            1.0,
        ];
        let target = if data.labels[i] == 1 { 1.0 } else { -1.0 };
        for a in 0..3 {
            atb[a] += row[a] * target;
            for b in 0..3 {
                ata[a][b] += row[a] * row[b];
            }
        }
    }
    // Gaussian elimination without pivoting; ata is positive definite.
    for k in 0..3 {
        for r in k + 1..3 {
            let f = ata[r][k] / ata[k][k];
            for c in k..3 {
                ata[r][c] -= f * ata[k][c];
            }
            atb[r] -= f * atb[k];
        }
    }
    let mut w = [0.0; 3];
    for k in (0..3).rev() {
        let tail: f64 = (k + 1..3).map(|c| ata[k][c] * w[c]).sum();
        w[k] = (atb[k] - tail) / ata[k][k];
    }
    w
}

#[test]
fn twoclass_is_linearly_separable_by_closed_form() {
    for seed in 0..5 {
        let data = synth_twoclass(400, seed).unwrap();
        let w = least_squares_direction(&data);
        for i in 0..data.len() {
            let x = f64::from(data.images.data()[2 * i]);
            let y = f64::from(data.images.data()[2 * i + 1]);
            let score = w[0] * x + w[1] * y + w[2];
            assert_eq!(usize::from(score > 0.0), data.labels[i], "seed {seed}, sample {i}");
        }
        let ones = data.labels.iter().filter(|&&l| l == 1).count();
        assert!(ones.abs_diff(data.len() - ones) <= 1);
    }
}

#[test]
fn generators_are_byte_reproducible_and_balanced() {
    assert_eq!(synth_twoclass(100, 4).unwrap(), synth_twoclass(100, 4).unwrap());
    assert_eq!(synth_clusters(100, 8, 7, 0.2, 4).unwrap(), synth_clusters(100, 8, 7, 0.2, 4).unwrap());
    assert_ne!(synth_clusters(100, 8, 7, 0.2, 4).unwrap(), synth_clusters(100, 8, 7, 0.2, 5).unwrap());
    let data = synth_clusters(103, 8, 7, 0.2, 4).unwrap();
    let mut counts = [0usize; 7];
    for &l in &data.labels {
        counts[l] += 1;
    }
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1, "{counts:?}");
}

#[test]
fn trained_checkpoint_round_trips_through_a_file() {
    let data = synth_patterns(64, 4, 8, 1).unwrap();
    let opts = ArchOptions {
        input_shape: vec![1, 8, 8],
        classes: 4,
        ..Default::default()
    };
    let mut net = Network::init(architecture("scaling-3", &opts).unwrap(), 2).unwrap();
    net.set_gamma(3.5);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        timesteps: 3,
        schedule: LrSchedule::Constant { lr: 1e-3 },
        ..TrainConfig::default()
    };
    let outcome = train(net, &data, &data, &cfg).unwrap();
    let ckpt = outcome.checkpoint;
    assert!(ckpt.optimizer.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.network.gamma(), Some(3.5));
    assert_eq!(std::fs::read(&path).unwrap(), back.encode().unwrap());
    // Running statistics moved away from their initial values during training.
    let moved = back.network.layer_params().iter().any(|p| match p {
        spikegrad::snn::LayerParams::BatchNorm(bn) => bn.running_mean.data().iter().any(|&m| m != 0.0),
        _ => false,
    });
    assert!(moved);
}

#[test]
fn checkpoint_against_a_deeper_spec_is_a_topology_error() {
    let opts = ArchOptions {
        input_shape: vec![1, 8, 8],
        classes: 4,
        ..Default::default()
    };
    let three = Network::init(architecture("scaling-3", &opts).unwrap(), 0).unwrap();
    let four = architecture("scaling-4", &opts).unwrap();
    let ckpt = Checkpoint::new(three, TrainingMeta::default());
    assert!(matches!(ckpt.check_topology(&four), Err(Error::Topology(_))));
}

#[test]
fn shuffled_iteration_order_is_reproducible() {
    let data = synth_clusters(50, 3, 5, 0.1, 0).unwrap();
    let order = |seed| data.shuffled_batches(8, seed).flat_map(|b| b.labels).collect::<Vec<_>>();
    assert_eq!(order(3), order(3));
    assert_ne!(
        data.shuffled_batches(50, 3).next().unwrap().images,
        data.shuffled_batches(50, 4).next().unwrap().images
    );
}
