//! Shared input generators for the pipeline benchmarks.

use rand::Rng;
use slidemil::milnet::{FeaturizerKind, Instances, MilConfig};
use slidemil::seed::rng_from;
use slidemil::{BagInput, MilModel, RgbImage, Tensor};

pub fn bench_mil_config(input_size: usize, feature_dim: usize) -> MilConfig {
    MilConfig {
        input_size,
        conv1_channels: 8,
        feature_dim,
        attn_hidden: 16,
        clinical_dim: 8,
        classes: 2,
        gated: false,
        featurizer: FeaturizerKind::Conv,
    }
}

pub fn bench_model(cfg: MilConfig, seed: u64) -> MilModel {
    let mut rng = rng_from(seed);
    MilModel::init(cfg, &mut rng).expect("valid config")
}

pub fn bench_bag(cfg: &MilConfig, n_instances: usize, seed: u64) -> BagInput {
    let mut rng = rng_from(seed);
    let s = cfg.input_size;
    let images = (0..n_instances)
        .map(|_| {
            let data = (0..3 * s * s).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            Tensor::from_vec(&[3, s, s], data).expect("consistent shape")
        })
        .collect();
    let clinical = (0..cfg.clinical_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    BagInput {
        instances: Instances::Images(images),
        clinical,
    }
}

pub fn noise_image(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = rng_from(seed);
    let data = (0..width * height * 3).map(|_| rng.gen()).collect();
    RgbImage::new(width, height, data).expect("consistent buffer")
}

pub fn scored_labels(n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = rng_from(seed);
    let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0u16..100)) / 100.0).collect();
    let mut labels: Vec<usize> = (0..n).map(|_| usize::from(rng.gen_bool(0.5))).collect();
    labels[0] = 1;
    labels[1 % n.max(2)] = 0;
    (scores, labels)
}
