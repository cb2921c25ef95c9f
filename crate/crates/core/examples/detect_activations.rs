//! Tells original, watermarked and fine-tuned models apart from their hidden
//! activations on confidently classified inputs.

use chaosmark::chaos::ChaoticParams;
use chaosmark::detect::{classify, collect_features, confusion, train_logreg, ActivationFeatureSet, DEFAULT_L2, SOURCES};
use chaosmark::nn::{self, Architecture, DenseNet, Optimizer, TrainConfig, DESK_LAYER};
use chaosmark::watermark::embed;

fn main() {
    let data = nn::gaussian_blobs(&nn::desk_blobs(2)).unwrap();
    let (train, test) = nn::train_test_split(&data);
    let cfg = nn::desk_train_config(2);
    let original = nn::train(&DenseNet::new(&nn::DESK_SIZES, 2).unwrap(), &train, &cfg).unwrap().net;
    let (w, _) = embed(&original.to_weights(), DESK_LAYER, &ChaoticParams::new(3.9, 0.5, 0.01, 0), "example", 0).unwrap();
    let marked = DenseNet::from_weights(&Architecture::of(&original, &cfg), &w).unwrap();
    let tuned = nn::fine_tune(&marked, &train, &cfg, 1).unwrap().net;

    let (fit, held) = test.halves();
    let features = |x: &ndarray::Array2<f64>| {
        let parts: Vec<_> = [&original, &marked, &tuned]
            .iter()
            .enumerate()
            .map(|(i, n)| collect_features(n, x, DESK_LAYER, 0.9, i).unwrap())
            .collect();
        ActivationFeatureSet::concat(&parts).unwrap().balanced()
    };
    let (a, b) = (features(&fit.features), features(&held.features));
    let lr = TrainConfig { optimizer: Optimizer::adam(), learning_rate: 0.01, batch_size: 64, epochs: 200, seed: 2 };
    let model = train_logreg(&a, &lr, DEFAULT_L2).unwrap();
    let (pred, _) = classify(&model, &b.features).unwrap();
    print!("{}", confusion(&b.labels, &pred, 3).unwrap().summary(&SOURCES));
}
