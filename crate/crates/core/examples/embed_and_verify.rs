//! Trains a small classifier, embeds a key into one layer and verifies
//! ownership from the raw weight difference.

use chaosmark::chaos::ChaoticParams;
use chaosmark::ga::{verify, GaConfig, Tolerances};
use chaosmark::nn::{self, DenseNet, DESK_LAYER};
use chaosmark::watermark::{embed, extract};

fn main() {
    let data = nn::gaussian_blobs(&nn::desk_blobs(0)).unwrap();
    let (train, _) = nn::train_test_split(&data);
    let cfg = nn::desk_train_config(0);
    let original = nn::train(&DenseNet::new(&nn::DESK_SIZES, 0).unwrap(), &train, &cfg).unwrap().net;

    let key = ChaoticParams::new(3.9, 0.5, 0.01, 0);
    let reference = original.to_weights();
    let (marked, manifest) = embed(&reference, DESK_LAYER, &key, "example", 0).unwrap();
    println!("marked {} weights of {}", manifest.params.length, manifest.layer);

    let delta = extract(&marked, &reference, DESK_LAYER).unwrap();
    let report = verify(&delta.values, &key, &GaConfig::default(), &Tolerances::default()).unwrap();
    let own = report.ownership.unwrap();
    println!(
        "recovered ({:.5}, {:.5}, {:.6}) after {} generations, fitness {:.3e}, diffs {:?} -> {}",
        report.best.r, report.best.x0, report.best.epsilon, report.generations, report.fitness, own.diffs, own.decision.as_str()
    );
}
