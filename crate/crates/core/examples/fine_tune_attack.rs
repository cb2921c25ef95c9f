//! Embeds, fine-tunes, then attacks with more fine-tuning on held-out data,
//! and checks the key still verifies.

use chaosmark::chaos::ChaoticParams;
use chaosmark::ga::{verify, GaConfig, Tolerances};
use chaosmark::nn::{self, Architecture, DenseNet, DESK_LAYER};
use chaosmark::watermark::{embed, extract};

fn main() {
    let data = nn::gaussian_blobs(&nn::desk_blobs(1)).unwrap();
    let (train, test) = nn::train_test_split(&data);
    let (attack, held) = test.halves();
    let cfg = nn::desk_train_config(1);
    let original = nn::train(&DenseNet::new(&nn::DESK_SIZES, 1).unwrap(), &train, &cfg).unwrap().net;

    let key = ChaoticParams::new(3.9, 0.5, 0.01, 0);
    let (w, _) = embed(&original.to_weights(), DESK_LAYER, &key, "example", 0).unwrap();
    let marked = DenseNet::from_weights(&Architecture::of(&original, &cfg), &w).unwrap();
    let tuned = nn::fine_tune(&marked, &train, &cfg, 1).unwrap().net;
    let attacked = nn::fine_tune(&tuned, &attack, &cfg, 1).unwrap().net;

    for (name, net) in [("original", &original), ("fine-tuned", &tuned), ("attacked", &attacked)] {
        println!("{name:>10} accuracy {:.4}", nn::evaluate(net, &held).unwrap().accuracy);
    }
    let delta = extract(&attacked.to_weights(), &original.to_weights(), DESK_LAYER).unwrap();
    let report = verify(&delta.values, &key, &GaConfig { seed: 1, ..Default::default() }, &Tolerances::default()).unwrap();
    let own = report.ownership.unwrap();
    println!("recovered ({:.4}, {:.4}, {:.5}) -> {}", report.best.r, report.best.x0, report.best.epsilon, own.decision.as_str());
}
