//! Writes weight-density tables for a clean and a watermarked layer on a
//! shared grid and prints their L1 distance.

use chaosmark::chaos::ChaoticParams;
use chaosmark::nn::{DenseNet, DESK_LAYER, DESK_SIZES};
use chaosmark::watermark::{density_l1, embed, shared_histograms, DEFAULT_BINS};

fn main() {
    let reference = DenseNet::new(&DESK_SIZES, 0).unwrap().to_weights();
    let key = ChaoticParams::new(3.8, 0.2, 0.03, 0);
    let (marked, _) = embed(&reference, DESK_LAYER, &key, "example", 0).unwrap();
    let clean = reference.get(DESK_LAYER).unwrap().values();
    let dirty = marked.get(DESK_LAYER).unwrap().values();

    let tables = shared_histograms(&[("clean", clean), ("marked", dirty)], DEFAULT_BINS).unwrap();
    let out = std::env::temp_dir().join("chaosmark-density");
    std::fs::create_dir_all(&out).unwrap();
    for t in &tables {
        t.save_csv(&out.join(format!("{}.csv", t.label))).unwrap();
    }
    println!("L1 distance {:.4}; tables in {}", density_l1(&tables[0], &tables[1]).unwrap(), out.display());
}
