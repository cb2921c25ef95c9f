//! Prints the first iterates of a logistic-map key and shows how quickly two
//! nearby keys separate.

use chaosmark::chaos::{generate_chaotic_sequence, ChaoticParams};

fn main() {
    let a = generate_chaotic_sequence(&ChaoticParams::new(3.9, 0.3, 0.01, 40)).unwrap();
    let b = generate_chaotic_sequence(&ChaoticParams::new(3.9, 0.3 + 1e-9, 0.01, 40)).unwrap();
    println!("step  x(0.3)            x(0.3 + 1e-9)     |diff|");
    for (i, (x, y)) in a.values().iter().zip(b.values()).enumerate().step_by(4) {
        println!("{:>4}  {x:.15}  {y:.15}  {:.3e}", i + 1, (x - y).abs());
    }
}
