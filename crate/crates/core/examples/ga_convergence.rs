//! Runs the key search on a noisy target and prints the best-fitness trace.

use chaosmark::chaos::logistic_iterates;
use chaosmark::ga::{run_ga, GaConfig};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() {
    let (r, x0, eps) = (3.7, 0.25, 0.02);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 5e-4).unwrap();
    let target: Vec<f64> = logistic_iterates(r, x0, 500).iter().map(|c| eps * c + noise.sample(&mut rng)).collect();

    let report = run_ga(&target, &GaConfig::default()).unwrap();
    for (g, f) in report.trace.iter().enumerate().filter(|(g, _)| g % 10 == 0) {
        println!("gen {g:>4}  best {f:.4e}");
    }
    println!(
        "stopped after {} generations at ({:.4}, {:.4}, {:.5}); truth ({r}, {x0}, {eps})",
        report.generations, report.best.r, report.best.x0, report.best.epsilon
    );
}
