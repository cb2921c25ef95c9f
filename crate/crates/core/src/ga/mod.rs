//! Key recovery by genetic search, and the ownership decision.
//!
//! Each individual is a candidate key `(r, x0, epsilon)`. A generation is
//! evaluated (in parallel), sorted, the elites are carried over unchanged,
//! and the rest of the next generation is bred by tournament selection,
//! blend crossover and Gaussian mutation. All random draws happen on the
//! sequential loop, so results depend only on the seed.

mod fitness;
mod operators;

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fitness::{candidate_sequence, correlation_distance, fitness, mse, FitnessWeights, WORST_FITNESS};
pub use operators::{blend_crossover, draw_alpha, lhs_init, mutate, tournament_select};

use crate::chaos::ChaoticParams;
use crate::store::write_text_atomic;

#[derive(Debug, Error)]
pub enum GaError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty sequence")]
    Empty,
    #[error("need at least 2 elements, got {0}")]
    TooShort(usize),
    #[error("zero variance: correlation is undefined")]
    ZeroVariance,
    #[error("tournament size {k} is invalid for a population of {population}")]
    Tournament { k: usize, population: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("target sequence is constant; nothing to match")]
    ConstantTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub r: f64,
    pub x0: f64,
    pub epsilon: f64,
}

impl Individual {
    pub fn new(r: f64, x0: f64, epsilon: f64) -> Self {
        Self { r, x0, epsilon }
    }

    pub fn genes(&self) -> [f64; 3] {
        [self.r, self.x0, self.epsilon]
    }

    pub fn from_genes(g: [f64; 3]) -> Self {
        Self::new(g[0], g[1], g[2])
    }
}

impl From<&ChaoticParams> for Individual {
    fn from(p: &ChaoticParams) -> Self {
        Self::new(p.r, p.x0, p.epsilon)
    }
}

/// Closed search ranges for each parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub r: (f64, f64),
    pub x0: (f64, f64),
    pub epsilon: (f64, f64),
}

impl Default for SearchBox {
    fn default() -> Self {
        Self { r: (3.57, 4.0), x0: (0.01, 0.99), epsilon: (0.001, 0.05) }
    }
}

impl SearchBox {
    pub fn bounds(&self) -> [(f64, f64); 3] {
        [self.r, self.x0, self.epsilon]
    }

    pub fn validate(&self) -> Result<(), GaError> {
        for (name, (lo, hi)) in ["r", "x0", "epsilon"].iter().zip(self.bounds()) {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(GaError::Config(format!("degenerate {name} range [{lo}, {hi}]")));
            }
        }
        if self.r.0 <= 0.0 || self.r.1 > 4.0 {
            return Err(GaError::Config("r range must lie within (0, 4]".into()));
        }
        if self.x0.0 <= 0.0 || self.x0.1 >= 1.0 {
            return Err(GaError::Config("x0 range must lie within (0, 1)".into()));
        }
        if self.epsilon.0 <= 0.0 {
            return Err(GaError::Config("epsilon range must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, ind: &Individual) -> bool {
        self.bounds()
            .iter()
            .zip(ind.genes())
            .all(|(&(lo, hi), v)| v >= lo && v <= hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BlendFactor {
    Fixed(f64),
    /// Drawn uniformly per crossover.
    Uniform { lo: f64, hi: f64 },
}

/// Number of leading delta elements matched by default. See
/// [`GaConfig::target_len`].
pub const DEFAULT_TARGET_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub search_box: SearchBox,
    pub tournament_size: usize,
    pub alpha: BlendFactor,
    pub mutation_prob: f64,
    /// Gaussian standard deviation for `(r, x0, epsilon)`.
    pub mutation_scale: [f64; 3],
    pub elite_count: usize,
    pub improvement_threshold: f64,
    pub patience: usize,
    pub seed: u64,
    pub weights: FitnessWeights,
    /// Leading elements of the delta used as the target; `None` uses all.
    ///
    /// The logistic map loses memory of `(r, x0)` within a few dozen
    /// iterations, so only a short prefix carries a basin the search can
    /// descend; longer targets add correlation noise that swamps it.
    pub target_len: Option<usize>,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 200,
            generations: 300,
            search_box: SearchBox::default(),
            tournament_size: 5,
            alpha: BlendFactor::Uniform { lo: 0.3, hi: 0.7 },
            mutation_prob: 0.3,
            mutation_scale: [0.02, 0.02, 0.002],
            elite_count: 4,
            improvement_threshold: 1e-12,
            patience: 40,
            seed: 0,
            weights: FitnessWeights::default(),
            target_len: Some(DEFAULT_TARGET_LEN),
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let fail = |m: &str| Err(GaError::Config(m.to_string()));
        if self.population < 2 {
            return fail("population must be at least 2");
        }
        if self.generations == 0 {
            return fail("generations must be at least 1");
        }
        if self.elite_count >= self.population {
            return fail("elite count must be smaller than the population");
        }
        if self.tournament_size < 2 || self.tournament_size > self.population {
            return fail("tournament size must be in [2, population]");
        }
        match self.alpha {
            BlendFactor::Fixed(a) if !(0.0..=1.0).contains(&a) => return fail("alpha must be in [0, 1]"),
            BlendFactor::Uniform { lo, hi } if !(0.0 <= lo && lo <= hi && hi <= 1.0) => {
                return fail("alpha range must satisfy 0 <= lo <= hi <= 1")
            }
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return fail("mutation probability must be in [0, 1]");
        }
        if self.mutation_scale.iter().any(|s| !(*s >= 0.0)) {
            return fail("mutation scales must be non-negative");
        }
        if self.target_len.is_some_and(|n| n < 2) {
            return fail("target length must be at least 2");
        }
        self.search_box.validate()?;
        self.weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Confirmed,
    Rejected,
    Inconclusive,
}

impl Decision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Decision::Confirmed => "confirmed",
            Decision::Rejected => "rejected",
            Decision::Inconclusive => "inconclusive",
        }
    }
}

/// Per-parameter absolute bounds for a confirmed claim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub r: f64,
    pub x0: f64,
    pub epsilon: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { r: 0.05, x0: 0.05, epsilon: 0.005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnershipDecision {
    pub decision: Decision,
    /// `|recovered - claimed|` for `(r, x0, epsilon)`.
    pub diffs: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub best: Individual,
    pub fitness: f64,
    pub mse: f64,
    /// Best fitness found so far, one entry per executed generation.
    pub trace: Vec<f64>,
    pub generations: usize,
    pub target_len: usize,
    pub ownership: Option<OwnershipDecision>,
}

impl VerificationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "recovered r        {:.17}", self.best.r);
        let _ = writeln!(s, "recovered x0       {:.17}", self.best.x0);
        let _ = writeln!(s, "recovered epsilon  {:.17}", self.best.epsilon);
        let _ = writeln!(s, "final fitness      {:e}", self.fitness);
        let _ = writeln!(s, "final mse          {:e}", self.mse);
        let _ = writeln!(s, "generations        {}", self.generations);
        let _ = writeln!(s, "target length      {}", self.target_len);
        if let Some(o) = &self.ownership {
            let _ = writeln!(s, "diff r             {:.6}", o.diffs[0]);
            let _ = writeln!(s, "diff x0            {:.6}", o.diffs[1]);
            let _ = writeln!(s, "diff epsilon       {:.6}", o.diffs[2]);
            let _ = writeln!(s, "decision           {}", o.decision.as_str());
        }
        let _ = writeln!(s, "trace");
        for (g, f) in self.trace.iter().enumerate() {
            let _ = writeln!(s, "  {g:>5} {f:e}");
        }
        s
    }

    pub fn write_trace_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "generation,best_fitness")?;
        for (g, f) in self.trace.iter().enumerate() {
            writeln!(w, "{g},{f:e}")?;
        }
        Ok(())
    }

    pub fn save_trace_csv(&self, path: &Path) -> std::io::Result<()> {
        write_text_atomic(path, |w| self.write_trace_csv(w))
    }
}

fn evaluate(pop: &[Individual], target: &[f64], weights: &FitnessWeights) -> Vec<f64> {
    pop.par_iter()
        .map_init(
            || Vec::with_capacity(target.len()),
            |buf, ind| fitness::fitness_with_buffer(ind, target, weights, buf),
        )
        .collect()
}

/// Runs the search against `target` (the extracted delta).
pub fn run_ga(target: &[f64], config: &GaConfig) -> Result<VerificationReport, GaError> {
    config.validate()?;
    let n = config.target_len.map_or(target.len(), |cap| cap.min(target.len()));
    if n < 2 {
        return Err(GaError::TooShort(n));
    }
    let target = &target[..n];
    if target.iter().all(|&v| v == target[0]) {
        return Err(GaError::ConstantTarget);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut population = lhs_init(config, &mut rng)?;
    let mut best = population[0];
    let mut best_fitness = f64::INFINITY;
    let mut wait = 0usize;
    let mut trace = Vec::with_capacity(config.generations);

    for gen in 0..config.generations {
        let scores = evaluate(&population, target, &config.weights);
        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));

        let gen_best = scores[order[0]];
        let improvement = best_fitness - gen_best;
        if gen_best < best_fitness {
            best = population[order[0]];
            best_fitness = gen_best;
        }
        if improvement > config.improvement_threshold {
            wait = 0;
        } else {
            wait += 1;
        }
        trace.push(best_fitness);
        if wait >= config.patience || gen + 1 == config.generations {
            break;
        }

        let mut next: Vec<Individual> = order[..config.elite_count].iter().map(|&i| population[i]).collect();
        while next.len() < config.population {
            let a = tournament_select(&population, &scores, config.tournament_size, &mut rng)?;
            let b = tournament_select(&population, &scores, config.tournament_size, &mut rng)?;
            let alpha = draw_alpha(config.alpha, &mut rng);
            let child = blend_crossover(&population[a], &population[b], alpha);
            next.push(mutate(&child, config, &mut rng));
        }
        population = next;
    }

    let final_mse = mse(target, &candidate_sequence(&best, n))?;
    Ok(VerificationReport {
        best,
        fitness: best_fitness,
        mse: final_mse,
        generations: trace.len(),
        trace,
        target_len: n,
        ownership: None,
    })
}

/// Compares a recovered key with a claimed one.
///
/// `x0` and `1 - x0` produce the same logistic orbit from the first iterate
/// on, so the `x0` difference is measured to the nearer of the two.
pub fn decide_ownership(recovered: &Individual, claimed: &ChaoticParams, tol: &Tolerances) -> OwnershipDecision {
    let dx0 = (recovered.x0 - claimed.x0)
        .abs()
        .min((1.0 - recovered.x0 - claimed.x0).abs());
    let diffs = [(recovered.r - claimed.r).abs(), dx0, (recovered.epsilon - claimed.epsilon).abs()];
    OwnershipDecision { decision: classify_diffs(diffs, tol), diffs }
}

/// Closed bounds: confirmed iff every diff is within its tolerance; rejected
/// iff any diff exceeds twice its tolerance.
pub fn classify_diffs(diffs: [f64; 3], tol: &Tolerances) -> Decision {
    let tols = [tol.r, tol.x0, tol.epsilon];
    if diffs.iter().zip(&tols).all(|(d, t)| d <= t) {
        Decision::Confirmed
    } else if diffs.iter().zip(&tols).any(|(d, t)| *d > 2.0 * t || d.is_nan()) {
        Decision::Rejected
    } else {
        Decision::Inconclusive
    }
}

/// [`run_ga`] followed by [`decide_ownership`] against `claimed`.
pub fn verify(
    target: &[f64],
    claimed: &ChaoticParams,
    config: &GaConfig,
    tol: &Tolerances,
) -> Result<VerificationReport, GaError> {
    let mut report = run_ga(target, config)?;
    report.ownership = Some(decide_ownership(&report.best, claimed, tol));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::logistic_iterates;

    fn target(r: f64, x0: f64, eps: f64, n: usize) -> Vec<f64> {
        logistic_iterates(r, x0, n).iter().map(|c| eps * c).collect()
    }

    #[test]
    fn config_validation() {
        assert!(GaConfig::default().validate().is_ok());
        let bad = [
            GaConfig { population: 1, ..GaConfig::default() },
            GaConfig { elite_count: 200, ..GaConfig::default() },
            GaConfig { tournament_size: 1, ..GaConfig::default() },
            GaConfig { alpha: BlendFactor::Fixed(1.5), ..GaConfig::default() },
            GaConfig { target_len: Some(1), ..GaConfig::default() },
            GaConfig { weights: FitnessWeights { w_corr: 0.5, w_mse: 0.6 }, ..GaConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn recovers_self_generated_key() {
        let t = target(3.9, 0.5, 0.01, 512);
        let report = run_ga(&t, &GaConfig { seed: 7, ..GaConfig::default() }).unwrap();
        assert!((report.best.r - 3.9).abs() <= 0.02, "{:?}", report.best);
        assert!((report.best.x0 - 0.5).abs() <= 0.01, "{:?}", report.best);
        assert!((report.best.epsilon - 0.01).abs() <= 0.002, "{:?}", report.best);
        assert!(report.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn deterministic_given_seed() {
        let t = target(3.7, 0.3, 0.02, 64);
        let c = GaConfig { generations: 30, seed: 3, ..GaConfig::default() };
        assert_eq!(run_ga(&t, &c).unwrap(), run_ga(&t, &c).unwrap());
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let t = target(3.8, 0.2, 0.01, 32);
        let c = GaConfig { generations: 20, seed: 5, ..GaConfig::default() };
        let par = run_ga(&t, &c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let seq = pool.install(|| run_ga(&t, &c).unwrap());
        assert_eq!(par, seq);
    }

    #[test]
    fn constant_or_short_target_rejected() {
        assert!(matches!(run_ga(&[0.1; 16], &GaConfig::default()), Err(GaError::ConstantTarget)));
        assert!(matches!(run_ga(&[0.1], &GaConfig::default()), Err(GaError::TooShort(1))));
    }

    #[test]
    fn decision_table_values() {
        let claim = ChaoticParams::new(3.9, 0.5, 0.01, 0);
        let tol = Tolerances::default();
        let attacked = Individual::new(3.911288, 0.497336, 0.011182);
        assert_eq!(decide_ownership(&attacked, &claim, &tol).decision, Decision::Confirmed);
        let random = Individual::new(3.646363, 0.270680, 0.050000);
        let d = decide_ownership(&random, &claim, &tol);
        assert_eq!(d.decision, Decision::Rejected);
        assert!((d.diffs[0] - 0.253637).abs() < 1e-9);
        assert!((d.diffs[1] - 0.229320).abs() < 1e-9);
    }

    #[test]
    fn decision_boundaries() {
        let tol = Tolerances { r: 0.25, x0: 0.25, epsilon: 0.5 };
        assert_eq!(classify_diffs([0.25, 0.25, 0.5], &tol), Decision::Confirmed);
        assert_eq!(classify_diffs([0.5, 0.0, 0.0], &tol), Decision::Inconclusive);
        assert_eq!(classify_diffs([0.5000001, 0.0, 0.0], &tol), Decision::Rejected);
    }

    #[test]
    fn mirrored_x0_counts_as_match() {
        let claim = ChaoticParams::new(3.9, 0.3, 0.01, 0);
        let d = decide_ownership(&Individual::new(3.9, 0.7, 0.01), &claim, &Tolerances::default());
        assert!(d.diffs[1] < 1e-12);
        assert_eq!(d.decision, Decision::Confirmed);
    }

    #[test]
    fn trace_csv_axes() {
        let t = target(3.9, 0.5, 0.01, 16);
        let r = run_ga(&t, &GaConfig { generations: 5, ..GaConfig::default() }).unwrap();
        let mut out = Vec::new();
        r.write_trace_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("generation,best_fitness\n0,"));
        assert_eq!(text.lines().count(), r.trace.len() + 1);
    }
}
