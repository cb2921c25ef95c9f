//! Population initialization and variation operators.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{BlendFactor, GaConfig, GaError, Individual, SearchBox};

/// Latin hypercube sample of `config.population` individuals: in every
/// dimension each of the `population` equal-width strata holds exactly one
/// value.
pub fn lhs_init<R: Rng + ?Sized>(config: &GaConfig, rng: &mut R) -> Result<Vec<Individual>, GaError> {
    config.search_box.validate()?;
    let n = config.population;
    let bounds = config.search_box.bounds();
    let mut columns: [Vec<f64>; 3] = Default::default();
    for (col, &(lo, hi)) in columns.iter_mut().zip(&bounds) {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        *col = strata
            .into_iter()
            .map(|k| {
                let u: f64 = rng.random();
                let v = lo + (k as f64 + u) / n as f64 * (hi - lo);
                v.min(hi)
            })
            .collect();
    }
    Ok((0..n)
        .map(|i| Individual::new(columns[0][i], columns[1][i], columns[2][i]))
        .collect())
}

/// Best of `k` distinct, uniformly drawn individuals. Ties go to the lowest
/// population index.
pub fn tournament_select<R: Rng + ?Sized>(
    population: &[Individual],
    scores: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<usize, GaError> {
    if k == 0 || k > population.len() || scores.len() != population.len() {
        return Err(GaError::Tournament { k, population: population.len() });
    }
    let winner = sample(rng, population.len(), k)
        .into_iter()
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
        .expect("k >= 1");
    Ok(winner)
}

/// `alpha * p1 + (1 - alpha) * p2`, applied to each of `r`, `x0`, `epsilon`.
pub fn blend_crossover(p1: &Individual, p2: &Individual, alpha: f64) -> Individual {
    let mix = |a: f64, b: f64| alpha * a + (1.0 - alpha) * b;
    Individual::new(mix(p1.r, p2.r), mix(p1.x0, p2.x0), mix(p1.epsilon, p2.epsilon))
}

/// Draws the blend factor for one crossover.
pub fn draw_alpha<R: Rng + ?Sized>(factor: BlendFactor, rng: &mut R) -> f64 {
    match factor {
        BlendFactor::Fixed(a) => a,
        BlendFactor::Uniform { lo, hi } if hi > lo => rng.random_range(lo..=hi),
        BlendFactor::Uniform { lo, .. } => lo,
    }
}

/// Per parameter, with probability `mutation_prob`, adds zero-mean Gaussian
/// noise of that parameter's scale, then clamps into the search box.
pub fn mutate<R: Rng + ?Sized>(child: &Individual, config: &GaConfig, rng: &mut R) -> Individual {
    let mut genes = child.genes();
    for (g, &scale) in genes.iter_mut().zip(&config.mutation_scale) {
        if rng.random::<f64>() < config.mutation_prob && scale > 0.0 {
            let noise = Normal::new(0.0, scale).expect("positive scale");
            *g += noise.sample(rng);
        }
    }
    config.search_box.clamp(Individual::from_genes(genes))
}

impl SearchBox {
    pub fn clamp(&self, ind: Individual) -> Individual {
        let b = self.bounds();
        let g = ind.genes();
        Individual::from_genes([
            g[0].clamp(b[0].0, b[0].1),
            g[1].clamp(b[1].0, b[1].1),
            g[2].clamp(b[2].0, b[2].1),
        ])
    }
}
