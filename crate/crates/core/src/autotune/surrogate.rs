use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::space::{Point, SearchSpace, TuneConfig};
use super::AutotuneError;

/// Random proposals before the surrogate takes over.
pub const SEED_POINTS: usize = 5;
pub const CANDIDATES: usize = 512;
pub const OBSERVATION_NOISE: f64 = 1e-3;
const LENGTH_SCALES: [f64; 7] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2];
const ENUMERATE_LIMIT: u128 = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Seed,
    Refine,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurrogateState {
    /// Distinct points with their objective (higher is better).
    pub observations: Vec<(Point, f64)>,
    /// Length scale chosen at the last fit.
    pub length_scale: f64,
    pub noise: f64,
    /// Best objective after each observation.
    pub best_history: Vec<f64>,
}

impl SurrogateState {
    pub fn new() -> Self {
        Self {
            noise: OBSERVATION_NOISE,
            length_scale: LENGTH_SCALES[3],
            ..Self::default()
        }
    }

    pub fn phase(&self) -> Phase {
        if self.observations.len() < SEED_POINTS {
            Phase::Seed
        } else {
            Phase::Refine
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.observations.iter().any(|(q, _)| q == p)
    }

    /// Records `value` at `p`. A repeated point keeps the newer value.
    pub fn observe(&mut self, p: Point, value: f64) {
        match self.observations.iter_mut().find(|(q, _)| *q == p) {
            Some(slot) => slot.1 = value,
            None => self.observations.push((p, value)),
        }
        let best = self
            .observations
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let prev = self
            .best_history
            .last()
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        self.best_history.push(best.max(prev));
    }

    pub fn best(&self) -> Option<(&Point, f64)> {
        self.observations
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, v)| (p, *v))
    }
}

/// Gaussian process with an isotropic squared-exponential kernel on
/// normalized inputs and standardized targets.
pub struct Gp {
    xs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    length_scale: f64,
    y_mean: f64,
    y_std: f64,
}

/// Cholesky factor, `K^-1 y` and log marginal likelihood.
type Factorization = (Cholesky<f64, Dyn>, DVector<f64>, f64);

fn kernel(a: &[f64], b: &[f64], ls: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * ls * ls)).exp()
}

impl Gp {
    fn fit_with(xs: &[Vec<f64>], y: &DVector<f64>, ls: f64, noise: f64) -> Option<Factorization> {
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            kernel(&xs[i], &xs[j], ls) + if i == j { noise } else { 0.0 }
        });
        let chol = k.cholesky()?;
        let alpha = chol.solve(y);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det;
        Some((chol, alpha, lml))
    }

    /// Fits to `(x, y)`, picking the length scale with the best marginal
    /// likelihood from a fixed grid.
    pub fn fit(xs: Vec<Vec<f64>>, ys: &[f64], noise: f64) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n;
        let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(ys.len(), ys.iter().map(|v| (v - y_mean) / y_std));
        let mut best: Option<(f64, Factorization)> = None;
        for ls in LENGTH_SCALES {
            if let Some(f) = Self::fit_with(&xs, &y, ls, noise) {
                if best.as_ref().is_none_or(|b| f.2 > b.1 .2) {
                    best = Some((ls, f));
                }
            }
        }
        let (length_scale, (chol, alpha, _)) = best?;
        Some(Self {
            xs,
            chol,
            alpha,
            length_scale,
            y_mean,
            y_std,
        })
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Posterior mean and standard deviation, in objective units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| kernel(xi, x, self.length_scale)),
        );
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .unwrap_or_else(|| DVector::zeros(ks.len()));
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (self.y_mean + mean * self.y_std, var.sqrt() * self.y_std)
    }
}

/// Expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, std: f64, best: f64) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    if std <= 0.0 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / std;
    (mean - best) * std_normal.cdf(z) + std * std_normal.pdf(z)
}

/// Up to `limit` distinct feasible points not yet observed.
fn candidates(
    state: &SurrogateState,
    space: &SearchSpace,
    rng: &mut impl Rng,
    limit: usize,
) -> Vec<Point> {
    let usable = |p: &Point| !state.contains(p) && space.feasible(p);
    if space.size() <= ENUMERATE_LIMIT {
        let mut all: Vec<Point> = space.enumerate().into_iter().filter(usable).collect();
        all.shuffle(rng);
        all.truncate(limit);
        return all;
    }
    let levels = space.levels();
    let mut out: Vec<Point> = Vec::with_capacity(limit);
    for _ in 0..limit * 20 {
        if out.len() == limit {
            break;
        }
        let p: Point = levels.iter().map(|&l| rng.random_range(0..l)).collect();
        if usable(&p) && !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Next point to evaluate: uniform over unobserved points during the seed
/// phase, then the candidate with the highest expected improvement.
pub fn propose_config(
    state: &mut SurrogateState,
    space: &SearchSpace,
    rng: &mut impl Rng,
) -> Result<Point, AutotuneError> {
    space.validate()?;
    let pool = candidates(state, space, rng, CANDIDATES);
    if pool.is_empty() {
        return Err(AutotuneError::SpaceExhausted);
    }
    if state.phase() == Phase::Seed {
        return Ok(pool.choose(rng).expect("non-empty").clone());
    }
    let xs: Vec<Vec<f64>> = state
        .observations
        .iter()
        .map(|(p, _)| space.normalize(p))
        .collect();
    let ys: Vec<f64> = state.observations.iter().map(|(_, v)| *v).collect();
    let Some(gp) = Gp::fit(xs, &ys, state.noise) else {
        return Ok(pool.choose(rng).expect("non-empty").clone());
    };
    state.length_scale = gp.length_scale();
    let best = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scored = pool.into_iter().map(|p| {
        let (m, s) = gp.predict(&space.normalize(&p));
        (expected_improvement(m, s, best), p)
    });
    Ok(scored
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty")
        .1)
}

/// Seeded proposal loop over a search space.
pub struct Optimizer {
    pub space: SearchSpace,
    pub state: SurrogateState,
    rng: ChaCha8Rng,
}

impl Optimizer {
    pub fn new(space: SearchSpace, seed: u64) -> Self {
        Self {
            space,
            state: SurrogateState::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn propose(&mut self) -> Result<Point, AutotuneError> {
        propose_config(&mut self.state, &self.space, &mut self.rng)
    }

    pub fn observe(&mut self, p: Point, value: f64) {
        self.state.observe(p, value);
    }

    pub fn best_config(&self) -> Option<TuneConfig> {
        self.state.best().map(|(p, v)| {
            let mut c = self.space.decode(p);
            c.objective = Some(v);
            c
        })
    }
}

/// Runs `iterations` proposals of `objective` and returns the best config.
pub fn maximize<F>(
    space: SearchSpace,
    seed: u64,
    iterations: usize,
    mut objective: F,
) -> Result<(TuneConfig, SurrogateState), AutotuneError>
where
    F: FnMut(&TuneConfig) -> Result<f64, AutotuneError>,
{
    let mut opt = Optimizer::new(space, seed);
    for _ in 0..iterations {
        let p = match opt.propose() {
            Ok(p) => p,
            Err(AutotuneError::SpaceExhausted) if !opt.state.observations.is_empty() => break,
            Err(e) => return Err(e),
        };
        let v = objective(&opt.space.decode(&p))?;
        opt.observe(p, v);
    }
    let best = opt.best_config().ok_or(AutotuneError::SpaceExhausted)?;
    Ok((best, opt.state))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gp_interpolates_observations() {
        let xs = vec![vec![0.0], vec![0.5], vec![1.0]];
        let ys = [1.0, 3.0, 2.0];
        let gp = Gp::fit(xs, &ys, 1e-6).unwrap();
        for (x, y) in [(0.0, 1.0), (0.5, 3.0), (1.0, 2.0)] {
            let (m, s) = gp.predict(&[x]);
            assert!((m - y).abs() < 1e-2, "{x}: {m}");
            assert!(s < 0.05);
        }
        let (_, far) = gp.predict(&[5.0]);
        assert!(far > 0.5);
    }

    #[test]
    fn ei_properties() {
        assert!(expected_improvement(1.0, 1e-9, 0.0) > 0.99);
        assert_eq!(expected_improvement(-1.0, 0.0, 0.0), 0.0);
        assert!(expected_improvement(0.0, 1.0, 0.0) > expected_improvement(0.0, 0.5, 0.0));
    }

    #[test]
    fn history_is_monotone() {
        let mut s = SurrogateState::new();
        for (i, v) in [3.0, 1.0, 5.0, 2.0].into_iter().enumerate() {
            s.observe(vec![i], v);
        }
        assert_eq!(s.best_history, vec![3.0, 3.0, 5.0, 5.0]);
        assert_eq!(s.best().unwrap().1, 5.0);
    }
}
