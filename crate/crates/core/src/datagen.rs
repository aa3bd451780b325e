//! Synthetic convection–diffusion benchmark.
//!
//! Solves `u_t = a(x,y) u_x + b(x,y) u_y + c(x,y) ∇²u` on the periodic square
//! `[0, 2π)²` with second-order central differences and classical RK4, starting
//! from random truncated Fourier series. Site time series are then read off a
//! fixed random subset of grid nodes.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SequenceDataset, SplitCounts};
use crate::error::{ensure, Error, Result};
use crate::interpolation::SiteSet;

/// Convection and diffusion coefficients `(a, b, c)` at `(x, y)`.
pub fn coefficient_fields(x: f64, y: f64) -> (f64, f64, f64) {
    let a = 0.5 * (y.cos() + x * (2.0 * PI - x) * x.sin()) + 0.6;
    let b = 2.0 * (y.cos() + x.sin()) + 0.8;
    let r = ((x - PI).powi(2) + (y - PI).powi(2)).sqrt();
    let c = 0.5 * (1.0 - r / (2f64.sqrt() * PI));
    (a, b, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvDiffConfig {
    /// Grid nodes per axis.
    pub grid_size: usize,
    /// Spacing between stored snapshots.
    pub dt_out: f64,
    pub t_end: f64,
    pub n_sites: usize,
    pub n_sequences: usize,
    pub split: SplitCounts,
    /// RK4 steps between consecutive snapshots.
    pub substeps_per_output: usize,
    /// Variance of the Fourier coefficients.
    pub coefficient_variance: f64,
    /// Largest `|k|`, `|l|` in the initial-condition sum.
    pub max_mode: i32,
    pub seed: u64,
}

impl Default for ConvDiffConfig {
    fn default() -> Self {
        Self {
            grid_size: 50,
            dt_out: 0.01,
            t_end: 0.2,
            n_sites: 250,
            n_sequences: 1000,
            split: SplitCounts::new(700, 150, 150),
            substeps_per_output: 10,
            coefficient_variance: 0.02,
            max_mode: 9,
            seed: 0,
        }
    }
}

impl ConvDiffConfig {
    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.grid_size as f64
    }

    pub fn internal_dt(&self) -> f64 {
        self.dt_out / self.substeps_per_output as f64
    }

    /// Number of output intervals, `t_end / dt_out`.
    pub fn n_intervals(&self) -> usize {
        (self.t_end / self.dt_out).round() as usize
    }

    /// Observations kept per sequence: the first `t_end / dt_out` snapshots.
    pub fn sequence_length(&self) -> usize {
        self.n_intervals()
    }

    /// `h² / (4 max c)` over the grid nodes.
    pub fn stability_bound(&self) -> f64 {
        let h = self.spacing();
        let mut max_c = 0.0f64;
        for i in 0..self.grid_size {
            for j in 0..self.grid_size {
                max_c = max_c.max(coefficient_fields(i as f64 * h, j as f64 * h).2);
            }
        }
        if max_c > 0.0 {
            h * h / (4.0 * max_c)
        } else {
            f64::INFINITY
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.grid_size >= 3, Config, "grid must have at least 3 nodes per axis");
        ensure!(self.dt_out > 0.0 && self.t_end > 0.0, Config, "time spans must be positive");
        ensure!(self.substeps_per_output >= 1, Config, "substeps_per_output must be at least 1");
        let ratio = self.t_end / self.dt_out;
        ensure!(
            (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0,
            Config,
            "t_end / dt_out = {ratio} is not a positive integer"
        );
        ensure!(
            self.split.train > 0 && self.split.validation > 0 && self.split.test > 0,
            Config,
            "every split needs at least one sequence"
        );
        ensure!(
            self.split.total() == self.n_sequences,
            Config,
            "split counts sum to {}, expected {}",
            self.split.total(),
            self.n_sequences
        );
        ensure!(self.n_sites >= 1, Config, "need at least one site");
        ensure!(
            self.n_sites <= self.grid_size * self.grid_size,
            Config,
            "{} sites requested but the grid has only {} nodes",
            self.n_sites,
            self.grid_size * self.grid_size
        );
        ensure!(
            self.coefficient_variance >= 0.0 && self.max_mode >= 0,
            Config,
            "initial-condition parameters must be nonnegative"
        );
        let bound = self.stability_bound();
        ensure!(
            self.internal_dt() < bound,
            Config,
            "internal step {} violates the diffusion stability bound {bound}",
            self.internal_dt()
        );
        Ok(())
    }
}

/// Coefficients of `Σ_{|k|,|l| ≤ K} λ_kl cos(kx + ly) + ζ_kl sin(kx + ly)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierInitialCondition {
    max_mode: i32,
    lambda: Vec<f64>,
    zeta: Vec<f64>,
}

impl FourierInitialCondition {
    pub fn zeros(max_mode: i32) -> Self {
        let m = (2 * max_mode + 1) as usize;
        Self {
            max_mode,
            lambda: vec![0.0; m * m],
            zeta: vec![0.0; m * m],
        }
    }

    /// Draws every coefficient i.i.d. from `N(0, variance)`.
    pub fn sample<R: rand::Rng>(rng: &mut R, max_mode: i32, variance: f64) -> Self {
        let mut ic = Self::zeros(max_mode);
        let normal = Normal::new(0.0, variance.sqrt()).expect("variance is nonnegative");
        for v in ic.lambda.iter_mut() {
            *v = normal.sample(rng);
        }
        for v in ic.zeta.iter_mut() {
            *v = normal.sample(rng);
        }
        ic
    }

    fn slot(&self, k: i32, l: i32) -> usize {
        let m = 2 * self.max_mode + 1;
        ((k + self.max_mode) * m + (l + self.max_mode)) as usize
    }

    pub fn max_mode(&self) -> i32 {
        self.max_mode
    }

    pub fn set(&mut self, k: i32, l: i32, lambda: f64, zeta: f64) {
        let s = self.slot(k, l);
        self.lambda[s] = lambda;
        self.zeta[s] = zeta;
    }

    pub fn coefficients(&self, k: i32, l: i32) -> (f64, f64) {
        let s = self.slot(k, l);
        (self.lambda[s], self.zeta[s])
    }

    pub fn lambda_sum(&self) -> f64 {
        self.lambda.iter().sum()
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut out = 0.0;
        for k in -self.max_mode..=self.max_mode {
            for l in -self.max_mode..=self.max_mode {
                let (lam, zet) = self.coefficients(k, l);
                let arg = k as f64 * x + l as f64 * y;
                out += lam * arg.cos() + zet * arg.sin();
            }
        }
        out
    }

    /// Field on the `grid_size × grid_size` node grid, index `i * grid_size + j`
    /// for the node `(i h, j h)`.
    pub fn eval_grid(&self, grid_size: usize) -> Vec<f64> {
        let h = 2.0 * PI / grid_size as f64;
        let modes: Vec<i32> = (-self.max_mode..=self.max_mode).collect();
        // cos/sin of k·x_i for every mode and node index.
        let table = |i: usize| -> (Vec<f64>, Vec<f64>) {
            let x = i as f64 * h;
            (
                modes.iter().map(|&k| (k as f64 * x).cos()).collect(),
                modes.iter().map(|&k| (k as f64 * x).sin()).collect(),
            )
        };
        let tables: Vec<(Vec<f64>, Vec<f64>)> = (0..grid_size).map(table).collect();
        let m = modes.len();
        let mut field = vec![0.0; grid_size * grid_size];
        for i in 0..grid_size {
            let (cx, sx) = &tables[i];
            for j in 0..grid_size {
                let (cy, sy) = &tables[j];
                let mut acc = 0.0;
                for a in 0..m {
                    for b in 0..m {
                        let cos = cx[a] * cy[b] - sx[a] * sy[b];
                        let sin = sx[a] * cy[b] + cx[a] * sy[b];
                        acc += self.lambda[a * m + b] * cos + self.zeta[a * m + b] * sin;
                    }
                }
                field[i * grid_size + j] = acc;
            }
        }
        field
    }
}

/// Draws a random initial condition and evaluates it on the grid.
pub fn sample_initial_condition<R: rand::Rng>(rng: &mut R, config: &ConvDiffConfig) -> Vec<f64> {
    FourierInitialCondition::sample(rng, config.max_mode, config.coefficient_variance).eval_grid(config.grid_size)
}

/// Periodic method-of-lines right-hand side.
struct ConvDiffOperator {
    n: usize,
    inv_2h: f64,
    inv_h2: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl ConvDiffOperator {
    fn new(n: usize) -> Self {
        let h = 2.0 * PI / n as f64;
        let mut a = vec![0.0; n * n];
        let mut b = vec![0.0; n * n];
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (ai, bi, ci) = coefficient_fields(i as f64 * h, j as f64 * h);
                a[i * n + j] = ai;
                b[i * n + j] = bi;
                c[i * n + j] = ci;
            }
        }
        Self {
            n,
            inv_2h: 0.5 / h,
            inv_h2: 1.0 / (h * h),
            a,
            b,
            c,
        }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let ip = (i + 1) % n;
            let im = (i + n - 1) % n;
            for j in 0..n {
                let jp = (j + 1) % n;
                let jm = (j + n - 1) % n;
                let k = i * n + j;
                let (e, w) = (u[ip * n + j], u[im * n + j]);
                let (no, so) = (u[i * n + jp], u[i * n + jm]);
                let ux = (e - w) * self.inv_2h;
                let uy = (no - so) * self.inv_2h;
                let lap = (e + w + no + so - 4.0 * u[k]) * self.inv_h2;
                out[k] = self.a[k] * ux + self.b[k] * uy + self.c[k] * lap;
            }
        }
    }

    fn rk4_step(&self, u: &mut [f64], dt: f64, scratch: &mut [Vec<f64>; 5]) {
        let [k1, k2, k3, k4, tmp] = scratch;
        self.apply(u, k1);
        for ((t, u), k) in tmp.iter_mut().zip(u.iter()).zip(k1.iter()) {
            *t = u + 0.5 * dt * k;
        }
        self.apply(tmp, k2);
        for ((t, u), k) in tmp.iter_mut().zip(u.iter()).zip(k2.iter()) {
            *t = u + 0.5 * dt * k;
        }
        self.apply(tmp, k3);
        for ((t, u), k) in tmp.iter_mut().zip(u.iter()).zip(k3.iter()) {
            *t = u + dt * k;
        }
        self.apply(tmp, k4);
        for (i, v) in u.iter_mut().enumerate() {
            *v += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Integrates from `initial` and returns the snapshot at every output time,
/// `t = 0, dt_out, …, t_end`.
pub fn simulate_convdiff(config: &ConvDiffConfig, initial: &[f64]) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let n = config.grid_size;
    ensure!(
        initial.len() == n * n,
        Argument,
        "initial field has {} values, grid has {}",
        initial.len(),
        n * n
    );
    let op = ConvDiffOperator::new(n);
    let dt = config.internal_dt();
    let mut u = initial.to_vec();
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n * n]);
    let mut out = Vec::with_capacity(config.n_intervals() + 1);
    out.push(u.clone());
    for step in 1..=config.n_intervals() {
        for _ in 0..config.substeps_per_output {
            op.rk4_step(&mut u, dt, &mut scratch);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                time: step as f64 * config.dt_out,
            });
        }
        out.push(u.clone());
    }
    Ok(out)
}

/// Grid indices of the sampled sites and their coordinates.
pub fn sample_sites(config: &ConvDiffConfig) -> Result<(Vec<usize>, SiteSet)> {
    config.validate()?;
    let n = config.grid_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cells = sample(&mut rng, n * n, config.n_sites).into_vec();
    let h = config.spacing();
    let points = cells
        .iter()
        .map(|&k| vec![(k / n) as f64 * h, (k % n) as f64 * h])
        .collect();
    Ok((cells, SiteSet::new(points)?))
}

/// Generator for sequence `index`: stream `index + 1` of the master seed.
pub fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn generate_dataset(config: &ConvDiffConfig) -> Result<SequenceDataset> {
    let (cells, sites) = sample_sites(config)?;
    let len = config.sequence_length();
    let per_sequence: Vec<Vec<f64>> = (0..config.n_sequences)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let mut rng = sequence_rng(config.seed, s);
            let initial = sample_initial_condition(&mut rng, config);
            let snapshots = simulate_convdiff(config, &initial)?;
            let mut values = Vec::with_capacity(len * cells.len());
            for snap in snapshots.iter().take(len) {
                values.extend(cells.iter().map(|&k| snap[k]));
            }
            Ok(values)
        })
        .collect::<Result<_>>()?;
    let values = per_sequence.into_iter().flatten().collect();
    SequenceDataset::new(sites, len, values, config.split.assignment())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use approx::assert_relative_eq;

    fn small() -> ConvDiffConfig {
        ConvDiffConfig {
            grid_size: 8,
            n_sites: 16,
            n_sequences: 20,
            split: SplitCounts::new(14, 3, 3),
            ..Default::default()
        }
    }

    #[test]
    fn coefficient_values_at_center() {
        let (a, b, c) = coefficient_fields(PI, PI);
        assert_relative_eq!(a, 0.1, epsilon = 1e-12);
        assert_relative_eq!(b, -1.2, epsilon = 1e-12);
        assert_eq!(c, 0.5);
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ConvDiffConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_intervals(), 20);
        assert_eq!(cfg.sequence_length(), 20);
        assert!(cfg.internal_dt() < cfg.stability_bound());
        assert_relative_eq!(cfg.stability_bound(), cfg.spacing().powi(2) / 2.0, max_relative = 0.05);
    }

    #[test]
    fn config_errors() {
        let mut cfg = small();
        cfg.split = SplitCounts::new(10, 3, 3);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.n_sites = 65;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.t_end = 0.205;
        assert!(cfg.validate().is_err());
        let mut cfg = ConvDiffConfig::default();
        cfg.substeps_per_output = 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn initial_condition_special_cases() {
        let ic = FourierInitialCondition::zeros(9);
        assert!(ic.eval_grid(10).iter().all(|v| *v == 0.0));

        let mut ic = FourierInitialCondition::zeros(9);
        ic.set(0, 0, 1.0, 0.0);
        assert!(ic.eval_grid(10).iter().all(|v| (*v - 1.0).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ic = FourierInitialCondition::sample(&mut rng, 9, 0.02);
        let grid = ic.eval_grid(12);
        assert_relative_eq!(grid[0], ic.lambda_sum(), epsilon = 1e-12);
        assert_relative_eq!(ic.eval(0.7, 2.1), ic.eval(0.7 + 2.0 * PI, 2.1 - 2.0 * PI), epsilon = 1e-10);
        let h = 2.0 * PI / 12.0;
        assert_relative_eq!(grid[5 * 12 + 7], ic.eval(5.0 * h, 7.0 * h), epsilon = 1e-12);
    }

    #[test]
    fn coefficients_have_requested_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut all = Vec::new();
        for _ in 0..20 {
            let ic = FourierInitialCondition::sample(&mut rng, 9, 0.02);
            for k in -9..=9 {
                for l in -9..=9 {
                    let (a, b) = ic.coefficients(k, l);
                    all.push(a);
                    all.push(b);
                }
            }
        }
        let var = all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64;
        assert!((var - 0.02).abs() < 0.002, "{var}");
    }

    #[test]
    fn zero_and_constant_fields_are_fixed_points() {
        let cfg = small();
        let zero = simulate_convdiff(&cfg, &vec![0.0; 64]).unwrap();
        assert!(zero.iter().flatten().all(|v| *v == 0.0));
        let constant = simulate_convdiff(&cfg, &vec![1.7; 64]).unwrap();
        assert_eq!(constant.len(), 21);
        assert!(constant.iter().flatten().all(|v| *v == 1.7));
    }

    #[test]
    fn stencil_wraps_around() {
        let cfg = ConvDiffConfig {
            grid_size: 10,
            n_sites: 4,
            ..small()
        };
        let mut u = vec![0.0; 100];
        u[0] = 1.0;
        let snaps = simulate_convdiff(&cfg, &u).unwrap();
        // Mass reaches the neighbours across both periodic seams.
        assert!(snaps[1][9 * 10].abs() > 0.0);
        assert!(snaps[1][9].abs() > 0.0);
    }

    #[test]
    fn halving_the_substep_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ConvDiffConfig {
            grid_size: 16,
            n_sites: 4,
            ..small()
        };
        let initial = sample_initial_condition(&mut rng, &cfg);
        let run = |s: usize| {
            simulate_convdiff(&ConvDiffConfig { substeps_per_output: s, ..cfg.clone() }, &initial).unwrap()
        };
        let (a, b, c) = (run(2), run(4), run(8));
        let diff = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            x.iter().flatten().zip(y.iter().flatten()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
        };
        let (d1, d2) = (diff(&a, &b), diff(&b, &c));
        assert!(d2 < d1, "{d1} {d2}");
        assert!(d1 / d2 > 2.0);
    }

    #[test]
    fn small_dataset_shapes_and_determinism() {
        let cfg = small();
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.n_sequences(), 20);
        assert_eq!(ds.seq_len(), 20);
        assert_eq!(ds.n_sites(), 16);
        assert_eq!(ds.split_counts(), SplitCounts::new(14, 3, 3));
        assert_eq!(ds.indices(Split::Train), (0..14).collect::<Vec<_>>());
        let again = generate_dataset(&cfg).unwrap();
        assert!(ds.values().iter().zip(again.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let other = generate_dataset(&ConvDiffConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(ds.values(), other.values());
    }

    #[test]
    fn sites_are_distinct_grid_nodes() {
        let cfg = small();
        let (cells, sites) = sample_sites(&cfg).unwrap();
        let mut sorted = cells.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        let h = cfg.spacing();
        for (k, &cell) in cells.iter().enumerate() {
            assert_eq!(sites.point(k), &[(cell / 8) as f64 * h, (cell % 8) as f64 * h]);
        }
    }
}
