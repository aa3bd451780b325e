//! Site geometry, the RBF interpolation matrix and its solves, interpolant
//! evaluation, and leave-one-out kernel selection.

use std::io::Write;

use nalgebra::{DMatrix, DVector, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{SequenceDataset, Split};
use crate::error::{ensure, Error, Result};
use crate::kernels::{squared_distance, RadialKernel};

/// Condition estimates above this are rejected.
pub const CONDITION_LIMIT: f64 = 1e14;
/// Condition estimates above this are logged.
pub const CONDITION_WARN: f64 = 1e10;

/// `n` distinct points in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSet {
    n: usize,
    dim: usize,
    coords: Vec<f64>,
    distances: DMatrix<f64>,
}

impl SiteSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(!points.is_empty(), Validation, "site set is empty");
        let dim = points[0].len();
        ensure!(dim > 0, Validation, "sites must have at least one coordinate");
        ensure!(
            points.iter().all(|p| p.len() == dim),
            Validation,
            "sites have inconsistent dimensions"
        );
        let coords: Vec<f64> = points.into_iter().flatten().collect();
        Self::from_flat(dim, coords)
    }

    /// Builds from row-major coordinates.
    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        ensure!(dim > 0 && coords.len() % dim == 0, Validation, "coordinate array is not n x {dim}");
        ensure!(
            coords.iter().all(|c| c.is_finite()),
            Validation,
            "site coordinates must be finite"
        );
        let n = coords.len() / dim;
        ensure!(n > 0, Validation, "site set is empty");
        let mut distances = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let r = squared_distance(&coords[i * dim..(i + 1) * dim], &coords[j * dim..(j + 1) * dim])
                    .sqrt();
                if r == 0.0 {
                    return Err(Error::Validation(format!("sites {i} and {j} coincide")));
                }
                distances[(i, j)] = r;
                distances[(j, i)] = r;
            }
        }
        Ok(Self {
            n,
            dim,
            coords,
            distances,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-major `n × d` coordinates.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn distances(&self) -> &DMatrix<f64> {
        &self.distances
    }

    pub fn min_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                m = m.min(self.distances[(i, j)]);
            }
        }
        m
    }

    /// Sites with the listed indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<SiteSet> {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            ensure!(i < self.n, Argument, "site index {i} out of range");
            coords.extend_from_slice(self.point(i));
        }
        SiteSet::from_flat(self.dim, coords)
    }

    /// SHA-256 over the dimension and the little-endian coordinates.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update((self.n as u64).to_le_bytes());
        for c in &self.coords {
            h.update(c.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn kernel_matrix(kernel: &RadialKernel, sites: &SiteSet) -> DMatrix<f64> {
    let d = sites.distances();
    DMatrix::from_fn(sites.len(), sites.len(), |i, j| {
        let r = d[(i, j)];
        kernel.value_sq(r * r)
    })
}

/// 1-norm condition number computed from an explicit inverse.
fn condition_1norm(a: &DMatrix<f64>, inv: &DMatrix<f64>) -> f64 {
    let norm1 = |m: &DMatrix<f64>| {
        m.column_iter()
            .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max)
    };
    norm1(a) * norm1(inv)
}

/// `Φ` for a kernel on a site set, with its factorization and scaled inverse.
#[derive(Debug, Clone)]
pub struct InterpolationSystem {
    kernel: RadialKernel,
    sites: SiteSet,
    phi: DMatrix<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    inverse: DMatrix<f64>,
    inverse_max_abs: f64,
    scaled_inverse: DMatrix<f64>,
    condition: f64,
}

impl InterpolationSystem {
    pub fn build(kernel: RadialKernel, sites: &SiteSet) -> Result<Self> {
        let phi = kernel_matrix(&kernel, sites);
        let lu = phi.clone().lu();
        let inverse = lu
            .try_inverse()
            .ok_or(Error::Conditioning { estimate: f64::INFINITY })?;
        let condition = condition_1norm(&phi, &inverse);
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(Error::Conditioning { estimate: condition });
        }
        if condition > CONDITION_WARN {
            log::warn!("interpolation matrix for {kernel} is poorly conditioned ({condition:.3e})");
        }
        let inverse_max_abs = inverse.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scaled_inverse = &inverse / inverse_max_abs;
        Ok(Self {
            kernel,
            sites: sites.clone(),
            phi,
            lu,
            inverse,
            inverse_max_abs,
            scaled_inverse,
            condition,
        })
    }

    pub fn kernel(&self) -> &RadialKernel {
        &self.kernel
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Unscaled `Φ⁻¹`.
    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `Φ⁻¹ / max|Φ⁻¹|`; every entry lies in `[-1, 1]` and the largest has magnitude 1.
    pub fn scaled_inverse(&self) -> &DMatrix<f64> {
        &self.scaled_inverse
    }

    /// The factor dividing `Φ⁻¹` in [`Self::scaled_inverse`].
    pub fn inverse_scale(&self) -> f64 {
        self.inverse_max_abs
    }

    /// 1-norm condition number of `Φ`.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Solves `Φ x = b` with the stored factorization.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        ensure!(b.len() == self.len(), Argument, "right-hand side has length {}, expected {}", b.len(), self.len());
        self.lu
            .solve(b)
            .ok_or(Error::Conditioning { estimate: self.condition })
    }

    /// `argmin_c ‖Φc − u‖² + λ‖c‖²`. `λ = 0` is the plain interpolation solve.
    pub fn fit_coefficients(&self, values: &[f64], lambda: f64) -> Result<DVector<f64>> {
        ensure!(
            values.len() == self.len(),
            Argument,
            "got {} values for {} sites",
            values.len(),
            self.len()
        );
        ensure!(values.iter().all(|v| v.is_finite()), Argument, "values must be finite");
        ensure!(lambda >= 0.0 && lambda.is_finite(), Argument, "lambda must be nonnegative, got {lambda}");
        let u = DVector::from_column_slice(values);
        if lambda == 0.0 {
            return self.solve(&u);
        }
        let normal = self.normal_matrix(lambda);
        let rhs = self.phi.tr_mul(&u);
        let chol = normal
            .cholesky()
            .ok_or(Error::Conditioning { estimate: self.condition })?;
        Ok(chol.solve(&rhs))
    }

    fn normal_matrix(&self, lambda: f64) -> DMatrix<f64> {
        let mut normal = self.phi.tr_mul(&self.phi);
        for i in 0..self.len() {
            normal[(i, i)] += lambda;
        }
        normal
    }

    /// Linear map `u ↦ c` of [`Self::fit_coefficients`] as an explicit matrix,
    /// `(ΦᵀΦ + λI)⁻¹Φᵀ`.
    pub fn fit_operator(&self, lambda: f64) -> Result<DMatrix<f64>> {
        ensure!(lambda >= 0.0 && lambda.is_finite(), Argument, "lambda must be nonnegative, got {lambda}");
        if lambda == 0.0 {
            return Ok(self.inverse.clone());
        }
        let chol = self
            .normal_matrix(lambda)
            .cholesky()
            .ok_or(Error::Conditioning { estimate: self.condition })?;
        Ok(chol.solve(&self.phi.transpose()))
    }
}

pub fn build_phi(kernel: RadialKernel, sites: &SiteSet) -> Result<InterpolationSystem> {
    InterpolationSystem::build(kernel, sites)
}

pub fn fit_coefficients(system: &InterpolationSystem, values: &[f64], lambda: f64) -> Result<DVector<f64>> {
    system.fit_coefficients(values, lambda)
}

pub fn scaled_inverse(system: &InterpolationSystem) -> DMatrix<f64> {
    system.scaled_inverse().clone()
}

/// `Σ_j c_j φ(‖q − x_j‖)` for each query point `q`.
pub fn evaluate_interpolant<Q: AsRef<[f64]>>(
    kernel: &RadialKernel,
    sites: &SiteSet,
    coeffs: &[f64],
    queries: &[Q],
) -> Result<Vec<f64>> {
    ensure!(
        coeffs.len() == sites.len(),
        Argument,
        "got {} coefficients for {} sites",
        coeffs.len(),
        sites.len()
    );
    queries
        .iter()
        .map(|q| {
            let q = q.as_ref();
            ensure!(
                q.len() == sites.dim(),
                Argument,
                "query has dimension {}, sites have {}",
                q.len(),
                sites.dim()
            );
            Ok((0..sites.len())
                .map(|j| coeffs[j] * kernel.value_sq(squared_distance(q, sites.point(j))))
                .sum())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvScore {
    pub kernel: RadialKernel,
    /// Mean absolute leave-one-out error; `+∞` when the candidate's system is unusable.
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvReport {
    pub best: RadialKernel,
    pub best_index: usize,
    pub scores: Vec<LoocvScore>,
}

impl LoocvReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["candidate", "family", "epsilon", "mean_abs_error"])?;
        for (i, s) in self.scores.iter().enumerate() {
            w.write_record([
                i.to_string(),
                s.kernel.family().name().to_string(),
                s.kernel.epsilon().to_string(),
                s.mean_abs_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Picks the kernel with the lowest leave-one-out error over the training split.
///
/// Each training snapshot drops one site chosen uniformly at random (the same
/// draws for every candidate) and predicts it from an exact interpolant on the
/// remaining sites. The held-out residual is obtained from the full system via
/// `u_k − s⁽ᵏ⁾(x_k) = (Φ⁻¹u)_k / (Φ⁻¹)_kk`, which equals the reduced-system
/// prediction error without refactoring per site. Ties go to the earlier
/// candidate.
pub fn loocv_select_kernel(
    candidates: &[RadialKernel],
    dataset: &SequenceDataset,
    seed: u64,
) -> Result<LoocvReport> {
    ensure!(!candidates.is_empty(), Argument, "no kernel candidates given");
    let n = dataset.n_sites();
    if n < 2 {
        return Err(Error::Domain("leave-one-out needs at least two sites".into()));
    }
    let train = dataset.indices(Split::Train);
    ensure!(!train.is_empty(), Argument, "training split is empty");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut snapshots: Vec<(usize, usize, usize)> = Vec::new();
    for &s in &train {
        for t in 0..dataset.seq_len() {
            snapshots.push((s, t, rng.random_range(0..n)));
        }
    }

    let mut scores = Vec::with_capacity(candidates.len());
    for kernel in candidates {
        let score = match InterpolationSystem::build(*kernel, dataset.sites()) {
            Ok(system) => {
                let inv = system.inverse();
                let mut total = 0.0;
                for &(s, t, k) in &snapshots {
                    let u = dataset.frame(s, t);
                    let ck: f64 = (0..n).map(|j| inv[(k, j)] * u[j]).sum();
                    total += (ck / inv[(k, k)]).abs();
                }
                let mean = total / snapshots.len() as f64;
                if mean.is_finite() {
                    mean
                } else {
                    f64::INFINITY
                }
            }
            Err(e) => {
                log::info!("kernel candidate {kernel} rejected: {e}");
                f64::INFINITY
            }
        };
        scores.push(LoocvScore {
            kernel: *kernel,
            mean_abs_error: score,
        });
    }

    let mut best_index = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.mean_abs_error < scores[best_index].mean_abs_error {
            best_index = i;
        }
    }
    Ok(LoocvReport {
        best: candidates[best_index],
        best_index,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_sites(n: usize, d: usize, seed: u64) -> SiteSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SiteSet::new(
            (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect(),
        )
        .unwrap()
    }

    fn mq(eps: f64) -> RadialKernel {
        RadialKernel::multiquadric(eps).unwrap()
    }

    #[test]
    fn single_site_phi() {
        let sites = SiteSet::new(vec![vec![0.3, 0.2]]).unwrap();
        let sys = build_phi(mq(1.0), &sites).unwrap();
        assert_eq!(sys.phi()[(0, 0)], 1.0);
    }

    #[test]
    fn two_site_phi() {
        let sites = SiteSet::new(vec![vec![0.0, 0.0], vec![3.0, 0.0]]).unwrap();
        let sys = build_phi(mq(4.0), &sites).unwrap();
        assert_eq!(sys.phi(), &DMatrix::from_row_slice(2, 2, &[4.0, 5.0, 5.0, 4.0]));
    }

    #[test]
    fn phi_is_symmetric_with_constant_diagonal() {
        let sites = random_sites(5, 2, 3);
        let sys = build_phi(mq(0.8), &sites).unwrap();
        assert_eq!(sys.phi(), &sys.phi().transpose());
        for i in 0..5 {
            assert_eq!(sys.phi()[(i, i)], 0.8);
        }
        let d = sites.distances();
        assert_eq!(d, &d.transpose());
        assert!((0..5).all(|i| d[(i, i)] == 0.0));
    }

    #[test]
    fn duplicate_sites_are_rejected() {
        let err = SiteSet::new(vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn near_singular_system_reports_condition() {
        // Very flat Gaussian on close sites.
        let sites = random_sites(30, 2, 9);
        match build_phi(RadialKernel::gaussian(0.01).unwrap(), &sites) {
            Err(Error::Conditioning { estimate }) => assert!(estimate > CONDITION_LIMIT),
            other => panic!("expected conditioning error, got {other:?}"),
        }
    }

    #[test]
    fn column_of_phi_fits_to_unit_vector() {
        let sites = random_sites(6, 2, 1);
        let sys = build_phi(mq(1.0), &sites).unwrap();
        let col: Vec<f64> = sys.phi().column(2).iter().copied().collect();
        let c = sys.fit_coefficients(&col, 0.0).unwrap();
        for (i, v) in c.iter().enumerate() {
            let e = if i == 2 { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-8, "c[{i}] = {v}");
        }
    }

    #[test]
    fn scalar_regularized_fit() {
        let sites = SiteSet::new(vec![vec![0.0]]).unwrap();
        let sys = build_phi(mq(1.0), &sites).unwrap();
        let c = sys.fit_coefficients(&[1.0], 0.01).unwrap();
        assert_relative_eq!(c[0], 1.0 / 1.01, max_relative = 1e-14);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let sites = random_sites(3, 2, 2);
        let sys = build_phi(mq(1.0), &sites).unwrap();
        assert!(matches!(sys.fit_coefficients(&[1.0, 2.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(sys.fit_coefficients(&[1.0, f64::NAN, 0.0], 0.0), Err(Error::Argument(_))));
        assert!(matches!(sys.fit_coefficients(&[1.0, 2.0, 0.0], -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn fit_operator_matches_direct_fit() {
        let sites = random_sites(8, 2, 4);
        let sys = build_phi(mq(1.0), &sites).unwrap();
        let u: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        for lambda in [0.0, 1e-2, 1.0] {
            let p = sys.fit_operator(lambda).unwrap();
            let via_op = &p * DVector::from_column_slice(&u);
            let direct = sys.fit_coefficients(&u, lambda).unwrap();
            assert!((&via_op - &direct).amax() <= 1e-9 * direct.amax().max(1.0));
        }
    }

    #[test]
    fn interpolant_examples() {
        let one = SiteSet::new(vec![vec![0.5, 0.5]]).unwrap();
        let v = evaluate_interpolant(&mq(1.0), &one, &[2.0], &[vec![0.5, 0.5]]).unwrap();
        assert_eq!(v, vec![2.0]);

        let two = SiteSet::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let v = evaluate_interpolant(&mq(1.0), &two, &[1.0, 1.0], &[vec![0.0, 0.0]]).unwrap();
        assert_relative_eq!(v[0], 1.0 + 2f64.sqrt(), max_relative = 1e-15);

        assert!(evaluate_interpolant(&mq(1.0), &two, &[1.0, 1.0], &[vec![0.0]]).is_err());
        assert!(evaluate_interpolant(&mq(1.0), &two, &[1.0], &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn scaled_inverse_examples() {
        let one = SiteSet::new(vec![vec![0.0]]).unwrap();
        let sys = build_phi(mq(2.0), &one).unwrap();
        assert_eq!(scaled_inverse(&sys), DMatrix::from_element(1, 1, 1.0));

        let sites = random_sites(12, 2, 8);
        let sys = build_phi(mq(1.0), &sites).unwrap();
        let g = scaled_inverse(&sys);
        assert!((g.amax() - 1.0).abs() < 1e-12);
        let back = sys.phi() * (&g * sys.inverse_scale());
        assert!((back - DMatrix::identity(12, 12)).amax() < 1e-8);
    }

    /// Straight reduced-system LOOCV, used as an oracle for the fast path.
    fn brute_force_loocv(kernel: RadialKernel, ds: &SequenceDataset, seed: u64) -> f64 {
        let n = ds.n_sites();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut count = 0;
        for s in ds.indices(Split::Train) {
            for t in 0..ds.seq_len() {
                let k = rng.random_range(0..n);
                let keep: Vec<usize> = (0..n).filter(|&i| i != k).collect();
                let reduced = ds.sites().select(&keep).unwrap();
                let sys = build_phi(kernel, &reduced).unwrap();
                let u = ds.frame(s, t);
                let vals: Vec<f64> = keep.iter().map(|&i| u[i]).collect();
                let c = sys.fit_coefficients(&vals, 0.0).unwrap();
                let pred = evaluate_interpolant(&kernel, &reduced, c.as_slice(), &[ds.sites().point(k)]).unwrap();
                total += (pred[0] - u[k]).abs();
                count += 1;
            }
        }
        total / count as f64
    }

    fn synthetic_dataset(generator: RadialKernel, constant: bool) -> SequenceDataset {
        let sites = SiteSet::new(random_sites(20, 2, 21).coords().chunks(2).map(|p| vec![6.0 * p[0], 6.0 * p[1]]).collect()).unwrap();
        let sys = build_phi(generator, &sites).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut values = Vec::new();
        for _ in 0..(4 * 3) {
            if constant {
                values.extend(std::iter::repeat_n(3.5, 20));
            } else {
                let c = DVector::from_fn(20, |_, _| rng.random_range(-1.0..1.0));
                values.extend((sys.phi() * c).iter());
            }
        }
        SequenceDataset::new(sites, 3, values, vec![Split::Train; 4]).unwrap()
    }

    #[test]
    fn loocv_matches_brute_force_and_selects_generator() {
        let ds = synthetic_dataset(mq(2.0), false);
        let grid = [mq(0.5), mq(2.0), mq(8.0)];
        let report = loocv_select_kernel(&grid, &ds, 5).unwrap();
        for s in &report.scores {
            if s.mean_abs_error.is_finite() {
                let oracle = brute_force_loocv(s.kernel, &ds, 5);
                assert_relative_eq!(s.mean_abs_error, oracle, max_relative = 1e-5);
            }
        }
        let oracle_best = grid
            .iter()
            .map(|k| brute_force_loocv(*k, &ds, 5))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert_eq!(oracle_best, 1);
        assert_eq!(report.best, mq(2.0));
    }

    #[test]
    fn loocv_single_candidate_and_constants() {
        let ds = synthetic_dataset(mq(1.0), false);
        let r = loocv_select_kernel(&[mq(1.0)], &ds, 0).unwrap();
        assert_eq!(r.best, mq(1.0));
        assert!(r.scores[0].mean_abs_error.is_finite());

        // Constant snapshots are not reproduced exactly away from the nodes (no
        // polynomial term), so their leave-one-out error only vanishes in the
        // flat-kernel limit.
        let ds = synthetic_dataset(mq(1.0), true);
        let grid = [mq(1.0), mq(4.0), mq(16.0)];
        let r = loocv_select_kernel(&grid, &ds, 0).unwrap();
        let errs: Vec<f64> = r.scores.iter().map(|s| s.mean_abs_error).collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 1e-4 * 3.5);
        assert_eq!(r.best_index, 2);

        // Ties go to the earlier candidate.
        let r = loocv_select_kernel(&[mq(2.0), mq(16.0), mq(16.0)], &ds, 0).unwrap();
        assert_eq!(r.scores[1].mean_abs_error, r.scores[2].mean_abs_error);
        assert_eq!(r.best_index, 1);
    }

    #[test]
    fn loocv_penalizes_singular_candidates() {
        let ds = synthetic_dataset(mq(1.0), false);
        let r = loocv_select_kernel(&[RadialKernel::gaussian(1e-3).unwrap(), mq(1.0)], &ds, 0).unwrap();
        assert!(r.scores[0].mean_abs_error.is_infinite());
        assert_eq!(r.best_index, 1);
    }

    #[test]
    fn loocv_needs_two_sites() {
        let sites = SiteSet::new(vec![vec![0.0]]).unwrap();
        let ds = SequenceDataset::new(sites, 1, vec![1.0], vec![Split::Train]).unwrap();
        assert!(matches!(loocv_select_kernel(&[mq(1.0)], &ds, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn loocv_permutation_invariance() {
        let ds = synthetic_dataset(mq(2.0), false);
        let grid = vec![mq(0.5), mq(2.0), mq(8.0), RadialKernel::inverse_multiquadric(1.0).unwrap()];
        let base = loocv_select_kernel(&grid, &ds, 3).unwrap();
        let mut rev = grid.clone();
        rev.reverse();
        let flipped = loocv_select_kernel(&rev, &ds, 3).unwrap();
        assert_eq!(base.best, flipped.best);
        for s in &base.scores {
            let other = flipped.scores.iter().find(|o| o.kernel == s.kernel).unwrap();
            assert_eq!(s.mean_abs_error.to_bits(), other.mean_abs_error.to_bits());
        }
    }

    #[test]
    fn loocv_csv_has_header_and_rows() {
        let ds = synthetic_dataset(mq(2.0), false);
        let r = loocv_select_kernel(&[mq(1.0), mq(2.0)], &ds, 0).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "candidate,family,epsilon,mean_abs_error");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,multiquadric,1,"));
    }

    use proptest::prelude::{prop_assert, prop_assume, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exact_fit_round_trips(seed in 0u64..1000, eps in 0.5f64..3.0) {
            let unit = random_sites(10, 2, seed);
            let sites = SiteSet::new(unit.coords().chunks(2).map(|p| vec![6.0 * p[0], 6.0 * p[1]]).collect()).unwrap();
            let sys = build_phi(mq(eps), &sites).unwrap();
            prop_assume!(sys.condition() < 1e10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let u: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c = sys.fit_coefficients(&u, 0.0).unwrap();
            let points: Vec<&[f64]> = (0..10).map(|i| sites.point(i)).collect();
            let back = evaluate_interpolant(&mq(eps), &sites, c.as_slice(), &points).unwrap();
            for (a, b) in back.iter().zip(&u) {
                prop_assert!((a - b).abs() < 1e-8);
            }
        }

        #[test]
        fn regularization_shrinks_coefficients(seed in 0u64..1000, l1 in 0.0f64..1.0, dl in 0.0f64..1.0) {
            let sites = random_sites(8, 2, seed);
            let sys = build_phi(mq(1.0), &sites).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c1 = sys.fit_coefficients(&u, l1).unwrap().norm();
            let c2 = sys.fit_coefficients(&u, l1 + dl).unwrap().norm();
            prop_assert!(c1 >= c2 * (1.0 - 1e-9));
        }
    }
}
