//! Discrete-time RBF collocation for linear PDEs `u_t = L u`.
//!
//! With `u(t, x) = Σ_j c_j(t) φ(‖x − x_j‖)` and a forward difference in time,
//! collocating at the sites gives
//!
//! ```text
//! Φ c_{t+Δt} = H c_t,    Φ c_0 = w,
//! H_ij = φ(‖x_i − x_j‖) + Δt · Lφ(‖x − x_j‖)|_{x = x_i}.
//! ```
//!
//! Dirichlet data replace the right-hand side rows of boundary sites, so those
//! rows of the Φ-solve interpolate the prescribed values at the new time.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Error, Result};
use crate::interpolation::{InterpolationSystem, SiteSet};
use crate::kernels::{kernel_operator_apply, LinearOperatorSpec, RadialKernel};

pub type BoundaryValues = Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>;

/// Prescribed values on a subset of sites.
#[derive(Clone)]
pub struct DirichletBoundary {
    indices: Vec<usize>,
    values: BoundaryValues,
}

impl std::fmt::Debug for DirichletBoundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DirichletBoundary").field("indices", &self.indices).finish()
    }
}

impl DirichletBoundary {
    pub fn new(indices: Vec<usize>, values: BoundaryValues) -> Self {
        Self { indices, values }
    }

    /// Homogeneous data on the listed sites.
    pub fn zero(indices: Vec<usize>) -> Self {
        let k = indices.len();
        Self::new(indices, Arc::new(move |_| vec![0.0; k]))
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values_at(&self, t: f64) -> Result<Vec<f64>> {
        let v = (self.values)(t);
        ensure!(
            v.len() == self.indices.len(),
            Argument,
            "boundary callback returned {} values for {} sites",
            v.len(),
            self.indices.len()
        );
        Ok(v)
    }
}

/// The `Δt·Lφ` part of `H`: entry `(i, j)` is `Δt · Lφ(‖x − x_j‖)` at `x = x_i`.
pub fn operator_matrix(
    kernel: &RadialKernel,
    sites: &SiteSet,
    op: &LinearOperatorSpec,
    dt: f64,
) -> Result<DMatrix<f64>> {
    let n = sites.len();
    let mut m = DMatrix::zeros(n, n);
    if op.is_zero() {
        return Ok(m);
    }
    for i in 0..n {
        for j in 0..n {
            let v = kernel_operator_apply(kernel, op, sites.point(j), sites.point(i)).map_err(|e| {
                Error::AtSite {
                    site: i,
                    source: Box::new(e),
                }
            })?;
            m[(i, j)] = dt * v;
        }
    }
    Ok(m)
}

pub fn build_h(
    kernel: &RadialKernel,
    sites: &SiteSet,
    op: &LinearOperatorSpec,
    dt: f64,
) -> Result<DMatrix<f64>> {
    ensure!(dt > 0.0 && dt.is_finite(), Argument, "time step must be positive, got {dt}");
    let phi = crate::interpolation::kernel_matrix(kernel, sites);
    Ok(phi + operator_matrix(kernel, sites, op, dt)?)
}

#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub values: DVector<f64>,
    pub coeffs: DVector<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&TrajectoryPoint> {
        self.points.last()
    }

    /// Long-format CSV: `t,site_index,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "site_index", "value"])?;
        for p in &self.points {
            for (i, v) in p.values.iter().enumerate() {
                w.write_record([p.time.to_string(), i.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CollocationStepper {
    system: InterpolationSystem,
    h: DMatrix<f64>,
    dt: f64,
    boundary: Option<DirichletBoundary>,
}

impl CollocationStepper {
    pub fn new(
        kernel: RadialKernel,
        sites: &SiteSet,
        op: &LinearOperatorSpec,
        dt: f64,
        boundary: Option<DirichletBoundary>,
    ) -> Result<Self> {
        ensure!(
            op.dim() == sites.dim(),
            Argument,
            "operator dimension {} does not match site dimension {}",
            op.dim(),
            sites.dim()
        );
        let system = InterpolationSystem::build(kernel, sites)?;
        let h = build_h(&kernel, sites, op, dt)?;
        Self::from_parts(system, h, dt, boundary)
    }

    /// Stepper with a caller-supplied `H`.
    pub fn from_parts(
        system: InterpolationSystem,
        h: DMatrix<f64>,
        dt: f64,
        boundary: Option<DirichletBoundary>,
    ) -> Result<Self> {
        let n = system.len();
        ensure!(dt > 0.0 && dt.is_finite(), Argument, "time step must be positive, got {dt}");
        ensure!(
            h.nrows() == n && h.ncols() == n,
            Argument,
            "H is {}x{}, expected {n}x{n}",
            h.nrows(),
            h.ncols()
        );
        if let Some(b) = &boundary {
            let mut seen = vec![false; n];
            for &i in b.indices() {
                ensure!(i < n, Argument, "boundary index {i} out of range");
                ensure!(!seen[i], Argument, "boundary index {i} listed twice");
                seen[i] = true;
            }
        }
        Ok(Self {
            system,
            h,
            dt,
            boundary,
        })
    }

    pub fn system(&self) -> &InterpolationSystem {
        &self.system
    }

    pub fn h_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn boundary(&self) -> Option<&DirichletBoundary> {
        self.boundary.as_ref()
    }

    /// Coefficients at `t_next` from coefficients one step earlier.
    pub fn step(&self, coeffs: &DVector<f64>, t_next: f64) -> Result<DVector<f64>> {
        let mut rhs = &self.h * coeffs;
        if let Some(b) = &self.boundary {
            for (&i, v) in b.indices().iter().zip(b.values_at(t_next)?) {
                rhs[i] = v;
            }
        }
        self.system.solve(&rhs)
    }

    pub fn solve_ivp(&self, initial_values: &[f64], t_end: f64) -> Result<Trajectory> {
        ensure!(t_end > 0.0 && t_end.is_finite(), Argument, "t_end must be positive, got {t_end}");
        let ratio = t_end / self.dt;
        let steps = ratio.round();
        ensure!(
            steps >= 1.0 && (steps * self.dt - t_end).abs() <= 1e-12 * t_end,
            Argument,
            "t_end = {t_end} is not an integer multiple of dt = {}",
            self.dt
        );
        let steps = steps as usize;
        let mut coeffs = self.system.fit_coefficients(initial_values, 0.0)?;
        let mut points = Vec::with_capacity(steps + 1);
        points.push(TrajectoryPoint {
            time: 0.0,
            values: self.system.phi() * &coeffs,
            coeffs: coeffs.clone(),
        });
        for k in 1..=steps {
            let t = k as f64 * self.dt;
            coeffs = self.step(&coeffs, t)?;
            let values = self.system.phi() * &coeffs;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { time: t });
            }
            points.push(TrajectoryPoint {
                time: t,
                values,
                coeffs: coeffs.clone(),
            });
        }
        Ok(Trajectory { points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpolation::build_phi;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sites(n: usize, seed: u64) -> SiteSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SiteSet::new((0..n).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect())
            .unwrap()
    }

    fn mq(eps: f64) -> RadialKernel {
        RadialKernel::multiquadric(eps).unwrap()
    }

    #[test]
    fn zero_operator_gives_phi() {
        let sites = random_sites(6, 1);
        let h = build_h(&mq(1.0), &sites, &LinearOperatorSpec::zero(2), 0.1).unwrap();
        assert_eq!(h, crate::interpolation::kernel_matrix(&mq(1.0), &sites));
    }

    #[test]
    fn vanishing_step_approaches_phi() {
        let sites = random_sites(6, 2);
        let op = LinearOperatorSpec::diffusion(2, 1.0);
        let phi = crate::interpolation::kernel_matrix(&mq(1.0), &sites);
        let h = build_h(&mq(1.0), &sites, &op, 1e-14).unwrap();
        assert!((h - phi).amax() < 1e-12);
    }

    #[test]
    fn h_minus_phi_matches_fd_laplacian() {
        let sites = random_sites(6, 3);
        let k = mq(1.0);
        let dt = 0.01;
        let op = LinearOperatorSpec::diffusion(2, 1.0);
        let h = build_h(&k, &sites, &op, dt).unwrap();
        let phi = crate::interpolation::kernel_matrix(&k, &sites);
        let step = 1e-3;
        for i in 0..6 {
            for j in 0..6 {
                let (xi, xj) = (sites.point(i), sites.point(j));
                let f = |dx: f64, dy: f64| {
                    let (a, b) = (xi[0] + dx - xj[0], xi[1] + dy - xj[1]);
                    k.eval((a * a + b * b).sqrt()).unwrap()
                };
                let fd = (f(step, 0.0) + f(-step, 0.0) + f(0.0, step) + f(0.0, -step) - 4.0 * f(0.0, 0.0))
                    / (step * step);
                let got = (h[(i, j)] - phi[(i, j)]) / dt;
                assert!((got - fd).abs() <= 1e-6 * fd.abs().max(1.0), "({i},{j}): {got} vs {fd}");
            }
        }
    }

    #[test]
    fn zero_operator_keeps_values_constant() {
        let sites = random_sites(7, 4);
        let stepper = CollocationStepper::new(mq(1.0), &sites, &LinearOperatorSpec::zero(2), 0.1, None).unwrap();
        let w: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        let traj = stepper.solve_ivp(&w, 1.0).unwrap();
        assert_eq!(traj.points.len(), 11);
        for p in &traj.points {
            for (a, b) in p.values.iter().zip(&w) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scalar_recurrence() {
        // One site and a pure reaction term a: H = Φ(1 + aΔt).
        let a = -0.7;
        let dt = 0.05;
        let sites = SiteSet::new(vec![vec![0.2]]).unwrap();
        let op = LinearOperatorSpec::zero(1).with_reaction(Arc::new(move |_| a));
        let stepper = CollocationStepper::new(mq(1.5), &sites, &op, dt, None).unwrap();
        let traj = stepper.solve_ivp(&[2.0], 1.0).unwrap();
        for (k, p) in traj.points.iter().enumerate() {
            assert_relative_eq!(p.values[0], 2.0 * (1.0 + a * dt).powi(k as i32), max_relative = 1e-12);
        }
    }

    #[test]
    fn non_multiple_end_time_is_rejected() {
        let sites = random_sites(3, 5);
        let stepper = CollocationStepper::new(mq(1.0), &sites, &LinearOperatorSpec::zero(2), 0.3, None).unwrap();
        assert!(matches!(stepper.solve_ivp(&[0.0; 3], 1.0), Err(Error::Argument(_))));
        assert!(stepper.solve_ivp(&[0.0; 3], 0.9).is_ok());
    }

    #[test]
    fn boundary_index_validation() {
        let sites = random_sites(3, 5);
        let op = LinearOperatorSpec::zero(2);
        assert!(CollocationStepper::new(mq(1.0), &sites, &op, 0.1, Some(DirichletBoundary::zero(vec![0, 0]))).is_err());
        assert!(CollocationStepper::new(mq(1.0), &sites, &op, 0.1, Some(DirichletBoundary::zero(vec![3]))).is_err());
    }

    #[test]
    fn thin_plate_spline_operator_reports_site() {
        let sites = random_sites(3, 6);
        let err = build_h(&RadialKernel::thin_plate_spline(), &sites, &LinearOperatorSpec::diffusion(2, 1.0), 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::AtSite { site: 0, .. }));
    }

    #[test]
    fn boundary_values_are_enforced() {
        let n = 15;
        let sites = SiteSet::new((0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect()).unwrap();
        let op = LinearOperatorSpec::diffusion(1, 0.1);
        let bc = DirichletBoundary::new(vec![0, n - 1], Arc::new(|t| vec![t.sin(), 1.0 + t]));
        let stepper = CollocationStepper::new(mq(0.3), &sites, &op, 1e-3, Some(bc)).unwrap();
        let w: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let traj = stepper.solve_ivp(&w, 0.05).unwrap();
        for p in &traj.points[1..] {
            assert!((p.values[0] - p.time.sin()).abs() < 1e-8);
            assert!((p.values[n - 1] - (1.0 + p.time)).abs() < 1e-8);
        }
    }

    #[test]
    fn value_update_identity() {
        // u_{t+Δt} = u_t + (Δt Lφ) Φ⁻¹ u_t equals Φ times the stepped coefficients.
        let sites = random_sites(10, 7);
        let k = mq(1.0);
        let op = LinearOperatorSpec::diffusion(2, 0.5)
            .with_convection(Arc::new(|x: &[f64]| vec![x[1], -x[0]]));
        let stepper = CollocationStepper::new(k, &sites, &op, 1e-2, None).unwrap();
        let sys = build_phi(k, &sites).unwrap();
        let lphi = operator_matrix(&k, &sites, &op, 1e-2).unwrap();
        let u = DVector::from_fn(10, |i, _| (i as f64).cos());
        let c = sys.solve(&u).unwrap();
        let via_values = &u + &lphi * sys.inverse() * &u;
        let via_coeffs = sys.phi() * stepper.step(&c, 1e-2).unwrap();
        assert!((via_values - via_coeffs).amax() < 1e-8);
    }

    #[test]
    fn trajectory_csv() {
        let sites = random_sites(2, 8);
        let stepper = CollocationStepper::new(mq(1.0), &sites, &LinearOperatorSpec::zero(2), 0.5, None).unwrap();
        let traj = stepper.solve_ivp(&[1.0, 2.0], 1.0).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 2);
        assert_eq!(text.lines().next().unwrap(), "t,site_index,value");
    }
}
