//! The multilevel forecaster and a single-block baseline.
//!
//! Everything is batched over sequences: a frame for `B` sequences is an
//! `n × B` matrix, and per-site networks see the `(n·B) × width` matrix whose
//! row `i + b·n` belongs to site `i` of sequence `b` (the column-major
//! flattening of the frame).
//!
//! One level maps coefficients `c` to `C_f = c + G·S_f·c` for every learned
//! spatial feature `f`, then collapses the `F` columns back to one coefficient
//! per site with a small per-site network. The coefficient vectors of all
//! levels are mapped back to site values through `Φ` and fed, together with
//! the fitted input itself, to a GRU shared by all sites.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, ParameterStore, Var};
use crate::error::{ensure, Error, Result};
use crate::interpolation::{InterpolationSystem, SiteSet};
use crate::kernels::RadialKernel;

/// Regularization used for the per-frame coefficient fit.
pub const DEFAULT_FIT_LAMBDA: f64 = 1e-2;

fn default_feature_width() -> usize {
    8
}
fn default_spatial_hidden() -> Vec<usize> {
    vec![64, 32]
}
fn default_nab_hidden() -> usize {
    32
}
fn default_rfn_hidden() -> usize {
    64
}
fn default_dim() -> usize {
    2
}
fn default_lambda() -> f64 {
    DEFAULT_FIT_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    #[serde(default = "default_feature_width")]
    pub feature_width: usize,
    #[serde(default = "default_spatial_hidden")]
    pub spatial_hidden: Vec<usize>,
    #[serde(default = "default_nab_hidden")]
    pub nab_hidden: usize,
    #[serde(default = "default_rfn_hidden")]
    pub rfn_hidden: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_lambda")]
    pub fit_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_levels(1)
    }
}

impl ModelConfig {
    pub fn with_levels(levels: usize) -> Self {
        Self {
            levels,
            feature_width: default_feature_width(),
            spatial_hidden: default_spatial_hidden(),
            nab_hidden: default_nab_hidden(),
            rfn_hidden: default_rfn_hidden(),
            dim: default_dim(),
            fit_lambda: default_lambda(),
        }
    }

    pub fn spatial_input_width(&self) -> usize {
        2 * self.dim + 1
    }

    pub fn rfn_input_width(&self) -> usize {
        self.feature_width * self.levels + 1
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.feature_width >= 1, Config, "feature width must be positive");
        ensure!(self.dim >= 1, Config, "spatial dimension must be positive");
        ensure!(self.nab_hidden >= 1 && self.rfn_hidden >= 1, Config, "hidden sizes must be positive");
        ensure!(
            self.spatial_hidden.iter().all(|&h| h >= 1),
            Config,
            "spatial hidden sizes must be positive"
        );
        ensure!(
            self.fit_lambda >= 0.0 && self.fit_lambda.is_finite(),
            Config,
            "fit lambda must be nonnegative"
        );
        Ok(())
    }

    fn spatial_layers(&self) -> Vec<usize> {
        let mut sizes = vec![self.spatial_input_width()];
        sizes.extend(&self.spatial_hidden);
        sizes.push(self.feature_width);
        sizes
    }

    fn nab_layers(&self) -> Vec<usize> {
        vec![self.feature_width, self.nab_hidden, 1]
    }

    pub fn spatial_param_count(&self) -> usize {
        mlp_param_count(&self.spatial_layers())
    }

    pub fn nab_param_count(&self) -> usize {
        mlp_param_count(&self.nab_layers())
    }

    pub fn rfn_param_count(&self) -> usize {
        let (i, h) = (self.rfn_input_width(), self.rfn_hidden);
        3 * h * (i + h + 2) + h + 1
    }

    pub fn param_count(&self) -> usize {
        self.spatial_param_count() + self.levels * self.nab_param_count() + self.rfn_param_count()
    }
}

fn mlp_param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Feed-forward network stored as `{prefix}.l{k}.weight` (`in × out`) and
/// `{prefix}.l{k}.bias` (`1 × out`); ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: &[usize]) -> Self {
        Self {
            prefix: prefix.to_string(),
            sizes: sizes.to_vec(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.bias", self.prefix)
    }

    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for (k, w) in self.sizes.windows(2).enumerate() {
            store.insert_glorot(&self.weight_name(k), w[0], w[1], rng)?;
            store.insert_zeros(&self.bias_name(k), 1, w[1])?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParameterStore, x: Var) -> Result<Var> {
        let width = g.shape(x).1;
        ensure!(
            width == self.input_width(),
            Argument,
            "{}: input width {width}, expected {}",
            self.prefix,
            self.input_width()
        );
        let layers = self.sizes.len() - 1;
        let mut h = x;
        for k in 0..layers {
            let w = g.param(params, &self.weight_name(k))?;
            let b = g.param(params, &self.bias_name(k))?;
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if k + 1 < layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Site-dependent matrices shared by every forward pass on one site set.
#[derive(Debug, Clone)]
pub struct Geometry {
    system: InterpolationSystem,
    fit_operator: Matrix,
    fit_lambda: f64,
    pair_inputs: Matrix,
    site_hash: String,
}

impl Geometry {
    pub fn build(kernel: RadialKernel, sites: &SiteSet, fit_lambda: f64) -> Result<Self> {
        let system = InterpolationSystem::build(kernel, sites)?;
        let fit_operator = system.fit_operator(fit_lambda)?;
        let n = sites.len();
        let d = sites.dim();
        // Row i + j·n holds (x_i, x_j, φ(‖x_i − x_j‖)).
        let mut pair_inputs = DMatrix::zeros(n * n, 2 * d + 1);
        for j in 0..n {
            for i in 0..n {
                let row = i + j * n;
                for k in 0..d {
                    pair_inputs[(row, k)] = sites.point(i)[k];
                    pair_inputs[(row, d + k)] = sites.point(j)[k];
                }
                pair_inputs[(row, 2 * d)] = system.phi()[(i, j)];
            }
        }
        Ok(Self {
            site_hash: sites.hash(),
            system,
            fit_operator,
            fit_lambda,
            pair_inputs,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.system.len()
    }

    pub fn dim(&self) -> usize {
        self.system.sites().dim()
    }

    pub fn kernel(&self) -> &RadialKernel {
        self.system.kernel()
    }

    pub fn sites(&self) -> &SiteSet {
        self.system.sites()
    }

    pub fn system(&self) -> &InterpolationSystem {
        &self.system
    }

    pub fn phi(&self) -> &Matrix {
        self.system.phi()
    }

    /// The matrix `G` applied to spatial features: `Φ⁻¹` scaled to unit max-abs.
    pub fn transform(&self) -> &Matrix {
        self.system.scaled_inverse()
    }

    /// `u ↦ c` for the regularized fit.
    pub fn fit_operator(&self) -> &Matrix {
        &self.fit_operator
    }

    pub fn fit_lambda(&self) -> f64 {
        self.fit_lambda
    }

    pub fn pair_inputs(&self) -> &Matrix {
        &self.pair_inputs
    }

    pub fn site_hash(&self) -> &str {
        &self.site_hash
    }

    pub fn check_sites(&self, sites: &SiteSet) -> Result<()> {
        ensure!(
            sites.hash() == self.site_hash,
            Validation,
            "site set does not match the one the model was built for"
        );
        Ok(())
    }
}

/// Evaluates the pairwise network on all `n²` site pairs and returns one
/// `n × n` matrix per output feature.
pub fn build_spatial_features(
    g: &mut Graph,
    params: &ParameterStore,
    net: &Mlp,
    geometry: &Geometry,
) -> Result<Vec<Var>> {
    let n = geometry.n_sites();
    ensure!(
        net.input_width() == 2 * geometry.dim() + 1,
        Argument,
        "spatial network expects {}-dimensional pairs, sites are {}-dimensional",
        (net.input_width().saturating_sub(1)) / 2,
        geometry.dim()
    );
    let pairs = g.constant(geometry.pair_inputs().clone());
    let out = net.forward(g, params, pairs)?;
    (0..net.output_width())
        .map(|f| {
            let col = g.slice_cols(out, f, 1)?;
            g.reshape(col, n, n)
        })
        .collect()
}

/// `C_f = c + G·S_f·c` for each feature matrix; `c` is `n × B`.
pub fn lstb_forward(g: &mut Graph, features: &[Var], transform: Var, c: Var) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(features.len());
    for &s in features {
        let sc = g.matmul(s, c)?;
        let gsc = g.matmul(transform, sc)?;
        out.push(g.add(c, gsc)?);
    }
    Ok(out)
}

/// Same as [`lstb_forward`] with `G·S_f` already formed.
fn lstb_with_products(g: &mut Graph, products: &[Var], c: Var) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(products.len());
    for &k in products {
        let kc = g.matmul(k, c)?;
        out.push(g.add(c, kc)?);
    }
    Ok(out)
}

/// Stacks `n × B` matrices as the columns of an `(n·B) × k` row-per-site matrix.
pub fn site_rows(g: &mut Graph, columns: &[Var]) -> Result<Var> {
    let flat = columns
        .iter()
        .map(|&c| {
            let (r, b) = g.shape(c);
            g.reshape(c, r * b, 1)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&flat)
}

/// Collapses the `F` feature columns (`n × B` each) to one `n × B` coefficient
/// matrix with a network shared by all sites.
pub fn nab_forward(g: &mut Graph, params: &ParameterStore, net: &Mlp, columns: &[Var]) -> Result<Var> {
    ensure!(
        columns.len() == net.input_width(),
        Argument,
        "aggregator expects {} feature columns, got {}",
        net.input_width(),
        columns.len()
    );
    let (n, b) = g.shape(columns[0]);
    let rows = site_rows(g, columns)?;
    let out = net.forward(g, params, rows)?;
    g.reshape(out, n, b)
}

/// Names of the recurrent block's parameters.
pub mod rfn_names {
    pub const W_INPUT: &str = "rfn.w_input";
    pub const W_HIDDEN: &str = "rfn.w_hidden";
    pub const B_INPUT: &str = "rfn.b_input";
    pub const B_HIDDEN: &str = "rfn.b_hidden";
    pub const READOUT_W: &str = "rfn.readout.weight";
    pub const READOUT_B: &str = "rfn.readout.bias";
}

/// Registers GRU weights (`in × 3H`, `H × 3H`, gate order reset, update,
/// candidate) and the `H → 1` readout.
pub fn register_rfn<R: Rng>(store: &mut ParameterStore, input: usize, hidden: usize, rng: &mut R) -> Result<()> {
    use rfn_names::*;
    store.insert_glorot(W_INPUT, input, 3 * hidden, rng)?;
    store.insert_glorot(W_HIDDEN, hidden, 3 * hidden, rng)?;
    store.insert_zeros(B_INPUT, 1, 3 * hidden)?;
    store.insert_zeros(B_HIDDEN, 1, 3 * hidden)?;
    store.insert_glorot(READOUT_W, hidden, 1, rng)?;
    store.insert_zeros(READOUT_B, 1, 1)?;
    Ok(())
}

/// One GRU update on every row followed by the linear readout.
///
/// `x` is `rows × in`, `h` is `rows × H`; returns `(rows × 1, rows × H)`.
pub fn rfn_step(g: &mut Graph, params: &ParameterStore, x: Var, h: Var) -> Result<(Var, Var)> {
    use rfn_names::*;
    let wx = g.param(params, W_INPUT)?;
    let wh = g.param(params, W_HIDDEN)?;
    let bx = g.param(params, B_INPUT)?;
    let bh = g.param(params, B_HIDDEN)?;
    let hidden = g.shape(wh).0;
    ensure!(
        g.shape(x).1 == g.shape(wx).0,
        Argument,
        "recurrent input width {}, expected {}",
        g.shape(x).1,
        g.shape(wx).0
    );
    ensure!(
        g.shape(h) == (g.shape(x).0, hidden),
        Argument,
        "hidden state shape {:?}, expected ({}, {hidden})",
        g.shape(h),
        g.shape(x).0
    );
    let gx = g.matmul(x, wx)?;
    let gx = g.add_row(gx, bx)?;
    let gh = g.matmul(h, wh)?;
    let gh = g.add_row(gh, bh)?;

    let xr = g.slice_cols(gx, 0, hidden)?;
    let hr = g.slice_cols(gh, 0, hidden)?;
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);

    let xz = g.slice_cols(gx, hidden, hidden)?;
    let hz = g.slice_cols(gh, hidden, hidden)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);

    let xn = g.slice_cols(gx, 2 * hidden, hidden)?;
    let hn = g.slice_cols(gh, 2 * hidden, hidden)?;
    let rhn = g.mul(r, hn)?;
    let cand = g.add(xn, rhn)?;
    let cand = g.tanh(cand);

    // h' = (1 − z)·n + z·h = n + z·(h − n)
    let diff = g.sub(h, cand)?;
    let zd = g.mul(z, diff)?;
    let h_next = g.add(cand, zd)?;

    let wo = g.param(params, READOUT_W)?;
    let bo = g.param(params, READOUT_B)?;
    let y = g.matmul(h_next, wo)?;
    let y = g.add_row(y, bo)?;
    Ok((y, h_next))
}

/// Output of a batched rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Time index of `predictions[0]`.
    pub first: usize,
    pub tau: usize,
    /// `û_t` for `t = first, first + 1, …, τ + T − 1`, each `n × B`.
    pub predictions: Vec<Var>,
}

impl Rollout {
    /// Predictions at `t ≥ τ`.
    pub fn forecast(&self) -> &[Var] {
        &self.predictions[self.tau - self.first..]
    }

    pub fn warm_up(&self) -> &[Var] {
        &self.predictions[..self.tau - self.first]
    }

    /// `(t, û_t)` pairs.
    pub fn timed(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.predictions.iter().enumerate().map(|(k, v)| (self.first + k, *v))
    }
}

/// Inputs shared by every forecaster's rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutSpec<'a> {
    /// First `τ` frames, each `n × B`.
    pub observed: &'a [Matrix],
    pub horizon: usize,
    /// Frames indexed by absolute time; needed for `t` in `τ..τ+T−1` when
    /// `teacher_prob > 0`.
    pub teacher: Option<&'a [Matrix]>,
    pub teacher_prob: f64,
}

impl<'a> RolloutSpec<'a> {
    pub fn closed_loop(observed: &'a [Matrix], horizon: usize) -> Self {
        Self {
            observed,
            horizon,
            teacher: None,
            teacher_prob: 0.0,
        }
    }

    fn validate(&self, n: usize, min_observed: usize) -> Result<usize> {
        let tau = self.observed.len();
        ensure!(tau >= 1, Argument, "at least one observed frame is required");
        ensure!(
            tau >= min_observed,
            Argument,
            "model needs {min_observed} observed frames, got {tau}"
        );
        ensure!(
            (0.0..=1.0).contains(&self.teacher_prob),
            Argument,
            "teacher probability must lie in [0, 1], got {}",
            self.teacher_prob
        );
        let batch = self.observed[0].ncols();
        ensure!(batch >= 1, Argument, "empty batch");
        for f in self.observed {
            ensure!(
                f.shape() == (n, batch),
                Argument,
                "observed frame shape {:?}, expected ({n}, {batch})",
                f.shape()
            );
        }
        if self.teacher_prob > 0.0 && self.horizon > 1 {
            let teacher = self
                .teacher
                .ok_or_else(|| Error::Argument("teacher probability > 0 requires teacher values".into()))?;
            let needed = tau + self.horizon - 1;
            ensure!(
                teacher.len() >= needed,
                Argument,
                "teacher has {} frames, need {needed}",
                teacher.len()
            );
            for f in &teacher[tau..needed] {
                ensure!(f.shape() == (n, batch), Argument, "teacher frame shape {:?}", f.shape());
            }
        } else if self.teacher_prob > 0.0 && self.teacher.is_none() {
            return Err(Error::Argument("teacher probability > 0 requires teacher values".into()));
        }
        Ok(batch)
    }
}

/// Runs the autoregressive loop: builds the input frame for each `t`, calls
/// `step` once the model has `min_observed` frames, and collects `û_{t+1}`.
fn drive(
    g: &mut Graph,
    spec: &RolloutSpec,
    n: usize,
    min_observed: usize,
    rng: &mut ChaCha8Rng,
    mut step: impl FnMut(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Rollout> {
    let batch = spec.validate(n, min_observed)?;
    let tau = spec.observed.len();
    let last = tau + spec.horizon - 1;
    let first_step = min_observed - 1;
    let mut inputs: Vec<Var> = Vec::with_capacity(last);
    let mut predictions: Vec<Var> = Vec::new();
    for t in 0..last {
        let input = if t < tau {
            g.constant(spec.observed[t].clone())
        } else {
            let own = predictions[t - (first_step + 1)];
            mix_teacher(g, spec, t, own, n, batch, rng)?
        };
        inputs.push(input);
        if t >= first_step {
            predictions.push(step(g, &inputs)?);
        }
    }
    Ok(Rollout {
        first: first_step + 1,
        tau,
        predictions,
    })
}

/// One draw per sequence: teacher frame with probability `teacher_prob`,
/// otherwise the model's own prediction.
fn mix_teacher(
    g: &mut Graph,
    spec: &RolloutSpec,
    t: usize,
    own: Var,
    n: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let p = spec.teacher_prob;
    if p <= 0.0 {
        return Ok(own);
    }
    let teacher = &spec.teacher.expect("validated")[t];
    let picks: Vec<bool> = (0..batch).map(|_| rng.random::<f64>() < p).collect();
    if picks.iter().all(|&x| x) {
        return Ok(g.constant(teacher.clone()));
    }
    if picks.iter().all(|&x| !x) {
        return Ok(own);
    }
    let mask = Matrix::from_fn(n, batch, |_, b| if picks[b] { 1.0 } else { 0.0 });
    let keep = mask.map(|m| 1.0 - m);
    let taught = g.constant(teacher.component_mul(&mask));
    let keep = g.constant(keep);
    let kept = g.mul(own, keep)?;
    g.add(taught, kept)
}

/// `Σ_t ‖u_t − û_t‖²` over every prediction in the rollout, summed over the batch.
pub fn squared_error_loss(g: &mut Graph, rollout: &Rollout, truth: &[Matrix]) -> Result<Var> {
    let mut terms = Vec::with_capacity(rollout.predictions.len());
    for (t, pred) in rollout.timed() {
        ensure!(t < truth.len(), Argument, "no truth frame for t = {t}");
        let target = g.constant(truth[t].clone());
        let d = g.sub(pred, target)?;
        terms.push(g.sum_squares(d));
    }
    ensure!(!terms.is_empty(), Argument, "rollout produced no predictions");
    let all = g.concat_cols(&terms)?;
    Ok(g.sum(all))
}

/// Anything that can be trained and scored as a multi-step forecaster.
pub trait Forecaster {
    fn name(&self) -> &'static str;
    fn params(&self) -> &ParameterStore;
    fn params_mut(&mut self) -> &mut ParameterStore;
    fn geometry(&self) -> &Geometry;
    /// Frames needed before the first prediction.
    fn min_observed(&self) -> usize;
    fn rollout(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        spec: &RolloutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Rollout>;

    /// Closed-loop forecast without recording; returns `T` frames of `n × B`.
    fn forecast(&self, observed: &[Matrix], horizon: usize) -> Result<Vec<Matrix>> {
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = self.rollout(&mut g, self.params(), &RolloutSpec::closed_loop(observed, horizon), &mut rng)?;
        Ok(r.forecast().iter().map(|v| g.value(*v).clone()).collect())
    }
}

/// The multilevel network.
#[derive(Debug, Clone)]
pub struct UmtnModel {
    config: ModelConfig,
    geometry: Geometry,
    spatial: Mlp,
    aggregators: Vec<Mlp>,
    params: ParameterStore,
}

pub const SPATIAL_PREFIX: &str = "s_alpha";

impl UmtnModel {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, kernel: RadialKernel, sites: &SiteSet, seed: u64) -> Result<Self> {
        let arch = Self::architecture(config, kernel, sites)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        arch.spatial.register(&mut params, &mut rng)?;
        for a in &arch.aggregators {
            a.register(&mut params, &mut rng)?;
        }
        register_rfn(&mut params, arch.config.rfn_input_width(), arch.config.rfn_hidden, &mut rng)?;
        Ok(Self { params, ..arch })
    }

    /// Model with the given parameter values (e.g. from a checkpoint).
    pub fn with_params(config: ModelConfig, kernel: RadialKernel, sites: &SiteSet, params: &ParameterStore) -> Result<Self> {
        let mut model = Self::new(config, kernel, sites, 0)?;
        ensure!(
            params.len() == model.params.len(),
            Validation,
            "parameter table has {} entries, expected {}",
            params.len(),
            model.params.len()
        );
        model.params.load_values(params)?;
        Ok(model)
    }

    fn architecture(config: ModelConfig, kernel: RadialKernel, sites: &SiteSet) -> Result<Self> {
        config.validate()?;
        ensure!(
            sites.dim() == config.dim,
            Argument,
            "model is configured for dimension {}, sites have dimension {}",
            config.dim,
            sites.dim()
        );
        let geometry = Geometry::build(kernel, sites, config.fit_lambda)?;
        let spatial = Mlp::new(SPATIAL_PREFIX, &config.spatial_layers());
        let aggregators = (1..=config.levels)
            .map(|m| Mlp::new(&format!("nab{m}"), &config.nab_layers()))
            .collect();
        Ok(Self {
            config,
            geometry,
            spatial,
            aggregators,
            params: ParameterStore::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn spatial_net(&self) -> &Mlp {
        &self.spatial
    }

    pub fn aggregator(&self, level: usize) -> &Mlp {
        &self.aggregators[level - 1]
    }

    /// `G·S_f` for each feature, formed once per forward pass.
    pub fn feature_products(&self, g: &mut Graph, params: &ParameterStore) -> Result<Vec<Var>> {
        let features = build_spatial_features(g, params, &self.spatial, &self.geometry)?;
        let transform = g.constant(self.geometry.transform().clone());
        features.iter().map(|&s| g.matmul(transform, s)).collect()
    }

    /// `(n·B) × (F·M + 1)` rows of `Φ[c⁰ | C¹ | … | Cᴹ]`.
    pub fn multilevel_features(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        products: &[Var],
        phi: Var,
        c0: Var,
    ) -> Result<Var> {
        let mut columns = vec![g.matmul(phi, c0)?];
        let mut c = c0;
        for net in &self.aggregators {
            let level = lstb_with_products(g, products, c)?;
            for &col in &level {
                columns.push(g.matmul(phi, col)?);
            }
            c = nab_forward(g, params, net, &level)?;
        }
        site_rows(g, &columns)
    }
}

impl Forecaster for UmtnModel {
    fn name(&self) -> &'static str {
        "umtn"
    }

    fn params(&self) -> &ParameterStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn min_observed(&self) -> usize {
        1
    }

    fn rollout(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        spec: &RolloutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Rollout> {
        let n = self.geometry.n_sites();
        let batch = spec.validate(n, 1)?;
        let products = self.feature_products(g, params)?;
        let phi = g.constant(self.geometry.phi().clone());
        let fit = g.constant(self.geometry.fit_operator().clone());
        let mut hidden = g.constant(Matrix::zeros(n * batch, self.config.rfn_hidden));
        drive(g, spec, n, 1, rng, |g, inputs| {
            let u = *inputs.last().expect("nonempty");
            let c0 = g.matmul(fit, u)?;
            let rows = self.multilevel_features(g, params, &products, phi, c0)?;
            let (y, h) = rfn_step(g, params, rows, hidden)?;
            hidden = h;
            g.reshape(y, n, batch)
        })
    }
}

fn default_drc_width() -> usize {
    16
}
fn default_drc_aggregator() -> Vec<usize> {
    vec![128, 64, 32]
}
fn default_past() -> usize {
    2
}

/// Single spatial block followed by a per-site feed-forward aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrcConfig {
    #[serde(default = "default_drc_width")]
    pub feature_width: usize,
    #[serde(default = "default_spatial_hidden")]
    pub spatial_hidden: Vec<usize>,
    #[serde(default = "default_drc_aggregator")]
    pub aggregator_hidden: Vec<usize>,
    /// Raw past frames appended to the spatial features.
    #[serde(default = "default_past")]
    pub past_frames: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_lambda")]
    pub fit_lambda: f64,
}

impl Default for DrcConfig {
    fn default() -> Self {
        Self {
            feature_width: default_drc_width(),
            spatial_hidden: default_spatial_hidden(),
            aggregator_hidden: default_drc_aggregator(),
            past_frames: default_past(),
            dim: default_dim(),
            fit_lambda: default_lambda(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DrcModel {
    config: DrcConfig,
    geometry: Geometry,
    spatial: Mlp,
    aggregator: Mlp,
    params: ParameterStore,
}

impl DrcModel {
    pub fn new(config: DrcConfig, kernel: RadialKernel, sites: &SiteSet, seed: u64) -> Result<Self> {
        ensure!(config.past_frames >= 1, Config, "past frame count must be positive");
        ensure!(config.feature_width >= 1, Config, "feature width must be positive");
        ensure!(
            sites.dim() == config.dim,
            Argument,
            "model is configured for dimension {}, sites have dimension {}",
            config.dim,
            sites.dim()
        );
        let geometry = Geometry::build(kernel, sites, config.fit_lambda)?;
        let mut sizes = vec![2 * config.dim + 1];
        sizes.extend(&config.spatial_hidden);
        sizes.push(config.feature_width);
        let spatial = Mlp::new("drc.spatial", &sizes);
        let mut sizes = vec![config.feature_width + config.past_frames];
        sizes.extend(&config.aggregator_hidden);
        sizes.push(1);
        let aggregator = Mlp::new("drc.aggregator", &sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        spatial.register(&mut params, &mut rng)?;
        aggregator.register(&mut params, &mut rng)?;
        Ok(Self {
            config,
            geometry,
            spatial,
            aggregator,
            params,
        })
    }

    pub fn config(&self) -> &DrcConfig {
        &self.config
    }

    pub fn spatial_net(&self) -> &Mlp {
        &self.spatial
    }

    pub fn aggregator_net(&self) -> &Mlp {
        &self.aggregator
    }

    /// Next-step prediction from the last `p` frames (oldest first), each `n × B`.
    pub fn forward(&self, g: &mut Graph, params: &ParameterStore, products: &[Var], frames: &[Var]) -> Result<Var> {
        let p = self.config.past_frames;
        ensure!(frames.len() >= p, Argument, "need {p} past frames, got {}", frames.len());
        let current = *frames.last().expect("nonempty");
        let (n, batch) = g.shape(current);
        let phi = g.constant(self.geometry.phi().clone());
        let fit = g.constant(self.geometry.fit_operator().clone());
        let c = g.matmul(fit, current)?;
        let mut columns = Vec::with_capacity(self.config.feature_width + p);
        for col in lstb_with_products(g, products, c)? {
            columns.push(g.matmul(phi, col)?);
        }
        // Most recent frame first.
        columns.extend(frames.iter().rev().take(p));
        let rows = site_rows(g, &columns)?;
        let y = self.aggregator.forward(g, params, rows)?;
        g.reshape(y, n, batch)
    }

    pub fn feature_products(&self, g: &mut Graph, params: &ParameterStore) -> Result<Vec<Var>> {
        let features = build_spatial_features(g, params, &self.spatial, &self.geometry)?;
        let transform = g.constant(self.geometry.transform().clone());
        features.iter().map(|&s| g.matmul(transform, s)).collect()
    }
}

impl Forecaster for DrcModel {
    fn name(&self) -> &'static str {
        "drc"
    }

    fn params(&self) -> &ParameterStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    fn min_observed(&self) -> usize {
        self.config.past_frames
    }

    fn rollout(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        spec: &RolloutSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Rollout> {
        let n = self.geometry.n_sites();
        spec.validate(n, self.min_observed())?;
        let products = self.feature_products(g, params)?;
        drive(g, spec, n, self.min_observed(), rng, |g, inputs| {
            self.forward(g, params, &products, inputs)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::CollocationStepper;
    use crate::kernels::LinearOperatorSpec;
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_sites(n: usize, dim: usize, scale: f64, seed: u64) -> SiteSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(0.0..scale)).collect())
            .collect();
        SiteSet::new(pts).unwrap()
    }

    fn kernel() -> RadialKernel {
        RadialKernel::multiquadric(1.0).unwrap()
    }

    fn random_frames(n: usize, batch: usize, count: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| Matrix::from_fn(n, batch, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    /// Straight-line MLP evaluation on one input row.
    fn mlp_oracle(params: &ParameterStore, net: &Mlp, input: &[f64]) -> Vec<f64> {
        let layers = net.sizes.len() - 1;
        let mut h = input.to_vec();
        for k in 0..layers {
            let w = params.get(&net.weight_name(k)).unwrap();
            let b = params.get(&net.bias_name(k)).unwrap();
            let mut out = vec![0.0; w.ncols()];
            for (o, v) in out.iter_mut().enumerate() {
                let mut acc = b[(0, o)];
                for (i, x) in h.iter().enumerate() {
                    acc += x * w[(i, o)];
                }
                *v = if k + 1 < layers { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h
    }

    #[test]
    fn parameter_counts() {
        let m3 = ModelConfig::with_levels(3);
        assert_eq!(m3.spatial_param_count(), 5 * 64 + 64 + 64 * 32 + 32 + 32 * 8 + 8);
        assert_eq!(m3.nab_param_count(), 8 * 32 + 32 + 32 + 1);
        assert_eq!(m3.rfn_input_width(), 25);
        assert_eq!(m3.rfn_param_count(), 3 * 64 * (25 + 64 + 2) + 64 + 1);
        assert_eq!(m3.param_count(), 21228);

        let sites = random_sites(6, 2, 4.0, 1);
        for levels in 0..4 {
            let model = UmtnModel::new(ModelConfig::with_levels(levels), kernel(), &sites, 0).unwrap();
            let cfg = model.config();
            assert_eq!(model.params().count(), cfg.param_count());
            assert_eq!(model.params().count_prefix(SPATIAL_PREFIX), m3.spatial_param_count());
            assert_eq!(model.params().count_prefix("rfn."), cfg.rfn_param_count());
            assert_eq!(model.params().count_prefix("nab"), levels * m3.nab_param_count());
        }
        let bigger = random_sites(15, 2, 6.0, 2);
        let a = UmtnModel::new(ModelConfig::with_levels(2), kernel(), &sites, 0).unwrap();
        let b = UmtnModel::new(ModelConfig::with_levels(2), kernel(), &bigger, 0).unwrap();
        assert_eq!(a.params().count(), b.params().count());
    }

    #[test]
    fn zero_spatial_network_gives_zero_features() {
        let sites = random_sites(5, 2, 4.0, 3);
        let mut model = UmtnModel::new(ModelConfig::default(), kernel(), &sites, 1).unwrap();
        let names: Vec<String> = model.params().names().filter(|n| n.starts_with(SPATIAL_PREFIX)).map(String::from).collect();
        for name in names {
            model.params_mut().get_mut(&name).unwrap().fill(0.0);
        }
        let mut g = Graph::new();
        let feats = build_spatial_features(&mut g, model.params(), model.spatial_net(), model.geometry()).unwrap();
        assert_eq!(feats.len(), 8);
        for f in feats {
            assert_eq!(g.shape(f), (5, 5));
            assert!(g.value(f).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn spatial_features_match_pairwise_oracle() {
        let sites = random_sites(7, 2, 4.0, 4);
        let model = UmtnModel::new(ModelConfig::default(), kernel(), &sites, 2).unwrap();
        let mut g = Graph::no_grad();
        let feats = build_spatial_features(&mut g, model.params(), model.spatial_net(), model.geometry()).unwrap();
        for (i, j) in [(0, 0), (1, 4), (6, 2), (3, 5)] {
            let (xi, xj) = (sites.point(i), sites.point(j));
            let r = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let input = [xi[0], xi[1], xj[0], xj[1], kernel().eval(r).unwrap()];
            let want = mlp_oracle(model.params(), model.spatial_net(), &input);
            for (f, w) in want.iter().enumerate() {
                assert!((g.value(feats[f])[(i, j)] - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sites = random_sites(5, 3, 4.0, 5);
        let err = UmtnModel::new(ModelConfig::default(), kernel(), &sites, 0).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn zero_features_leave_coefficients_unchanged() {
        let mut g = Graph::new();
        let zero = g.constant(Matrix::zeros(4, 4));
        let gm = g.constant(Matrix::identity(4, 4));
        let c = g.constant(Matrix::from_fn(4, 2, |i, j| i as f64 - j as f64));
        let out = lstb_forward(&mut g, &[zero; 8], gm, c).unwrap();
        assert_eq!(out.len(), 8);
        for col in out {
            assert_eq!(g.value(col), g.value(c));
        }
    }

    #[test]
    fn lstb_reproduces_collocation_step() {
        // Heat equation on 10 sites in [0, 3].
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![3.0 * i as f64 / 9.0]).collect();
        let sites = SiteSet::new(pts).unwrap();
        let dt = 1e-3;
        let op = LinearOperatorSpec::diffusion(1, 1.0);
        let stepper = CollocationStepper::new(kernel(), &sites, &op, dt, None).unwrap();
        let system = stepper.system();
        let u: Vec<f64> = (0..10).map(|i| (0.3 * i as f64).sin()).collect();
        let c = system.fit_coefficients(&u, 0.0).unwrap();
        let next = system.phi() * stepper.step(&c, dt).unwrap();

        let s = stepper.h_matrix() - system.phi();
        let mut g = Graph::new();
        let sv = g.constant(s);
        let gv = g.constant(system.inverse().clone());
        let cv = g.constant(Matrix::from_column_slice(10, 1, c.as_slice()));
        let out = lstb_forward(&mut g, &[sv], gv, cv).unwrap();
        let phi = g.constant(system.phi().clone());
        let values = g.matmul(phi, out[0]).unwrap();
        let diff = (g.value(values) - Matrix::from_column_slice(10, 1, next.as_slice())).amax();
        assert!(diff < 1e-8, "max difference {diff:e}");
    }

    #[test]
    fn aggregator_matches_row_oracle() {
        let sites = random_sites(6, 2, 4.0, 6);
        let model = UmtnModel::new(ModelConfig::with_levels(1), kernel(), &sites, 3).unwrap();
        let columns = random_frames(6, 2, 8, 9);
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = columns.iter().map(|c| g.constant(c.clone())).collect();
        let out = nab_forward(&mut g, model.params(), model.aggregator(1), &vars).unwrap();
        assert_eq!(g.shape(out), (6, 2));
        for i in 0..6 {
            for b in 0..2 {
                let row: Vec<f64> = columns.iter().map(|c| c[(i, b)]).collect();
                let want = mlp_oracle(model.params(), model.aggregator(1), &row)[0];
                assert!((g.value(out)[(i, b)] - want).abs() < 1e-12);
            }
        }
        assert!(nab_forward(&mut g, model.params(), model.aggregator(1), &vars[..7]).is_err());
    }

    #[test]
    fn aggregator_with_zero_weights_outputs_bias() {
        let sites = random_sites(4, 2, 4.0, 7);
        let mut model = UmtnModel::new(ModelConfig::with_levels(1), kernel(), &sites, 3).unwrap();
        let net = model.aggregator(1).clone();
        for k in 0..2 {
            model.params_mut().get_mut(&net.weight_name(k)).unwrap().fill(0.0);
        }
        model.params_mut().get_mut(&net.bias_name(1)).unwrap().fill(0.25);
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = random_frames(4, 3, 8, 1).into_iter().map(|c| g.constant(c)).collect();
        let out = nab_forward(&mut g, model.params(), &net, &vars).unwrap();
        assert!(g.value(out).iter().all(|v| *v == 0.25));
    }

    #[test]
    fn multilevel_width_and_first_column() {
        let sites = random_sites(6, 2, 4.0, 8);
        let u = random_frames(6, 1, 1, 2).remove(0);
        let mut first = None;
        for levels in [0, 1, 3] {
            let model = UmtnModel::new(ModelConfig::with_levels(levels), kernel(), &sites, 1).unwrap();
            let mut g = Graph::no_grad();
            let products = model.feature_products(&mut g, model.params()).unwrap();
            let phi = g.constant(model.geometry().phi().clone());
            let fit = g.constant(model.geometry().fit_operator().clone());
            let uv = g.constant(u.clone());
            let c0 = g.matmul(fit, uv).unwrap();
            let rows = model.multilevel_features(&mut g, model.params(), &products, phi, c0).unwrap();
            assert_eq!(g.shape(rows), (6, 8 * levels + 1));
            let col0 = g.value(rows).column(0).into_owned();
            if let Some(prev) = &first {
                assert_eq!(&col0, prev);
            } else {
                first = Some(col0);
            }
        }
    }

    #[test]
    fn zero_level_features_reproduce_frame() {
        let sites = random_sites(8, 2, 6.0, 9);
        let mut cfg = ModelConfig::with_levels(0);
        cfg.fit_lambda = 1e-10;
        let model = UmtnModel::new(cfg, kernel(), &sites, 1).unwrap();
        let u = Matrix::from_fn(8, 1, |i, _| (0.7 * i as f64).cos());
        let mut g = Graph::no_grad();
        let products = model.feature_products(&mut g, model.params()).unwrap();
        let phi = g.constant(model.geometry().phi().clone());
        let fit = g.constant(model.geometry().fit_operator().clone());
        let uv = g.constant(u.clone());
        let c0 = g.matmul(fit, uv).unwrap();
        let rows = model.multilevel_features(&mut g, model.params(), &products, phi, c0).unwrap();
        assert!((g.value(rows) - &u).amax() < 1e-4);
    }

    fn rfn_store(input: usize, hidden: usize, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        register_rfn(&mut store, input, hidden, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        store
    }

    #[test]
    fn zero_gru_halves_hidden_state() {
        let mut store = rfn_store(3, 64, 1);
        for name in [rfn_names::W_INPUT, rfn_names::W_HIDDEN] {
            store.get_mut(name).unwrap().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_element(2, 3, 0.7));
        let h0 = Matrix::from_fn(2, 64, |i, j| (i as f64 - j as f64) / 10.0);
        let h = g.constant(h0.clone());
        let (_, h1) = rfn_step(&mut g, &store, x, h).unwrap();
        assert_eq!(g.shape(h1), (2, 64));
        assert!((g.value(h1) - h0 * 0.5).amax() < 1e-15);
    }

    #[test]
    fn zero_readout_predicts_zero() {
        let mut store = rfn_store(3, 64, 2);
        store.get_mut(rfn_names::READOUT_W).unwrap().fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_element(4, 3, 0.7));
        let h = g.constant(Matrix::from_element(4, 64, 0.3));
        let (y, _) = rfn_step(&mut g, &store, x, h).unwrap();
        assert_eq!(g.shape(y), (4, 1));
        assert!(g.value(y).iter().all(|v| *v == 0.0));
        let bad = g.constant(Matrix::zeros(4, 2));
        assert!(rfn_step(&mut g, &store, bad, h).is_err());
    }

    #[test]
    fn gru_cell_gradient_check() {
        let mut store = rfn_store(5, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for name in [rfn_names::B_INPUT, rfn_names::B_HIDDEN, rfn_names::READOUT_B] {
            store.get_mut(name).unwrap().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = random_frames(3, 5, 1, 5).remove(0);
        let h = random_frames(3, 6, 1, 6).remove(0);
        let report = crate::autodiff::gradient_check(&store, 1e-4, 1e-6, |g, s| {
            let xv = g.constant(x.clone());
            let hv = g.constant(h.clone());
            let (y, h1) = rfn_step(g, s, xv, hv)?;
            let (y2, _) = rfn_step(g, s, xv, h1)?;
            let a = g.sum_squares(y);
            let b = g.sum(y2);
            g.add(a, b)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn toy_model(levels: usize, n: usize, seed: u64) -> UmtnModel {
        let sites = random_sites(n, 2, 4.0, 100 + seed);
        UmtnModel::new(ModelConfig::with_levels(levels), kernel(), &sites, seed).unwrap()
    }

    fn run(model: &UmtnModel, spec: &RolloutSpec, seed: u64) -> Vec<Matrix> {
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = model.rollout(&mut g, model.params(), spec, &mut rng).unwrap();
        r.predictions.iter().map(|v| g.value(*v).clone()).collect()
    }

    #[test]
    fn rollout_lengths() {
        let model = toy_model(1, 5, 1);
        let frames = random_frames(5, 2, 6, 1);
        let out = run(&model, &RolloutSpec::closed_loop(&frames[..3], 0), 0);
        assert_eq!(out.len(), 2);
        let out = run(&model, &RolloutSpec::closed_loop(&frames[..3], 3), 0);
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].shape(), (5, 2));
        assert_eq!(model.forecast(&frames[..3], 3).unwrap().len(), 3);
    }

    #[test]
    fn teacher_probability_needs_values() {
        let model = toy_model(1, 5, 1);
        let frames = random_frames(5, 1, 6, 1);
        let spec = RolloutSpec {
            observed: &frames[..3],
            horizon: 3,
            teacher: None,
            teacher_prob: 0.5,
        };
        let mut g = Graph::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            model.rollout(&mut g, model.params(), &spec, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn full_teacher_forcing_uses_truth() {
        let model = toy_model(2, 5, 2);
        let frames = random_frames(5, 2, 6, 3);
        let forced = run(
            &model,
            &RolloutSpec {
                observed: &frames[..3],
                horizon: 3,
                teacher: Some(&frames),
                teacher_prob: 1.0,
            },
            0,
        );
        // Feeding all six frames as observations gives the same one-step predictions.
        let observed = run(&model, &RolloutSpec::closed_loop(&frames[..6], 0), 0);
        for (a, b) in forced.iter().zip(&observed) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn closed_loop_ignores_teacher_values() {
        let model = toy_model(1, 5, 3);
        let frames = random_frames(5, 2, 6, 4);
        let mut perturbed = frames.clone();
        for f in &mut perturbed[3..] {
            f.add_scalar_mut(10.0);
        }
        let spec = |t: &'static [Matrix]| RolloutSpec {
            observed: &t[..3],
            horizon: 3,
            teacher: Some(t),
            teacher_prob: 0.0,
        };
        let a = run(&model, &spec(Box::leak(frames.into_boxed_slice())), 0);
        let b = run(&model, &spec(Box::leak(perturbed.into_boxed_slice())), 0);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let frames = random_frames(6, 3, 8, 5);
        let spec = RolloutSpec {
            observed: &frames[..4],
            horizon: 4,
            teacher: Some(&frames),
            teacher_prob: 0.5,
        };
        let a = run(&toy_model(2, 6, 4), &spec, 9);
        let b = run(&toy_model(2, 6, 4), &spec, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn batching_matches_single_sequences() {
        let model = toy_model(2, 5, 5);
        let frames = random_frames(5, 3, 4, 6);
        let batched = model.forecast(&frames, 3).unwrap();
        for b in 0..3 {
            let single: Vec<Matrix> = frames.iter().map(|f| f.columns(b, 1).into_owned()).collect();
            let out = model.forecast(&single, 3).unwrap();
            for (x, y) in out.iter().zip(&batched) {
                assert!((x - y.columns(b, 1)).amax() < 1e-12);
            }
        }
    }

    /// Frames the model nearly reproduces: each step is the model's own
    /// one-step prediction plus a small perturbation.
    fn near_realizable_frames(model: &UmtnModel, count: usize, noise: f64, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.geometry().n_sites();
        let mut frames = vec![Matrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0))];
        while frames.len() < count {
            let next = model.forecast(&frames, 1).unwrap().remove(0);
            frames.push(next.map(|v| v + noise * rng.random_range(-1.0..1.0)));
        }
        frames
    }

    #[test]
    fn rollout_gradient_check() {
        // Residuals are kept small so the rounding of the loss value itself
        // stays below the tolerance on the smallest gradient entries, and the
        // instance is drawn until no ReLU input lies near its kink.
        let (model, frames) = (0..)
            .map(|seed| {
                let model = toy_model(2, 5, seed);
                let frames = near_realizable_frames(&model, 6, 1e-3, seed + 1);
                (model, frames)
            })
            .find(|(model, frames)| {
                let mut g = Graph::new();
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                model.rollout(&mut g, model.params(), &RolloutSpec::closed_loop(&frames[..3], 3), &mut rng).unwrap();
                g.relu_margin().unwrap() > 1e-4
            })
            .unwrap();
        let report = crate::autodiff::gradient_check(model.params(), 1e-4, 1e-5, |g, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let r = model.rollout(g, s, &RolloutSpec::closed_loop(&frames[..3], 3), &mut rng)?;
            squared_error_loss(g, &r, &frames)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, model.params().count());
    }

    #[test]
    fn drc_constant_with_zero_weights() {
        let sites = random_sites(5, 2, 4.0, 11);
        let mut model = DrcModel::new(DrcConfig::default(), kernel(), &sites, 0).unwrap();
        let names: Vec<String> = model.params().names().map(String::from).collect();
        for name in names {
            let v = if name == model.aggregator_net().bias_name(3) { 0.5 } else { 0.0 };
            model.params_mut().get_mut(&name).unwrap().fill(v);
        }
        let frames = random_frames(5, 2, 3, 1);
        let out = model.forecast(&frames, 2).unwrap();
        assert!(out.iter().all(|f| f.iter().all(|v| *v == 0.5)));
        assert!(model.forecast(&frames[..1], 2).is_err());
        assert_eq!(model.params().count_prefix("drc.spatial") - model.params().count_prefix("drc.spatial.l2"), 5 * 64 + 64 + 64 * 32 + 32);
        assert_eq!(model.params().get("drc.spatial.l2.weight").unwrap().ncols(), 16);
    }

    #[test]
    fn drc_matches_straight_line_oracle() {
        let sites = random_sites(3, 2, 4.0, 12);
        let model = DrcModel::new(DrcConfig::default(), kernel(), &sites, 5).unwrap();
        let frames = random_frames(3, 1, 2, 2);
        let got = model.forecast(&frames, 1).unwrap().remove(0);

        let geo = model.geometry();
        let c = geo.fit_operator() * &frames[1];
        let mut feats = vec![DMatrix::zeros(3, 3); 16];
        for i in 0..3 {
            for j in 0..3 {
                let (xi, xj) = (sites.point(i), sites.point(j));
                let input = [xi[0], xi[1], xj[0], xj[1], geo.phi()[(i, j)]];
                for (f, v) in mlp_oracle(model.params(), model.spatial_net(), &input).into_iter().enumerate() {
                    feats[f][(i, j)] = v;
                }
            }
        }
        for i in 0..3 {
            let mut row = Vec::new();
            for s in &feats {
                let cf: DVector<f64> = c.column(0) + geo.transform() * (s * c.column(0));
                row.push((geo.phi() * cf)[i]);
            }
            row.push(frames[1][(i, 0)]);
            row.push(frames[0][(i, 0)]);
            let want = mlp_oracle(model.params(), model.aggregator_net(), &row)[0];
            assert!((got[(i, 0)] - want).abs() < 1e-10, "site {i}: {} vs {want}", got[(i, 0)]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn permuting_sites_permutes_predictions(seed in 0u64..1000) {
            let n = 6;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sites = random_sites(n, 2, 4.0, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let permuted = sites.select(&perm).unwrap();
            let a = UmtnModel::new(ModelConfig::with_levels(2), kernel(), &sites, seed).unwrap();
            let b = UmtnModel::with_params(ModelConfig::with_levels(2), kernel(), &permuted, a.params()).unwrap();
            let frames = random_frames(n, 2, 3, seed + 1);
            let pframes: Vec<Matrix> = frames.iter().map(|f| f.select_rows(perm.iter())).collect();
            let ya = a.forecast(&frames, 2).unwrap();
            let yb = b.forecast(&pframes, 2).unwrap();
            for (x, y) in ya.iter().zip(&yb) {
                prop_assert!((x.select_rows(perm.iter()) - y).amax() < 1e-8);
            }
        }
    }
}
