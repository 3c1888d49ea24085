//! Classical quantized compressed sensing pipelines used for comparison:
//! compress-and-estimate (quantize `y`, then recover with OMP, BPDN or a
//! trained decoder net) and estimate-and-compress (exhaustive MMSE estimate,
//! then a Lloyd vector quantizer).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::quantizer::{
    lloyd_max_sq, lloyd_vq, sq_decode, sq_encode, uniform_sq, vq_quantize, ScalarQuantizer,
    VectorCodebook, DEFAULT_LLOYD_TOL,
};
use crate::rng::substream;
use crate::signal::{rate_bits, Dataset, MeasurementModel, NmseAccumulator};
use crate::trainer::{train, validate_hard, DeepVqcsModel, TrainConfig, TrainReport};

/// Ridge added when the selected OMP columns are numerically dependent.
pub const OMP_RIDGE: f64 = 1e-12;
pub const BPDN_MAX_INNER: usize = 10_000;
/// Largest number of supports the exhaustive MMSE estimator enumerates.
pub const MMSE_SUPPORT_GUARD: u64 = 100_000;
/// Floor on the noise variance in the MMSE evidence covariance.
pub const MMSE_MIN_NOISE_VARIANCE: f64 = 1e-12;

/// Constraint radius `sqrt(sigma_n) (1 + 1/I)` where `sigma_n` is the noise
/// standard deviation.
pub fn mu_qc(noise_variance: f64, levels: usize) -> f64 {
    noise_variance.sqrt().sqrt() * (1.0 + 1.0 / levels as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    pub estimate: DVector<f64>,
    /// Selected columns in selection order.
    pub support: Vec<usize>,
    /// Set when a ridge-regularized refit replaced plain least squares.
    pub ridge_used: bool,
}

/// Orthogonal matching pursuit with exactly `sparsity` greedy selections and
/// a least-squares refit after each one.
pub fn omp(phi: &DMatrix<f64>, y: &DVector<f64>, sparsity: usize) -> Result<OmpResult> {
    let (m, n) = phi.shape();
    if y.len() != m {
        return shape(format!("measurement length {} != {m}", y.len()));
    }
    if sparsity == 0 || sparsity > m {
        return config(format!("OMP sparsity must lie in 1..={m}, got {sparsity}"));
    }
    let mut support: Vec<usize> = Vec::with_capacity(sparsity);
    let mut selected = vec![false; n];
    let mut residual = y.clone();
    let mut coeffs = DVector::zeros(0);
    let mut ridge_used = false;
    for _ in 0..sparsity {
        let corr = phi.tr_mul(&residual);
        let mut best = (usize::MAX, -1.0);
        for (j, c) in corr.iter().enumerate() {
            if !selected[j] && c.abs() > best.1 {
                best = (j, c.abs());
            }
        }
        selected[best.0] = true;
        support.push(best.0);
        let sub = phi.select_columns(&support);
        let (c, ridge) = least_squares(&sub, y);
        ridge_used |= ridge;
        residual = y - &sub * &c;
        coeffs = c;
    }
    let mut estimate = DVector::zeros(n);
    for (&j, &c) in support.iter().zip(coeffs.iter()) {
        estimate[j] = c;
    }
    Ok(OmpResult {
        estimate,
        support,
        ridge_used,
    })
}

/// Least squares through QR; falls back to ridge-regularized normal
/// equations when `R` is numerically singular.
fn least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, bool) {
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    let rank_ok = scale > 0.0 && r.diagonal().iter().all(|d| d.abs() > 1e-10 * scale);
    if rank_ok {
        let qty = qr.q().tr_mul(y);
        if let Some(c) = r.solve_upper_triangular(&qty) {
            return (c, false);
        }
    }
    let mut gram = a.tr_mul(a);
    for i in 0..gram.nrows() {
        gram[(i, i)] += OMP_RIDGE;
    }
    let rhs = a.tr_mul(y);
    let c = Cholesky::new(gram)
        .map(|ch| ch.solve(&rhs))
        .unwrap_or_else(|| DVector::zeros(a.ncols()));
    (c, true)
}

/// `min ||x||_1 s.t. ||y_tilde - phi x||_2 <= epsilon`.
#[derive(Debug, Clone, Copy)]
pub struct BpdnProblem<'a> {
    pub phi: &'a DMatrix<f64>,
    pub y_tilde: &'a DVector<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpdnSolution {
    pub x: DVector<f64>,
    pub lambda: f64,
    pub residual_norm: f64,
    /// False when the residual target or an inner solve missed its tolerance.
    pub converged: bool,
}

/// Result of one penalized solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_history: Vec<f64>,
}

/// Basis pursuit denoising through the penalized form
/// `lambda ||x||_1 + ||y - phi x||^2`, minimized by FISTA with monotone
/// restart; `lambda` is bisected (in log scale) until the residual norm is
/// within 1% of the constraint radius.
#[derive(Debug, Clone)]
pub struct BpdnSolver {
    phi: DMatrix<f64>,
    /// Lipschitz constant of the gradient of the quadratic term.
    lipschitz: f64,
    pub max_inner: usize,
    pub inner_tol: f64,
    pub residual_tol: f64,
    pub max_bisections: usize,
}

impl BpdnSolver {
    pub fn new(phi: &DMatrix<f64>) -> Result<Self> {
        if phi.is_empty() || phi.iter().any(|v| !v.is_finite()) {
            return config("BPDN needs a finite, non-empty matrix");
        }
        let sigma_max = phi.singular_values().max();
        Ok(Self {
            phi: phi.clone(),
            lipschitz: 2.0 * sigma_max * sigma_max * (1.0 + 1e-12),
            max_inner: BPDN_MAX_INNER,
            inner_tol: 1e-10,
            residual_tol: 0.01,
            max_bisections: 80,
        })
    }

    fn objective(&self, y: &DVector<f64>, x: &DVector<f64>, lambda: f64) -> f64 {
        lambda * x.lp_norm(1) + (y - &self.phi * x).norm_squared()
    }

    fn prox_step(&self, y: &DVector<f64>, from: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let grad = self.phi.tr_mul(&(&self.phi * from - y)) * 2.0;
        let thresh = lambda / self.lipschitz;
        (from - grad / self.lipschitz).map(|v| v.signum() * (v.abs() - thresh).max(0.0))
    }

    /// FISTA with restart: whenever an accelerated step would raise the
    /// objective, momentum is dropped and a plain proximal step is taken, so
    /// the objective never increases.
    pub fn solve_penalized(
        &self,
        y: &DVector<f64>,
        lambda: f64,
        warm_start: Option<&DVector<f64>>,
    ) -> Result<PenalizedSolution> {
        if y.len() != self.phi.nrows() {
            return shape(format!(
                "measurement length {} != {}",
                y.len(),
                self.phi.nrows()
            ));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return config(format!("penalty weight must be positive, got {lambda}"));
        }
        let mut x = match warm_start {
            Some(w) if w.len() == self.phi.ncols() => w.clone(),
            Some(_) => return shape("warm start has the wrong length"),
            None => DVector::zeros(self.phi.ncols()),
        };
        let mut f_x = self.objective(y, &x, lambda);
        let mut z = x.clone();
        let mut theta = 1.0f64;
        let mut history = vec![f_x];
        for k in 1..=self.max_inner {
            let mut x_new = self.prox_step(y, &z, lambda);
            let mut f_new = self.objective(y, &x_new, lambda);
            if f_new > f_x {
                theta = 1.0;
                x_new = self.prox_step(y, &x, lambda);
                f_new = self.objective(y, &x_new, lambda);
                if f_new > f_x {
                    // Only rounding can get here; keep the current iterate.
                    x_new = x.clone();
                    f_new = f_x;
                }
            }
            let theta_new = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
            let diff = &x_new - &x;
            z = &x_new + &diff * ((theta - 1.0) / theta_new);
            let step = diff.norm();
            let size = x_new.norm();
            x = x_new;
            f_x = f_new;
            theta = theta_new;
            history.push(f_x);
            if step <= self.inner_tol * size.max(1e-300) || (size == 0.0 && step == 0.0) {
                return Ok(PenalizedSolution {
                    x,
                    iterations: k,
                    converged: true,
                    objective_history: history,
                });
            }
        }
        Ok(PenalizedSolution {
            x,
            iterations: self.max_inner,
            converged: false,
            objective_history: history,
        })
    }

    /// Smallest residual norm reachable by any `x` (least squares).
    pub fn attainable_residual(&self, y: &DVector<f64>) -> f64 {
        let svd = self.phi.clone().svd(true, false);
        let u = svd.u.expect("requested U");
        let scale = svd.singular_values.max();
        let mut proj = DVector::zeros(y.len());
        for (i, s) in svd.singular_values.iter().enumerate() {
            if *s > 1e-12 * scale {
                let ui = u.column(i);
                proj += ui * ui.dot(y);
            }
        }
        (y - proj).norm()
    }

    pub fn solve(&self, problem: &BpdnProblem<'_>) -> Result<BpdnSolution> {
        let y = problem.y_tilde;
        if problem.phi.shape() != self.phi.shape() {
            return shape("problem matrix does not match the solver");
        }
        if !(problem.epsilon >= 0.0) || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "BPDN needs a finite y and epsilon >= 0".into(),
            ));
        }
        let n = self.phi.ncols();
        let y_norm = y.norm();
        let lambda_max = 2.0 * self.phi.tr_mul(y).amax();
        if y_norm <= problem.epsilon || lambda_max == 0.0 {
            return Ok(BpdnSolution {
                x: DVector::zeros(n),
                lambda: lambda_max,
                residual_norm: y_norm,
                converged: true,
            });
        }
        // The residual grows with lambda; bracket the target, then bisect in
        // log scale with warm starts.
        let target = problem
            .epsilon
            .max(self.attainable_residual(y))
            .max(1e-12 * y_norm);
        let within = |r: f64| (r - target).abs() <= self.residual_tol * target;
        let mut hi = lambda_max;
        let mut lo = lambda_max;
        let mut best: Option<(PenalizedSolution, f64, f64)> = None;
        let mut warm: Option<DVector<f64>> = None;
        let mut solves = 0;
        let mut all_converged = true;
        loop {
            lo *= 0.1;
            let sol = self.solve_penalized(y, lo, warm.as_ref())?;
            solves += 1;
            all_converged &= sol.converged;
            let r = (y - &self.phi * &sol.x).norm();
            warm = Some(sol.x.clone());
            if within(r) {
                return Ok(self.finish(sol, lo, r, all_converged, true));
            }
            let closer = best
                .as_ref()
                .is_none_or(|b| (r - target).abs() < (b.2 - target).abs());
            if closer {
                best = Some((sol, lo, r));
            }
            if r < target {
                break;
            }
            hi = lo;
            if solves >= self.max_bisections || lo < 1e-300 {
                let (sol, lam, r) = best.expect("at least one solve");
                return Ok(self.finish(sol, lam, r, false, false));
            }
        }
        while solves < self.max_bisections {
            let mid = (lo.ln() + 0.5 * (hi.ln() - lo.ln())).exp();
            let sol = self.solve_penalized(y, mid, warm.as_ref())?;
            solves += 1;
            all_converged &= sol.converged;
            let r = (y - &self.phi * &sol.x).norm();
            warm = Some(sol.x.clone());
            if within(r) {
                return Ok(self.finish(sol, mid, r, all_converged, true));
            }
            let closer = best
                .as_ref()
                .is_none_or(|b| (r - target).abs() < (b.2 - target).abs());
            if closer {
                best = Some((sol, mid, r));
            }
            if r < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (sol, lam, r) = best.expect("at least one solve");
        Ok(self.finish(sol, lam, r, false, false))
    }

    fn finish(
        &self,
        sol: PenalizedSolution,
        lambda: f64,
        residual_norm: f64,
        inner_ok: bool,
        target_met: bool,
    ) -> BpdnSolution {
        let converged = inner_ok && target_met;
        if !converged {
            log::warn!(
                "BPDN missed its tolerance (lambda {lambda:.3e}, residual {residual_norm:.3e})"
            );
        }
        BpdnSolution {
            x: sol.x,
            lambda,
            residual_norm,
            converged,
        }
    }
}

/// One-shot BPDN solve.
pub fn bpdn(problem: &BpdnProblem<'_>) -> Result<BpdnSolution> {
    BpdnSolver::new(problem.phi)?.solve(problem)
}

/// Per-support quantities of the Gaussian posterior.
#[derive(Debug, Clone)]
struct SupportTerm {
    support: Vec<usize>,
    /// Inverse of `phi_T phi_T^T + sigma^2 I`.
    cov_inv: DMatrix<f64>,
    log_det: f64,
    /// `phi_T^T (phi_T phi_T^T + sigma^2 I)^{-1}`, the conditional-mean gain.
    gain: DMatrix<f64>,
}

/// Posterior-mean estimator of an exactly `S`-sparse source with i.i.d.
/// `N(0, 1)` nonzeros and uniformly drawn supports, by enumeration of every
/// support.
///
/// For a support `T`, `y | T ~ N(0, C_T)` with `C_T = phi_T phi_T^T + sigma^2 I`,
/// and `E[x_T | y, T] = phi_T^T C_T^{-1} y`. The estimate mixes these
/// conditional means with weights `p(T | y)` proportional to the Gaussian
/// evidence (the uniform support prior cancels).
#[derive(Debug, Clone)]
pub struct MmseEstimator {
    n_dim: usize,
    m_dim: usize,
    terms: Vec<SupportTerm>,
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

fn for_each_subset(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        if idx[i] == i + n - k {
            return;
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

impl MmseEstimator {
    pub fn new(model: &MeasurementModel, sparsity: usize) -> Result<Self> {
        let (m, n) = model.phi.shape();
        if sparsity > n {
            return config(format!("sparsity {sparsity} exceeds N = {n}"));
        }
        let count = binomial(n, sparsity);
        if count > MMSE_SUPPORT_GUARD {
            return Err(Error::Refused(format!(
                "C({n}, {sparsity}) = {count} supports exceeds the enumeration guard of {MMSE_SUPPORT_GUARD}"
            )));
        }
        let var = model.noise_variance.max(MMSE_MIN_NOISE_VARIANCE);
        let mut terms = Vec::with_capacity(count as usize);
        let mut failure = None;
        let mut build = |support: &[usize]| {
            let sub = model.phi.select_columns(support);
            let mut cov = &sub * sub.transpose();
            for i in 0..m {
                cov[(i, i)] += var;
            }
            match Cholesky::<f64, Dyn>::new(cov) {
                Some(ch) => {
                    let log_det = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                    let cov_inv = ch.inverse();
                    let gain = sub.transpose() * &cov_inv;
                    terms.push(SupportTerm {
                        support: support.to_vec(),
                        cov_inv,
                        log_det,
                        gain,
                    });
                }
                None => failure = Some(support.to_vec()),
            }
        };
        if sparsity == 0 {
            build(&[]);
        } else {
            for_each_subset(n, sparsity, &mut build);
        }
        if let Some(s) = failure {
            return Err(Error::Domain(format!(
                "evidence covariance of support {s:?} is singular"
            )));
        }
        Ok(Self {
            n_dim: n,
            m_dim: m,
            terms,
        })
    }

    pub fn support_count(&self) -> usize {
        self.terms.len()
    }

    pub fn estimate(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.m_dim {
            return shape(format!("measurement length {} != {}", y.len(), self.m_dim));
        }
        let log_w: Vec<f64> = self
            .terms
            .iter()
            .map(|t| -0.5 * (y.dot(&(&t.cov_inv * y)) + t.log_det))
            .collect();
        let peak = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut est = DVector::zeros(self.n_dim);
        for (t, lw) in self.terms.iter().zip(&log_w) {
            let w = (lw - peak).exp();
            total += w;
            if w == 0.0 {
                continue;
            }
            let mean = &t.gain * y;
            for (&j, v) in t.support.iter().zip(mean.iter()) {
                est[j] += w * v;
            }
        }
        Ok(est / total)
    }
}

pub fn mmse_exhaustive(
    model: &MeasurementModel,
    y: &DVector<f64>,
    sparsity: usize,
) -> Result<DVector<f64>> {
    MmseEstimator::new(model, sparsity)?.estimate(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    UniformSq,
    LloydSq,
    LloydVq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Omp,
    Bpdn,
    Decnet,
}

/// A compress-and-estimate pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct CePipelineSpec {
    pub quantizer: QuantizerKind,
    pub decoder: DecoderKind,
    /// Levels per measurement for scalar quantizers.
    pub levels: usize,
    /// Codebook size exponent for the vector quantizer.
    pub codebook_bits: u32,
    /// Overrides the default constraint radius.
    pub mu_qc: Option<f64>,
    /// Half-width of the uniform range in standard deviations.
    pub usq_range_sigmas: f64,
    /// Training setup for the decoder-net variant.
    pub decnet: Option<TrainConfig>,
    pub seed: u64,
}

impl CePipelineSpec {
    pub fn scalar(quantizer: QuantizerKind, decoder: DecoderKind, levels: usize) -> Self {
        Self {
            quantizer,
            decoder,
            levels,
            codebook_bits: 0,
            mu_qc: None,
            usq_range_sigmas: 4.0,
            decnet: None,
            seed: 0,
        }
    }

    pub fn vector(decoder: DecoderKind, codebook_bits: u32) -> Self {
        Self {
            codebook_bits,
            levels: 1usize << codebook_bits,
            ..Self::scalar(QuantizerKind::LloydVq, decoder, 1)
        }
    }

    /// Rate in bits per source entry and the `(K, I, codebook bits)` it was
    /// computed from.
    pub fn rate(&self, n_dim: usize, m_dim: usize) -> (f64, usize, usize, Option<u32>) {
        match self.quantizer {
            QuantizerKind::LloydVq => (
                self.codebook_bits as f64 / n_dim as f64,
                m_dim,
                1usize << self.codebook_bits,
                Some(self.codebook_bits),
            ),
            _ => (
                rate_bits(m_dim, self.levels, n_dim),
                m_dim,
                self.levels,
                None,
            ),
        }
    }
}

/// Rate and distortion of one baseline run.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub rate: f64,
    pub nmse_db: f64,
    pub k_width: usize,
    pub levels: usize,
    pub codebook_bits: Option<u32>,
}

/// Measurement quantizer designed on training data.
#[derive(Debug, Clone)]
pub enum MeasurementQuantizer {
    /// One scalar quantizer per measurement coordinate.
    PerCoordinate(Vec<ScalarQuantizer>),
    Vector(VectorCodebook),
}

impl MeasurementQuantizer {
    pub fn design(spec: &CePipelineSpec, train_y: &DMatrix<f64>) -> Result<Self> {
        match spec.quantizer {
            QuantizerKind::UniformSq => {
                let qs = train_y
                    .row_iter()
                    .map(|row| {
                        let n = row.len() as f64;
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let half = spec.usq_range_sigmas * var.sqrt().max(1e-12);
                        uniform_sq(mean - half, mean + half, spec.levels)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self::PerCoordinate(qs))
            }
            QuantizerKind::LloydSq => {
                let qs = train_y
                    .row_iter()
                    .map(|row| {
                        let samples: Vec<f64> = row.iter().copied().collect();
                        lloyd_max_sq(&samples, spec.levels, DEFAULT_LLOYD_TOL)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self::PerCoordinate(qs))
            }
            QuantizerKind::LloydVq => {
                let size = 1usize << spec.codebook_bits;
                let mut rng = substream(spec.seed, 0);
                Ok(Self::Vector(lloyd_vq(
                    train_y,
                    size,
                    DEFAULT_LLOYD_TOL,
                    &mut rng,
                )?))
            }
        }
    }

    /// Indices of `y`: one 1-based index per coordinate for scalar
    /// quantizers, a single 0-based codeword index for the vector quantizer.
    pub fn encode(&self, y: &DVector<f64>) -> Result<Vec<usize>> {
        match self {
            Self::PerCoordinate(qs) => {
                if qs.len() != y.len() {
                    return shape(format!("measurement length {} != {}", y.len(), qs.len()));
                }
                qs.iter()
                    .zip(y.iter())
                    .map(|(q, &v)| sq_encode(q, v))
                    .collect()
            }
            Self::Vector(book) => Ok(vec![vq_quantize(book, y)?.0]),
        }
    }

    pub fn dequantize(&self, indices: &[usize]) -> Result<DVector<f64>> {
        match self {
            Self::PerCoordinate(qs) => {
                if qs.len() != indices.len() {
                    return shape(format!(
                        "{} indices for {} quantizers",
                        indices.len(),
                        qs.len()
                    ));
                }
                let vals = qs
                    .iter()
                    .zip(indices)
                    .map(|(q, &i)| sq_decode(q, i))
                    .collect::<Result<Vec<_>>>()?;
                Ok(DVector::from_vec(vals))
            }
            Self::Vector(book) => match indices {
                [i] => Ok(book.codeword(*i)?.into_owned()),
                _ => shape(format!(
                    "vector quantizer expects one index, got {}",
                    indices.len()
                )),
            },
        }
    }
}

/// Sparse-recovery decoder applied to dequantized measurements.
#[derive(Debug, Clone)]
pub enum MeasurementDecoder {
    Omp { phi: DMatrix<f64>, sparsity: usize },
    Bpdn { solver: BpdnSolver, epsilon: f64 },
}

impl MeasurementDecoder {
    pub fn recover(&self, y_tilde: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::Omp { phi, sparsity } => Ok(omp(phi, y_tilde, *sparsity)?.estimate),
            Self::Bpdn { solver, epsilon } => {
                let problem = BpdnProblem {
                    phi: &solver.phi,
                    y_tilde,
                    epsilon: *epsilon,
                };
                Ok(solver.solve(&problem)?.x)
            }
        }
    }
}

/// A designed compress-and-estimate pipeline.
#[derive(Debug, Clone)]
pub struct CeCodec {
    pub quantizer: MeasurementQuantizer,
    pub decoder: MeasurementDecoder,
}

impl CeCodec {
    /// Designs the measurement quantizer on `train_set`. The decoder-net
    /// variant is trained instead, through [`train_ce_decnet`].
    pub fn design(
        spec: &CePipelineSpec,
        model: &MeasurementModel,
        train_set: &Dataset,
        sparsity: usize,
    ) -> Result<Self> {
        if train_set.n_dim() != model.n_dim || train_set.m_dim() != model.m_dim {
            return shape("dataset dimensions do not match the measurement model");
        }
        let (_, _, levels, _) = spec.rate(model.n_dim, model.m_dim);
        let decoder = match spec.decoder {
            DecoderKind::Omp => MeasurementDecoder::Omp {
                phi: model.phi.clone(),
                sparsity: sparsity.max(1),
            },
            DecoderKind::Bpdn => MeasurementDecoder::Bpdn {
                solver: BpdnSolver::new(&model.phi)?,
                epsilon: spec
                    .mu_qc
                    .unwrap_or_else(|| mu_qc(model.noise_variance, levels)),
            },
            DecoderKind::Decnet => {
                return config("the decoder-net pipeline is trained, not designed")
            }
        };
        let quantizer = MeasurementQuantizer::design(spec, &train_set.measurements)?;
        Ok(Self { quantizer, decoder })
    }

    pub fn encode(&self, y: &DVector<f64>) -> Result<Vec<usize>> {
        self.quantizer.encode(y)
    }

    pub fn decode(&self, indices: &[usize]) -> Result<DVector<f64>> {
        self.decoder.recover(&self.quantizer.dequantize(indices)?)
    }
}

/// Trains the decoder-net pipeline: a learned scalar quantizer applied to
/// `y` directly, followed by a decoder net.
pub fn train_ce_decnet(
    spec: &CePipelineSpec,
    model: &MeasurementModel,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(DeepVqcsModel, TrainReport)> {
    let (n, m) = (model.n_dim, model.m_dim);
    let mut cfg = spec
        .decnet
        .clone()
        .unwrap_or_else(|| TrainConfig::standard(n, m, m, spec.levels));
    cfg.n_dim = n;
    cfg.m_dim = m;
    cfg.k_width = m;
    cfg.num_levels = spec.levels;
    cfg.use_encoder = false;
    train(&cfg, train_set, val_set)
}

/// Compress-and-estimate baseline. `val_set` is only used by the decoder-net
/// variant, for model selection.
pub fn run_ce_baseline(
    spec: &CePipelineSpec,
    model: &MeasurementModel,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
) -> Result<BaselineOutcome> {
    for d in [train_set, val_set, test_set] {
        if d.n_dim() != model.n_dim || d.m_dim() != model.m_dim {
            return shape("dataset dimensions do not match the measurement model");
        }
    }
    let (rate, k_width, levels, codebook_bits) = spec.rate(model.n_dim, model.m_dim);
    let nmse_db = if spec.decoder == DecoderKind::Decnet {
        let (trained, _) = train_ce_decnet(spec, model, train_set, val_set)?;
        validate_hard(&trained, test_set)?
    } else {
        let codec = CeCodec::design(spec, model, train_set, test_set.sparsity)?;
        let mut acc = NmseAccumulator::default();
        for k in 0..test_set.len() {
            let est = codec.decode(&codec.encode(&test_set.measurement(k).into_owned())?)?;
            acc.add(est.as_view(), test_set.source(k));
        }
        acc.nmse_db()?
    };
    Ok(BaselineOutcome {
        rate,
        nmse_db,
        k_width,
        levels,
        codebook_bits,
    })
}

/// Estimate-and-compress codec: exhaustive MMSE estimate, then a Lloyd VQ
/// designed on the MMSE estimates of the training measurements.
#[derive(Debug, Clone)]
pub struct EcVqCodec {
    pub mmse: MmseEstimator,
    pub book: VectorCodebook,
}

impl EcVqCodec {
    pub fn design(
        model: &MeasurementModel,
        train_set: &Dataset,
        codebook_bits: u32,
        seed: u64,
    ) -> Result<Self> {
        if codebook_bits > 24 {
            return config(format!("{codebook_bits}-bit codebooks are out of reach"));
        }
        let mmse = MmseEstimator::new(model, train_set.sparsity)?;
        let mut estimates = DMatrix::zeros(model.n_dim, train_set.len());
        for k in 0..train_set.len() {
            let est = mmse.estimate(&train_set.measurement(k).into_owned())?;
            estimates.set_column(k, &est);
        }
        let mut rng = substream(seed, 0);
        let book = lloyd_vq(
            &estimates,
            1usize << codebook_bits,
            DEFAULT_LLOYD_TOL,
            &mut rng,
        )?;
        Ok(Self { mmse, book })
    }

    pub fn encode(&self, y: &DVector<f64>) -> Result<Vec<usize>> {
        Ok(vec![vq_quantize(&self.book, &self.mmse.estimate(y)?)?.0])
    }

    pub fn decode(&self, indices: &[usize]) -> Result<DVector<f64>> {
        match indices {
            [i] => Ok(self.book.codeword(*i)?.into_owned()),
            _ => shape(format!("EC-VQ expects one index, got {}", indices.len())),
        }
    }
}

pub fn run_ec_vq(
    model: &MeasurementModel,
    train_set: &Dataset,
    test_set: &Dataset,
    codebook_bits: u32,
    seed: u64,
) -> Result<BaselineOutcome> {
    let codec = EcVqCodec::design(model, train_set, codebook_bits, seed)?;
    let mut acc = NmseAccumulator::default();
    for k in 0..test_set.len() {
        let est = codec.decode(&codec.encode(&test_set.measurement(k).into_owned())?)?;
        acc.add(est.as_view(), test_set.source(k));
    }
    Ok(BaselineOutcome {
        rate: codebook_bits as f64 / model.n_dim as f64,
        nmse_db: acc.nmse_db()?,
        k_width: model.n_dim,
        levels: 1usize << codebook_bits,
        codebook_bits: Some(codebook_bits),
    })
}
