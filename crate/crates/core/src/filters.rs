//! Filter mathematics: Chebyshev spatial filters, Gaussian-smearing spectral
//! filters with frequency windowing, and the hybrid filter that sums both
//! branches. The polynomial branch runs as a sparse three-term recurrence
//! and is strictly local; the spectral branch acts inside the retained
//! low-frequency eigenspace and reaches the whole graph at once.
//!
//! Zero-frequency (admissibility) corrections are applied lazily at
//! evaluation time so raw learnable parameters stay unconstrained.

use crate::dense::Mat;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormalizedLaplacian};
use crate::spectral::{DenseEvd, PartialEvd};
use serde::{Deserialize, Serialize};

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus on (0, inf): ln(e^y − 1).
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "inverse_softplus needs a positive argument");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Chebyshev polynomial coefficients over the rescaled spectrum
/// λ̃ = 2λ/λ_max − 1. `omega` has length rho + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebCoeffs {
    pub omega: Vec<f64>,
    pub lambda_max: f64,
}

impl ChebCoeffs {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::InvalidArgument(
                "Chebyshev coefficients need at least the constant term".into(),
            ));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                context: "Chebyshev coefficients".into(),
            });
        }
        Ok(ChebCoeffs {
            omega,
            lambda_max: 2.0,
        })
    }

    pub fn rho(&self) -> usize {
        self.omega.len() - 1
    }

    /// Delta coefficients (1, 0, …, 0): the identity filter of order rho.
    pub fn delta(rho: usize) -> Self {
        let mut omega = vec![0.0; rho + 1];
        omega[0] = 1.0;
        ChebCoeffs {
            omega,
            lambda_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// cos²(πλ / (2λ_cut)) below λ_cut, exactly 0 at and beyond it.
    Cosine,
    /// No windowing; the Gaussian tails decide the reach.
    None,
}

impl std::str::FromStr for Window {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cos" | "taper" => Ok(Window::Cosine),
            "none" => Ok(Window::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown window {other:?} (expected cosine or none)"
            ))),
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Window::Cosine => write!(f, "cosine"),
            Window::None => write!(f, "none"),
        }
    }
}

/// Gaussian-smearing spectral filter: S(λ) = basis(λ)ᵀ·W with z Gaussians
/// centered uniformly on [0, λ_cut].
///
/// `centers` and `gamma` are derived from (z, λ_cut) at construction; change
/// geometry by rebuilding, mutate only `w` in place (the learnable part).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralParams {
    pub lambda_cut: f64,
    pub centers: Vec<f64>,
    pub gamma: f64,
    pub w: Mat,
    pub window: Window,
}

impl SpectralParams {
    pub fn new(z: usize, lambda_cut: f64, w: Mat, window: Window) -> Result<Self> {
        if z == 0 {
            return Err(Error::InvalidArgument(
                "spectral basis needs z >= 1".into(),
            ));
        }
        if !(lambda_cut > 0.0 && lambda_cut <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_cut must lie in (0, 2], got {lambda_cut}"
            )));
        }
        if w.rows() != z {
            return Err(Error::DimensionMismatch {
                context: "spectral weight matrix".into(),
                expected: format!("{z} rows"),
                got: format!("{} rows", w.rows()),
            });
        }
        if !w.is_finite() {
            return Err(Error::NonFinite {
                context: "spectral weights".into(),
            });
        }
        // Width ties to the center spacing; a single basis function falls
        // back to the full band width.
        let spacing = if z == 1 {
            lambda_cut
        } else {
            lambda_cut / (z - 1) as f64
        };
        let centers: Vec<f64> = if z == 1 {
            vec![0.0]
        } else {
            (0..z).map(|j| j as f64 * spacing).collect()
        };
        Ok(SpectralParams {
            lambda_cut,
            centers,
            gamma: 1.0 / (2.0 * spacing * spacing),
            w,
            window,
        })
    }

    pub fn z(&self) -> usize {
        self.centers.len()
    }

    /// Output channel count d.
    pub fn dim_out(&self) -> usize {
        self.w.cols()
    }

    fn window_at(&self, lambda: f64) -> f64 {
        match self.window {
            Window::None => 1.0,
            Window::Cosine => {
                if lambda < self.lambda_cut {
                    let c = (std::f64::consts::PI * lambda / (2.0 * self.lambda_cut)).cos();
                    c * c
                } else {
                    0.0
                }
            }
        }
    }

    fn window_at_d(&self, lambda: f64) -> (f64, f64) {
        match self.window {
            Window::None => (1.0, 0.0),
            Window::Cosine => {
                if lambda < self.lambda_cut {
                    let u = std::f64::consts::PI * lambda / (2.0 * self.lambda_cut);
                    let c = u.cos();
                    let dv = -std::f64::consts::PI / self.lambda_cut * u.sin() * c;
                    (c * c, dv)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterRole {
    /// Low-pass companion; never subject to zero-frequency corrections.
    Scaling,
    /// Band-pass filter; corrected to vanish at λ = 0 when admissible.
    Wavelet,
}

impl std::str::FromStr for FilterRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaling" => Ok(FilterRole::Scaling),
            "wavelet" => Ok(FilterRole::Wavelet),
            other => Err(Error::InvalidArgument(format!(
                "unknown filter role {other:?} (expected scaling or wavelet)"
            ))),
        }
    }
}

/// How the zero-frequency correction enters an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    /// Raw responses, no subtraction.
    Plain,
    /// Subtract the λ=0 response of each branch: P−P(0), S−S(0).
    ZeroFreq,
    /// Residual-connection form: subtract P(0)+1/2 and S(0)+1/2 per branch.
    /// The caller adds the identity term, restoring a response of 0 at λ=0.
    ResidualShift,
}

/// Hybrid filter: polynomial branch + truncated-spectral branch.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridFilter {
    pub cheb: ChebCoeffs,
    pub spec: SpectralParams,
    pub admissible: bool,
    pub role: FilterRole,
}

impl HybridFilter {
    /// Correction mode implied by the filter's flags. Scaling filters are
    /// never corrected; wavelets are, unless admissibility is switched off.
    pub fn correction(&self, residual_form: bool) -> Correction {
        if self.role != FilterRole::Wavelet || !self.admissible {
            Correction::Plain
        } else if residual_form {
            Correction::ResidualShift
        } else {
            Correction::ZeroFreq
        }
    }
}

/// Learnable scale-range parameters. Effective scales come out of
/// `compute_scales`; t_L and t_U are unconstrained reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub t_l: f64,
    pub t_u: f64,
    pub lambda_lp: f64,
    pub j: usize,
}

/// Scalar kernel g(λ) on the spectrum, evaluable pointwise.
pub struct Kernel {
    pub name: String,
    f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl Kernel {
    pub fn new(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Kernel {
            name: name.into(),
            f: Box::new(f),
        }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        (self.f)(lambda)
    }
}

/// Band-pass reference kernel g(λ) = (sλ)²·e^{−(sλ)²}; vanishes at 0 and
/// peaks at sλ = 1.
pub fn mexican_hat(scale: f64) -> Kernel {
    assert!(scale > 0.0, "mexican_hat needs a positive scale");
    Kernel::new(format!("mexican-hat-s{scale}"), move |lambda| {
        let t = scale * lambda;
        let t2 = t * t;
        t2 * (-t2).exp()
    })
}

pub fn constant_kernel(value: f64) -> Kernel {
    Kernel::new(format!("constant-{value}"), move |_| value)
}

/// Σᵢ ωᵢ Tᵢ(L̃)·X by the three-term recurrence, L̃ = (2/λ_max)L − I.
/// Touches only edges, so output support grows by one hop per order.
pub fn chebyshev_apply(c: &ChebCoeffs, lap: &NormalizedLaplacian, x: &Mat) -> Result<Mat> {
    let states = chebyshev_states(c, lap, x)?;
    let mut out = states[0].scale(c.omega[0]);
    for (i, t) in states.iter().enumerate().skip(1) {
        out.add_scaled(t, c.omega[i]);
    }
    Ok(out)
}

/// The recurrence states Tᵢ(L̃)·X for i = 0..=rho. Kept for the backward
/// pass, where each ∂/∂ωᵢ is an inner product against state i.
pub fn chebyshev_states(c: &ChebCoeffs, lap: &NormalizedLaplacian, x: &Mat) -> Result<Vec<Mat>> {
    if x.rows() != lap.dim() {
        return Err(Error::DimensionMismatch {
            context: "chebyshev_apply".into(),
            expected: format!("{} rows", lap.dim()),
            got: format!("{} rows", x.rows()),
        });
    }
    let scale = 2.0 / c.lambda_max;
    let rho = c.rho();
    let mut states = Vec::with_capacity(rho + 1);
    states.push(x.clone());
    if rho >= 1 {
        // T₁X = L̃X = (2/λ_max)LX − X
        let mut t1 = lap.matrix().matmat(x).scale(scale);
        t1.add_scaled(x, -1.0);
        states.push(t1);
    }
    for _ in 2..=rho {
        let prev = &states[states.len() - 1];
        let mut next = lap.matrix().matmat(prev).scale(2.0 * scale);
        next.add_scaled(prev, -2.0);
        next.add_scaled(&states[states.len() - 2], -1.0);
        states.push(next);
    }
    Ok(states)
}

/// Scalar response Σᵢ ωᵢ Tᵢ(2λ/λ_max − 1) by Clenshaw recurrence.
pub fn chebyshev_response_at(c: &ChebCoeffs, lambda: f64) -> Result<f64> {
    if !(0.0..=c.lambda_max).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda = {lambda} outside [0, {}]",
            c.lambda_max
        )));
    }
    Ok(chebyshev_response_unchecked(c, lambda))
}

fn chebyshev_response_unchecked(c: &ChebCoeffs, lambda: f64) -> f64 {
    let x = 2.0 * lambda / c.lambda_max - 1.0;
    let n = c.rho();
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for k in (1..=n).rev() {
        let b = c.omega[k] + 2.0 * x * b1 - b2;
        b2 = b1;
        b1 = b;
    }
    c.omega[0] + x * b1 - b2
}

/// Gaussian basis values at λ, each multiplied by the window.
pub fn smearing_basis(s: &SpectralParams, lambda: f64) -> Vec<f64> {
    let w = s.window_at(lambda);
    s.centers
        .iter()
        .map(|&c| {
            let d = lambda - c;
            w * (-s.gamma * d * d).exp()
        })
        .collect()
}

/// Basis values and their derivatives d/dλ, for scale gradients.
pub fn smearing_basis_with_derivative(s: &SpectralParams, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let (w, dw) = s.window_at_d(lambda);
    let mut vals = Vec::with_capacity(s.z());
    let mut derivs = Vec::with_capacity(s.z());
    for &c in &s.centers {
        let d = lambda - c;
        let g = (-s.gamma * d * d).exp();
        vals.push(w * g);
        derivs.push(dw * g + w * g * (-2.0 * s.gamma * d));
    }
    (vals, derivs)
}

/// Per-channel spectral response basis(λ)ᵀ·W.
pub fn spectral_response(s: &SpectralParams, lambda: f64) -> Vec<f64> {
    let basis = smearing_basis(s, lambda);
    let d = s.dim_out();
    let mut out = vec![0.0; d];
    for (j, &b) in basis.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let row = s.w.row(j);
        for v in 0..d {
            out[v] += b * row[v];
        }
    }
    out
}

/// k×z matrix of windowed basis values at the (optionally dilated)
/// eigenvalues: row u = basis(scale·λᵤ).
pub fn smearing_matrix(s: &SpectralParams, lambdas: &[f64], scale: f64) -> Mat {
    let mut b = Mat::zeros(lambdas.len(), s.z());
    for (u, &lam) in lambdas.iter().enumerate() {
        let basis = smearing_basis(s, scale * lam);
        b.row_mut(u).copy_from_slice(&basis);
    }
    b
}

/// k×d response matrix R[u][v] = spectral response at scale·λᵤ, channel v.
pub fn response_matrix(s: &SpectralParams, lambdas: &[f64], scale: f64) -> Mat {
    smearing_matrix(s, lambdas, scale).matmul(&s.w)
}

/// U·(R ⊙ UᵀX): spectral filtering within the retained eigenspace.
pub fn spectral_apply(s: &SpectralParams, evd: &PartialEvd, x: &Mat) -> Result<Mat> {
    spectral_apply_scaled(s, evd, x, 1.0)
}

pub fn spectral_apply_scaled(
    s: &SpectralParams,
    evd: &PartialEvd,
    x: &Mat,
    scale: f64,
) -> Result<Mat> {
    if x.rows() != evd.u.rows() {
        return Err(Error::DimensionMismatch {
            context: "spectral_apply".into(),
            expected: format!("{} rows", evd.u.rows()),
            got: format!("{} rows", x.rows()),
        });
    }
    if x.cols() != s.dim_out() {
        return Err(Error::DimensionMismatch {
            context: "spectral_apply".into(),
            expected: format!("{} columns", s.dim_out()),
            got: format!("{} columns", x.cols()),
        });
    }
    let xhat = evd.u.matmul_tn(x);
    let r = response_matrix(s, &evd.lambdas, scale);
    Ok(evd.u.matmul(&r.hadamard(&xhat)))
}

/// Hybrid filtering: polynomial branch on the sparse operator plus spectral
/// branch in the retained eigenspace, with zero-frequency corrections folded
/// in when the filter is an admissible wavelet.
pub fn hybrid_apply(
    f: &HybridFilter,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    x: &Mat,
) -> Result<Mat> {
    apply_with_correction(f, 1.0, lap, evd, x, f.correction(false))
}

/// Hybrid filtering at a dilation scale s: the spectral branch evaluates its
/// response at s·λᵤ; the polynomial branch is invariant because the spectrum
/// rescaling (2/(s·λ_max))·(s·𝓛) − I reproduces the undilated operator.
pub fn shared_filter_apply(
    f: &HybridFilter,
    scale: f64,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    x: &Mat,
) -> Result<Mat> {
    apply_with_correction(f, scale, lap, evd, x, f.correction(false))
}

pub fn apply_with_correction(
    f: &HybridFilter,
    scale: f64,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    x: &Mat,
    corr: Correction,
) -> Result<Mat> {
    Ok(apply_traced(f, scale, lap, evd, x, corr)?.0)
}

/// Forward-pass byproducts needed to run the filter's adjoint. The filter
/// operator is symmetric, so the input gradient reuses the same corrected
/// quantities; parameter gradients contract against `states` and `xhat`.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    /// Chebyshev recurrence states Tᵢ(L̃)X for i = 0..=ρ.
    pub states: Vec<Mat>,
    /// Projected signal UᵀX, k×d.
    pub xhat: Mat,
    /// Raw windowed basis at the (dilated) eigenvalues, k×z.
    pub basis: Mat,
    /// Basis with the λ=0 row subtracted when corrected; ∂S_eff/∂W.
    pub basis_eff: Mat,
    /// Effective spectral response after corrections, k×d.
    pub resp_eff: Mat,
    /// Scalar subtracted from the polynomial branch: P(0) + shift.
    pub p_const: f64,
    pub scale: f64,
    pub corr: Correction,
}

/// Hybrid apply that also returns its intermediates. This is the single
/// implementation behind every filter application.
pub fn apply_traced(
    f: &HybridFilter,
    scale: f64,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    x: &Mat,
    corr: Correction,
) -> Result<(Mat, FilterTrace)> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "filter scale must be positive and finite, got {scale}"
        )));
    }
    if x.cols() != f.spec.dim_out() {
        return Err(Error::DimensionMismatch {
            context: "hybrid_apply".into(),
            expected: format!("{} columns", f.spec.dim_out()),
            got: format!("{} columns", x.cols()),
        });
    }
    if x.rows() != evd.u.rows() {
        return Err(Error::DimensionMismatch {
            context: "hybrid_apply".into(),
            expected: format!("{} eigenvector rows", x.rows()),
            got: format!("{} eigenvector rows", evd.u.rows()),
        });
    }
    let states = chebyshev_states(&f.cheb, lap, x)?;
    let mut out = states[0].scale(f.cheb.omega[0]);
    for (i, t) in states.iter().enumerate().skip(1) {
        out.add_scaled(t, f.cheb.omega[i]);
    }

    let xhat = evd.u.matmul_tn(x);
    let basis = smearing_matrix(&f.spec, &evd.lambdas, scale);
    let mut resp_eff = basis.matmul(&f.spec.w);
    let mut basis_eff = basis.clone();
    let mut p_const = 0.0;

    match corr {
        Correction::Plain => {}
        Correction::ZeroFreq | Correction::ResidualShift => {
            let shift = if corr == Correction::ResidualShift {
                0.5
            } else {
                0.0
            };
            // The polynomial constant is full-rank: subtract (P(0)+shift)·X
            // in the vertex domain. The spectral constant only exists inside
            // the retained subspace, so it comes off the projected response.
            p_const = chebyshev_response_unchecked(&f.cheb, 0.0) + shift;
            out.add_scaled(x, -p_const);
            let b0 = smearing_basis(&f.spec, 0.0);
            let s0 = spectral_response(&f.spec, 0.0);
            let (k, z, d) = (basis.rows(), f.spec.z(), f.spec.dim_out());
            for u in 0..k {
                let brow = basis_eff.row_mut(u);
                for j in 0..z {
                    brow[j] -= b0[j];
                }
                let rrow = resp_eff.row_mut(u);
                for v in 0..d {
                    rrow[v] -= s0[v] + shift;
                }
            }
        }
    }

    out.add_assign(&evd.u.matmul(&resp_eff.hadamard(&xhat)));
    let trace = FilterTrace {
        states,
        xhat,
        basis,
        basis_eff,
        resp_eff,
        p_const,
        scale,
        corr,
    };
    Ok((out, trace))
}

/// Per-channel scalar response of the filter at λ under a correction mode.
/// For `ResidualShift`, the identity term belongs to the caller, so the
/// value at λ = 0 is exactly −1.
pub fn response_with_correction(
    f: &HybridFilter,
    scale: f64,
    lambda: f64,
    corr: Correction,
) -> Result<Vec<f64>> {
    let p = chebyshev_response_at(&f.cheb, lambda)?;
    let s = spectral_response(&f.spec, scale * lambda);
    let d = f.spec.dim_out();
    let mut out = vec![0.0; d];
    match corr {
        Correction::Plain => {
            for v in 0..d {
                out[v] = p + s[v];
            }
        }
        Correction::ZeroFreq | Correction::ResidualShift => {
            let shift = if corr == Correction::ResidualShift {
                0.5
            } else {
                0.0
            };
            let p0 = chebyshev_response_unchecked(&f.cheb, 0.0);
            let s0 = spectral_response(&f.spec, 0.0);
            for v in 0..d {
                out[v] = (p - p0 - shift) + (s[v] - s0[v] - shift);
            }
        }
    }
    Ok(out)
}

/// Response honoring the filter's own admissibility flags.
pub fn response_at(f: &HybridFilter, lambda: f64) -> Result<Vec<f64>> {
    response_with_correction(f, 1.0, lambda, f.correction(false))
}

/// ω₀ values forcing a zero response at λ = 0 under the alternative
/// closed-form construction: ω₀ = Σᵢ₌₁^ρ (−1)^{i+1}ωᵢ − S(0) per channel.
/// Exposed for diagnostics; the default pipeline corrects lazily instead.
pub fn admissible_omega0(c: &ChebCoeffs, s0: &[f64]) -> Vec<f64> {
    let mut alt = 0.0;
    for (i, &w) in c.omega.iter().enumerate().skip(1) {
        if i % 2 == 1 {
            alt += w;
        } else {
            alt -= w;
        }
    }
    s0.iter().map(|&s| alt - s).collect()
}

/// Geometric scale ladder from the softplus-mapped range parameters:
/// s_max = softplus(t_U)·λ_LP down to s_min = softplus(t_L), J values
/// uniform in log-space. J = 1 collapses to the top scale alone.
pub fn compute_scales(p: &ScaleParams) -> Result<Vec<f64>> {
    if !(p.t_l.is_finite() && p.t_u.is_finite()) {
        return Err(Error::NonFinite {
            context: "scale parameters".into(),
        });
    }
    if !(p.lambda_lp > 0.0 && p.lambda_lp.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda_lp must be positive and finite, got {}",
            p.lambda_lp
        )));
    }
    if p.j == 0 {
        return Err(Error::InvalidArgument(
            "scale count J must be at least 1".into(),
        ));
    }
    let log_min = softplus(p.t_l).ln();
    let log_max = (softplus(p.t_u) * p.lambda_lp).ln();
    if p.j == 1 {
        return Ok(vec![log_max.exp()]);
    }
    let step = (log_min - log_max) / (p.j - 1) as f64;
    Ok((0..p.j)
        .map(|i| (log_max + i as f64 * step).exp())
        .collect())
}

/// U·diag(g(λ))·Uᵀ·X: exact spectral filtering through a full
/// eigendecomposition. Ground truth for propagation comparisons.
pub fn exact_filter_apply(g: &Kernel, dense: &DenseEvd, x: &Mat) -> Mat {
    let xhat = dense.u.matmul_tn(x);
    let mut scaled = xhat;
    for (i, &lam) in dense.lambdas.iter().enumerate() {
        let gv = g.eval(lam);
        for v in scaled.row_mut(i) {
            *v *= gv;
        }
    }
    dense.u.matmul(&scaled)
}

/// Response-level oracle for the hybrid filter at full rank k = n:
/// U·(R ⊙ UᵀX) with R[u][v] = P(λᵤ) + S(scale·λᵤ)[v], corrections applied
/// as response subtractions. Only meaningful when the decomposition is
/// complete, where it must agree with `apply_with_correction`.
pub fn oracle_hybrid_apply(
    f: &HybridFilter,
    dense: &DenseEvd,
    x: &Mat,
    scale: f64,
    corr: Correction,
) -> Result<Mat> {
    let n = dense.u.rows();
    let d = x.cols();
    let mut r = Mat::zeros(n, d);
    for (u, &lam) in dense.lambdas.iter().enumerate() {
        let lam = lam.clamp(0.0, f.cheb.lambda_max);
        let resp = response_with_correction(f, scale, lam, corr)?;
        r.row_mut(u).copy_from_slice(&resp);
    }
    let xhat = dense.u.matmul_tn(x);
    Ok(dense.u.matmul(&r.hadamard(&xhat)))
}

/// Least-squares Chebyshev fit of a kernel on a uniform grid over [0, 2].
/// Returns the coefficients and the sup-norm error on the grid.
pub fn fit_chebyshev_ls(g: &Kernel, rho: usize, grid_size: usize) -> Result<(ChebCoeffs, f64)> {
    if grid_size < 4 * (rho + 1) {
        return Err(Error::InvalidArgument(format!(
            "grid_size = {grid_size} too small for order {rho}; need at least {}",
            4 * (rho + 1)
        )));
    }
    let lambdas: Vec<f64> = (0..grid_size)
        .map(|i| 2.0 * i as f64 / (grid_size - 1) as f64)
        .collect();
    let targets: Vec<f64> = lambdas.iter().map(|&l| g.eval(l)).collect();
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            context: "kernel values on fit grid".into(),
        });
    }

    // Design matrix A[g][i] = T_i(λ_g − 1) by the scalar recurrence.
    let mut a = Mat::zeros(grid_size, rho + 1);
    for (gi, &lam) in lambdas.iter().enumerate() {
        let x = lam - 1.0;
        let row = a.row_mut(gi);
        row[0] = 1.0;
        if rho >= 1 {
            row[1] = x;
        }
        for i in 2..=rho {
            row[i] = 2.0 * x * row[i - 1] - row[i - 2];
        }
    }

    let mut ata = a.matmul_tn(&a);
    for i in 0..=rho {
        ata.add_at(i, i, 1e-10);
    }
    let aty = a.matmul_tn(&Mat::column(&targets));
    let omega_col = crate::dense::solve_spd(&ata, &aty)?;
    let omega: Vec<f64> = (0..=rho).map(|i| omega_col.get(i, 0)).collect();

    let coeffs = ChebCoeffs::new(omega)?;
    let mut sup = 0.0_f64;
    for (gi, &t) in targets.iter().enumerate() {
        let fit = crate::dense::dot(a.row(gi), &coeffs.omega);
        sup = sup.max((fit - t).abs());
    }
    Ok((coeffs, sup))
}

/// Apply a filter to the delta signal at `seed` and bucket the squared
/// output by hop distance. Entry h sums output² over nodes exactly h hops
/// from the seed; unreachable nodes are skipped.
pub fn propagation_energy_profile<F>(apply: F, g: &Graph, seed: usize) -> Result<Vec<f64>>
where
    F: FnOnce(&Mat) -> Result<Mat>,
{
    let n = g.node_count();
    let mut delta = Mat::zeros(n, 1);
    delta.set(seed, 0, 1.0);
    let out = apply(&delta)?;
    if out.rows() != n {
        return Err(Error::DimensionMismatch {
            context: "propagation_energy_profile".into(),
            expected: format!("{n} rows"),
            got: format!("{} rows", out.rows()),
        });
    }
    let dist = crate::graph::hop_distances(g, seed)?;
    let max_hop = dist.iter().flatten().max().copied().unwrap_or(0) as usize;
    let mut energy = vec![0.0; max_hop + 1];
    for (node, d) in dist.iter().enumerate() {
        if let Some(h) = d {
            for c in 0..out.cols() {
                let v = out.get(node, c);
                energy[*h as usize] += v * v;
            }
        }
    }
    Ok(energy)
}

/// On-disk filter parameter description (plain JSON numbers; this format is
/// meant to be written by hand, unlike the bit-exact checkpoint format).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterJson {
    pub rho: usize,
    pub omega: Vec<f64>,
    pub z: usize,
    pub lambda_cut: f64,
    pub window: Window,
    pub w: Vec<Vec<f64>>,
    pub admissible: bool,
    pub role: FilterRole,
}

impl HybridFilter {
    pub fn to_json(&self) -> FilterJson {
        FilterJson {
            rho: self.cheb.rho(),
            omega: self.cheb.omega.clone(),
            z: self.spec.z(),
            lambda_cut: self.spec.lambda_cut,
            window: self.spec.window,
            w: (0..self.spec.w.rows())
                .map(|i| self.spec.w.row(i).to_vec())
                .collect(),
            admissible: self.admissible,
            role: self.role,
        }
    }

    pub fn from_json(j: &FilterJson) -> Result<Self> {
        if j.omega.len() != j.rho + 1 {
            return Err(Error::DimensionMismatch {
                context: "filter json omega".into(),
                expected: format!("{} coefficients", j.rho + 1),
                got: format!("{}", j.omega.len()),
            });
        }
        if j.w.len() != j.z {
            return Err(Error::DimensionMismatch {
                context: "filter json W".into(),
                expected: format!("{} rows", j.z),
                got: format!("{}", j.w.len()),
            });
        }
        let cheb = ChebCoeffs::new(j.omega.clone())?;
        let w = Mat::from_rows(&j.w);
        let spec = SpectralParams::new(j.z, j.lambda_cut, w, j.window)?;
        Ok(HybridFilter {
            cheb,
            spec,
            admissible: j.admissible,
            role: j.role,
        })
    }
}
