//! The filtering network: per-layer MLP feature transform, a scaling filter
//! plus J wavelet filters per layer, branch activation, aggregation, and
//! residual wiring, composed under an input projection and a readout head.
//!
//! Every forward routine has a traced twin that records the intermediates
//! the training module's hand-written adjoints consume.

use crate::codec::{hex_to_vec, vec_to_hex};
use crate::dense::Mat;
use crate::error::{Error, Result};
use crate::filters::{
    apply_traced, compute_scales, inverse_softplus, ChebCoeffs, Correction, FilterRole,
    FilterTrace, HybridFilter, ScaleParams, SpectralParams, Window,
};
use crate::graph::{build_normalized_laplacian, Graph, NormalizedLaplacian};
use crate::spectral::{positional_encodings, PartialEvd};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply(&self, x: &Mat) -> Mat {
        match self {
            Activation::Identity => x.clone(),
            // max(NaN, 0) would return 0 and mask a poisoned activation;
            // propagate NaN so the layer-output check can catch it.
            Activation::Relu => x.map(|v| if v.is_nan() { v } else { v.max(0.0) }),
        }
    }

    /// Elementwise derivative evaluated at the pre-activation values.
    pub fn derivative(&self, pre: &Mat) -> Mat {
        match self {
            Activation::Identity => pre.map(|_| 1.0),
            Activation::Relu => pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "id" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?} (expected identity or relu)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Sum,
    ConcatProject,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "concat-project" | "concat" => Ok(Aggregation::ConcatProject),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation {other:?} (expected sum or concat-project)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    /// Add H_prev after aggregation.
    Standard,
    /// Fold the identity into every branch (filters carry the −1/2
    /// zero-frequency shifts; each branch adds its input back).
    Wavelet,
    None,
}

impl std::str::FromStr for ResidualMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ResidualMode::Standard),
            "wavelet" => Ok(ResidualMode::Wavelet),
            "none" => Ok(ResidualMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown residual mode {other:?} (expected standard, wavelet, or none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// J independently parameterized wavelet filters.
    Independent,
    /// One wavelet filter evaluated at J learnable dilation scales.
    Shared,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(FilterMode::Independent),
            "shared" => Ok(FilterMode::Shared),
            other => Err(Error::InvalidArgument(format!(
                "unknown filter mode {other:?} (expected independent or shared)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutKind {
    /// Per-node affine head; output n×d_out.
    NodeIdentity,
    /// Mean over nodes, then the affine head; output 1×d_out.
    MeanPool,
}

impl std::str::FromStr for ReadoutKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node-identity" | "node" => Ok(ReadoutKind::NodeIdentity),
            "mean-pool" | "mean" => Ok(ReadoutKind::MeanPool),
            other => Err(Error::InvalidArgument(format!(
                "unknown readout {other:?} (expected node-identity or mean-pool)"
            ))),
        }
    }
}

/// Nodewise MLP: affine, activation, …, affine (no trailing activation).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Mat>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// The wavelet side of a layer: J separate filters, or one filter dilated
/// across a learnable scale ladder.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterBank {
    Independent(Vec<HybridFilter>),
    Shared {
        psi: HybridFilter,
        scales: ScaleParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub phi: HybridFilter,
    pub bank: FilterBank,
    pub mlp: MlpParams,
    pub aggregation: Aggregation,
    /// (J+1)d×d mixing matrix, present exactly for concat-project.
    pub projection: Option<Mat>,
    pub residual: ResidualMode,
    pub activation: Activation,
}

/// Hyperparameters that fix every tensor shape in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub pe_count: usize,
    pub d: usize,
    pub d_out: usize,
    pub depth: usize,
    pub mlp_depth: usize,
    pub j: usize,
    pub rho: usize,
    pub z: usize,
    pub lambda_cut: f64,
    pub window: Window,
    pub mode: FilterMode,
    pub lambda_lp: f64,
    pub aggregation: Aggregation,
    pub residual: ResidualMode,
    pub activation: Activation,
    pub admissible: bool,
    pub readout: ReadoutKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_out == 0 {
            return Err(Error::InvalidArgument(
                "hidden and output widths must be positive".into(),
            ));
        }
        if self.d_in == 0 && self.pe_count == 0 {
            return Err(Error::InvalidArgument(
                "model needs input features or at least one positional encoding".into(),
            ));
        }
        if self.mlp_depth == 0 {
            return Err(Error::InvalidArgument(
                "per-layer MLP needs at least one affine layer".into(),
            ));
        }
        if self.z == 0 {
            return Err(Error::InvalidArgument(
                "spectral basis size z must be positive".into(),
            ));
        }
        if !(self.lambda_cut > 0.0 && self.lambda_cut <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda_cut must lie in (0, 2], got {}",
                self.lambda_cut
            )));
        }
        if !(self.lambda_lp > 0.0 && self.lambda_lp.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_lp must be positive, got {}",
                self.lambda_lp
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input_w: Mat,
    pub input_b: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub head_w: Mat,
    pub head_b: Vec<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
}

/// Build a freshly initialized model: Chebyshev vectors at the identity
/// (1, 0, …, 0), dense weights Xavier-uniform, biases zero, and the scale
/// ladder spanning [0.5, 2·λ_LP].
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d;
    let in_width = config.d_in + config.pe_count;
    let input_w = xavier(&mut rng, in_width, d);
    let input_b = vec![0.0; d];

    let make_filter = |rng: &mut ChaCha8Rng, role: FilterRole| -> Result<HybridFilter> {
        let w = xavier(rng, config.z, d);
        Ok(HybridFilter {
            cheb: ChebCoeffs::delta(config.rho),
            spec: SpectralParams::new(config.z, config.lambda_cut, w, config.window)?,
            admissible: config.admissible,
            role,
        })
    };

    let mut layers = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let mut weights = Vec::with_capacity(config.mlp_depth);
        let mut biases = Vec::with_capacity(config.mlp_depth);
        for _ in 0..config.mlp_depth {
            weights.push(xavier(&mut rng, d, d));
            biases.push(vec![0.0; d]);
        }
        let mlp = MlpParams {
            weights,
            biases,
            activation: config.activation,
        };
        let phi = make_filter(&mut rng, FilterRole::Scaling)?;
        let bank = match config.mode {
            FilterMode::Independent => {
                let mut psis = Vec::with_capacity(config.j);
                for _ in 0..config.j {
                    psis.push(make_filter(&mut rng, FilterRole::Wavelet)?);
                }
                FilterBank::Independent(psis)
            }
            FilterMode::Shared => FilterBank::Shared {
                psi: make_filter(&mut rng, FilterRole::Wavelet)?,
                scales: ScaleParams {
                    t_l: inverse_softplus(0.5),
                    t_u: inverse_softplus(2.0),
                    lambda_lp: config.lambda_lp,
                    j: config.j,
                },
            },
        };
        let projection = match config.aggregation {
            Aggregation::Sum => None,
            Aggregation::ConcatProject => Some(xavier(&mut rng, (config.j + 1) * d, d)),
        };
        layers.push(LayerParams {
            phi,
            bank,
            mlp,
            aggregation: config.aggregation,
            projection,
            residual: config.residual,
            activation: config.activation,
        });
    }

    let head_w = xavier(&mut rng, d, config.d_out);
    let head_b = vec![0.0; config.d_out];
    Ok(ModelParams {
        config: config.clone(),
        input_w,
        input_b,
        layers,
        head_w,
        head_b,
    })
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Result<Mat> {
    if x.cols() != w.rows() {
        return Err(Error::DimensionMismatch {
            context: "affine".into(),
            expected: format!("{} columns", w.rows()),
            got: format!("{} columns", x.cols()),
        });
    }
    let mut out = x.matmul(w);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (v, bj) in row.iter_mut().zip(b) {
            *v += bj;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Input to each affine stage (inputs[0] is the layer input).
    pub inputs: Vec<Mat>,
    /// Affine outputs before activation, one per stage.
    pub pres: Vec<Mat>,
}

pub fn mlp_forward(p: &MlpParams, x: &Mat) -> Result<Mat> {
    Ok(mlp_forward_traced(p, x)?.0)
}

pub fn mlp_forward_traced(p: &MlpParams, x: &Mat) -> Result<(Mat, MlpTrace)> {
    let depth = p.weights.len();
    let mut inputs = Vec::with_capacity(depth);
    let mut pres = Vec::with_capacity(depth);
    let mut cur = x.clone();
    for l in 0..depth {
        inputs.push(cur.clone());
        let pre = affine(&cur, &p.weights[l], &p.biases[l])?;
        cur = if l + 1 < depth {
            p.activation.apply(&pre)
        } else {
            pre.clone()
        };
        pres.push(pre);
    }
    Ok((cur, MlpTrace { inputs, pres }))
}

#[derive(Debug, Clone)]
pub struct BranchTrace {
    /// Pre-activation branch value (filter output, plus the branch input
    /// when the layer runs wavelet residuals).
    pub z: Mat,
    pub filt: FilterTrace,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub f: Mat,
    pub mlp: MlpTrace,
    pub scaling: BranchTrace,
    pub wavelets: Vec<BranchTrace>,
    /// σ(z) per branch, scaling first. Needed by the concat adjoint.
    pub activated: Vec<Mat>,
    /// Effective dilation scales (shared mode; empty for independent).
    pub scales: Vec<f64>,
}

/// Filters a layer applies, resolved from its bank: (filter, scale) pairs
/// for the wavelet branches.
fn wavelet_branches(lp: &LayerParams) -> Result<Vec<(&HybridFilter, f64)>> {
    match &lp.bank {
        FilterBank::Independent(psis) => Ok(psis.iter().map(|f| (f, 1.0)).collect()),
        FilterBank::Shared { psi, scales } => {
            let s = compute_scales(scales)?;
            Ok(s.into_iter().map(|sc| (psi, sc)).collect())
        }
    }
}

pub fn layer_forward(
    lp: &LayerParams,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    h_prev: &Mat,
) -> Result<Mat> {
    Ok(layer_forward_traced(lp, lap, evd, h_prev)?.0)
}

pub fn layer_forward_traced(
    lp: &LayerParams,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    h_prev: &Mat,
) -> Result<(Mat, LayerTrace)> {
    let (f_sig, mlp_trace) = mlp_forward_traced(&lp.mlp, h_prev)?;
    let residual_filters = lp.residual == ResidualMode::Wavelet;

    let run_branch = |filter: &HybridFilter, scale: f64| -> Result<BranchTrace> {
        let corr = filter.correction(residual_filters);
        let (mut z, filt) = apply_traced(filter, scale, lap, evd, &f_sig, corr)?;
        if residual_filters {
            z.add_assign(&f_sig);
        }
        Ok(BranchTrace { z, filt })
    };

    let scaling = run_branch(&lp.phi, 1.0)?;
    let pairs = wavelet_branches(lp)?;
    let scales: Vec<f64> = match &lp.bank {
        FilterBank::Shared { .. } => pairs.iter().map(|&(_, s)| s).collect(),
        FilterBank::Independent(_) => Vec::new(),
    };
    let mut wavelets = Vec::with_capacity(pairs.len());
    for (filter, scale) in pairs {
        wavelets.push(run_branch(filter, scale)?);
    }

    let mut activated = Vec::with_capacity(1 + wavelets.len());
    activated.push(lp.activation.apply(&scaling.z));
    for b in &wavelets {
        activated.push(lp.activation.apply(&b.z));
    }

    let mut out = match lp.aggregation {
        Aggregation::Sum => {
            let mut acc = activated[0].clone();
            for b in &activated[1..] {
                acc.add_assign(b);
            }
            acc
        }
        Aggregation::ConcatProject => {
            let proj = lp.projection.as_ref().ok_or_else(|| {
                Error::InvalidArgument(
                    "concat-project aggregation needs a projection matrix".into(),
                )
            })?;
            let mut cat = activated[0].clone();
            for b in &activated[1..] {
                cat = cat.hcat(b);
            }
            if cat.cols() != proj.rows() {
                return Err(Error::DimensionMismatch {
                    context: "branch projection".into(),
                    expected: format!("{} rows", cat.cols()),
                    got: format!("{} rows", proj.rows()),
                });
            }
            cat.matmul(proj)
        }
    };

    if lp.residual == ResidualMode::Standard {
        if out.cols() != h_prev.cols() {
            return Err(Error::DimensionMismatch {
                context: "standard residual".into(),
                expected: format!("{} columns", h_prev.cols()),
                got: format!("{} columns", out.cols()),
            });
        }
        out.add_assign(h_prev);
    }

    if !out.is_finite() {
        return Err(Error::NonFinite {
            context: "layer output".into(),
        });
    }

    Ok((
        out,
        LayerTrace {
            f: f_sig,
            mlp: mlp_trace,
            scaling,
            wavelets,
            activated,
            scales,
        },
    ))
}

/// Response of the wavelet-residual construction ψ̂_I = P̃ + S̃ + 1 at λ,
/// per channel. Exactly 0 at λ = 0 by cancellation.
pub fn wavelet_residual_response(f: &HybridFilter, scale: f64, lambda: f64) -> Result<Vec<f64>> {
    let mut r =
        crate::filters::response_with_correction(f, scale, lambda, Correction::ResidualShift)?;
    for v in &mut r {
        *v += 1.0;
    }
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct ModelTrace {
    /// concat(features, positional encodings), the input projection's input.
    pub input: Mat,
    /// h[0] after the input projection, h[i+1] after layer i.
    pub h: Vec<Mat>,
    pub layers: Vec<LayerTrace>,
    /// Mean-pooled row for graph-level readout.
    pub pooled: Option<Mat>,
    pub output: Mat,
}

/// Forward pass over a prepared Laplacian/decomposition pair.
pub fn model_forward_prepared(
    m: &ModelParams,
    lap: &NormalizedLaplacian,
    features: Option<&Mat>,
    evd: &PartialEvd,
    pe_count: usize,
) -> Result<Mat> {
    Ok(model_forward_traced(m, lap, features, evd, pe_count)?.0)
}

pub fn model_forward_traced(
    m: &ModelParams,
    lap: &NormalizedLaplacian,
    features: Option<&Mat>,
    evd: &PartialEvd,
    pe_count: usize,
) -> Result<(Mat, ModelTrace)> {
    let n = lap.dim();
    let feats = match (m.config.d_in, features) {
        (0, _) => Mat::zeros(n, 0),
        (d_in, Some(f)) => {
            if f.cols() != d_in || f.rows() != n {
                return Err(Error::DimensionMismatch {
                    context: "model features".into(),
                    expected: format!("{n}×{d_in}"),
                    got: format!("{}×{}", f.rows(), f.cols()),
                });
            }
            f.clone()
        }
        (d_in, None) => {
            return Err(Error::InvalidArgument(format!(
                "model expects {d_in} feature columns but the graph has none"
            )))
        }
    };
    let (pe, _) = positional_encodings(evd, pe_count, false)?;
    let input = feats.hcat(&pe);
    if input.cols() != m.input_w.rows() {
        return Err(Error::DimensionMismatch {
            context: "input projection".into(),
            expected: format!("{} input columns", m.input_w.rows()),
            got: format!("{} input columns", input.cols()),
        });
    }

    let h0 = affine(&input, &m.input_w, &m.input_b)?;
    if !h0.is_finite() {
        return Err(Error::NonFinite {
            context: "input projection output".into(),
        });
    }
    let mut h = vec![h0];
    let mut layer_traces = Vec::with_capacity(m.layers.len());
    for (idx, lp) in m.layers.iter().enumerate() {
        let (next, trace) =
            layer_forward_traced(lp, lap, evd, h.last().unwrap()).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("layer {idx}: {context}"),
                },
                other => other,
            })?;
        h.push(next);
        layer_traces.push(trace);
    }

    let last = h.last().unwrap();
    let (output, pooled) = match m.config.readout {
        ReadoutKind::NodeIdentity => (affine(last, &m.head_w, &m.head_b)?, None),
        ReadoutKind::MeanPool => {
            let pooled = last.mean_rows();
            (affine(&pooled, &m.head_w, &m.head_b)?, Some(pooled))
        }
    };
    if !output.is_finite() {
        return Err(Error::NonFinite {
            context: "readout output".into(),
        });
    }
    Ok((
        output.clone(),
        ModelTrace {
            input,
            h,
            layers: layer_traces,
            pooled,
            output,
        },
    ))
}

/// Forward pass from a raw graph: builds the normalized Laplacian, appends
/// positional encodings, and runs the stack.
pub fn model_forward(
    m: &ModelParams,
    g: &Graph,
    evd: &PartialEvd,
    pe_count: usize,
) -> Result<Mat> {
    let lap = build_normalized_laplacian(g);
    model_forward_prepared(m, &lap, g.features(), evd, pe_count)
}

// ---------------------------------------------------------------------------
// Parameter traversal: one canonical walk drives flattening, checkpoints,
// optimizer state alignment, and ablation masks.

/// Shape and path of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn visit_filter<'a>(
    prefix: String,
    f: &'a HybridFilter,
    visit: &mut impl FnMut(String, Vec<usize>, &'a [f64]),
) {
    visit(
        format!("{prefix}.omega"),
        vec![f.cheb.omega.len()],
        &f.cheb.omega,
    );
    visit(
        format!("{prefix}.spec_w"),
        vec![f.spec.w.rows(), f.spec.w.cols()],
        f.spec.w.data(),
    );
}

fn visit_filter_mut(
    prefix: String,
    f: &mut HybridFilter,
    visit: &mut impl FnMut(String, &mut [f64]),
) {
    visit(format!("{prefix}.omega"), &mut f.cheb.omega);
    visit(format!("{prefix}.spec_w"), f.spec.w.data_mut());
}

impl ModelParams {
    /// Walk every learnable tensor in canonical order.
    pub fn visit<'a>(&'a self, mut visit: impl FnMut(String, Vec<usize>, &'a [f64])) {
        visit(
            "input_proj.w".into(),
            vec![self.input_w.rows(), self.input_w.cols()],
            self.input_w.data(),
        );
        visit("input_proj.b".into(), vec![self.input_b.len()], &self.input_b);
        for (i, lp) in self.layers.iter().enumerate() {
            for (l, (w, b)) in lp.mlp.weights.iter().zip(&lp.mlp.biases).enumerate() {
                visit(
                    format!("layers.{i}.mlp.{l}.w"),
                    vec![w.rows(), w.cols()],
                    w.data(),
                );
                visit(format!("layers.{i}.mlp.{l}.b"), vec![b.len()], b);
            }
            visit_filter(format!("layers.{i}.scaling"), &lp.phi, &mut visit);
            match &lp.bank {
                FilterBank::Independent(psis) => {
                    for (j, psi) in psis.iter().enumerate() {
                        visit_filter(format!("layers.{i}.wavelets.{j}"), psi, &mut visit);
                    }
                }
                FilterBank::Shared { psi, scales } => {
                    visit_filter(format!("layers.{i}.wavelet_shared"), psi, &mut visit);
                    visit(
                        format!("layers.{i}.scales.t_l"),
                        vec![1],
                        std::slice::from_ref(&scales.t_l),
                    );
                    visit(
                        format!("layers.{i}.scales.t_u"),
                        vec![1],
                        std::slice::from_ref(&scales.t_u),
                    );
                }
            }
            if let Some(p) = &lp.projection {
                visit(
                    format!("layers.{i}.projection"),
                    vec![p.rows(), p.cols()],
                    p.data(),
                );
            }
        }
        visit(
            "head.w".into(),
            vec![self.head_w.rows(), self.head_w.cols()],
            self.head_w.data(),
        );
        visit("head.b".into(), vec![self.head_b.len()], &self.head_b);
    }

    pub fn visit_mut(&mut self, mut visit: impl FnMut(String, &mut [f64])) {
        visit("input_proj.w".into(), self.input_w.data_mut());
        visit("input_proj.b".into(), &mut self.input_b);
        for (i, lp) in self.layers.iter_mut().enumerate() {
            for (l, (w, b)) in lp
                .mlp
                .weights
                .iter_mut()
                .zip(&mut lp.mlp.biases)
                .enumerate()
            {
                visit(format!("layers.{i}.mlp.{l}.w"), w.data_mut());
                visit(format!("layers.{i}.mlp.{l}.b"), b);
            }
            visit_filter_mut(format!("layers.{i}.scaling"), &mut lp.phi, &mut visit);
            match &mut lp.bank {
                FilterBank::Independent(psis) => {
                    for (j, psi) in psis.iter_mut().enumerate() {
                        visit_filter_mut(format!("layers.{i}.wavelets.{j}"), psi, &mut visit);
                    }
                }
                FilterBank::Shared { psi, scales } => {
                    visit_filter_mut(format!("layers.{i}.wavelet_shared"), psi, &mut visit);
                    visit(
                        format!("layers.{i}.scales.t_l"),
                        std::slice::from_mut(&mut scales.t_l),
                    );
                    visit(
                        format!("layers.{i}.scales.t_u"),
                        std::slice::from_mut(&mut scales.t_u),
                    );
                }
            }
            if let Some(p) = &mut lp.projection {
                visit(format!("layers.{i}.projection"), p.data_mut());
            }
        }
        visit("head.w".into(), self.head_w.data_mut());
        visit("head.b".into(), &mut self.head_b);
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        self.visit(|path, shape, _| specs.push(ParamSpec { path, shape }));
        specs
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, data| n += data.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.visit(|_, _, data| flat.extend_from_slice(data));
        flat
    }

    /// Rebuild a model with this one's structure but tensors taken from a
    /// flat vector in canonical order.
    pub fn from_flat(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "from_flat".into(),
                expected: format!("{} parameters", self.num_params()),
                got: format!("{}", flat.len()),
            });
        }
        let mut out = self.clone();
        let mut offset = 0;
        out.visit_mut(|_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        Ok(out)
    }

    /// Same structure, every tensor zeroed. The gradient container.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        out.visit_mut(|_, data| data.fill(0.0));
        out
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, _, data| ok &= data.iter().all(|v| v.is_finite()));
        ok
    }
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    data: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    tensors: BTreeMap<String, TensorJson>,
}

/// Write a bit-exact checkpoint: config block plus hex-encoded tensors
/// keyed by parameter path.
pub fn save_checkpoint(path: &Path, m: &ModelParams) -> Result<()> {
    let mut tensors = BTreeMap::new();
    m.visit(|p, shape, data| {
        tensors.insert(
            p,
            TensorJson {
                shape,
                data: vec_to_hex(data),
            },
        );
    });
    let file = CheckpointFile {
        config: m.config.clone(),
        tensors,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut m = init_params(&file.config, 0)?;
    let mut err: Option<Error> = None;
    m.visit_mut(|path, data| {
        if err.is_some() {
            return;
        }
        match file.tensors.get(&path) {
            None => err = Some(Error::Serialization(format!("checkpoint missing {path}"))),
            Some(t) => {
                if t.data.len() != data.len() {
                    err = Some(Error::Serialization(format!(
                        "checkpoint tensor {path} has {} values, expected {}",
                        t.data.len(),
                        data.len()
                    )));
                    return;
                }
                match hex_to_vec(&t.data) {
                    Ok(vals) => data.copy_from_slice(&vals),
                    Err(e) => err = Some(e),
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let expected = m.param_specs().len();
    if file.tensors.len() != expected {
        return Err(Error::Serialization(format!(
            "checkpoint has {} tensors, model expects {expected}",
            file.tensors.len()
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{oracle_hybrid_apply, response_with_correction, spectral_response};
    use crate::graph::Graph;
    use crate::spectral::dense_evd;
    use crate::synth;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_in: 2,
            pe_count: 2,
            d: 4,
            d_out: 3,
            depth: 2,
            mlp_depth: 2,
            j: 2,
            rho: 3,
            z: 3,
            lambda_cut: 1.0,
            window: Window::Cosine,
            mode: FilterMode::Independent,
            lambda_lp: 1.0,
            aggregation: Aggregation::Sum,
            residual: ResidualMode::Standard,
            activation: Activation::Relu,
            admissible: true,
            readout: ReadoutKind::NodeIdentity,
        }
    }

    fn prepared(g: &Graph, k: usize) -> (NormalizedLaplacian, PartialEvd) {
        let lap = build_normalized_laplacian(g);
        let dense = dense_evd(&lap).unwrap();
        let evd = PartialEvd::from_dense(&dense, &lap, k).unwrap();
        (lap, evd)
    }

    fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mlp_identity_passthrough() {
        let p = MlpParams {
            weights: vec![Mat::eye(3)],
            biases: vec![vec![0.0; 3]],
            activation: Activation::Identity,
        };
        let x = random_mat(5, 3, 1);
        let out = mlp_forward(&p, &x).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn mlp_zero_weights_broadcast_bias() {
        let p = MlpParams {
            weights: vec![Mat::zeros(3, 2)],
            biases: vec![vec![0.5, -1.0]],
            activation: Activation::Relu,
        };
        let out = mlp_forward(&p, &random_mat(4, 3, 2)).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), &[0.5, -1.0]);
        }
    }

    #[test]
    fn mlp_directional_derivative_matches_fd() {
        let p = MlpParams {
            weights: vec![random_mat(3, 3, 3), random_mat(3, 3, 4)],
            biases: vec![vec![0.1, -0.2, 0.3], vec![0.0, 0.4, -0.1]],
            activation: Activation::Relu,
        };
        let x = random_mat(6, 3, 5);
        let v = random_mat(6, 3, 6);
        let h = 1e-5;
        let mut xp = x.clone();
        xp.add_scaled(&v, h);
        let mut xm = x.clone();
        xm.add_scaled(&v, -h);
        let fd = mlp_forward(&p, &xp)
            .unwrap()
            .sub(&mlp_forward(&p, &xm).unwrap())
            .scale(1.0 / (2.0 * h));
        // Analytic JVP through the same masks the forward pass produces.
        let (_, trace) = mlp_forward_traced(&p, &x).unwrap();
        let mut jv = v.matmul(&p.weights[0]);
        let mask = p.activation.derivative(&trace.pres[0]);
        jv = jv.hadamard(&mask);
        jv = jv.matmul(&p.weights[1]);
        assert!(crate::dense::rel_frobenius(&fd, &jv) <= 1e-5);
    }

    #[test]
    fn layer_identity_configuration() {
        let g = synth::path_graph(6);
        let (lap, evd) = prepared(&g, 6);
        let d = 3;
        let lp = LayerParams {
            phi: HybridFilter {
                cheb: ChebCoeffs::delta(2),
                spec: SpectralParams::new(2, 1.0, Mat::zeros(2, d), Window::Cosine).unwrap(),
                admissible: false,
                role: FilterRole::Scaling,
            },
            bank: FilterBank::Independent(vec![]),
            mlp: MlpParams {
                weights: vec![Mat::eye(d)],
                biases: vec![vec![0.0; d]],
                activation: Activation::Identity,
            },
            aggregation: Aggregation::Sum,
            projection: None,
            residual: ResidualMode::None,
            activation: Activation::Identity,
        };
        let h = random_mat(6, d, 7);
        let out = layer_forward(&lp, &lap, &evd, &h).unwrap();
        assert!(crate::dense::rel_frobenius(&out, &h) < 1e-14);
    }

    #[test]
    fn layer_zero_filters_keep_residual() {
        let g = synth::ring_graph(5);
        let (lap, evd) = prepared(&g, 5);
        let d = 2;
        let zero_filter = |role| HybridFilter {
            cheb: ChebCoeffs::new(vec![0.0, 0.0]).unwrap(),
            spec: SpectralParams::new(2, 1.0, Mat::zeros(2, d), Window::Cosine).unwrap(),
            admissible: false,
            role,
        };
        let lp = LayerParams {
            phi: zero_filter(FilterRole::Scaling),
            bank: FilterBank::Independent(vec![zero_filter(FilterRole::Wavelet)]),
            mlp: MlpParams {
                weights: vec![random_mat(d, d, 8)],
                biases: vec![vec![0.0; d]],
                activation: Activation::Identity,
            },
            aggregation: Aggregation::Sum,
            projection: None,
            residual: ResidualMode::Standard,
            activation: Activation::Relu,
        };
        let h = random_mat(5, d, 9);
        let out = layer_forward(&lp, &lap, &evd, &h).unwrap();
        assert_eq!(out.data(), h.data());
    }

    /// Brute-force Eq.-4 reimplementation through dense per-eigenvalue
    /// responses; only valid at full rank k = n.
    fn layer_oracle(
        lp: &LayerParams,
        dense: &crate::spectral::DenseEvd,
        h_prev: &Mat,
    ) -> Mat {
        let f_sig = mlp_forward(&lp.mlp, h_prev).unwrap();
        let residual_filters = lp.residual == ResidualMode::Wavelet;
        let branch = |filter: &HybridFilter, scale: f64| -> Mat {
            let corr = filter.correction(residual_filters);
            let mut z = oracle_hybrid_apply(filter, dense, &f_sig, scale, corr).unwrap();
            if residual_filters {
                z.add_assign(&f_sig);
            }
            lp.activation.apply(&z)
        };
        let mut acts = vec![branch(&lp.phi, 1.0)];
        match &lp.bank {
            FilterBank::Independent(psis) => {
                for psi in psis {
                    acts.push(branch(psi, 1.0));
                }
            }
            FilterBank::Shared { psi, scales } => {
                for s in compute_scales(scales).unwrap() {
                    acts.push(branch(psi, s));
                }
            }
        }
        let mut out = match lp.aggregation {
            Aggregation::Sum => {
                let mut acc = acts[0].clone();
                for a in &acts[1..] {
                    acc.add_assign(a);
                }
                acc
            }
            Aggregation::ConcatProject => {
                let mut cat = acts[0].clone();
                for a in &acts[1..] {
                    cat = cat.hcat(a);
                }
                cat.matmul(lp.projection.as_ref().unwrap())
            }
        };
        if lp.residual == ResidualMode::Standard {
            out.add_assign(h_prev);
        }
        out
    }

    #[test]
    fn layer_matches_dense_oracle_across_configs() {
        let combos = [
            (FilterMode::Independent, Aggregation::Sum, ResidualMode::Standard, Activation::Relu),
            (FilterMode::Independent, Aggregation::ConcatProject, ResidualMode::None, Activation::Identity),
            (FilterMode::Shared, Aggregation::Sum, ResidualMode::Wavelet, Activation::Relu),
            (FilterMode::Shared, Aggregation::ConcatProject, ResidualMode::Standard, Activation::Identity),
            (FilterMode::Independent, Aggregation::Sum, ResidualMode::Wavelet, Activation::Identity),
        ];
        for (ci, &(mode, agg, residual, act)) in combos.iter().enumerate() {
            let n = 10 + ci * 3;
            let g = synth::random_connected_graph(n, 0.2, ci as u64 + 50);
            let lap = build_normalized_laplacian(&g);
            let dense = dense_evd(&lap).unwrap();
            let evd = PartialEvd::from_dense(&dense, &lap, n).unwrap();
            let config = ModelConfig {
                d_in: 3,
                pe_count: 0,
                d: 3,
                d_out: 1,
                depth: 1,
                mlp_depth: 2,
                j: 2,
                rho: 3,
                z: 3,
                lambda_cut: 1.2,
                window: Window::Cosine,
                mode,
                lambda_lp: 1.0,
                aggregation: agg,
                residual,
                activation: act,
                admissible: true,
                readout: ReadoutKind::NodeIdentity,
            };
            let mut m = init_params(&config, ci as u64).unwrap();
            // Break the delta initialization so the polynomial branch is
            // nontrivial.
            let mut rng = ChaCha8Rng::seed_from_u64(ci as u64 + 99);
            m.visit_mut(|path, data| {
                if path.contains("omega") {
                    for v in data {
                        *v = rng.gen_range(-0.8..0.8);
                    }
                }
            });
            let lp = &m.layers[0];
            let h = random_mat(n, 3, ci as u64 + 60);
            let got = layer_forward(lp, &lap, &evd, &h).unwrap();
            let want = layer_oracle(lp, &dense, &h);
            let rel = got.sub(&want).frobenius_norm() / want.frobenius_norm().max(1.0);
            assert!(rel <= 1e-10, "combo {ci}: rel error {rel}");
        }
    }

    #[test]
    fn wavelet_residual_response_vanishes_at_dc() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..20 {
            let rho = rng.gen_range(1..=5);
            let omega: Vec<f64> = (0..=rho).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Mat::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
            let f = HybridFilter {
                cheb: ChebCoeffs::new(omega).unwrap(),
                spec: SpectralParams::new(3, 1.5, w, Window::Cosine).unwrap(),
                admissible: true,
                role: FilterRole::Wavelet,
            };
            let r = wavelet_residual_response(&f, 1.0, 0.0).unwrap();
            for v in r {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn wavelet_residual_zero_params_zero_response() {
        // P = S = 0 raw: corrected response is (−1/2) + (−1/2) + 1 = 0 at
        // every λ, not only at zero.
        let f = HybridFilter {
            cheb: ChebCoeffs::new(vec![0.0, 0.0, 0.0]).unwrap(),
            spec: SpectralParams::new(2, 1.0, Mat::zeros(2, 2), Window::Cosine).unwrap(),
            admissible: true,
            role: FilterRole::Wavelet,
        };
        for i in 0..=10 {
            let lam = 2.0 * i as f64 / 10.0;
            for v in wavelet_residual_response(&f, 1.0, lam).unwrap() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn wavelet_residual_equals_zerofreq_when_already_admissible() {
        // Choose P(0) = 0 (ω₀ = ω₁ with ρ = 1) and project W so S(0) = 0;
        // then ψ̂_I(λ) = ψ̂(λ) pointwise.
        let cheb = ChebCoeffs::new(vec![0.7, 0.7]).unwrap();
        let raw_w = random_mat(3, 2, 71);
        let probe = SpectralParams::new(3, 1.4, raw_w.clone(), Window::Cosine).unwrap();
        let b0 = crate::filters::smearing_basis(&probe, 0.0);
        let b0n: f64 = b0.iter().map(|v| v * v).sum();
        let s0 = spectral_response(&probe, 0.0);
        let mut w = raw_w.clone();
        for j in 0..3 {
            for v in 0..2 {
                let x = w.get(j, v) - b0[j] * s0[v] / b0n;
                w.set(j, v, x);
            }
        }
        let f = HybridFilter {
            cheb,
            spec: SpectralParams::new(3, 1.4, w, Window::Cosine).unwrap(),
            admissible: true,
            role: FilterRole::Wavelet,
        };
        let s0_check = spectral_response(&f.spec, 0.0);
        assert!(s0_check.iter().all(|v| v.abs() < 1e-14));
        for i in 0..=16 {
            let lam = 2.0 * i as f64 / 16.0;
            let a = wavelet_residual_response(&f, 1.0, lam).unwrap();
            let b = response_with_correction(&f, 1.0, lam, Correction::ZeroFreq).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12, "lambda {lam}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn init_chebyshev_identity_and_determinism() {
        let config = small_config();
        let m = init_params(&config, 7).unwrap();
        for lp in &m.layers {
            for i in 0..=16 {
                let lam = 2.0 * i as f64 / 16.0;
                let r = crate::filters::chebyshev_response_at(&lp.phi.cheb, lam).unwrap();
                assert_eq!(r, 1.0);
            }
        }
        let m2 = init_params(&config, 7).unwrap();
        let (a, b) = (m.to_flat(), m2.to_flat());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let m3 = init_params(&config, 8).unwrap();
        assert_ne!(m.to_flat(), m3.to_flat());
    }

    #[test]
    fn init_xavier_bounds_and_zero_biases() {
        let config = ModelConfig {
            d: 8,
            d_in: 8,
            pe_count: 0,
            ..small_config()
        };
        let m = init_params(&config, 3).unwrap();
        let bound = (6.0 / 16.0_f64).sqrt();
        for v in m.input_w.data() {
            assert!(v.abs() <= bound);
        }
        assert!(m.input_b.iter().all(|&b| b == 0.0));
        assert!(m.head_b.iter().all(|&b| b == 0.0));
        for lp in &m.layers {
            for b in &lp.mlp.biases {
                assert!(b.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn model_zero_layers_passthrough() {
        let g = synth::path_graph(5);
        let (lap, evd) = prepared(&g, 5);
        let feats = random_mat(5, 2, 10);
        let (pe, _) = positional_encodings(&evd, 2, true).unwrap();
        let config = ModelConfig {
            depth: 0,
            d: 4,
            d_in: 2,
            pe_count: 2,
            d_out: 4,
            ..small_config()
        };
        let mut m = init_params(&config, 1).unwrap();
        m.input_w = Mat::eye(4);
        m.head_w = Mat::eye(4);
        let out = model_forward_prepared(&m, &lap, Some(&feats), &evd, 2).unwrap();
        let want = feats.hcat(&pe);
        assert!(crate::dense::rel_frobenius(&out, &want) < 1e-14);
    }

    #[test]
    fn mean_pool_of_constant_signal() {
        let g = synth::ring_graph(6);
        let (lap, evd) = prepared(&g, 3);
        let config = ModelConfig {
            depth: 0,
            d: 2,
            d_in: 2,
            pe_count: 0,
            d_out: 2,
            readout: ReadoutKind::MeanPool,
            ..small_config()
        };
        let mut m = init_params(&config, 2).unwrap();
        m.input_w = Mat::eye(2);
        m.head_w = Mat::eye(2);
        let c = Mat::from_fn(6, 2, |_, j| if j == 0 { 3.5 } else { -1.25 });
        let out = model_forward_prepared(&m, &lap, Some(&c), &evd, 0).unwrap();
        assert_eq!(out.rows(), 1);
        assert!((out.get(0, 0) - 3.5).abs() < 1e-12);
        assert!((out.get(0, 1) + 1.25).abs() < 1e-12);
    }

    #[test]
    fn model_forward_deterministic() {
        let g = synth::random_connected_graph(12, 0.2, 11);
        let (lap, evd) = prepared(&g, 6);
        let feats = random_mat(12, 2, 12);
        let m = init_params(&small_config(), 5).unwrap();
        let a = model_forward_prepared(&m, &lap, Some(&feats), &evd, 2).unwrap();
        let b = model_forward_prepared(&m, &lap, Some(&feats), &evd, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn ablated_model_is_strictly_local() {
        // With every spectral weight zeroed, depth·rho bounds the receptive
        // field; moving an input bit outside the ball changes nothing,
        // bit for bit.
        let n = 16;
        let g = synth::path_graph(n);
        let (lap, evd) = prepared(&g, 4);
        let config = ModelConfig {
            d_in: 1,
            pe_count: 0,
            d: 3,
            d_out: 1,
            depth: 2,
            rho: 2,
            j: 1,
            ..small_config()
        };
        let mut m = init_params(&config, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        m.visit_mut(|path, data| {
            if path.contains("spec_w") {
                data.fill(0.0);
            } else if path.contains("omega") {
                for v in data {
                    *v = rng.gen_range(-0.7..0.7);
                }
            }
        });
        // Receptive field of node 0 is depth·rho = 4 hops.
        let base = Mat::zeros(n, 1);
        let mut far = Mat::zeros(n, 1);
        far.set(7, 0, 1.0);
        let out_a = model_forward_prepared(&m, &lap, Some(&base), &evd, 0).unwrap();
        let out_b = model_forward_prepared(&m, &lap, Some(&far), &evd, 0).unwrap();
        for node in 0..=2 {
            assert_eq!(
                out_a.get(node, 0).to_bits(),
                out_b.get(node, 0).to_bits(),
                "node {node} saw a perturbation 7 hops away through a 4-hop field"
            );
        }
        assert_ne!(out_a.get(7, 0).to_bits(), out_b.get(7, 0).to_bits());
    }

    #[test]
    fn spectral_branch_reaches_past_the_polynomial_ball() {
        let n = 40;
        let g = synth::path_graph(n);
        let (lap, evd) = prepared(&g, 4);
        let config = ModelConfig {
            d_in: 1,
            pe_count: 0,
            d: 3,
            d_out: 1,
            depth: 1,
            rho: 2,
            j: 1,
            lambda_cut: 1.0,
            ..small_config()
        };
        let m = init_params(&config, 21).unwrap();
        let base = Mat::zeros(n, 1);
        let mut far = Mat::zeros(n, 1);
        far.set(n - 1, 0, 1.0);
        let out_a = model_forward_prepared(&m, &lap, Some(&base), &evd, 0).unwrap();
        let out_b = model_forward_prepared(&m, &lap, Some(&far), &evd, 0).unwrap();
        let delta = (out_a.get(0, 0) - out_b.get(0, 0)).abs();
        assert!(
            delta > 1e-12,
            "perturbation {} hops away should reach node 0 spectrally",
            n - 1
        );
    }

    #[test]
    fn model_is_permutation_equivariant() {
        let n = 12;
        let g = synth::random_connected_graph(n, 0.25, 31);
        let (lap, evd) = prepared(&g, 6);
        let feats = random_mat(n, 2, 32);
        let config = ModelConfig {
            pe_count: 0,
            d_in: 2,
            ..small_config()
        };
        let m = init_params(&config, 33).unwrap();
        let out = model_forward_prepared(&m, &lap, Some(&feats), &evd, 0).unwrap();

        // Permute the graph, features, and eigenvector rows coherently.
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let edges: Vec<(u32, u32)> = g
            .edges()
            .iter()
            .map(|&(u, v)| (perm[u as usize] as u32, perm[v as usize] as u32))
            .collect();
        let pg = Graph::from_edges(n, &edges, None, false).unwrap().graph;
        let plap = build_normalized_laplacian(&pg);
        let mut pu = Mat::zeros(n, evd.k);
        for i in 0..n {
            for j in 0..evd.k {
                pu.set(perm[i], j, evd.u.get(i, j));
            }
        }
        let pevd = PartialEvd {
            k: evd.k,
            lambdas: evd.lambdas.clone(),
            u: pu,
            residual_norms: evd.residual_norms.clone(),
        };
        let mut pfeats = Mat::zeros(n, 2);
        for i in 0..n {
            for j in 0..2 {
                pfeats.set(perm[i], j, feats.get(i, j));
            }
        }
        let pout = model_forward_prepared(&m, &plap, Some(&pfeats), &pevd, 0).unwrap();
        for i in 0..n {
            for j in 0..out.cols() {
                let diff = (pout.get(perm[i], j) - out.get(i, j)).abs();
                assert!(diff <= 1e-12, "node {i} channel {j}: {diff}");
            }
        }
    }

    #[test]
    fn flat_round_trip_and_specs() {
        for mode in [FilterMode::Independent, FilterMode::Shared] {
            for agg in [Aggregation::Sum, Aggregation::ConcatProject] {
                let config = ModelConfig {
                    mode,
                    aggregation: agg,
                    ..small_config()
                };
                let m = init_params(&config, 17).unwrap();
                let flat = m.to_flat();
                let specs = m.param_specs();
                let total: usize = specs.iter().map(|s| s.len()).sum();
                assert_eq!(total, flat.len());
                let back = m.from_flat(&flat).unwrap();
                assert_eq!(m, back);
                let zeros = m.zeros_like();
                assert!(zeros.to_flat().iter().all(|&v| v == 0.0));
                assert_eq!(zeros.num_params(), flat.len());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let config = ModelConfig {
            mode: FilterMode::Shared,
            aggregation: Aggregation::ConcatProject,
            ..small_config()
        };
        let m = init_params(&config, 23).unwrap();
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        let (a, b) = (m.to_flat(), back.to_flat());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn nan_parameters_abort_with_layer_context() {
        let g = synth::path_graph(5);
        let (lap, evd) = prepared(&g, 3);
        let feats = random_mat(5, 2, 40);
        let mut m = init_params(&small_config(), 41).unwrap();
        // Last MLP stage: no trailing activation, so the NaN survives to
        // the branch filters and the layer output.
        m.layers[1].mlp.weights[1].set(0, 0, f64::NAN);
        let err = model_forward_prepared(&m, &lap, Some(&feats), &evd, 2).unwrap_err();
        match err {
            Error::NonFinite { context } => {
                assert!(context.contains("layer 1"), "context: {context}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_features_rejected() {
        let g = synth::path_graph(4);
        let (lap, evd) = prepared(&g, 3);
        let m = init_params(&small_config(), 42).unwrap();
        assert!(model_forward_prepared(&m, &lap, None, &evd, 2).is_err());
    }

    #[test]
    fn config_validation_catches_nonsense() {
        let mut c = small_config();
        c.d = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.d_in = 0;
        c.pe_count = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.lambda_cut = 3.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.mlp_depth = 0;
        assert!(c.validate().is_err());
    }
}
