//! Losses, exact reverse-mode gradients through the whole model, a
//! finite-difference oracle, AdamW with warmup + cosine annealing, and two
//! toy tasks (one long-range, one strictly local) for ablation studies.
//!
//! Reverse mode is hand-derived per operation rather than taped: the model
//! is a fixed pipeline, and every forward routine already records the
//! intermediates its adjoint needs.

use crate::codec::{hex_to_vec, vec_to_hex};
use crate::dense::{dot, Mat};
use crate::error::{Error, Result};
use crate::filters::{
    chebyshev_apply, sigmoid, smearing_basis_with_derivative, softplus, Correction, FilterTrace,
    HybridFilter,
};
use crate::graph::{build_normalized_laplacian, Graph, NormalizedLaplacian};
use crate::network::{
    model_forward_prepared, model_forward_traced, Aggregation, FilterBank, LayerParams,
    LayerTrace, MlpParams, MlpTrace, ModelParams, ReadoutKind, ResidualMode,
};
use crate::spectral::{partial_evd, PartialEvd, DEFAULT_LANCZOS_TOL};
use crate::synth;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Structural mirror of the parameters holding ∂loss/∂parameter.
pub type Gradients = ModelParams;

// ---------------------------------------------------------------------------
// Losses

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    NodeRegression,
    NodeClassification,
    GraphClassification,
}

impl TaskKind {
    pub fn is_classification(&self) -> bool {
        !matches!(self, TaskKind::NodeRegression)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node-regression" => Ok(TaskKind::NodeRegression),
            "node-classification" => Ok(TaskKind::NodeClassification),
            "graph-classification" => Ok(TaskKind::GraphClassification),
            other => Err(Error::InvalidArgument(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Values(Mat),
    Labels(Vec<u32>),
}

/// Mean-over-entries squared error and its gradient w.r.t. predictions.
pub fn mse_loss(pred: &Mat, target: &Mat) -> Result<(f64, Mat)> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(Error::DimensionMismatch {
            context: "mse_loss".into(),
            expected: format!("{}×{}", target.rows(), target.cols()),
            got: format!("{}×{}", pred.rows(), pred.cols()),
        });
    }
    let count = (pred.rows() * pred.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        loss += d * d;
        grad.data_mut()[i] = 2.0 * d / count;
    }
    Ok((loss / count, grad))
}

/// Row-wise softmax cross-entropy with log-sum-exp stabilization, mean over
/// rows; gradient is (softmax − onehot)/rows.
pub fn cross_entropy_loss(logits: &Mat, labels: &[u32]) -> Result<(f64, Mat)> {
    if logits.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "cross_entropy_loss".into(),
            expected: format!("{} label rows", logits.rows()),
            got: format!("{}", labels.len()),
        });
    }
    let classes = logits.cols();
    let rows = logits.rows();
    if rows == 0 || classes == 0 {
        return Err(Error::InvalidArgument("empty logits".into()));
    }
    let mut loss = 0.0;
    let mut grad = Mat::zeros(rows, classes);
    for i in 0..rows {
        let y = labels[i] as usize;
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[y];
        let grow = grad.row_mut(i);
        for c in 0..classes {
            let p = (row[c] - lse).exp();
            grow[c] = (p - if c == y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    Ok((loss / rows as f64, grad))
}

/// Loss matching the task kind, plus its gradient w.r.t. predictions.
pub fn loss_and_grad(kind: TaskKind, pred: &Mat, target: &Target) -> Result<(f64, Mat)> {
    match (kind, target) {
        (TaskKind::NodeRegression, Target::Values(t)) => mse_loss(pred, t),
        (TaskKind::NodeClassification | TaskKind::GraphClassification, Target::Labels(l)) => {
            cross_entropy_loss(pred, l)
        }
        _ => Err(Error::InvalidArgument(
            "target type does not match task kind".into(),
        )),
    }
}

/// Reporting metric: mean absolute error for regression, accuracy for
/// classification.
pub fn metric(kind: TaskKind, pred: &Mat, target: &Target) -> Result<f64> {
    match (kind, target) {
        (TaskKind::NodeRegression, Target::Values(t)) => {
            if pred.rows() != t.rows() || pred.cols() != t.cols() {
                return Err(Error::DimensionMismatch {
                    context: "metric".into(),
                    expected: format!("{}×{}", t.rows(), t.cols()),
                    got: format!("{}×{}", pred.rows(), pred.cols()),
                });
            }
            let count = (pred.rows() * pred.cols()).max(1) as f64;
            let s: f64 = pred
                .data()
                .iter()
                .zip(t.data())
                .map(|(p, t)| (p - t).abs())
                .sum();
            Ok(s / count)
        }
        (_, Target::Labels(labels)) => {
            if pred.rows() != labels.len() {
                return Err(Error::DimensionMismatch {
                    context: "metric".into(),
                    expected: format!("{} rows", labels.len()),
                    got: format!("{}", pred.rows()),
                });
            }
            let mut hits = 0usize;
            for i in 0..pred.rows() {
                let row = pred.row(i);
                let mut best = 0usize;
                for c in 1..row.len() {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                if best as u32 == labels[i] {
                    hits += 1;
                }
            }
            Ok(hits as f64 / labels.len().max(1) as f64)
        }
        _ => Err(Error::InvalidArgument(
            "target type does not match task kind".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Reverse mode

/// Adjoint of one hybrid filter application. Accumulates parameter
/// gradients into `gf`, the input adjoint into `d_f`, and returns ∂loss/∂scale
/// (only meaningful when the caller owns a scale ladder).
fn filter_backward(
    f: &HybridFilter,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    dz: &Mat,
    f_input: &Mat,
    tr: &FilterTrace,
    gf: &mut HybridFilter,
    d_f: &mut Mat,
    want_scale: bool,
) -> Result<f64> {
    let corrected = tr.corr != Correction::Plain;

    // Chebyshev coefficients: ∂out/∂ωᵢ = Tᵢ(L̃)F − [corrected]·(−1)ⁱ·F.
    // states[0] is a bitwise clone of F, so a corrected ω₀ gradient is an
    // exact zero, not a rounding-level one.
    let dz_dot_f = if corrected {
        dot(dz.data(), f_input.data())
    } else {
        0.0
    };
    for (i, st) in tr.states.iter().enumerate() {
        let mut gi = dot(dz.data(), st.data());
        if corrected {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            gi -= sign * dz_dot_f;
        }
        gf.cheb.omega[i] += gi;
    }

    // Input adjoint, polynomial side: the operator P(L̃) − p_const·I is
    // symmetric, so it applies unchanged to the output adjoint.
    d_f.add_assign(&chebyshev_apply(&f.cheb, lap, dz)?);
    if corrected {
        d_f.add_scaled(dz, -tr.p_const);
    }

    // Spectral side: out += U(resp_eff ⊙ UᵀF).
    let dm = evd.u.matmul_tn(dz);
    let dm_xhat = dm.hadamard(&tr.xhat);
    gf.spec.w.add_assign(&tr.basis_eff.matmul_tn(&dm_xhat));
    let d_xhat = dm.hadamard(&tr.resp_eff);
    d_f.add_assign(&evd.u.matmul(&d_xhat));

    // Dilation: only the smearing basis depends on the scale (the λ=0
    // correction rows sit at s·0 = 0 and the polynomial branch is
    // scale-invariant), so ∂basis[u][j]/∂s = λᵤ·bⱼ'(s·λᵤ).
    let ds = if want_scale {
        let z = f.spec.z();
        let mut bp = Mat::zeros(evd.k, z);
        for u in 0..evd.k {
            let lam = evd.lambdas[u];
            let (_, dvals) = smearing_basis_with_derivative(&f.spec, tr.scale * lam);
            let row = bp.row_mut(u);
            for j in 0..z {
                row[j] = lam * dvals[j];
            }
        }
        let rp = bp.matmul(&f.spec.w);
        dot(dm_xhat.data(), rp.data())
    } else {
        0.0
    };
    Ok(ds)
}

/// Adjoint of the nodewise MLP. Returns the input adjoint.
fn mlp_backward(p: &MlpParams, tr: &MlpTrace, d_out: &Mat, g: &mut MlpParams) -> Mat {
    let depth = p.weights.len();
    let mut grad = d_out.clone();
    for l in (0..depth).rev() {
        let d_pre = if l + 1 < depth {
            grad.hadamard(&p.activation.derivative(&tr.pres[l]))
        } else {
            grad
        };
        g.weights[l].add_assign(&tr.inputs[l].matmul_tn(&d_pre));
        for (a, b) in g.biases[l].iter_mut().zip(d_pre.col_sums()) {
            *a += b;
        }
        grad = d_pre.matmul(&p.weights[l].transpose());
    }
    grad
}

/// Adjoint of one layer. Returns the adjoint of the layer input.
fn layer_backward(
    lp: &LayerParams,
    gl: &mut LayerParams,
    lap: &NormalizedLaplacian,
    evd: &PartialEvd,
    tr: &LayerTrace,
    d_out: &Mat,
) -> Result<Mat> {
    let n_branches = 1 + tr.wavelets.len();
    let width = tr.activated[0].cols();

    let d_acts: Vec<Mat> = match lp.aggregation {
        Aggregation::Sum => vec![d_out.clone(); n_branches],
        Aggregation::ConcatProject => {
            let proj = lp.projection.as_ref().ok_or_else(|| {
                Error::InvalidArgument("concat-project layer lost its projection".into())
            })?;
            let mut cat = tr.activated[0].clone();
            for a in &tr.activated[1..] {
                cat = cat.hcat(a);
            }
            let gp = gl
                .projection
                .as_mut()
                .expect("gradient container mirrors the projection");
            gp.add_assign(&cat.matmul_tn(d_out));
            let d_cat = d_out.matmul(&proj.transpose());
            (0..n_branches)
                .map(|b| d_cat.col_slice(b * width, (b + 1) * width))
                .collect()
        }
    };

    let residual_filters = lp.residual == ResidualMode::Wavelet;
    let mut d_f = Mat::zeros(tr.f.rows(), tr.f.cols());

    let scaling_dz = d_acts[0].hadamard(&lp.activation.derivative(&tr.scaling.z));
    if residual_filters {
        d_f.add_assign(&scaling_dz);
    }
    filter_backward(
        &lp.phi,
        lap,
        evd,
        &scaling_dz,
        &tr.f,
        &tr.scaling.filt,
        &mut gl.phi,
        &mut d_f,
        false,
    )?;

    match (&lp.bank, &mut gl.bank) {
        (FilterBank::Independent(psis), FilterBank::Independent(gpsis)) => {
            for (j, (psi, bt)) in psis.iter().zip(&tr.wavelets).enumerate() {
                let dz = d_acts[1 + j].hadamard(&lp.activation.derivative(&bt.z));
                if residual_filters {
                    d_f.add_assign(&dz);
                }
                filter_backward(
                    psi, lap, evd, &dz, &tr.f, &bt.filt, &mut gpsis[j], &mut d_f, false,
                )?;
            }
        }
        (
            FilterBank::Shared { psi, scales },
            FilterBank::Shared {
                psi: gpsi,
                scales: gscales,
            },
        ) => {
            let jn = tr.wavelets.len();
            let su = sigmoid(scales.t_u) / softplus(scales.t_u);
            let sl = sigmoid(scales.t_l) / softplus(scales.t_l);
            for (j, bt) in tr.wavelets.iter().enumerate() {
                let dz = d_acts[1 + j].hadamard(&lp.activation.derivative(&bt.z));
                if residual_filters {
                    d_f.add_assign(&dz);
                }
                let ds =
                    filter_backward(psi, lap, evd, &dz, &tr.f, &bt.filt, gpsi, &mut d_f, true)?;
                // sⱼ = exp((1−aⱼ)·ln s_max + aⱼ·ln s_min) with the endpoints
                // driven by softplus(t_U)·λ_LP and softplus(t_L).
                let a = if jn == 1 {
                    0.0
                } else {
                    j as f64 / (jn - 1) as f64
                };
                let s = tr.scales[j];
                gscales.t_u += ds * s * (1.0 - a) * su;
                gscales.t_l += ds * s * a * sl;
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "gradient container does not mirror the filter bank".into(),
            ))
        }
    }

    let mut d_prev = mlp_backward(&lp.mlp, &tr.mlp, &d_f, &mut gl.mlp);
    if lp.residual == ResidualMode::Standard {
        d_prev.add_assign(d_out);
    }
    Ok(d_prev)
}

fn first_nonfinite_path(g: &Gradients) -> Option<String> {
    let mut found = None;
    g.visit(|path, _, data| {
        if found.is_none() && data.iter().any(|v| !v.is_finite()) {
            found = Some(path);
        }
    });
    found
}

/// Full forward + loss + exact reverse pass. Returns the loss and a
/// gradient container shaped like the parameters.
pub fn model_backward(
    m: &ModelParams,
    lap: &NormalizedLaplacian,
    features: Option<&Mat>,
    evd: &PartialEvd,
    pe_count: usize,
    kind: TaskKind,
    target: &Target,
) -> Result<(f64, Gradients)> {
    let (out, trace) = model_forward_traced(m, lap, features, evd, pe_count)?;
    let (loss, d_out) = loss_and_grad(kind, &out, target)?;
    let mut g = m.zeros_like();

    let last = trace.h.last().expect("forward records h0");
    let mut d_h = match m.config.readout {
        ReadoutKind::NodeIdentity => {
            g.head_w = last.matmul_tn(&d_out);
            g.head_b = d_out.col_sums();
            d_out.matmul(&m.head_w.transpose())
        }
        ReadoutKind::MeanPool => {
            let pooled = trace.pooled.as_ref().expect("mean-pool trace");
            g.head_w = pooled.matmul_tn(&d_out);
            g.head_b = d_out.col_sums();
            let d_pooled = d_out.matmul(&m.head_w.transpose());
            let n = last.rows() as f64;
            Mat::from_fn(last.rows(), last.cols(), |_, j| d_pooled.get(0, j) / n)
        }
    };

    for i in (0..m.layers.len()).rev() {
        let (head, tail) = g.layers.split_at_mut(i);
        let _ = head;
        d_h = layer_backward(&m.layers[i], &mut tail[0], lap, evd, &trace.layers[i], &d_h)?;
    }

    g.input_w = trace.input.matmul_tn(&d_h);
    g.input_b = d_h.col_sums();

    if let Some(path) = first_nonfinite_path(&g) {
        return Err(Error::NonFinite {
            context: format!("gradient of {path}"),
        });
    }
    Ok((loss, g))
}

/// Forward + loss only, for the finite-difference oracle and evaluation.
pub fn loss_only(
    m: &ModelParams,
    lap: &NormalizedLaplacian,
    features: Option<&Mat>,
    evd: &PartialEvd,
    pe_count: usize,
    kind: TaskKind,
    target: &Target,
) -> Result<f64> {
    let pred = model_forward_prepared(m, lap, features, evd, pe_count)?;
    Ok(loss_and_grad(kind, &pred, target)?.0)
}

/// Central-difference gradient over every scalar parameter, aligned with
/// the canonical flat order. Meant for small models only.
pub fn fd_gradient(
    m: &ModelParams,
    lap: &NormalizedLaplacian,
    features: Option<&Mat>,
    evd: &PartialEvd,
    pe_count: usize,
    kind: TaskKind,
    target: &Target,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("fd step must be positive".into()));
    }
    let base = m.to_flat();
    let mut out = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let lp = loss_only(&m.from_flat(&probe)?, lap, features, evd, pe_count, kind, target)?;
        probe[i] = base[i] - h;
        let lm = loss_only(&m.from_flat(&probe)?, lap, features, evd, pe_count, kind, target)?;
        probe[i] = base[i];
        out[i] = (lp - lm) / (2.0 * h);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear-warmup step count; None means 5% of total, rounded up.
    pub warmup_steps: Option<usize>,
    /// Cosine horizon. 0 lets `train` derive epochs × train graphs.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: None,
            total_steps: 0,
        }
    }
}

impl AdamWConfig {
    fn resolved_warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.total_steps as f64 * 0.05).ceil() as usize)
    }
}

/// Learning rate at a step: linear ramp from 0 across the warmup window,
/// then cosine decay to 0 at `total_steps`.
pub fn scheduled_lr(c: &AdamWConfig, step: usize) -> f64 {
    let warmup = c.resolved_warmup();
    if warmup > 0 && step < warmup {
        return c.lr * step as f64 / warmup as f64;
    }
    let span = c.total_steps.saturating_sub(warmup);
    if span == 0 {
        return c.lr;
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    c.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        OptimizerState {
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// One AdamW step with decoupled weight decay and bias-corrected moments,
/// at the scheduled learning rate for the current step count.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    cfg: &AdamWConfig,
    state: &mut OptimizerState,
) -> Result<()> {
    let g = grads.to_flat();
    if g.len() != state.m.len() || g.len() != params.num_params() {
        return Err(Error::DimensionMismatch {
            context: "optimizer_step".into(),
            expected: format!("{} parameters", state.m.len()),
            got: format!("{}", g.len()),
        });
    }
    let lr_t = scheduled_lr(cfg, state.step);
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (m, v) = (&mut state.m, &mut state.v);
    let mut off = 0;
    params.visit_mut(|_, data| {
        for x in data {
            let gi = g[off];
            m[off] = cfg.beta1 * m[off] + (1.0 - cfg.beta1) * gi;
            v[off] = cfg.beta2 * v[off] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[off] / bc1;
            let vhat = v[off] / bc2;
            *x -= lr_t * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *x);
            off += 1;
        }
    });
    state.step += 1;
    Ok(())
}

/// Zero every tensor whose path contains any of the substrings. Applied to
/// both initial parameters and per-step gradients, it pins the matched
/// tensors at zero for the whole run (first and second moments stay zero,
/// and decoupled decay of zero is zero).
pub fn apply_param_mask(p: &mut ModelParams, substrings: &[String]) {
    if substrings.is_empty() {
        return;
    }
    p.visit_mut(|path, data| {
        if substrings.iter().any(|s| path.contains(s.as_str())) {
            data.fill(0.0);
        }
    });
}

/// Masks for the standard ablation variants.
pub fn ablation_mask(variant: &str) -> Result<Vec<String>> {
    match variant {
        "full" => Ok(vec![]),
        "no-spectral" => Ok(vec!["spec_w".into()]),
        "no-spatial" => Ok(vec!["omega".into()]),
        other => Err(Error::InvalidArgument(format!(
            "unknown ablation variant {other:?} (expected full, no-spectral, or no-spatial)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Toy tasks

#[derive(Debug, Clone)]
pub struct TaskItem {
    pub graph: Graph,
    pub target: Target,
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub name: String,
    pub kind: TaskKind,
    pub items: Vec<TaskItem>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        for idx in self.train_idx.iter().chain(&self.val_idx) {
            if *idx >= self.items.len() {
                return Err(Error::InvalidArgument(format!(
                    "split index {idx} out of range for {} graphs",
                    self.items.len()
                )));
            }
        }
        for t in &self.train_idx {
            if self.val_idx.contains(t) {
                return Err(Error::InvalidArgument(format!(
                    "graph {t} appears in both splits"
                )));
            }
        }
        for item in &self.items {
            match (&self.kind, &item.target) {
                (TaskKind::NodeRegression, Target::Values(v)) => {
                    if v.rows() != item.graph.node_count() {
                        return Err(Error::InvalidArgument(
                            "regression target row count differs from node count".into(),
                        ));
                    }
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: "task target".into(),
                        });
                    }
                }
                (TaskKind::NodeClassification, Target::Labels(l)) => {
                    if l.len() != item.graph.node_count() {
                        return Err(Error::InvalidArgument(
                            "label count differs from node count".into(),
                        ));
                    }
                }
                (TaskKind::GraphClassification, Target::Labels(l)) => {
                    if l.len() != 1 {
                        return Err(Error::InvalidArgument(
                            "graph classification wants one label per graph".into(),
                        ));
                    }
                }
                _ => {
                    return Err(Error::InvalidArgument(
                        "target type does not match task kind".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Output width a model needs for this task.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            TaskKind::NodeRegression => match &self.items[0].target {
                Target::Values(v) => v.cols(),
                Target::Labels(_) => 1,
            },
            _ => {
                let mut classes = 0u32;
                for item in &self.items {
                    if let Target::Labels(l) = &item.target {
                        for &x in l {
                            classes = classes.max(x + 1);
                        }
                    }
                }
                classes as usize
            }
        }
    }

    /// Input feature width (0 when graphs carry no features).
    pub fn feature_dim(&self) -> usize {
        self.items[0].graph.features().map_or(0, |f| f.cols())
    }
}

fn split_indices(count: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    let val = (count as f64 * 0.2).ceil() as usize;
    let val = val.clamp(1, count.saturating_sub(1).max(1));
    let (v, t) = idx.split_at(val);
    let mut train: Vec<usize> = t.to_vec();
    let mut vals: Vec<usize> = v.to_vec();
    train.sort_unstable();
    vals.sort_unstable();
    (train, vals)
}

/// Long-range probe: path graphs where a single marked source node must be
/// located by every other node. Target = normalized hop distance, so nodes
/// far from the source need information from well outside any small
/// polynomial ball.
pub fn make_path_localization_task(
    n_nodes: usize,
    n_graphs: usize,
    seed: u64,
) -> Result<ToyTask> {
    if n_nodes < 64 {
        return Err(Error::InvalidArgument(format!(
            "path localization wants at least 64 nodes, got {n_nodes}"
        )));
    }
    if n_graphs < 2 {
        return Err(Error::InvalidArgument(
            "need at least two graphs to split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_graphs);
    for _ in 0..n_graphs {
        let mut graph = synth::path_graph(n_nodes);
        let src = rng.gen_range(0..n_nodes);
        let feats = Mat::from_fn(n_nodes, 1, |i, _| if i == src { 1.0 } else { 0.0 });
        graph.set_features(Some(feats))?;
        let target = Mat::from_fn(n_nodes, 1, |v, _| {
            (v as f64 - src as f64).abs() / (n_nodes - 1) as f64
        });
        items.push(TaskItem {
            graph,
            target: Target::Values(target),
        });
    }
    let (train_idx, val_idx) = split_indices(n_graphs, &mut rng);
    let task = ToyTask {
        name: "path-localization".into(),
        kind: TaskKind::NodeRegression,
        items,
        train_idx,
        val_idx,
    };
    task.validate()?;
    Ok(task)
}

/// Degree bucket: 0 for leaves, 1 for degree 2, 2 for everything denser.
pub fn degree_bucket(degree: usize) -> u32 {
    match degree {
        0 | 1 => 0,
        2 => 1,
        _ => 2,
    }
}

/// Short-range control: classify each node by its degree bucket. The label
/// is a function of the 1-hop neighborhood alone.
pub fn make_local_degree_task(n_graphs: usize, seed: u64) -> Result<ToyTask> {
    if n_graphs < 2 {
        return Err(Error::InvalidArgument(
            "need at least two graphs to split".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n_graphs);
    for _ in 0..n_graphs {
        let n = rng.gen_range(24..=48);
        let mut graph = synth::random_connected_graph(n, 0.08, rng.gen());
        graph.set_features(Some(Mat::from_fn(n, 1, |_, _| 1.0)))?;
        let labels = (0..n).map(|v| degree_bucket(graph.degree(v))).collect();
        items.push(TaskItem {
            graph,
            target: Target::Labels(labels),
        });
    }
    let (train_idx, val_idx) = split_indices(n_graphs, &mut rng);
    let task = ToyTask {
        name: "local-degree".into(),
        kind: TaskKind::NodeClassification,
        items,
        train_idx,
        val_idx,
    };
    task.validate()?;
    Ok(task)
}

// ---------------------------------------------------------------------------
// Task serialization

#[derive(Serialize, Deserialize)]
struct MatJson {
    rows: usize,
    cols: usize,
    data: Vec<String>,
}

fn mat_to_json(m: &Mat) -> MatJson {
    MatJson {
        rows: m.rows(),
        cols: m.cols(),
        data: vec_to_hex(m.data()),
    }
}

fn mat_from_json(j: &MatJson) -> Result<Mat> {
    let data = hex_to_vec(&j.data)?;
    if data.len() != j.rows * j.cols {
        return Err(Error::Serialization(format!(
            "matrix payload holds {} values for a {}×{} shape",
            data.len(),
            j.rows,
            j.cols
        )));
    }
    Ok(Mat::from_vec(j.rows, j.cols, data))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum TargetJson {
    Values(MatJson),
    Labels { labels: Vec<u32> },
}

#[derive(Serialize, Deserialize)]
struct TaskItemJson {
    n: usize,
    edges: Vec<(u32, u32)>,
    features: Option<MatJson>,
    target: TargetJson,
}

#[derive(Serialize, Deserialize)]
struct TaskJson {
    name: String,
    kind: TaskKind,
    graphs: Vec<TaskItemJson>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

/// Bundle the task as JSON with bit-exact float payloads.
pub fn save_task(path: &Path, task: &ToyTask) -> Result<()> {
    task.validate()?;
    let graphs = task
        .items
        .iter()
        .map(|item| TaskItemJson {
            n: item.graph.node_count(),
            edges: item.graph.edges().to_vec(),
            features: item.graph.features().map(mat_to_json),
            target: match &item.target {
                Target::Values(v) => TargetJson::Values(mat_to_json(v)),
                Target::Labels(l) => TargetJson::Labels { labels: l.clone() },
            },
        })
        .collect();
    let file = TaskJson {
        name: task.name.clone(),
        kind: task.kind,
        graphs,
        train_idx: task.train_idx.clone(),
        val_idx: task.val_idx.clone(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_task(path: &Path) -> Result<ToyTask> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: TaskJson =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut items = Vec::with_capacity(file.graphs.len());
    for gj in &file.graphs {
        let features = gj.features.as_ref().map(mat_from_json).transpose()?;
        let graph = Graph::from_edges(gj.n, &gj.edges, features, true)?.graph;
        let target = match &gj.target {
            TargetJson::Values(v) => Target::Values(mat_from_json(v)?),
            TargetJson::Labels { labels } => Target::Labels(labels.clone()),
        };
        items.push(TaskItem { graph, target });
    }
    let task = ToyTask {
        name: file.name,
        kind: file.kind,
        items,
        train_idx: file.train_idx,
        val_idx: file.val_idx,
    };
    task.validate()?;
    Ok(task)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    /// Eigenpairs per graph (clamped to each graph's node count).
    pub k: usize,
    pub pe_count: usize,
    /// Path substrings of tensors pinned at zero for the whole run.
    pub mask: Vec<String>,
    /// Seed for the per-graph eigendecompositions.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            optimizer: AdamWConfig::default(),
            patience: 20,
            k: 8,
            pe_count: 0,
            mask: vec![],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

/// Render trace rows as CSV (no config comment; the caller owns headers
/// beyond the column line).
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,step,train_loss,val_loss,val_metric,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.step, r.train_loss, r.val_loss, r.val_metric, r.lr
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<TraceRow>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Laplacian + eigendecomposition for each task graph, computed once.
pub fn prepare_task(
    task: &ToyTask,
    k: usize,
    seed: u64,
) -> Result<Vec<(NormalizedLaplacian, PartialEvd)>> {
    task.items
        .iter()
        .map(|item| {
            let lap = build_normalized_laplacian(&item.graph);
            let n = lap.dim();
            let kk = k.clamp(1, n);
            let evd = partial_evd(&lap, kk, DEFAULT_LANCZOS_TOL, 4 * n + 64, seed)?;
            Ok((lap, evd))
        })
        .collect()
}

/// Mean loss and metric over the indexed graphs, reduced in index order.
pub fn evaluate(
    m: &ModelParams,
    task: &ToyTask,
    prepared: &[(NormalizedLaplacian, PartialEvd)],
    indices: &[usize],
    pe_count: usize,
) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no graphs to evaluate".into()));
    }
    let mut loss_sum = 0.0;
    let mut metric_sum = 0.0;
    for &gi in indices {
        let item = &task.items[gi];
        let (lap, evd) = &prepared[gi];
        let pred = model_forward_prepared(m, lap, item.graph.features(), evd, pe_count)?;
        loss_sum += loss_and_grad(task.kind, &pred, &item.target)?.0;
        metric_sum += metric(task.kind, &pred, &item.target)?;
    }
    let n = indices.len() as f64;
    Ok((loss_sum / n, metric_sum / n))
}

/// Per-graph AdamW over the training split in fixed order, one epoch-level
/// evaluation driving early stopping, best-checkpoint restore on exit.
pub fn train(mut m: ModelParams, task: &ToyTask, cfg: &TrainConfig) -> Result<TrainOutcome> {
    task.validate()?;
    if task.train_idx.is_empty() {
        return Err(Error::InvalidArgument("task has no training graphs".into()));
    }
    apply_param_mask(&mut m, &cfg.mask);
    let prepared = prepare_task(task, cfg.k, cfg.seed)?;

    let mut opt = cfg.optimizer.clone();
    if opt.total_steps == 0 {
        opt.total_steps = cfg.epochs * task.train_idx.len();
    }
    let mut state = OptimizerState::new(m.num_params());

    // Early stopping falls back to the training split when the task ships
    // without validation graphs.
    let eval_idx: &[usize] = if task.val_idx.is_empty() {
        &task.train_idx
    } else {
        &task.val_idx
    };

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<ModelParams> = None;
    let mut evals_since_best = 0usize;
    let mut stopped_early = false;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut last_lr = scheduled_lr(&opt, state.step);
        for &gi in &task.train_idx {
            let item = &task.items[gi];
            let (lap, evd) = &prepared[gi];
            let (loss, mut grads) = model_backward(
                &m,
                lap,
                item.graph.features(),
                evd,
                cfg.pe_count,
                task.kind,
                &item.target,
            )?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch} step {global_step}"),
                });
            }
            apply_param_mask(&mut grads, &cfg.mask);
            last_lr = scheduled_lr(&opt, state.step);
            optimizer_step(&mut m, &grads, &opt, &mut state)?;
            loss_sum += loss;
            global_step += 1;
        }
        let train_loss = loss_sum / task.train_idx.len() as f64;
        let (val_loss, val_metric) = evaluate(&m, task, &prepared, eval_idx, cfg.pe_count)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("validation loss at epoch {epoch}"),
            });
        }
        trace.push(TraceRow {
            epoch,
            step: global_step,
            train_loss,
            val_loss,
            val_metric,
            lr: last_lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = Some(m.clone());
            evals_since_best = 0;
        } else {
            evals_since_best += 1;
            if evals_since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params.unwrap_or(m),
        trace,
        best_val_loss: best_val,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::solve_spd;
    use crate::filters::{response_with_correction, Window};
    use crate::network::{init_params, Activation, FilterMode, ModelConfig};
    use crate::spectral::{dense_evd, PartialEvd};

    fn base_config() -> ModelConfig {
        ModelConfig {
            d_in: 1,
            pe_count: 2,
            d: 4,
            d_out: 1,
            depth: 2,
            mlp_depth: 2,
            j: 2,
            rho: 2,
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
    fn mse_examples() {
        let t = random_mat(3, 2, 1);
        let (l, g) = mse_loss(&t, &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));

        let p = Mat::from_vec(1, 1, vec![3.0]);
        let y = Mat::from_vec(1, 1, vec![1.0]);
        let (l, g) = mse_loss(&p, &y).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(g.get(0, 0), 4.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        for c in [2, 3, 7] {
            let logits = Mat::from_fn(4, c, |_, _| 0.3);
            let labels = vec![0u32; 4];
            let (l, g) = cross_entropy_loss(&logits, &labels).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-12);
            // Softmax minus onehot sums to zero over classes in each row.
            for i in 0..4 {
                let s: f64 = g.row(i).iter().sum();
                assert!(s.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Mat::from_fn(2, 3, |_, _| 0.0);
        assert!(cross_entropy_loss(&logits, &[0, 3]).is_err());
        assert!(cross_entropy_loss(&logits, &[0]).is_err());
    }

    #[test]
    fn loss_gradients_match_scalar_fd() {
        let pred = random_mat(5, 3, 2);
        let vals = random_mat(5, 3, 3);
        let (_, g) = mse_loss(&pred, &vals).unwrap();
        let labels: Vec<u32> = vec![0, 2, 1, 1, 0];
        let (_, gc) = cross_entropy_loss(&pred, &labels).unwrap();
        let h = 1e-6;
        for idx in 0..2 {
            let analytic = if idx == 0 { &g } else { &gc };
            for flat in [0usize, 7, 14] {
                let mut plus = pred.clone();
                plus.data_mut()[flat] += h;
                let mut minus = pred.clone();
                minus.data_mut()[flat] -= h;
                let (lp, lm) = if idx == 0 {
                    (mse_loss(&plus, &vals).unwrap().0, mse_loss(&minus, &vals).unwrap().0)
                } else {
                    (
                        cross_entropy_loss(&plus, &labels).unwrap().0,
                        cross_entropy_loss(&minus, &labels).unwrap().0,
                    )
                };
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - analytic.data()[flat]).abs() < 1e-7,
                    "loss {idx} entry {flat}: fd {fd} vs {}",
                    analytic.data()[flat]
                );
            }
        }
    }

    #[test]
    fn metric_values() {
        let pred = Mat::from_vec(2, 1, vec![0.5, 1.0]);
        let tgt = Target::Values(Mat::from_vec(2, 1, vec![0.0, 2.0]));
        let mae = metric(TaskKind::NodeRegression, &pred, &tgt).unwrap();
        assert!((mae - 0.75).abs() < 1e-15);

        let logits = Mat::from_vec(3, 2, vec![2.0, 1.0, 0.0, 5.0, 1.0, 1.0]);
        let labels = Target::Labels(vec![0, 1, 1]);
        // Row 2 ties at (1,1); argmax resolves to class 0, a miss.
        let acc = metric(TaskKind::NodeClassification, &logits, &labels).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn head_gradient_is_least_squares_gradient() {
        // Zero-layer model with an identity input projection reduces to
        // out = X·w + b, so ∂MSE/∂w = 2/n·Xᵀ(Xw + b − y).
        let g = synth::path_graph(8);
        let (lap, evd) = prepared(&g, 4);
        let x = random_mat(8, 3, 4);
        let y = random_mat(8, 1, 5);
        let config = ModelConfig {
            d_in: 3,
            pe_count: 0,
            d: 3,
            d_out: 1,
            depth: 0,
            ..base_config()
        };
        let mut m = init_params(&config, 6).unwrap();
        m.input_w = Mat::eye(3);
        let (_, grads) = model_backward(
            &m,
            &lap,
            Some(&x),
            &evd,
            0,
            TaskKind::NodeRegression,
            &Target::Values(y.clone()),
        )
        .unwrap();
        let mut resid = x.matmul(&m.head_w);
        for i in 0..8 {
            resid.row_mut(i)[0] += m.head_b[0];
        }
        resid = resid.sub(&y);
        let want = x.matmul_tn(&resid).scale(2.0 / 8.0);
        assert!(crate::dense::rel_frobenius(&grads.head_w, &want) < 1e-12);
    }

    fn check_fd(m: &ModelParams, lap: &NormalizedLaplacian, feats: Option<&Mat>, evd: &PartialEvd,
                pe: usize, kind: TaskKind, target: &Target) {
        let (_, grads) = model_backward(m, lap, feats, evd, pe, kind, target).unwrap();
        let analytic = grads.to_flat();
        let fd = fd_gradient(m, lap, feats, evd, pe, kind, target, 1e-5).unwrap();
        let specs = m.param_specs();
        let mut offset = 0;
        for spec in &specs {
            for i in 0..spec.len() {
                let (a, b) = (analytic[offset + i], fd[offset + i]);
                let abs = (a - b).abs();
                let rel = abs / a.abs().max(b.abs()).max(1e-300);
                assert!(
                    rel <= 1e-4 || abs <= 1e-8,
                    "{} entry {i}: analytic {a} vs fd {b} (rel {rel:.2e}, abs {abs:.2e})",
                    spec.path
                );
            }
            offset += spec.len();
        }
    }

    #[test]
    fn backward_matches_fd_independent_sum() {
        let g = synth::random_connected_graph(12, 0.2, 100);
        let (lap, evd) = prepared(&g, 5);
        let feats = random_mat(12, 1, 101);
        let target = Target::Values(random_mat(12, 1, 102));
        let m = init_params(&base_config(), 103).unwrap();
        check_fd(&m, &lap, Some(&feats), &evd, 2, TaskKind::NodeRegression, &target);
    }

    #[test]
    fn backward_matches_fd_shared_concat_meanpool() {
        // Shared scale ladder + concat projection + wavelet residuals +
        // graph-level cross entropy: exercises t_L/t_U, the projection
        // adjoint, pooling, and the residual-shift correction at once.
        let g = synth::random_connected_graph(10, 0.25, 110);
        let (lap, evd) = prepared(&g, 5);
        let feats = random_mat(10, 1, 111);
        let target = Target::Labels(vec![1]);
        let config = ModelConfig {
            d_out: 3,
            mode: FilterMode::Shared,
            aggregation: Aggregation::ConcatProject,
            residual: ResidualMode::Wavelet,
            activation: Activation::Identity,
            readout: ReadoutKind::MeanPool,
            ..base_config()
        };
        let mut m = init_params(&config, 112).unwrap();
        // Nontrivial polynomial coefficients; delta init leaves most of the
        // chebyshev adjoint untested.
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        m.visit_mut(|path, data| {
            if path.contains("omega") {
                for v in data {
                    *v = rng.gen_range(-0.6..0.6);
                }
            }
        });
        check_fd(&m, &lap, Some(&feats), &evd, 2, TaskKind::GraphClassification, &target);
    }

    #[test]
    fn admissible_omega0_gradient_is_exactly_zero() {
        let g = synth::random_connected_graph(9, 0.3, 120);
        let (lap, evd) = prepared(&g, 4);
        let feats = random_mat(9, 1, 121);
        let target = Target::Values(random_mat(9, 1, 122));
        let mut m = init_params(&base_config(), 123).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(124);
        m.visit_mut(|path, data| {
            if path.contains("omega") || path.contains("spec_w") {
                for v in data {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        });
        let (_, grads) = model_backward(
            &m, &lap, Some(&feats), &evd, 2, TaskKind::NodeRegression, &target,
        )
        .unwrap();
        let mut saw_wavelet = false;
        let mut saw_scaling_nonzero = false;
        grads.visit(|path, _, data| {
            if path.contains("wavelets") && path.ends_with("omega") {
                saw_wavelet = true;
                assert_eq!(data[0], 0.0, "{path}: corrected ω₀ must not move");
            }
            if path.contains("scaling") && path.ends_with("omega") && data[0] != 0.0 {
                saw_scaling_nonzero = true;
            }
        });
        assert!(saw_wavelet);
        // Scaling filters are uncorrected, so their ω₀ does receive signal.
        assert!(saw_scaling_nonzero);
    }

    #[test]
    fn fd_rejects_bad_step() {
        let g = synth::path_graph(4);
        let (lap, evd) = prepared(&g, 3);
        let m = init_params(&base_config(), 1).unwrap();
        let feats = random_mat(4, 1, 2);
        let t = Target::Values(random_mat(4, 1, 3));
        assert!(fd_gradient(&m, &lap, Some(&feats), &evd, 2, TaskKind::NodeRegression, &t, 0.0)
            .is_err());
    }

    #[test]
    fn scheduler_shape() {
        let c = AdamWConfig {
            lr: 0.1,
            warmup_steps: Some(10),
            total_steps: 110,
            ..AdamWConfig::default()
        };
        assert_eq!(scheduled_lr(&c, 0), 0.0);
        assert!((scheduled_lr(&c, 5) - 0.05).abs() < 1e-15);
        assert!((scheduled_lr(&c, 10) - 0.1).abs() < 1e-15);
        assert!(scheduled_lr(&c, 110) < 1e-15);
        assert!(scheduled_lr(&c, 200) < 1e-15);
        let mut prev = scheduled_lr(&c, 10);
        for s in 11..=110 {
            let cur = scheduled_lr(&c, s);
            assert!(cur <= prev);
            prev = cur;
        }
        // Default warmup is 5% of total, rounded up.
        let d = AdamWConfig {
            lr: 1.0,
            total_steps: 100,
            ..AdamWConfig::default()
        };
        assert_eq!(d.resolved_warmup(), 5);
        assert_eq!(scheduled_lr(&d, 0), 0.0);
    }

    #[test]
    fn adam_unit_step() {
        let config = ModelConfig {
            d_in: 2,
            pe_count: 0,
            depth: 0,
            d: 2,
            d_out: 2,
            ..base_config()
        };
        let mut m = init_params(&config, 30).unwrap();
        let before = m.to_flat();
        let mut g = m.zeros_like();
        g.visit_mut(|_, data| data.fill(1.0));
        let cfg = AdamWConfig {
            lr: 0.1,
            eps: 1e-12,
            weight_decay: 0.0,
            warmup_steps: Some(0),
            total_steps: 1000,
            ..AdamWConfig::default()
        };
        let mut state = OptimizerState::new(m.num_params());
        optimizer_step(&mut m, &g, &cfg, &mut state).unwrap();
        let after = m.to_flat();
        for (b, a) in before.iter().zip(&after) {
            // Bias-corrected fresh moments give mhat = vhat = 1, so the
            // update magnitude is the learning rate itself.
            assert!(((b - a) - 0.1).abs() < 1e-9, "step {}", b - a);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn warmup_step_zero_leaves_params_unchanged() {
        let mut m = init_params(&base_config(), 31).unwrap();
        let before = m.to_flat();
        let mut g = m.zeros_like();
        g.visit_mut(|_, data| data.fill(0.7));
        let cfg = AdamWConfig {
            lr: 0.5,
            warmup_steps: Some(4),
            total_steps: 100,
            ..AdamWConfig::default()
        };
        let mut state = OptimizerState::new(m.num_params());
        optimizer_step(&mut m, &g, &cfg, &mut state).unwrap();
        assert_eq!(m.to_flat(), before);
        assert_eq!(state.step, 1);
        // Moments did accumulate; the next step moves.
        optimizer_step(&mut m, &g, &cfg, &mut state).unwrap();
        assert_ne!(m.to_flat(), before);
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut m = init_params(&base_config(), 32).unwrap();
        let before = m.to_flat();
        let g = m.zeros_like();
        let cfg = AdamWConfig {
            lr: 0.3,
            weight_decay: 0.0,
            warmup_steps: Some(0),
            total_steps: 50,
            ..AdamWConfig::default()
        };
        let mut state = OptimizerState::new(m.num_params());
        for _ in 0..5 {
            optimizer_step(&mut m, &g, &cfg, &mut state).unwrap();
        }
        assert_eq!(m.to_flat(), before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut m = init_params(&base_config(), 33).unwrap();
        let before = m.to_flat();
        let g = m.zeros_like();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            warmup_steps: Some(0),
            total_steps: 50,
            ..AdamWConfig::default()
        };
        let mut state = OptimizerState::new(m.num_params());
        optimizer_step(&mut m, &g, &cfg, &mut state).unwrap();
        for (b, a) in before.iter().zip(&m.to_flat()) {
            assert!((a - b * (1.0 - 0.01)).abs() < 1e-12);
        }
    }

    #[test]
    fn path_task_targets_and_determinism() {
        let t = make_path_localization_task(64, 4, 9).unwrap();
        assert_eq!(t.items.len(), 4);
        assert_eq!(t.output_dim(), 1);
        assert_eq!(t.feature_dim(), 1);
        for item in &t.items {
            let feats = item.graph.features().unwrap();
            let src = (0..64).find(|&i| feats.get(i, 0) == 1.0).unwrap();
            if let Target::Values(v) = &item.target {
                assert_eq!(v.get(src, 0), 0.0);
                for node in 0..64 {
                    let want = (node as f64 - src as f64).abs() / 63.0;
                    assert_eq!(v.get(node, 0), want);
                }
            } else {
                panic!("regression task");
            }
        }
        // Same seed, same bundle bytes.
        let dir = std::env::temp_dir().join(format!("task-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.json"), dir.join("b.json"));
        save_task(&p1, &t).unwrap();
        save_task(&p2, &make_path_localization_task(64, 4, 9).unwrap()).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let other = make_path_localization_task(64, 4, 10).unwrap();
        let p3 = dir.join("c.json");
        save_task(&p3, &other).unwrap();
        assert_ne!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
        std::fs::remove_dir_all(&dir).ok();

        assert!(make_path_localization_task(32, 4, 0).is_err());
        assert!(make_path_localization_task(64, 1, 0).is_err());
    }

    #[test]
    fn degree_buckets() {
        assert_eq!(degree_bucket(1), 0);
        assert_eq!(degree_bucket(2), 1);
        assert_eq!(degree_bucket(3), 2);
        assert_eq!(degree_bucket(9), 2);
        // Star: the center lands in the dense bucket, leaves in the leaf
        // bucket.
        let star = synth::star_graph(5);
        assert_eq!(degree_bucket(star.degree(0)), 2);
        for leaf in 1..5 {
            assert_eq!(degree_bucket(star.degree(leaf)), 0);
        }
    }

    #[test]
    fn degree_task_shape_and_determinism() {
        let t = make_local_degree_task(5, 3).unwrap();
        assert_eq!(t.kind, TaskKind::NodeClassification);
        assert_eq!(t.output_dim(), 3);
        t.validate().unwrap();
        for item in &t.items {
            if let Target::Labels(l) = &item.target {
                for (v, &lab) in l.iter().enumerate() {
                    assert_eq!(lab, degree_bucket(item.graph.degree(v)));
                }
            }
        }
        let t2 = make_local_degree_task(5, 3).unwrap();
        assert_eq!(t.train_idx, t2.train_idx);
        for (a, b) in t.items.iter().zip(&t2.items) {
            assert_eq!(a.graph.edges(), b.graph.edges());
        }
    }

    #[test]
    fn task_round_trip_and_split_validation() {
        let t = make_local_degree_task(4, 7).unwrap();
        let dir = std::env::temp_dir().join(format!("task-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("task.json");
        save_task(&p, &t).unwrap();
        let back = load_task(&p).unwrap();
        assert_eq!(back.name, t.name);
        assert_eq!(back.kind, t.kind);
        assert_eq!(back.train_idx, t.train_idx);
        assert_eq!(back.val_idx, t.val_idx);
        for (a, b) in t.items.iter().zip(&back.items) {
            assert_eq!(a.graph.edges(), b.graph.edges());
            assert_eq!(a.target, b.target);
            let (fa, fb) = (a.graph.features().unwrap(), b.graph.features().unwrap());
            for (x, y) in fa.data().iter().zip(fb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).ok();

        let mut bad = t.clone();
        bad.val_idx = bad.train_idx.clone();
        assert!(bad.validate().is_err());
        let mut oob = t.clone();
        oob.val_idx = vec![99];
        assert!(oob.validate().is_err());
    }

    #[test]
    fn train_zero_epochs_is_noop() {
        let task = make_local_degree_task(3, 11).unwrap();
        let config = ModelConfig {
            d_out: 3,
            depth: 1,
            ..base_config()
        };
        let m = init_params(&config, 12).unwrap();
        let before = m.to_flat();
        let cfg = TrainConfig {
            epochs: 0,
            k: 4,
            pe_count: 2,
            ..TrainConfig::default()
        };
        let out = train(m, &task, &cfg).unwrap();
        assert_eq!(out.params.to_flat(), before);
        assert!(out.trace.is_empty());
        assert!(!out.stopped_early);
    }

    #[test]
    fn train_converges_to_least_squares_optimum() {
        // Depth-0 model on one graph is an affine map; the product
        // parameterization has only global minima, so AdamW with a decaying
        // schedule should land within 1e-6 of the closed-form optimum.
        let n = 20;
        let mut graph = synth::path_graph(n);
        let x = random_mat(n, 2, 40);
        graph.set_features(Some(x.clone())).unwrap();
        let y = {
            let w = Mat::from_vec(2, 1, vec![0.8, -0.4]);
            let mut t = x.matmul(&w);
            let noise = random_mat(n, 1, 41);
            t.add_scaled(&noise, 0.05);
            t
        };
        let task = ToyTask {
            name: "ls".into(),
            kind: TaskKind::NodeRegression,
            items: vec![TaskItem {
                graph,
                target: Target::Values(y.clone()),
            }],
            train_idx: vec![0],
            val_idx: vec![],
        };
        // Closed form with intercept: augment X with a ones column.
        let xa = x.hcat(&Mat::from_fn(n, 1, |_, _| 1.0));
        let gram = xa.matmul_tn(&xa);
        let rhs = xa.matmul_tn(&y);
        let w_star = solve_spd(&gram, &rhs).unwrap();
        let resid = xa.matmul(&w_star).sub(&y);
        let ls_loss = resid.data().iter().map(|v| v * v).sum::<f64>() / n as f64;

        let config = ModelConfig {
            d_in: 2,
            pe_count: 0,
            d: 3,
            d_out: 1,
            depth: 0,
            ..base_config()
        };
        let m = init_params(&config, 42).unwrap();
        let cfg = TrainConfig {
            epochs: 4000,
            optimizer: AdamWConfig {
                lr: 0.02,
                ..AdamWConfig::default()
            },
            patience: usize::MAX,
            k: 2,
            pe_count: 0,
            ..TrainConfig::default()
        };
        let out = train(m, &task, &cfg).unwrap();
        let final_loss = out.trace.last().unwrap().train_loss;
        assert!(
            final_loss - ls_loss <= 1e-6,
            "trained {final_loss} vs least squares {ls_loss}"
        );
    }

    #[test]
    fn train_is_deterministic() {
        let task = make_local_degree_task(4, 50).unwrap();
        let config = ModelConfig {
            d_out: 3,
            depth: 1,
            ..base_config()
        };
        let cfg = TrainConfig {
            epochs: 4,
            k: 4,
            pe_count: 2,
            ..TrainConfig::default()
        };
        let a = train(init_params(&config, 51).unwrap(), &task, &cfg).unwrap();
        let b = train(init_params(&config, 51).unwrap(), &task, &cfg).unwrap();
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
        let (fa, fb) = (a.params.to_flat(), b.params.to_flat());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn masked_tensors_stay_zero_through_training() {
        let task = make_local_degree_task(3, 60).unwrap();
        let config = ModelConfig {
            d_out: 3,
            depth: 1,
            ..base_config()
        };
        let m = init_params(&config, 61).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            k: 4,
            pe_count: 2,
            mask: ablation_mask("no-spectral").unwrap(),
            ..TrainConfig::default()
        };
        let out = train(m, &task, &cfg).unwrap();
        let mut saw = false;
        out.params.visit(|path, _, data| {
            if path.contains("spec_w") {
                saw = true;
                assert!(data.iter().all(|&v| v == 0.0), "{path} moved");
            }
        });
        assert!(saw);
        assert!(ablation_mask("nonsense").is_err());
    }

    #[test]
    fn admissibility_survives_optimizer_trajectory() {
        let task = make_local_degree_task(3, 70).unwrap();
        let config = ModelConfig {
            d_out: 3,
            depth: 1,
            ..base_config()
        };
        let m = init_params(&config, 71).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            optimizer: AdamWConfig {
                lr: 0.05,
                ..AdamWConfig::default()
            },
            k: 4,
            pe_count: 2,
            ..TrainConfig::default()
        };
        let out = train(m, &task, &cfg).unwrap();
        for lp in &out.params.layers {
            let psis: Vec<&HybridFilter> = match &lp.bank {
                FilterBank::Independent(ps) => ps.iter().collect(),
                FilterBank::Shared { psi, .. } => vec![psi],
            };
            for psi in psis {
                let r = response_with_correction(psi, 1.0, 0.0, Correction::ZeroFreq).unwrap();
                for v in r {
                    assert!(v.abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn nan_loss_aborts_with_step_context() {
        let mut task = make_path_localization_task(64, 2, 80).unwrap();
        if let Target::Values(v) = &mut task.items[task.train_idx[0]].target {
            v.set(0, 0, f64::NAN);
        }
        let config = ModelConfig {
            depth: 1,
            ..base_config()
        };
        let m = init_params(&config, 81).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            k: 4,
            pe_count: 2,
            ..TrainConfig::default()
        };
        // Bypassing validate(): train revalidates, so corrupt the target
        // after construction and call the training internals directly.
        let err = train(m, &task, &cfg).unwrap_err();
        match err {
            Error::NonFinite { context } => assert!(
                context.contains("task target") || context.contains("epoch"),
                "context: {context}"
            ),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn train_rejects_empty_training_split() {
        let mut task = make_local_degree_task(3, 90).unwrap();
        task.train_idx.clear();
        let config = ModelConfig {
            d_out: 3,
            depth: 1,
            ..base_config()
        };
        let m = init_params(&config, 91).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            k: 4,
            pe_count: 2,
            ..TrainConfig::default()
        };
        assert!(train(m, &task, &cfg).is_err());
    }

    #[test]
    fn early_stopping_restores_best_params() {
        // Tiny budget, aggressive lr: the loss is unlikely to improve
        // monotonically, so the returned params must match the best row.
        let task = make_local_degree_task(4, 95).unwrap();
        let config = ModelConfig {
            d_out: 3,
            depth: 1,
            ..base_config()
        };
        let m = init_params(&config, 96).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            optimizer: AdamWConfig {
                lr: 0.3,
                ..AdamWConfig::default()
            },
            patience: 3,
            k: 4,
            pe_count: 2,
            ..TrainConfig::default()
        };
        let out = train(m, &task, &cfg).unwrap();
        let best_row = out
            .trace
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, best_row);
        // Re-evaluate returned params: they produce the recorded best loss.
        let prepared = prepare_task(&task, cfg.k, cfg.seed).unwrap();
        let (val_loss, _) =
            evaluate(&out.params, &task, &prepared, &task.val_idx, cfg.pe_count).unwrap();
        assert!((val_loss - out.best_val_loss).abs() < 1e-12);
    }
}
