//! Eigendecomposition of the normalized Laplacian.
//!
//! Two routes: a dense cyclic-Jacobi diagonalization used as a small-n
//! oracle, and a Lanczos iteration with full reorthogonalization that
//! retains only the k lowest eigenpairs for production use. Both produce
//! sign-canonical, ascending-sorted bases so outputs are reproducible.

use crate::codec::{f64_to_hex, hex_to_f64, hex_to_vec, vec_to_hex};
use crate::dense::{self, Mat};
use crate::error::{Error, Result};
use crate::graph::NormalizedLaplacian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_ORACLE_BOUND: usize = 512;
pub const DEFAULT_MAX_SWEEPS: usize = 100;
pub const DEFAULT_LANCZOS_TOL: f64 = 1e-8;

/// Eigenvalues within this distance form a degenerate cluster; their
/// eigenvector basis is only determined up to rotation, so comparisons go
/// through subspace projectors.
pub const DEGENERACY_GAP: f64 = 1e-8;

/// Full spectrum of a small Laplacian. Column i of `u` pairs with
/// `lambdas[i]`; lambdas ascend.
#[derive(Debug, Clone)]
pub struct DenseEvd {
    pub lambdas: Vec<f64>,
    pub u: Mat,
}

/// Lowest-k eigenpairs. `residual_norms[i]` holds the audited
/// ‖L·uᵢ − λᵢ·uᵢ‖₂ for each retained pair.
#[derive(Debug, Clone)]
pub struct PartialEvd {
    pub k: usize,
    pub lambdas: Vec<f64>,
    pub u: Mat,
    pub residual_norms: Vec<f64>,
}

/// Cyclic Jacobi diagonalization of a symmetric matrix. Returns unsorted
/// (eigenvalues, eigenvector columns); callers sort and canonicalize.
fn jacobi_eigh(a: &Mat, off_tol: f64, max_sweeps: usize) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "jacobi_eigh needs a square matrix");
    let mut m = a.data().to_vec();
    let mut v = Mat::eye(n);
    if n <= 1 {
        return Ok((m, v));
    }

    let off_norm = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut off = off_norm(&m);
    let mut sweeps = 0;
    while off > off_tol {
        if sweeps >= max_sweeps {
            return Err(Error::NonConvergence {
                algorithm: "cyclic Jacobi".into(),
                iterations: sweeps,
                worst_residual: off,
            });
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let root = (theta * theta + 1.0).sqrt();
                let t = if theta >= 0.0 {
                    1.0 / (theta + root)
                } else {
                    -1.0 / (-theta + root)
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;
                m[p * n + p] -= h;
                m[q * n + q] += h;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for i in 0..n {
                    if i == p || i == q {
                        continue;
                    }
                    let g = m[i * n + p];
                    let hh = m[i * n + q];
                    let gp = g - s * (hh + g * tau);
                    let hq = hh + s * (g - hh * tau);
                    m[i * n + p] = gp;
                    m[p * n + i] = gp;
                    m[i * n + q] = hq;
                    m[q * n + i] = hq;
                }
                let vd = v.data_mut();
                for i in 0..n {
                    let g = vd[i * n + p];
                    let hh = vd[i * n + q];
                    vd[i * n + p] = g - s * (hh + g * tau);
                    vd[i * n + q] = hh + s * (g - hh * tau);
                }
            }
        }
        sweeps += 1;
        off = off_norm(&m);
    }

    let lambdas: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    Ok((lambdas, v))
}

/// Flip each column so its largest-magnitude entry is positive, ties broken
/// by lowest index. Fixes the sign freedom of eigenvectors.
pub fn sign_canonicalize(u: &mut Mat) {
    let (n, k) = (u.rows(), u.cols());
    for j in 0..k {
        let mut best = 0.0_f64;
        let mut best_val = 0.0_f64;
        for i in 0..n {
            let x = u.get(i, j);
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..n {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
        }
    }
}

/// Group indexes of near-equal eigenvalues (gap below `DEGENERACY_GAP`,
/// chained). Returned ranges cover 0..lambdas.len() in order.
pub fn degenerate_clusters(lambdas: &[f64]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=lambdas.len() {
        if i == lambdas.len() || lambdas[i] - lambdas[i - 1] >= DEGENERACY_GAP {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// Re-orthonormalize columns within each degenerate cluster (modified
/// Gram-Schmidt in index order), then re-canonicalize signs. Makes the
/// within-cluster basis deterministic given the incoming column order.
fn orthonormalize_clusters(lambdas: &[f64], u: &mut Mat) {
    let n = u.rows();
    for cluster in degenerate_clusters(lambdas) {
        if cluster.len() < 2 {
            continue;
        }
        for j in cluster.clone() {
            let mut col = u.col(j);
            for prev in cluster.start..j {
                let pcol = u.col(prev);
                let proj = dense::dot(&col, &pcol);
                dense::axpy(-proj, &pcol, &mut col);
            }
            let norm = dense::norm2(&col);
            if norm > 0.0 {
                for x in &mut col {
                    *x /= norm;
                }
            }
            for i in 0..n {
                u.set(i, j, col[i]);
            }
        }
    }
    sign_canonicalize(u);
}

fn sort_pairs(lambdas: Vec<f64>, u: Mat) -> (Vec<f64>, Mat) {
    let n = u.rows();
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| lambdas[a].partial_cmp(&lambdas[b]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| lambdas[i]).collect();
    let mut su = Mat::zeros(n, order.len());
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            su.set(i, dst, u.get(i, src));
        }
    }
    (sorted, su)
}

/// Full eigendecomposition with default oracle bounds.
pub fn dense_evd(lap: &NormalizedLaplacian) -> Result<DenseEvd> {
    dense_evd_with(lap, DEFAULT_ORACLE_BOUND, DEFAULT_MAX_SWEEPS)
}

/// Full eigendecomposition by cyclic Jacobi, refusing matrices above
/// `size_bound`. Off-diagonal norm is driven to 1e-12.
pub fn dense_evd_with(
    lap: &NormalizedLaplacian,
    size_bound: usize,
    max_sweeps: usize,
) -> Result<DenseEvd> {
    let n = lap.dim();
    if n > size_bound {
        return Err(Error::SizeBound {
            n,
            bound: size_bound,
        });
    }
    let (lambdas, u) = jacobi_eigh(&lap.to_dense(), 1e-12, max_sweeps)?;
    let (lambdas, mut u) = sort_pairs(lambdas, u);
    sign_canonicalize(&mut u);
    orthonormalize_clusters(&lambdas, &mut u);
    Ok(DenseEvd { lambdas, u })
}

fn explicit_residual(lap: &NormalizedLaplacian, col: &[f64], lambda: f64) -> f64 {
    let n = lap.dim();
    let mut lu = vec![0.0; n];
    lap.matrix().matvec(col, &mut lu);
    dense::axpy(-lambda, col, &mut lu);
    dense::norm2(&lu)
}

/// Lowest-k eigenpairs by Lanczos with full reorthogonalization and locking.
///
/// The exact kernel pair (0, D^{1/2}·1 normalized) is deflated out and
/// prepended analytically; the iteration runs in its orthogonal complement
/// with start vectors drawn from a ChaCha stream, so results are
/// bit-identical for a fixed seed. Residuals are audited explicitly against
/// the sparse operator, never inferred from Lanczos recurrence quantities.
///
/// One Krylov space carries at most one copy of each eigenvalue, so converged
/// Ritz pairs are locked and the next block restarts in their orthogonal
/// complement; repeated eigenvalues surface one copy per block. The result is
/// accepted only after a fresh complement block fails to produce a value
/// below the worst kept one, which is what certifies the set as the k lowest
/// rather than merely k converged pairs.
pub fn partial_evd(
    lap: &NormalizedLaplacian,
    k: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<PartialEvd> {
    let n = lap.dim();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "partial_evd: k = {k} outside [1, {n}]"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "partial_evd: tolerance must be positive, got {tol}"
        )));
    }

    let kernel = lap.kernel_direction();
    let need = k - 1;

    let assemble = |extra_lambdas: Vec<f64>, extra_cols: Vec<Vec<f64>>| -> Result<PartialEvd> {
        let mut lambdas = vec![0.0];
        let mut cols = vec![kernel.clone()];
        lambdas.extend(extra_lambdas);
        cols.extend(extra_cols);
        let mut u = Mat::zeros(n, lambdas.len());
        for (j, col) in cols.iter().enumerate() {
            for i in 0..n {
                u.set(i, j, col[i]);
            }
        }
        let (lambdas, mut u) = sort_pairs(lambdas, u);
        sign_canonicalize(&mut u);
        orthonormalize_clusters(&lambdas, &mut u);
        let residual_norms: Vec<f64> = (0..k)
            .map(|j| explicit_residual(lap, &u.col(j), lambdas[j]))
            .collect();
        let worst = residual_norms.iter().cloned().fold(0.0, f64::max);
        if worst > tol {
            return Err(Error::NonConvergence {
                algorithm: "Lanczos".into(),
                iterations: max_iter,
                worst_residual: worst,
            });
        }
        Ok(PartialEvd {
            k,
            lambdas,
            u,
            residual_norms,
        })
    };

    if need == 0 {
        return assemble(vec![], vec![]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let complement_dim = n - 1;
    if max_iter.min(complement_dim) < need {
        return Err(Error::InvalidArgument(format!(
            "partial_evd: max_iter = {max_iter} cannot reach {need} pairs"
        )));
    }

    // Two-pass modified Gram-Schmidt against kernel + locked pairs + block.
    let orthogonalize =
        |w: &mut Vec<f64>, locked: &[Vec<f64>], block: &[Vec<f64>], kernel: &[f64]| {
            for _ in 0..2 {
                let proj = dense::dot(w, kernel);
                dense::axpy(-proj, kernel, w);
                for b in locked.iter().chain(block.iter()) {
                    let proj = dense::dot(w, b);
                    dense::axpy(-proj, b, w);
                }
            }
        };

    let fresh_vector = |rng: &mut ChaCha8Rng,
                        locked: &[Vec<f64>],
                        block: &[Vec<f64>],
                        kernel: &[f64]|
     -> Option<Vec<f64>> {
        for _ in 0..16 {
            let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            orthogonalize(&mut w, locked, block, kernel);
            let norm = dense::norm2(&w);
            if norm > 1e-8 {
                for x in &mut w {
                    *x /= norm;
                }
                return Some(w);
            }
        }
        None
    };

    // Ritz extraction: diagonalize the projected tridiagonal matrix, lift the
    // lowest Ritz vectors back to node space, and measure each explicit
    // residual against the sparse operator.
    let ritz = |basis: &[Vec<f64>],
                alphas: &[f64],
                betas: &[f64]|
     -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
        let m = alphas.len();
        let t = Mat::from_fn(m, m, |i, j| {
            if i == j {
                alphas[i]
            } else if j == i + 1 {
                betas[i]
            } else if i == j + 1 {
                betas[j]
            } else {
                0.0
            }
        });
        let (theta, s) = jacobi_eigh(&t, 1e-13, DEFAULT_MAX_SWEEPS)?;
        let (theta, s) = sort_pairs(theta, s);
        let take = need.min(m);
        let mut vals = Vec::with_capacity(take);
        let mut vecs = Vec::with_capacity(take);
        let mut residuals = Vec::with_capacity(take);
        for j in 0..take {
            let mut y = vec![0.0; n];
            for (i, b) in basis.iter().enumerate().take(m) {
                dense::axpy(s.get(i, j), b, &mut y);
            }
            let norm = dense::norm2(&y);
            if norm > 0.0 {
                for x in &mut y {
                    *x /= norm;
                }
            }
            residuals.push(explicit_residual(lap, &y, theta[j]));
            vals.push(theta[j]);
            vecs.push(y);
        }
        Ok((vals, vecs, residuals))
    };

    let mut locked_vals: Vec<f64> = Vec::new();
    let mut locked_vecs: Vec<Vec<f64>> = Vec::new();
    let mut total_steps = 0usize;
    let mut last_worst = f64::INFINITY;

    loop {
        let remaining = complement_dim - locked_vecs.len();
        let cutoff = if locked_vals.len() >= need {
            let mut sorted = locked_vals.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[need - 1]
        } else {
            f64::INFINITY
        };
        if remaining == 0 && locked_vals.len() >= need {
            // Complement exhausted: nothing left that could undercut the set.
            break;
        }
        if remaining == 0 || total_steps >= max_iter {
            return Err(Error::NonConvergence {
                algorithm: "Lanczos".into(),
                iterations: total_steps,
                worst_residual: last_worst,
            });
        }

        let want = need.saturating_sub(locked_vecs.len()).max(1);
        let Some(v0) = fresh_vector(&mut rng, &locked_vecs, &[], &kernel) else {
            if locked_vals.len() >= need {
                break;
            }
            return Err(Error::NonConvergence {
                algorithm: "Lanczos".into(),
                iterations: total_steps,
                worst_residual: last_worst,
            });
        };

        let mut basis = vec![v0];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let block_cap = remaining.min(max_iter - total_steps);
        let checkpoint_every = 8.max(want);
        let mut step = 0usize;

        let (vals, vecs, residuals) = loop {
            let vj = basis.last().unwrap().clone();
            let mut w = vec![0.0; n];
            lap.matrix().matvec(&vj, &mut w);
            let alpha = dense::dot(&vj, &w);
            alphas.push(alpha);
            orthogonalize(&mut w, &locked_vecs, &basis, &kernel);
            step += 1;
            total_steps += 1;

            let exhausted = basis.len() >= block_cap;
            let mut invariant = false;
            if !exhausted {
                let beta = dense::norm2(&w);
                if beta > 1e-12 {
                    for x in &mut w {
                        *x /= beta;
                    }
                    betas.push(beta);
                    basis.push(w);
                } else {
                    // The block span is L-invariant, so its Ritz pairs are
                    // exact up to reorthogonalization noise.
                    invariant = true;
                }
            }

            if exhausted || invariant || (alphas.len() >= want && step % checkpoint_every == 0) {
                let out = ritz(&basis, &alphas, &betas)?;
                last_worst = out.2.iter().copied().fold(0.0, f64::max);
                let p = out.2.iter().take_while(|r| **r <= tol).count();
                if p >= want || exhausted || invariant {
                    break out;
                }
            }
        };

        let p = residuals.iter().take_while(|r| **r <= tol).count();
        if p == 0 {
            return Err(Error::NonConvergence {
                algorithm: "Lanczos".into(),
                iterations: total_steps,
                worst_residual: last_worst,
            });
        }
        if locked_vals.len() < need {
            locked_vals.extend_from_slice(&vals[..p]);
            locked_vecs.extend(vecs.into_iter().take(p));
        } else {
            // Certification block: adopt only pairs that genuinely undercut
            // the kept set. A value within tol of the cutoff is a tie and
            // either copy is a valid member of the lowest-k set.
            let mut undercut = false;
            for (j, &v) in vals.iter().enumerate().take(p) {
                if v < cutoff - tol {
                    locked_vals.push(v);
                    locked_vecs.push(vecs[j].clone());
                    undercut = true;
                }
            }
            if !undercut {
                break;
            }
        }
    }

    let mut order: Vec<usize> = (0..locked_vals.len()).collect();
    order.sort_by(|&a, &b| locked_vals[a].total_cmp(&locked_vals[b]));
    let vals: Vec<f64> = order.iter().take(need).map(|&i| locked_vals[i]).collect();
    let vecs: Vec<Vec<f64>> = order
        .iter()
        .take(need)
        .map(|&i| locked_vecs[i].clone())
        .collect();
    assemble(vals, vecs)
}

impl PartialEvd {
    /// Truncate a dense oracle decomposition to its k lowest pairs. Used by
    /// tests that need tighter accuracy than the Lanczos tolerance.
    pub fn from_dense(evd: &DenseEvd, lap: &NormalizedLaplacian, k: usize) -> Result<PartialEvd> {
        let n = evd.u.rows();
        if k == 0 || k > n {
            return Err(Error::InvalidArgument(format!(
                "from_dense: k = {k} outside [1, {n}]"
            )));
        }
        let u = evd.u.col_slice(0, k);
        let lambdas = evd.lambdas[..k].to_vec();
        let residual_norms: Vec<f64> = (0..k)
            .map(|j| explicit_residual(lap, &u.col(j), lambdas[j]))
            .collect();
        Ok(PartialEvd {
            k,
            lambdas,
            u,
            residual_norms,
        })
    }
}

/// First p non-trivial eigenvector columns (skipping the kernel vector),
/// zero-padded when the decomposition is too narrow. The boolean reports
/// whether padding happened; strict mode rejects p > k outright.
pub fn positional_encodings(evd: &PartialEvd, p: usize, strict: bool) -> Result<(Mat, bool)> {
    if strict && p > evd.k {
        return Err(Error::InvalidArgument(format!(
            "positional encodings need p <= k, got p = {p}, k = {}",
            evd.k
        )));
    }
    let n = evd.u.rows();
    let available = evd.k.saturating_sub(1);
    let used = p.min(available);
    let mut pe = Mat::zeros(n, p);
    for j in 0..used {
        for i in 0..n {
            pe.set(i, j, evd.u.get(i, j + 1));
        }
    }
    Ok((pe, p > available))
}

/// On-disk eigendecomposition cache. Floats travel as hex bit patterns so a
/// reload is bit-identical; `graph_hash` guards against stale caches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvdCacheFile {
    pub n: usize,
    pub k: usize,
    pub tol: String,
    pub seed: u64,
    pub graph_hash: String,
    pub lambdas: Vec<String>,
    pub u_row_major: Vec<String>,
    pub residual_norms: Vec<String>,
}

pub struct CachedEvd {
    pub evd: PartialEvd,
    pub tol: f64,
    pub seed: u64,
    pub graph_hash: String,
}

pub fn save_evd_cache(
    path: &Path,
    evd: &PartialEvd,
    tol: f64,
    seed: u64,
    graph_hash: &str,
) -> Result<()> {
    let file = EvdCacheFile {
        n: evd.u.rows(),
        k: evd.k,
        tol: f64_to_hex(tol),
        seed,
        graph_hash: graph_hash.to_string(),
        lambdas: vec_to_hex(&evd.lambdas),
        u_row_major: vec_to_hex(evd.u.data()),
        residual_norms: vec_to_hex(&evd.residual_norms),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_evd_cache(path: &Path) -> Result<CachedEvd> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let file: EvdCacheFile =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;
    let lambdas = hex_to_vec(&file.lambdas)?;
    let u_data = hex_to_vec(&file.u_row_major)?;
    let residual_norms = hex_to_vec(&file.residual_norms)?;
    if lambdas.len() != file.k
        || residual_norms.len() != file.k
        || u_data.len() != file.n * file.k
    {
        return Err(Error::Serialization(
            "cache dimensions are internally inconsistent".into(),
        ));
    }
    Ok(CachedEvd {
        evd: PartialEvd {
            k: file.k,
            lambdas,
            u: Mat::from_vec(file.n, file.k, u_data),
            residual_norms,
        },
        tol: hex_to_f64(&file.tol)?,
        seed: file.seed,
        graph_hash: file.graph_hash,
    })
}

impl CachedEvd {
    /// A cache entry serves a request when it describes the same graph and
    /// was computed at least as accurately and widely as asked.
    pub fn serves(&self, graph_hash: &str, k: usize, tol: f64, seed: u64) -> bool {
        self.graph_hash == graph_hash && self.evd.k >= k && self.tol <= tol && self.seed == seed
    }
}
