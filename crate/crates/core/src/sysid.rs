//! Closed-loop identification from input/output data.
//!
//! The predictor form gives the truncated ARX model
//! `y_t = Gy phi_t + e_t + C Abar^He xhat_{t-He}` with innovations `e_t`
//! independent of `phi_t` no matter how the inputs were chosen, so a ridge
//! regression of `y_t` on `phi_t` stays consistent under feedback. The
//! Markov parameters are then recovered from the estimated `Gy` through a
//! Ho-Kalman realization of its two Hankel matrices.
//!
//! [`naive_markov_ls`] regresses `y_t` directly on past inputs. It is only
//! consistent for open-loop (noise-independent) inputs and serves as the
//! biased baseline in closed-loop experiments.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::linalg::{self, spectral_norm, spectral_radius};
use crate::simulator::RunHistory;
use crate::system_model::{impulse_blocks, GyMatrix, MarkovOperator};
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const HE_CAP: usize = 40;
/// Hankel truncation guard: `sigma_n` must exceed this times `sigma_1`.
pub const RANK_TOL: f64 = 1e-10;

/// `phi_t = [y_{t-1}; ...; y_{t-He}; u_{t-1}; ...; u_{t-He}]`, zero-padded
/// before the first step.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    pub phi: Vec<f64>,
    pub t: usize,
    pub he: usize,
}

pub fn build_regressor(history: &RunHistory, t: usize, he: usize) -> Regressor {
    let mut phi = vec![0.0; (history.m() + history.p()) * he];
    fill_regressor(history, t, he, &mut phi);
    Regressor { phi, t, he }
}

fn fill_regressor(history: &RunHistory, t: usize, he: usize, out: &mut [f64]) {
    let (m, p) = (history.m(), history.p());
    let t = t as i64;
    for k in 0..he {
        let s = t - 1 - k as i64;
        out[k * m..(k + 1) * m].copy_from_slice(history.y(s));
        out[m * he + k * p..m * he + (k + 1) * p].copy_from_slice(history.u(s));
    }
}

/// Running sums `X'X` and `X'Y` of a linear regression.
#[derive(Clone, Debug)]
pub struct LeastSquaresAccumulator {
    dim: usize,
    out: usize,
    gram: Vec<f64>,
    cross: Vec<f64>,
    rows: usize,
}

impl LeastSquaresAccumulator {
    pub fn new(dim: usize, out: usize) -> Self {
        Self {
            dim,
            out,
            gram: vec![0.0; dim * dim],
            cross: vec![0.0; dim * out],
            rows: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add_row(&mut self, x: &[f64], y: &[f64]) {
        let d = self.dim;
        for i in 0..d {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            // upper triangle only; mirrored when solving
            let row = &mut self.gram[i * d..(i + 1) * d];
            for j in i..d {
                row[j] += xi * x[j];
            }
            let crow = &mut self.cross[i * self.out..(i + 1) * self.out];
            for (c, yk) in crow.iter_mut().zip(y) {
                *c += xi * yk;
            }
        }
        self.rows += 1;
    }

    pub fn gram(&self) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d, d, |i, j| {
            if i <= j {
                self.gram[i * d + j]
            } else {
                self.gram[j * d + i]
            }
        })
    }

    pub fn cross(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.out, &self.cross)
    }

    /// Solves `(X'X + lambda I) W = X'Y`. Returns `W` and the smallest
    /// eigenvalue of the regularized Gram matrix.
    pub fn solve(&self, lambda: f64) -> Result<(DMatrix<f64>, f64)> {
        let v = self.gram() + linalg::identity(self.dim) * lambda;
        let (min_eig, max_eig) = linalg::eigen_range_sym(&v);
        if !(min_eig > 1e-13 * max_eig.abs().max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularDesign { min_eig, max_eig });
        }
        let chol = v
            .cholesky()
            .ok_or(Error::SingularDesign { min_eig, max_eig })?;
        Ok((chol.solve(&self.cross()), min_eig))
    }
}

/// Incremental Gram sums for the ARX regression over rows `t = He, He+1, ...`.
#[derive(Clone, Debug)]
pub struct ArxAccumulator {
    he: usize,
    next_t: usize,
    ls: LeastSquaresAccumulator,
    scratch: Vec<f64>,
}

impl ArxAccumulator {
    pub fn new(he: usize, m: usize, p: usize) -> Self {
        let dim = (m + p) * he;
        Self {
            he,
            next_t: he.max(1),
            ls: LeastSquaresAccumulator::new(dim, m),
            scratch: vec![0.0; dim],
        }
    }

    pub fn he(&self) -> usize {
        self.he
    }

    /// Adds every row up to and including step `t_end`.
    pub fn extend_to(&mut self, history: &RunHistory, t_end: usize) {
        let t_end = t_end.min(history.len());
        while self.next_t <= t_end {
            let t = self.next_t;
            fill_regressor(history, t, self.he, &mut self.scratch);
            self.ls.add_row(&self.scratch, history.y(t as i64));
            self.next_t += 1;
        }
    }

    /// Last step included so far.
    pub fn covered_through(&self) -> usize {
        self.next_t - 1
    }

    pub fn sample_count(&self) -> usize {
        self.ls.rows()
    }

    pub fn solve(&self, lambda: f64, m: usize, p: usize) -> Result<GyEstimate> {
        let (w, min_eig) = self.ls.solve(lambda)?;
        Ok(GyEstimate {
            gy: GyMatrix::new(self.he, m, p, w.transpose())?,
            lambda,
            design_min_sv: min_eig,
            sample_count: self.ls.rows(),
        })
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.ls.gram()
    }

    pub fn cross(&self) -> DMatrix<f64> {
        self.ls.cross()
    }
}

#[derive(Clone, Debug)]
pub struct GyEstimate {
    pub gy: GyMatrix,
    pub lambda: f64,
    /// Smallest singular value of `Phi'Phi + lambda I`.
    pub design_min_sv: f64,
    pub sample_count: usize,
}

/// Ridge estimate of `Gy` over rows `t = He .. len`.
pub fn regularized_ls(history: &RunHistory, he: usize, lambda: f64) -> Result<GyEstimate> {
    if he == 0 {
        return Err(Error::arg("He", "must be at least 1"));
    }
    if history.len() <= he {
        return Err(Error::arg(
            "history",
            format!("length {} must exceed He = {he}", history.len()),
        ));
    }
    if !(lambda > 0.0) {
        return Err(Error::arg("lambda", "must be positive"));
    }
    let mut acc = ArxAccumulator::new(he, history.m(), history.p());
    acc.extend_to(history, history.len());
    acc.solve(lambda, history.m(), history.p())
}

/// Incremental sums for the open-loop regression of `y_t` on
/// `[u_t; u_{t-1}; ...; u_{t-H}]`, rows `t = H+1, H+2, ...`.
#[derive(Clone, Debug)]
pub struct NaiveAccumulator {
    h: usize,
    next_t: usize,
    ls: LeastSquaresAccumulator,
    scratch: Vec<f64>,
}

impl NaiveAccumulator {
    pub fn new(h: usize, m: usize, p: usize) -> Self {
        let dim = p * (h + 1);
        Self {
            h,
            next_t: h + 1,
            ls: LeastSquaresAccumulator::new(dim, m),
            scratch: vec![0.0; dim],
        }
    }

    pub fn extend_to(&mut self, history: &RunHistory, t_end: usize) {
        let p = history.p();
        let t_end = t_end.min(history.len());
        while self.next_t <= t_end {
            let t = self.next_t as i64;
            for k in 0..=self.h {
                self.scratch[k * p..(k + 1) * p].copy_from_slice(history.u(t - k as i64));
            }
            self.ls.add_row(&self.scratch, history.y(t));
            self.next_t += 1;
        }
    }

    /// Unregularized solve; `H+1` blocks `G^[0..H]`.
    pub fn solve(&self, m: usize, p: usize) -> Result<MarkovOperator> {
        let (w, _) = self.ls.solve(0.0)?;
        let blocks = (0..=self.h)
            .map(|k| w.rows(k * p, p).transpose().into_owned())
            .collect::<Vec<_>>();
        debug_assert!(blocks.iter().all(|b| b.shape() == (m, p)));
        Ok(MarkovOperator::from_blocks(blocks))
    }
}

/// Least squares for `[G^[0], ..., G^[H]]` from `y_t ~ sum_k G^[k] u_{t-k}`.
pub fn naive_markov_ls(history: &RunHistory, h: usize) -> Result<MarkovOperator> {
    if history.len() <= h {
        return Err(Error::arg(
            "history",
            format!("length {} must exceed H = {h}", history.len()),
        ));
    }
    let mut acc = NaiveAccumulator::new(h, history.m(), history.p());
    acc.extend_to(history, history.len());
    acc.solve(history.m(), history.p())
}

/// Realization `(A, B, C, F)` up to a similarity transform.
#[derive(Clone, Debug)]
pub struct RealizedSystem {
    pub a: DMatrix<f64>,
    pub abar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub n: usize,
    /// Singular values of the truncated Hankel matrix, decreasing.
    pub hankel_sv: Vec<f64>,
}

/// Default Hankel split `d1 = ceil((He-1)/2)`, `d2 = He - 1 - d1`.
pub fn default_split(he: usize) -> (usize, usize) {
    let d1 = he.saturating_sub(1).div_ceil(2);
    (d1, he.saturating_sub(1) - d1)
}

/// Hankel matrix with block `(r, c)` equal to `blocks[r + c]`.
fn block_hankel(blocks: &[DMatrix<f64>], rows: usize, cols: usize) -> DMatrix<f64> {
    let (bm, bp) = blocks[0].shape();
    let mut h = DMatrix::zeros(bm * rows, bp * cols);
    for r in 0..rows {
        for c in 0..cols {
            h.view_mut((r * bm, c * bp), (bm, bp)).copy_from(&blocks[r + c]);
        }
    }
    h
}

/// Horizontal concatenation `[left, right]`.
fn hcat(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.columns_mut(0, left.ncols()).copy_from(left);
    out.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    out
}

/// Ho-Kalman realization from the `F` and `B` channels of an estimated `Gy`.
pub fn ho_kalman_sysid(gy: &GyMatrix, n: usize, d1: usize, d2: usize) -> Result<RealizedSystem> {
    let (he, m, p) = (gy.he, gy.m, gy.p);
    if d1 + d2 + 1 != he {
        return Err(Error::arg("d1, d2", format!("d1 + d2 + 1 = {} but He = {he}", d1 + d2 + 1)));
    }
    if n == 0 || d1 < n || d2 < n {
        return Err(Error::arg("n", format!("need 1 <= n <= min(d1, d2); n={n}, d1={d1}, d2={d2}")));
    }
    let f_blocks: Vec<_> = (0..he).map(|k| gy.f_block(k)).collect();
    let g_blocks: Vec<_> = (0..he).map(|k| gy.g_block(k)).collect();

    // Both Hankels are d1 x (d2+1) blocks; the minus variant drops the last
    // block column of each, the plus variant the first.
    let hf = block_hankel(&f_blocks, d1, d2 + 1);
    let hg = block_hankel(&g_blocks, d1, d2 + 1);
    let h_minus = hcat(&hf.columns(0, m * d2).into_owned(), &hg.columns(0, p * d2).into_owned());
    let h_plus = hcat(&hf.columns(m, m * d2).into_owned(), &hg.columns(p, p * d2).into_owned());

    let svd = h_minus.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let hankel_sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    if hankel_sv.len() < n {
        return Err(Error::arg("n", "exceeds the Hankel rank bound"));
    }
    let sigma_1 = hankel_sv[0];
    let sigma_n = hankel_sv[n - 1];
    if !(sigma_n > RANK_TOL * sigma_1) {
        return Err(Error::RankDeficient {
            sigma_n,
            sigma_1,
            hankel_sv,
        });
    }

    let rows = m * d1;
    let cols = (m + p) * d2;
    let mut obs = DMatrix::zeros(rows, n);
    let mut ctrl = DMatrix::zeros(n, cols);
    let mut obs_pinv = DMatrix::zeros(n, rows);
    let mut ctrl_pinv = DMatrix::zeros(cols, n);
    for (k, &idx) in order.iter().take(n).enumerate() {
        let s = hankel_sv[k].sqrt();
        let ucol = u.column(idx);
        let vrow = vt.row(idx);
        obs.set_column(k, &(ucol * s));
        ctrl.set_row(k, &(vrow * s));
        obs_pinv.set_row(k, &(ucol.transpose() / s));
        ctrl_pinv.set_column(k, &(vrow.transpose() / s));
    }

    let c = obs.rows(0, m).into_owned();
    let f = ctrl.columns(0, m).into_owned();
    let b = ctrl.columns(m * d2, p).into_owned();
    let abar = &obs_pinv * &h_plus * &ctrl_pinv;
    let a = &abar + &f * &c;
    Ok(RealizedSystem {
        a,
        abar,
        b,
        c,
        f,
        n,
        hankel_sv,
    })
}

/// Largest relative gap `sigma_k / sigma_{k+1}` among the leading values.
/// Not used by default; the order is normally taken as known.
pub fn estimate_order_by_gap(hankel_sv: &[f64]) -> usize {
    let mut best = (1, 0.0);
    for k in 0..hankel_sv.len().saturating_sub(1) {
        let next = hankel_sv[k + 1].max(f64::MIN_POSITIVE);
        let gap = hankel_sv[k] / next;
        if gap > best.1 {
            best = (k + 1, gap);
        }
    }
    best.0
}

/// `Ghat^[0] = 0`, `Ghat^[i] = Chat Ahat^{i-1} Bhat`.
pub fn reconstruct_markov(rs: &RealizedSystem, h: usize) -> MarkovOperator {
    let mut g = MarkovOperator::from_blocks(impulse_blocks(&rs.a, &rs.b, &rs.c, h));
    g.unstable_source = spectral_radius(&rs.a) >= 1.0;
    g
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EstimationError {
    /// `sum_i ||Ghat^[i] - G^[i]||_2`
    pub spectral_sum: f64,
    /// Frobenius norm of the stacked difference.
    pub frobenius: f64,
}

pub fn estimation_error(est: &MarkovOperator, truth: &MarkovOperator) -> Result<EstimationError> {
    if est.horizon() != truth.horizon() {
        return Err(Error::dim("H", truth.horizon(), est.horizon()));
    }
    let mut spectral_sum = 0.0;
    let mut fro2 = 0.0;
    for (e, g) in est.blocks.iter().zip(&truth.blocks) {
        if e.shape() != g.shape() {
            return Err(Error::dim("block", format!("{:?}", g.shape()), format!("{:?}", e.shape())));
        }
        let d = e - g;
        spectral_sum += spectral_norm(&d);
        fro2 += d.norm_squared();
    }
    Ok(EstimationError {
        spectral_sum,
        frobenius: fro2.sqrt(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExcitationSeries {
    /// `(t, sigma_min(sum_{i<=t} phi_i phi_i') / t)`
    pub points: Vec<(usize, f64)>,
}

impl ExcitationSeries {
    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }
}

/// Normalized smallest eigenvalue of the regressor Gram matrix at each checkpoint.
pub fn excitation_monitor(history: &RunHistory, he: usize, checkpoints: &[usize]) -> ExcitationSeries {
    let mut acc = ArxAccumulator::new(he, history.m(), history.p());
    let mut cps: Vec<usize> = checkpoints
        .iter()
        .copied()
        .filter(|&t| t > he && t <= history.len())
        .collect();
    cps.sort_unstable();
    cps.dedup();
    let points = cps
        .into_iter()
        .map(|t| {
            acc.extend_to(history, t);
            let min = linalg::min_eigenvalue_sym(&acc.gram()).max(0.0);
            (t, min / t as f64)
        })
        .collect();
    ExcitationSeries { points }
}

/// `He = max(2n+1, ceil(2 ln T / ln(1/rho)))`, capped at 40 (never below `2n+1`).
pub fn default_he(n: usize, rho_abar: f64, total_steps: usize) -> usize {
    let floor = 2 * n + 1;
    let log_term = if rho_abar > 0.0 && rho_abar < 1.0 && total_steps > 1 {
        (2.0 * (total_steps as f64).ln() / (1.0 / rho_abar).ln()).ceil() as usize
    } else {
        0
    };
    floor.max(log_term).min(HE_CAP.max(floor))
}

#[derive(Clone, Debug)]
pub struct Identified {
    /// `G^[0..H]`, `H + 1` blocks.
    pub markov: MarkovOperator,
    pub gy: Option<GyEstimate>,
    pub hankel_sv: Vec<f64>,
}

/// A Markov-operator estimator selectable by name.
pub trait Identifier {
    fn name(&self) -> &str;

    fn estimate(&self, history: &RunHistory) -> Result<Identified>;
}

/// Ridge ARX regression followed by the Ho-Kalman realization.
#[derive(Clone, Debug)]
pub struct PredictorArxIdentifier {
    pub he: usize,
    pub h: usize,
    pub n: usize,
    pub lambda: f64,
}

impl Identifier for PredictorArxIdentifier {
    fn name(&self) -> &str {
        "predictor_ls"
    }

    fn estimate(&self, history: &RunHistory) -> Result<Identified> {
        let est = regularized_ls(history, self.he, self.lambda)?;
        let (d1, d2) = default_split(self.he);
        let rs = ho_kalman_sysid(&est.gy, self.n, d1, d2)?;
        Ok(Identified {
            markov: reconstruct_markov(&rs, self.h + 1),
            gy: Some(est),
            hankel_sv: rs.hankel_sv,
        })
    }
}

/// Open-loop regression of outputs on past inputs.
#[derive(Clone, Debug)]
pub struct NaiveLsIdentifier {
    pub h: usize,
}

impl Identifier for NaiveLsIdentifier {
    fn name(&self) -> &str {
        "naive_ls"
    }

    fn estimate(&self, history: &RunHistory) -> Result<Identified> {
        Ok(Identified {
            markov: naive_markov_ls(history, self.h)?,
            gy: None,
            hankel_sv: Vec::new(),
        })
    }
}
