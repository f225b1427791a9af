//! Linear plant representations: state-space form, the Kalman predictor form,
//! Markov parameters and the stacked ARX parameter matrix.
//!
//! Plant, with `t = 1, 2, ...`:
//!
//! ```text
//! x_{t+1} = A x_t + B u_t + w_t,   w_t ~ N(0, sigma_w2 I)
//! y_t     = C x_t + z_t,           z_t ~ N(0, sigma_z2 I)
//! ```
//!
//! Predictor form, driven by the realized outputs:
//!
//! ```text
//! xhat_{t+1} = Abar xhat_t + B u_t + F y_t,  y_t = C xhat_t + e_t,  Abar = A - F C
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, spectral_norm, spectral_radius};
use crate::{Error, Result};

pub const DEFAULT_DARE_TOL: f64 = 1e-10;
pub const DEFAULT_DARE_MAX_ITER: usize = 100_000;
/// Markov tail proxy is summed out to this multiple of the horizon.
pub const TAIL_CUTOFF_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelJson", into = "ModelJson")]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma_w2: f64,
    pub sigma_z2: f64,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        sigma_w2: f64,
        sigma_z2: f64,
    ) -> Result<Self> {
        let model = Self {
            a,
            b,
            c,
            sigma_w2,
            sigma_z2,
        };
        model.check_dims()?;
        Ok(model)
    }

    /// Scalar plant `(a, b, c)`.
    pub fn scalar(a: f64, b: f64, c: f64, sigma_w2: f64, sigma_z2: f64) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, c),
            sigma_w2,
            sigma_z2,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.nrows()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn check_dims(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(Error::dim("A", format!("{n}x{n}"), shape(&self.a)));
        }
        if self.b.nrows() != n {
            return Err(Error::dim("B", format!("{n} rows"), shape(&self.b)));
        }
        if self.c.ncols() != n {
            return Err(Error::dim("C", format!("{n} columns"), shape(&self.c)));
        }
        if !(self.sigma_w2 >= 0.0) {
            return Err(Error::arg("sigma_w2", "must be a nonnegative number"));
        }
        if !(self.sigma_z2 >= 0.0) {
            return Err(Error::arg("sigma_z2", "must be a nonnegative number"));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    sigma_w2: f64,
    sigma_z2: f64,
}

impl TryFrom<ModelJson> for StateSpaceModel {
    type Error = Error;

    fn try_from(j: ModelJson) -> Result<Self> {
        let a = linalg::from_rows("A", &j.a, None)?;
        let b = linalg::from_rows("B", &j.b, None)?;
        let c = linalg::from_rows("C", &j.c, Some(a.nrows()))?;
        StateSpaceModel::new(a, b, c, j.sigma_w2, j.sigma_z2)
    }
}

impl From<StateSpaceModel> for ModelJson {
    fn from(m: StateSpaceModel) -> Self {
        ModelJson {
            a: linalg::to_rows(&m.a),
            b: linalg::to_rows(&m.b),
            c: linalg::to_rows(&m.c),
            sigma_w2: m.sigma_w2,
            sigma_z2: m.sigma_z2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub rho_a: f64,
    pub stable: bool,
    pub controllability_rank: usize,
    pub observability_rank: usize,
    pub rho_abar: Option<f64>,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn controllable(&self) -> bool {
        self.controllability_rank == self.n
    }

    pub fn observable(&self) -> bool {
        self.observability_rank == self.n
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// `[B, AB, ..., A^{n-1} B]`
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = (a.nrows(), b.ncols());
    let mut out = DMatrix::zeros(n, n * p);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * p), (n, p)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

/// `[C; CA; ...; C A^{n-1}]`
pub fn observability_matrix(a: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (a.nrows(), c.nrows());
    let mut out = DMatrix::zeros(n * m, n);
    let mut blk = c.clone();
    for k in 0..n {
        out.view_mut((k * m, 0), (m, n)).copy_from(&blk);
        blk = blk * a;
    }
    out
}

pub fn validate_system(model: &StateSpaceModel) -> Result<ValidationReport> {
    model.check_dims()?;
    let rho_a = spectral_radius(&model.a);
    let stable = rho_a < 1.0;
    let n = model.n();
    let controllability_rank = linalg::rank(&controllability_matrix(&model.a, &model.b));
    let observability_rank = linalg::rank(&observability_matrix(&model.a, &model.c));

    let rho_abar = if stable && model.sigma_z2 > 0.0 {
        solve_dare(model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)
            .ok()
            .and_then(|sigma| predictor_matrices(model, &sigma).ok())
            .map(|(_, abar, _)| spectral_radius(&abar))
    } else {
        None
    };

    let mut checks = vec![
        AssumptionCheck {
            name: "open_loop_stability",
            passed: stable,
            measured: rho_a,
        },
        AssumptionCheck {
            name: "controllability",
            passed: controllability_rank == n,
            measured: controllability_rank as f64,
        },
        AssumptionCheck {
            name: "observability",
            passed: observability_rank == n,
            measured: observability_rank as f64,
        },
    ];
    if let Some(r) = rho_abar {
        checks.push(AssumptionCheck {
            name: "predictor_stability",
            passed: r < 1.0,
            measured: r,
        });
    }

    Ok(ValidationReport {
        n,
        m: model.m(),
        p: model.p(),
        rho_a,
        stable,
        controllability_rank,
        observability_rank,
        rho_abar,
        checks,
    })
}

/// Right-hand side of the Riccati recursion in filter orientation:
/// `A S A' - A S C' (C S C' + R)^{-1} C S A' + Q`.
pub fn riccati_rhs(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let asc = a * s * c.transpose();
    let innov = c * s * c.transpose() + r;
    let chol = linalg::symmetrize(&innov)
        .cholesky()
        .ok_or(Error::SingularInnovation)?;
    let gain_term = &asc * chol.solve(&asc.transpose());
    Ok(linalg::symmetrize(&(a * s * a.transpose() - gain_term + q)))
}

/// Fixed-point iteration `S_{k+1} = rhs(S_k)` from `s0`; returns the first
/// iterate whose residual `||rhs(S) - S||_F` is within `tol`.
pub fn riccati_fixed_point(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s0: DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let mut s = s0;
    let mut residual = f64::INFINITY;
    for iter in 0..max_iter {
        let next = riccati_rhs(a, c, q, r, &s)?;
        residual = (&next - &s).norm();
        if residual <= tol {
            check_psd(&s, iter)?;
            return Ok(s);
        }
        if iter % 64 == 63 {
            check_psd(&next, iter + 1)?;
        }
        s = next;
    }
    Err(Error::RiccatiNoConvergence {
        iterations: max_iter,
        residual,
    })
}

fn check_psd(s: &DMatrix<f64>, iteration: usize) -> Result<()> {
    let min_eig = linalg::min_eigenvalue_sym(s);
    if min_eig < -1e-10 * (1.0 + s.norm()) {
        return Err(Error::RiccatiIndefinite { iteration, min_eig });
    }
    Ok(())
}

/// Steady-state prediction-error covariance: the PSD fixed point of
/// `S = A S A' - A S C'(C S C' + sigma_z2 I)^{-1} C S A' + sigma_w2 I`,
/// iterated from `sigma_w2 I`.
pub fn solve_dare(model: &StateSpaceModel, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    model.check_dims()?;
    if !(model.sigma_z2 > 0.0) {
        return Err(Error::arg("sigma_z2", "must be positive to solve the filter DARE"));
    }
    let rho = spectral_radius(&model.a);
    if rho >= 1.0 {
        return Err(Error::arg("A", format!("spectral radius {rho} is not below 1")));
    }
    let (n, m) = (model.n(), model.m());
    let q = linalg::identity(n) * model.sigma_w2;
    let r = linalg::identity(m) * model.sigma_z2;
    riccati_fixed_point(&model.a, &model.c, &q, &r, q.clone(), tol, max_iter)
}

/// `||rhs(S) - S||_F` for the filter DARE of `model`.
pub fn dare_residual(model: &StateSpaceModel, sigma: &DMatrix<f64>) -> Result<f64> {
    let q = linalg::identity(model.n()) * model.sigma_w2;
    let r = linalg::identity(model.m()) * model.sigma_z2;
    Ok((riccati_rhs(&model.a, &model.c, &q, &r, sigma)? - sigma).norm())
}

#[derive(Clone, Debug)]
pub struct PredictorForm {
    pub abar: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub innovation_cov: DMatrix<f64>,
    pub rho_abar: f64,
}

/// `(F, Abar, innovation covariance)`.
fn predictor_matrices(
    model: &StateSpaceModel,
    sigma: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let innov = &model.c * sigma * model.c.transpose()
        + linalg::identity(model.m()) * model.sigma_z2;
    let innov = linalg::symmetrize(&innov);
    let chol = innov.clone().cholesky().ok_or(Error::SingularInnovation)?;
    let asc = &model.a * sigma * model.c.transpose();
    // F = A S C' innov^{-1}, solved as innov F' = (A S C')'
    let f = chol.solve(&asc.transpose()).transpose();
    let abar = &model.a - &f * &model.c;
    Ok((f, abar, innov))
}

pub fn to_predictor_form(model: &StateSpaceModel, sigma: &DMatrix<f64>) -> Result<PredictorForm> {
    model.check_dims()?;
    if sigma.shape() != (model.n(), model.n()) {
        return Err(Error::dim("Sigma", format!("{0}x{0}", model.n()), shape(sigma)));
    }
    let (f, abar, innovation_cov) = predictor_matrices(model, sigma)?;
    let rho_abar = spectral_radius(&abar);
    if rho_abar >= 1.0 {
        return Err(Error::UnstablePredictor { rho: rho_abar });
    }
    Ok(PredictorForm {
        abar,
        f,
        b: model.b.clone(),
        c: model.c.clone(),
        sigma: sigma.clone(),
        innovation_cov,
        rho_abar,
    })
}

/// Solves the DARE with default settings and builds the predictor form.
pub fn predictor_form(model: &StateSpaceModel) -> Result<PredictorForm> {
    let sigma = solve_dare(model, DEFAULT_DARE_TOL, DEFAULT_DARE_MAX_ITER)?;
    to_predictor_form(model, &sigma)
}

/// `{G^[0], ..., G^[H-1]}` with `G^[0] = 0`. Each block is `m x p`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovOperator {
    pub blocks: Vec<DMatrix<f64>>,
    /// Sum of spectral norms of the blocks `H .. 4H-1` when known, else 0.
    pub tail_bound: f64,
    /// Set when the realization this operator was built from had `rho(A) >= 1`.
    pub unstable_source: bool,
}

impl MarkovOperator {
    pub fn zeros(h: usize, m: usize, p: usize) -> Self {
        Self {
            blocks: vec![DMatrix::zeros(m, p); h],
            tail_bound: 0.0,
            unstable_source: false,
        }
    }

    pub fn from_blocks(blocks: Vec<DMatrix<f64>>) -> Self {
        Self {
            blocks,
            tail_bound: 0.0,
            unstable_source: false,
        }
    }

    pub fn horizon(&self) -> usize {
        self.blocks.len()
    }

    pub fn m(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn p(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.ncols())
    }

    /// `sum_i ||G^[i]||_2`
    pub fn norm_sum(&self) -> f64 {
        self.blocks.iter().map(spectral_norm).sum()
    }

    /// Vertically stacked blocks `[G^[0]; ...; G^[H-1]]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (m, p) = (self.m(), self.p());
        let mut out = DMatrix::zeros(m * self.horizon(), p);
        for (i, blk) in self.blocks.iter().enumerate() {
            out.view_mut((i * m, 0), (m, p)).copy_from(blk);
        }
        out
    }

    /// Keeps the first `h` blocks.
    pub fn truncated(&self, h: usize) -> Self {
        Self {
            blocks: self.blocks[..h.min(self.horizon())].to_vec(),
            tail_bound: self.tail_bound,
            unstable_source: self.unstable_source,
        }
    }
}

/// Blocks `C A^{i-1} B` for `i = 1 .. count-1` after a leading zero block,
/// computed from an arbitrary realization.
pub(crate) fn impulse_blocks(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    count: usize,
) -> Vec<DMatrix<f64>> {
    let mut blocks = Vec::with_capacity(count);
    if count == 0 {
        return blocks;
    }
    blocks.push(DMatrix::zeros(c.nrows(), b.ncols()));
    let mut ab = b.clone();
    for _ in 1..count {
        blocks.push(c * &ab);
        ab = a * ab;
    }
    blocks
}

pub fn markov_parameters(model: &StateSpaceModel, h: usize) -> Result<MarkovOperator> {
    model.check_dims()?;
    if h == 0 {
        return Err(Error::arg("H", "horizon must be at least 1"));
    }
    let cutoff = TAIL_CUTOFF_FACTOR * h;
    let mut all = impulse_blocks(&model.a, &model.b, &model.c, cutoff);
    let tail_bound = all[h..].iter().map(spectral_norm).sum();
    all.truncate(h);
    Ok(MarkovOperator {
        blocks: all,
        tail_bound,
        unstable_source: spectral_radius(&model.a) >= 1.0,
    })
}

/// Stacked ARX parameter `[CF, C Abar F, ..., C Abar^{He-1} F, CB, ..., C Abar^{He-1} B]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GyMatrix {
    pub he: usize,
    pub m: usize,
    pub p: usize,
    pub mat: DMatrix<f64>,
}

impl GyMatrix {
    pub fn new(he: usize, m: usize, p: usize, mat: DMatrix<f64>) -> Result<Self> {
        if mat.shape() != (m, (m + p) * he) {
            return Err(Error::dim("Gy", format!("{m}x{}", (m + p) * he), shape(&mat)));
        }
        Ok(Self { he, m, p, mat })
    }

    /// `C Abar^k F` (zero-based `k`).
    pub fn f_block(&self, k: usize) -> DMatrix<f64> {
        self.mat.columns(k * self.m, self.m).into_owned()
    }

    /// `C Abar^k B` (zero-based `k`).
    pub fn g_block(&self, k: usize) -> DMatrix<f64> {
        self.mat
            .columns(self.m * self.he + k * self.p, self.p)
            .into_owned()
    }

    pub fn block_count(&self) -> usize {
        2 * self.he
    }
}

pub fn gy_parameter(pf: &PredictorForm, he: usize) -> Result<GyMatrix> {
    if he == 0 {
        return Err(Error::arg("He", "horizon must be at least 1"));
    }
    let (m, p) = (pf.c.nrows(), pf.b.ncols());
    let mut mat = DMatrix::zeros(m, (m + p) * he);
    let mut af = pf.f.clone();
    let mut ab = pf.b.clone();
    for k in 0..he {
        mat.view_mut((0, k * m), (m, m)).copy_from(&(&pf.c * &af));
        mat.view_mut((0, m * he + k * p), (m, p))
            .copy_from(&(&pf.c * &ab));
        af = &pf.abar * af;
        ab = &pf.abar * ab;
    }
    GyMatrix::new(he, m, p, mat)
}
