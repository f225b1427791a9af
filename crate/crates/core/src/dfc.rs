//! Disturbance-feedback control.
//!
//! A DFC policy plays `u_t = sum_{l < H'} M^[l] b_{t-l}` where `b_t` is the
//! estimated Nature's y, the part of the output not explained by past inputs
//! through the estimated Markov operator. Policies are stored flat,
//! block-major and row-major within a block: entry `(r, c)` of `M^[l]` sits at
//! `l * p * m + r * m + c`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, spectral_norm_slice, spectral_radius};
use crate::simulator::{Controller, LossKind, LossSpec, RunHistory};
use crate::system_model::{MarkovOperator, StateSpaceModel};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DfcPolicy {
    hprime: usize,
    p: usize,
    m: usize,
    pub kappa_m: f64,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyJson {
    #[serde(rename = "Hprime")]
    hprime: usize,
    #[serde(rename = "M")]
    m: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "kappa_M")]
    kappa_m: f64,
}

impl DfcPolicy {
    pub fn zeros(hprime: usize, p: usize, m: usize, kappa_m: f64) -> Self {
        Self {
            hprime,
            p,
            m,
            kappa_m,
            params: vec![0.0; hprime * p * m],
        }
    }

    pub fn from_flat(hprime: usize, p: usize, m: usize, kappa_m: f64, params: Vec<f64>) -> Result<Self> {
        if params.len() != hprime * p * m {
            return Err(Error::dim("M", hprime * p * m, params.len()));
        }
        Ok(Self {
            hprime,
            p,
            m,
            kappa_m,
            params,
        })
    }

    pub fn from_blocks(blocks: &[DMatrix<f64>], kappa_m: f64) -> Result<Self> {
        let (p, m) = blocks.first().map(|b| b.shape()).ok_or(Error::arg("M", "no blocks"))?;
        let mut params = Vec::with_capacity(blocks.len() * p * m);
        for (l, b) in blocks.iter().enumerate() {
            if b.shape() != (p, m) {
                return Err(Error::dim("M block", format!("{p}x{m}"), format!("block {l} is {:?}", b.shape())));
            }
            for r in 0..p {
                for c in 0..m {
                    params.push(b[(r, c)]);
                }
            }
        }
        Self::from_flat(blocks.len(), p, m, kappa_m, params)
    }

    pub fn hprime(&self) -> usize {
        self.hprime
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn block_slice(&self, l: usize) -> &[f64] {
        let pm = self.p * self.m;
        &self.params[l * pm..(l + 1) * pm]
    }

    pub fn block(&self, l: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p, self.m, self.block_slice(l))
    }

    pub fn blocks(&self) -> Vec<DMatrix<f64>> {
        (0..self.hprime).map(|l| self.block(l)).collect()
    }

    /// `sum_l ||M^[l]||_2`
    pub fn norm_sum(&self) -> f64 {
        (0..self.hprime)
            .map(|l| spectral_norm_slice(self.block_slice(l), self.p, self.m))
            .sum()
    }

    pub fn is_feasible(&self) -> bool {
        self.norm_sum() <= self.kappa_m * (1.0 + 1e-12)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let json = PolicyJson {
            hprime: self.hprime,
            m: self.blocks().iter().map(linalg::to_rows).collect(),
            kappa_m: self.kappa_m,
        };
        Ok(serde_json::to_string(&json)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let json: PolicyJson = serde_json::from_str(s)?;
        if json.m.len() != json.hprime {
            return Err(Error::dim("M", json.hprime, json.m.len()));
        }
        let blocks = json
            .m
            .iter()
            .map(|rows| linalg::from_rows("M", rows, None))
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(&blocks, json.kappa_m)
    }
}

/// Estimated Nature's y `b_t(Ghat)` for `t = 1 ..`, computed with one fixed
/// operator; entries for `t <= 0` read as zero.
#[derive(Clone, Debug)]
pub struct NatureYBuffer {
    m: usize,
    p: usize,
    g: MarkovOperator,
    /// Row-major copies of `Ghat^[1..]`.
    g_flat: Vec<f64>,
    data: Vec<f64>,
    zeros: Vec<f64>,
}

impl NatureYBuffer {
    pub fn new(g: MarkovOperator) -> Self {
        let (m, p) = (g.m(), g.p());
        let g_flat = flatten_blocks(&g.blocks);
        Self {
            m,
            p,
            g,
            g_flat,
            data: Vec::new(),
            zeros: vec![0.0; m],
        }
    }

    pub fn operator(&self) -> &MarkovOperator {
        &self.g
    }

    /// Last step stored.
    pub fn len(&self) -> usize {
        self.data.len() / self.m.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, t: i64) -> &[f64] {
        if t < 1 || t as usize > self.len() {
            return &self.zeros;
        }
        let t = t as usize;
        &self.data[(t - 1) * self.m..t * self.m]
    }

    /// Appends `b_t` for `t = len + 1` from the fresh output `y` and the
    /// inputs `u_{t-1}, u_{t-2}, ...` recorded in `history`.
    pub fn push_output(&mut self, history: &RunHistory, y: &[f64]) {
        let t = self.len() as i64 + 1;
        let (m, p) = (self.m, self.p);
        let start = self.data.len();
        self.data.extend_from_slice(y);
        let blocks = self.g.horizon();
        for j in 1..blocks {
            let u = history.u(t - j as i64);
            if u.iter().all(|&v| v == 0.0) {
                continue;
            }
            let g = &self.g_flat[j * m * p..(j + 1) * m * p];
            for i in 0..m {
                let mut acc = 0.0;
                for r in 0..p {
                    acc += g[i * p + r] * u[r];
                }
                self.data[start + i] -= acc;
            }
        }
    }

    /// Rebuilds `b_1 .. b_upto` from `history` with a new operator.
    pub fn recompute(&mut self, history: &RunHistory, g: MarkovOperator, upto: usize) {
        *self = Self::new(g);
        self.data.reserve(upto * self.m);
        for t in 1..=upto {
            let y = history.y(t as i64).to_vec();
            self.push_output(history, &y);
        }
    }
}

fn flatten_blocks(blocks: &[DMatrix<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for b in blocks {
        for i in 0..b.nrows() {
            for j in 0..b.ncols() {
                out.push(b[(i, j)]);
            }
        }
    }
    out
}

/// `b_t(Ghat) = y_t - sum_{j >= 1} Ghat^[j] u_{t-j}`
pub fn nature_y_estimate(history: &RunHistory, g: &MarkovOperator, t: usize) -> Result<Vec<f64>> {
    if t < 1 || t > history.len() {
        return Err(Error::arg("t", format!("step {t} outside 1..={}", history.len())));
    }
    let mut b = history.y(t as i64).to_vec();
    for j in 1..g.horizon() {
        let gu = &g.blocks[j] * linalg::dvec(history.u(t as i64 - j as i64));
        for (acc, v) in b.iter_mut().zip(gu.iter()) {
            *acc -= v;
        }
    }
    Ok(b)
}

fn check_policy_buffer(policy: &DfcPolicy, buf: &NatureYBuffer) -> Result<()> {
    if policy.m != buf.m {
        return Err(Error::dim("policy columns", buf.m, policy.m));
    }
    if policy.p != buf.p {
        return Err(Error::dim("policy rows", buf.p, policy.p));
    }
    Ok(())
}

/// `sum_l theta_l b_{s-l}` accumulated into `out`.
fn policy_apply(theta: &[f64], hprime: usize, p: usize, m: usize, buf: &NatureYBuffer, s: i64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let pm = p * m;
    for l in 0..hprime {
        let b = buf.get(s - l as i64);
        let blk = &theta[l * pm..(l + 1) * pm];
        for r in 0..p {
            let row = &blk[r * m..(r + 1) * m];
            let mut acc = 0.0;
            for c in 0..m {
                acc += row[c] * b[c];
            }
            out[r] += acc;
        }
    }
}

pub fn dfc_input(policy: &DfcPolicy, buf: &NatureYBuffer, t: usize) -> Result<Vec<f64>> {
    check_policy_buffer(policy, buf)?;
    let mut u = vec![0.0; policy.p];
    policy_apply(&policy.params, policy.hprime, policy.p, policy.m, buf, t as i64, &mut u);
    Ok(u)
}

/// `u~_{t-j} = sum_l M^[l] b_{t-j-l}`
pub fn counterfactual_input(policy: &DfcPolicy, buf: &NatureYBuffer, t: usize, j: usize) -> Result<Vec<f64>> {
    check_policy_buffer(policy, buf)?;
    let mut u = vec![0.0; policy.p];
    policy_apply(
        &policy.params,
        policy.hprime,
        policy.p,
        policy.m,
        buf,
        t as i64 - j as i64,
        &mut u,
    );
    Ok(u)
}

/// `y~_t = b_t + sum_{j >= 1} Ghat^[j] u~_{t-j}`
pub fn counterfactual_output(
    policy: &DfcPolicy,
    g: &MarkovOperator,
    buf: &NatureYBuffer,
    t: usize,
) -> Result<Vec<f64>> {
    check_policy_buffer(policy, buf)?;
    let mut ws = CounterfactualWorkspace::new(g, policy.hprime, policy.p, policy.m);
    ws.forward(&policy.params, buf, t as i64);
    Ok(ws.y.clone())
}

pub fn counterfactual_loss(
    policy: &DfcPolicy,
    g: &MarkovOperator,
    buf: &NatureYBuffer,
    t: usize,
    loss: &LossSpec,
) -> Result<f64> {
    check_policy_buffer(policy, buf)?;
    let mut ws = CounterfactualWorkspace::new(g, policy.hprime, policy.p, policy.m);
    Ok(ws.eval(&policy.params, buf, t as i64, loss, None))
}

/// Gradient of the counterfactual loss in the flat policy layout. Quadratic
/// losses use the chain rule through the affine maps; other kinds fall back
/// to [`counterfactual_gradient_fd`].
pub fn counterfactual_gradient(
    policy: &DfcPolicy,
    g: &MarkovOperator,
    buf: &NatureYBuffer,
    t: usize,
    loss: &LossSpec,
) -> Result<Vec<f64>> {
    check_policy_buffer(policy, buf)?;
    match loss.kind {
        LossKind::Quadratic => {
            let mut ws = CounterfactualWorkspace::new(g, policy.hprime, policy.p, policy.m);
            let mut grad = vec![0.0; policy.params.len()];
            ws.eval(&policy.params, buf, t as i64, loss, Some(&mut grad));
            Ok(grad)
        }
    }
}

/// Central differences with step `1e-6 (1 + ||M||)`.
pub fn counterfactual_gradient_fd(
    policy: &DfcPolicy,
    g: &MarkovOperator,
    buf: &NatureYBuffer,
    t: usize,
    loss: &LossSpec,
) -> Result<Vec<f64>> {
    check_policy_buffer(policy, buf)?;
    let norm = policy.params.iter().map(|v| v * v).sum::<f64>().sqrt();
    let h = 1e-6 * (1.0 + norm);
    let mut ws = CounterfactualWorkspace::new(g, policy.hprime, policy.p, policy.m);
    let mut theta = policy.params.clone();
    let mut grad = vec![0.0; theta.len()];
    for k in 0..theta.len() {
        let orig = theta[k];
        theta[k] = orig + h;
        let fp = ws.eval(&theta, buf, t as i64, loss, None);
        theta[k] = orig - h;
        let fm = ws.eval(&theta, buf, t as i64, loss, None);
        theta[k] = orig;
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Reusable scratch for evaluating the counterfactual loss and gradient.
#[derive(Clone, Debug)]
pub struct CounterfactualWorkspace {
    hprime: usize,
    p: usize,
    m: usize,
    /// Number of operator blocks `H + 1`.
    blocks: usize,
    g_flat: Vec<f64>,
    /// `u~_{t-j}` for `j = 0 .. H`, each `p` long.
    u: Vec<f64>,
    y: Vec<f64>,
    gy: Vec<f64>,
    /// `v_0 = 2 R u~_t`, `v_j = Ghat^[j]' 2 Q y~_t`.
    v: Vec<f64>,
}

impl CounterfactualWorkspace {
    pub fn new(g: &MarkovOperator, hprime: usize, p: usize, m: usize) -> Self {
        let blocks = g.horizon().max(1);
        Self {
            hprime,
            p,
            m,
            blocks,
            g_flat: if g.horizon() == 0 { vec![0.0; m * p] } else { flatten_blocks(&g.blocks) },
            u: vec![0.0; blocks * p],
            y: vec![0.0; m],
            gy: vec![0.0; m],
            v: vec![0.0; blocks * p],
        }
    }

    fn forward(&mut self, theta: &[f64], buf: &NatureYBuffer, t: i64) {
        let (p, m) = (self.p, self.m);
        for j in 0..self.blocks {
            policy_apply(theta, self.hprime, p, m, buf, t - j as i64, &mut self.u[j * p..(j + 1) * p]);
        }
        self.y.copy_from_slice(buf.get(t));
        for j in 1..self.blocks {
            let g = &self.g_flat[j * m * p..(j + 1) * m * p];
            let u = &self.u[j * p..(j + 1) * p];
            for i in 0..m {
                let mut acc = 0.0;
                for r in 0..p {
                    acc += g[i * p + r] * u[r];
                }
                self.y[i] += acc;
            }
        }
    }

    /// Loss at `theta`; writes the gradient when `grad` is given.
    pub fn eval(
        &mut self,
        theta: &[f64],
        buf: &NatureYBuffer,
        t: i64,
        loss: &LossSpec,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let (p, m) = (self.p, self.m);
        self.forward(theta, buf, t);
        let u0 = &self.u[0..p];
        let f = crate::simulator::stage_loss(loss, &self.y, u0);
        let Some(grad) = grad else { return f };

        let mut gu = vec![0.0; p];
        loss.gradient(&self.y, u0, &mut self.gy, &mut gu);
        self.v[0..p].copy_from_slice(&gu);
        for j in 1..self.blocks {
            let g = &self.g_flat[j * m * p..(j + 1) * m * p];
            let v = &mut self.v[j * p..(j + 1) * p];
            for r in 0..p {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += g[i * p + r] * self.gy[i];
                }
                v[r] = acc;
            }
        }
        // d f / d M^[l]_{rc} = sum_j v_j[r] b_{t-j-l}[c]
        grad.iter_mut().for_each(|g| *g = 0.0);
        let pm = p * m;
        for l in 0..self.hprime {
            let blk = &mut grad[l * pm..(l + 1) * pm];
            for j in 0..self.blocks {
                let b = buf.get(t - (j + l) as i64);
                if b.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let v = &self.v[j * p..(j + 1) * p];
                for r in 0..p {
                    let vr = v[r];
                    let row = &mut blk[r * m..(r + 1) * m];
                    for c in 0..m {
                        row[c] += vr * b[c];
                    }
                }
            }
        }
        f
    }
}

/// Radial retraction onto `sum_l ||M^[l]||_2 <= kappa_M`.
pub fn project_policy(policy: &DfcPolicy) -> DfcPolicy {
    let mut out = policy.clone();
    retract_in_place(&mut out);
    out
}

fn retract_in_place(policy: &mut DfcPolicy) {
    let s = policy.norm_sum();
    if s <= policy.kappa_m {
        return;
    }
    let scale = if s > 0.0 { policy.kappa_m.max(0.0) / s } else { 0.0 };
    policy.params.iter_mut().for_each(|v| *v *= scale);
}

/// Euclidean projection onto `sum_l ||M^[l]||_2 <= kappa`.
///
/// Clipping each block's singular values at a level `c_l` is optimal for a
/// fixed budget split; the optimal split equalizes the clipped mass
/// `sum_k (sigma_{l,k} - c_l)_+` across every block with `c_l > 0`, so the
/// common mass is found by bisection.
pub fn project_exact(policy: &DfcPolicy) -> DfcPolicy {
    if policy.norm_sum() <= policy.kappa_m {
        return policy.clone();
    }
    let kappa = policy.kappa_m.max(0.0);
    if policy.p == 1 || policy.m == 1 {
        return project_exact_vector_blocks(policy, kappa);
    }
    let svds: Vec<_> = policy.blocks().into_iter().map(|b| b.svd(true, true)).collect();
    let sv: Vec<Vec<f64>> = svds.iter().map(|s| s.singular_values.iter().copied().collect()).collect();

    // level c at which the clipped mass of `s` equals `mu`
    let level = |s: &[f64], mu: f64| -> f64 {
        let top = s.iter().copied().fold(0.0, f64::max);
        let mass = |c: f64| s.iter().map(|&x| (x - c).max(0.0)).sum::<f64>();
        if mass(0.0) <= mu {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0, top);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass(mid) > mu {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let budget = |mu: f64| sv.iter().map(|s| level(s, mu)).sum::<f64>();
    let mut hi_mu = sv.iter().map(|s| s.iter().sum::<f64>()).fold(0.0, f64::max);
    let mut lo_mu = 0.0;
    if kappa > 0.0 {
        for _ in 0..200 {
            let mid = 0.5 * (lo_mu + hi_mu);
            if budget(mid) > kappa {
                lo_mu = mid;
            } else {
                hi_mu = mid;
            }
        }
    }
    let mu = hi_mu;
    let blocks: Vec<DMatrix<f64>> = svds
        .into_iter()
        .zip(&sv)
        .map(|(mut svd, s)| {
            let c = level(s, mu);
            for (k, x) in s.iter().enumerate() {
                svd.singular_values[k] = x.min(c);
            }
            svd.recompose().expect("singular vectors requested")
        })
        .collect();
    let mut out = DfcPolicy::from_blocks(&blocks, policy.kappa_m).expect("same shapes");
    // bisection leaves the budget within rounding of kappa; close the gap radially
    retract_in_place(&mut out);
    out
}

/// Vector-shaped blocks have one singular value, the Euclidean norm, so the
/// projection is group soft-thresholding `||M^[l]|| -> (||M^[l]|| - mu)_+`.
fn project_exact_vector_blocks(policy: &DfcPolicy, kappa: f64) -> DfcPolicy {
    let pm = policy.p * policy.m;
    let norms: Vec<f64> = policy
        .params
        .chunks(pm)
        .map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // largest k with sorted[k-1] > (sum_{i<k} sorted[i] - kappa) / k
    let mut mu = 0.0;
    let mut prefix = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        prefix += s;
        let cand = (prefix - kappa) / (k + 1) as f64;
        if s > cand {
            mu = cand;
        } else {
            break;
        }
    }
    let mu = mu.max(0.0);
    let mut out = policy.clone();
    for (blk, &nrm) in out.params.chunks_mut(pm).zip(&norms) {
        let scale = if nrm > 0.0 { (nrm - mu).max(0.0) / nrm } else { 0.0 };
        blk.iter_mut().for_each(|v| *v *= scale);
    }
    retract_in_place(&mut out);
    out
}

/// Map back onto the feasible set after a gradient step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// [`project_policy`]
    #[default]
    Radial,
    /// [`project_exact`]
    Exact,
}

impl Projection {
    pub fn apply(self, policy: &mut DfcPolicy) {
        match self {
            Projection::Radial => retract_in_place(policy),
            Projection::Exact => {
                if policy.norm_sum() > policy.kappa_m {
                    *policy = project_exact(policy);
                }
            }
        }
    }
}

/// `project(M - eta grad)` with the radial retraction.
pub fn ogd_step(policy: &DfcPolicy, gradient: &[f64], eta: f64) -> Result<DfcPolicy> {
    ogd_step_with(policy, gradient, eta, Projection::Radial)
}

pub fn ogd_step_with(policy: &DfcPolicy, gradient: &[f64], eta: f64, projection: Projection) -> Result<DfcPolicy> {
    if !(eta > 0.0) {
        return Err(Error::arg("eta", "must be positive"));
    }
    if gradient.len() != policy.params.len() {
        return Err(Error::dim("gradient", policy.params.len(), gradient.len()));
    }
    let mut out = policy.clone();
    ogd_step_in_place(&mut out, gradient, eta, projection);
    Ok(out)
}

pub(crate) fn ogd_step_in_place(policy: &mut DfcPolicy, gradient: &[f64], eta: f64, projection: Projection) {
    for (m, g) in policy.params.iter_mut().zip(gradient) {
        *m -= eta * g;
    }
    projection.apply(policy);
}

/// `eta_t = 12 / (alpha t)`
pub fn ogd_rate(alpha: f64, t: usize) -> f64 {
    12.0 / (alpha * t as f64)
}

/// Linear dynamic controller `s_{t+1} = A_pi s_t + B_pi y_t`,
/// `u_t = C_pi s_t + D_pi y_t`.
#[derive(Clone, Debug)]
pub struct LdcPolicy {
    pub a_pi: DMatrix<f64>,
    pub b_pi: DMatrix<f64>,
    pub c_pi: DMatrix<f64>,
    pub d_pi: DMatrix<f64>,
    pub state: DVector<f64>,
    /// Closed-loop spectral radius, set by [`ldc_to_dfc`] and [`ldc_closed_loop`].
    pub closed_loop_rho: Option<f64>,
}

impl LdcPolicy {
    pub fn new(a_pi: DMatrix<f64>, b_pi: DMatrix<f64>, c_pi: DMatrix<f64>, d_pi: DMatrix<f64>) -> Result<Self> {
        let s = a_pi.nrows();
        if !a_pi.is_square() {
            return Err(Error::dim("A_pi", "square", format!("{:?}", a_pi.shape())));
        }
        let (p, m) = d_pi.shape();
        if b_pi.shape() != (s, m) {
            return Err(Error::dim("B_pi", format!("{s}x{m}"), format!("{:?}", b_pi.shape())));
        }
        if c_pi.shape() != (p, s) {
            return Err(Error::dim("C_pi", format!("{p}x{s}"), format!("{:?}", c_pi.shape())));
        }
        Ok(Self {
            a_pi,
            b_pi,
            c_pi,
            d_pi,
            state: DVector::zeros(s),
            closed_loop_rho: None,
        })
    }

    /// Memoryless `u = K y`.
    pub fn static_gain(k: DMatrix<f64>) -> Self {
        let (p, m) = k.shape();
        Self::new(DMatrix::zeros(0, 0), DMatrix::zeros(0, m), DMatrix::zeros(p, 0), k).expect("consistent")
    }

    pub fn reset(&mut self) {
        self.state.fill(0.0);
    }

    pub fn step(&mut self, y: &[f64]) -> Vec<f64> {
        let y = linalg::dvec(y);
        let u = &self.c_pi * &self.state + &self.d_pi * &y;
        self.state = &self.a_pi * &self.state + &self.b_pi * &y;
        u.iter().copied().collect()
    }
}

impl Controller for LdcPolicy {
    fn name(&self) -> &str {
        "ldc"
    }

    fn act(&mut self, _history: &RunHistory, _t: usize, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.step(y))
    }
}

/// Closed-loop matrices of plant plus LDC on the state `[x; s]`:
/// `A' = [[A + B D C, B C_pi], [B_pi C, A_pi]]`, `B'_z = [B D; B_pi]`,
/// `C'_u = [D C, C_pi]`.
#[derive(Clone, Debug)]
pub struct LdcClosedLoop {
    pub a: DMatrix<f64>,
    pub b_z: DMatrix<f64>,
    pub c_u: DMatrix<f64>,
    pub rho: f64,
}

pub fn ldc_closed_loop(ldc: &LdcPolicy, plant: &StateSpaceModel) -> Result<LdcClosedLoop> {
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    let s = ldc.a_pi.nrows();
    if ldc.d_pi.shape() != (p, m) {
        return Err(Error::dim("D_pi", format!("{p}x{m}"), format!("{:?}", ldc.d_pi.shape())));
    }
    let bd = &plant.b * &ldc.d_pi;
    let mut a = DMatrix::zeros(n + s, n + s);
    a.view_mut((0, 0), (n, n)).copy_from(&(&plant.a + &bd * &plant.c));
    a.view_mut((0, n), (n, s)).copy_from(&(&plant.b * &ldc.c_pi));
    a.view_mut((n, 0), (s, n)).copy_from(&(&ldc.b_pi * &plant.c));
    a.view_mut((n, n), (s, s)).copy_from(&ldc.a_pi);
    let mut b_z = DMatrix::zeros(n + s, m);
    b_z.view_mut((0, 0), (n, m)).copy_from(&bd);
    b_z.view_mut((n, 0), (s, m)).copy_from(&ldc.b_pi);
    let mut c_u = DMatrix::zeros(p, n + s);
    c_u.view_mut((0, 0), (p, n)).copy_from(&(&ldc.d_pi * &plant.c));
    c_u.view_mut((0, n), (p, s)).copy_from(&ldc.c_pi);
    let rho = spectral_radius(&a);
    Ok(LdcClosedLoop { a, b_z, c_u, rho })
}

/// `M^[0] = D_pi`, `M^[i] = C'_u A'^{i-1} B'_z`, as many blocks as requested.
pub fn ldc_markov_blocks(ldc: &LdcPolicy, plant: &StateSpaceModel, count: usize) -> Result<Vec<DMatrix<f64>>> {
    let cl = ldc_closed_loop(ldc, plant)?;
    let mut blocks = Vec::with_capacity(count);
    if count == 0 {
        return Ok(blocks);
    }
    blocks.push(ldc.d_pi.clone());
    let mut ab = cl.b_z.clone();
    for _ in 1..count {
        blocks.push(&cl.c_u * &ab);
        ab = &cl.a * ab;
    }
    Ok(blocks)
}

/// DFC image of a stabilizing LDC truncated to `H'` blocks. The radius is
/// set to the image's own norm sum.
pub fn ldc_to_dfc(ldc: &LdcPolicy, plant: &StateSpaceModel, hprime: usize) -> Result<DfcPolicy> {
    if hprime == 0 {
        return Err(Error::arg("Hprime", "must be at least 1"));
    }
    let cl = ldc_closed_loop(ldc, plant)?;
    if cl.rho >= 1.0 {
        return Err(Error::DestabilizingLdc { rho: cl.rho });
    }
    let blocks = ldc_markov_blocks(ldc, plant, hprime)?;
    let mut policy = DfcPolicy::from_blocks(&blocks, 0.0)?;
    policy.kappa_m = policy.norm_sum();
    Ok(policy)
}

/// A fixed DFC policy driven by Nature's y estimates from a fixed operator.
#[derive(Clone, Debug)]
pub struct DfcController {
    pub policy: DfcPolicy,
    buf: NatureYBuffer,
    label: String,
}

impl DfcController {
    pub fn new(policy: DfcPolicy, g: MarkovOperator, label: impl Into<String>) -> Self {
        Self {
            policy,
            buf: NatureYBuffer::new(g),
            label: label.into(),
        }
    }

    pub fn buffer(&self) -> &NatureYBuffer {
        &self.buf
    }
}

impl Controller for DfcController {
    fn name(&self) -> &str {
        &self.label
    }

    fn act(&mut self, history: &RunHistory, t: usize, y: &[f64]) -> Result<Vec<f64>> {
        if self.buf.len() + 1 != t {
            return Err(Error::Contract("DFC controller must be driven from step 1 without gaps"));
        }
        self.buf.push_output(history, y);
        dfc_input(&self.policy, &self.buf, t)
    }
}
