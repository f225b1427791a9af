//! Reproducible trajectories of a partially observable linear plant.
//!
//! Per step the environment first emits `y_t = C x_t + z_t` ([`Environment::observe`])
//! and then advances with the chosen input ([`Environment::apply_input`]).
//! Controllers only ever see `y` and their own past inputs; the noise log and
//! latent state stay inside the environment and are attached to the
//! [`RunHistory`] as ground truth once the run is over.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::rng::{GaussianStream, StreamKey};
use crate::system_model::{self, MarkovOperator, StateSpaceModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `x_1 ~ N(0, Sigma)` with `Sigma` the steady-state filter covariance.
    #[default]
    SteadyState,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Environment {
    model: StateSpaceModel,
    x: DVector<f64>,
    x1: DVector<f64>,
    t: usize,
    noise: GaussianStream,
    pending_z: Option<Vec<f64>>,
    ws: Vec<f64>,
    zs: Vec<f64>,
    init_mode: InitMode,
}

impl Environment {
    pub fn new(model: StateSpaceModel, seed: u64, init_mode: InitMode) -> Result<Self> {
        model.check_dims()?;
        let n = model.n();
        let x1 = match init_mode {
            InitMode::Zero => DVector::zeros(n),
            InitMode::SteadyState => {
                let sigma = system_model::solve_dare(
                    &model,
                    system_model::DEFAULT_DARE_TOL,
                    system_model::DEFAULT_DARE_MAX_ITER,
                )?;
                let factor = linalg::psd_factor(&sigma);
                let mut init = GaussianStream::new(seed, StreamKey::InitialState);
                &factor * DVector::from_vec(init.normal_vec(n, 1.0))
            }
        };
        Ok(Self {
            x: x1.clone(),
            x1,
            t: 0,
            noise: GaussianStream::new(seed, StreamKey::PlantNoise),
            pending_z: None,
            ws: Vec::new(),
            zs: Vec::new(),
            model,
            init_mode,
        })
    }

    /// Replaces the initial state. Only valid before the first step.
    pub fn with_initial_state(mut self, x1: DVector<f64>) -> Result<Self> {
        if self.t != 0 || self.pending_z.is_some() {
            return Err(Error::Contract("initial state set after the run started"));
        }
        if x1.len() != self.model.n() {
            return Err(Error::dim("x0", self.model.n(), x1.len()));
        }
        self.x = x1.clone();
        self.x1 = x1;
        Ok(self)
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.model
    }

    /// Number of completed steps.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.x1
    }

    /// Logged `(w_t, z_t)` of step `t >= 1`.
    pub fn noise_at(&self, t: usize) -> (&[f64], &[f64]) {
        let (n, m) = (self.model.n(), self.model.m());
        (
            &self.ws[(t - 1) * n..t * n],
            &self.zs[(t - 1) * m..t * m],
        )
    }

    pub fn noise_log_len(&self) -> usize {
        self.ws.len() / self.model.n().max(1)
    }

    pub fn observe(&mut self) -> Result<Vec<f64>> {
        if self.pending_z.is_some() {
            return Err(Error::Contract("observe called twice in one step"));
        }
        let z = self.noise.normal_vec(self.model.m(), self.model.sigma_z2);
        let mut y = &self.model.c * &self.x;
        for (yi, zi) in y.iter_mut().zip(&z) {
            *yi += zi;
        }
        self.pending_z = Some(z);
        Ok(y.as_slice().to_vec())
    }

    pub fn apply_input(&mut self, u: &[f64]) -> Result<()> {
        if u.len() != self.model.p() {
            return Err(Error::dim("u", self.model.p(), u.len()));
        }
        let z = self
            .pending_z
            .take()
            .ok_or(Error::Contract("apply_input called before observe"))?;
        let w = self.noise.normal_vec(self.model.n(), self.model.sigma_w2);
        let mut next = &self.model.a * &self.x + &self.model.b * linalg::dvec(u);
        for (xi, wi) in next.iter_mut().zip(&w) {
            *xi += wi;
        }
        self.x = next;
        self.ws.extend_from_slice(&w);
        self.zs.extend_from_slice(&z);
        self.t += 1;
        Ok(())
    }

    /// Nature's y from the noise log:
    /// `b_t = z_t + C A^{t-1} x_1 + sum_{i<t} C A^{t-1-i} w_i`, for every completed step.
    pub fn nature_y_series(&self) -> Vec<f64> {
        let m = self.model.m();
        let mut xi = self.x1.clone();
        let mut out = Vec::with_capacity(self.t * m);
        for t in 1..=self.t {
            let (w, z) = self.noise_at(t);
            let cx = &self.model.c * &xi;
            out.extend(cx.iter().zip(z).map(|(a, b)| a + b));
            xi = &self.model.a * xi + linalg::dvec(w);
        }
        out
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            n: self.model.n(),
            x1: self.x1.as_slice().to_vec(),
            ws: self.ws.clone(),
            zs: self.zs.clone(),
            bs: self.nature_y_series(),
        }
    }
}

/// Noise realization and true Nature's y of a finished run.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub n: usize,
    pub x1: Vec<f64>,
    pub ws: Vec<f64>,
    pub zs: Vec<f64>,
    pub bs: Vec<f64>,
}

/// Per-step record of a run, indexed from `t = 1`.
#[derive(Clone, Debug)]
pub struct RunHistory {
    m: usize,
    p: usize,
    ys: Vec<f64>,
    us: Vec<f64>,
    costs: Vec<f64>,
    epochs: Vec<usize>,
    zero_y: Vec<f64>,
    zero_u: Vec<f64>,
    truth: Option<GroundTruth>,
}

impl RunHistory {
    pub fn new(m: usize, p: usize) -> Self {
        Self {
            m,
            p,
            ys: Vec::new(),
            us: Vec::new(),
            costs: Vec::new(),
            epochs: Vec::new(),
            zero_y: vec![0.0; m],
            zero_u: vec![0.0; p],
            truth: None,
        }
    }

    /// History built from raw input/output sequences (tests, offline data).
    pub fn from_io(m: usize, p: usize, ys: Vec<f64>, us: Vec<f64>) -> Result<Self> {
        if ys.len() % m.max(1) != 0 || us.len() % p.max(1) != 0 || ys.len() / m != us.len() / p {
            return Err(Error::dim(
                "history",
                "equal numbers of y and u steps",
                format!("{} y values, {} u values", ys.len(), us.len()),
            ));
        }
        let len = ys.len() / m;
        let mut h = Self::new(m, p);
        h.ys = ys;
        h.us = us;
        h.costs = vec![0.0; len];
        h.epochs = vec![0; len];
        Ok(h)
    }

    /// Steps `1..=t` without ground truth.
    pub fn prefix(&self, t: usize) -> RunHistory {
        let t = t.min(self.len());
        let mut h = Self::new(self.m, self.p);
        h.ys = self.ys[..t * self.m].to_vec();
        h.us = self.us[..t * self.p].to_vec();
        h.costs = self.costs[..t].to_vec();
        h.epochs = self.epochs[..t].to_vec();
        h
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn push(&mut self, y: &[f64], u: &[f64], cost: f64, epoch: usize) {
        debug_assert_eq!(y.len(), self.m);
        debug_assert_eq!(u.len(), self.p);
        self.ys.extend_from_slice(y);
        self.us.extend_from_slice(u);
        self.costs.push(cost);
        self.epochs.push(epoch);
    }

    /// `y_t`, zero for `t < 1`.
    pub fn y(&self, t: i64) -> &[f64] {
        if t < 1 {
            return &self.zero_y;
        }
        let t = t as usize;
        &self.ys[(t - 1) * self.m..t * self.m]
    }

    /// `u_t`, zero for `t < 1`.
    pub fn u(&self, t: i64) -> &[f64] {
        if t < 1 {
            return &self.zero_u;
        }
        let t = t as usize;
        &self.us[(t - 1) * self.p..t * self.p]
    }

    pub fn cost(&self, t: usize) -> f64 {
        self.costs[t - 1]
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn us(&self) -> &[f64] {
        &self.us
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    pub fn attach_truth(&mut self, env: &Environment) {
        self.truth = Some(env.ground_truth());
    }

    /// True Nature's y `b_t(G)`; requires attached ground truth.
    pub fn true_b(&self, t: i64) -> Result<&[f64]> {
        let truth = self
            .truth
            .as_ref()
            .ok_or(Error::MissingGroundTruth("nature's y"))?;
        if t < 1 {
            return Ok(&self.zero_y);
        }
        let t = t as usize;
        Ok(&truth.bs[(t - 1) * self.m..t * self.m])
    }

    /// CSV with header `t,epoch,y_*,u_*,cost` and, when `extended`, the
    /// ground-truth columns `w_*,z_*,b_*`.
    pub fn write_csv<W: Write>(&self, mut out: W, extended: bool) -> Result<()> {
        let truth = if extended {
            Some(
                self.truth
                    .as_ref()
                    .ok_or(Error::MissingGroundTruth("noise log for extended CSV"))?,
            )
        } else {
            None
        };
        let mut header: Vec<String> = vec!["t".into(), "epoch".into()];
        header.extend((0..self.m).map(|i| format!("y_{i}")));
        header.extend((0..self.p).map(|i| format!("u_{i}")));
        header.push("cost".into());
        if let Some(tr) = truth {
            header.extend((0..tr.n).map(|i| format!("w_{i}")));
            header.extend((0..self.m).map(|i| format!("z_{i}")));
            header.extend((0..self.m).map(|i| format!("b_{i}")));
        }
        writeln!(out, "{}", header.join(","))?;
        for t in 1..=self.len() {
            let mut row = format!("{},{}", t, self.epochs[t - 1]);
            for v in self.y(t as i64).iter().chain(self.u(t as i64)) {
                row.push(',');
                row.push_str(&fmt_f64(*v));
            }
            row.push(',');
            row.push_str(&fmt_f64(self.costs[t - 1]));
            if let Some(tr) = truth {
                let (n, m) = (tr.n, self.m);
                let vals = tr.ws[(t - 1) * n..t * n]
                    .iter()
                    .chain(&tr.zs[(t - 1) * m..t * m])
                    .chain(&tr.bs[(t - 1) * m..t * m]);
                for v in vals {
                    row.push(',');
                    row.push_str(&fmt_f64(*v));
                }
            }
            writeln!(out, "{row}")?;
        }
        Ok(())
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Quadratic,
}

/// `l(y, u) = y' Q y + u' R u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// Smallest eigenvalue of the Hessian `diag(2Q, 2R)`.
    pub alpha_lower: f64,
    /// Largest eigenvalue of the Hessian `diag(2Q, 2R)`.
    pub alpha_upper: f64,
}

impl LossSpec {
    /// Requires symmetric `Q >= 0` and `R > 0`. With a singular `Q` the loss
    /// is not strongly convex in `y` and `alpha_lower` is 0.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() {
            return Err(Error::dim("Q", "square", format!("{}x{}", q.nrows(), q.ncols())));
        }
        if !r.is_square() {
            return Err(Error::dim("R", "square", format!("{}x{}", r.nrows(), r.ncols())));
        }
        if (&q - q.transpose()).norm() > 1e-12 * (1.0 + q.norm()) {
            return Err(Error::arg("Q", "must be symmetric"));
        }
        if (&r - r.transpose()).norm() > 1e-12 * (1.0 + r.norm()) {
            return Err(Error::arg("R", "must be symmetric"));
        }
        let (q_lo, q_hi) = linalg::eigen_range_sym(&q);
        let (r_lo, r_hi) = linalg::eigen_range_sym(&r);
        if q_lo < -1e-12 {
            return Err(Error::arg("Q", format!("not PSD (min eigenvalue {q_lo})")));
        }
        if r_lo <= 0.0 {
            return Err(Error::arg("R", format!("not positive definite (min eigenvalue {r_lo})")));
        }
        let lo = if q.nrows() == 0 { r_lo } else { q_lo.min(r_lo) };
        let hi = if q.nrows() == 0 { r_hi } else { q_hi.max(r_hi) };
        Ok(Self {
            kind: LossKind::Quadratic,
            alpha_lower: 2.0 * lo.max(0.0),
            alpha_upper: 2.0 * hi,
            q,
            r,
        })
    }

    /// `Q = q I_m`, `R = r I_p`.
    pub fn scaled_identity(q: f64, r: f64, m: usize, p: usize) -> Result<Self> {
        Self::new(linalg::identity(m) * q, linalg::identity(p) * r)
    }

    pub fn m(&self) -> usize {
        self.q.nrows()
    }

    pub fn p(&self) -> usize {
        self.r.nrows()
    }

    /// Hessian of the stage loss in `(y, u)`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let (m, p) = (self.m(), self.p());
        let mut h = DMatrix::zeros(m + p, m + p);
        h.view_mut((0, 0), (m, m)).copy_from(&(&self.q * 2.0));
        h.view_mut((m, m), (p, p)).copy_from(&(&self.r * 2.0));
        h
    }

    /// Gradient of the stage loss with respect to `y` and `u`.
    pub fn gradient(&self, y: &[f64], u: &[f64], gy: &mut [f64], gu: &mut [f64]) {
        quad_grad(&self.q, y, gy);
        quad_grad(&self.r, u, gu);
    }
}

fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

fn quad_grad(a: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a[(i, j)] * x[j];
        }
        out[i] = 2.0 * row;
    }
}

pub fn quadratic_loss(spec: &LossSpec, y: &[f64], u: &[f64]) -> Result<f64> {
    if y.len() != spec.m() {
        return Err(Error::dim("y", spec.m(), y.len()));
    }
    if u.len() != spec.p() {
        return Err(Error::dim("u", spec.p(), u.len()));
    }
    Ok(quad_form(&spec.q, y) + quad_form(&spec.r, u))
}

/// Unchecked stage loss for hot loops; dimensions are the caller's contract.
pub(crate) fn stage_loss(spec: &LossSpec, y: &[f64], u: &[f64]) -> f64 {
    quad_form(&spec.q, y) + quad_form(&spec.r, u)
}

/// Nature's y computed two ways.
#[derive(Clone, Debug)]
pub struct NatureYPair {
    /// `y_t - sum_{i=1}^{t-1} G^[i] u_{t-i}`
    pub from_inputs: Vec<f64>,
    /// `z_t + C A^{t-1} x_1 + sum_{i=1}^{t-1} C A^{t-1-i} w_i`
    pub from_noise: Vec<f64>,
}

impl NatureYPair {
    pub fn max_abs_diff(&self) -> f64 {
        self.from_inputs
            .iter()
            .zip(&self.from_noise)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Both routes to the true Nature's y at step `t`. The input route subtracts
/// the convolution with every available block of `g` (pass at least `t`
/// blocks for the untruncated sum); the noise route needs attached ground truth.
pub fn true_nature_y(
    history: &RunHistory,
    model: &StateSpaceModel,
    g: &MarkovOperator,
    t: usize,
) -> Result<NatureYPair> {
    if t < 1 || t > history.len() {
        return Err(Error::arg("t", format!("step {t} outside 1..={}", history.len())));
    }
    let truth = history
        .truth()
        .ok_or(Error::MissingGroundTruth("noise log for the noise-based formula"))?;
    let m = history.m();

    let mut from_inputs = history.y(t as i64).to_vec();
    for i in 1..t.min(g.horizon()) {
        let gu = &g.blocks[i] * linalg::dvec(history.u((t - i) as i64));
        for (acc, v) in from_inputs.iter_mut().zip(gu.iter()) {
            *acc -= v;
        }
    }

    // Powers of A applied explicitly, independent of the environment's recursion.
    let n = truth.n;
    let mut from_noise = truth.zs[(t - 1) * m..t * m].to_vec();
    let mut a_pow = linalg::identity(n);
    let mut terms: Vec<DVector<f64>> = Vec::with_capacity(t);
    // k = t-1-i runs 0..t-2 for the w terms, k = t-1 for x_1
    for k in 0..t {
        let src = if k + 1 == t {
            linalg::dvec(&truth.x1)
        } else {
            let i = t - 1 - k;
            linalg::dvec(&truth.ws[(i - 1) * n..i * n])
        };
        terms.push(&model.c * &a_pow * src);
        a_pow = &model.a * a_pow;
    }
    for term in terms {
        for (acc, v) in from_noise.iter_mut().zip(term.iter()) {
            *acc += v;
        }
    }
    Ok(NatureYPair {
        from_inputs,
        from_noise,
    })
}

/// A control law driven step by step by [`rollout`]. It sees the past
/// outputs and inputs recorded in `history` (steps `1..t`) and the fresh
/// output `y_t`; it never sees noises or the latent state.
pub trait Controller {
    fn name(&self) -> &str;

    fn act(&mut self, history: &RunHistory, t: usize, y: &[f64]) -> Result<Vec<f64>>;

    /// Epoch label recorded with each step.
    fn epoch(&self) -> usize {
        0
    }

    /// Diagnostics gathered during the run, if the controller keeps any.
    fn report(&self) -> Option<serde_json::Value> {
        None
    }
}

/// Adapter turning a closure into a [`Controller`].
pub struct FnController<F> {
    name: String,
    f: F,
}

impl<F> FnController<F>
where
    F: FnMut(&RunHistory, usize, &[f64]) -> Vec<f64>,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Controller for FnController<F>
where
    F: FnMut(&RunHistory, usize, &[f64]) -> Vec<f64>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, history: &RunHistory, t: usize, y: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(history, t, y))
    }
}

/// Continues a run for `steps` more steps, appending to `history`.
pub fn rollout_into(
    env: &mut Environment,
    controller: &mut dyn Controller,
    history: &mut RunHistory,
    steps: usize,
    loss: &LossSpec,
) -> Result<()> {
    let p = env.model().p();
    for _ in 0..steps {
        let t = env.t() + 1;
        let y = env.observe()?;
        let u = controller.act(history, t, &y)?;
        if u.len() != p {
            return Err(Error::ControllerOutput {
                step: t,
                expected: p,
                got: u.len(),
            });
        }
        env.apply_input(&u)?;
        let cost = stage_loss(loss, &y, &u);
        history.push(&y, &u, cost, controller.epoch());
    }
    history.attach_truth(env);
    Ok(())
}

/// Runs `controller` for `steps` steps from the environment's current state.
pub fn rollout(
    env: &mut Environment,
    controller: &mut dyn Controller,
    steps: usize,
    loss: &LossSpec,
) -> Result<RunHistory> {
    let model = env.model();
    if loss.m() != model.m() || loss.p() != model.p() {
        return Err(Error::dim(
            "loss",
            format!("Q {0}x{0}, R {1}x{1}", model.m(), model.p()),
            format!("Q {0}x{0}, R {1}x{1}", loss.m(), loss.p()),
        ));
    }
    let mut history = RunHistory::new(model.m(), model.p());
    rollout_into(env, controller, &mut history, steps, loss)?;
    Ok(history)
}
