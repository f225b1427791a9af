//! Adaptive online control in doubling epochs, its baselines and regret.
//!
//! After a Gaussian-input warm-up, each epoch re-identifies the Markov
//! operator from all data gathered so far, recomputes the Nature's y
//! estimates with it, and keeps running online gradient descent on the
//! counterfactual loss of a DFC policy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dfc::{
    dfc_input, ldc_closed_loop, ogd_rate, ogd_step_in_place, Projection, project_exact, project_policy,
    CounterfactualWorkspace, DfcPolicy, LdcPolicy, NatureYBuffer,
};
use crate::linalg::{self, spectral_radius};
use crate::rng::{GaussianStream, StreamKey};
use crate::simulator::{rollout, rollout_into, Controller, Environment, LossSpec, RunHistory};
use crate::system_model::{
    gy_parameter, impulse_blocks, markov_parameters, predictor_form, riccati_fixed_point,
    MarkovOperator, StateSpaceModel,
};
use crate::sysid::{
    default_split, estimation_error, ho_kalman_sysid, reconstruct_markov, ArxAccumulator,
    DEFAULT_LAMBDA,
};
use crate::{Error, Result};

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_true() -> bool {
    true
}

fn default_sigma_u2() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptOnConfig {
    #[serde(rename = "T")]
    pub t_total: usize,
    #[serde(rename = "T_w")]
    pub t_w: usize,
    /// First adaptive epoch length; the warm-up length when absent.
    #[serde(rename = "T_base", default)]
    pub t_base: Option<usize>,
    #[serde(default = "default_sigma_u2")]
    pub sigma_u2: f64,
    #[serde(rename = "He")]
    pub he: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "Hprime")]
    pub hprime: usize,
    /// Model order assumed by the realization step.
    pub n: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(rename = "kappa_M")]
    pub kappa_m: f64,
    /// Strong-convexity scalar in the step size; the loss's `alpha_lower` when absent.
    #[serde(default)]
    pub alpha_eff: Option<f64>,
    #[serde(default)]
    pub dither_var: f64,
    /// Feasible-set map applied after each OGD step.
    #[serde(default)]
    pub projection: Projection,
    #[serde(default)]
    pub seed: u64,
    /// Re-identify at every epoch start; false only identifies once after warm-up.
    #[serde(default = "default_true")]
    pub epoch_updates: bool,
}

impl AdaptOnConfig {
    pub fn t_base(&self) -> usize {
        self.t_base.unwrap_or(self.t_w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: String| Err(Error::Config(format!("{name}: {reason}")));
        if self.he == 0 || self.h == 0 || self.hprime == 0 || self.n == 0 {
            return bad("horizons", "He, H, Hprime and n must be positive".into());
        }
        if self.t_w < self.he {
            return bad("T_w", format!("{} must be at least He = {}", self.t_w, self.he));
        }
        if self.t_w > self.t_total {
            return bad("T_w", format!("{} exceeds T = {}", self.t_w, self.t_total));
        }
        if self.hprime < 3 * self.h {
            return bad("Hprime", format!("{} must be at least 3 H = {}", self.hprime, 3 * self.h));
        }
        let (d1, d2) = default_split(self.he);
        if d2 < self.n || d1 < self.n {
            return bad("He", format!("{} too short for order n = {}", self.he, self.n));
        }
        if self.t_base() == 0 {
            return bad("T_base", "must be positive".into());
        }
        if !(self.lambda > 0.0) {
            return bad("lambda", "must be positive".into());
        }
        if !(self.kappa_m >= 0.0) || !self.kappa_m.is_finite() {
            return bad("kappa_M", "must be finite and nonnegative".into());
        }
        if !(self.sigma_u2 >= 0.0) || !(self.dither_var >= 0.0) {
            return bad("variances", "sigma_u2 and dither_var must be nonnegative".into());
        }
        if let Some(a) = self.alpha_eff {
            if !(a > 0.0) {
                return bad("alpha_eff", "must be positive".into());
            }
        }
        Ok(())
    }

    fn alpha(&self, loss: &LossSpec) -> Result<f64> {
        let a = self.alpha_eff.unwrap_or(loss.alpha_lower);
        if a > 0.0 {
            Ok(a)
        } else {
            Err(Error::Config(
                "alpha_eff: loss is not strongly convex; set alpha_eff explicitly".into(),
            ))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Epoch {
    pub index: usize,
    pub start: usize,
    pub len: usize,
}

impl Epoch {
    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EpochSchedule {
    pub epochs: Vec<Epoch>,
}

impl EpochSchedule {
    /// Epoch containing step `t`, or `None` during warm-up.
    pub fn epoch_of(&self, t: usize) -> Option<&Epoch> {
        let k = self.epochs.partition_point(|e| e.start <= t);
        self.epochs[..k].last().filter(|e| t <= e.end())
    }

    pub fn single(t_w: usize, t_total: usize) -> Self {
        Self {
            epochs: vec![Epoch {
                index: 1,
                start: t_w + 1,
                len: t_total - t_w,
            }],
        }
    }
}

/// Epoch `i` starts at `t_i` with `t_1 = T_w + 1` and lasts `2^{i-1} T_base`,
/// the last one cut at `T`.
pub fn epoch_schedule(t_base: usize, t_w: usize, t_total: usize) -> Result<EpochSchedule> {
    if t_total <= t_w {
        return Err(Error::arg("T", format!("{t_total} must exceed T_w = {t_w}")));
    }
    if t_base == 0 {
        return Err(Error::arg("T_base", "must be positive"));
    }
    let mut epochs = Vec::new();
    let mut start = t_w + 1;
    let mut len = t_base;
    let mut index = 1;
    while start <= t_total {
        let take = len.min(t_total - start + 1);
        epochs.push(Epoch { index, start, len: take });
        start += take;
        len = len.saturating_mul(2);
        index += 1;
    }
    Ok(EpochSchedule { epochs })
}

/// i.i.d. `N(0, sigma2 I)` inputs.
pub struct GaussianInputController {
    stream: GaussianStream,
    sigma2: f64,
    p: usize,
}

impl GaussianInputController {
    pub fn new(seed: u64, sigma2: f64, p: usize) -> Self {
        Self {
            stream: GaussianStream::new(seed, StreamKey::ControlInput),
            sigma2,
            p,
        }
    }
}

impl Controller for GaussianInputController {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn act(&mut self, _history: &RunHistory, _t: usize, _y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.stream.normal_vec(self.p, self.sigma2))
    }
}

pub struct ZeroController {
    pub p: usize,
}

impl Controller for ZeroController {
    fn name(&self) -> &str {
        "zero"
    }

    fn act(&mut self, _history: &RunHistory, _t: usize, _y: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.p])
    }
}

/// `T_w` steps of Gaussian inputs from a fresh environment.
pub fn run_warmup(env: &mut Environment, cfg: &AdaptOnConfig, loss: &LossSpec) -> Result<RunHistory> {
    if env.t() != 0 {
        return Err(Error::Contract("warm-up needs a fresh environment"));
    }
    let mut ctrl = GaussianInputController::new(cfg.seed, cfg.sigma_u2, env.model().p());
    rollout(env, &mut ctrl, cfg.t_w, loss)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub index: usize,
    pub start: usize,
    pub len: usize,
    /// Last step whose data entered the estimate.
    pub data_through: usize,
    pub sample_count: usize,
    pub sysid_ok: bool,
    pub failure: Option<String>,
    pub unstable_estimate: bool,
    pub hankel_sv: Vec<f64>,
    /// Error of the operator used during this epoch, `sum_i ||Ghat^[i] - G^[i]||_2`.
    pub markov_err: Option<f64>,
    pub gy_fro_err: Option<f64>,
    /// `sum_l ||M^[l]||_2` at the epoch start.
    pub policy_norm_sum: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicyTracePoint {
    pub t: usize,
    pub norm_sum: f64,
}

/// The adaptive controller. Epoch re-identification is skipped after the
/// first epoch when `epoch_updates` is off.
pub struct AdaptOnController {
    cfg: AdaptOnConfig,
    loss: LossSpec,
    schedule: EpochSchedule,
    alpha: f64,
    stream: GaussianStream,
    arx: ArxAccumulator,
    g_hat: MarkovOperator,
    buf: NatureYBuffer,
    policy: DfcPolicy,
    ws: CounterfactualWorkspace,
    grad: Vec<f64>,
    current_epoch: usize,
    next_epoch: usize,
    truth: Option<(MarkovOperator, DMatrix<f64>)>,
    records: Vec<EpochRecord>,
    trace: Vec<PolicyTracePoint>,
    name: String,
}

impl AdaptOnController {
    /// `truth`, when given, is only used to log estimation errors.
    pub fn new(cfg: &AdaptOnConfig, loss: &LossSpec, truth: Option<&StateSpaceModel>) -> Result<Self> {
        cfg.validate()?;
        let (m, p) = (loss.m(), loss.p());
        let schedule = if cfg.epoch_updates {
            epoch_schedule(cfg.t_base(), cfg.t_w, cfg.t_total)?
        } else {
            EpochSchedule::single(cfg.t_w, cfg.t_total)
        };
        let alpha = cfg.alpha(loss)?;
        let g_hat = MarkovOperator::zeros(cfg.h + 1, m, p);
        let truth = match truth {
            Some(model) => {
                let g = markov_parameters(model, cfg.h + 1)?;
                let gy = gy_parameter(&predictor_form(model)?, cfg.he)?.mat;
                Some((g, gy))
            }
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            loss: loss.clone(),
            schedule,
            alpha,
            stream: GaussianStream::new(cfg.seed, StreamKey::ControlInput),
            arx: ArxAccumulator::new(cfg.he, m, p),
            buf: NatureYBuffer::new(g_hat.clone()),
            ws: CounterfactualWorkspace::new(&g_hat, cfg.hprime, p, m),
            g_hat,
            policy: DfcPolicy::zeros(cfg.hprime, p, m, cfg.kappa_m),
            grad: vec![0.0; cfg.hprime * p * m],
            current_epoch: 0,
            next_epoch: 0,
            truth,
            records: Vec::new(),
            trace: Vec::new(),
            name: if cfg.epoch_updates { "adapton".into() } else { "explore_then_commit".into() },
        })
    }

    pub fn schedule(&self) -> &EpochSchedule {
        &self.schedule
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn policy(&self) -> &DfcPolicy {
        &self.policy
    }

    pub fn operator(&self) -> &MarkovOperator {
        &self.g_hat
    }

    fn start_epoch(&mut self, history: &RunHistory, t: usize) {
        let epoch = self.schedule.epochs[self.next_epoch];
        self.next_epoch += 1;
        self.current_epoch = epoch.index;
        let (m, p) = (history.m(), history.p());

        self.arx.extend_to(history, t - 1);
        let mut record = EpochRecord {
            index: epoch.index,
            start: epoch.start,
            len: epoch.len,
            data_through: t - 1,
            sample_count: self.arx.sample_count(),
            sysid_ok: true,
            failure: None,
            unstable_estimate: false,
            hankel_sv: Vec::new(),
            markov_err: None,
            gy_fro_err: None,
            policy_norm_sum: self.policy.norm_sum(),
        };
        let (d1, d2) = default_split(self.cfg.he);
        let attempt = self.arx.solve(self.cfg.lambda, m, p).and_then(|est| {
            if let Some((_, gy)) = &self.truth {
                record.gy_fro_err = Some((&est.gy.mat - gy).norm());
            }
            ho_kalman_sysid(&est.gy, self.cfg.n, d1, d2)
        });
        match attempt {
            Ok(rs) => {
                record.hankel_sv = rs.hankel_sv.clone();
                self.g_hat = reconstruct_markov(&rs, self.cfg.h + 1);
                record.unstable_estimate = self.g_hat.unstable_source;
            }
            Err(e) => {
                record.sysid_ok = false;
                if let Error::RankDeficient { hankel_sv, .. } = &e {
                    record.hankel_sv = hankel_sv.clone();
                }
                record.failure = Some(e.to_string());
            }
        }
        if let Some((g, _)) = &self.truth {
            record.markov_err = estimation_error(&self.g_hat, g).ok().map(|e| e.spectral_sum);
        }
        self.buf.recompute(history, self.g_hat.clone(), t - 1);
        self.ws = CounterfactualWorkspace::new(&self.g_hat, self.cfg.hprime, p, m);
        self.trace.push(PolicyTracePoint {
            t: t - 1,
            norm_sum: record.policy_norm_sum,
        });
        self.records.push(record);
    }
}

impl Controller for AdaptOnController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, history: &RunHistory, t: usize, y: &[f64]) -> Result<Vec<f64>> {
        if history.len() + 1 != t {
            return Err(Error::Contract("AdaptOn must be driven from step 1 without gaps"));
        }
        let p = history.p();
        if t <= self.cfg.t_w {
            return Ok(self.stream.normal_vec(p, self.cfg.sigma_u2));
        }
        if self.next_epoch < self.schedule.epochs.len() && self.schedule.epochs[self.next_epoch].start == t {
            let first = self.next_epoch == 0;
            if first || self.cfg.epoch_updates {
                self.start_epoch(history, t);
            }
        }
        self.buf.push_output(history, y);
        let mut u = dfc_input(&self.policy, &self.buf, t)?;
        self.ws
            .eval(self.policy.params(), &self.buf, t as i64, &self.loss, Some(&mut self.grad));
        ogd_step_in_place(&mut self.policy, &self.grad, ogd_rate(self.alpha, t), self.cfg.projection);
        if self.cfg.dither_var > 0.0 {
            for (ui, d) in u.iter_mut().zip(self.stream.normal_vec(p, self.cfg.dither_var)) {
                *ui += d;
            }
        }
        if t == self.cfg.t_total {
            self.trace.push(PolicyTracePoint {
                t,
                norm_sum: self.policy.norm_sum(),
            });
        }
        Ok(u)
    }

    fn epoch(&self) -> usize {
        self.current_epoch
    }

    fn report(&self) -> Option<serde_json::Value> {
        serde_json::to_value(serde_json::json!({
            "epochs": self.records,
            "policy_trace": self.trace,
        }))
        .ok()
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOnRun {
    pub history: RunHistory,
    pub epochs: Vec<EpochRecord>,
    pub policy_trace: Vec<PolicyTracePoint>,
    pub final_policy: DfcPolicy,
    pub final_operator: MarkovOperator,
}

fn drive(cfg: &AdaptOnConfig, env: &mut Environment, loss: &LossSpec) -> Result<AdaptOnRun> {
    if env.t() != 0 {
        return Err(Error::Contract("AdaptOn needs a fresh environment"));
    }
    let model = env.model().clone();
    let mut ctrl = AdaptOnController::new(cfg, loss, Some(&model))?;
    let mut history = RunHistory::new(model.m(), model.p());
    rollout_into(env, &mut ctrl, &mut history, cfg.t_total, loss)?;
    Ok(AdaptOnRun {
        history,
        epochs: ctrl.records,
        policy_trace: ctrl.trace,
        final_policy: ctrl.policy,
        final_operator: ctrl.g_hat,
    })
}

pub fn run_adapton(cfg: &AdaptOnConfig, env: &mut Environment, loss: &LossSpec) -> Result<AdaptOnRun> {
    drive(cfg, env, loss)
}

/// Warm-up, one identification, then OGD with that operator for the rest of the run.
pub fn run_explore_then_commit(cfg: &AdaptOnConfig, env: &mut Environment, loss: &LossSpec) -> Result<AdaptOnRun> {
    let mut cfg = cfg.clone();
    cfg.epoch_updates = false;
    drive(&cfg, env, loss)
}

#[derive(Clone, Debug)]
pub struct LqgDesign {
    pub ldc: LdcPolicy,
    /// State-feedback gain `K = (R + B'PB)^{-1} B'PA`.
    pub k: DMatrix<f64>,
    /// Filter gain `L = Sigma C'(C Sigma C' + sigma_z2 I)^{-1}`.
    pub l: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub control_residual: f64,
    pub filter_residual: f64,
    pub closed_loop_rho: f64,
}

/// Steady-state LQG: certainty-equivalent feedback `u_t = -K xhat_{t|t}`
/// on the filtered estimate, written as an LDC on the predicted state:
/// `A_pi = (A - BK)(I - LC)`, `B_pi = (A - BK) L`, `C_pi = -K(I - LC)`, `D_pi = -KL`.
pub fn lqg_design(model: &StateSpaceModel, loss: &LossSpec) -> Result<LqgDesign> {
    model.check_dims()?;
    if loss.m() != model.m() || loss.p() != model.p() {
        return Err(Error::dim("loss", format!("m={}, p={}", model.m(), model.p()), format!("m={}, p={}", loss.m(), loss.p())));
    }
    let (a, b, c) = (&model.a, &model.b, &model.c);
    let n = model.n();
    let cqc = c.transpose() * &loss.q * c;
    let p = riccati_fixed_point(&a.transpose(), &b.transpose(), &cqc, &loss.r, cqc.clone(), 1e-11, 200_000)?;
    let control_residual = (crate::system_model::riccati_rhs(&a.transpose(), &b.transpose(), &cqc, &loss.r, &p)? - &p).norm();
    let btp = b.transpose() * &p;
    let k = (&loss.r + &btp * b)
        .cholesky()
        .ok_or(Error::SingularInnovation)?
        .solve(&(&btp * a));

    let pf = predictor_form(model)?;
    let sigma = pf.sigma.clone();
    let filter_residual = crate::system_model::dare_residual(model, &sigma)?;
    let innov = c * &sigma * c.transpose() + linalg::identity(model.m()) * model.sigma_z2;
    let l = innov
        .cholesky()
        .ok_or(Error::SingularInnovation)?
        .solve(&(c * &sigma))
        .transpose();

    let abk = a - b * &k;
    let ilc = linalg::identity(n) - &l * c;
    let mut ldc = LdcPolicy::new(&abk * &ilc, &abk * &l, -&k * &ilc, -&k * &l)?;
    let closed_loop_rho = ldc_closed_loop(&ldc, model)?.rho;
    ldc.closed_loop_rho = Some(closed_loop_rho);
    if closed_loop_rho >= 1.0 {
        return Err(Error::DestabilizingLdc { rho: closed_loop_rho });
    }
    Ok(LqgDesign {
        ldc,
        k,
        l,
        p,
        sigma,
        control_residual,
        filter_residual,
        closed_loop_rho,
    })
}

pub fn lqg_optimal_controller(model: &StateSpaceModel, loss: &LossSpec) -> Result<LdcPolicy> {
    Ok(lqg_design(model, loss)?.ldc)
}

/// Markov operator long enough that the dropped tail is below `1e-13`
/// relative to the leading blocks.
pub fn truncated_truth(model: &StateSpaceModel) -> Result<MarkovOperator> {
    let rho = spectral_radius(&model.a);
    if rho >= 1.0 {
        return Err(Error::arg("A", format!("spectral radius {rho} is not below 1")));
    }
    let base = if rho > 0.0 {
        ((1e-13f64).ln() / rho.ln()).ceil() as usize
    } else {
        1
    };
    let count = (base + 2 * model.n() + 2).clamp(2, 4000);
    let mut g = MarkovOperator::from_blocks(impulse_blocks(&model.a, &model.b, &model.c, count));
    g.unstable_source = false;
    Ok(g)
}

/// `theta' P theta + 2 q' theta + c` summed over steps; `theta` in the flat
/// policy layout.
#[derive(Clone, Debug)]
pub struct HindsightQuadratic {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub c: f64,
    pub steps: usize,
    pub hprime: usize,
    pub pdim: usize,
    pub mdim: usize,
}

impl HindsightQuadratic {
    pub fn value(&self, theta: &[f64]) -> f64 {
        let th = linalg::dvec(theta);
        (th.transpose() * &self.p * &th)[(0, 0)] + 2.0 * self.q.dot(&th) + self.c
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        (&self.p * theta + &self.q) * 2.0
    }

    /// Minimizer over `sum_l ||M^[l]||_2 <= kappa` and its total cost.
    ///
    /// The unconstrained minimizer is used when feasible; otherwise projected
    /// gradient descent with the exact projection, from the retracted
    /// unconstrained point, until the gradient mapping of the per-step
    /// objective is within `1e-6`.
    pub fn solve(&self, kappa: f64) -> Result<(DfcPolicy, f64)> {
        let d = self.q.len();
        let zero = DfcPolicy::zeros(self.hprime, self.pdim, self.mdim, kappa);
        if self.steps == 0 || (self.p.norm() == 0.0 && self.q.norm() == 0.0) {
            return Ok((zero, self.c));
        }
        let scale = 1.0 / self.steps as f64;
        let (start, exact) = match linalg::symmetrize(&self.p).cholesky() {
            Some(ch) => (-ch.solve(&self.q), true),
            None => (DVector::zeros(d), false),
        };
        let candidate = DfcPolicy::from_flat(self.hprime, self.pdim, self.mdim, kappa, start.iter().copied().collect())?;
        if exact && candidate.norm_sum() <= kappa {
            let v = self.value(candidate.params());
            return Ok((candidate, v));
        }
        let (_, lmax) = linalg::eigen_range_sym(&self.p);
        let step = 1.0 / (2.0 * lmax * scale).max(f64::MIN_POSITIVE);
        let mut pol = project_policy(&candidate);
        let max_iter = 200_000;
        let mut gm = f64::INFINITY;
        for _ in 0..max_iter {
            let th = linalg::dvec(pol.params());
            let g = self.gradient(&th) * scale;
            let trial = DfcPolicy::from_flat(
                self.hprime,
                self.pdim,
                self.mdim,
                kappa,
                (&th - &g * step).iter().copied().collect(),
            )?;
            let next = project_exact(&trial);
            let diff: f64 = next
                .params()
                .iter()
                .zip(pol.params())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            gm = diff / step;
            pol = next;
            if gm <= 1e-6 {
                let v = self.value(pol.params());
                return Ok((pol, v));
            }
        }
        Err(Error::NoConvergence {
            grad_norm: gm,
            iterations: max_iter,
        })
    }
}

/// Streams the true Nature's y and accumulates the hindsight objective of
/// every DFC policy. `y^M_t = b_t + sum_l K_{t-l} theta_l` with
/// `K_s[i, r m + c] = sum_{j >= 1} G^[j]_{ir} b_{s-j, c}`, and
/// `u^M_t = sum_l M^[l] b_{t-l}`.
#[derive(Clone, Debug)]
pub struct HindsightAccumulator {
    hprime: usize,
    m: usize,
    p: usize,
    g_flat: Vec<f64>,
    blocks: usize,
    q_loss: DMatrix<f64>,
    r_loss: DMatrix<f64>,
    bs: Vec<f64>,
    /// Ring of the last `H'` feature matrices `K_s`, each `m x pm` row-major.
    k_ring: Vec<f64>,
    pmat: Vec<f64>,
    qvec: Vec<f64>,
    c: f64,
    steps: usize,
    jac: Vec<f64>,
    qjac: Vec<f64>,
}

impl HindsightAccumulator {
    pub fn new(truth: &MarkovOperator, loss: &LossSpec, hprime: usize) -> Self {
        let (m, p) = (truth.m(), truth.p());
        let pm = p * m;
        let d = hprime * pm;
        let mut g_flat = Vec::with_capacity(truth.horizon() * m * p);
        for b in &truth.blocks {
            for i in 0..m {
                for r in 0..p {
                    g_flat.push(b[(i, r)]);
                }
            }
        }
        Self {
            hprime,
            m,
            p,
            g_flat,
            blocks: truth.horizon(),
            q_loss: loss.q.clone(),
            r_loss: loss.r.clone(),
            bs: Vec::new(),
            k_ring: vec![0.0; hprime * m * pm],
            pmat: vec![0.0; d * d],
            qvec: vec![0.0; d],
            c: 0.0,
            steps: 0,
            jac: vec![0.0; m * d],
            qjac: vec![0.0; m * d],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn b(&self, s: i64) -> Option<&[f64]> {
        if s < 1 || s as usize > self.steps {
            None
        } else {
            let s = s as usize;
            Some(&self.bs[(s - 1) * self.m..s * self.m])
        }
    }

    pub fn push(&mut self, b_t: &[f64]) {
        let (m, p, hp) = (self.m, self.p, self.hprime);
        let pm = p * m;
        let d = hp * pm;
        self.bs.extend_from_slice(b_t);
        self.steps += 1;
        let t = self.steps as i64;

        // K_t into the ring slot for t
        let slot = (self.steps - 1) % hp;
        let mut k_t = vec![0.0; m * pm];
        for j in 1..self.blocks {
            let Some(b) = self.b(t - j as i64) else { break };
            let g = &self.g_flat[j * m * p..(j + 1) * m * p];
            for i in 0..m {
                for r in 0..p {
                    let gir = g[i * p + r];
                    if gir == 0.0 {
                        continue;
                    }
                    let row = &mut k_t[i * pm + r * m..i * pm + (r + 1) * m];
                    for c in 0..m {
                        row[c] += gir * b[c];
                    }
                }
            }
        }
        self.k_ring[slot * m * pm..(slot + 1) * m * pm].copy_from_slice(&k_t);

        // J_t = [K_t, K_{t-1}, ..., K_{t-H'+1}]
        self.jac.iter_mut().for_each(|v| *v = 0.0);
        for l in 0..hp {
            if (l as i64) >= t {
                break;
            }
            let s = (self.steps - 1 - l) % hp;
            let k = &self.k_ring[s * m * pm..(s + 1) * m * pm];
            for i in 0..m {
                self.jac[i * d + l * pm..i * d + (l + 1) * pm].copy_from_slice(&k[i * pm..(i + 1) * pm]);
            }
        }
        for i in 0..m {
            for a in 0..d {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += self.q_loss[(i, k)] * self.jac[k * d + a];
                }
                self.qjac[i * d + a] = acc;
            }
        }
        for i in 0..m {
            let jr = &self.jac[i * d..(i + 1) * d];
            let qr = &self.qjac[i * d..(i + 1) * d];
            for a in 0..d {
                let ja = jr[a];
                if ja == 0.0 {
                    continue;
                }
                let prow = &mut self.pmat[a * d..(a + 1) * d];
                for bidx in a..d {
                    prow[bidx] += ja * qr[bidx];
                }
            }
            for a in 0..d {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += self.q_loss[(i, k)] * b_t[k];
                }
                self.qvec[a] += jr[a] * acc;
            }
        }
        for i in 0..m {
            for k in 0..m {
                self.c += b_t[i] * self.q_loss[(i, k)] * b_t[k];
            }
        }

        // input part: U_t[r, l pm + r m + c] = b_{t-l}[c]
        let bl: Vec<Option<Vec<f64>>> = (0..hp).map(|l| self.b(t - l as i64).map(|b| b.to_vec())).collect();
        for l in 0..hp {
            let Some(b1) = &bl[l] else { continue };
            for l2 in l..hp {
                let Some(b2) = &bl[l2] else { continue };
                for r in 0..p {
                    for r2 in 0..p {
                        let rr = self.r_loss[(r, r2)];
                        if rr == 0.0 {
                            continue;
                        }
                        for c in 0..m {
                            let a = l * pm + r * m + c;
                            let x = b1[c] * rr;
                            for c2 in 0..m {
                                let bidx = l2 * pm + r2 * m + c2;
                                if bidx >= a {
                                    self.pmat[a * d + bidx] += x * b2[c2];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn snapshot(&self) -> HindsightQuadratic {
        let d = self.qvec.len();
        let p = DMatrix::from_fn(d, d, |i, j| {
            if i <= j {
                self.pmat[i * d + j]
            } else {
                self.pmat[j * d + i]
            }
        });
        HindsightQuadratic {
            p,
            q: DVector::from_column_slice(&self.qvec),
            c: self.c,
            steps: self.steps,
            hprime: self.hprime,
            pdim: self.p,
            mdim: self.m,
        }
    }
}

/// Per-step costs of a fixed DFC policy driven by the true Nature's y,
/// by direct simulation of `u^M` and `y^M`.
pub fn dfc_costs_on_truth(bs: &[f64], truth: &MarkovOperator, policy: &DfcPolicy, loss: &LossSpec) -> Vec<f64> {
    let (m, p) = (truth.m(), truth.p());
    let steps = bs.len() / m;
    let b = |s: i64| -> Option<&[f64]> {
        (s >= 1 && s as usize <= steps).then(|| &bs[(s as usize - 1) * m..s as usize * m])
    };
    let mut us = vec![0.0; steps * p];
    let mut costs = Vec::with_capacity(steps);
    for t in 1..=steps {
        let ti = t as i64;
        let mut u = vec![0.0; p];
        for l in 0..policy.hprime() {
            let Some(bv) = b(ti - l as i64) else { break };
            let blk = policy.block_slice(l);
            for r in 0..p {
                for c in 0..m {
                    u[r] += blk[r * m + c] * bv[c];
                }
            }
        }
        us[(t - 1) * p..t * p].copy_from_slice(&u);
        let mut y = b(ti).expect("in range").to_vec();
        for j in 1..truth.horizon().min(t) {
            let uj = &us[(t - 1 - j) * p..(t - j) * p];
            let g = &truth.blocks[j];
            for i in 0..m {
                for r in 0..p {
                    y[i] += g[(i, r)] * uj[r];
                }
            }
        }
        costs.push(crate::simulator::stage_loss(loss, &y, &u));
    }
    costs
}

/// Best fixed DFC policy over the feasible set for the realized true Nature's y.
pub fn best_dfc_in_hindsight(
    history: &RunHistory,
    true_g: &MarkovOperator,
    loss: &LossSpec,
    kappa_m: f64,
    hprime: usize,
) -> Result<(DfcPolicy, f64)> {
    let truth = history
        .truth()
        .ok_or(Error::MissingGroundTruth("true Nature's y for the hindsight comparator"))?;
    let mut acc = HindsightAccumulator::new(true_g, loss, hprime);
    for b in truth.bs.chunks(history.m()) {
        acc.push(b);
    }
    acc.snapshot().solve(kappa_m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparatorKind {
    BestDfcHindsight,
    LqgOptimal,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegretRecord {
    pub kind: ComparatorKind,
    pub agent: Vec<f64>,
    pub comparator: Vec<f64>,
    /// `R(t)` for `t = 1 ..`; `R(0) = 0` is implicit.
    pub cumulative: Vec<f64>,
}

impl RegretRecord {
    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// `R(t)`, with `R(0) = 0`.
    pub fn at(&self, t: usize) -> f64 {
        if t == 0 { 0.0 } else { self.cumulative[t - 1] }
    }
}

pub fn compute_regret(agent: &[f64], comparator: &[f64], kind: ComparatorKind) -> Result<RegretRecord> {
    if agent.len() != comparator.len() {
        return Err(Error::dim("comparator costs", agent.len(), comparator.len()));
    }
    let mut acc = 0.0;
    let cumulative = agent
        .iter()
        .zip(comparator)
        .map(|(a, c)| {
            acc += a - c;
            acc
        })
        .collect();
    Ok(RegretRecord {
        kind,
        agent: agent.to_vec(),
        comparator: comparator.to_vec(),
        cumulative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::InitMode;

    #[test]
    fn schedule_doubling() {
        let s = epoch_schedule(100, 100, 800).unwrap();
        let got: Vec<(usize, usize)> = s.epochs.iter().map(|e| (e.start, e.len)).collect();
        assert_eq!(got, vec![(101, 100), (201, 200), (401, 400)]);
        assert_eq!(s.epoch_of(100), None);
        assert_eq!(s.epoch_of(201).unwrap().index, 2);
        assert_eq!(s.epoch_of(800).unwrap().index, 3);
    }

    #[test]
    fn schedule_truncated() {
        let s = epoch_schedule(100, 100, 150).unwrap();
        assert_eq!(s.epochs, vec![Epoch { index: 1, start: 101, len: 50 }]);
        assert!(epoch_schedule(100, 100, 100).is_err());
    }

    #[test]
    fn schedule_epoch_count() {
        // T = 2^k T_base with T_w = T_base covers 2^k - 1 base units in k epochs
        for k in 1..8 {
            let s = epoch_schedule(50, 50, 50 << k).unwrap();
            assert_eq!(s.epochs.len(), k);
        }
    }

    #[test]
    fn regret_basic() {
        let r = compute_regret(&[2.0; 4], &[1.0; 4], ComparatorKind::LqgOptimal).unwrap();
        assert_eq!(r.cumulative, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.at(0), 0.0);
        assert!(compute_regret(&[1.0], &[], ComparatorKind::LqgOptimal).is_err());
    }

    #[test]
    fn lqg_scalar_gain() {
        let model = StateSpaceModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0);
        let loss = LossSpec::scaled_identity(1.0, 1.0, 1, 1).unwrap();
        let d = lqg_design(&model, &loss).unwrap();
        assert!((d.p[(0, 0)] - 1.1327822185).abs() < 1e-8);
        assert!((d.k[(0, 0)] - 0.2655644371).abs() < 1e-8);
        assert!(d.control_residual <= 1e-8 && d.filter_residual <= 1e-8);
        assert!(d.closed_loop_rho < 1.0);
    }

    #[test]
    fn lqg_zero_state_cost_gives_zero_gain() {
        let model = StateSpaceModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0);
        let loss = LossSpec::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let d = lqg_design(&model, &loss).unwrap();
        assert_eq!(d.k[(0, 0)], 0.0);
        assert_eq!(d.ldc.d_pi[(0, 0)], 0.0);
    }

    #[test]
    fn hindsight_zero_noise_is_zero_policy() {
        let model = StateSpaceModel::scalar(0.5, 1.0, 1.0, 0.0, 0.0);
        let loss = LossSpec::scaled_identity(1.0, 1.0, 1, 1).unwrap();
        let mut env = Environment::new(model.clone(), 1, InitMode::Zero).unwrap();
        let hist = rollout(&mut env, &mut ZeroController { p: 1 }, 50, &loss).unwrap();
        let g = truncated_truth(&model).unwrap();
        let (pol, cost) = best_dfc_in_hindsight(&hist, &g, &loss, 1.0, 3).unwrap();
        assert_eq!(cost, 0.0);
        assert_eq!(pol.norm_sum(), 0.0);
    }

    #[test]
    fn hindsight_zero_radius_forces_zero_policy() {
        let model = StateSpaceModel::scalar(0.5, 1.0, 1.0, 1.0, 1.0);
        let loss = LossSpec::scaled_identity(1.0, 1.0, 1, 1).unwrap();
        let mut env = Environment::new(model.clone(), 3, InitMode::SteadyState).unwrap();
        let hist = rollout(&mut env, &mut ZeroController { p: 1 }, 200, &loss).unwrap();
        let g = truncated_truth(&model).unwrap();
        let (pol, cost) = best_dfc_in_hindsight(&hist, &g, &loss, 0.0, 3).unwrap();
        assert_eq!(pol.norm_sum(), 0.0);
        let direct: f64 = hist.truth().unwrap().bs.iter().map(|b| b * b).sum();
        assert!((cost - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AdaptOnConfig {
            t_total: 1000,
            t_w: 100,
            t_base: None,
            sigma_u2: 1.0,
            he: 7,
            h: 7,
            hprime: 21,
            n: 3,
            lambda: 1.0,
            kappa_m: 1.0,
            alpha_eff: None,
            dither_var: 0.0,
            projection: Projection::Radial,
            seed: 0,
            epoch_updates: true,
        };
        assert!(cfg.validate().is_ok());
        cfg.hprime = 20;
        assert!(cfg.validate().is_err());
        cfg.hprime = 21;
        cfg.t_w = 5;
        assert!(cfg.validate().is_err());
    }
}
