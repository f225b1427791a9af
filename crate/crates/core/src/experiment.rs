//! Experiment configuration, seed sweeps and result emission.
//!
//! One trajectory is simulated per seed at the largest horizon in the sweep.
//! Every smaller `T` is evaluated on the prefix of that trajectory, which is
//! exactly the run a shorter horizon would produce because all horizons are
//! fixed from the largest `T`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
pub use serde_json::Value;
use serde_json::json;

use crate::adapton::{
    lqg_optimal_controller, truncated_truth, AdaptOnConfig, ComparatorKind, EpochRecord,
    HindsightAccumulator, HindsightQuadratic, dfc_costs_on_truth,
};
use crate::dfc::{ldc_to_dfc, Projection};
use crate::linalg::{self, spectral_radius};
use crate::registry::{ControllerContext, ControllerRegistry, IdentifierRegistry, IdentifierSpec};
use crate::rng::{GaussianStream, StreamKey};
use crate::simulator::{fmt_f64, rollout, Controller, Environment, InitMode, LossSpec, RunHistory};
use crate::system_model::{gy_parameter, markov_parameters, predictor_form, validate_system, MarkovOperator, StateSpaceModel};
use crate::sysid::{default_he, estimation_error, excitation_monitor, DEFAULT_LAMBDA};
use crate::{Error, Result};

pub const RANDOM_SYSTEM_RETRIES: usize = 100;
pub const DEFAULT_T_W: usize = 128;
/// Seed of the default random system: Hankel spectrum well separated
/// (sigma_3 / sigma_1 > 0.1) and LQG 19% below the zero-input cost.
pub const BENCHMARK_SYSTEM_SEED: u64 = 28;
pub const DEFAULT_KAPPA_FACTOR: f64 = 1.5;

/// `A = rho_target A0 / rho(A0)` for a Gaussian `A0`, Gaussian `B` and `C`,
/// unit noise variances; redrawn until every modelling assumption holds.
pub fn random_stable_system(n: usize, m: usize, p: usize, rho_target: f64, seed: u64) -> Result<StateSpaceModel> {
    random_stable_system_with_noise(n, m, p, rho_target, seed, 1.0, 1.0)
}

pub fn random_stable_system_with_noise(
    n: usize,
    m: usize,
    p: usize,
    rho_target: f64,
    seed: u64,
    sigma_w2: f64,
    sigma_z2: f64,
) -> Result<StateSpaceModel> {
    if !(rho_target > 0.0 && rho_target < 1.0) {
        return Err(Error::arg("rho_target", "must lie in (0, 1)"));
    }
    if n == 0 || m == 0 || p == 0 {
        return Err(Error::arg("n, m, p", "must be positive"));
    }
    let mut rng = GaussianStream::new(seed, StreamKey::SystemSampling);
    for _ in 0..RANDOM_SYSTEM_RETRIES {
        let mut draw = |r: usize, c: usize| nalgebra::DMatrix::from_row_slice(r, c, &rng.normal_vec(r * c, 1.0));
        let a0 = draw(n, n);
        let b = draw(n, p);
        let c = draw(m, n);
        let rho0 = spectral_radius(&a0);
        if !(rho0 > 1e-8) {
            continue;
        }
        let a = a0 * (rho_target / rho0);
        let Ok(model) = StateSpaceModel::new(a, b, c, sigma_w2, sigma_z2) else { continue };
        match validate_system(&model) {
            Ok(report) if report.all_passed() && report.rho_abar.is_some_and(|r| r < 1.0) => return Ok(model),
            _ => continue,
        }
    }
    Err(Error::RetryBudget {
        retries: RANDOM_SYSTEM_RETRIES,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

/// Least squares line through `(ln T, ln value)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::arg("points", format!("need at least 3, got {}", points.len())));
    }
    if let Some(&(t, v)) = points.iter().find(|&&(t, v)| !(t > 0.0 && v > 0.0)) {
        return Err(Error::arg("points", format!("nonpositive entry ({t}, {v})")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::arg("points", "all T values equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / k)
        .sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        residual,
    })
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    #[serde(rename = "T")]
    pub t: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Weight {
    fn matrix(&self, dim: usize, name: &'static str) -> Result<nalgebra::DMatrix<f64>> {
        match self {
            Weight::Scalar(s) => Ok(linalg::identity(dim) * *s),
            Weight::Matrix(rows) => linalg::from_rows(name, rows, Some(dim)),
        }
    }
}

fn one() -> Weight {
    Weight::Scalar(1.0)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    #[serde(rename = "Q", default = "one")]
    pub q: Weight,
    #[serde(rename = "R", default = "one")]
    pub r: Weight,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { q: one(), r: one() }
    }
}

fn d_n() -> usize {
    3
}
fn d_io() -> usize {
    1
}
fn d_rho() -> f64 {
    0.7
}
fn d_system_seed() -> u64 {
    BENCHMARK_SYSTEM_SEED
}
fn d_var() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSource {
    /// Path relative to the config file.
    File { path: String },
    Inline { model: Value },
    Random {
        #[serde(default = "d_n")]
        n: usize,
        #[serde(default = "d_io")]
        m: usize,
        #[serde(default = "d_io")]
        p: usize,
        #[serde(default = "d_rho")]
        rho_target: f64,
        #[serde(default = "d_system_seed")]
        seed: u64,
        #[serde(default = "d_var")]
        sigma_w2: f64,
        #[serde(default = "d_var")]
        sigma_z2: f64,
    },
}

impl Default for SystemSource {
    fn default() -> Self {
        SystemSource::Random {
            n: 3,
            m: 1,
            p: 1,
            rho_target: 0.7,
            seed: BENCHMARK_SYSTEM_SEED,
            sigma_w2: 1.0,
            sigma_z2: 1.0,
        }
    }
}

/// Unset fields are derived from the system, the loss and the largest `T`.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct AdaptOnOverrides {
    #[serde(rename = "T_w", default)]
    pub t_w: Option<usize>,
    #[serde(rename = "T_base", default)]
    pub t_base: Option<usize>,
    #[serde(default)]
    pub sigma_u2: Option<f64>,
    #[serde(rename = "He", default)]
    pub he: Option<usize>,
    #[serde(rename = "H", default)]
    pub h: Option<usize>,
    #[serde(rename = "Hprime", default)]
    pub hprime: Option<usize>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(rename = "kappa_M", default)]
    pub kappa_m: Option<f64>,
    #[serde(default)]
    pub alpha_eff: Option<f64>,
    #[serde(default)]
    pub dither_var: Option<f64>,
    #[serde(default)]
    pub projection: Option<Projection>,
}

fn d_identifiers() -> Vec<String> {
    vec!["predictor_ls".into(), "naive_ls".into()]
}
fn d_ident_controller() -> String {
    "lqg_dfc".into()
}
fn d_ident_dither() -> f64 {
    0.01
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IdentifyOptions {
    #[serde(default = "d_identifiers")]
    pub identifiers: Vec<String>,
    /// Closed-loop policy generating the data.
    #[serde(default = "d_ident_controller")]
    pub controller: String,
    /// Variance of the independent input dither added to that policy.
    #[serde(default = "d_ident_dither")]
    pub dither_var: f64,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        Self {
            identifiers: d_identifiers(),
            controller: d_ident_controller(),
            dither_var: d_ident_dither(),
        }
    }
}

fn d_controllers() -> Vec<String> {
    vec!["adapton".into(), "explore_then_commit".into(), "lqg".into()]
}
fn d_comparators() -> Vec<ComparatorKind> {
    vec![ComparatorKind::BestDfcHindsight, ComparatorKind::LqgOptimal]
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub system: SystemSource,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub adapton: AdaptOnOverrides,
    #[serde(default)]
    pub identify: IdentifyOptions,
    #[serde(rename = "T_values")]
    pub t_values: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Controllers run by the compare mode.
    #[serde(default = "d_controllers")]
    pub controllers: Vec<String>,
    #[serde(default = "d_comparators")]
    pub comparators: Vec<ComparatorKind>,
    /// Per-run CSV files; the summary is always written when an output directory is set.
    #[serde(default = "d_true")]
    pub write_runs: bool,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and checks a config file; returns it with its directory.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_json_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.check(&base)?;
        Ok((cfg, base))
    }

    pub fn check(&self, base: &Path) -> Result<()> {
        if self.t_values.is_empty() {
            return Err(Error::Config("T_values must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let SystemSource::File { path } = &self.system {
            let p = base.join(path);
            if !p.is_file() {
                return Err(Error::Config(format!("system file {} does not exist", p.display())));
            }
        }
        let creg = ControllerRegistry::default();
        for name in self.controllers.iter().chain(std::iter::once(&self.identify.controller)) {
            if !creg.names().contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown controller {name}")));
            }
        }
        let ireg = IdentifierRegistry::default();
        for name in &self.identify.identifiers {
            if !ireg.names().contains(&name.as_str()) {
                return Err(Error::Config(format!("unknown identifier {name}")));
            }
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.t_values.iter().copied().max().unwrap_or(0)
    }
}

pub fn build_system(source: &SystemSource, base: &Path) -> Result<StateSpaceModel> {
    match source {
        SystemSource::File { path } => {
            let p = base.join(path);
            let text = fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            StateSpaceModel::from_json_str(&text)
        }
        SystemSource::Inline { model } => StateSpaceModel::from_json_str(&model.to_string()),
        SystemSource::Random {
            n,
            m,
            p,
            rho_target,
            seed,
            sigma_w2,
            sigma_z2,
        } => random_stable_system_with_noise(*n, *m, *p, *rho_target, *seed, *sigma_w2, *sigma_z2),
    }
}

pub fn build_loss(cfg: &LossConfig, model: &StateSpaceModel) -> Result<LossSpec> {
    LossSpec::new(cfg.q.matrix(model.m(), "Q")?, cfg.r.matrix(model.p(), "R")?)
}

/// Fills every unset field: `He` from the horizon rule at `t_max`, `H = He`,
/// `H' = 3H`, `kappa_M` as 1.5 times the norm sum of the LQG controller's DFC image.
pub fn resolve_adapton(
    model: &StateSpaceModel,
    loss: &LossSpec,
    o: &AdaptOnOverrides,
    t_max: usize,
) -> Result<AdaptOnConfig> {
    let n = model.n();
    let pf = predictor_form(model)?;
    let he = o.he.unwrap_or_else(|| default_he(n, pf.rho_abar, t_max));
    let h = o.h.unwrap_or(he);
    let hprime = o.hprime.unwrap_or(3 * h);
    let kappa_m = match o.kappa_m {
        Some(k) => k,
        None => {
            let ldc = lqg_optimal_controller(model, loss)?;
            DEFAULT_KAPPA_FACTOR * ldc_to_dfc(&ldc, model, hprime)?.norm_sum()
        }
    };
    let cfg = AdaptOnConfig {
        t_total: t_max,
        t_w: o.t_w.unwrap_or(DEFAULT_T_W.max(he)).min(t_max),
        t_base: o.t_base,
        sigma_u2: o.sigma_u2.unwrap_or(1.0),
        he,
        h,
        hprime,
        n,
        lambda: o.lambda.unwrap_or(DEFAULT_LAMBDA),
        kappa_m,
        alpha_eff: o.alpha_eff,
        dither_var: o.dither_var.unwrap_or(0.0),
        projection: o.projection.unwrap_or_default(),
        seed: 0,
        epoch_updates: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Identify,
    Adapton,
    Compare,
}

/// Everything a seed worker needs; shared read-only across workers.
#[derive(Clone, Debug)]
pub struct Setup {
    pub model: StateSpaceModel,
    pub loss: LossSpec,
    pub adapton: AdaptOnConfig,
    pub t_values: Vec<usize>,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, base: &Path) -> Result<Self> {
        let model = build_system(&cfg.system, base)?;
        let loss = build_loss(&cfg.loss, &model)?;
        let adapton = resolve_adapton(&model, &loss, &cfg.adapton, cfg.t_max())?;
        let mut t_values = cfg.t_values.clone();
        t_values.sort_unstable();
        t_values.dedup();
        if t_values[0] <= adapton.t_w.max(adapton.he) {
            return Err(Error::Config(format!(
                "every T must exceed T_w = {} and He = {}",
                adapton.t_w, adapton.he
            )));
        }
        Ok(Self {
            model,
            loss,
            adapton,
            t_values,
        })
    }

    fn t_max(&self) -> usize {
        *self.t_values.last().expect("nonempty")
    }
}

/// Adds independent `N(0, var I)` noise to another controller's input.
pub struct DitheredController {
    inner: Box<dyn Controller>,
    stream: GaussianStream,
    var: f64,
    name: String,
}

impl DitheredController {
    pub fn new(inner: Box<dyn Controller>, seed: u64, var: f64) -> Self {
        let name = format!("{}+dither", inner.name());
        Self {
            inner,
            stream: GaussianStream::new(seed, StreamKey::Auxiliary),
            var,
            name,
        }
    }
}

impl Controller for DitheredController {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, history: &RunHistory, t: usize, y: &[f64]) -> Result<Vec<f64>> {
        let mut u = self.inner.act(history, t, y)?;
        if self.var > 0.0 {
            let dither = self.stream.normal_vec(u.len(), self.var);
            for (ui, d) in u.iter_mut().zip(dither) {
                *ui += d;
            }
        }
        Ok(u)
    }

    fn epoch(&self) -> usize {
        self.inner.epoch()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentifyRow {
    #[serde(rename = "T")]
    pub t: usize,
    pub gy_fro_error: f64,
    /// Per identifier name, `sum_i ||Ghat^[i] - G^[i]||_2`; NaN when estimation failed.
    pub markov_sum_error: BTreeMap<String, f64>,
    pub sigma_min_over_t: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentifyRun {
    pub seed: u64,
    pub rows: Vec<IdentifyRow>,
}

/// One closed-loop trajectory per seed, evaluated at each checkpoint `T`.
pub fn run_identify_seed(setup: &Setup, opts: &IdentifyOptions, seed: u64) -> Result<IdentifyRun> {
    let mut cfg = setup.adapton.clone();
    cfg.seed = seed;
    let creg = ControllerRegistry::default();
    let ctx = ControllerContext {
        model: &setup.model,
        loss: &setup.loss,
        cfg: &cfg,
    };
    let inner = creg.build(&opts.controller, &ctx)?;
    let mut ctrl = DitheredController::new(inner, seed, opts.dither_var);
    let mut env = Environment::new(setup.model.clone(), seed, InitMode::SteadyState)?;
    let history = rollout(&mut env, &mut ctrl, setup.t_max(), &setup.loss)?;

    let truth = markov_parameters(&setup.model, cfg.h + 1)?;
    let gy_truth = gy_parameter(&predictor_form(&setup.model)?, cfg.he)?;
    let ireg = IdentifierRegistry::default();
    let spec = IdentifierSpec {
        he: cfg.he,
        h: cfg.h,
        n: cfg.n,
        lambda: cfg.lambda,
    };
    let idents = opts
        .identifiers
        .iter()
        .map(|name| ireg.build(name, &spec).map(|i| (name.clone(), i)))
        .collect::<Result<Vec<_>>>()?;
    let excitation = excitation_monitor(&history, cfg.he, &setup.t_values);

    let mut rows = Vec::new();
    for (k, &t) in setup.t_values.iter().enumerate() {
        let prefix = history.prefix(t);
        let mut errs = BTreeMap::new();
        let mut gy_err = f64::NAN;
        for (name, ident) in &idents {
            let err = match ident.estimate(&prefix) {
                Ok(est) => {
                    if let Some(gy) = &est.gy {
                        gy_err = (&gy.gy.mat - &gy_truth.mat).norm();
                    }
                    estimation_error(&est.markov, &truth)?.spectral_sum
                }
                Err(_) => f64::NAN,
            };
            errs.insert(name.clone(), err);
        }
        rows.push(IdentifyRow {
            t,
            gy_fro_error: gy_err,
            markov_sum_error: errs,
            sigma_min_over_t: excitation.points.get(k).map(|p| p.1).unwrap_or(f64::NAN),
        });
    }
    Ok(IdentifyRun { seed, rows })
}

fn identify_column(name: &str) -> String {
    match name {
        "predictor_ls" => "markov_sum_error".into(),
        "naive_ls" => "naive_markov_sum_error".into(),
        other => format!("{other}_markov_sum_error"),
    }
}

pub fn write_identify_csv<W: Write>(run: &IdentifyRun, names: &[String], mut out: W) -> Result<()> {
    let mut header = vec!["T".to_string(), "gy_fro_error".to_string()];
    header.extend(names.iter().map(|n| identify_column(n)));
    header.push("sigma_min_over_t".into());
    writeln!(out, "{}", header.join(","))?;
    for row in &run.rows {
        let mut fields = vec![row.t.to_string(), fmt_f64(row.gy_fro_error)];
        fields.extend(names.iter().map(|n| fmt_f64(row.markov_sum_error[n])));
        fields.push(fmt_f64(row.sigma_min_over_t));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Comparators shared by every controller on a seed: they depend on the
/// noise only, which the plant draws independently of the inputs.
#[derive(Clone, Debug)]
pub struct SeedComparators {
    /// Hindsight objective at each checkpoint `T`.
    pub hindsight: Vec<HindsightQuadratic>,
    pub best_dfc_cost: Vec<f64>,
    pub best_dfc_policy: Vec<crate::dfc::DfcPolicy>,
    pub lqg_costs: Option<Vec<f64>>,
    pub true_b: Vec<f64>,
    pub truth: MarkovOperator,
}

pub fn seed_comparators(setup: &Setup, seed: u64, kinds: &[ComparatorKind]) -> Result<SeedComparators> {
    let m = setup.model.m();
    let t_max = setup.t_max();
    let truth = truncated_truth(&setup.model)?;
    // Nature's y does not depend on the inputs, so the zero controller gives it directly.
    let mut env = Environment::new(setup.model.clone(), seed, InitMode::SteadyState)?;
    let base = rollout(&mut env, &mut crate::adapton::ZeroController { p: setup.model.p() }, t_max, &setup.loss)?;
    let true_b = base.truth().expect("attached by rollout").bs.clone();

    let mut hindsight = Vec::new();
    let mut best_dfc_cost = Vec::new();
    let mut best_dfc_policy = Vec::new();
    if kinds.contains(&ComparatorKind::BestDfcHindsight) {
        let mut acc = HindsightAccumulator::new(&truth, &setup.loss, setup.adapton.hprime);
        for (k, b) in true_b.chunks(m).enumerate() {
            acc.push(b);
            if setup.t_values.binary_search(&(k + 1)).is_ok() {
                let q = acc.snapshot();
                let (pol, cost) = q.solve(setup.adapton.kappa_m)?;
                hindsight.push(q);
                best_dfc_cost.push(cost);
                best_dfc_policy.push(pol);
            }
        }
    }
    let lqg_costs = if kinds.contains(&ComparatorKind::LqgOptimal) {
        let mut ldc = lqg_optimal_controller(&setup.model, &setup.loss)?;
        let mut env = Environment::new(setup.model.clone(), seed, InitMode::SteadyState)?;
        Some(rollout(&mut env, &mut ldc, t_max, &setup.loss)?.costs().to_vec())
    } else {
        None
    };
    Ok(SeedComparators {
        hindsight,
        best_dfc_cost,
        best_dfc_policy,
        lqg_costs,
        true_b,
        truth,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ControlPoint {
    #[serde(rename = "T")]
    pub t: usize,
    pub total_cost: f64,
    pub regret_best_dfc: Option<f64>,
    pub regret_lqg: Option<f64>,
    pub markov_err: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ControlRun {
    pub seed: u64,
    pub controller: String,
    pub history: RunHistory,
    pub points: Vec<ControlPoint>,
    pub epochs: Vec<EpochRecord>,
}

/// Runs one named controller on a seed and scores it at every checkpoint.
pub fn run_control_seed(setup: &Setup, name: &str, seed: u64, comps: &SeedComparators) -> Result<ControlRun> {
    let mut cfg = setup.adapton.clone();
    cfg.seed = seed;
    let creg = ControllerRegistry::default();
    let ctx = ControllerContext {
        model: &setup.model,
        loss: &setup.loss,
        cfg: &cfg,
    };
    let mut ctrl = creg.build(name, &ctx)?;
    let mut env = Environment::new(setup.model.clone(), seed, InitMode::SteadyState)?;
    let history = rollout(&mut env, ctrl.as_mut(), setup.t_max(), &setup.loss)?;
    let epochs: Vec<EpochRecord> = ctrl
        .report()
        .and_then(|v| v.get("epochs").cloned())
        .and_then(|v| serde_json::from_value::<Vec<EpochRecord>>(v).ok())
        .unwrap_or_default();

    let costs = history.costs();
    let mut points = Vec::new();
    for (k, &t) in setup.t_values.iter().enumerate() {
        let total: f64 = costs[..t].iter().sum();
        let regret_best_dfc = comps.best_dfc_cost.get(k).map(|c| total - c);
        let regret_lqg = comps
            .lqg_costs
            .as_ref()
            .map(|l| total - l[..t].iter().sum::<f64>());
        let epoch = history.epochs()[t - 1];
        let markov_err = epochs.iter().find(|e| e.index == epoch).and_then(|e| e.markov_err);
        points.push(ControlPoint {
            t,
            total_cost: total,
            regret_best_dfc,
            regret_lqg,
            markov_err,
        });
    }
    Ok(ControlRun {
        seed,
        controller: name.to_string(),
        history,
        points,
        epochs,
    })
}

/// Per-step CSV of a control run truncated at checkpoint `k`:
/// `t,epoch,cost,comparator_cost,regret,markov_err[,lqg_cost,regret_lqg]`.
pub fn write_control_csv<W: Write>(run: &ControlRun, comps: &SeedComparators, setup: &Setup, k: usize, out: W) -> Result<()> {
    let t_end = setup.t_values[k];
    let mut out = BufWriter::new(out);
    let comparator: Option<Vec<f64>> = comps
        .best_dfc_policy
        .get(k)
        .map(|pol| dfc_costs_on_truth(&comps.true_b[..t_end * setup.model.m()], &comps.truth, pol, &setup.loss));
    let lqg = comps.lqg_costs.as_ref();
    let mut header = String::from("t,epoch,cost,comparator_cost,regret,markov_err");
    if lqg.is_some() {
        header.push_str(",lqg_cost,regret_lqg");
    }
    writeln!(out, "{header}")?;
    let errs: BTreeMap<usize, f64> = run
        .epochs
        .iter()
        .filter_map(|e| e.markov_err.map(|v| (e.index, v)))
        .collect();
    let (mut regret, mut regret_lqg) = (0.0, 0.0);
    for t in 1..=t_end {
        let cost = run.history.cost(t);
        let epoch = run.history.epochs()[t - 1];
        let comp = comparator.as_ref().map(|c| c[t - 1]).unwrap_or(f64::NAN);
        regret += cost - comp;
        let err = errs.get(&epoch).copied().unwrap_or(f64::NAN);
        write!(
            out,
            "{t},{epoch},{},{},{},{}",
            fmt_f64(cost),
            fmt_f64(comp),
            fmt_f64(regret),
            fmt_f64(err)
        )?;
        if let Some(l) = lqg {
            regret_lqg += cost - l[t - 1];
            write!(out, ",{},{}", fmt_f64(l[t - 1]), fmt_f64(regret_lqg))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub seed: u64,
    pub controller: Option<String>,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub summary: Value,
    pub failures: Vec<Failure>,
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub dry_run: bool,
    pub jobs: Option<usize>,
    /// Replaces the config's seed list.
    pub seed: Option<u64>,
}

/// Medians and quartiles over seeds for each `(metric, T)`, and a log-log
/// slope of the medians when at least three positive points exist.
pub fn aggregate(values: &BTreeMap<String, BTreeMap<usize, Vec<f64>>>) -> (Value, Value) {
    let mut aggs = serde_json::Map::new();
    let mut fits = serde_json::Map::new();
    for (metric, by_t) in values {
        let list: Vec<Aggregate> = by_t
            .iter()
            .map(|(&t, v)| {
                let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
                Aggregate {
                    t,
                    median: median(&finite),
                    q1: quantile(&finite, 0.25),
                    q3: quantile(&finite, 0.75),
                    count: finite.len(),
                }
            })
            .collect();
        let pts: Vec<(f64, f64)> = list.iter().map(|a| (a.t as f64, a.median)).collect();
        if let Ok(fit) = fit_loglog_slope(&pts) {
            fits.insert(metric.clone(), json!(fit));
        }
        aggs.insert(metric.clone(), json!(list));
    }
    (Value::Object(aggs), Value::Object(fits))
}

fn summary_value(x: f64) -> Value {
    if x.is_finite() { json!(x) } else { Value::Null }
}

pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, mode: Mode, opts: &RunOptions) -> Result<ExperimentOutcome> {
    cfg.check(base)?;
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seeds = vec![s];
    }
    let setup = Setup::new(&cfg, base)?;
    let out_dir = opts.out_dir.clone().or_else(|| cfg.out_dir.as_ref().map(|d| base.join(d)));
    let mut header = json!({
        "mode": mode,
        "config": cfg,
        "resolved": {
            "model": serde_json::from_str::<Value>(&setup.model.to_json_string()?)?,
            "adapton": setup.adapton,
        },
        "seeds": cfg.seeds,
        "T_values": setup.t_values,
    });
    if opts.dry_run {
        header["dry_run"] = json!(true);
        return Ok(ExperimentOutcome {
            summary: header,
            failures: Vec::new(),
            files: Vec::new(),
        });
    }
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir)?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let controllers: Vec<String> = match mode {
        Mode::Identify => Vec::new(),
        Mode::Adapton => vec!["adapton".into()],
        Mode::Compare => cfg.controllers.clone(),
    };

    type SeedOut = (u64, std::result::Result<(Value, BTreeMap<String, BTreeMap<usize, f64>>, Vec<PathBuf>), Vec<Failure>>);
    let results: Vec<SeedOut> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let r = match mode {
                    Mode::Identify => identify_worker(&setup, &cfg, seed, out_dir.as_deref()),
                    _ => control_worker(&setup, &cfg, &controllers, seed, out_dir.as_deref()),
                };
                (seed, r)
            })
            .collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut files = Vec::new();
    let mut metrics: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for (_, r) in results {
        match r {
            Ok((run, m, f)) => {
                runs.push(run);
                files.extend(f);
                for (metric, by_t) in m {
                    for (t, v) in by_t {
                        metrics.entry(metric.clone()).or_default().entry(t).or_default().push(v);
                    }
                }
            }
            Err(f) => failures.extend(f),
        }
    }
    let (aggs, fits) = aggregate(&metrics);
    header["runs"] = Value::Array(runs);
    header["aggregates"] = aggs;
    header["slope_fits"] = fits;
    header["failures"] = json!(failures);
    if let Some(dir) = &out_dir {
        let path = dir.join("summary.json");
        fs::write(&path, serde_json::to_string_pretty(&header)? + "\n")?;
        files.push(path);
        if !failures.is_empty() {
            let path = dir.join("failures.json");
            fs::write(&path, serde_json::to_string_pretty(&failures)? + "\n")?;
            files.push(path);
        }
    }
    Ok(ExperimentOutcome {
        summary: header,
        failures,
        files,
    })
}

type WorkerOut = std::result::Result<(Value, BTreeMap<String, BTreeMap<usize, f64>>, Vec<PathBuf>), Vec<Failure>>;

fn identify_worker(setup: &Setup, cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> WorkerOut {
    let fail = |e: Error| {
        vec![Failure {
            seed,
            controller: None,
            error: e.to_string(),
        }]
    };
    let run = run_identify_seed(setup, &cfg.identify, seed).map_err(fail)?;
    let mut files = Vec::new();
    if let (Some(dir), true) = (out, cfg.write_runs) {
        let path = dir.join(format!("identify_seed{seed}.csv"));
        let file = fs::File::create(&path).map_err(|e| fail(e.into()))?;
        write_identify_csv(&run, &cfg.identify.identifiers, BufWriter::new(file)).map_err(fail)?;
        files.push(path);
    }
    let mut metrics: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for row in &run.rows {
        metrics.entry("gy_fro_error".into()).or_default().insert(row.t, row.gy_fro_error);
        metrics.entry("sigma_min_over_t".into()).or_default().insert(row.t, row.sigma_min_over_t);
        for (name, v) in &row.markov_sum_error {
            metrics.entry(identify_column(name)).or_default().insert(row.t, *v);
        }
    }
    let rows: Vec<Value> = run
        .rows
        .iter()
        .map(|r| {
            let mut v = json!({
                "T": r.t,
                "gy_fro_error": summary_value(r.gy_fro_error),
                "sigma_min_over_t": summary_value(r.sigma_min_over_t),
            });
            for (name, e) in &r.markov_sum_error {
                v[identify_column(name)] = summary_value(*e);
            }
            v
        })
        .collect();
    Ok((json!({"seed": seed, "checkpoints": rows}), metrics, files))
}

fn control_worker(setup: &Setup, cfg: &ExperimentConfig, controllers: &[String], seed: u64, out: Option<&Path>) -> WorkerOut {
    let comps = seed_comparators(setup, seed, &cfg.comparators).map_err(|e| {
        vec![Failure {
            seed,
            controller: None,
            error: e.to_string(),
        }]
    })?;
    let mut failures = Vec::new();
    let mut per_ctrl = serde_json::Map::new();
    let mut metrics: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut files = Vec::new();
    for name in controllers {
        let run = match run_control_seed(setup, name, seed, &comps) {
            Ok(r) => r,
            Err(e) => {
                failures.push(Failure {
                    seed,
                    controller: Some(name.clone()),
                    error: e.to_string(),
                });
                continue;
            }
        };
        if let (Some(dir), true) = (out, cfg.write_runs) {
            for k in 0..setup.t_values.len() {
                let path = dir.join(format!("{name}_seed{seed}_T{}.csv", setup.t_values[k]));
                let res = fs::File::create(&path)
                    .map_err(Error::from)
                    .and_then(|f| write_control_csv(&run, &comps, setup, k, f));
                match res {
                    Ok(()) => files.push(path),
                    Err(e) => failures.push(Failure {
                        seed,
                        controller: Some(name.clone()),
                        error: e.to_string(),
                    }),
                }
            }
        }
        for p in &run.points {
            if let Some(r) = p.regret_best_dfc {
                metrics.entry(format!("{name}/regret_best_dfc")).or_default().insert(p.t, r);
            }
            if let Some(r) = p.regret_lqg {
                metrics.entry(format!("{name}/regret_lqg")).or_default().insert(p.t, r);
            }
            if let Some(e) = p.markov_err {
                metrics.entry(format!("{name}/markov_err")).or_default().insert(p.t, e);
            }
        }
        let any_sysid_failure = run.epochs.iter().any(|e| !e.sysid_ok);
        per_ctrl.insert(
            name.clone(),
            json!({
                "final_regret": run.points.last().and_then(|p| p.regret_best_dfc).map(summary_value),
                "final_regret_lqg": run.points.last().and_then(|p| p.regret_lqg).map(summary_value),
                "checkpoints": run.points,
                "epochs": run.epochs,
                "sysid_fallback": any_sysid_failure,
            }),
        );
    }
    if !failures.is_empty() {
        return Err(failures);
    }
    let best: Vec<Value> = setup
        .t_values
        .iter()
        .zip(&comps.best_dfc_cost)
        .map(|(t, c)| json!({"T": t, "best_dfc_cost": c}))
        .collect();
    Ok((json!({"seed": seed, "controllers": per_ctrl, "comparator": best}), metrics, files))
}

pub fn to_pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

pub fn parse_summary(s: &str) -> Result<Value> {
    Ok(serde_json::from_str(s)?)
}

/// Log-log slopes of the aggregate medians recorded in a summary document.
pub fn slopes_from_summary(summary: &Value) -> Result<BTreeMap<String, SlopeFit>> {
    let aggs = summary
        .get("aggregates")
        .and_then(Value::as_object)
        .ok_or_else(|| Error::Config("summary has no aggregates".into()))?;
    let mut out = BTreeMap::new();
    for (metric, list) in aggs {
        let pts: Vec<(f64, f64)> = list
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|a| Some((a.get("T")?.as_f64()?, a.get("median")?.as_f64()?)))
            .collect();
        if let Ok(fit) = fit_loglog_slope(&pts) {
            out.insert(metric.clone(), fit);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_exact_power_law() {
        let pts: Vec<(f64, f64)> = (10..17).map(|k| {
            let t = (1u64 << k) as f64;
            (t, 3.0 / t.sqrt())
        }).collect();
        let fit = fit_loglog_slope(&pts).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!(fit.residual < 1e-12);
    }

    #[test]
    fn slope_constant_and_errors() {
        let pts = vec![(1.0, 2.0), (2.0, 2.0), (4.0, 2.0)];
        assert!(fit_loglog_slope(&pts).unwrap().slope.abs() < 1e-15);
        assert!(fit_loglog_slope(&pts[..2]).is_err());
        assert!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn slope_log_squared_is_shallow() {
        let pts: Vec<(f64, f64)> = (10..17).map(|k| {
            let t = (1u64 << k) as f64;
            (t, 5.0 * t.ln().powi(2))
        }).collect();
        assert!(fit_loglog_slope(&pts).unwrap().slope < 0.25);
    }

    #[test]
    fn quantiles() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }

    #[test]
    fn random_scalar_system_radius() {
        let m = random_stable_system(1, 1, 1, 0.7, 5).unwrap();
        assert!((m.a[(0, 0)].abs() - 0.7).abs() < 1e-12);
        let again = random_stable_system(1, 1, 1, 0.7, 5).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn random_system_rejects_bad_rho() {
        assert!(random_stable_system(2, 1, 1, 1.0, 0).is_err());
        assert!(random_stable_system(2, 1, 1, 0.0, 0).is_err());
    }

    #[test]
    fn config_defaults_parse() {
        let cfg = ExperimentConfig::from_json_str(r#"{"T_values":[2048],"seeds":[1]}"#).unwrap();
        assert_eq!(cfg.system, SystemSource::default());
        assert_eq!(cfg.identify.controller, "lqg_dfc");
        assert!(ExperimentConfig::from_json_str(r#"{"seeds":[1]}"#).is_err());
        assert!(cfg.check(Path::new(".")).is_ok());
        let empty = ExperimentConfig::from_json_str(r#"{"T_values":[],"seeds":[1]}"#).unwrap();
        assert!(empty.check(Path::new(".")).is_err());
    }
}
