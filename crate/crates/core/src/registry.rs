//! Named strategies selectable at run time.

use std::collections::BTreeMap;

use crate::adapton::{AdaptOnConfig, AdaptOnController, GaussianInputController, ZeroController, lqg_optimal_controller, truncated_truth};
use crate::dfc::{ldc_to_dfc, DfcController};
use crate::simulator::{Controller, LossSpec};
use crate::system_model::StateSpaceModel;
use crate::sysid::{Identifier, NaiveLsIdentifier, PredictorArxIdentifier};
use crate::{Error, Result};

/// What a controller factory may use. `model` is the true plant: only the
/// oracle baselines (`lqg`, `lqg_dfc`) read it for synthesis; the adaptive
/// controllers use it for error logging alone.
pub struct ControllerContext<'a> {
    pub model: &'a StateSpaceModel,
    pub loss: &'a LossSpec,
    pub cfg: &'a AdaptOnConfig,
}

pub type ControllerFactory = Box<dyn Fn(&ControllerContext) -> Result<Box<dyn Controller>> + Send + Sync>;

pub struct ControllerRegistry {
    entries: BTreeMap<String, ControllerFactory>,
}

impl ControllerRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, factory: ControllerFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, ctx: &ControllerContext) -> Result<Box<dyn Controller>> {
        let f = self.entries.get(name).ok_or_else(|| Error::UnknownStrategy(name.to_string()))?;
        f(ctx)
    }
}

impl Default for ControllerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(
            "adapton",
            Box::new(|ctx| {
                let mut cfg = ctx.cfg.clone();
                cfg.epoch_updates = true;
                Ok(Box::new(AdaptOnController::new(&cfg, ctx.loss, Some(ctx.model))?))
            }),
        );
        r.register(
            "explore_then_commit",
            Box::new(|ctx| {
                let mut cfg = ctx.cfg.clone();
                cfg.epoch_updates = false;
                Ok(Box::new(AdaptOnController::new(&cfg, ctx.loss, Some(ctx.model))?))
            }),
        );
        r.register(
            "lqg",
            Box::new(|ctx| Ok(Box::new(lqg_optimal_controller(ctx.model, ctx.loss)?))),
        );
        r.register(
            "lqg_dfc",
            Box::new(|ctx| {
                let ldc = lqg_optimal_controller(ctx.model, ctx.loss)?;
                let policy = ldc_to_dfc(&ldc, ctx.model, ctx.cfg.hprime)?;
                Ok(Box::new(DfcController::new(policy, truncated_truth(ctx.model)?, "lqg_dfc")))
            }),
        );
        r.register(
            "gaussian",
            Box::new(|ctx| Ok(Box::new(GaussianInputController::new(ctx.cfg.seed, ctx.cfg.sigma_u2, ctx.model.p())))),
        );
        r.register("zero", Box::new(|ctx| Ok(Box::new(ZeroController { p: ctx.model.p() }))));
        r
    }
}

#[derive(Clone, Copy, Debug)]
pub struct IdentifierSpec {
    pub he: usize,
    pub h: usize,
    pub n: usize,
    pub lambda: f64,
}

pub type IdentifierFactory = Box<dyn Fn(&IdentifierSpec) -> Box<dyn Identifier> + Send + Sync>;

pub struct IdentifierRegistry {
    entries: BTreeMap<String, IdentifierFactory>,
}

impl IdentifierRegistry {
    pub fn empty() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, factory: IdentifierFactory) {
        self.entries.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, spec: &IdentifierSpec) -> Result<Box<dyn Identifier>> {
        let f = self.entries.get(name).ok_or_else(|| Error::UnknownStrategy(name.to_string()))?;
        Ok(f(spec))
    }
}

impl Default for IdentifierRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(
            "predictor_ls",
            Box::new(|s| {
                Box::new(PredictorArxIdentifier {
                    he: s.he,
                    h: s.h,
                    n: s.n,
                    lambda: s.lambda,
                })
            }),
        );
        r.register("naive_ls", Box::new(|s| Box::new(NaiveLsIdentifier { h: s.h })));
        r
    }
}
