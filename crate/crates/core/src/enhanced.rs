//! CV-driven enhanced sampling: steered MD with a moving harmonic restraint
//! and OPES with a weighted kernel-density bias.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvmodels::CollectiveVariable;
use crate::dynamics::{run, BiasEval, BiasHook, LangevinParams, RunOptions, Trajectory};
use crate::error::{Error, Result};
use crate::systems::{wrap, BasinLabel, Configuration, SystemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmdConfig {
    /// Force constant, energy per CV unit squared.
    pub k: f64,
    pub horizon_steps: u64,
    pub s_initial: f64,
    pub s_target: f64,
    pub n_replicas: usize,
    pub seed: u64,
    pub record_stride: u64,
    /// Unbiased steps in basin A before steering starts.
    pub equilibration_steps: u64,
}

impl Default for SmdConfig {
    fn default() -> Self {
        Self {
            k: 100.0,
            horizon_steps: 10_000,
            s_initial: 1.0,
            s_target: -1.0,
            n_replicas: 64,
            seed: 0,
            record_stride: 10,
            equilibration_steps: 2_000,
        }
    }
}

impl SmdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 0.0) || self.horizon_steps == 0 || self.record_stride == 0 || self.n_replicas == 0 {
            return Err(Error::InvalidParameter(
                "smd needs k >= 0, horizon_steps >= 1, record_stride >= 1, n_replicas >= 1".into(),
            ));
        }
        if !(self.s_initial.is_finite() && self.s_target.is_finite()) {
            return Err(Error::InvalidParameter("smd endpoints must be finite".into()));
        }
        Ok(())
    }
}

/// Restraint center at step `t`.
pub fn smd_target(t: f64, cfg: &SmdConfig) -> f64 {
    let big_t = cfg.horizon_steps as f64;
    (t * cfg.s_target + (big_t - t) * cfg.s_initial) / big_t
}

/// Restraint energy, CV value and force at step `t`.
pub fn smd_bias(cv: &dyn CollectiveVariable, x: &[f64], t: f64, cfg: &SmdConfig) -> Result<(f64, f64, Vec<f64>)> {
    let (s, g) = cv.value_and_gradient(x)?;
    let mut dev = smd_target(t, cfg) - s;
    if let Some(p) = cv.period() {
        dev = wrap(dev, p);
    }
    let energy = 0.5 * cfg.k * dev * dev;
    let force = g.iter().map(|gi| cfg.k * dev * gi).collect();
    Ok((energy, s, force))
}

pub fn smd_bias_force(cv: &dyn CollectiveVariable, x: &[f64], t: f64, cfg: &SmdConfig) -> Result<Vec<f64>> {
    Ok(smd_bias(cv, x, t, cfg)?.2)
}

struct SmdHook<'a> {
    cv: &'a dyn CollectiveVariable,
    cfg: &'a SmdConfig,
}

impl BiasHook for SmdHook<'_> {
    fn apply(&mut self, x: &[f64], step: u64, force: &mut [f64]) -> Result<BiasEval> {
        let (energy, s, f) = smd_bias(self.cv, x, step as f64, self.cfg)?;
        for (a, b) in force.iter_mut().zip(f) {
            *a += b;
        }
        Ok(BiasEval { energy, cv: Some(s) })
    }
}

/// Thermalize replica `r` in basin A (stream `2r`), then steer it over the
/// horizon (stream `2r + 1`). Replicas fail independently.
pub fn run_smd(
    system: &SystemSpec,
    cv: &dyn CollectiveVariable,
    langevin: &LangevinParams,
    cfg: &SmdConfig,
) -> Result<Vec<Result<Trajectory>>> {
    cfg.validate()?;
    let params = LangevinParams {
        seed: cfg.seed,
        ..*langevin
    };
    params.validate()?;
    let start = system.minimum(BasinLabel::A);
    let out = (0..cfg.n_replicas as u64)
        .into_par_iter()
        .map(|r| {
            let init = if cfg.equilibration_steps > 0 {
                let opts = RunOptions {
                    n_steps: cfg.equilibration_steps,
                    record_stride: cfg.equilibration_steps,
                    annotate: false,
                    stream: 2 * r,
                };
                run(system, &params, &start, opts, None)?
                    .frames
                    .pop()
                    .expect("final frame recorded")
            } else {
                start.clone()
            };
            let opts = RunOptions {
                n_steps: cfg.horizon_steps,
                record_stride: cfg.record_stride,
                annotate: true,
                stream: 2 * r + 1,
            };
            let mut hook = SmdHook { cv, cfg };
            run(system, &params, &init, opts, Some(&mut hook))
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpesConfig {
    pub pace: u64,
    /// Kernel bandwidth in CV units.
    pub sigma: f64,
    /// Barrier parameter; the bias never drops below `-barrier`.
    pub barrier: f64,
    /// Defaults to `beta * barrier`.
    pub gamma: Option<f64>,
    /// Defaults to `exp(-beta * barrier / (1 - 1/gamma))`.
    pub epsilon: Option<f64>,
    pub beta: f64,
    pub record_stride: u64,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for OpesConfig {
    fn default() -> Self {
        Self {
            pace: 500,
            sigma: 0.1,
            barrier: 10.0,
            gamma: None,
            epsilon: None,
            beta: 1.0,
            record_stride: 100,
            total_steps: 2_000_000,
            seed: 0,
        }
    }
}

impl OpesConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(self.beta * self.barrier)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
            .unwrap_or_else(|| (-self.beta * self.barrier / (1.0 - 1.0 / self.gamma())).exp())
    }

    /// `(1 - 1/gamma) / beta`.
    pub fn prefactor(&self) -> f64 {
        (1.0 - 1.0 / self.gamma()) / self.beta
    }

    pub fn validate(&self) -> Result<()> {
        if self.pace == 0 || self.record_stride == 0 || self.total_steps == 0 {
            return Err(Error::InvalidParameter(
                "pace, record_stride and total_steps must be positive".into(),
            ));
        }
        if !(self.sigma > 0.0 && self.barrier > 0.0 && self.beta > 0.0) {
            return Err(Error::InvalidParameter(
                "sigma, barrier and beta must be positive".into(),
            ));
        }
        if !(self.gamma() > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "bias factor gamma = {} must exceed 1",
                self.gamma()
            )));
        }
        if !(self.epsilon() > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OpesState {
    /// `(center, weight)` in deposition order.
    pub kernels: Vec<(f64, f64)>,
    pub sum_weights: f64,
    pub z: f64,
    pub n_deposits: usize,
    /// Unnormalized `sum_j w_j G(s_k, s_j)` at every center, kept for `z`.
    #[serde(skip)]
    center_sums: Vec<f64>,
}

impl PartialEq for OpesState {
    fn eq(&self, other: &Self) -> bool {
        self.kernels == other.kernels
            && self.sum_weights == other.sum_weights
            && self.z == other.z
            && self.n_deposits == other.n_deposits
    }
}

fn gauss(ds: f64, sigma: f64) -> f64 {
    (-0.5 * (ds / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

impl OpesState {
    /// Weighted kernel density `P_n(s)` and its derivative.
    pub fn probability(&self, s: f64, sigma: f64) -> (f64, f64) {
        if self.kernels.is_empty() {
            return (0.0, 0.0);
        }
        let mut p = 0.0;
        let mut dp = 0.0;
        let inv_var = 1.0 / (sigma * sigma);
        for &(c, w) in &self.kernels {
            let d = s - c;
            let g = w * (-0.5 * d * d * inv_var).exp();
            p += g;
            dp -= g * d;
        }
        let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt() * self.sum_weights);
        (p * norm, dp * inv_var * norm)
    }
}

/// Bias `V(s)` and `dV/ds`.
pub fn opes_bias(state: &OpesState, s: f64, cfg: &OpesConfig) -> (f64, f64) {
    let pref = cfg.prefactor();
    let eps = cfg.epsilon();
    if state.kernels.is_empty() {
        return (pref * eps.ln(), 0.0);
    }
    let (p, dp) = state.probability(s, cfg.sigma);
    let arg = p / state.z + eps;
    (pref * arg.ln(), pref * dp / state.z / arg)
}

/// Deposit a kernel at `s_new` weighted by the bias before insertion, then
/// refresh `z` as the mean of `P_n` over all centers.
pub fn opes_deposit(state: &mut OpesState, s_new: f64, cfg: &OpesConfig) {
    let (v, _) = opes_bias(state, s_new, cfg);
    let w = (cfg.beta * v).exp();
    if state.center_sums.len() != state.kernels.len() {
        // Restored from disk: rebuild the per-center sums.
        state.center_sums = state
            .kernels
            .iter()
            .map(|&(c, _)| {
                state
                    .kernels
                    .iter()
                    .map(|&(cj, wj)| wj * gauss(c - cj, cfg.sigma))
                    .sum()
            })
            .collect();
    }
    let mut own = w * gauss(0.0, cfg.sigma);
    for (&(c, wc), sum) in state.kernels.iter().zip(state.center_sums.iter_mut()) {
        let g = gauss(s_new - c, cfg.sigma);
        *sum += w * g;
        own += wc * g;
    }
    state.kernels.push((s_new, w));
    state.center_sums.push(own);
    state.sum_weights += w;
    state.n_deposits += 1;
    let n = state.kernels.len() as f64;
    state.z = state.center_sums.iter().sum::<f64>() / (n * state.sum_weights);
}

struct OpesHook<'a> {
    cv: &'a dyn CollectiveVariable,
    cfg: &'a OpesConfig,
    state: OpesState,
}

impl BiasHook for OpesHook<'_> {
    fn apply(&mut self, x: &[f64], step: u64, force: &mut [f64]) -> Result<BiasEval> {
        let (s, g) = self.cv.value_and_gradient(x)?;
        if step > 0 && step % self.cfg.pace == 0 {
            opes_deposit(&mut self.state, s, self.cfg);
        }
        let (v, dv) = opes_bias(&self.state, s, self.cfg);
        for (f, gi) in force.iter_mut().zip(&g) {
            *f -= dv * gi;
        }
        Ok(BiasEval { energy: v, cv: Some(s) })
    }
}

/// OPES run from `init`; frames carry the CV value and the bias in force at
/// that step.
pub fn run_opes(
    system: &SystemSpec,
    cv: &dyn CollectiveVariable,
    langevin: &LangevinParams,
    cfg: &OpesConfig,
    init: &Configuration,
) -> Result<(Trajectory, OpesState)> {
    cfg.validate()?;
    if (langevin.beta() - cfg.beta).abs() > 1e-12 * cfg.beta {
        return Err(Error::InvalidParameter(format!(
            "opes beta {} does not match the thermostat ({})",
            cfg.beta,
            langevin.beta()
        )));
    }
    let params = LangevinParams {
        seed: cfg.seed,
        ..*langevin
    };
    let mut hook = OpesHook {
        cv,
        cfg,
        state: OpesState::default(),
    };
    let opts = RunOptions {
        n_steps: cfg.total_steps,
        record_stride: cfg.record_stride,
        annotate: true,
        stream: 0,
    };
    let traj = run(system, &params, init, opts, Some(&mut hook))?;
    Ok((traj, hook.state))
}
