use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{squared_distance_to, Gaussian, MeanFieldModel, ProblemError, ProblemSpec};
use crate::autodiff::{AutodiffError, Tape, Var};

/// Crowd motion with congestion: moving costs more where the population
/// density, smoothed by a Gaussian kernel, is high.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrowdMotionParams {
    pub horizon: f64,
    pub dt: f64,
    pub mu0: Vec<Gaussian>,
    pub x0_std: Vec<f64>,
    pub sigma: Vec<f64>,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub target: Vec<f64>,
    pub target2: Vec<f64>,
    /// Kernel `amplitude * exp(-|z|^2 / (2 bandwidth^2))`.
    pub bandwidth: f64,
    pub amplitude: f64,
}

impl Default for CrowdMotionParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            dt: 0.01,
            mu0: vec![Gaussian::new(0.0, 0.1), Gaussian::new(0.0, 0.2)],
            x0_std: vec![1.0, 1.0],
            sigma: vec![0.7, 1.0],
            c0: 0.1,
            c1: 0.0,
            c2: 1.0,
            c3: 1.0,
            target: vec![0.0, 0.0],
            target2: vec![2.0, 2.0],
            bandwidth: 0.5,
            amplitude: 1.0,
        }
    }
}

impl CrowdMotionParams {
    pub fn validate(&self) -> Result<(), ProblemError> {
        if !(self.c0 > 0.0) {
            return Err(ProblemError::InvalidParams(format!("c0 = {} must be > 0", self.c0)));
        }
        if !(self.bandwidth > 0.0) {
            return Err(ProblemError::InvalidParams(format!(
                "kernel bandwidth = {} must be > 0",
                self.bandwidth
            )));
        }
        let d = self.mu0.len();
        if d == 0
            || [self.x0_std.len(), self.sigma.len(), self.target.len(), self.target2.len()]
                .iter()
                .any(|&l| l != d)
        {
            return Err(ProblemError::InvalidParams(
                "mu0, x0_std, sigma, target and target2 must share the state dimension".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrowdMotion {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub target: Vec<f64>,
    pub target2: Vec<f64>,
    pub bandwidth: f64,
    pub amplitude: f64,
}

impl CrowdMotion {
    /// `c0 + (rho * mu)(x_i)` for every particle, `[n, 1]`.
    pub fn congestion(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let density = tape.gaussian_kernel_mean(x, self.bandwidth)?;
        let density = tape.scale(density, self.amplitude)?;
        tape.shift(density, self.c0)
    }
}

impl MeanFieldModel for CrowdMotion {
    fn drift(&self, _tape: &mut Tape, _t: f64, _x: Var, a: Var) -> Result<Var, AutodiffError> {
        Ok(a)
    }

    fn running_cost(&self, tape: &mut Tape, _t: f64, x: Var, a: Var) -> Result<Var, AutodiffError> {
        let m = self.congestion(tape, x)?;
        let a2 = tape.square(a)?;
        let a2 = tape.sum_cols(a2)?;
        let effort = tape.mul(m, a2)?;
        let effort = tape.scale(effort, 0.5)?;
        let crowd = tape.scale(m, self.c2)?;
        let mut cost = tape.add(effort, crowd)?;
        if self.c1 != 0.0 {
            let dist = squared_distance_to(tape, x, &self.target)?;
            let dist = tape.scale(dist, self.c1)?;
            cost = tape.add(cost, dist)?;
        }
        Ok(cost)
    }

    fn terminal_cost(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let dist = squared_distance_to(tape, x, &self.target2)?;
        tape.scale(dist, self.c3)
    }
}

pub fn crowd_motion_spec(p: &CrowdMotionParams) -> Result<ProblemSpec, ProblemError> {
    p.validate()?;
    let d = p.mu0.len();
    let spec = ProblemSpec {
        name: "crowd_motion".into(),
        state_dim: d,
        control_dim: d,
        horizon: p.horizon,
        dt: p.dt,
        initial: p.mu0.clone(),
        common_initial: p.x0_std.iter().map(|&s| Gaussian::new(0.0, s)).collect(),
        sigma: p.sigma.clone(),
        sigma_common: vec![0.0; d],
        model: Arc::new(CrowdMotion {
            c0: p.c0,
            c1: p.c1,
            c2: p.c2,
            c3: p.c3,
            target: p.target.clone(),
            target2: p.target2.clone(),
            bandwidth: p.bandwidth,
            amplitude: p.amplitude,
        }),
    };
    spec.validate()?;
    Ok(spec)
}
