use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{deviation_from_mean, Gaussian, MeanFieldModel, ProblemError, ProblemSpec};
use crate::autodiff::{AutodiffError, Tape, Var};

/// Interbank lending model: log-cash reserves mean-revert towards the
/// population average, controls are lending/borrowing rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemicRiskParams {
    pub horizon: f64,
    pub dt: f64,
    pub mu0_mean: f64,
    pub mu0_std: f64,
    /// Correlation with the common noise.
    pub rho: f64,
    /// Mean-reversion speed.
    pub a: f64,
    /// Terminal deviation weight.
    pub c: f64,
    /// Cross term weight; convexity needs `q^2 <= eps`.
    pub q: f64,
    pub eps: f64,
    pub sigma: f64,
}

impl Default for SystemicRiskParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            dt: 0.01,
            mu0_mean: 1.0,
            mu0_std: 0.1,
            rho: 0.1,
            a: 1.0,
            c: 1.0,
            q: 0.5,
            eps: 10.0,
            sigma: 1.0,
        }
    }
}

impl SystemicRiskParams {
    pub fn validate(&self) -> Result<(), ProblemError> {
        if self.q * self.q > self.eps {
            return Err(ProblemError::InvalidParams(format!(
                "q^2 = {} exceeds eps = {}; running cost is not convex",
                self.q * self.q,
                self.eps
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(ProblemError::InvalidParams(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if self.sigma < 0.0 || self.mu0_std < 0.0 {
            return Err(ProblemError::InvalidParams("negative volatility".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemicRisk {
    pub a: f64,
    pub c: f64,
    pub q: f64,
    pub eps: f64,
}

impl MeanFieldModel for SystemicRisk {
    fn drift(&self, tape: &mut Tape, _t: f64, x: Var, a: Var) -> Result<Var, AutodiffError> {
        let dev = deviation_from_mean(tape, x)?;
        let pull = tape.scale(dev, self.a)?;
        tape.add(pull, a)
    }

    fn running_cost(&self, tape: &mut Tape, _t: f64, x: Var, a: Var) -> Result<Var, AutodiffError> {
        let dev = deviation_from_mean(tape, x)?;
        let a2 = tape.square(a)?;
        let effort = tape.scale(a2, 0.5)?;
        let ad = tape.mul(a, dev)?;
        let cross = tape.scale(ad, -self.q)?;
        let d2 = tape.square(dev)?;
        let spread = tape.scale(d2, 0.5 * self.eps)?;
        let s = tape.add(effort, cross)?;
        tape.add(s, spread)
    }

    fn terminal_cost(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let dev = deviation_from_mean(tape, x)?;
        let d2 = tape.square(dev)?;
        tape.scale(d2, 0.5 * self.c)
    }
}

/// Correlated noise `sigma (sqrt(1 - rho^2) eps + rho eps0)` is split into an
/// idiosyncratic volatility `sigma sqrt(1 - rho^2)` and a common one `sigma rho`.
pub fn systemic_risk_spec(p: &SystemicRiskParams) -> Result<ProblemSpec, ProblemError> {
    p.validate()?;
    let spec = ProblemSpec {
        name: "systemic_risk".into(),
        state_dim: 1,
        control_dim: 1,
        horizon: p.horizon,
        dt: p.dt,
        initial: vec![Gaussian::new(p.mu0_mean, p.mu0_std)],
        common_initial: vec![Gaussian::dirac(0.0)],
        sigma: vec![p.sigma * (1.0 - p.rho * p.rho).sqrt()],
        sigma_common: vec![p.sigma * p.rho],
        model: Arc::new(SystemicRisk {
            a: p.a,
            c: p.c,
            q: p.q,
            eps: p.eps,
        }),
    };
    spec.validate()?;
    Ok(spec)
}

/// Terminal-value Riccati solution `eta` on the time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub eta: Vec<f64>,
    pub terminal: f64,
    pub q: f64,
}

impl RiccatiSolution {
    /// Feedback slope `phi_t = q + eta_t` of the optimal control
    /// `A* = phi_t (Xbar - x)`, one value per grid time.
    pub fn slopes(&self) -> Vec<f64> {
        self.eta.iter().map(|e| self.q + e).collect()
    }

    /// Slope at the grid point nearest to `t`.
    pub fn slope_at(&self, t: f64) -> f64 {
        let dt = self.times.get(1).map_or(1.0, |t1| t1 - self.times[0]);
        let i = ((t - self.times[0]) / dt).round().clamp(0.0, (self.times.len() - 1) as f64) as usize;
        self.q + self.eta[i]
    }

    pub fn control(&self, t: f64, x: f64, mean: f64) -> f64 {
        self.slope_at(t) * (mean - x)
    }
}

/// Solves `eta' = eta^2 + 2 (a + q) eta - (eps - q^2)`, `eta_T = c` backwards
/// with classical RK4 on the `dt` grid.
///
/// The equation follows from minimising over linear feedbacks
/// `A = phi (Xbar - X)` on the deviation `Y = X - Xbar`, whose variance
/// `v` obeys `v' = -2 (a + phi) v + sigma^2 (1 - rho^2)` (common noise
/// cancels); the Pontryagin condition gives `phi = q + eta`.
pub fn systemic_risk_analytic(p: &SystemicRiskParams) -> Result<RiccatiSolution, ProblemError> {
    p.validate()?;
    let steps = (p.horizon / p.dt).round() as usize;
    let k = p.eps - p.q * p.q;
    let lin = 2.0 * (p.a + p.q);
    let rhs = |eta: f64| eta * eta + lin * eta - k;
    let mut eta = vec![0.0; steps + 1];
    eta[steps] = p.c;
    let h = -p.dt;
    for n in (0..steps).rev() {
        let y = eta[n + 1];
        let k1 = rhs(y);
        let k2 = rhs(y + 0.5 * h * k1);
        let k3 = rhs(y + 0.5 * h * k2);
        let k4 = rhs(y + h * k3);
        let next = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !next.is_finite() || next.abs() > 1e12 {
            return Err(ProblemError::RiccatiBlowUp { time: n as f64 * p.dt });
        }
        eta[n] = next;
    }
    Ok(RiccatiSolution {
        times: (0..=steps).map(|n| n as f64 * p.dt).collect(),
        eta,
        terminal: p.c,
        q: p.q,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::problems::testing::eval;

    #[test]
    fn table_defaults() {
        let p = SystemicRiskParams::default();
        assert_eq!(
            (p.horizon, p.dt, p.mu0_mean, p.mu0_std, p.rho, p.a, p.c, p.q, p.eps, p.sigma),
            (1.0, 0.01, 1.0, 0.1, 0.1, 1.0, 1.0, 0.5, 10.0, 1.0)
        );
        let spec = systemic_risk_spec(&p).unwrap();
        assert_eq!(spec.steps(), 100);
        assert!((spec.sigma[0] - (1.0f64 - 0.01).sqrt()).abs() < 1e-15);
        assert!((spec.sigma_common[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_convex_cost_rejected() {
        let p = SystemicRiskParams {
            q: 4.0,
            eps: 10.0,
            ..Default::default()
        };
        assert!(matches!(systemic_risk_spec(&p), Err(ProblemError::InvalidParams(_))));
        assert!(systemic_risk_analytic(&p).is_err());
    }

    #[test]
    fn equal_particles_zero_cost() {
        let m = SystemicRisk { a: 1.0, c: 1.0, q: 0.5, eps: 10.0 };
        let x = Tensor::matrix(3, 1, vec![0.5; 3]).unwrap();
        let a = Tensor::matrix(3, 1, vec![0.0; 3]).unwrap();
        let (b, f, g) = eval(&m, 0.0, &x, &a);
        assert!(b.data().iter().chain(f.data()).chain(g.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_pair_running_cost() {
        let m = SystemicRisk { a: 1.0, c: 1.0, q: 0.0, eps: 10.0 };
        let x = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let a = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let (_, f, _) = eval(&m, 0.0, &x, &a);
        assert_eq!(f.data(), &[5.0, 5.0]);
    }

    #[test]
    fn depends_on_population_only_through_mean() {
        let m = SystemicRisk { a: 1.0, c: 1.0, q: 0.5, eps: 10.0 };
        // same mean (1.0), different spread; particle 0 at 0.5 in both
        let x1 = Tensor::matrix(3, 1, vec![0.5, 1.0, 1.5]).unwrap();
        let x2 = Tensor::matrix(3, 1, vec![0.5, -0.5, 3.0]).unwrap();
        let a = Tensor::matrix(3, 1, vec![0.2, 0.0, 0.0]).unwrap();
        let (b1, f1, g1) = eval(&m, 0.0, &x1, &a);
        let (b2, f2, g2) = eval(&m, 0.0, &x2, &a);
        assert_eq!(b1.data()[0], b2.data()[0]);
        assert_eq!(f1.data()[0], f2.data()[0]);
        assert_eq!(g1.data()[0], g2.data()[0]);
    }

    #[test]
    fn riccati_terminal_condition_exact() {
        let sol = systemic_risk_analytic(&SystemicRiskParams::default()).unwrap();
        assert_eq!(*sol.eta.last().unwrap(), 1.0);
        assert_eq!(sol.times.len(), 101);
        // backwards from eta_T = 1 the solution rises towards the positive root
        let root = (-3.0 + (9.0f64 + 4.0 * 9.75).sqrt()) / 2.0;
        assert!(sol.eta[0] > 1.0 && sol.eta[0] < root);
    }
}
