use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{const_row, Gaussian, MeanFieldModel, ProblemError, ProblemSpec};
use crate::autodiff::{AutodiffError, Tape, Var};

/// Optimal execution with a linear price impact from the population's mean
/// trading rate, one inventory per asset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceImpactParams {
    pub horizon: f64,
    pub dt: f64,
    pub mu0: Vec<Gaussian>,
    /// Standard deviations of the common initial shift per asset.
    pub x0_std: Vec<f64>,
    pub sigma: Vec<f64>,
    pub c_alpha: f64,
    pub c_x: f64,
    pub c_g: f64,
    /// Impact coefficients `h_i`.
    pub impact: Vec<f64>,
    /// Volatility of the common noise in the mid-price; the price never
    /// enters the cost and is only used for trajectory dumps.
    pub price_sigma_common: Vec<f64>,
}

impl Default for PriceImpactParams {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            dt: 0.01,
            mu0: vec![Gaussian::new(1.0, 0.3), Gaussian::new(2.0, 1.0)],
            x0_std: vec![1.0, 1.0],
            sigma: vec![0.7, 1.0],
            c_alpha: 2.0,
            c_x: 0.1,
            c_g: 0.3,
            impact: vec![1.0, 0.8],
            price_sigma_common: vec![0.4, 0.4],
        }
    }
}

impl PriceImpactParams {
    pub fn validate(&self) -> Result<(), ProblemError> {
        if !(self.c_alpha > 0.0 && self.c_x > 0.0 && self.c_g > 0.0) {
            return Err(ProblemError::InvalidParams(
                "price impact needs c_alpha, c_x, c_g > 0".into(),
            ));
        }
        let d = self.mu0.len();
        if d == 0 || self.x0_std.len() != d || self.sigma.len() != d || self.impact.len() != d {
            return Err(ProblemError::InvalidParams(
                "mu0, x0_std, sigma and impact must have one entry per asset".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriceImpact {
    pub c_alpha: f64,
    pub c_x: f64,
    pub c_g: f64,
    pub impact: Vec<f64>,
}

impl MeanFieldModel for PriceImpact {
    fn drift(&self, _tape: &mut Tape, _t: f64, _x: Var, a: Var) -> Result<Var, AutodiffError> {
        Ok(a)
    }

    fn running_cost(&self, tape: &mut Tape, _t: f64, x: Var, a: Var) -> Result<Var, AutodiffError> {
        let n = tape.value(x).rows();
        let h = const_row(tape, &self.impact)?;
        let abar = tape.mean_rows(a)?;
        let habar = tape.mul(abar, h)?;
        let habar = tape.broadcast_rows(habar, n)?;
        let impact = tape.mul(x, habar)?;
        let a2 = tape.square(a)?;
        let effort = tape.scale(a2, 0.5 * self.c_alpha)?;
        let x2 = tape.square(x)?;
        let holding = tape.scale(x2, 0.5 * self.c_x)?;
        let s = tape.add(effort, holding)?;
        let s = tape.sub(s, impact)?;
        tape.sum_cols(s)
    }

    fn terminal_cost(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let x2 = tape.square(x)?;
        let s = tape.sum_cols(x2)?;
        tape.scale(s, 0.5 * self.c_g)
    }
}

pub fn price_impact_spec(p: &PriceImpactParams) -> Result<ProblemSpec, ProblemError> {
    p.validate()?;
    let d = p.mu0.len();
    let spec = ProblemSpec {
        name: "price_impact".into(),
        state_dim: d,
        control_dim: d,
        horizon: p.horizon,
        dt: p.dt,
        initial: p.mu0.clone(),
        common_initial: p.x0_std.iter().map(|&s| Gaussian::new(0.0, s)).collect(),
        sigma: p.sigma.clone(),
        sigma_common: vec![0.0; d],
        model: Arc::new(PriceImpact {
            c_alpha: p.c_alpha,
            c_x: p.c_x,
            c_g: p.c_g,
            impact: p.impact.clone(),
        }),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::problems::testing::eval;

    fn model(h: [f64; 2]) -> PriceImpact {
        PriceImpact {
            c_alpha: 2.0,
            c_x: 0.1,
            c_g: 0.3,
            impact: h.to_vec(),
        }
    }

    #[test]
    fn table_defaults() {
        let spec = price_impact_spec(&PriceImpactParams::default()).unwrap();
        assert_eq!((spec.state_dim, spec.control_dim, spec.steps()), (2, 2, 100));
        assert_eq!(spec.initial, vec![Gaussian::new(1.0, 0.3), Gaussian::new(2.0, 1.0)]);
        assert_eq!(spec.sigma, vec![0.7, 1.0]);
        assert_eq!(spec.sigma_common, vec![0.0, 0.0]);
        assert_eq!(spec.common_initial[1], Gaussian::new(0.0, 1.0));
    }

    #[test]
    fn zero_action_cost_is_holding_only() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let a = Tensor::zeros(&[2, 2]);
        let (b, f, g) = eval(&model([1.0, 0.8]), 0.0, &x, &a);
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert!((f.data()[0] - 0.05 * 5.0).abs() < 1e-15);
        assert!((g.data()[1] - 0.15 * 1.25).abs() < 1e-15);
    }

    #[test]
    fn no_impact_decouples_particles() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let a1 = Tensor::matrix(2, 2, vec![0.3, -0.2, 0.0, 0.0]).unwrap();
        let a2 = Tensor::matrix(2, 2, vec![0.3, -0.2, 5.0, -7.0]).unwrap();
        let (_, f1, _) = eval(&model([0.0, 0.0]), 0.0, &x, &a1);
        let (_, f2, _) = eval(&model([0.0, 0.0]), 0.0, &x, &a2);
        assert_eq!(f1.data()[0], f2.data()[0]);
    }

    #[test]
    fn population_enters_through_mean_action() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let a1 = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.0, 1.0]).unwrap();
        let a2 = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.0, 1.0]).unwrap();
        let x2 = Tensor::matrix(2, 2, vec![1.0, 2.0, 9.0, -9.0]).unwrap();
        let m = model([1.0, 0.8]);
        let (_, f1, _) = eval(&m, 0.0, &x, &a1);
        let (_, f2, _) = eval(&m, 0.0, &x2, &a2);
        assert_eq!(f1.data()[0], f2.data()[0]);
        // abar = (0.65, 0.4): 0.5*2*(0.09+0.04) + 0.05*(1+4) - (1*0.65 + 2*0.8*0.4)
        let expected = 0.13 + 0.25 - (0.65 + 0.64);
        assert!((f1.data()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn rejects_nonpositive_weights() {
        let p = PriceImpactParams {
            c_g: 0.0,
            ..Default::default()
        };
        assert!(price_impact_spec(&p).is_err());
    }
}
