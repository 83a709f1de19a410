//! Controls tabulated on a state grid against a frozen population.

use std::io::{self, Write};

use mfc_core::autodiff::{Tape, Tensor};
use mfc_core::problems::{ProblemSpec, RiccatiSolution};
use mfc_core::sim::{Policy, SimError};

use crate::config::SliceConfig;

pub const CONTROL_SLICE_SCHEMA: &str = "# schema: control_slice v1";

#[derive(Clone, Debug, PartialEq)]
pub struct SliceRow {
    pub time: f64,
    pub x: Vec<f64>,
    pub action: Vec<f64>,
    pub analytic: Option<Vec<f64>>,
}

fn per_dim(v: &[f64], j: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[j]
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Cartesian grid, first dimension varying slowest.
fn grid(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

/// Step whose action is taken at time `t`.
fn step_at(problem: &ProblemSpec, t: f64) -> usize {
    ((t / problem.dt).round() as usize).min(problem.steps() - 1)
}

/// Evaluates `policy` at every `(time, grid point)` with the population
/// read from `fixture[step]`, the particle cloud of one fixed simulation.
pub fn control_slice(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    config: &SliceConfig,
    fixture: &[Tensor],
    analytic: Option<&RiccatiSolution>,
) -> Result<Vec<SliceRow>, SimError> {
    let d = problem.state_dim;
    let k = policy.control_dim();
    let mut rows = Vec::with_capacity(config.times.len() * config.points.pow(d as u32));
    let mut tape = Tape::new();
    let bound = policy.bind(&mut tape)?;
    let mark = tape.len();
    for &t in &config.times {
        let step = step_at(problem, t);
        let population = &fixture[step];
        let n = population.rows();
        let mut mean = vec![0.0; d];
        for row in population.data().chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                let shift = if config.relative { mean[j] } else { 0.0 };
                linspace(
                    shift + per_dim(&config.lower, j),
                    shift + per_dim(&config.upper, j),
                    config.points,
                )
            })
            .collect();
        let points = grid(&axes);
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        tape.truncate(mark);
        let x = tape.leaf(Tensor::matrix(points.len(), d, flat)?)?;
        let pop = tape.leaf(population.clone())?;
        let decision = policy.act(&mut tape, bound.as_ref(), step, t, x, pop)?;
        let actions = tape.value(decision.actions).data().to_vec();
        for (i, p) in points.into_iter().enumerate() {
            let analytic = analytic.map(|sol| {
                let slope = sol.slopes()[step];
                vec![slope * (mean[0] - p[0])]
            });
            rows.push(SliceRow {
                time: t,
                action: actions[i * k..(i + 1) * k].to_vec(),
                x: p,
                analytic,
            });
        }
    }
    Ok(rows)
}

/// Writes `time,x1[,x2],action1[,action2][,analytic1]`.
pub fn write_control_slice<W: Write>(rows: &[SliceRow], out: &mut W) -> io::Result<()> {
    writeln!(out, "{CONTROL_SLICE_SCHEMA}")?;
    let Some(first) = rows.first() else {
        return writeln!(out, "time");
    };
    let mut header = vec!["time".to_string()];
    header.extend((1..=first.x.len()).map(|j| format!("x{j}")));
    header.extend((1..=first.action.len()).map(|j| format!("action{j}")));
    if let Some(a) = &first.analytic {
        header.extend((1..=a.len()).map(|j| format!("analytic{j}")));
    }
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        write!(out, "{}", r.time)?;
        for v in r.x.iter().chain(&r.action).chain(r.analytic.iter().flatten()) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
