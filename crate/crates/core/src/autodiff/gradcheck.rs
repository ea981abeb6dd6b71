//! Central-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::{Graph, GraphError, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic − central| / max(1e-12, |analytic| + |central|)`.
    pub max_rel_error: f64,
    /// `(input name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose ±eps perturbation crosses a max tie or clamp edge;
    /// excluded from `max_rel_error`.
    pub tie_adjacent: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        let better = self.worst.is_none() || other.max_rel_error > self.max_rel_error;
        if other.worst.is_some() && better {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.tie_adjacent.extend(other.tie_adjacent);
    }
}

/// Central-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error `O(h²)`.
    #[default]
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation `O(h⁴)`.
    FourPoint,
}

impl Stencil {
    /// `(step, weight)`: the derivative is `Σ weight·(f(x+step·h) − f(x−step·h)) / h`.
    fn pairs(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::TwoPoint => &[(1.0, 0.5)],
            Stencil::FourPoint => &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)],
        }
    }
}

/// Relative error measure used by the checker.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Checks a scalar function of one tensor at `point`.
pub fn finite_difference_check<F>(scalar_fn: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport, GraphError>
where
    F: FnOnce(&mut Graph<f64>, Var) -> Result<Var, GraphError>,
{
    finite_difference_check_with(scalar_fn, point, eps, Stencil::TwoPoint)
}

pub fn finite_difference_check_with<F>(
    scalar_fn: F,
    point: &Tensor<f64>,
    eps: f64,
    stencil: Stencil,
) -> Result<GradCheckReport, GraphError>
where
    F: FnOnce(&mut Graph<f64>, Var) -> Result<Var, GraphError>,
{
    let mut g = Graph::new();
    let x = g.input("x", point.dims(), true)?;
    let y = scalar_fn(&mut g, x)?;
    let mut bindings = BTreeMap::new();
    bindings.insert("x".to_string(), point.clone());
    check_graph_with(&mut g, y, &bindings, eps, stencil)
}

/// Checks every `requires_grad` input of an already built graph whose
/// output `y` is a single element.
pub fn check_graph(
    g: &mut Graph<f64>,
    y: Var,
    bindings: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
) -> Result<GradCheckReport, GraphError> {
    check_graph_with(g, y, bindings, eps, Stencil::TwoPoint)
}

/// [`check_graph`] with an explicit difference stencil.
pub fn check_graph_with(
    g: &mut Graph<f64>,
    y: Var,
    bindings: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    stencil: Stencil,
) -> Result<GradCheckReport, GraphError> {
    g.forward(bindings)?;
    let base_sig = g.kink_signature();
    let analytic = g.backward_scalar(y)?;
    let mut report = GradCheckReport::default();
    for (name, grad) in &analytic {
        let mut part = GradCheckReport::default();
        for (i, &a) in grad.data().iter().enumerate() {
            let orig = g.input_value_mut(name).expect("bound").data()[i];
            let mut numeric = 0.0;
            let mut tie = false;
            for &(step, weight) in stencil.pairs() {
                g.input_value_mut(name).unwrap().data_mut()[i] = orig + step * eps;
                g.run()?;
                let plus = g.scalar_value(y)?;
                tie |= g.kink_signature() != base_sig;
                g.input_value_mut(name).unwrap().data_mut()[i] = orig - step * eps;
                g.run()?;
                let minus = g.scalar_value(y)?;
                tie |= g.kink_signature() != base_sig;
                numeric += weight * (plus - minus);
            }
            g.input_value_mut(name).unwrap().data_mut()[i] = orig;
            numeric /= eps;

            if tie {
                part.tie_adjacent.push((name.clone(), i));
                continue;
            }
            let err = relative_error(a, numeric);
            part.checked += 1;
            if err > part.max_rel_error || part.worst.is_none() {
                part.max_rel_error = part.max_rel_error.max(err);
                part.worst = Some((name.clone(), i));
            }
        }
        report.merge(part);
    }
    g.run()?;
    Ok(report)
}
