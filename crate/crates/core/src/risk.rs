//! Empirical CVaR over a batch of costs and its subgradient.
//!
//! For costs `y ∈ R^M` and level `α ∈ [0, 1)`,
//! `CVaR_α(y) = max { υᵀy : υ ≥ 0, 1ᵀυ = 1, υ ≤ 1/((1−α)M) }`.
//! The maximizer puts the cap weight on the largest costs; the last
//! partially-filled weight is shared equally among tied costs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Cvar,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub alpha: f64,
    pub kind: RiskKind,
}

impl RiskSpec {
    pub fn cvar(alpha: f64) -> Self {
        Self {
            alpha,
            kind: RiskKind::Cvar,
        }
    }

    /// Weights `υ` of the risk measure at `costs`.
    pub fn weights(&self, costs: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            RiskKind::Cvar => cvar_subgradient(costs, self.alpha),
            RiskKind::Mean => cvar_subgradient(costs, 0.0),
            RiskKind::Max => max_weights(costs),
        }
    }

    pub fn evaluate(&self, costs: &[f64]) -> Result<f64> {
        let w = self.weights(costs)?;
        Ok(w.iter().zip(costs).map(|(a, b)| a * b).sum())
    }
}

fn check(costs: &[f64], alpha: f64) -> Result<()> {
    if costs.is_empty() {
        return Err(Error::input("CVaR of an empty batch"));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::input(format!("CVaR level {alpha} outside [0, 1)")));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::numeric("CVaR of non-finite costs"));
    }
    Ok(())
}

pub fn cvar(costs: &[f64], alpha: f64) -> Result<f64> {
    let w = cvar_subgradient(costs, alpha)?;
    Ok(w.iter().zip(costs).map(|(a, b)| a * b).sum())
}

/// Fills descending costs up to the cap `1/((1−α)M)`; ties at the boundary
/// split the residual weight equally.
pub fn cvar_subgradient(costs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check(costs, alpha)?;
    let cap = 1.0 / ((1.0 - alpha) * costs.len() as f64);
    Ok(fill_descending(costs, cap))
}

fn max_weights(costs: &[f64]) -> Result<Vec<f64>> {
    check(costs, 0.0)?;
    Ok(fill_descending(costs, 1.0))
}

fn fill_descending(costs: &[f64], cap: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    let mut w = vec![0.0; costs.len()];
    let mut remaining = 1.0_f64;
    let mut start = 0;
    while start < order.len() && remaining > 0.0 {
        let mut end = start + 1;
        while end < order.len() && costs[order[end]] == costs[order[start]] {
            end += 1;
        }
        let group = (end - start) as f64;
        let each = if remaining >= group * cap { cap } else { remaining / group };
        for &i in &order[start..end] {
            w[i] = each;
        }
        remaining -= each * group;
        if each < cap {
            break;
        }
        start = end;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_half_average() {
        assert_eq!(cvar(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 3.5);
        assert_eq!(cvar_subgradient(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn level_zero_is_mean() {
        let y = [0.3, -1.2, 4.0, 2.5, 0.0];
        let mean = y.iter().sum::<f64>() / 5.0;
        assert!((cvar(&y, 0.0).unwrap() - mean).abs() < 1e-15);
    }

    #[test]
    fn constant_costs() {
        for a in [0.0, 0.3, 0.9, 0.99] {
            assert!((cvar(&[5.0, 5.0, 5.0], a).unwrap() - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tail_of_ten() {
        let y: Vec<f64> = (1..=10).map(f64::from).collect();
        let w = cvar_subgradient(&y, 0.9).unwrap();
        assert!((w[9] - 1.0).abs() < 1e-12);
        assert!(w[..9].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn ties_split() {
        assert_eq!(cvar_subgradient(&[2.0, 2.0], 0.5).unwrap(), vec![0.5, 0.5]);
        // fractional cap: (1-0.5)*3 = 1.5 → cap 2/3, ties at the boundary share 1/3
        let w = cvar_subgradient(&[1.0, 3.0, 1.0], 0.5).unwrap();
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-15 && (w[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(matches!(cvar(&[], 0.5), Err(Error::Input(_))));
        assert!(cvar(&[1.0], 1.0).is_err());
        assert!(cvar(&[1.0], -0.1).is_err());
    }

    #[test]
    fn risk_spec_kinds() {
        let y = [1.0, 4.0, 4.0, 2.0];
        assert_eq!(RiskSpec { alpha: 0.7, kind: RiskKind::Mean }.evaluate(&y).unwrap(), 2.75);
        assert_eq!(RiskSpec { alpha: 0.0, kind: RiskKind::Max }.weights(&y).unwrap(), vec![0.0, 0.5, 0.5, 0.0]);
    }
}
