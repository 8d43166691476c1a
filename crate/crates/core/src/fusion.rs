//! Dempster–Shafer combination of per-factor belief states and the trust
//! gate built on it.
//!
//! Scalar functions operate on plain `f64`; the `*_in_graph` versions build
//! the same arithmetic on a [`Graph`] over a batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Gate sensitivities and the ignorance asymmetry coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            alpha: 2.0,
            gamma: 3.0,
            epsilon: 0.1,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.gamma > 0.0 && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("gate parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Subjective-logic decomposition of one Dirichlet: `Σb + u = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefState {
    pub b: Vec<f64>,
    pub u: f64,
    pub strength: f64,
}

impl BeliefState {
    /// From non-negative evidence with prior strength `beta`.
    pub fn from_evidence(e: &[f64], beta: f64) -> Result<Self> {
        if e.is_empty() || beta <= 0.0 || e.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument("evidence must be non-empty and non-negative, beta > 0".into()));
        }
        let m = e.len() as f64;
        let strength = e.iter().sum::<f64>() + beta * m;
        Ok(BeliefState {
            b: e.iter().map(|x| x / strength).collect(),
            u: beta * m / strength,
            strength,
        })
    }

    pub fn alpha(&self, beta: f64) -> Vec<f64> {
        self.b.iter().map(|b| b * self.strength + beta).collect()
    }

    pub fn total_belief(&self) -> f64 {
        self.b.iter().sum()
    }
}

fn check_same_m(b1: &[f64], b2: &[f64]) -> Result<()> {
    if b1.len() != b2.len() {
        return Err(Error::InvalidArgument(format!(
            "belief states over {} and {} prototypes",
            b1.len(),
            b2.len()
        )));
    }
    Ok(())
}

/// `K = (Σb₁)(Σb₂) − Σᵢ b₁ᵢ b₂ᵢ`.
pub fn conflict(b1: &[f64], b2: &[f64]) -> Result<f64> {
    check_same_m(b1, b2)?;
    let s1: f64 = b1.iter().sum();
    let s2: f64 = b2.iter().sum();
    let diag: f64 = b1.iter().zip(b2).map(|(x, y)| x * y).sum();
    Ok(s1 * s2 - diag)
}

/// `Σ_{i≠j} b₁ᵢ b₂ⱼ` by the double loop.
pub fn conflict_brute_force(b1: &[f64], b2: &[f64]) -> Result<f64> {
    check_same_m(b1, b2)?;
    let mut k = 0.0;
    for (i, x) in b1.iter().enumerate() {
        for (j, y) in b2.iter().enumerate() {
            if i != j {
                k += x * y;
            }
        }
    }
    Ok(k)
}

/// `min(1, u₁u₂/(1−K) + ε|u₁−u₂|)`.
pub fn fused_ignorance(u1: f64, u2: f64, k: f64, epsilon: f64) -> Result<f64> {
    if !(k < 1.0) {
        return Err(Error::InvalidArgument(format!("conflict {k} must be < 1")));
    }
    Ok((u1 * u2 / (1.0 - k) + epsilon * (u1 - u2).abs()).min(1.0))
}

/// `λ_min + (1−λ_min)·exp(−αK − γI)`.
pub fn trust_gate(k: f64, i: f64, lambda_min: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&k) || !(0.0..=1.0).contains(&i) || !(lambda_min > 0.0 && lambda_min < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "trust gate inputs out of range: K={k}, I={i}, lambda_min={lambda_min}"
        )));
    }
    Ok(lambda_min + (1.0 - lambda_min) * (-alpha * k - gamma * i).exp())
}

/// `σ(cos(z₁, z₂)/τ)` for unit-norm inputs.
pub fn cosine_gate(z1: &[f64], z2: &[f64], tau: f64) -> Result<f64> {
    check_same_m(z1, z2)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let c: f64 = z1.iter().zip(z2).map(|(a, b)| a * b).sum();
    Ok(1.0 / (1.0 + (-c / tau).exp()))
}

/// `(K, I)` for one factor of one pair.
pub fn fuse(s1: &BeliefState, s2: &BeliefState, epsilon: f64) -> Result<(f64, f64)> {
    let k = conflict(&s1.b, &s2.b)?;
    Ok((k, fused_ignorance(s1.u, s2.u, k, epsilon)?))
}

/// Belief state of a batch on a graph: `b` is `[N, M]`, `u` and `strength`
/// are `[N]`, `alpha` is `[N, M]`.
#[derive(Clone, Copy, Debug)]
pub struct BeliefVars {
    pub alpha: Var,
    pub strength: Var,
    pub b: Var,
    pub u: Var,
}

impl BeliefVars {
    /// Builds the Dirichlet parameterization from evidence `e: [N, M]`.
    pub fn from_evidence(g: &mut Graph, e: Var, beta: f64) -> Result<Self> {
        let shape = g.shape(e).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("belief_state", &shape, &[]));
        }
        let m = shape[1] as f64;
        let alpha = g.add_scalar(e, beta);
        let strength = g.sum_last(alpha);
        let ones = g.constant(Tensor::full(&[shape[0]], 1.0));
        let inv = g.div(ones, strength)?;
        let b = g.scale_rows(e, inv)?;
        let u = g.scale(inv, beta * m);
        Ok(BeliefVars { alpha, strength, b, u })
    }
}

/// Per-sample `K` and `I` for one factor, `[N]` each.
pub fn fuse_in_graph(g: &mut Graph, s1: &BeliefVars, s2: &BeliefVars, epsilon: f64) -> Result<(Var, Var)> {
    let t1 = g.sum_last(s1.b);
    let t2 = g.sum_last(s2.b);
    let prod = g.mul(t1, t2)?;
    let diag = g.row_dot(s1.b, s2.b)?;
    let k = g.sub(prod, diag)?;
    let neg_k = g.scale(k, -1.0);
    let one_minus_k = g.add_scalar(neg_k, 1.0);
    let uu = g.mul(s1.u, s2.u)?;
    let dempster = g.div(uu, one_minus_k)?;
    let du = g.sub(s1.u, s2.u)?;
    let adu = g.abs(du);
    let asym = g.scale(adu, epsilon);
    let raw = g.add(dempster, asym)?;
    let i = g.min_scalar(raw, 1.0);
    Ok((k, i))
}

/// Per-sample trust weight `[N]` from in-graph `K` and `I`.
pub fn trust_gate_in_graph(g: &mut Graph, k: Var, i: Var, lambda_min: f64, cfg: &GateConfig) -> Result<Var> {
    let ak = g.scale(k, -cfg.alpha);
    let gi = g.scale(i, -cfg.gamma);
    let arg = g.add(ak, gi)?;
    let ex = g.exp(arg);
    let scaled = g.scale(ex, 1.0 - lambda_min);
    Ok(g.add_scalar(scaled, lambda_min))
}

/// Per-sample `σ(cos/τ)` with `τ = softplus(raw_tau)`; `raw_tau` is a
/// scalar (shape `[]`) graph value.
pub fn cosine_gate_in_graph(g: &mut Graph, z1: Var, z2: Var, raw_tau: Var) -> Result<Var> {
    let cos = g.row_dot(z1, z2)?;
    let tau = g.softplus(raw_tau);
    let n = g.shape(cos).to_vec();
    let ones = g.constant(Tensor::full(&n, 1.0));
    let tau_b = g.mul(ones, tau)?;
    let logits = g.div(cos, tau_b)?;
    Ok(g.sigmoid(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evidence_limits() {
        let s = BeliefState::from_evidence(&[0.0; 64], 0.05).unwrap();
        assert!((s.strength - 3.2).abs() < 1e-12 && (s.u - 1.0).abs() < 1e-15);
        let s = BeliefState::from_evidence(&[0.05; 64], 0.05).unwrap();
        assert!((s.strength - 6.4).abs() < 1e-12 && (s.u - 0.5).abs() < 1e-15);
        assert!((s.b[0] - 0.0078125).abs() < 1e-15);
        let mut e = vec![0.0; 64];
        e[0] = 10.0;
        let s = BeliefState::from_evidence(&e, 0.05).unwrap();
        assert!((s.strength - 13.2).abs() < 1e-12);
        assert!((s.b[0] - 10.0 / 13.2).abs() < 1e-15 && (s.u - 3.2 / 13.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(conflict(&[0.1], &[0.1, 0.2]).is_err());
        assert!(fused_ignorance(0.5, 0.5, 1.0, 0.1).is_err());
        assert!(trust_gate(1.0, 0.0, 0.05, 2.0, 3.0).is_err());
        assert!(trust_gate(0.0, 1.1, 0.05, 2.0, 3.0).is_err());
        assert!(trust_gate(0.0, 0.0, 0.0, 2.0, 3.0).is_err());
        assert!(BeliefState::from_evidence(&[-1.0], 0.05).is_err());
    }
}
