//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Conv2dGeometry, Graph, Primitive, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub max_rel_err: Vec<f64>,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|&e| e <= self.rtol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences with the given `step`.
///
/// Stop-gradient outputs are frozen at their unperturbed values during the
/// perturbed evaluations, which is the detached semantics.
pub fn grad_check<F>(build: F, params: &[Tensor], step: f64, rtol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let frozen = g.stop_values().to_vec();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_frozen_stops(frozen.clone());
        let vars: Vec<Var> = perturbed.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work = params.to_vec();
    let mut max_rel_err = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param has a gradient entry").clone();
        let mut worst = 0.0f64;
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
        max_rel_err.push(worst);
    }
    Ok(GradCheckReport { max_rel_err, rtol })
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    }
}

/// One instance of every differentiable primitive, with fixed geometry where
/// the primitive takes arguments.
pub fn all_primitives() -> Vec<Primitive> {
    use Primitive as P;
    vec![
        P::MatMul,
        P::Transpose,
        P::Add,
        P::Sub,
        P::Mul,
        P::Div,
        P::ScaleRows,
        P::Scale(-1.7),
        P::AddScalar(0.3),
        P::MinScalar(0.0),
        P::Softplus,
        P::Relu,
        P::Sigmoid,
        P::Exp,
        P::Log,
        P::Abs,
        P::Square,
        P::LnGamma,
        P::Digamma,
        P::Sum,
        P::Mean,
        P::SumLast,
        P::L2NormalizeLast,
        P::RowDot,
        P::LogSumExpLast,
        P::ConcatRows,
        P::ConcatLast,
        P::SliceRows(1, 3),
        P::SliceLast(1, 3),
        P::GatherRows(vec![2, 0, 2]),
        P::Reshape(vec![3, 4]),
        P::Conv2d(Conv2dGeometry { kernel: 3, stride: 2, padding: 1 }),
        P::GlobalAvgPool,
    ]
}

/// Random inputs for `kind`, kept inside its domain and away from kinks.
pub fn sample_inputs(kind: &Primitive, rng: &mut impl Rng) -> Vec<Tensor> {
    use Primitive as P;
    let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..5));
    match kind {
        P::MatMul => vec![rand_tensor(rng, &[r, c], -1.0, 1.0), rand_tensor(rng, &[c, 3], -1.0, 1.0)],
        P::Add | P::Sub | P::Mul => vec![rand_tensor(rng, &[r, c], -1.0, 1.0), rand_tensor(rng, &[c], -1.0, 1.0)],
        P::Div => vec![rand_tensor(rng, &[r, c], -1.0, 1.0), rand_tensor(rng, &[c], 0.5, 2.0)],
        P::ScaleRows => vec![rand_tensor(rng, &[r, c], -1.0, 1.0), rand_tensor(rng, &[r], -1.0, 1.0)],
        P::RowDot => vec![rand_tensor(rng, &[r, c], -1.0, 1.0), rand_tensor(rng, &[r, c], -1.0, 1.0)],
        P::Log | P::LnGamma | P::Digamma => vec![rand_tensor(rng, &[r, c], 0.2, 5.0)],
        P::Abs | P::Relu => vec![rand_tensor(rng, &[r, c], 0.1, 1.0).map(|v| if v > 0.55 { v } else { -v })],
        P::MinScalar(_) => vec![rand_tensor(rng, &[r, c], -1.0, -0.1).map(|v| if v < -0.55 { v } else { -v + 0.9 })],
        P::ConcatRows => vec![rand_tensor(rng, &[r, c], -1.0, 1.0), rand_tensor(rng, &[2, c], -1.0, 1.0)],
        P::ConcatLast => vec![rand_tensor(rng, &[r, c], -1.0, 1.0), rand_tensor(rng, &[r, 2], -1.0, 1.0)],
        P::SliceRows(..) | P::GatherRows(_) => vec![rand_tensor(rng, &[3, c], -1.0, 1.0)],
        P::SliceLast(..) => vec![rand_tensor(rng, &[r, 4], -1.0, 1.0)],
        P::Reshape(_) => vec![rand_tensor(rng, &[2, 6], -1.0, 1.0)],
        P::Conv2d(_) => vec![rand_tensor(rng, &[2, 5, 5, 2], -1.0, 1.0), rand_tensor(rng, &[18, 3], -1.0, 1.0)],
        P::GlobalAvgPool => vec![rand_tensor(rng, &[2, 3, 3, 2], -1.0, 1.0)],
        _ => vec![rand_tensor(rng, &[r, c], -1.5, 1.5)],
    }
}

/// Reduces `out` to the scalar `sum(r * out)` with a random fixed `r`.
pub fn project_to_scalar(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

/// Checks `cases` random instances of every primitive.
pub fn primitive_sweep(cases: usize, seed: u64, step: f64, rtol: f64) -> Result<Vec<(Primitive, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in all_primitives() {
        for case in 0..cases {
            let inputs = sample_inputs(&kind, &mut rng);
            let report = grad_check(
                |g, p| {
                    let y = g.forward_primitive(&kind, p)?;
                    project_to_scalar(g, y, case as u64)
                },
                &inputs,
                step,
                rtol,
            )?;
            out.push((kind.clone(), report));
        }
    }
    Ok(out)
}
