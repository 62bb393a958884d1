//! Central finite-difference gradient checking.
//!
//! Analytic gradients come from a 32-bit graph; the numeric reference
//! re-executes the same expression in 64-bit so that cancellation in the
//! difference quotient does not produce false failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, NodeId, Tensor, TensorError};

/// An expression under test, buildable at any precision.
pub trait Probe {
    fn build<T: Element>(&self, g: &mut Graph<T>, inputs: &[NodeId]) -> Result<NodeId, TensorError>;
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input, element, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Magnitude below which gradient entries are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reduces the probe output to a scalar through a fixed random projection.
fn projected<T: Element, P: Probe>(probe: &P, inputs: &[Tensor<T>], weights: &mut Option<Tensor<T>>, seed: u64, track: bool) -> Result<(Graph<T>, Vec<NodeId>, NodeId), TensorError> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|x| if track { g.variable(x.clone()) } else { g.input(x.clone()) })
        .collect();
    let out = probe.build(&mut g, &ids)?;
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = g.value(out).shape().to_vec();
        let n = g.value(out).len();
        Tensor::new(shape, (0..n).map(|_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).collect()).expect("shape")
    });
    let w = g.input(w.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    Ok((g, ids, loss))
}

/// Compares 32-bit analytic gradients of every input against 64-bit central
/// differences with the given step.
pub fn check<P: Probe>(probe: &P, inputs: &[Tensor<f64>], step: f64, seed: u64) -> Result<GradCheckReport, TensorError> {
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    let mut w32 = None;
    let (mut g, ids, loss) = projected(probe, &inputs32, &mut w32, seed, true)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(&inputs32)
        .map(|(&id, x)| match g.grad(id) {
            Some(gr) => gr.data().iter().map(|&v| v as f64).collect(),
            None => vec![0.0; x.len()],
        })
        .collect();

    let mut w64 = w32.map(|w| w.cast::<f64>());
    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let (g, _, loss) = projected(probe, xs, &mut w64, seed, false)?;
        Ok(g.value(loss).data()[0])
    };
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
