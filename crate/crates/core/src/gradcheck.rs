//! Central finite-difference checks of reverse-mode gradients.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Gradients with magnitude below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a loss of magnitude `f` differenced with step `h`:
/// far enough above the cancellation error `eps * |f| / h` that rounding
/// alone cannot reach a relative error of 1e-4.
pub fn noise_floor(f: f64, h: f64) -> f64 {
    REL_FLOOR.max(1e5 * f64::EPSILON * f.abs().max(1.0) / h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(analytic, numeric)` at the worst coordinate.
    pub worst: (f64, f64),
}

/// Flat `(input, element)` coordinates of `inputs`.
pub fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect()
}

/// Compares the gradient of the scalar built by `build` against central
/// differences with step `h` at the given coordinates.
pub fn check_graph<F>(inputs: &[Tensor], coords: &[(usize, usize)], h: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss);
    let floor = noise_floor(g.value(loss).data()[0], h);

    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).data()[0]
    };
    let mut work = inputs.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = (0.0, 0.0);
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let up = eval(&work);
        work[i].data_mut()[j] = orig - h;
        let down = eval(&work);
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[j]);
        let e = rel_error(analytic, numeric, floor);
        if e > max_rel_error {
            max_rel_error = e;
            worst = (analytic, numeric);
        }
    }
    GradCheck { checked: coords.len(), max_rel_error, worst }
}
