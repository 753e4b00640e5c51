use rand::Rng as _;

use super::{Graph, ParamSet, Var};
use crate::rng::rng_from_seed;

const TOLERANCE: f64 = 1e-3;

/// Outcome of [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error between analytic and numeric derivatives.
    pub worst: f64,
    pub coords: usize,
    /// Coordinates whose stencil straddled a kink (e.g. ReLU at zero) and
    /// were re-verified with a step 1000 times smaller.
    pub refined: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.worst < tol
    }
}

fn rel_err(numeric: f64, exact: f64) -> f64 {
    let denom = numeric.abs().max(exact.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (numeric - exact).abs() / denom
    }
}

/// Compares analytic gradients with central finite differences of step `h`
/// on `coords` randomly drawn parameter coordinates.
///
/// Pairs where both derivatives are below `1e-10` count as exact.
pub fn gradient_check(
    params: &mut ParamSet<f64>,
    build: impl Fn(&mut Graph<'_, f64>) -> Var,
    coords: usize,
    h: f64,
    seed: u64,
) -> GradCheck {
    let (f0, analytic) = {
        let mut g = Graph::new(params, true);
        let loss = build(&mut g);
        (g.scalar(loss), g.backward(loss).expect("scalar loss"))
    };
    let mut out = GradCheck {
        worst: 0.0,
        coords,
        refined: 0,
    };
    let total = params.n_values();
    if total == 0 {
        return out;
    }
    let mut rng = rng_from_seed(seed);
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut id = 0;
        while flat >= params.get(id).len() {
            flat -= params.get(id).len();
            id += 1;
        }
        let orig = params.get(id).data[flat];
        let mut eval = |v: f64| {
            params.get_mut(id).data[flat] = v;
            let mut g = Graph::new(params, true);
            let loss = build(&mut g);
            g.scalar(loss)
        };
        let up = eval(orig + h);
        let down = eval(orig - h);
        let exact = analytic.get(id).map_or(0.0, |g| g[flat]);
        let mut err = rel_err((up - down) / (2.0 * h), exact);
        if err >= TOLERANCE {
            let (right, left) = ((up - f0) / h, (f0 - down) / h);
            if rel_err(right, left) >= TOLERANCE {
                let fine = h * 1e-3;
                let numeric = (eval(orig + fine) - eval(orig - fine)) / (2.0 * fine);
                err = rel_err(numeric, exact);
                out.refined += 1;
            }
        }
        params.get_mut(id).data[flat] = orig;
        out.worst = out.worst.max(err);
    }
    out
}
