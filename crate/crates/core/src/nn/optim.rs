use super::{ParamSet, Scalar};

/// Bias-corrected Adam over a whole parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from the gradients stored on `params`; a missing gradient
    /// counts as zero.
    pub fn step(&mut self, params: &mut ParamSet<F>) {
        if self.m.len() != params.len() {
            self.m = (0..params.len()).map(|i| vec![F::zero(); params.get(i).len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(t));
        let c2 = F::lit(1.0 - self.beta2.powi(t));
        let lr = F::lit(self.lr);
        let eps = F::lit(self.eps);
        let one = F::one();
        for ((tensor, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = tensor.grad.as_ref() else {
                for ((p, mi), vi) in tensor.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi *= b1;
                    *vi *= b2;
                    *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
                continue;
            };
            for (((p, g), mi), vi) in tensor
                .data
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * *g;
                *vi = b2 * *vi + (one - b2) * *g * *g;
                *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(params: &mut ParamSet<F>, max_norm: f64) -> f64 {
    let norm = params
        .tensors_mut()
        .filter_map(|t| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for t in params.tensors_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    fn scalar_param(p: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.push("p", Tensor::new(vec![1], vec![p]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = scalar_param(1.5);
        ps.get_mut(0).grad = Some(vec![0.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut ps);
        ps.zero_grad();
        adam.step(&mut ps);
        assert_eq!(ps.get(0).data[0], 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = scalar_param(1.0);
        ps.get_mut(0).grad = Some(vec![1.0]);
        Adam::new(7e-4).step(&mut ps);
        assert!((ps.get(0).data[0] - (1.0 - 7e-4)).abs() < 1e-10);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let target = 3.0;
        let mut ps = scalar_param(0.0);
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let p = ps.get(0).data[0];
            ps.get_mut(0).grad = Some(vec![2.0 * (p - target)]);
            adam.step(&mut ps);
        }
        assert!((ps.get(0).data[0] - target).abs() < 1e-3, "{}", ps.get(0).data[0]);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("a", Tensor::zeros(vec![2])).unwrap();
        ps.push("b", Tensor::zeros(vec![1])).unwrap();
        ps.get_mut(0).grad = Some(vec![3.0, 0.0]);
        ps.get_mut(1).grad = Some(vec![4.0]);
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        let g = ps.get(0).grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6 && g[1] == 0.0);
        assert!((clip_grad_norm(&mut ps, 10.0) - 1.0).abs() < 1e-6);
    }
}
