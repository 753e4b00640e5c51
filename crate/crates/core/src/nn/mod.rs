//! A small reverse-mode autodiff engine over row-major matrices, sized for the
//! conditioned transformer: dense layers, layer norm, causal attention,
//! GELU/ReLU, dropout and Adam.
//!
//! Everything is generic over [`Scalar`]. Models run in `f32`; the same code
//! instantiated at `f64` is what the finite-difference checks exercise.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;

use std::collections::HashMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{gradient_check, GradCheck};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub(crate) use graph::softmax_in_place;
pub use optim::{clip_grad_norm, Adam};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `C = alpha A B + beta C` for strided matrices.
    ///
    /// # Safety
    /// Every addressed element must lie inside the allocations behind the
    /// pointers, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view: the matrix starts at the first element of the slice.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, F> {
    pub data: &'a [F],
    pub rs: usize,
    pub cs: usize,
}

pub(crate) struct MatMut<'a, F> {
    pub data: &'a mut [F],
    pub rs: usize,
    pub cs: usize,
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows - 1) * rs + (cols - 1) * cs + 1
}

/// Bounds-checked `C = alpha A B + beta C` with `A: m x k`, `B: k x n`.
pub(crate) fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: Mat<'_, F>,
    b: Mat<'_, F>,
    beta: F,
    c: MatMut<'_, F>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(extent(m, n, c.rs, c.cs) <= c.data.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x = if beta == F::zero() { F::zero() } else { *x * beta };
            }
        }
        return;
    }
    assert!(extent(m, k, a.rs, a.cs) <= a.data.len(), "gemm: A out of bounds");
    assert!(extent(k, n, b.rs, b.cs) <= b.data.len(), "gemm: B out of bounds");
    // SAFETY: extents checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// A named, shaped buffer with an optional gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::lit(std * z)
            })
            .collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view: all leading dimensions folded into rows.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&last, lead)) => (lead.iter().product(), last),
        }
    }
}

/// The learnable tensors of a model, addressed by index or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor<F> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<F> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.tensors.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds a backward pass's gradients onto the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (t, g) in self.tensors.iter_mut().zip(grads.iter()) {
            let Some(g) = g else { continue };
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
                None => t.grad = Some(g.clone()),
            }
        }
    }

    /// Same names and shapes, values converted to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let convert = |v: &[F]| -> Vec<G> {
            v.iter()
                .map(|x| G::from_f64(x.to_f64().expect("finite")).expect("representable"))
                .collect()
        };
        ParamSet {
            names: self.names.clone(),
            index: self.index.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    shape: t.shape.clone(),
                    data: convert(&t.data),
                    grad: t.grad.as_deref().map(convert),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_triple_loop() {
        let mut rng = crate::rng::rng_from_seed(0);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (17, 9, 33), (64, 64, 64)] {
            let a = Tensor::<f32>::normal(vec![m, k], 1.0, &mut rng).data;
            let b = Tensor::<f32>::normal(vec![k, n], 1.0, &mut rng).data;
            let mut c = vec![0.0f32; m * n];
            gemm(
                m,
                k,
                n,
                1.0,
                Mat { data: &a, rs: k, cs: 1 },
                Mat { data: &b, rs: n, cs: 1 },
                0.0,
                MatMut { data: &mut c, rs: n, cs: 1 },
            );
            for i in 0..m {
                for j in 0..n {
                    let want: f32 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                    assert!((c[i * n + j] - want).abs() < 1e-5, "{m}x{k}x{n}");
                }
            }
        }
    }

    #[test]
    fn transposed_views() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = vec![0.0; 4];
        // (2x3) * (2x3)^T
        gemm(
            2,
            3,
            2,
            1.0,
            Mat { data: &a, rs: 3, cs: 1 },
            Mat { data: &a, rs: 1, cs: 3 },
            0.0,
            MatMut { data: &mut c, rs: 2, cs: 1 },
        );
        assert_eq!(c, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn param_set_bookkeeping() {
        let mut ps = ParamSet::<f32>::new();
        let w = ps.push("w", Tensor::zeros(vec![2, 3])).unwrap();
        assert!(ps.push("w", Tensor::zeros(vec![1])).is_err());
        assert_eq!(ps.id("w"), Some(w));
        assert_eq!(ps.get(w).rows_cols(), (2, 3));
        assert_eq!(ps.n_values(), 6);
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        let wide: ParamSet<f64> = ps.cast();
        assert_eq!(wide.get(0).shape, vec![2, 3]);
    }
}
