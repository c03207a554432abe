use rand::Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Affine map `y = W x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap<T> {
    weight: Tensor<T>,
    bias: Option<Vec<T>>,
}

/// Parameter gradients of a [`LinearMap`], same layout as the map.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> LinearMap<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0],
                actual: weight.dims().to_vec(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::LengthMismatch {
                    left: weight.rows(),
                    right: b.len(),
                });
            }
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteInput);
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = T::one();
        }
        Self {
            weight: w,
            bias: None,
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: with_bias.then(|| vec![T::zero(); out_dim]),
        }
    }

    /// Weights drawn uniformly from `[-bound, bound]`; bias (if any) zero.
    pub fn uniform(
        out_dim: usize,
        in_dim: usize,
        bound: f64,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let data = (0..out_dim * in_dim)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect();
        Self {
            weight: Tensor::from_raw(vec![out_dim, in_dim], data),
            bias: with_bias.then(|| vec![T::zero(); out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [T]> {
        self.bias.as_deref_mut()
    }

    pub fn cast<U: Real>(&self) -> LinearMap<U> {
        LinearMap {
            weight: self.weight.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&x| U::lit(x.as_f64())).collect()),
        }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.in_dim());
        let mut y: Vec<T> = self
            .weight
            .row_iter()
            .map(|w| super::dot(w, x))
            .collect();
        if let Some(b) = &self.bias {
            for (yi, &bi) in y.iter_mut().zip(b) {
                *yi = *yi + bi;
            }
        }
        y
    }

    /// Applies the map to every row of an `n × in` matrix.
    pub fn apply_rows(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::ChannelMismatch {
                expected: self.in_dim(),
                actual: x.cols(),
            });
        }
        let mut y = x.matmul_t(&self.weight)?;
        if let Some(b) = &self.bias {
            for r in 0..y.rows() {
                for (yi, &bi) in y.row_mut(r).iter_mut().zip(b) {
                    *yi = *yi + bi;
                }
            }
        }
        Ok(y)
    }

    /// Backward of [`LinearMap::apply_rows`]: returns `dL/dx` and the
    /// parameter gradients for upstream `dy`.
    pub fn backward_rows(&self, x: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, LinearGrad<T>) {
        let dx = dy.matmul(&self.weight).expect("shapes checked in forward");
        let grad = LinearGrad {
            weight: dy.t_matmul(x).expect("shapes checked in forward"),
            bias: self.bias.as_ref().map(|_| {
                let mut db = vec![T::zero(); dy.cols()];
                for r in dy.row_iter() {
                    for (d, &g) in db.iter_mut().zip(r) {
                        *d = *d + g;
                    }
                }
                db
            }),
        };
        (dx, grad)
    }

    /// Accumulates the single-vector backward into `grad` and returns `dL/dx`.
    pub fn backward_vec(&self, x: &[T], dy: &[T], grad: &mut LinearGrad<T>) -> Vec<T> {
        let (out_dim, in_dim) = (self.out_dim(), self.in_dim());
        let mut dx = vec![T::zero(); in_dim];
        let gw = grad.weight.data_mut();
        for o in 0..out_dim {
            let g = dy[o];
            if g == T::zero() {
                continue;
            }
            let w = self.weight.row(o);
            for i in 0..in_dim {
                dx[i] = dx[i] + g * w[i];
                gw[o * in_dim + i] = gw[o * in_dim + i] + g * x[i];
            }
        }
        if let Some(gb) = &mut grad.bias {
            for (b, &g) in gb.iter_mut().zip(dy) {
                *b = *b + g;
            }
        }
        dx
    }

    pub fn zero_grad(&self) -> LinearGrad<T> {
        LinearGrad {
            weight: Tensor::zeros(self.weight.dims()),
            bias: self.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
        }
    }

    /// Number of scalar parameters (weight plus bias).
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Parameters flattened as weight then bias.
    pub fn params(&self) -> Vec<T> {
        let mut p = self.weight.data().to_vec();
        if let Some(b) = &self.bias {
            p.extend_from_slice(b);
        }
        p
    }

    /// Overwrites parameters from a slice laid out like [`LinearMap::params`].
    pub fn set_params(&mut self, p: &[T]) {
        let nw = self.weight.len();
        self.weight.data_mut().copy_from_slice(&p[..nw]);
        if let Some(b) = &mut self.bias {
            let nb = b.len();
            b.copy_from_slice(&p[nw..nw + nb]);
        }
    }
}

impl<T: Real> LinearGrad<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut p = self.weight.data().to_vec();
        if let Some(b) = &self.bias {
            p.extend_from_slice(b);
        }
        p
    }

    pub fn accumulate(&mut self, other: &LinearGrad<T>) {
        self.weight.add_assign(&other.weight);
        if let (Some(a), Some(b)) = (&mut self.bias, &other.bias) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }
}
