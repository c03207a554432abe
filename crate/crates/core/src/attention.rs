//! Single-head residual cross-attention,
//! `out = softmax(q kᵀ / √d) v + q` with `q = W_q X`, `k = W_k Y`, `v = W_v Y`,
//! shared by the scene-memory update, query initialization and decoding.

use crate::error::{Error, Result};
use crate::tensor::{softmax_backward, softmax_unchecked, LinearGrad, LinearMap, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention<T> {
    pub w_q: LinearMap<T>,
    pub w_k: LinearMap<T>,
    pub w_v: LinearMap<T>,
}

/// Intermediates kept from the forward pass for [`CrossAttention::backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Row-stochastic `n_queries × n_keys` attention matrix.
    pub attn: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub queries: Tensor<T>,
    pub keys_values: Tensor<T>,
    pub w_q: LinearGrad<T>,
    pub w_k: LinearGrad<T>,
    pub w_v: LinearGrad<T>,
}

impl<T: Real> CrossAttention<T> {
    pub fn new(w_q: LinearMap<T>, w_k: LinearMap<T>, w_v: LinearMap<T>) -> Result<Self> {
        let d = w_q.out_dim();
        for m in [&w_k, &w_v] {
            if m.out_dim() != d {
                return Err(Error::ChannelMismatch {
                    expected: d,
                    actual: m.out_dim(),
                });
            }
        }
        if w_k.in_dim() != w_v.in_dim() {
            return Err(Error::ChannelMismatch {
                expected: w_k.in_dim(),
                actual: w_v.in_dim(),
            });
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn dim(&self) -> usize {
        self.w_q.out_dim()
    }

    pub fn cast<U: Real>(&self) -> CrossAttention<U> {
        CrossAttention {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
        }
    }

    fn scale(&self) -> T {
        T::one() / T::lit(self.dim() as f64).sqrt()
    }

    pub fn forward(&self, queries: &Tensor<T>, keys_values: &Tensor<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        if keys_values.rows() == 0 {
            return Err(Error::EmptyKeys);
        }
        let q = self.w_q.apply_rows(queries)?;
        let k = self.w_k.apply_rows(keys_values)?;
        let v = self.w_v.apply_rows(keys_values)?;
        let mut attn = q.matmul_t(&k)?;
        let s = self.scale();
        for r in 0..attn.rows() {
            let row = attn.row_mut(r);
            for x in row.iter_mut() {
                *x = *x * s;
            }
            softmax_unchecked(row);
        }
        let mut out = attn.matmul(&v)?;
        out.add_assign(&q);
        if !out.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok((out, AttentionCache { q, k, v, attn }))
    }

    pub fn backward(
        &self,
        queries: &Tensor<T>,
        keys_values: &Tensor<T>,
        cache: &AttentionCache<T>,
        d_out: &Tensor<T>,
    ) -> AttentionGrads<T> {
        let s = self.scale();
        let mut dq = d_out.clone();
        let da = d_out.matmul_t(&cache.v).expect("forward shapes");
        let dv = cache.attn.t_matmul(d_out).expect("forward shapes");
        let mut dlogits = Tensor::zeros(cache.attn.dims());
        for r in 0..da.rows() {
            let g = softmax_backward(cache.attn.row(r), da.row(r));
            for (d, gi) in dlogits.row_mut(r).iter_mut().zip(g) {
                *d = gi * s;
            }
        }
        dq.add_assign(&dlogits.matmul(&cache.k).expect("forward shapes"));
        let dk = dlogits.t_matmul(&cache.q).expect("forward shapes");

        let (d_queries, w_q) = self.w_q.backward_rows(queries, &dq);
        let (mut d_kv, w_k) = self.w_k.backward_rows(keys_values, &dk);
        let (d_kv_v, w_v) = self.w_v.backward_rows(keys_values, &dv);
        d_kv.add_assign(&d_kv_v);
        AttentionGrads {
            queries: d_queries,
            keys_values: d_kv,
            w_q,
            w_k,
            w_v,
        }
    }

    /// Flattened parameters in `w_q, w_k, w_v` order.
    pub fn params(&self) -> Vec<T> {
        let mut p = self.w_q.params();
        p.extend(self.w_k.params());
        p.extend(self.w_v.params());
        p
    }

    pub fn set_params(&mut self, p: &[T]) {
        let (a, b) = (self.w_q.param_count(), self.w_k.param_count());
        self.w_q.set_params(&p[..a]);
        self.w_k.set_params(&p[a..a + b]);
        self.w_v.set_params(&p[a + b..]);
    }
}

impl<T: Real> AttentionGrads<T> {
    /// Parameter gradients laid out like [`CrossAttention::params`].
    pub fn params(&self) -> Vec<T> {
        let mut p = self.w_q.flatten();
        p.extend(self.w_k.flatten());
        p.extend(self.w_v.flatten());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn layer(rng: &mut ChaCha8Rng, c: usize, bias: bool) -> CrossAttention<f64> {
        CrossAttention::new(
            LinearMap::uniform(c, c, 0.8, bias, rng),
            LinearMap::uniform(c, c, 0.8, bias, rng),
            LinearMap::uniform(c, c, 0.8, bias, rng),
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut att = layer(&mut rng, 4, true);
        for b in [att.w_q.bias_mut(), att.w_k.bias_mut(), att.w_v.bias_mut()] {
            for x in b.unwrap() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
        let x = random(&mut rng, 3, 4);
        let y = random(&mut rng, 5, 4);
        let u = random(&mut rng, 3, 4);
        let (_, cache) = att.forward(&x, &y).unwrap();
        let g = att.backward(&x, &y, &cache, &u);

        let obj_x = |v: &[f64]| {
            let xx = Tensor::matrix(3, 4, v.to_vec()).unwrap();
            att.forward(&xx, &y).unwrap().0.inner(&u)
        };
        assert!(grad_check(obj_x, x.data(), g.queries.data()).unwrap() <= 1e-4);
        let obj_y = |v: &[f64]| {
            let yy = Tensor::matrix(5, 4, v.to_vec()).unwrap();
            att.forward(&x, &yy).unwrap().0.inner(&u)
        };
        assert!(grad_check(obj_y, y.data(), g.keys_values.data()).unwrap() <= 1e-4);
        let obj_p = |p: &[f64]| {
            let mut a = att.clone();
            a.set_params(p);
            a.forward(&x, &y).unwrap().0.inner(&u)
        };
        assert!(grad_check(obj_p, &att.params(), &g.params()).unwrap() <= 1e-4);
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let att = layer(&mut rng, 3, false);
        let (_, cache) = att
            .forward(&random(&mut rng, 4, 3), &random(&mut rng, 6, 3))
            .unwrap();
        for r in cache.attn.row_iter() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&a| a >= 0.0));
        }
    }

    #[test]
    fn rejects_mismatched_projections() {
        let a = LinearMap::<f32>::identity(3);
        let b = LinearMap::<f32>::zeros(2, 3, false);
        assert!(CrossAttention::new(a.clone(), b, a).is_err());
    }
}
