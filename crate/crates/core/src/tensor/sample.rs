use super::{Real, Tensor};

/// Normalized coordinate `(x, y)` of the center of pixel `(i, j)` on an
/// `h × w` grid.
pub fn pixel_center<T: Real>(i: usize, j: usize, h: usize, w: usize) -> [T; 2] {
    [
        T::lit((j as f64 + 0.5) / w as f64),
        T::lit((i as f64 + 0.5) / h as f64),
    ]
}

/// The four taps of a bilinear lookup together with the derivatives of
/// their weights with respect to the normalized sampling point.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    pub idx: [usize; 4],
    pub weight: [T; 4],
    pub dweight_dx: [T; 4],
    pub dweight_dy: [T; 4],
}

fn axis<T: Real>(coord: T, extent: usize) -> (usize, usize, T, T) {
    // pixel-space coordinate, centers at integers
    let n = T::lit(extent as f64);
    let p = coord * n - T::lit(0.5);
    let hi = T::lit((extent - 1) as f64);
    if extent == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    if p < T::zero() {
        return (0, 1, T::zero(), T::zero());
    }
    if p > hi {
        return (extent - 2, extent - 1, T::one(), T::zero());
    }
    let base = p.floor().to_usize().unwrap_or(0).min(extent - 2);
    let frac = p - T::lit(base as f64);
    (base, base + 1, frac, n)
}

impl<T: Real> Stencil<T> {
    /// Stencil for `point = (x, y)` on an `h × w` grid. Points outside the
    /// span of pixel centers are clamped to the border centers, where the
    /// point derivative is zero.
    pub fn new(point: [T; 2], h: usize, w: usize) -> Self {
        let (x0, x1, fx, sx) = axis(point[0], w);
        let (y0, y1, fy, sy) = axis(point[1], h);
        let (gx, gy) = (T::one() - fx, T::one() - fy);
        Self {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weight: [gx * gy, fx * gy, gx * fy, fx * fy],
            dweight_dx: [-gy * sx, gy * sx, -fy * sx, fy * sx],
            dweight_dy: [-gx * sy, -fx * sy, gx * sy, fx * sy],
        }
    }

    /// Interpolates one channel plane (`h·w` values).
    #[inline]
    pub fn sample_plane(&self, plane: &[T]) -> T {
        (0..4).fold(T::zero(), |acc, t| acc + self.weight[t] * plane[self.idx[t]])
    }

    /// Derivative of the interpolated plane value with respect to `(x, y)`.
    #[inline]
    pub fn plane_point_grad(&self, plane: &[T]) -> [T; 2] {
        let mut g = [T::zero(); 2];
        for t in 0..4 {
            let v = plane[self.idx[t]];
            g[0] = g[0] + self.dweight_dx[t] * v;
            g[1] = g[1] + self.dweight_dy[t] * v;
        }
        g
    }

    /// Adds `upstream` back onto the taps of one plane.
    #[inline]
    pub fn scatter_plane(&self, dplane: &mut [T], upstream: T) {
        for t in 0..4 {
            dplane[self.idx[t]] = dplane[self.idx[t]] + self.weight[t] * upstream;
        }
    }
}

/// Bilinear lookup of every channel of a `C × H × W` map at a normalized
/// point, clamped to the border pixel centers.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, point: [T; 2]) -> Vec<T> {
    let (h, w) = (map.height(), map.width());
    let st = Stencil::new(point, h, w);
    map.data()
        .chunks_exact(h * w)
        .map(|plane| st.sample_plane(plane))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> Tensor<f64> {
        // 2 channels, 2 × 3
        Tensor::new(
            vec![2, 2, 3],
            vec![
                1.0, 2.0, 3.0, 4.0, 5.0, 6.0, //
                -1.0, 0.0, 1.0, 2.0, 3.0, 4.0,
            ],
        )
        .unwrap()
    }

    #[test]
    fn exact_at_pixel_centers() {
        let m = map();
        for i in 0..2 {
            for j in 0..3 {
                let got = bilinear_sample(&m, pixel_center(i, j, 2, 3));
                let want = m.pixel(i, j);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn midpoint_is_mean() {
        let m = map();
        let a: [f64; 2] = pixel_center(1, 0, 2, 3);
        let b: [f64; 2] = pixel_center(1, 1, 2, 3);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let got = bilinear_sample(&m, mid);
        assert!((got[0] - 4.5).abs() < 1e-12);
        assert!((got[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn clamps_outside() {
        let m = map();
        assert_eq!(bilinear_sample(&m, [-3.0, -3.0]), vec![1.0, -1.0]);
        assert_eq!(bilinear_sample(&m, [7.0, 9.0]), vec![6.0, 4.0]);
    }

    #[test]
    fn single_pixel_map() {
        let m = Tensor::new(vec![1, 1, 1], vec![2.5f32]).unwrap();
        assert_eq!(bilinear_sample(&m, [0.9, 0.1]), vec![2.5]);
    }

    #[test]
    fn weights_sum_to_one() {
        for &(x, y) in &[(0.1, 0.2), (0.5, 0.5), (0.99, 0.01), (-1.0, 2.0)] {
            let st = Stencil::<f64>::new([x, y], 4, 5);
            let s: f64 = st.weight.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
