use nalgebra::{Cholesky, DMatrix};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Number of time points on each blur trajectory.
pub const TRAJECTORY_POINTS: usize = 256;

/// Matérn-3/2 covariance `σ²(1 + √3 r/ℓ) exp(−√3 r/ℓ)`.
pub fn matern32(r: f64, length_scale: f64, std: f64) -> f64 {
    let a = 3f64.sqrt() * r.abs() / length_scale;
    std * std * (1.0 + a) * (-a).exp()
}

/// Motion-blur kernel sampler with a cached covariance factor.
#[derive(Debug, Clone)]
pub struct BlurSampler {
    size: usize,
    factor: Option<DMatrix<f64>>,
}

impl BlurSampler {
    pub fn new(size: usize, length_scale: f64, gp_std: f64) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "blur kernel size must be odd, got {size}"
            )));
        }
        if !(length_scale > 0.0) || gp_std < 0.0 || !gp_std.is_finite() {
            return Err(Error::InvalidInput(format!(
                "invalid Matérn parameters (ℓ = {length_scale}, σ = {gp_std})"
            )));
        }
        let factor = if gp_std == 0.0 {
            None
        } else {
            let n = TRAJECTORY_POINTS;
            let ts: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
            let jitter = 1e-10 * gp_std * gp_std;
            let k = DMatrix::from_fn(n, n, |i, j| {
                matern32(ts[i] - ts[j], length_scale, gp_std) + if i == j { jitter } else { 0.0 }
            });
            let chol = Cholesky::new(k).ok_or_else(|| {
                Error::InvalidInput("Matérn covariance is not positive definite".into())
            })?;
            Some(chol.l())
        };
        Ok(BlurSampler { size, factor })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Two independent GP paths in kernel coordinates `[−1, 1]²`.
    pub fn trajectory<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(f64, f64)> {
        let n = TRAJECTORY_POINTS;
        match &self.factor {
            None => vec![(0.0, 0.0); n],
            Some(l) => {
                let zx = nalgebra::DVector::from_vec(normal_tensor(rng, &[n]).into_data());
                let zy = nalgebra::DVector::from_vec(normal_tensor(rng, &[n]).into_data());
                let (px, py) = (l * zx, l * zy);
                px.iter().zip(py.iter()).map(|(&a, &b)| (a, b)).collect()
            }
        }
    }

    /// Rasterizes a fresh trajectory, centered at its mean, by bilinear
    /// splatting and normalizes it to unit sum.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        rasterize(&self.trajectory(rng), self.size)
    }
}

/// Bilinear splat of points given in `[−1, 1]²` coordinates relative to
/// their mean; points beyond the grid are clamped to its border.
pub fn rasterize(points: &[(f64, f64)], size: usize) -> Tensor {
    let n = points.len() as f64;
    let (mx, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let half = (size - 1) as f64 / 2.0;
    let hi = (size - 1) as f64;
    let mut k = vec![0.0; size * size];
    for &(px, py) in points {
        let c = ((px - mx) * half + half).clamp(0.0, hi);
        let r = ((py - my) * half + half).clamp(0.0, hi);
        let (c0, r0) = (c.floor(), r.floor());
        let (fc, fr) = (c - c0, r - r0);
        let (c0, r0) = (c0 as usize, r0 as usize);
        let (c1, r1) = ((c0 + 1).min(size - 1), (r0 + 1).min(size - 1));
        k[r0 * size + c0] += (1.0 - fr) * (1.0 - fc);
        k[r0 * size + c1] += (1.0 - fr) * fc;
        k[r1 * size + c0] += fr * (1.0 - fc);
        k[r1 * size + c1] += fr * fc;
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Tensor::new(vec![size, size], k)
}

pub fn sample_motion_blur_kernel<R: Rng + ?Sized>(
    size: usize,
    length_scale: f64,
    gp_std: f64,
    rng: &mut R,
) -> Result<Tensor> {
    Ok(BlurSampler::new(size, length_scale, gp_std)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matern_values() {
        assert_eq!(matern32(0.0, 0.3, 0.5), 0.25);
        let r: f64 = 0.2;
        let a = 3f64.sqrt() * r / 0.3;
        assert!((matern32(r, 0.3, 1.0) - (1.0 + a) * (-a).exp()).abs() < 1e-15);
        assert_eq!(matern32(-r, 0.3, 1.0), matern32(r, 0.3, 1.0));
    }

    #[test]
    fn kernels_are_normalized_and_reproducible() {
        for (size, l, s) in [(11, 0.3, 0.25), (19, 0.5, 0.4)] {
            let sampler = BlurSampler::new(size, l, s).unwrap();
            for seed in 0..50 {
                let k = sampler.sample(&mut ChaCha8Rng::seed_from_u64(seed));
                assert_eq!(k.shape(), &[size, size]);
                assert!((k.sum() - 1.0).abs() <= 1e-12);
                assert!(k.data().iter().all(|&v| v >= 0.0));
                assert_eq!(k, sampler.sample(&mut ChaCha8Rng::seed_from_u64(seed)));
            }
        }
    }

    #[test]
    fn zero_std_gives_delta() {
        let k = sample_motion_blur_kernel(11, 0.3, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(k.data()[5 * 11 + 5], 1.0);
        assert_eq!(k.sum(), 1.0);
        let k =
            sample_motion_blur_kernel(11, 0.3, 1e-12, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((k.data()[5 * 11 + 5] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trajectory_marginal_variance_matches_covariance() {
        let sampler = BlurSampler::new(11, 0.3, 0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut s, mut s2) = (0.0, 0.0);
        let n = 4000;
        for _ in 0..n {
            let p = sampler.trajectory(&mut rng)[100].0;
            s += p;
            s2 += p * p;
        }
        let var = s2 / n as f64 - (s / n as f64).powi(2);
        assert!((var / 0.0625 - 1.0).abs() < 0.08, "{var}");
    }

    #[test]
    fn rejects_even_size() {
        assert!(BlurSampler::new(10, 0.3, 0.25).is_err());
        assert!(BlurSampler::new(11, 0.0, 0.25).is_err());
    }
}
