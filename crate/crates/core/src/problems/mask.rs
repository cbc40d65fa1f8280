use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape parameters of synthetic elliptical frequency tracks, as fractions
/// of the grid size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackParams {
    /// Radius of the always-sampled low-frequency disk.
    pub disk_radius: f64,
    pub min_axis: f64,
    pub max_axis: f64,
    /// Smallest minor/major axis ratio.
    pub min_ratio: f64,
    /// Smallest and largest arc length in radians.
    pub min_arc: f64,
    pub max_arc: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        TrackParams {
            disk_radius: 0.06,
            min_axis: 0.08,
            max_axis: 0.48,
            min_ratio: 0.2,
            min_arc: PI / 4.0,
            max_arc: PI,
        }
    }
}

fn wrap(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

fn mark(mask: &mut [f64], h: usize, w: usize, u: i64, v: i64) {
    mask[wrap(u, h) * w + wrap(v, w)] = 1.0;
    mask[wrap(-u, h) * w + wrap(-v, w)] = 1.0;
}

/// Binary Hermitian-symmetric sampling mask in FFT index order: a
/// low-frequency disk plus `n_tracks` elliptical arcs and their mirrors.
///
/// Each track consumes the same number of random draws, so for a fixed
/// seed the mask with `n + 1` tracks contains the mask with `n`.
pub fn sample_fourier_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    n_tracks: usize,
    p: &TrackParams,
    rng: &mut R,
) -> Result<Tensor> {
    if n_tracks == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!(
            "mask {h}×{w} with {n_tracks} tracks"
        )));
    }
    if !(p.min_axis > 0.0
        && p.max_axis >= p.min_axis
        && p.min_ratio > 0.0
        && p.min_ratio <= 1.0
        && p.max_arc >= p.min_arc)
    {
        return Err(Error::InvalidInput(format!(
            "invalid track parameters {p:?}"
        )));
    }
    let mut mask = vec![0.0; h * w];
    let scale = h.min(w) as f64;
    let r0 = p.disk_radius * scale;
    let ri = r0.ceil() as i64;
    for u in -ri..=ri {
        for v in -ri..=ri {
            if ((u * u + v * v) as f64) <= r0 * r0 {
                mark(&mut mask, h, w, u, v);
            }
        }
    }
    mark(&mut mask, h, w, 0, 0);
    for _ in 0..n_tracks {
        let a = rng.random_range(p.min_axis..=p.max_axis) * scale;
        let b = a * rng.random_range(p.min_ratio..=1.0);
        let rot = rng.random_range(0.0..PI);
        let start = rng.random_range(0.0..2.0 * PI);
        let span = rng.random_range(p.min_arc..=p.max_arc);
        let steps = ((a * span * 4.0).ceil() as usize).max(8);
        let (cr, sr) = (rot.cos(), rot.sin());
        for s in 0..=steps {
            let phi = start + span * s as f64 / steps as f64;
            let (ex, ey) = (a * phi.cos(), b * phi.sin());
            let u = (cr * ex - sr * ey).round() as i64;
            let v = (sr * ex + cr * ey).round() as i64;
            if u.unsigned_abs() as usize <= h / 2 && v.unsigned_abs() as usize <= w / 2 {
                mark(&mut mask, h, w, u, v);
            }
        }
    }
    Ok(Tensor::new(vec![h, w], mask))
}

/// Fraction of sampled frequencies.
pub fn coverage(mask: &Tensor) -> f64 {
    mask.sum() / mask.len() as f64
}

/// Largest `|m[u,v] − m[−u,−v]|`.
pub fn hermitian_defect(mask: &Tensor) -> Result<f64> {
    let (h, w) = mask.dims2()?;
    let m = mask.data();
    let mut worst: f64 = 0.0;
    for u in 0..h {
        for v in 0..w {
            let mirror = wrap(-(u as i64), h) * w + wrap(-(v as i64), w);
            worst = worst.max((m[u * w + v] - m[mirror]).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{fft, LinearOperator};
    use crate::rng::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(seed: u64, tracks: usize) -> Tensor {
        sample_fourier_mask(
            32,
            32,
            tracks,
            &TrackParams::default(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn binary_and_hermitian() {
        for seed in 0..20 {
            let m = mask(seed, 5);
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(hermitian_defect(&m).unwrap(), 0.0);
            assert_eq!(m.data()[0], 1.0);
        }
        let odd = sample_fourier_mask(
            15,
            9,
            4,
            &TrackParams::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert_eq!(hermitian_defect(&odd).unwrap(), 0.0);
    }

    #[test]
    fn coverage_grows_with_tracks() {
        for seed in 0..20 {
            let mut last = 0.0;
            for n in 1..8 {
                let c = coverage(&mask(seed, n));
                assert!(c >= last, "seed {seed}: {c} < {last}");
                last = c;
            }
            assert!(coverage(&mask(seed, 7)) > coverage(&mask(seed, 1)));
        }
    }

    #[test]
    fn adjoint_of_real_image_is_real() {
        let m = mask(3, 6);
        let op = LinearOperator::real_fourier_mask(&m).unwrap();
        let x = normal_tensor(&mut ChaCha8Rng::seed_from_u64(4), &[32, 32]);
        let back = op.adjoint(&op.apply(&x).unwrap()).unwrap();
        assert_eq!(back.shape(), &[32, 32]);
        let mut img = fft::to_complex(x.data());
        fft::fft2(&mut img, 32, 32);
        img.iter_mut().zip(m.data()).for_each(|(c, &v)| *c *= v);
        fft::ifft2(&mut img, 32, 32);
        let imag = img.iter().fold(0.0f64, |a, c| a.max(c.im.abs()));
        assert!(imag <= 1e-10, "{imag}");
        for (a, c) in back.data().iter().zip(&img) {
            assert!((a - c.re).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_zero_tracks() {
        assert!(sample_fourier_mask(
            8,
            8,
            0,
            &TrackParams::default(),
            &mut ChaCha8Rng::seed_from_u64(1)
        )
        .is_err());
    }
}
