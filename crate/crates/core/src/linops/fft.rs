//! 2D FFT on row-major complex buffers.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

fn transform(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(buf.len(), h * w);
    if w > 1 {
        let f = plan(w, inverse);
        for row in buf.chunks_exact_mut(w) {
            f.process(row);
        }
    }
    if h > 1 {
        let f = plan(h, inverse);
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            f.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
    }
}

/// Unnormalized forward DFT.
pub fn fft2(buf: &mut [Complex64], h: usize, w: usize) {
    transform(buf, h, w, false);
}

/// Inverse DFT including the 1/(h·w) factor.
pub fn ifft2(buf: &mut [Complex64], h: usize, w: usize) {
    transform(buf, h, w, true);
    let s = 1.0 / (h * w) as f64;
    for v in buf.iter_mut() {
        *v *= s;
    }
}

pub fn to_complex(data: &[f64]) -> Vec<Complex64> {
    data.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}

/// Index of frequency `-k` for flat index `k` on an `h×w` grid.
pub fn negated_index(k: usize, h: usize, w: usize) -> usize {
    let (i, j) = (k / w, k % w);
    ((h - i) % h) * w + (w - j) % w
}

/// Applies the real circulant map `F⁻¹ diag(mult) F` to a real vector.
/// `mult` must be symmetric under frequency negation for the output to be
/// real; the imaginary residue is discarded.
pub fn fourier_multiply(x: &[f64], mult: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut buf = to_complex(x);
    fft2(&mut buf, h, w);
    for (b, m) in buf.iter_mut().zip(mult) {
        *b *= *m;
    }
    ifft2(&mut buf, h, w);
    buf.iter().map(|c| c.re).collect()
}
