//! Linear forward models, Gaussian likelihood proximal maps and the exact
//! Gaussian conditional sampler.
//!
//! Convolution uses periodic boundaries, so `AᵀA` is diagonal in the 2D
//! Fourier basis for circulant blurs, Fourier masks and the identity. For
//! those operators both the proximal solve and the conditional sampler are
//! a single elementwise division in frequency space. Dense operators fall
//! back to conjugate gradients and are excluded from the sampler.

pub mod fft;
mod tape_ops;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

pub use tape_ops::{conditional_noise_node, prox_node};

#[derive(Debug, Clone)]
enum Repr {
    Identity {
        dim: usize,
    },
    Circulant {
        kernel: Tensor,
        height: usize,
        width: usize,
        /// DFT of the kernel embedded with its center at the origin.
        spectrum: Vec<Complex64>,
    },
    FourierMask {
        mask: Vec<Complex64>,
        height: usize,
        width: usize,
    },
    Dense {
        matrix: Tensor,
    },
}

/// Forward model `A` with adjoint and spectral information.
#[derive(Debug, Clone)]
pub struct LinearOperator {
    repr: Repr,
}

/// Which family an operator belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Identity,
    Circulant2D,
    FourierMask,
    Dense,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Identity => "identity",
            OperatorKind::Circulant2D => "circulant2d",
            OperatorKind::FourierMask => "fourier_mask",
            OperatorKind::Dense => "dense",
        }
    }
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        LinearOperator {
            repr: Repr::Identity { dim },
        }
    }

    /// Periodic 2D convolution of an `height×width` image with `kernel`.
    /// Kernel entry `(i, j)` acts at offset `(i − kh/2, j − kw/2)`.
    pub fn circulant(kernel: Tensor, height: usize, width: usize) -> Result<Self> {
        let (kh, kw) = kernel.dims2()?;
        if kh > height || kw > width {
            return Err(Error::InvalidInput(format!(
                "kernel {kh}×{kw} larger than image {height}×{width}"
            )));
        }
        if !kernel.all_finite() {
            return Err(Error::InvalidInput("non-finite kernel entry".into()));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); height * width];
        let (ci, cj) = (kh / 2, kw / 2);
        for i in 0..kh {
            for j in 0..kw {
                let r = (i + height - ci) % height;
                let c = (j + width - cj) % width;
                buf[r * width + c] += kernel.data()[i * kw + j];
            }
        }
        fft::fft2(&mut buf, height, width);
        Ok(LinearOperator {
            repr: Repr::Circulant {
                kernel,
                height,
                width,
                spectrum: buf,
            },
        })
    }

    /// `A x = m ⊙ F x` with the unitary 2D DFT; measurements are complex
    /// and stored as interleaved (re, im) pairs of shape `[h, w, 2]`.
    pub fn fourier_mask(mask: Vec<Complex64>, height: usize, width: usize) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {} entries for {height}×{width} image",
                mask.len()
            )));
        }
        if mask.iter().any(|m| !m.norm().is_finite()) {
            return Err(Error::InvalidInput(
                "mask entry with non-finite modulus".into(),
            ));
        }
        Ok(LinearOperator {
            repr: Repr::FourierMask {
                mask,
                height,
                width,
            },
        })
    }

    /// Real binary/weighted mask convenience constructor.
    pub fn real_fourier_mask(mask: &Tensor) -> Result<Self> {
        let (h, w) = mask.dims2()?;
        Self::fourier_mask(fft::to_complex(mask.data()), h, w)
    }

    pub fn dense(matrix: Tensor) -> Result<Self> {
        matrix.dims2()?;
        Ok(LinearOperator {
            repr: Repr::Dense { matrix },
        })
    }

    pub fn kind(&self) -> OperatorKind {
        match self.repr {
            Repr::Identity { .. } => OperatorKind::Identity,
            Repr::Circulant { .. } => OperatorKind::Circulant2D,
            Repr::FourierMask { .. } => OperatorKind::FourierMask,
            Repr::Dense { .. } => OperatorKind::Dense,
        }
    }

    pub fn kernel(&self) -> Option<&Tensor> {
        match &self.repr {
            Repr::Circulant { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    pub fn mask(&self) -> Option<&[Complex64]> {
        match &self.repr {
            Repr::FourierMask { mask, .. } => Some(mask),
            _ => None,
        }
    }

    pub fn matrix(&self) -> Option<&Tensor> {
        match &self.repr {
            Repr::Dense { matrix } => Some(matrix),
            _ => None,
        }
    }

    /// Shape of the signal `x`.
    pub fn domain_shape(&self) -> Vec<usize> {
        match &self.repr {
            Repr::Identity { dim } => vec![*dim],
            Repr::Circulant { height, width, .. } | Repr::FourierMask { height, width, .. } => {
                vec![*height, *width]
            }
            Repr::Dense { matrix } => vec![matrix.shape()[1]],
        }
    }

    /// Shape of the measurement `y`.
    pub fn codomain_shape(&self) -> Vec<usize> {
        match &self.repr {
            Repr::Identity { dim } => vec![*dim],
            Repr::Circulant { height, width, .. } => vec![*height, *width],
            Repr::FourierMask { height, width, .. } => vec![*height, *width, 2],
            Repr::Dense { matrix } => vec![matrix.shape()[0]],
        }
    }

    pub fn domain_len(&self) -> usize {
        self.domain_shape().iter().product()
    }

    pub fn codomain_len(&self) -> usize {
        self.codomain_shape().iter().product()
    }

    /// 2D grid on which `AᵀA` is diagonalized (identity: `1×d`).
    fn grid(&self) -> Option<(usize, usize)> {
        match &self.repr {
            Repr::Identity { dim } => Some((1, *dim)),
            Repr::Circulant { height, width, .. } | Repr::FourierMask { height, width, .. } => {
                Some((*height, *width))
            }
            Repr::Dense { .. } => None,
        }
    }

    fn check_domain(&self, x: &Tensor, what: &str) -> Result<()> {
        if x.len() != self.domain_len() {
            return Err(Error::Shape(format!(
                "{what}: input {:?} vs {} domain {:?}",
                x.shape(),
                self.kind().name(),
                self.domain_shape()
            )));
        }
        Ok(())
    }

    fn check_codomain(&self, u: &Tensor, what: &str) -> Result<()> {
        if u.len() != self.codomain_len() {
            return Err(Error::Shape(format!(
                "{what}: input {:?} vs {} codomain {:?}",
                u.shape(),
                self.kind().name(),
                self.codomain_shape()
            )));
        }
        Ok(())
    }

    /// `A x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check_domain(x, "apply")?;
        let out = match &self.repr {
            Repr::Identity { .. } => x.data().to_vec(),
            Repr::Circulant {
                height,
                width,
                spectrum,
                ..
            } => {
                let mut buf = fft::to_complex(x.data());
                fft::fft2(&mut buf, *height, *width);
                for (b, k) in buf.iter_mut().zip(spectrum) {
                    *b *= k;
                }
                fft::ifft2(&mut buf, *height, *width);
                buf.iter().map(|c| c.re).collect()
            }
            Repr::FourierMask {
                mask,
                height,
                width,
            } => {
                let mut buf = fft::to_complex(x.data());
                fft::fft2(&mut buf, *height, *width);
                let s = 1.0 / ((height * width) as f64).sqrt();
                buf.iter()
                    .zip(mask)
                    .flat_map(|(b, m)| {
                        let v = b * m * s;
                        [v.re, v.im]
                    })
                    .collect()
            }
            Repr::Dense { matrix } => matrix
                .matvec(&Tensor::vector(x.data().to_vec()))?
                .into_data(),
        };
        Ok(Tensor::new(self.codomain_shape(), out))
    }

    /// `Aᵀ u` with respect to the real inner products on domain and codomain.
    pub fn adjoint(&self, u: &Tensor) -> Result<Tensor> {
        self.check_codomain(u, "adjoint")?;
        let out = match &self.repr {
            Repr::Identity { .. } => u.data().to_vec(),
            Repr::Circulant {
                height,
                width,
                spectrum,
                ..
            } => {
                let mut buf = fft::to_complex(u.data());
                fft::fft2(&mut buf, *height, *width);
                for (b, k) in buf.iter_mut().zip(spectrum) {
                    *b *= k.conj();
                }
                fft::ifft2(&mut buf, *height, *width);
                buf.iter().map(|c| c.re).collect()
            }
            Repr::FourierMask {
                mask,
                height,
                width,
            } => {
                let n = height * width;
                let mut buf: Vec<Complex64> = u
                    .data()
                    .chunks_exact(2)
                    .zip(mask)
                    .map(|(p, m)| Complex64::new(p[0], p[1]) * m.conj())
                    .collect();
                fft::ifft2(&mut buf, *height, *width);
                let s = (n as f64).sqrt();
                buf.iter().map(|c| c.re * s).collect()
            }
            Repr::Dense { matrix } => matrix
                .transpose()?
                .matvec(&Tensor::vector(u.data().to_vec()))?
                .into_data(),
        };
        Ok(Tensor::new(self.domain_shape(), out))
    }

    /// Eigenvalues of `AᵀA` on the unnormalized DFT grid, for operators
    /// diagonalized by it. For masks the eigenvalue at `k` averages
    /// `|m_k|²` and `|m_{−k}|²` (real signals only see the symmetric part).
    pub fn normal_spectrum(&self) -> Option<Vec<f64>> {
        match &self.repr {
            Repr::Identity { dim } => Some(vec![1.0; *dim]),
            Repr::Circulant { spectrum, .. } => {
                Some(spectrum.iter().map(|k| k.norm_sqr()).collect())
            }
            Repr::FourierMask {
                mask,
                height,
                width,
            } => Some(
                (0..mask.len())
                    .map(|k| {
                        let nk = fft::negated_index(k, *height, *width);
                        0.5 * (mask[k].norm_sqr() + mask[nk].norm_sqr())
                    })
                    .collect(),
            ),
            Repr::Dense { .. } => None,
        }
    }

    /// `AᵀA x`.
    pub fn normal_apply(&self, x: &Tensor) -> Result<Tensor> {
        self.adjoint(&self.apply(x)?)
    }

    /// Largest singular value of `A`; for masks the bound `max |m|`.
    pub fn lipschitz(&self) -> f64 {
        match &self.repr {
            Repr::Identity { .. } => 1.0,
            Repr::Circulant { spectrum, .. } => spectrum.iter().fold(0.0, |m, k| m.max(k.norm())),
            Repr::FourierMask { mask, .. } => mask.iter().fold(0.0, |m, k| m.max(k.norm())),
            Repr::Dense { matrix } => power_iteration(self, matrix.shape()[1], 100, 1e-10),
        }
    }

    /// Explicit matrix of the operator (codomain_len × domain_len).
    pub fn to_dense(&self) -> Result<Tensor> {
        let (n, m) = (self.domain_len(), self.codomain_len());
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let mut e = Tensor::zeros(&self.domain_shape());
            e.data_mut()[j] = 1.0;
            let col = self.apply(&e)?;
            for i in 0..m {
                out[i * n + j] = col.data()[i];
            }
        }
        Ok(Tensor::new(vec![m, n], out))
    }

    /// Solves `(I + c·AᵀA) x = b`.
    pub fn solve_shifted_normal(&self, c: f64, b: &Tensor) -> Result<Tensor> {
        self.check_domain(b, "solve")?;
        match self.grid() {
            Some((h, w)) => {
                let spec = self.normal_spectrum().expect("diagonalizable");
                let mult: Vec<f64> = spec.iter().map(|l| 1.0 / (1.0 + c * l)).collect();
                let x = fft::fourier_multiply(b.data(), &mult, h, w);
                Ok(Tensor::new(self.domain_shape(), x))
            }
            None => conjugate_gradient(
                |v| {
                    let mut out = self.normal_apply(v)?;
                    for (o, vi) in out.data_mut().iter_mut().zip(v.data()) {
                        *o = vi + c * *o;
                    }
                    Ok(out)
                },
                &Tensor::new(self.domain_shape(), b.data().to_vec()),
                1e-10,
                10 * self.domain_len(),
            ),
        }
    }
}

fn power_iteration(op: &LinearOperator, n: usize, iters: usize, tol: f64) -> f64 {
    let mut v = Tensor::full(&[n], 1.0 / (n as f64).sqrt());
    // perturb off any symmetric null direction
    for (i, x) in v.data_mut().iter_mut().enumerate() {
        *x += 1e-3 * ((i as f64 + 1.0) * 0.618).sin();
    }
    let norm = v.norm();
    v = v.scale(1.0 / norm);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = match op.normal_apply(&v) {
            Ok(w) => w,
            Err(_) => return f64::NAN,
        };
        let next = w.norm();
        if next == 0.0 {
            return 0.0;
        }
        v = w.scale(1.0 / next);
        let done = (next - lambda).abs() <= tol * next;
        lambda = next;
        if done {
            break;
        }
    }
    lambda.sqrt()
}

/// Conjugate gradients for a symmetric positive definite map.
pub fn conjugate_gradient<F>(apply: F, b: &Tensor, tol: f64, max_iter: usize) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let bnorm = b.norm();
    let mut x = Tensor::zeros(b.shape());
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_sq();
    for _ in 0..max_iter {
        if rs.sqrt() <= tol * bnorm {
            return Ok(x);
        }
        let ap = apply(&p)?;
        let alpha = rs / p.dot(&ap);
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rs_new = r.norm_sq();
        let beta = rs_new / rs;
        p = r.zip_map(&p, |ri, pi| ri + beta * pi)?;
        rs = rs_new;
    }
    if rs.sqrt() <= tol * bnorm {
        Ok(x)
    } else {
        Err(Error::CgNonConvergence {
            iterations: max_iter,
            residual: rs.sqrt(),
        })
    }
}

/// `y | x ~ N(Ax, s²I)`. For Fourier masks the noise is circular complex
/// with total variance `σ²` per measurement, i.e. `σ²/2` per real component.
#[derive(Debug, Clone)]
pub struct GaussianLikelihood {
    pub operator: LinearOperator,
    sigma: f64,
}

impl GaussianLikelihood {
    pub fn new(operator: LinearOperator, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "noise std must be positive, got {sigma}"
            )));
        }
        Ok(GaussianLikelihood { operator, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Variance of each real measurement component.
    pub fn component_variance(&self) -> f64 {
        match self.operator.kind() {
            OperatorKind::FourierMask => 0.5 * self.sigma * self.sigma,
            _ => self.sigma * self.sigma,
        }
    }

    /// `‖Ax − y‖² / (2 s²)`.
    pub fn nll(&self, y: &Tensor, x: &Tensor) -> Result<f64> {
        let r = self.operator.apply(x)?;
        let d: f64 = r
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        Ok(d / (2.0 * self.component_variance()))
    }
}

/// `argmin_x ‖Ax − y‖²/(2s²) + ‖x − v‖²/(2γ)`.
pub fn prox_gaussian_nll(
    lik: &GaussianLikelihood,
    y: &Tensor,
    gamma: f64,
    v: &Tensor,
) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!(
            "prox step must be positive, got {gamma}"
        )));
    }
    let c = gamma / lik.component_variance();
    let aty = lik.operator.adjoint(y)?;
    let mut rhs = Tensor::new(lik.operator.domain_shape(), v.data().to_vec());
    rhs.axpy(c, &aty);
    lik.operator.solve_shifted_normal(c, &rhs)
}

/// Multiplier `(s⁻²λ_k + ρ⁻²)^{-1/2}` of the conditional covariance square root.
fn sqrt_cov_multiplier(lik: &GaussianLikelihood, rho: f64) -> Result<(Vec<f64>, usize, usize)> {
    let spec = lik
        .operator
        .normal_spectrum()
        .ok_or(Error::UnsupportedOperator(lik.operator.kind().name()))?;
    let (h, w) = lik.operator.grid().expect("diagonalizable");
    let inv_s2 = 1.0 / lik.component_variance();
    let inv_r2 = 1.0 / (rho * rho);
    Ok((
        spec.iter()
            .map(|l| 1.0 / (inv_s2 * l + inv_r2).sqrt())
            .collect(),
        h,
        w,
    ))
}

/// `(s⁻²AᵀA + ρ⁻²I)^{-1/2} ζ`.
pub fn conditional_noise(lik: &GaussianLikelihood, rho: f64, zeta: &Tensor) -> Result<Tensor> {
    let (mult, h, w) = sqrt_cov_multiplier(lik, rho)?;
    lik.operator.check_domain(zeta, "conditional_noise")?;
    Ok(Tensor::new(
        lik.operator.domain_shape(),
        fft::fourier_multiply(zeta.data(), &mult, h, w),
    ))
}

/// Exact draw from `N(prox_{ρ²·nll}(m), (s⁻²AᵀA + ρ⁻²I)⁻¹)`, the
/// conditional of `x` given `y` and the prior mean `m` with variance ρ².
pub fn sample_gaussian_conditional<R: Rng + ?Sized>(
    lik: &GaussianLikelihood,
    y: &Tensor,
    rho: f64,
    m: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    if !(rho > 0.0) {
        return Err(Error::InvalidInput(format!(
            "rho must be positive, got {rho}"
        )));
    }
    if lik.operator.normal_spectrum().is_none() {
        return Err(Error::UnsupportedOperator(lik.operator.kind().name()));
    }
    let mean = prox_gaussian_nll(lik, y, rho * rho, m)?;
    let zeta = normal_tensor(rng, &lik.operator.domain_shape());
    let mut out = conditional_noise(lik, rho, &zeta)?;
    out.axpy(1.0, &mean);
    Ok(out)
}
