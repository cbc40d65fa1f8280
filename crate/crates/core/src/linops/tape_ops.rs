//! Differentiable wrappers of the likelihood prox and conditional noise.

use std::rc::Rc;

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{conditional_noise, fft, prox_gaussian_nll, sqrt_cov_multiplier, GaussianLikelihood};

struct ProxOp {
    lik: GaussianLikelihood,
    aty: Tensor,
}

impl CustomOp for ProxOp {
    fn name(&self) -> &'static str {
        "prox_gaussian_nll"
    }

    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s2 = self.lik.component_variance();
        let c = inputs[1].item() / s2;
        let op = &self.lik.operator;
        let u = op
            .solve_shifted_normal(c, grad)
            .expect("adjoint solve of a system that converged forward");
        let mut resid = op.normal_apply(output).expect("domain checked forward");
        resid = self.aty.sub(&resid).expect("same shape");
        let g_gamma = u.dot(&resid) / s2;
        vec![
            Some(u),
            Some(Tensor::new(inputs[1].shape().to_vec(), vec![g_gamma])),
        ]
    }
}

/// `prox_{γ·nll}(v)` as a tape node differentiable in `v` and the scalar `γ`.
pub fn prox_node<'t>(
    tape: &'t Tape,
    lik: &GaussianLikelihood,
    y: &Tensor,
    gamma: Var<'t>,
    v: Var<'t>,
) -> Result<Var<'t>> {
    if gamma.shape().iter().product::<usize>() != 1 {
        return Err(Error::Shape(format!(
            "prox step must be scalar, got {:?}",
            gamma.shape()
        )));
    }
    let value = prox_gaussian_nll(lik, y, gamma.item(), &v.value())?;
    let aty = lik.operator.adjoint(y)?;
    Ok(tape.custom(
        &[v, gamma],
        value,
        Rc::new(ProxOp {
            lik: lik.clone(),
            aty,
        }),
    ))
}

struct NoiseOp {
    lik: GaussianLikelihood,
    zeta: Tensor,
}

impl CustomOp for NoiseOp {
    fn name(&self) -> &'static str {
        "conditional_noise"
    }

    fn vjp(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let rho = inputs[0].item();
        let (mult, h, w) = sqrt_cov_multiplier(&self.lik, rho).expect("checked forward");
        let d: Vec<f64> = mult.iter().map(|s| s * s * s / (rho * rho * rho)).collect();
        let ds = fft::fourier_multiply(self.zeta.data(), &d, h, w);
        let g: f64 = ds.iter().zip(grad.data()).map(|(a, b)| a * b).sum();
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), vec![g]))]
    }
}

/// `(s⁻²AᵀA + ρ⁻²I)^{-1/2} ζ` as a tape node differentiable in the scalar `ρ`.
pub fn conditional_noise_node<'t>(
    tape: &'t Tape,
    lik: &GaussianLikelihood,
    rho: Var<'t>,
    zeta: Tensor,
) -> Result<Var<'t>> {
    if rho.shape().iter().product::<usize>() != 1 {
        return Err(Error::Shape(format!(
            "rho must be scalar, got {:?}",
            rho.shape()
        )));
    }
    let value = conditional_noise(lik, rho.item(), &zeta)?;
    Ok(tape.custom(
        &[rho],
        value,
        Rc::new(NoiseOp {
            lik: lik.clone(),
            zeta,
        }),
    ))
}
