//! Priors and denoisers.
//!
//! [`LatentLaplacePrior`] is the sigmoid-linear latent model used by the
//! split-Gibbs kernel: `x | z ~ N(Sig(Wz), ρ²)` with a Laplace latent whose
//! log-density is smoothed by its Moreau envelope. The diffusion side holds
//! the variance-preserving forward process and two denoisers, an exact
//! Gaussian MMSE map and a small trainable network.

use rand::Rng;

use crate::autodiff::{soft_threshold_value, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// `(ST_λ(z) − z) / λ`, the gradient of the negated Moreau envelope of `‖·‖₁`.
pub fn laplace_score_smoothed(z: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(z.map(|v| (soft_threshold_value(v, lambda) - v) / lambda))
}

/// Moreau envelope of `|v|` with parameter `λ` (the Huber function).
pub fn moreau_abs(v: f64, lambda: f64) -> f64 {
    if v.abs() <= lambda {
        v * v / (2.0 * lambda)
    } else {
        v.abs() - lambda / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentLaplacePrior {
    /// Decoder matrix of shape `[d_x, d_z]`.
    pub w: Tensor,
    /// One-element tensor holding `log λ`.
    pub log_lambda: Tensor,
}

/// Tape handles of a [`LatentLaplacePrior`].
#[derive(Clone, Copy)]
pub struct LatentLaplaceVars<'t> {
    pub w: Var<'t>,
    pub log_lambda: Var<'t>,
}

impl<'t> LatentLaplaceVars<'t> {
    pub fn lambda(&self) -> Var<'t> {
        self.log_lambda.exp()
    }

    /// `Sig(Wz)` on the tape.
    pub fn mean(&self, z: Var<'t>) -> Result<Var<'t>> {
        Ok(self.w.matvec(z)?.sigmoid())
    }
}

impl LatentLaplacePrior {
    /// Random decoder with entries of std `1/√d_z`.
    pub fn init<R: Rng + ?Sized>(d_x: usize, d_z: usize, lambda: f64, rng: &mut R) -> Result<Self> {
        if d_x == 0 || d_z == 0 {
            return Err(Error::InvalidInput(
                "latent prior needs d_x, d_z ≥ 1".into(),
            ));
        }
        let w = normal_tensor(rng, &[d_x, d_z]).scale(1.0 / (d_z as f64).sqrt());
        Self::new(w, lambda)
    }

    pub fn new(w: Tensor, lambda: f64) -> Result<Self> {
        w.dims2()?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        Ok(LatentLaplacePrior {
            w,
            log_lambda: Tensor::vector(vec![lambda.ln()]),
        })
    }

    pub fn d_x(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn d_z(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.item().exp()
    }

    /// `Sig(Wz)`, strictly inside the unit hypercube.
    pub fn prior_mean(&self, z: &Tensor) -> Result<Tensor> {
        if z.len() != self.d_z() {
            return Err(Error::Shape(format!(
                "prior_mean: latent {:?} vs d_z = {}",
                z.shape(),
                self.d_z()
            )));
        }
        let wz = self.w.matvec(&Tensor::vector(z.data().to_vec()))?;
        Ok(wz.map(sigmoid))
    }

    /// Unnormalized smoothed latent log-density `−Σ M_λ(|z_i|)`.
    pub fn latent_log_density(&self, z: &[f64]) -> f64 {
        let lam = self.lambda();
        -z.iter().map(|&v| moreau_abs(v, lam)).sum::<f64>()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> LatentLaplaceVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LatentLaplaceVars {
            w: leaf(&self.w),
            log_lambda: leaf(&self.log_lambda),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("prior.w", &self.w);
        f("prior.log_lambda", &self.log_lambda);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("prior.w", &mut self.w);
        f("prior.log_lambda", &mut self.log_lambda);
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Linear-β variance-preserving schedule on `t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        VpSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "invalid beta schedule ({beta_min}, {beta_max})"
            )));
        }
        Ok(VpSchedule { beta_min, beta_max })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `∫₀ᵗ β_s ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    pub fn mu(&self, t: f64) -> f64 {
        (-self.integral(t)).exp()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        let m = self.mu(t);
        (1.0 - m * m).max(0.0).sqrt()
    }

    /// `(μ_t, σ_t)` as differentiable functions of a one-element `t`.
    pub fn coefficients<'t>(&self, t: Var<'t>) -> (Var<'t>, Var<'t>) {
        let half = 0.5 * (self.beta_max - self.beta_min);
        let t2 = t.mul(t).expect("scalar");
        let mu = t
            .scale(self.beta_min)
            .add(t2.scale(half))
            .expect("scalar")
            .neg()
            .exp();
        let sigma = mu.mul(mu).expect("scalar").neg().add_const(1.0).sqrt();
        (mu, sigma)
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!(
            "diffusion time {t} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `μ_t x₀ + σ_t ζ`.
pub fn vp_forward_sample<R: Rng + ?Sized>(
    x0: &Tensor,
    t: f64,
    sched: &VpSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    check_time(t)?;
    let (mu, sigma) = (sched.mu(t), sched.sigma(t));
    let zeta = normal_tensor(rng, x0.shape());
    x0.zip_map(&zeta, |x, z| mu * x + sigma * z)
}

/// Two-layer residual network `x + W₂ silu(W₁[x, μ_t, σ_t] + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallDense {
    /// `[d + 2, hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden, d]`
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy)]
pub struct SmallDenseVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl SmallDense {
    pub const HIDDEN: usize = 64;

    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let h = Self::HIDDEN;
        SmallDense {
            w1: normal_tensor(rng, &[d + 2, h]).scale(1.0 / ((d + 2) as f64).sqrt()),
            b1: Tensor::zeros(&[h]),
            w2: normal_tensor(rng, &[h, d]).scale(0.1 / (h as f64).sqrt()),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.b2.len()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> SmallDenseVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        SmallDenseVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("denoiser.w1", &self.w1);
        f("denoiser.b1", &self.b1);
        f("denoiser.w2", &self.w2);
        f("denoiser.b2", &self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("denoiser.w1", &mut self.w1);
        f("denoiser.b1", &mut self.b1);
        f("denoiser.w2", &mut self.w2);
        f("denoiser.b2", &mut self.b2);
    }

    /// Plain evaluation at a fixed time.
    pub fn forward(&self, x_t: &Tensor, t: f64, sched: &VpSchedule) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let x = tape.constant(x_t.clone());
        let out = vars.forward(x, tape.scalar(sched.mu(t)), tape.scalar(sched.sigma(t)))?;
        Ok(out.value().as_ref().clone())
    }
}

impl<'t> SmallDenseVars<'t> {
    /// Denoises one signal of any shape; `mu`, `sigma` are one-element nodes.
    pub fn forward(&self, x_t: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
        let tape = x_t.tape();
        let shape = x_t.shape();
        let d = x_t.value().len();
        let flat = x_t.reshape(vec![d])?;
        let feats = tape.concat(&[flat, mu, sigma])?.reshape(vec![1, d + 2])?;
        let out = self.rows(feats)?.reshape(shape)?;
        x_t.add(out)
    }

    /// Network correction (without the residual) for a feature matrix
    /// whose rows are `[x, μ_t, σ_t]`.
    pub fn rows(&self, feats: Var<'t>) -> Result<Var<'t>> {
        let a = feats.matmul(self.w1)?.add_row_bias(self.b1)?;
        let h = a.mul(a.sigmoid())?;
        h.matmul(self.w2)?.add_row_bias(self.b2)
    }
}

/// `E[x₀ | x_t]` for the prior `N(mu0, diag(c0))`.
pub fn analytic_mmse_denoiser(
    mu0: &Tensor,
    c0: &Tensor,
    x_t: &Tensor,
    t: f64,
    sched: &VpSchedule,
) -> Result<Tensor> {
    check_time(t)?;
    mu0.expect_same_shape(x_t, "analytic_mmse_denoiser")?;
    c0.expect_same_shape(x_t, "analytic_mmse_denoiser")?;
    let (m, s) = (sched.mu(t), sched.sigma(t));
    let data = x_t
        .data()
        .iter()
        .zip(mu0.data().iter().zip(c0.data()))
        .map(|(&x, (&a, &c))| a + m * c / (m * m * c + s * s) * (x - m * a))
        .collect();
    Ok(Tensor::new(x_t.shape().to_vec(), data))
}

/// Denoiser `D_t` used by the LATINO kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    AnalyticGaussian { mu0: Tensor, c0: Tensor },
    SmallDense(SmallDense),
}

#[derive(Clone, Copy)]
pub enum DenoiserVars<'t> {
    Analytic { mu0: Var<'t>, c0: Var<'t> },
    SmallDense(SmallDenseVars<'t>),
}

impl Denoiser {
    pub fn analytic(mu0: Tensor, c0: Tensor) -> Result<Self> {
        mu0.expect_same_shape(&c0, "analytic denoiser")?;
        if c0.data().iter().any(|&c| !(c > 0.0)) {
            return Err(Error::InvalidInput(
                "prior variances must be positive".into(),
            ));
        }
        Ok(Denoiser::AnalyticGaussian { mu0, c0 })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> DenoiserVars<'t> {
        match self {
            Denoiser::AnalyticGaussian { mu0, c0 } => DenoiserVars::Analytic {
                mu0: tape.constant(mu0.clone()),
                c0: tape.constant(c0.clone()),
            },
            Denoiser::SmallDense(net) => DenoiserVars::SmallDense(net.bind(tape, trainable)),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        if let Denoiser::SmallDense(net) = self {
            net.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Denoiser::SmallDense(net) = self {
            net.visit_mut(f);
        }
    }

    pub fn denoise(&self, x_t: &Tensor, t: f64, sched: &VpSchedule) -> Result<Tensor> {
        match self {
            Denoiser::AnalyticGaussian { mu0, c0 } => {
                analytic_mmse_denoiser(mu0, c0, x_t, t, sched)
            }
            Denoiser::SmallDense(net) => net.forward(x_t, t, sched),
        }
    }
}

impl<'t> DenoiserVars<'t> {
    pub fn forward(&self, x_t: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
        match *self {
            DenoiserVars::SmallDense(net) => net.forward(x_t, mu, sigma),
            DenoiserVars::Analytic { mu0, c0 } => {
                let shape = x_t.shape();
                let m2c = c0.mul_scalar(mu.mul(mu)?)?;
                let s2 = sigma.mul(sigma)?.broadcast(&shape)?;
                let gain = c0.mul_scalar(mu)?.mul(m2c.add(s2)?.recip())?;
                let resid = x_t.sub(mu0.mul_scalar(mu)?)?;
                mu0.add(gain.mul(resid)?)
            }
        }
    }
}

/// Mean over the batch of `‖x − D_t(μ_t x + σ_t ζ)‖²` with one time per item.
pub fn score_matching_loss<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    net: &SmallDenseVars<'t>,
    batch: &[Tensor],
    t_draws: &[f64],
    sched: &VpSchedule,
    rng: &mut R,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::InvalidInput(
            "score matching on an empty batch".into(),
        ));
    }
    if t_draws.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} time draws for a batch of {}",
            t_draws.len(),
            batch.len()
        )));
    }
    let d = batch[0].len();
    let mut feats = Vec::with_capacity(batch.len() * (d + 2));
    let mut noisy = Vec::with_capacity(batch.len() * d);
    let mut clean = Vec::with_capacity(batch.len() * d);
    for (x, &t) in batch.iter().zip(t_draws) {
        check_time(t)?;
        if x.len() != d {
            return Err(Error::Shape(format!(
                "batch item {:?} vs length {d}",
                x.shape()
            )));
        }
        let xt = vp_forward_sample(x, t, sched, rng)?;
        feats.extend_from_slice(xt.data());
        feats.push(sched.mu(t));
        feats.push(sched.sigma(t));
        noisy.extend_from_slice(xt.data());
        clean.extend_from_slice(x.data());
    }
    let n = batch.len();
    let feats = tape.constant(Tensor::new(vec![n, d + 2], feats));
    let noisy = tape.constant(Tensor::new(vec![n, d], noisy));
    let clean = tape.constant(Tensor::new(vec![n, d], clean));
    let denoised = noisy.add(net.rows(feats)?)?;
    Ok(clean.sub(denoised)?.sq_l2_sum().scale(1.0 / n as f64))
}
