//! Markov kernels and the unfolded chain.
//!
//! A chain starts from a kernel-specific state and applies `L + 1`
//! transitions; transition `ℓ` uses the layer parameters `ϑ_ℓ` and produces
//! `x_ℓ`. Samples `x_{L0}, …, x_L` are retained. Every chain runs on a
//! [`Tape`], so the same code yields plain samples (parameters bound as
//! constants) and differentiable trajectories (parameters bound as leaves).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linops::{conditional_noise_node, prox_node, GaussianLikelihood};
use crate::priors::{Denoiser, DenoiserVars, LatentLaplacePrior, LatentLaplaceVars, VpSchedule};
use crate::rng::{normal_tensor, Role, StreamKey};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Sgs,
    Latino,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Sgs => "sgs",
            KernelKind::Latino => "latino",
        }
    }
}

/// Starting point of a LATINO chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatinoInit {
    /// `Aᵀy / L_m²`
    BackProjection,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelPrior {
    Sgs(LatentLaplacePrior),
    Latino {
        denoiser: Denoiser,
        schedule: VpSchedule,
        init: LatinoInit,
    },
}

/// Parameters `Θ = [ϑ_0, …, ϑ_L, θ]` and chain lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedModel {
    pub layers: usize,
    pub burn_in: usize,
    /// `log γ_ℓ`, length `L + 1`.
    pub log_gamma: Tensor,
    /// SGS: `log ρ_ℓ`; LATINO: `t_ℓ`. Length `L + 1`.
    pub layer_aux: Tensor,
    pub prior: ModelPrior,
}

/// Smallest diffusion time a LATINO layer may use.
pub const MIN_TIME: f64 = 1e-4;

fn check_lengths(layers: usize, burn_in: usize, n: usize) -> Result<()> {
    if burn_in > layers {
        return Err(Error::InvalidInput(format!(
            "burn-in {burn_in} exceeds L = {layers}"
        )));
    }
    if n != layers + 1 {
        return Err(Error::InvalidInput(format!(
            "{n} layer parameter sets for L = {layers} (need L + 1)"
        )));
    }
    Ok(())
}

fn log_positive(v: &[f64], what: &str) -> Result<Tensor> {
    if let Some(bad) = v.iter().find(|&&g| !(g > 0.0 && g.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "{what} must be positive, got {bad}"
        )));
    }
    Ok(Tensor::vector(v.iter().map(|g| g.ln()).collect()))
}

impl UnfoldedModel {
    /// Split-Gibbs chain with per-layer `(γ_ℓ, ρ_ℓ)`.
    pub fn sgs(
        layers: usize,
        burn_in: usize,
        gammas: &[f64],
        rhos: &[f64],
        prior: LatentLaplacePrior,
    ) -> Result<Self> {
        check_lengths(layers, burn_in, gammas.len())?;
        check_lengths(layers, burn_in, rhos.len())?;
        Ok(UnfoldedModel {
            layers,
            burn_in,
            log_gamma: log_positive(gammas, "gamma")?,
            layer_aux: log_positive(rhos, "rho")?,
            prior: ModelPrior::Sgs(prior),
        })
    }

    /// Split-Gibbs chain with the same `(γ, ρ)` on every layer.
    pub fn sgs_uniform(
        layers: usize,
        burn_in: usize,
        gamma: f64,
        rho: f64,
        prior: LatentLaplacePrior,
    ) -> Result<Self> {
        let n = layers + 1;
        Self::sgs(layers, burn_in, &vec![gamma; n], &vec![rho; n], prior)
    }

    /// LATINO chain with per-layer `(γ_ℓ, t_ℓ)`.
    pub fn latino(
        layers: usize,
        burn_in: usize,
        per_layer: &[(f64, f64)],
        denoiser: Denoiser,
        schedule: VpSchedule,
        init: LatinoInit,
    ) -> Result<Self> {
        check_lengths(layers, burn_in, per_layer.len())?;
        let gammas: Vec<f64> = per_layer.iter().map(|p| p.0).collect();
        let times: Vec<f64> = per_layer.iter().map(|p| p.1).collect();
        if let Some(t) = times.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "diffusion time {t} outside (0, 1]"
            )));
        }
        Ok(UnfoldedModel {
            layers,
            burn_in,
            log_gamma: log_positive(&gammas, "gamma")?,
            layer_aux: Tensor::vector(times),
            prior: ModelPrior::Latino {
                denoiser,
                schedule,
                init,
            },
        })
    }

    pub fn kind(&self) -> KernelKind {
        match self.prior {
            ModelPrior::Sgs(_) => KernelKind::Sgs,
            ModelPrior::Latino { .. } => KernelKind::Latino,
        }
    }

    pub fn gamma(&self, layer: usize) -> f64 {
        self.log_gamma.data()[layer].exp()
    }

    /// `ρ_ℓ` (SGS) or `t_ℓ` (LATINO).
    pub fn layer_second(&self, layer: usize) -> f64 {
        match self.kind() {
            KernelKind::Sgs => self.layer_aux.data()[layer].exp(),
            KernelKind::Latino => self.layer_aux.data()[layer],
        }
    }

    pub fn retained(&self) -> usize {
        self.layers - self.burn_in + 1
    }

    fn aux_name(&self) -> &'static str {
        match self.kind() {
            KernelKind::Sgs => "model.log_rho",
            KernelKind::Latino => "model.t",
        }
    }

    /// Visits every trainable tensor in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("model.log_gamma", &self.log_gamma);
        f(self.aux_name(), &self.layer_aux);
        match &self.prior {
            ModelPrior::Sgs(p) => p.visit(f),
            ModelPrior::Latino { denoiser, .. } => denoiser.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let aux = self.aux_name();
        f("model.log_gamma", &mut self.log_gamma);
        f(aux, &mut self.layer_aux);
        match &mut self.prior {
            ModelPrior::Sgs(p) => p.visit_mut(f),
            ModelPrior::Latino { denoiser, .. } => denoiser.visit_mut(f),
        }
    }

    /// Restores parameter validity after an optimizer step.
    pub fn project(&mut self) {
        if self.kind() == KernelKind::Latino {
            for t in self.layer_aux.data_mut() {
                *t = t.clamp(MIN_TIME, 1.0);
            }
        }
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let prior = match &self.prior {
            ModelPrior::Sgs(p) => PriorVars::Sgs(p.bind(tape, trainable)),
            ModelPrior::Latino { denoiser, .. } => {
                PriorVars::Latino(denoiser.bind(tape, trainable))
            }
        };
        ModelVars {
            log_gamma: leaf(&self.log_gamma),
            layer_aux: leaf(&self.layer_aux),
            prior,
        }
    }
}

#[derive(Clone, Copy)]
pub enum PriorVars<'t> {
    Sgs(LatentLaplaceVars<'t>),
    Latino(DenoiserVars<'t>),
}

/// Tape handles of an [`UnfoldedModel`].
#[derive(Clone, Copy)]
pub struct ModelVars<'t> {
    pub log_gamma: Var<'t>,
    pub layer_aux: Var<'t>,
    pub prior: PriorVars<'t>,
}

impl<'t> ModelVars<'t> {
    /// Every handle, in the order of [`UnfoldedModel::visit`].
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.log_gamma, self.layer_aux];
        match self.prior {
            PriorVars::Sgs(p) => out.extend([p.w, p.log_lambda]),
            PriorVars::Latino(DenoiserVars::SmallDense(n)) => out.extend([n.w1, n.b1, n.w2, n.b2]),
            PriorVars::Latino(DenoiserVars::Analytic { .. }) => {}
        }
        out
    }

    fn gamma(&self, layer: usize) -> Result<Var<'t>> {
        Ok(self.log_gamma.slice(layer, 1)?.exp())
    }

    fn aux(&self, layer: usize) -> Result<Var<'t>> {
        self.layer_aux.slice(layer, 1)
    }
}

/// Measurement `y` with its likelihood; caches `L_m = ‖A‖`.
#[derive(Debug, Clone)]
pub struct Observation {
    pub y: Tensor,
    pub lik: GaussianLikelihood,
    lipschitz: f64,
}

impl Observation {
    pub fn new(y: Tensor, lik: GaussianLikelihood) -> Result<Self> {
        if y.len() != lik.operator.codomain_len() {
            return Err(Error::Shape(format!(
                "observation {:?} vs operator codomain {:?}",
                y.shape(),
                lik.operator.codomain_shape()
            )));
        }
        let y = y.reshape(lik.operator.codomain_shape())?;
        let lipschitz = lik.operator.lipschitz();
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "operator norm {lipschitz} unusable"
            )));
        }
        Ok(Observation { y, lik, lipschitz })
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn domain_shape(&self) -> Vec<usize> {
        self.lik.operator.domain_shape()
    }
}

fn check_finite(v: &Var<'_>, layer: usize, what: &'static str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::ChainDivergence { layer, what })
    }
}

/// One split-Gibbs transition on the tape. Returns `(x', z')`.
#[allow(clippy::too_many_arguments)]
pub fn sgs_step_on<'t>(
    vars: &ModelVars<'t>,
    prior: &LatentLaplaceVars<'t>,
    obs: &Observation,
    layer: usize,
    x: Var<'t>,
    z: Var<'t>,
    zeta_z: Tensor,
    zeta_x: Tensor,
) -> Result<(Var<'t>, Var<'t>)> {
    let tape = x.tape();
    let gamma = vars.gamma(layer)?;
    let rho = vars.aux(layer)?.exp();
    let lam = prior.lambda();
    let d_x = x.value().len();

    let s = prior.mean(z)?;
    let slope = s.mul(s.neg().add_const(1.0))?;
    let resid = x.reshape(vec![d_x])?.sub(s)?;
    let inv_rho2 = rho.mul(rho)?.recip();
    let lik_drift = prior
        .w
        .transpose()?
        .matvec(slope.mul(resid)?.mul_scalar(inv_rho2)?)?;
    let prior_drift = z.soft_threshold(lam)?.sub(z)?.mul_scalar(lam.recip())?;
    let step = lik_drift.add(prior_drift)?.mul_scalar(gamma)?;
    let z_next = z
        .add(step)?
        .gaussian_reparam(gamma.scale(2.0).sqrt(), zeta_z)?;
    check_finite(&z_next, layer, "latent")?;

    let mean = prior.mean(z_next)?.reshape(obs.domain_shape())?;
    let center = prox_node(tape, &obs.lik, &obs.y, rho.mul(rho)?, mean)?;
    let x_next = center.add(conditional_noise_node(tape, &obs.lik, rho, zeta_x)?)?;
    check_finite(&x_next, layer, "sample")?;
    Ok((x_next, z_next))
}

/// One LATINO transition on the tape.
pub fn latino_step_on<'t>(
    vars: &ModelVars<'t>,
    denoiser: &DenoiserVars<'t>,
    schedule: &VpSchedule,
    obs: &Observation,
    layer: usize,
    x: Var<'t>,
    zeta: Tensor,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let t = vars.aux(layer)?;
    let tv = t.item();
    if !(tv > 0.0 && tv <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "layer {layer}: diffusion time {tv} outside (0, 1]"
        )));
    }
    let gamma = vars.gamma(layer)?;
    let (mu, sigma) = schedule.coefficients(t);
    let x_t = x.mul_scalar(mu)?.gaussian_reparam(sigma, zeta)?;
    let den = denoiser.forward(x_t, mu, sigma)?;
    check_finite(&den, layer, "denoised")?;
    let step = gamma.scale(1.0 / obs.lipschitz());
    let x_next = prox_node(tape, &obs.lik, &obs.y, step, den)?;
    check_finite(&x_next, layer, "sample")?;
    Ok(x_next)
}

/// Chain output while it still lives on a tape.
pub struct TapeTrace<'t> {
    pub samples: Vec<Var<'t>>,
    pub ergodic_mean: Var<'t>,
    pub latent: Option<Var<'t>>,
}

/// Chain output as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub samples: Vec<Tensor>,
    pub ergodic_mean: Tensor,
    pub latent: Option<Tensor>,
    pub key: StreamKey,
}

impl TapeTrace<'_> {
    pub fn to_plain(&self, key: StreamKey) -> ChainTrace {
        ChainTrace {
            samples: self
                .samples
                .iter()
                .map(|s| s.value().as_ref().clone())
                .collect(),
            ergodic_mean: self.ergodic_mean.value().as_ref().clone(),
            latent: self.latent.map(|z| z.value().as_ref().clone()),
            key,
        }
    }
}

fn ergodic_mean<'t>(samples: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = samples[0];
    for s in &samples[1..] {
        acc = acc.add(*s)?;
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// Runs the full chain on `tape` with noise drawn from `key`.
pub fn unfold_chain_on<'t>(
    tape: &'t Tape,
    model: &UnfoldedModel,
    vars: &ModelVars<'t>,
    obs: &Observation,
    key: StreamKey,
) -> Result<TapeTrace<'t>> {
    let shape = obs.domain_shape();
    let mut samples = Vec::with_capacity(model.retained());
    let mut latent = None;
    match (&model.prior, &vars.prior) {
        (ModelPrior::Sgs(p), PriorVars::Sgs(pv)) => {
            let mut x = tape.constant(Tensor::zeros(&shape));
            let mut z = tape.constant(Tensor::zeros(&[p.d_z()]));
            for layer in 0..=model.layers {
                let mut rng = key.stream(layer, Role::LatentNoise);
                let zeta_z = normal_tensor(&mut rng, &[p.d_z()]);
                let mut rng = key.stream(layer, Role::ConditionalNoise);
                let zeta_x = normal_tensor(&mut rng, &shape);
                (x, z) = sgs_step_on(vars, pv, obs, layer, x, z, zeta_z, zeta_x)?;
                if layer >= model.burn_in {
                    samples.push(x);
                }
            }
            latent = Some(z);
        }
        (ModelPrior::Latino { schedule, init, .. }, PriorVars::Latino(dv)) => {
            let x0 = match init {
                LatinoInit::Zero => Tensor::zeros(&shape),
                LatinoInit::BackProjection => obs
                    .lik
                    .operator
                    .adjoint(&obs.y)?
                    .scale(1.0 / (obs.lipschitz() * obs.lipschitz())),
            };
            let mut x = tape.constant(x0);
            for layer in 0..=model.layers {
                let mut rng = key.stream(layer, Role::DiffusionNoise);
                let zeta = normal_tensor(&mut rng, &shape);
                x = latino_step_on(vars, dv, schedule, obs, layer, x, zeta)?;
                if layer >= model.burn_in {
                    samples.push(x);
                }
            }
        }
        _ => {
            return Err(Error::InvalidInput(
                "model and bound parameters disagree on kernel".into(),
            ))
        }
    }
    let ergodic_mean = ergodic_mean(&samples)?;
    Ok(TapeTrace {
        samples,
        ergodic_mean,
        latent,
    })
}

/// Runs a chain with fixed parameters and returns its samples.
pub fn unfold_chain(
    model: &UnfoldedModel,
    obs: &Observation,
    key: StreamKey,
) -> Result<ChainTrace> {
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    Ok(unfold_chain_on(&tape, model, &vars, obs, key)?.to_plain(key))
}

/// Split-Gibbs state.
#[derive(Debug, Clone, PartialEq)]
pub struct SgsState {
    pub x: Tensor,
    pub z: Tensor,
}

/// One split-Gibbs transition with plain tensors; draws the latent noise and
/// then the conditional noise from `rng`.
pub fn sgs_step<R: Rng + ?Sized>(
    model: &UnfoldedModel,
    state: &SgsState,
    obs: &Observation,
    layer: usize,
    rng: &mut R,
) -> Result<SgsState> {
    if layer > model.layers {
        return Err(Error::InvalidInput(format!(
            "layer {layer} beyond L = {}",
            model.layers
        )));
    }
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let PriorVars::Sgs(pv) = vars.prior else {
        return Err(Error::InvalidInput("sgs_step on a non-SGS model".into()));
    };
    let zeta_z = normal_tensor(rng, state.z.shape());
    let zeta_x = normal_tensor(rng, &obs.domain_shape());
    let x = tape.constant(state.x.reshape(obs.domain_shape())?);
    let z = tape.constant(state.z.clone());
    let (x, z) = sgs_step_on(&vars, &pv, obs, layer, x, z, zeta_z, zeta_x)?;
    Ok(SgsState {
        x: x.value().as_ref().clone(),
        z: z.value().as_ref().clone(),
    })
}

/// One LATINO transition with plain tensors.
pub fn latino_step<R: Rng + ?Sized>(
    model: &UnfoldedModel,
    x: &Tensor,
    obs: &Observation,
    layer: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if layer > model.layers {
        return Err(Error::InvalidInput(format!(
            "layer {layer} beyond L = {}",
            model.layers
        )));
    }
    let ModelPrior::Latino { schedule, .. } = &model.prior else {
        return Err(Error::InvalidInput(
            "latino_step on a non-LATINO model".into(),
        ));
    };
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let PriorVars::Latino(dv) = vars.prior else {
        unreachable!("bound prior follows the model prior")
    };
    let zeta = normal_tensor(rng, &obs.domain_shape());
    let xv = tape.constant(x.reshape(obs.domain_shape())?);
    let out = latino_step_on(&vars, &dv, schedule, obs, layer, xv, zeta)?;
    Ok(out.value().as_ref().clone())
}

/// `γ_ℓ = lipschitz/2` and `t_ℓ = min(1, 3(L+1−ℓ)/(4L))` for `ℓ = 0..=L`.
pub fn zero_shot_latino_defaults(layers: usize, lipschitz: f64) -> Result<Vec<(f64, f64)>> {
    if layers == 0 {
        return Err(Error::InvalidInput("zero-shot schedule needs L ≥ 1".into()));
    }
    let l = layers as f64;
    Ok((0..=layers)
        .map(|k| {
            let t = 3.0 * (l + 1.0 - k as f64) / (4.0 * l);
            (lipschitz / 2.0, t.min(1.0))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::linops::{sample_gaussian_conditional, LinearOperator};
    use crate::priors::SmallDense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn blur_obs(seed: u64) -> Observation {
        let kernel = Tensor::new(vec![2, 2], vec![0.5, 0.2, 0.2, 0.1]);
        let op = LinearOperator::circulant(kernel, 3, 3).unwrap();
        let lik = GaussianLikelihood::new(op, 0.1).unwrap();
        let y = normal_tensor(&mut rng(seed), &[3, 3])
            .scale(0.3)
            .map(|v| v + 0.5);
        Observation::new(y, lik).unwrap()
    }

    fn sgs_model(layers: usize, burn_in: usize, seed: u64) -> UnfoldedModel {
        let prior = LatentLaplacePrior::init(9, 3, 0.5, &mut rng(seed)).unwrap();
        UnfoldedModel::sgs_uniform(layers, burn_in, 0.05, 0.2, prior).unwrap()
    }

    #[test]
    fn zero_step_with_frozen_noise_keeps_latent() {
        let obs = blur_obs(1);
        let model = sgs_model(2, 0, 2);
        let tape = Tape::new();
        let mut vars = model.bind(&tape, false);
        vars.log_gamma = tape.constant(Tensor::full(&[3], f64::NEG_INFINITY));
        let PriorVars::Sgs(pv) = vars.prior else {
            unreachable!()
        };
        let z0 = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let x = tape.constant(Tensor::full(&[3, 3], 0.4));
        let z = tape.constant(z0.clone());
        let (_, z1) = sgs_step_on(
            &vars,
            &pv,
            &obs,
            1,
            x,
            z,
            Tensor::zeros(&[3]),
            Tensor::zeros(&[3, 3]),
        )
        .unwrap();
        assert_eq!(z1.value().data(), z0.data());
    }

    #[test]
    fn decoupled_latent_drift_is_prior_score() {
        let obs = blur_obs(3);
        let prior = LatentLaplacePrior::new(Tensor::zeros(&[9, 3]), 0.8).unwrap();
        let model = UnfoldedModel::sgs_uniform(1, 0, 0.1, 0.3, prior).unwrap();
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let PriorVars::Sgs(pv) = vars.prior else {
            unreachable!()
        };
        let z0 = Tensor::vector(vec![0.3, -1.5, 2.0]);
        let x = tape.constant(normal_tensor(&mut rng(4), &[3, 3]));
        let (_, z1) = sgs_step_on(
            &vars,
            &pv,
            &obs,
            0,
            x,
            tape.constant(z0.clone()),
            Tensor::zeros(&[3]),
            Tensor::zeros(&[3, 3]),
        )
        .unwrap();
        let score = crate::priors::laplace_score_smoothed(&z0, 0.8).unwrap();
        for i in 0..3 {
            let want = z0.data()[i] + 0.1 * score.data()[i];
            assert!((z1.value().data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn x_update_matches_conditional_moments() {
        // With ρ fixed and z frozen, the x-update is the exact Gaussian conditional.
        let kernel = Tensor::new(vec![1, 2], vec![0.7, 0.4]);
        let op = LinearOperator::circulant(kernel, 1, 2).unwrap();
        let lik = GaussianLikelihood::new(op.clone(), 0.3).unwrap();
        let obs = Observation::new(Tensor::vector(vec![0.6, 0.2]), lik.clone()).unwrap();
        let prior = LatentLaplacePrior::new(Tensor::new(vec![2, 1], vec![1.0, -0.5]), 1.0).unwrap();
        let rho = 0.25;
        let model = UnfoldedModel::sgs_uniform(1, 0, 0.1, rho, prior.clone()).unwrap();
        let z = Tensor::vector(vec![0.4]);
        let m = prior.prior_mean(&z).unwrap().reshape(vec![1, 2]).unwrap();
        let a = op.to_dense().unwrap();
        let s2 = 0.09;
        // Analytic covariance (AᵀA/σ² + I/ρ²)⁻¹ and mean via 2×2 algebra.
        let ata = a.transpose().unwrap().matmul(&a).unwrap();
        let p = [
            ata.data()[0] / s2 + 1.0 / (rho * rho),
            ata.data()[1] / s2,
            ata.data()[2] / s2,
            ata.data()[3] / s2 + 1.0 / (rho * rho),
        ];
        let det = p[0] * p[3] - p[1] * p[2];
        let cov = [p[3] / det, -p[1] / det, -p[2] / det, p[0] / det];
        let aty = op.adjoint(&obs.y).unwrap();
        let b = [
            aty.data()[0] / s2 + m.data()[0] / (rho * rho),
            aty.data()[1] / s2 + m.data()[1] / (rho * rho),
        ];
        let mean = [cov[0] * b[0] + cov[1] * b[1], cov[2] * b[0] + cov[3] * b[1]];

        let n = 100_000;
        let mut r = rng(5);
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let PriorVars::Sgs(pv) = vars.prior else {
            unreachable!()
        };
        let zc = tape.constant(z.clone());
        let mut acc = [0.0; 2];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let zeta_x = normal_tensor(&mut r, &[1, 2]);
            let rho_v = tape.scalar(rho);
            let center = prox_node(
                &tape,
                &obs.lik,
                &obs.y,
                rho_v.mul(rho_v).unwrap(),
                pv.mean(zc).unwrap().reshape(vec![1, 2]).unwrap(),
            )
            .unwrap();
            let x = center
                .add(conditional_noise_node(&tape, &obs.lik, rho_v, zeta_x).unwrap())
                .unwrap()
                .value();
            for i in 0..2 {
                acc[i] += x.data()[i];
                for j in 0..2 {
                    sq[i * 2 + j] += (x.data()[i] - mean[i]) * (x.data()[j] - mean[j]);
                }
            }
        }
        for i in 0..2 {
            let se = (cov[i * 3] / n as f64).sqrt();
            assert!((acc[i] / n as f64 - mean[i]).abs() < 4.0 * se);
            assert!((sq[i * 3] / n as f64 / cov[i * 3] - 1.0).abs() < 0.02);
        }
        let se01 = ((cov[0] * cov[3] + cov[1] * cov[1]) / n as f64).sqrt();
        assert!((sq[1] / n as f64 - cov[1]).abs() < 5.0 * se01);
        // The plain sampler agrees on the mean.
        let x = sample_gaussian_conditional(&lik, &obs.y, 1e-9, &m, &mut r).unwrap();
        assert!(x.sub(&m).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn chain_equals_stepwise_replay() {
        let obs = blur_obs(6);
        let model = sgs_model(3, 1, 7);
        let key = StreamKey::new(42, 0);
        let trace = unfold_chain(&model, &obs, key).unwrap();
        assert_eq!(trace.samples.len(), 3);
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let PriorVars::Sgs(pv) = vars.prior else {
            unreachable!()
        };
        let mut x = tape.constant(Tensor::zeros(&[3, 3]));
        let mut z = tape.constant(Tensor::zeros(&[3]));
        for layer in 0..=3 {
            let zeta_z = normal_tensor(&mut key.stream(layer, Role::LatentNoise), &[3]);
            let zeta_x = normal_tensor(&mut key.stream(layer, Role::ConditionalNoise), &[3, 3]);
            (x, z) = sgs_step_on(&vars, &pv, &obs, layer, x, z, zeta_z, zeta_x).unwrap();
            if layer >= 1 {
                assert_eq!(x.value().data(), trace.samples[layer - 1].data());
            }
        }
    }

    #[test]
    fn plain_step_draws_latent_then_conditional_noise() {
        let obs = blur_obs(6);
        let model = sgs_model(3, 1, 7);
        let state = SgsState {
            x: Tensor::full(&[3, 3], 0.5),
            z: Tensor::vector(vec![0.1, -0.2, 0.3]),
        };
        let next = sgs_step(&model, &state, &obs, 2, &mut rng(30)).unwrap();
        let mut r = rng(30);
        let zeta_z = normal_tensor(&mut r, &[3]);
        let zeta_x = normal_tensor(&mut r, &[3, 3]);
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let PriorVars::Sgs(pv) = vars.prior else {
            unreachable!()
        };
        let (x, z) = sgs_step_on(
            &vars,
            &pv,
            &obs,
            2,
            tape.constant(state.x.clone()),
            tape.constant(state.z.clone()),
            zeta_z,
            zeta_x,
        )
        .unwrap();
        assert_eq!(next.x, *x.value());
        assert_eq!(next.z, *z.value());
        assert!(sgs_step(&model, &state, &obs, 4, &mut rng(30)).is_err());
    }

    #[test]
    fn burn_in_and_ergodic_mean() {
        let obs = blur_obs(8);
        let model = sgs_model(8, 2, 9);
        let trace = unfold_chain(&model, &obs, StreamKey::new(1, 3)).unwrap();
        assert_eq!(trace.samples.len(), 7);
        let mut mean = Tensor::zeros(&[3, 3]);
        for s in &trace.samples {
            mean.axpy(1.0 / 7.0, s);
        }
        assert!(mean.sub(&trace.ergodic_mean).unwrap().max_abs() < 1e-14);

        let single = sgs_model(4, 4, 9);
        let trace = unfold_chain(&single, &obs, StreamKey::new(1, 3)).unwrap();
        assert_eq!(trace.samples.len(), 1);
        assert_eq!(trace.samples[0], trace.ergodic_mean);
    }

    #[test]
    fn chains_are_bitwise_reproducible() {
        let obs = blur_obs(10);
        let model = sgs_model(6, 1, 11);
        let a = unfold_chain(&model, &obs, StreamKey::new(5, 2)).unwrap();
        let b = unfold_chain(&model, &obs, StreamKey::new(5, 2)).unwrap();
        assert_eq!(a, b);
        let c = unfold_chain(&model, &obs, StreamKey::new(5, 3)).unwrap();
        assert_ne!(a.ergodic_mean, c.ergodic_mean);
    }

    #[test]
    fn divergence_names_layer() {
        let obs = blur_obs(12);
        let prior = LatentLaplacePrior::init(9, 3, 0.5, &mut rng(1)).unwrap();
        let model = UnfoldedModel::sgs_uniform(3, 0, 1.7e308, 0.2, prior).unwrap();
        let err = unfold_chain(&model, &obs, StreamKey::new(0, 0)).unwrap_err();
        assert!(
            matches!(err, Error::ChainDivergence { layer: 0, .. }),
            "{err}"
        );
    }

    #[test]
    fn ergodic_mean_gradient_in_gamma_matches_finite_differences() {
        let obs = blur_obs(13);
        let model = sgs_model(2, 0, 14);
        let key = StreamKey::new(3, 1);
        let weights = normal_tensor(&mut rng(15), &[3, 3]);
        let base = model.log_gamma.clone();
        let err = finite_diff_check(
            |tape: &Tape, lg| {
                let mut vars = model.bind(tape, false);
                vars.log_gamma = lg;
                let tr = unfold_chain_on(tape, &model, &vars, &obs, key)?;
                Ok(tr.ergodic_mean.mul(tape.constant(weights.clone()))?.sum())
            },
            &base,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");

        let tape = Tape::new();
        let vars = model.bind(&tape, true);
        let tr = unfold_chain_on(&tape, &model, &vars, &obs, key).unwrap();
        let g = tape
            .backward(
                tr.ergodic_mean
                    .mul(tape.constant(weights.clone()))
                    .unwrap()
                    .sum(),
            )
            .unwrap();
        let dg = g.wrt(vars.log_gamma);
        assert!(dg.data()[1] != 0.0 && dg.data()[2] != 0.0);
    }

    #[test]
    fn all_parameters_receive_gradients() {
        let obs = blur_obs(16);
        let model = sgs_model(2, 0, 17);
        let tape = Tape::new();
        let vars = model.bind(&tape, true);
        let tr = unfold_chain_on(&tape, &model, &vars, &obs, StreamKey::new(1, 1)).unwrap();
        let g = tape.backward(tr.ergodic_mean.sum()).unwrap();
        for leaf in vars.leaves() {
            assert!(g.get(leaf).is_some());
            assert!(g.wrt(leaf).max_abs() > 0.0);
        }
    }

    fn scalar_latino(t: f64, gamma: f64, denoiser: Denoiser) -> (UnfoldedModel, Observation) {
        let lik = GaussianLikelihood::new(LinearOperator::identity(1), 0.5).unwrap();
        let obs = Observation::new(Tensor::vector(vec![0.8]), lik).unwrap();
        let model = UnfoldedModel::latino(
            1,
            0,
            &[(gamma, t), (gamma, t)],
            denoiser,
            VpSchedule::default(),
            LatinoInit::Zero,
        )
        .unwrap();
        (model, obs)
    }

    #[test]
    fn latino_degenerate_step_is_identity() {
        let mut net = SmallDense::init(1, &mut rng(18));
        net.w2 = Tensor::zeros(&[SmallDense::HIDDEN, 1]);
        let (model, obs) = scalar_latino(MIN_TIME, 1e-14, Denoiser::SmallDense(net));
        let x = Tensor::vector(vec![0.37]);
        // μ_t ≈ 1 − 1e-5 and σ_t ≈ 4.5e-3 at the smallest time, so the
        // step is the identity up to the forward noise.
        let out = latino_step(&model, &x, &obs, 0, &mut rng(19)).unwrap();
        assert!((out.item() - 0.37).abs() < 0.02);
        let tape = Tape::new();
        let vars = model.bind(&tape, false);
        let PriorVars::Latino(dv) = vars.prior else {
            unreachable!()
        };
        let out = latino_step_on(
            &vars,
            &dv,
            &VpSchedule::default(),
            &obs,
            0,
            tape.constant(x.clone()),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        assert!((out.item() - 0.37 * VpSchedule::default().mu(MIN_TIME)).abs() < 1e-12);
    }

    #[test]
    fn latino_analytic_composition() {
        let sched = VpSchedule::default();
        let (a, c) = (0.2, 0.5);
        let den = Denoiser::analytic(Tensor::vector(vec![a]), Tensor::vector(vec![c])).unwrap();
        let (t, gamma) = (0.3, 0.4);
        let (model, obs) = scalar_latino(t, gamma, den);
        let x = Tensor::vector(vec![1.1]);
        let out = latino_step(&model, &x, &obs, 0, &mut rng(20))
            .unwrap()
            .item();
        let mut r = rng(20);
        let zeta = normal_tensor(&mut r, &[1]).item();
        let (m, s) = (sched.mu(t), sched.sigma(t));
        let xt = m * 1.1 + s * zeta;
        let z = a + m * c / (m * m * c + s * s) * (xt - m * a);
        let g = gamma / 1.0;
        let want = (z + g / 0.25 * 0.8) / (1.0 + g / 0.25);
        assert!((out - want).abs() < 1e-14);
    }

    #[test]
    fn latino_is_seed_deterministic() {
        let net = SmallDense::init(1, &mut rng(21));
        let (model, obs) = scalar_latino(0.5, 0.3, Denoiser::SmallDense(net));
        let x = Tensor::vector(vec![0.2]);
        let a = latino_step(&model, &x, &obs, 1, &mut rng(22)).unwrap();
        let b = latino_step(&model, &x, &obs, 1, &mut rng(22)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_shot_schedule() {
        let s = zero_shot_latino_defaults(8, 1.0).unwrap();
        assert_eq!(s.len(), 9);
        assert_eq!(s[0].1, 27.0 / 32.0);
        assert_eq!(s[8].1, 3.0 / 32.0);
        assert!(s.iter().all(|p| p.0 == 0.5));
        let s = zero_shot_latino_defaults(1, 2.0).unwrap();
        assert_eq!(s[0], (1.0, 1.0));
        assert_eq!(s[1], (1.0, 0.75));
        assert!(zero_shot_latino_defaults(0, 1.0).is_err());
    }

    #[test]
    fn constructors_validate() {
        let prior = LatentLaplacePrior::init(9, 3, 0.5, &mut rng(1)).unwrap();
        assert!(UnfoldedModel::sgs_uniform(2, 3, 0.1, 0.1, prior.clone()).is_err());
        assert!(UnfoldedModel::sgs(2, 0, &[0.1; 2], &[0.1; 3], prior.clone()).is_err());
        assert!(UnfoldedModel::sgs_uniform(2, 0, -0.1, 0.1, prior).is_err());
        let den = Denoiser::analytic(Tensor::vector(vec![0.0]), Tensor::vector(vec![1.0])).unwrap();
        assert!(UnfoldedModel::latino(
            1,
            0,
            &[(1.0, 0.5), (1.0, 1.5)],
            den,
            VpSchedule::default(),
            LatinoInit::Zero
        )
        .is_err());
    }
}
