//! Regularized conditional Wasserstein training of unfolded chains.
//!
//! Each generator round runs one chain per batch item on its own tape,
//! picks a random retained layer for the adversarial term and accumulates
//! the parameter gradients in batch order, so results do not depend on the
//! number of worker threads.

mod adam;
mod losses;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{unfold_chain, unfold_chain_on, Observation, UnfoldedModel};
use crate::persist::Archive;
use crate::rng::{normal_tensor, Role, StreamKey};
use crate::tensor::Tensor;

pub use adam::Adam;
pub use losses::{
    loss_adv, loss_gp, loss_l1, loss_sd, total_generator_loss, trace_spread, GeneratorLoss,
    LossWeights, MeanAbs, Perceptual,
};

/// Critic `(x, y) ↦ ℝ` with two leaky hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

#[derive(Clone, Copy)]
pub struct DiscriminatorVars<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub w3: Var<'t>,
    pub b3: Var<'t>,
}

impl Discriminator {
    pub const WIDTH: usize = 128;
    pub const SLOPE: f64 = 0.2;

    pub fn init<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Self {
        let h = Self::WIDTH;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        Discriminator {
            w1: normal_tensor(rng, &[input, h]).scale(he(input)),
            b1: Tensor::zeros(&[h]),
            w2: normal_tensor(rng, &[h, h]).scale(he(h)),
            b2: Tensor::zeros(&[h]),
            w3: normal_tensor(rng, &[h, 1]).scale(1.0 / (h as f64).sqrt()),
            b3: Tensor::zeros(&[1]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> DiscriminatorVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        DiscriminatorVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
            w3: leaf(&self.w3),
            b3: leaf(&self.b3),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("disc.w1", &self.w1);
        f("disc.b1", &self.b1);
        f("disc.w2", &self.w2);
        f("disc.b2", &self.b2);
        f("disc.w3", &self.w3);
        f("disc.b3", &self.b3);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("disc.w1", &mut self.w1);
        f("disc.b1", &mut self.b1);
        f("disc.w2", &mut self.w2);
        f("disc.b2", &mut self.b2);
        f("disc.w3", &mut self.w3);
        f("disc.b3", &mut self.b3);
    }

    /// Scores for rows `[x, y]` of a plain matrix.
    pub fn score(&self, rows: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let v = self.bind(&tape, false);
        Ok(v.score(tape.constant(rows.clone()))?
            .value()
            .as_ref()
            .clone())
    }
}

impl<'t> DiscriminatorVars<'t> {
    /// `[n, d_x + d_y] → [n, 1]`.
    pub fn score(&self, rows: Var<'t>) -> Result<Var<'t>> {
        let s = Discriminator::SLOPE;
        let h = rows.matmul(self.w1)?.add_row_bias(self.b1)?.leaky_relu(s);
        let h = h.matmul(self.w2)?.add_row_bias(self.b2)?.leaky_relu(s);
        h.matmul(self.w3)?.add_row_bias(self.b3)
    }

    pub fn leaves(&self) -> [Var<'t>; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// Target of the single-to-mean error ratio for `n_val` validation chains.
pub fn rm_target(n_val: usize) -> f64 {
    2.0 * (n_val as f64 + 1.0) / n_val as f64
}

/// How the validation ratio responds to a larger diversity weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmDirection {
    Increasing,
    Decreasing,
}

impl RmDirection {
    fn sign(self) -> f64 {
        match self {
            RmDirection::Increasing => 1.0,
            RmDirection::Decreasing => -1.0,
        }
    }
}

/// Validation errors of single chains and of `n_val`-chain averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValStats {
    /// `E‖x − x_L‖²`
    pub mse_single: f64,
    /// `E‖x − (1/N) Σ_n x_L^{(n)}‖²`
    pub mse_mean: f64,
}

impl ValStats {
    pub fn ratio(&self) -> f64 {
        self.mse_single / self.mse_mean
    }
}

/// One stochastic-approximation step moving the ratio toward its target.
pub fn robbins_monro_update(
    w_sd: f64,
    stats: ValStats,
    n_val: usize,
    step: f64,
    direction: RmDirection,
) -> f64 {
    let r = stats.ratio();
    if !r.is_finite() {
        return w_sd;
    }
    (w_sd - step * direction.sign() * (r - rm_target(n_val))).max(0.0)
}

/// Switches the diversity reward off once validation error exceeds `threshold`.
pub fn sd_safeguard(w_sd: f64, val_mse: f64, threshold: f64) -> f64 {
    if val_mse > threshold {
        0.0
    } else {
        w_sd
    }
}

fn default_w1() -> f64 {
    1.0
}
fn default_n_val() -> usize {
    8
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-3
}
fn default_critic_steps() -> usize {
    5
}
fn default_rm_step() -> f64 {
    0.1
}
fn default_interval() -> u64 {
    50
}
fn default_val_items() -> usize {
    16
}
fn default_probe_w() -> f64 {
    1.0
}

/// Direction setting of the diversity-weight scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RmDirectionSetting {
    #[default]
    Auto,
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_w1")]
    pub w1: f64,
    #[serde(default)]
    pub w_sd: f64,
    #[serde(default)]
    pub w_ps: f64,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    pub sd_threshold: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub generator_lr: f64,
    #[serde(default = "default_lr")]
    pub discriminator_lr: f64,
    #[serde(default = "default_critic_steps")]
    pub discriminator_steps_per_generator_step: usize,
    #[serde(default = "default_rm_step")]
    pub robbins_monro_step: f64,
    #[serde(default)]
    pub total_steps: u64,
    #[serde(default = "default_interval")]
    pub validation_interval: u64,
    #[serde(default = "default_val_items")]
    pub validation_items: usize,
    #[serde(default)]
    pub rm_direction: RmDirectionSetting,
    #[serde(default = "default_probe_w")]
    pub rm_probe_w_sd: f64,
}

impl TrainingConfig {
    /// Defaults with the given safeguard threshold.
    pub fn with_threshold(sd_threshold: f64) -> Self {
        TrainingConfig {
            w1: default_w1(),
            w_sd: 0.0,
            w_ps: 0.0,
            n_val: default_n_val(),
            sd_threshold,
            batch_size: default_batch(),
            generator_lr: default_lr(),
            discriminator_lr: default_lr(),
            discriminator_steps_per_generator_step: default_critic_steps(),
            robbins_monro_step: default_rm_step(),
            total_steps: 0,
            validation_interval: default_interval(),
            validation_items: default_val_items(),
            rm_direction: RmDirectionSetting::Auto,
            rm_probe_w_sd: default_probe_w(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("w1", self.w1),
            ("w_sd", self.w_sd),
            ("w_ps", self.w_ps),
            ("rm_probe_w_sd", self.rm_probe_w_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        for (name, v) in [
            ("generator_lr", self.generator_lr),
            ("discriminator_lr", self.discriminator_lr),
            ("robbins_monro_step", self.robbins_monro_step),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.sd_threshold > 0.0) {
            return bad(format!(
                "sd_threshold must be positive, got {}",
                self.sd_threshold
            ));
        }
        if self.n_val == 0 || self.batch_size == 0 || self.validation_items == 0 {
            return bad("n_val, batch_size and validation_items must be at least 1".into());
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be at least 1".into());
        }
        Ok(())
    }
}

/// A ground-truth signal with its observation.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x: Tensor,
    pub obs: Observation,
}

/// Deterministic source of training pairs.
pub trait ProblemSource: Sync {
    fn draw(&self, key: StreamKey) -> Result<TrainItem>;
}

/// Losses of one training round, plus validation results when run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub critic_loss: f64,
    pub gp: f64,
    pub adv: f64,
    pub l1: f64,
    pub sd: f64,
    pub total: f64,
    pub w_sd: f64,
    pub validation: Option<ValStats>,
}

impl StepRecord {
    pub const HEADER: &'static str =
        "step\tcritic_loss\tgp\tadv\tl1\tsd\ttotal\tw_sd\tval_mse\tval_mse_mean\tval_ratio";

    /// Tab-separated row; floats use the shortest exact representation.
    pub fn to_line(&self) -> String {
        let (a, b, c) = match self.validation {
            Some(v) => (
                v.mse_single.to_string(),
                v.mse_mean.to_string(),
                v.ratio().to_string(),
            ),
            None => ("".into(), "".into(), "".into()),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{a}\t{b}\t{c}",
            self.step, self.critic_loss, self.gp, self.adv, self.l1, self.sd, self.total, self.w_sd
        )
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: UnfoldedModel,
    pub disc: Discriminator,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
    pub w_sd: f64,
    pub direction: Option<RmDirection>,
    pub rm_rounds: u64,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub seed: u64,
    pub state: TrainState,
    perceptual: Box<dyn Perceptual>,
}

fn critic_row(x: &Tensor, y: &Tensor) -> Vec<f64> {
    let mut row = x.data().to_vec();
    row.extend_from_slice(y.data());
    row
}

fn choose_layer(model: &UnfoldedModel, key: StreamKey) -> usize {
    let mut rng = key.stream(0, Role::LayerChoice);
    rng.random_range(model.burn_in..=model.layers)
}

struct ItemGrad {
    grads: Vec<Tensor>,
    adv: f64,
    l1: f64,
    sd: f64,
    total: f64,
}

const ROOT_STEP: u64 = 0;
const ROOT_VALIDATION: u64 = 1;

impl Trainer {
    pub fn new(
        config: TrainingConfig,
        model: UnfoldedModel,
        disc: Discriminator,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let direction = match config.rm_direction {
            RmDirectionSetting::Auto => None,
            RmDirectionSetting::Increasing => Some(RmDirection::Increasing),
            RmDirectionSetting::Decreasing => Some(RmDirection::Decreasing),
        };
        let state = TrainState {
            model,
            disc,
            gen_opt: Adam::new(config.generator_lr, 0.5, 0.9),
            disc_opt: Adam::new(config.discriminator_lr, 0.5, 0.9),
            step: 0,
            w_sd: config.w_sd,
            direction,
            rm_rounds: 0,
        };
        Ok(Trainer {
            config,
            seed,
            state,
            perceptual: Box::new(MeanAbs),
        })
    }

    pub fn set_perceptual(&mut self, p: Box<dyn Perceptual>) {
        self.perceptual = p;
    }

    fn step_key(&self, step: u64) -> StreamKey {
        StreamKey::new(self.seed, ROOT_STEP).child(step)
    }

    fn validation_key(&self) -> StreamKey {
        StreamKey::new(self.seed, ROOT_VALIDATION).child(0)
    }

    fn check_item(&self, item: &TrainItem) -> Result<()> {
        let want = self.state.disc.input_dim();
        let got = item.x.len() + item.obs.y.len();
        if got != want {
            return Err(Error::Shape(format!(
                "critic input {want} vs item of size {got}"
            )));
        }
        Ok(())
    }

    /// One critic update from freshly generated samples.
    fn critic_round(&mut self, source: &dyn ProblemSource, key: StreamKey) -> Result<(f64, f64)> {
        let model = &self.state.model;
        let n = self.config.batch_size;
        let pairs: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let ik = key.child(i);
                let item = source.draw(ik.child(0))?;
                self.check_item(&item)?;
                let trace = unfold_chain(model, &item.obs, ik.child(1))?;
                let l = choose_layer(model, ik);
                let fake = &trace.samples[l - model.burn_in];
                Ok((
                    critic_row(&item.x, &item.obs.y),
                    critic_row(fake, &item.obs.y),
                    item.x.len(),
                ))
            })
            .collect::<Result<_>>()?;
        let d_x = pairs[0].2;
        let width = pairs[0].0.len();
        let real = Tensor::new(
            vec![n, width],
            pairs.iter().flat_map(|p| p.0.clone()).collect(),
        );
        let fake = Tensor::new(
            vec![n, width],
            pairs.iter().flat_map(|p| p.1.clone()).collect(),
        );
        let mut rng = key.stream(0, Role::Interpolation);
        let alphas: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

        let tape = Tape::new();
        let dv = self.state.disc.bind(&tape, true);
        let critic = |rows| dv.score(rows);
        let adv = loss_adv(
            critic,
            tape.constant(real.clone()),
            tape.constant(fake.clone()),
        )?;
        let gp = loss_gp(&tape, critic, &real, &fake, d_x, &alphas)?;
        let loss = gp.sub(adv)?;
        let (lv, gv) = (loss.item(), gp.item());
        if !lv.is_finite() {
            return Err(Error::TrainingDivergence {
                step: self.state.step,
                what: "critic loss",
            });
        }
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor> = dv.leaves().iter().map(|v| g.wrt(*v)).collect();
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(Error::TrainingDivergence {
                step: self.state.step,
                what: "critic gradient",
            });
        }
        let opt = &mut self.state.disc_opt;
        let mut k = 0;
        self.state.disc.visit_mut(&mut |name, p| {
            opt.step(name, p, &grads[k]);
            k += 1;
        });
        opt.tick();
        Ok((lv, gv))
    }

    fn generator_item(
        &self,
        source: &dyn ProblemSource,
        ik: StreamKey,
        w_sd: f64,
    ) -> Result<ItemGrad> {
        let model = &self.state.model;
        let item = source.draw(ik.child(0))?;
        self.check_item(&item)?;
        let tape = Tape::new();
        let mv = model.bind(&tape, true);
        let dv = self.state.disc.bind(&tape, false);
        let trace = unfold_chain_on(&tape, model, &mv, &item.obs, ik.child(1))?;
        let l = choose_layer(model, ik);
        let width = item.x.len() + item.obs.y.len();
        let yv = tape.constant(Tensor::vector(item.obs.y.data().to_vec()));
        let row = |x: Var<'_>| -> Result<Var<'_>> {
            let flat = x.reshape(vec![x.value().len()])?;
            tape.concat(&[flat, yv])?.reshape(vec![1, width])
        };
        let xv = tape.constant(item.x.reshape(item.obs.domain_shape())?);
        let critic = |rows| dv.score(rows);
        let adv = loss_adv(critic, row(xv)?, row(trace.samples[l - model.burn_in])?)?;
        let weights = LossWeights {
            w1: self.config.w1,
            w_sd,
            w_ps: self.config.w_ps,
        };
        let parts = total_generator_loss(
            adv,
            &[xv],
            std::slice::from_ref(&trace),
            weights,
            self.perceptual.as_ref(),
        )?;
        let scale = 1.0 / self.config.batch_size as f64;
        let g = tape.backward(parts.total.scale(scale))?;
        Ok(ItemGrad {
            grads: mv.leaves().iter().map(|v| g.wrt(*v)).collect(),
            adv: parts.adv.item() * scale,
            l1: parts.l1.item() * scale,
            sd: parts.sd.item() * scale,
            total: parts.total.item() * scale,
        })
    }

    /// One generator update; returns `(adv, l1, sd, total)`.
    fn generator_round(
        &mut self,
        source: &dyn ProblemSource,
        key: StreamKey,
        w_sd: f64,
    ) -> Result<[f64; 4]> {
        let n = self.config.batch_size as u64;
        let items: Vec<ItemGrad> = (0..n)
            .into_par_iter()
            .map(|i| self.generator_item(source, key.child(i), w_sd))
            .collect::<Result<_>>()?;
        let mut grads: Vec<Tensor> = items[0]
            .grads
            .iter()
            .map(|g| Tensor::zeros(g.shape()))
            .collect();
        let mut acc = [0.0; 4];
        for it in &items {
            for (a, g) in grads.iter_mut().zip(&it.grads) {
                a.axpy(1.0, g);
            }
            acc[0] += it.adv;
            acc[1] += it.l1;
            acc[2] += it.sd;
            acc[3] += it.total;
        }
        if !acc.iter().all(|v| v.is_finite()) || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::TrainingDivergence {
                step: self.state.step,
                what: "generator loss",
            });
        }
        let opt = &mut self.state.gen_opt;
        let mut k = 0;
        self.state.model.visit_mut(&mut |name, p| {
            opt.step(name, p, &grads[k]);
            k += 1;
        });
        opt.tick();
        self.state.model.project();
        Ok(acc)
    }

    /// Validation statistics on the fixed validation set.
    pub fn validate(&self, source: &dyn ProblemSource) -> Result<ValStats> {
        validation_stats(
            &self.state.model,
            source,
            self.validation_key(),
            self.config.validation_items,
            self.config.n_val,
        )
    }

    /// Probes whether a larger diversity weight raises the validation ratio.
    pub fn calibrate_direction(&mut self, source: &dyn ProblemSource) -> Result<RmDirection> {
        let key = self.step_key(self.state.step).child(u64::MAX);
        let mut ratios = [0.0; 2];
        for (slot, w) in [0.0, self.config.rm_probe_w_sd].into_iter().enumerate() {
            let mut probe = Trainer {
                config: self.config.clone(),
                seed: self.seed,
                state: self.state.clone(),
                perceptual: Box::new(MeanAbs),
            };
            probe.config.generator_lr = self.config.generator_lr.max(1e-3);
            probe.state.gen_opt.lr = probe.config.generator_lr;
            probe.generator_round(source, key, w)?;
            ratios[slot] = probe.validate(source)?.ratio();
        }
        let dir = if ratios[1] < ratios[0] {
            RmDirection::Decreasing
        } else {
            RmDirection::Increasing
        };
        self.state.direction = Some(dir);
        Ok(dir)
    }

    /// One alternating round; state is left untouched when it fails.
    pub fn step(&mut self, source: &dyn ProblemSource) -> Result<StepRecord> {
        let saved = self.state.clone();
        let out = self.step_inner(source);
        if out.is_err() {
            self.state = saved;
        }
        out
    }

    fn step_inner(&mut self, source: &dyn ProblemSource) -> Result<StepRecord> {
        let key = self.step_key(self.state.step);
        let n_critic = self.config.discriminator_steps_per_generator_step;
        let (mut critic_loss, mut gp) = (0.0, 0.0);
        for c in 0..n_critic {
            (critic_loss, gp) = self.critic_round(source, key.child(c as u64))?;
        }
        let [adv, l1, sd, total] =
            self.generator_round(source, key.child(n_critic as u64), self.state.w_sd)?;
        self.state.step += 1;
        let mut validation = None;
        if self.state.step % self.config.validation_interval == 0 {
            let stats = self.validate(source)?;
            if self.state.direction.is_none() {
                self.calibrate_direction(source)?;
            }
            self.state.rm_rounds += 1;
            let step = self.config.robbins_monro_step / (self.state.rm_rounds as f64).sqrt();
            let dir = self.state.direction.unwrap_or(RmDirection::Increasing);
            let w = robbins_monro_update(self.state.w_sd, stats, self.config.n_val, step, dir);
            self.state.w_sd = sd_safeguard(w, stats.mse_single, self.config.sd_threshold);
            validation = Some(stats);
        }
        Ok(StepRecord {
            step: self.state.step,
            critic_loss,
            gp,
            adv,
            l1,
            sd,
            total,
            w_sd: self.state.w_sd,
            validation,
        })
    }

    /// Parameters, optimizer moments and counters as a container.
    pub fn checkpoint(&self, config_text: &str) -> Archive {
        let mut arrays = Vec::new();
        self.state
            .model
            .visit(&mut |n, t| arrays.push((n.to_string(), t.clone())));
        self.state
            .disc
            .visit(&mut |n, t| arrays.push((n.to_string(), t.clone())));
        arrays.extend(self.state.gen_opt.export("opt.gen"));
        arrays.extend(self.state.disc_opt.export("opt.disc"));
        let dir = match self.state.direction {
            None => 0.0,
            Some(RmDirection::Increasing) => 1.0,
            Some(RmDirection::Decreasing) => -1.0,
        };
        arrays.push((
            "train.state".into(),
            Tensor::vector(vec![
                self.state.step as f64,
                self.state.w_sd,
                dir,
                self.state.rm_rounds as f64,
            ]),
        ));
        let mut rng_state = [0u8; 16];
        rng_state[..8].copy_from_slice(&self.seed.to_le_bytes());
        rng_state[8..].copy_from_slice(&self.state.step.to_le_bytes());
        Archive {
            arrays,
            config: config_text.to_string(),
            rng_state,
        }
    }

    /// Loads state written by [`Trainer::checkpoint`] into this trainer,
    /// whose model and critic must have matching structure.
    pub fn restore(&mut self, archive: &Archive) -> Result<()> {
        let mut state = self.state.clone();
        load_params(archive, &mut |f| state.model.visit_mut(f))?;
        load_params(archive, &mut |f| state.disc.visit_mut(f))?;
        state.gen_opt.import("opt.gen", &archive.arrays);
        state.disc_opt.import("opt.disc", &archive.arrays);
        let ts = archive.get("train.state")?;
        if ts.len() != 4 {
            return Err(Error::Format("train.state must hold 4 values".into()));
        }
        let d = ts.data();
        state.step = d[0] as u64;
        state.w_sd = d[1];
        state.direction = match d[2] as i64 {
            1 => Some(RmDirection::Increasing),
            -1 => Some(RmDirection::Decreasing),
            _ => None,
        };
        state.rm_rounds = d[3] as u64;
        self.seed = u64::from_le_bytes(archive.rng_state[..8].try_into().expect("8 bytes"));
        let step = u64::from_le_bytes(archive.rng_state[8..].try_into().expect("8 bytes"));
        if step != state.step {
            return Err(Error::Format(format!(
                "rng counter {step} vs step {}",
                state.step
            )));
        }
        self.state = state;
        Ok(())
    }
}

/// Copies named arrays from `archive` into visited parameters.
pub fn load_params(
    archive: &Archive,
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor)),
) -> Result<()> {
    let mut err = None;
    visit(&mut |name, p| {
        if err.is_some() {
            return;
        }
        match archive.get(name) {
            Ok(t) if t.shape() == p.shape() => *p = t.clone(),
            Ok(t) => {
                err = Some(Error::Shape(format!(
                    "array {name}: stored {:?} vs model {:?}",
                    t.shape(),
                    p.shape()
                )))
            }
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Validation statistics of `model` on `items` pairs drawn from `key`, with
/// `n_val` independent chains per pair.
pub fn validation_stats(
    model: &UnfoldedModel,
    source: &dyn ProblemSource,
    key: StreamKey,
    items: usize,
    n_val: usize,
) -> Result<ValStats> {
    let per_item: Vec<(f64, f64)> = (0..items as u64)
        .into_par_iter()
        .map(|i| {
            let ik = key.child(i);
            let item = source.draw(ik.child(0))?;
            let x = item.x.reshape(item.obs.domain_shape())?;
            let mut mean = Tensor::zeros(x.shape());
            let mut single = 0.0;
            for c in 0..n_val as u64 {
                let trace = unfold_chain(model, &item.obs, ik.child(1 + c))?;
                let last = trace.samples.last().expect("nonempty");
                if c == 0 {
                    single = x.sub(last)?.norm_sq();
                }
                mean.axpy(1.0 / n_val as f64, last);
            }
            Ok((single, x.sub(&mean)?.norm_sq()))
        })
        .collect::<Result<_>>()?;
    let n = items as f64;
    Ok(ValStats {
        mse_single: per_item.iter().map(|p| p.0).sum::<f64>() / n,
        mse_mean: per_item.iter().map(|p| p.1).sum::<f64>() / n,
    })
}
