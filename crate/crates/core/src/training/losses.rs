//! Adversarial, consistency and diversity terms of the generator objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::TapeTrace;
use crate::tensor::Tensor;

/// Distance between a reference and a generated image.
pub trait Perceptual: Send + Sync {
    fn distance<'t>(&self, x: Var<'t>, xhat: Var<'t>) -> Result<Var<'t>>;
}

/// Mean absolute pixel difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAbs;

impl Perceptual for MeanAbs {
    fn distance<'t>(&self, x: Var<'t>, xhat: Var<'t>) -> Result<Var<'t>> {
        let n = x.value().len() as f64;
        Ok(x.sub(xhat)?.l1_sum().scale(1.0 / n))
    }
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        Err(Error::InvalidInput(format!("{what} on an empty batch")))
    } else {
        Ok(())
    }
}

/// `mean D(real) − mean D(fake)` for row-stacked critic inputs.
pub fn loss_adv<'t, F>(critic: F, real: Var<'t>, fake: Var<'t>) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    critic(real)?.mean().sub(critic(fake)?.mean())
}

/// Gradient penalty `mean_i (‖∇_x D(x̃_i, y_i)‖ − 1)²` on interpolates
/// `x̃ = αx + (1−α)x̂`; rows of `real` and `fake` are `[x, y]` with the
/// first `d_x` columns holding `x`.
pub fn loss_gp<'t, F>(
    tape: &'t Tape,
    critic: F,
    real: &Tensor,
    fake: &Tensor,
    d_x: usize,
    alphas: &[f64],
) -> Result<Var<'t>>
where
    F: Fn(Var<'t>) -> Result<Var<'t>>,
{
    real.expect_same_shape(fake, "loss_gp")?;
    let (n, width) = real.dims2()?;
    if alphas.len() != n || d_x > width {
        return Err(Error::Shape(format!(
            "loss_gp: {} weights, d_x {d_x} for rows of shape [{n}, {width}]",
            alphas.len()
        )));
    }
    let mut mix = real.clone();
    for (i, &a) in alphas.iter().enumerate() {
        let row = i * width;
        for j in 0..d_x {
            let k = row + j;
            mix.data_mut()[k] = a * real.data()[k] + (1.0 - a) * fake.data()[k];
        }
    }
    let input = tape.param(mix);
    let score = critic(input)?.sum();
    let grad = tape.grad_graph(score, &[input])?[0];
    let norms = grad
        .slice_cols(0, d_x)?
        .row_sq_sum()?
        .add_const(1e-24)
        .sqrt();
    Ok(norms.add_const(-1.0).sq_l2_sum().scale(1.0 / n as f64))
}

/// Mean over the batch of `‖x − x̄‖₁`.
pub fn loss_l1<'t>(truths: &[Var<'t>], means: &[Var<'t>]) -> Result<Var<'t>> {
    nonempty(truths, "loss_l1")?;
    if truths.len() != means.len() {
        return Err(Error::Shape(format!(
            "{} truths for {} traces",
            truths.len(),
            means.len()
        )));
    }
    let mut acc = truths[0].sub(means[0])?.l1_sum();
    for (x, m) in truths.iter().zip(means).skip(1) {
        acc = acc.add(x.sub(*m)?.l1_sum())?;
    }
    Ok(acc.scale(1.0 / truths.len() as f64))
}

/// `Σ_ℓ ‖x_ℓ − x̄‖₁` for one trace.
pub fn trace_spread<'t>(trace: &TapeTrace<'t>) -> Result<Var<'t>> {
    nonempty(&trace.samples, "trace spread")?;
    let mut acc = trace.samples[0].sub(trace.ergodic_mean)?.l1_sum();
    for s in &trace.samples[1..] {
        acc = acc.add(s.sub(trace.ergodic_mean)?.l1_sum())?;
    }
    Ok(acc)
}

/// Mean over the batch of [`trace_spread`].
pub fn loss_sd<'t>(traces: &[TapeTrace<'t>]) -> Result<Var<'t>> {
    nonempty(traces, "loss_sd")?;
    let mut acc = trace_spread(&traces[0])?;
    for t in &traces[1..] {
        acc = acc.add(trace_spread(t)?)?;
    }
    Ok(acc.scale(1.0 / traces.len() as f64))
}

/// Loss weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w_sd: f64,
    pub w_ps: f64,
}

/// Components and total of the generator objective.
pub struct GeneratorLoss<'t> {
    pub adv: Var<'t>,
    pub l1: Var<'t>,
    pub sd: Var<'t>,
    pub ps: Var<'t>,
    pub total: Var<'t>,
}

/// `adv + w1·l1 − w_sd·sd + w_ps·perceptual(x, x_L)`; `finals` are the
/// last samples `x_L` of each trace.
pub fn total_generator_loss<'t>(
    adv: Var<'t>,
    truths: &[Var<'t>],
    traces: &[TapeTrace<'t>],
    weights: LossWeights,
    perceptual: &dyn Perceptual,
) -> Result<GeneratorLoss<'t>> {
    let means: Vec<Var<'t>> = traces.iter().map(|t| t.ergodic_mean).collect();
    let l1 = loss_l1(truths, &means)?;
    let sd = loss_sd(traces)?;
    let mut ps = perceptual.distance(truths[0], *traces[0].samples.last().expect("nonempty"))?;
    for (x, t) in truths.iter().zip(traces).skip(1) {
        ps = ps.add(perceptual.distance(*x, *t.samples.last().expect("nonempty"))?)?;
    }
    let ps = ps.scale(1.0 / truths.len() as f64);
    let total = adv
        .add(l1.scale(weights.w1))?
        .sub(sd.scale(weights.w_sd))?
        .add(ps.scale(weights.w_ps))?;
    Ok(GeneratorLoss {
        adv,
        l1,
        sd,
        ps,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::TapeTrace;
    use crate::rng::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trace<'t>(tape: &'t Tape, samples: &[Tensor]) -> TapeTrace<'t> {
        let vars: Vec<Var<'t>> = samples.iter().map(|s| tape.param(s.clone())).collect();
        let mut acc = vars[0];
        for v in &vars[1..] {
            acc = acc.add(*v).unwrap();
        }
        TapeTrace {
            ergodic_mean: acc.scale(1.0 / vars.len() as f64),
            samples: vars,
            latent: None,
        }
    }

    fn rows(seed: u64, n: usize, w: usize) -> Tensor {
        normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[n, w])
    }

    #[test]
    fn constant_critic_has_zero_adversarial_loss() {
        let tape = Tape::new();
        let critic = |r: Var<'_>| -> Result<Var<'_>> {
            Ok(r.value()
                .dims2()
                .map(|(n, _)| tape.constant(Tensor::full(&[n, 1], 3.0)))?)
        };
        let loss = loss_adv(
            critic,
            tape.constant(rows(1, 5, 3)),
            tape.constant(rows(2, 5, 3)),
        )
        .unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    fn linear_critic<'t>(tape: &'t Tape, u: Vec<f64>) -> impl Fn(Var<'t>) -> Result<Var<'t>> {
        move |r: Var<'t>| {
            let w = r.value().dims2()?.1;
            let mut col = u.clone();
            col.resize(w, 0.5);
            r.matmul(tape.constant(Tensor::new(vec![w, 1], col)))
        }
    }

    #[test]
    fn gradient_penalty_of_linear_critics() {
        let (real, fake) = (rows(3, 6, 4), rows(4, 6, 4));
        let alphas = [0.1, 0.5, 0.9, 0.3, 0.0, 1.0];
        let u = vec![0.6, 0.8];
        let tape = Tape::new();
        let gp = loss_gp(
            &tape,
            linear_critic(&tape, u.clone()),
            &real,
            &fake,
            2,
            &alphas,
        )
        .unwrap();
        assert!(gp.item().abs() < 1e-20);
        let gp = loss_gp(
            &tape,
            linear_critic(&tape, vec![1.2, 1.6]),
            &real,
            &fake,
            2,
            &alphas,
        )
        .unwrap();
        assert!((gp.item() - 1.0).abs() < 1e-12);
        let zero = |r| Var::matmul(Var::scale(r, 0.0), tape.constant(Tensor::ones(&[4, 1])));
        let gp = loss_gp(&tape, zero, &real, &fake, 2, &alphas).unwrap();
        assert!((gp.item() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn l1_examples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let perfect = trace(&tape, &[Tensor::vector(vec![1.0, 2.0, 3.0])]);
        assert_eq!(loss_l1(&[x], &[perfect.ergodic_mean]).unwrap().item(), 0.0);
        let off = trace(&tape, &[Tensor::vector(vec![1.5, 2.5, 3.5])]);
        let l = loss_l1(&[x, x], &[off.ergodic_mean, perfect.ergodic_mean]).unwrap();
        assert!((l.item() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sd_examples() {
        let tape = Tape::new();
        let a = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let b = Tensor::vector(vec![0.0, 3.0, 0.5]);
        let same = trace(&tape, &[a.clone(), a.clone(), a.clone()]);
        assert_eq!(loss_sd(&[same]).unwrap().item(), 0.0);
        let two = trace(&tape, &[a.clone(), b.clone()]);
        assert!((loss_sd(&[two]).unwrap().item() - a.sub(&b).unwrap().l1()).abs() < 1e-14);
        let c = Tensor::vector(vec![0.2, 0.1, -4.0]);
        let fwd = trace(&tape, &[a.clone(), b.clone(), c.clone()]);
        let rev = trace(&tape, &[c, a, b]);
        assert!((loss_sd(&[fwd]).unwrap().item() - loss_sd(&[rev]).unwrap().item()).abs() < 1e-14);
    }

    #[test]
    fn total_loss_reduces_and_sums_components() {
        let tape = Tape::new();
        let adv = tape.scalar(0.7);
        let x1 = tape.constant(Tensor::vector(vec![0.2, 0.4]));
        let x2 = tape.constant(Tensor::vector(vec![-0.1, 0.0]));
        let t1 = trace(
            &tape,
            &[
                Tensor::vector(vec![0.0, 1.0]),
                Tensor::vector(vec![0.5, 0.5]),
            ],
        );
        let t2 = trace(
            &tape,
            &[
                Tensor::vector(vec![1.0, 1.0]),
                Tensor::vector(vec![-1.0, 2.0]),
            ],
        );
        let traces = [t1, t2];
        let zero = LossWeights {
            w1: 0.0,
            w_sd: 0.0,
            w_ps: 0.0,
        };
        let g = total_generator_loss(adv, &[x1, x2], &traces, zero, &MeanAbs).unwrap();
        assert_eq!(g.total.item(), 0.7);

        let w = LossWeights {
            w1: 1.5,
            w_sd: 0.3,
            w_ps: 2.0,
        };
        let g = total_generator_loss(adv, &[x1, x2], &traces, w, &MeanAbs).unwrap();
        // Hand assembly: means (0.25, 0.75), (0, 1.5); finals (0.5, 0.5), (−1, 2).
        let l1 = ((0.05 + 0.35) + (0.1 + 1.5)) / 2.0;
        let sd = ((0.25 + 0.25 + 0.25 + 0.25) + (1.0 + 0.5 + 1.0 + 0.5)) / 2.0;
        let ps = ((0.3 + 0.1) / 2.0 + (0.9 + 2.0) / 2.0) / 2.0;
        let want = 0.7 + 1.5 * l1 - 0.3 * sd + 2.0 * ps;
        assert!(
            (g.total.item() - want).abs() < 1e-14,
            "{} vs {want}",
            g.total.item()
        );
        assert!((g.l1.item() - l1).abs() < 1e-15 && (g.sd.item() - sd).abs() < 1e-15);
    }
}
