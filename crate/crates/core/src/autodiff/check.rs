use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a − n| / max(1, |a|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest relative error between the reverse-mode gradient of `f` at `x`
/// and central differences with step `h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let root = f(&tape, xv)?;
        tape.backward(root)?.wrt(xv)
    };
    let eval = |pt: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(pt);
        Ok(f(&tape, xv)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

impl Tape {
    /// Smallest distance from an input of a non-smooth primitive
    /// (|·|, leaky ReLU, soft threshold, sqrt) to its kink.
    pub fn kink_margin(&self) -> f64 {
        use super::Op;
        let nodes = self.nodes.borrow();
        let mut margin = f64::INFINITY;
        for node in nodes.iter() {
            let (input, kinks): (usize, Vec<f64>) = match &node.op {
                Op::L1Sum(a) | Op::LeakyRelu(a, _) | Op::Sqrt(a) => (*a, vec![0.0]),
                Op::SoftThreshold(a, l) => {
                    let lam = nodes[*l].value.item();
                    (*a, vec![-lam, lam])
                }
                _ => continue,
            };
            for &v in nodes[input].value.data() {
                for k in &kinks {
                    margin = margin.min((v - k).abs());
                }
            }
        }
        margin
    }
}

/// One stage of a [`Composite`]; every stage maps an 8-vector to an 8-vector.
#[derive(Debug, Clone)]
enum Stage {
    AddConst(Tensor),
    SubConst(Tensor),
    MulConst(Tensor),
    Scale(f64),
    Shift(f64),
    MulScalar,
    Exp,
    Sqrt,
    Recip,
    Sigmoid,
    Tanh,
    LeakyRelu,
    SoftThreshold(f64),
    MatVec(Tensor),
    MatMul(Tensor),
    Outer(Tensor),
    Transpose,
    RowBias(Tensor),
    ColSumRowSq,
    SliceConcat,
    Reparam(f64, Tensor),
    Broadcast,
}

const STAGE_KINDS: usize = 22;
const DIM: usize = 8;

/// A seeded random composition of tape primitives ending in a scalar
/// reduction, used as a gradient oracle target.
#[derive(Debug, Clone)]
pub struct Composite {
    stages: Vec<Stage>,
    reduction: usize,
}

impl Composite {
    /// Input dimension of every composite.
    pub const DIM: usize = DIM;

    /// Builds composite number `seed`. The first stage cycles through all
    /// primitive kinds so that consecutive seeds cover every primitive.
    pub fn random(seed: u64) -> Composite {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
        let normal = |n: usize, s: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            Tensor::vector(
                (0..n)
                    .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            )
        };
        let n_stages = 5 + (seed % 3) as usize;
        let mut stages = Vec::with_capacity(n_stages);
        for k in 0..n_stages {
            let kind = if k == 0 {
                (seed as usize) % STAGE_KINDS
            } else {
                rng.random_range(0..STAGE_KINDS)
            };
            let stage = match kind {
                0 => Stage::AddConst(normal(DIM, 1.0, &mut rng)),
                1 => Stage::SubConst(normal(DIM, 1.0, &mut rng)),
                2 => Stage::MulConst(normal(DIM, 1.0, &mut rng)),
                3 => Stage::Scale(rng.random_range(-1.5..1.5)),
                4 => Stage::Shift(rng.random_range(-1.0..1.0)),
                5 => Stage::MulScalar,
                6 => Stage::Exp,
                7 => Stage::Sqrt,
                8 => Stage::Recip,
                9 => Stage::Sigmoid,
                10 => Stage::Tanh,
                11 => Stage::LeakyRelu,
                12 => Stage::SoftThreshold(rng.random_range(0.1..0.6)),
                13 => Stage::MatVec(
                    normal(DIM * DIM, 1.0 / (DIM as f64).sqrt(), &mut rng)
                        .reshape(vec![DIM, DIM])
                        .expect("shape"),
                ),
                14 => Stage::MatMul(
                    normal(16, 0.5, &mut rng)
                        .reshape(vec![4, 4])
                        .expect("shape"),
                ),
                15 => Stage::Outer(normal(2, 0.7, &mut rng)),
                16 => Stage::Transpose,
                17 => Stage::RowBias(normal(4, 1.0, &mut rng)),
                18 => Stage::ColSumRowSq,
                19 => Stage::SliceConcat,
                20 => Stage::Reparam(rng.random_range(0.2..1.0), normal(DIM, 1.0, &mut rng)),
                _ => Stage::Broadcast,
            };
            stages.push(stage);
        }
        Composite {
            stages,
            reduction: rng.random_range(0..4),
        }
    }

    pub fn eval<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let mut v = x.reshape(vec![DIM])?;
        for stage in &self.stages {
            v = match stage {
                Stage::AddConst(c) => v.add(tape.constant(c.clone()))?,
                Stage::SubConst(c) => tape.constant(c.clone()).sub(v)?,
                Stage::MulConst(c) => v.mul(tape.constant(c.clone()))?,
                Stage::Scale(s) => v.scale(*s),
                Stage::Shift(s) => v.add_const(*s),
                Stage::MulScalar => {
                    let s = v.slice(0, 1)?.tanh().add_const(1.5);
                    v.mul_scalar(s)?
                }
                Stage::Exp => v.tanh().exp(),
                Stage::Sqrt => v.mul(v)?.add_const(0.5).sqrt(),
                Stage::Recip => v.mul(v)?.add_const(1.0).recip(),
                Stage::Sigmoid => v.sigmoid().scale(2.0),
                Stage::Tanh => v.tanh().scale(1.5),
                Stage::LeakyRelu => v.leaky_relu(0.2),
                Stage::SoftThreshold(l) => v.soft_threshold(tape.scalar(*l))?.add(v.scale(0.5))?,
                Stage::MatVec(m) => tape.constant(m.clone()).matvec(v)?,
                Stage::MatMul(m) => v
                    .reshape(vec![2, 4])?
                    .matmul(tape.constant(m.clone()))?
                    .reshape(vec![DIM])?,
                Stage::Outer(c) => {
                    // rank-one update: v + vec(c ⊗ v[0..4])
                    let o = tape.constant(c.clone()).outer(v.slice(0, 4)?);
                    v.add(o.reshape(vec![DIM])?)?
                }
                Stage::Transpose => v.reshape(vec![2, 4])?.transpose()?.reshape(vec![DIM])?,
                Stage::RowBias(b) => v
                    .reshape(vec![2, 4])?
                    .add_row_bias(tape.constant(b.clone()))?
                    .reshape(vec![DIM])?,
                Stage::ColSumRowSq => {
                    let m = v.reshape(vec![2, 4])?;
                    let cs = m.col_sum()?;
                    let rs = m.scale(0.5).row_sq_sum()?;
                    let back = m.slice_cols(0, 3)?.reshape(vec![6])?;
                    tape.concat(&[back, rs])?
                        .add(tape.concat(&[cs, cs])?.scale(0.25))?
                }
                Stage::SliceConcat => {
                    let a = v.slice(0, 3)?;
                    let b = v.slice(3, 5)?;
                    tape.concat(&[b, a])?
                }
                Stage::Reparam(s, z) => v.gaussian_reparam(tape.scalar(*s), z.clone())?,
                Stage::Broadcast => {
                    let m = v.mean().broadcast(&[DIM])?;
                    let rows = v.slice(4, 4)?.broadcast_rows(2).reshape(vec![DIM])?;
                    v.add(m)?.add(rows.scale(0.5))?
                }
            };
        }
        Ok(match self.reduction {
            0 => v.l1_sum(),
            1 => v.sq_l2_sum(),
            2 => v.sum(),
            _ => v.mean().add(v.sq_l2_sum().scale(0.1))?,
        })
    }

    /// Draws an evaluation point whose non-smooth primitives all sit at
    /// least `margin` away from their kinks.
    pub fn sample_point(&self, seed: u64, margin: f64) -> Result<Tensor> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let x = Tensor::vector((0..DIM).map(|_| StandardNormal.sample(&mut rng)).collect());
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            self.eval(&tape, xv)?;
            if tape.kink_margin() > margin {
                return Ok(x);
            }
        }
        Err(Error::InvalidInput(
            "no smooth evaluation point found".into(),
        ))
    }
}
