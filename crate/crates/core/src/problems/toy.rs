//! Low-dimensional problems with reference posteriors.
//!
//! Gaussian and latent-Laplace priors are handled by tensor-product
//! trapezoid quadrature; Gaussian mixtures have a closed-form posterior.
//! For the latent-Laplace prior the signal given the latent is Gaussian, so
//! the grid runs over the latent and signals are drawn exactly given a
//! latent draw.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::kernels::Observation;
use crate::linops::GaussianLikelihood;
use crate::priors::{moreau_abs, LatentLaplacePrior};
use crate::tensor::Tensor;

/// One isotropic Gaussian mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyPrior {
    /// Independent coordinates `N(mean_i, var_i)`.
    Gaussian {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    /// `x = Sig(Wz) + ρζ` with a Moreau-smoothed Laplace latent.
    LatentLaplace {
        prior: LatentLaplacePrior,
        rho: f64,
    },
    GaussianMixture(Vec<MixtureComponent>),
}

/// Quadrature resolution; bounds cover `half_width` prior standard
/// deviations on each side of the prior mean. Latent grids are spaced so
/// that the Huber breakpoints `±λ` fall on nodes, which keeps the
/// trapezoid rule fourth-order accurate there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub points: usize,
    pub half_width: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points: 201,
            half_width: 8.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub prior: ToyPrior,
    pub lik: GaussianLikelihood,
    pub grid: GridSpec,
}

pub const MAX_TOY_DIM: usize = 4;

/// Latent grids extend at least this far past the Huber offset `λ/2`, so
/// the exponential tail left out has mass below `2e-11` per axis.
const LATENT_TAIL: f64 = 25.0;

/// Standard deviation of the density `∝ exp(−M_λ(|v|))`.
pub fn smoothed_laplace_std(lambda: f64) -> f64 {
    let (h, n) = (1e-3, 60_000);
    let (mut z, mut m2) = (0.0, 0.0);
    for i in 0..=2 * n {
        let v = (i as f64 - n as f64) * h;
        let p = (-moreau_abs(v, lambda)).exp();
        z += p;
        m2 += v * v * p;
    }
    (m2 / z).sqrt()
}

/// Exact draw from the density `∝ exp(−M_λ(|v|))`: a Gaussian core on
/// `[−λ, λ]` and exponential tails.
pub fn sample_smoothed_laplace<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    let core =
        (2.0 * std::f64::consts::PI * lambda).sqrt() * (2.0 * std_normal_cdf(lambda.sqrt()) - 1.0);
    let tails = 2.0 * (-lambda / 2.0).exp();
    if rng.random::<f64>() * (core + tails) < core {
        loop {
            let v =
                lambda.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            if v.abs() <= lambda {
                return v;
            }
        }
    }
    let e: f64 = Exp1.sample(rng);
    if rng.random::<bool>() {
        lambda + e
    } else {
        -lambda - e
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes rational Chebyshev,
/// relative error below 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

fn dense_operator(lik: &GaussianLikelihood) -> Result<DMatrix<f64>> {
    let a = lik.operator.to_dense()?;
    let (m, n) = a.dims2()?;
    Ok(DMatrix::from_row_slice(m, n, a.data()))
}

fn log_gauss_sq(r: &DVector<f64>, var: f64) -> f64 {
    -r.norm_squared() / (2.0 * var)
}

impl ToyProblem {
    pub fn new(prior: ToyPrior, lik: GaussianLikelihood, grid: GridSpec) -> Result<Self> {
        let p = ToyProblem { prior, lik, grid };
        let d = p.dim();
        if d == 0 || d > MAX_TOY_DIM {
            return Err(Error::InvalidInput(format!(
                "toy dimension {d} outside 1..={MAX_TOY_DIM}"
            )));
        }
        if p.lik.operator.domain_len() != p.signal_dim() {
            return Err(Error::Shape(format!(
                "operator domain {} vs signal dimension {}",
                p.lik.operator.domain_len(),
                p.signal_dim()
            )));
        }
        if grid.points < 3 || grid.half_width < 6.0 {
            return Err(Error::InvalidInput(format!(
                "grid needs ≥ 3 points and ≥ 6 prior standard deviations, got {grid:?}"
            )));
        }
        match &p.prior {
            ToyPrior::Gaussian { mean, var } => {
                if mean.len() != var.len() || var.iter().any(|&v| !(v > 0.0)) {
                    return Err(Error::InvalidInput(
                        "Gaussian toy prior needs positive variances".into(),
                    ));
                }
            }
            ToyPrior::LatentLaplace { rho, .. } => {
                if !(*rho > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "rho must be positive, got {rho}"
                    )));
                }
            }
            ToyPrior::GaussianMixture(cs) => {
                let d0 = cs.first().map(|c| c.mean.len()).unwrap_or(0);
                if cs.is_empty()
                    || cs
                        .iter()
                        .any(|c| c.mean.len() != d0 || !(c.std > 0.0) || !(c.weight > 0.0))
                {
                    return Err(Error::InvalidInput(
                        "mixture needs positive weights and stds, common dimension".into(),
                    ));
                }
            }
        }
        Ok(p)
    }

    /// Dimension of the quadrature space.
    pub fn dim(&self) -> usize {
        match &self.prior {
            ToyPrior::LatentLaplace { prior, .. } => prior.d_z(),
            _ => self.signal_dim(),
        }
    }

    pub fn signal_dim(&self) -> usize {
        match &self.prior {
            ToyPrior::Gaussian { mean, .. } => mean.len(),
            ToyPrior::LatentLaplace { prior, .. } => prior.d_x(),
            ToyPrior::GaussianMixture(cs) => cs[0].mean.len(),
        }
    }

    /// Draws a signal from the prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let n = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        let shape = self.lik.operator.domain_shape();
        let x: Vec<f64> = match &self.prior {
            ToyPrior::Gaussian { mean, var } => mean
                .iter()
                .zip(var)
                .map(|(m, v)| m + v.sqrt() * n(rng))
                .collect(),
            ToyPrior::LatentLaplace { prior, rho } => {
                let lam = prior.lambda();
                let z: Vec<f64> = (0..prior.d_z())
                    .map(|_| sample_smoothed_laplace(lam, rng))
                    .collect();
                let m = prior.prior_mean(&Tensor::vector(z)).expect("latent length");
                m.data().iter().map(|v| v + rho * n(rng)).collect()
            }
            ToyPrior::GaussianMixture(cs) => {
                let total: f64 = cs.iter().map(|c| c.weight).sum();
                let mut u = rng.random::<f64>() * total;
                let c = cs
                    .iter()
                    .find(|c| {
                        u -= c.weight;
                        u < 0.0
                    })
                    .unwrap_or(&cs[cs.len() - 1]);
                c.mean.iter().map(|m| m + c.std * n(rng)).collect()
            }
        };
        Tensor::new(shape, x)
    }

    /// Draws `x` from the prior and a noisy observation of it.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Tensor, Observation)> {
        let x = self.sample_prior(rng);
        let obs = super::make_observation(&x, self.lik.clone(), rng)?;
        Ok((x, obs))
    }

    /// Reference posterior for observation `y`.
    pub fn posterior(&self, y: &Tensor) -> Result<Posterior> {
        if y.len() != self.lik.operator.codomain_len() {
            return Err(Error::Shape(format!(
                "observation of length {} for codomain {}",
                y.len(),
                self.lik.operator.codomain_len()
            )));
        }
        match &self.prior {
            ToyPrior::GaussianMixture(cs) => self.mixture_posterior(cs, y),
            _ => {
                let coarse = self.grid_posterior(y, self.grid.points)?;
                let fine = self.grid_posterior(y, 2 * self.grid.points - 1)?;
                let z_drift = (fine.log_norm - coarse.log_norm).abs();
                if z_drift > 1e-6 {
                    return Err(Error::GridTooCoarse {
                        what: "normalization",
                        drift: z_drift,
                    });
                }
                let (mc, mf) = (coarse.mean(), fine.mean());
                let m_drift = mc
                    .iter()
                    .zip(&mf)
                    .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
                if m_drift > 1e-6 {
                    return Err(Error::GridTooCoarse {
                        what: "posterior mean",
                        drift: m_drift,
                    });
                }
                Ok(Posterior::Grid(coarse))
            }
        }
    }

    fn mixture_posterior(&self, cs: &[MixtureComponent], y: &Tensor) -> Result<Posterior> {
        let a = dense_operator(&self.lik)?;
        let s2 = self.lik.component_variance();
        let d = self.signal_dim();
        let yv = DVector::from_column_slice(y.data());
        let total: f64 = cs.iter().map(|c| c.weight).sum();
        let mut comps = Vec::with_capacity(cs.len());
        let mut logw = Vec::with_capacity(cs.len());
        for c in cs {
            let v = c.std * c.std;
            let prec = a.transpose() * &a / s2 + DMatrix::identity(d, d) / v;
            let cov = prec
                .try_inverse()
                .ok_or_else(|| Error::InvalidInput("singular posterior precision".into()))?;
            let m0 = DVector::from_column_slice(&c.mean);
            let mean = &cov * (a.transpose() * &yv / s2 + &m0 / v);
            let marg = &a * &a.transpose() * v + DMatrix::identity(a.nrows(), a.nrows()) * s2;
            let chol = Cholesky::new(marg)
                .ok_or_else(|| Error::InvalidInput("marginal covariance not SPD".into()))?;
            let r = &yv - &a * &m0;
            let quad = r.dot(&chol.solve(&r));
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            logw.push((c.weight / total).ln() - 0.5 * quad - 0.5 * logdet);
            let sym = (&cov + cov.transpose()) * 0.5;
            let l = Cholesky::new(sym.clone())
                .ok_or_else(|| Error::InvalidInput("posterior covariance not SPD".into()))?
                .l();
            comps.push(GaussianComponent {
                weight: 0.0,
                mean,
                cov: sym,
                chol: l,
            });
        }
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logw.iter().map(|l| (l - mx).exp()).sum();
        for (c, l) in comps.iter_mut().zip(&logw) {
            c.weight = (l - mx).exp() / z;
        }
        Ok(Posterior::Mixture(comps))
    }

    fn axes(&self, points: usize) -> Result<Vec<Vec<f64>>> {
        let (centers, sds): (Vec<f64>, Vec<f64>) = match &self.prior {
            ToyPrior::Gaussian { mean, var } => {
                (mean.clone(), var.iter().map(|v| v.sqrt()).collect())
            }
            ToyPrior::LatentLaplace { prior, .. } => {
                let lam = prior.lambda();
                let reach =
                    (self.grid.half_width * smoothed_laplace_std(lam)).max(0.5 * lam + LATENT_TAIL);
                let h0 = 2.0 * reach / (points - 1) as f64;
                let h = lam / (lam / h0).round().max(1.0);
                let k = (reach / h).ceil() as i64;
                let axis: Vec<f64> = (-k..=k).map(|i| i as f64 * h).collect();
                return Ok(vec![axis; prior.d_z()]);
            }
            ToyPrior::GaussianMixture(_) => {
                return Err(Error::InvalidInput(
                    "mixture posteriors are closed form".into(),
                ))
            }
        };
        Ok(centers
            .iter()
            .zip(&sds)
            .map(|(c, s)| {
                let (lo, hi) = (c - self.grid.half_width * s, c + self.grid.half_width * s);
                (0..points)
                    .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
                    .collect()
            })
            .collect())
    }

    fn grid_posterior(&self, y: &Tensor, points: usize) -> Result<GridPosterior> {
        let axes = self.axes(points)?;
        let d = axes.len();
        let points = axes[0].len();
        let total: usize = points.pow(d as u32);
        if total > 50_000_000 {
            return Err(Error::InvalidInput(format!(
                "quadrature grid of {total} nodes is too large"
            )));
        }
        let a = dense_operator(&self.lik)?;
        let s2 = self.lik.component_variance();
        let yv = DVector::from_column_slice(y.data());
        let conditional = match &self.prior {
            ToyPrior::LatentLaplace { rho, .. } => {
                let n = a.ncols();
                let r2 = rho * rho;
                let prec = a.transpose() * &a / s2 + DMatrix::identity(n, n) / r2;
                let cov = prec
                    .try_inverse()
                    .ok_or_else(|| Error::InvalidInput("singular conditional precision".into()))?;
                let sym = (&cov + cov.transpose()) * 0.5;
                let chol = Cholesky::new(sym.clone())
                    .ok_or_else(|| Error::InvalidInput("conditional covariance not SPD".into()))?
                    .l();
                let marg = &a * a.transpose() * r2 + DMatrix::identity(a.nrows(), a.nrows()) * s2;
                let marg = Cholesky::new(marg)
                    .ok_or_else(|| Error::InvalidInput("marginal covariance not SPD".into()))?;
                Some((sym, chol, marg, r2))
            }
            _ => None,
        };
        let mut logp = vec![0.0; total];
        let mut idx = vec![0usize; d];
        let mut node = vec![0.0; d];
        for (k, lp) in logp.iter_mut().enumerate() {
            let mut r = k;
            for j in (0..d).rev() {
                idx[j] = r % points;
                r /= points;
                node[j] = axes[j][idx[j]];
            }
            *lp = match &self.prior {
                ToyPrior::Gaussian { mean, var } => {
                    let x = DVector::from_column_slice(&node);
                    let prior: f64 = node
                        .iter()
                        .zip(mean.iter().zip(var))
                        .map(|(v, (m, s))| -(v - m).powi(2) / (2.0 * s))
                        .sum();
                    prior + log_gauss_sq(&(&yv - &a * x), s2)
                }
                ToyPrior::LatentLaplace { prior, .. } => {
                    let (_, _, marg, _) = conditional.as_ref().expect("latent conditional");
                    let m = prior.prior_mean(&Tensor::vector(node.clone()))?;
                    let r = &yv - &a * DVector::from_column_slice(m.data());
                    prior.latent_log_density(&node) - 0.5 * r.dot(&marg.solve(&r))
                }
                ToyPrior::GaussianMixture(_) => unreachable!(),
            };
        }
        let h: Vec<f64> = axes.iter().map(|ax| ax[1] - ax[0]).collect();
        let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights = vec![0.0; total];
        let mut z = 0.0;
        for (k, w) in weights.iter_mut().enumerate() {
            let mut r = k;
            let mut tw = 1.0;
            for j in (0..d).rev() {
                let i = r % points;
                r /= points;
                tw *= if i == 0 || i == points - 1 {
                    0.5 * h[j]
                } else {
                    h[j]
                };
            }
            *w = tw * (logp[k] - mx).exp();
            z += *w;
        }
        weights.iter_mut().for_each(|w| *w /= z);
        let latent = match (&self.prior, conditional) {
            (ToyPrior::LatentLaplace { prior, .. }, Some((cov, chol, _, r2))) => {
                Some(LatentConditional {
                    prior: prior.clone(),
                    gain: &cov * a.transpose() * &yv / s2,
                    cov_over_r2: &cov / r2,
                    chol,
                })
            }
            _ => None,
        };
        Ok(GridPosterior {
            axes,
            weights,
            log_norm: mx + z.ln(),
            latent,
        })
    }
}

/// `x | z, y ~ N(gain + C m(z)/ρ², C)` with `m(z) = Sig(Wz)`.
#[derive(Debug, Clone)]
struct LatentConditional {
    prior: LatentLaplacePrior,
    gain: DVector<f64>,
    cov_over_r2: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl LatentConditional {
    fn mean(&self, z: &[f64]) -> DVector<f64> {
        let m = self
            .prior
            .prior_mean(&Tensor::vector(z.to_vec()))
            .expect("latent length");
        &self.gain + &self.cov_over_r2 * DVector::from_column_slice(m.data())
    }
}

/// Normalized trapezoid masses on a tensor-product grid.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub axes: Vec<Vec<f64>>,
    /// Probability mass of each node, row-major over `axes`.
    pub weights: Vec<f64>,
    /// Log of the unnormalized evidence up to the likelihood constant.
    pub log_norm: f64,
    latent: Option<LatentConditional>,
}

impl GridPosterior {
    fn node(&self, mut k: usize) -> Vec<f64> {
        let d = self.axes.len();
        let p = self.axes[0].len();
        let mut v = vec![0.0; d];
        for j in (0..d).rev() {
            v[j] = self.axes[j][k % p];
            k /= p;
        }
        v
    }

    /// Total mass, 1 up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Posterior mean of the signal.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc: Option<Vec<f64>> = None;
        for (k, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let node = self.node(k);
            let v: Vec<f64> = match &self.latent {
                Some(l) => l.mean(&node).iter().copied().collect(),
                None => node,
            };
            let a = acc.get_or_insert_with(|| vec![0.0; v.len()]);
            a.iter_mut().zip(&v).for_each(|(s, x)| *s += w * x);
        }
        acc.unwrap_or_default()
    }

    /// Draws a grid node by inverse CDF, jittered uniformly within its cell,
    /// then the signal given that node when the grid is over a latent.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let mut node = self.node(k);
        for (j, ax) in self.axes.iter().enumerate() {
            let h = ax[1] - ax[0];
            node[j] = (node[j] + (rng.random::<f64>() - 0.5) * h).clamp(ax[0], ax[ax.len() - 1]);
        }
        match &self.latent {
            Some(l) => {
                let n = l.chol.nrows();
                let zeta = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
                (l.mean(&node) + &l.chol * zeta).iter().copied().collect()
            }
            None => node,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

/// Reference posterior: a quadrature grid or a Gaussian mixture.
#[derive(Debug, Clone)]
pub enum Posterior {
    Grid(GridPosterior),
    Mixture(Vec<GaussianComponent>),
}

impl Posterior {
    pub fn mean(&self) -> Vec<f64> {
        match self {
            Posterior::Grid(g) => g.mean(),
            Posterior::Mixture(cs) => {
                let mut m = DVector::zeros(cs[0].mean.len());
                for c in cs {
                    m += &c.mean * c.weight;
                }
                m.iter().copied().collect()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Posterior::Grid(g) => g.sample(rng),
            Posterior::Mixture(cs) => {
                let mut u = rng.random::<f64>();
                let c = cs
                    .iter()
                    .find(|c| {
                        u -= c.weight;
                        u < 0.0
                    })
                    .unwrap_or(&cs[cs.len() - 1]);
                let n = c.mean.len();
                let zeta = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
                (&c.mean + &c.chol * zeta).iter().copied().collect()
            }
        }
    }
}
