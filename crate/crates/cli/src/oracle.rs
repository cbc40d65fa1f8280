//! Self-checks comparing library routines with independent references.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umcmc::autodiff::{relative_error, Composite, Tape};
use umcmc::linops::{
    prox_gaussian_nll, sample_gaussian_conditional, GaussianLikelihood, LinearOperator,
};
use umcmc::metrics::{
    frechet_gaussian, sw_bias_baseline, sw_projection, GaussianSummary, SampleSet,
};
use umcmc::problems::{
    sample_motion_blur_kernel, GridSpec, MixtureComponent, Posterior, ToyPrior, ToyProblem,
};
use umcmc::rng::normal_tensor;
use umcmc::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Autodiff,
    Conditional,
    Quadrature,
    Metrics,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autodiff" => Ok(Suite::Autodiff),
            "conditional" => Ok(Suite::Conditional),
            "quadrature" => Ok(Suite::Quadrature),
            "metrics" => Ok(Suite::Metrics),
            other => Err(Error::InvalidInput(format!(
                "unknown oracle suite {other:?} (expected autodiff, conditional, quadrature, metrics)"
            ))),
        }
    }
}

/// Fault injection used to confirm that a suite can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Hooks {
    /// Perturbs every reverse-mode gradient before comparison.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict}\t{}\t{:e}\t{:e}",
            self.name, self.value, self.tolerance
        )
    }
}

pub fn run(suite: Suite, seed: u64, hooks: Hooks) -> Result<Vec<Check>> {
    match suite {
        Suite::Autodiff => autodiff(seed, hooks),
        Suite::Conditional => conditional(seed),
        Suite::Quadrature => quadrature(seed),
        Suite::Metrics => metrics(seed),
    }
}

fn autodiff(seed: u64, hooks: Hooks) -> Result<Vec<Check>> {
    let h = 1e-6;
    let mut checks = Vec::new();
    for i in 0..50u64 {
        let id = seed.wrapping_mul(50).wrapping_add(i);
        let c = Composite::random(id);
        let x = c.sample_point(id ^ 0x5EED, 1e-3)?;
        let mut grad = {
            let tape = Tape::new();
            let xv = tape.param(x.clone());
            let root = c.eval(&tape, xv)?;
            tape.backward(root)?.wrt(xv)
        };
        if hooks.corrupt_gradient {
            grad = grad.map(|g| g * (1.0 + 1e-3) + 1e-3);
        }
        let value = |p: Tensor| -> Result<f64> {
            let tape = Tape::new();
            let xv = tape.constant(p);
            Ok(c.eval(&tape, xv)?.item())
        };
        let mut worst: f64 = 0.0;
        for k in 0..x.len() {
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.data_mut()[k] += h;
            minus.data_mut()[k] -= h;
            let numeric = (value(plus)? - value(minus)?) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
        checks.push(Check::at_most(
            format!("composite {id} gradient"),
            worst,
            1e-6,
        ));
    }
    Ok(checks)
}

fn conditional(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, sigma, rho) = (8, 0.1, 0.5);
    let kernel = sample_motion_blur_kernel(3, 0.3, 0.25, &mut rng)?;
    let lik = GaussianLikelihood::new(LinearOperator::circulant(kernel, n, n)?, sigma)?;
    let m = normal_tensor(&mut rng, &[n, n]).scale(0.3);
    let y = normal_tensor(&mut rng, &[n, n]);
    let mean = prox_gaussian_nll(&lik, &y, rho * rho, &m)?;
    let spectrum = lik.operator.normal_spectrum().expect("circulant spectrum");
    let s2 = lik.component_variance();
    let var = spectrum
        .iter()
        .map(|l| 1.0 / (l / s2 + 1.0 / (rho * rho)))
        .sum::<f64>()
        / spectrum.len() as f64;
    let draws = 20_000;
    let (mut s, mut ss) = (Tensor::zeros(&[n, n]), Tensor::zeros(&[n, n]));
    for _ in 0..draws {
        let x = sample_gaussian_conditional(&lik, &y, rho, &m, &mut rng)?;
        s.axpy(1.0, &x);
        ss.axpy(1.0, &x.map(|v| v * v));
    }
    let nd = draws as f64;
    let emp_mean = s.scale(1.0 / nd);
    let emp_var = ss.scale(1.0 / nd).zip_map(&emp_mean, |q, mu| q - mu * mu)?;
    let se = (var / nd).sqrt();
    let z = emp_mean.sub(&mean)?.max_abs() / se;
    let var_err = (emp_var.mean() / var - 1.0).abs();
    Ok(vec![
        Check::at_most("conditional mean, max standard errors", z, 4.5),
        Check::at_most("conditional pixel variance, relative error", var_err, 0.02),
    ])
}

fn quadrature(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m0, v0, s) = ([0.3, -0.5], [0.8, 0.2], 0.4);
    let lik = GaussianLikelihood::new(LinearOperator::identity(2), s)?;
    let prior = ToyPrior::Gaussian {
        mean: m0.to_vec(),
        var: v0.to_vec(),
    };
    let p = ToyProblem::new(
        prior,
        lik.clone(),
        GridSpec {
            points: 161,
            half_width: 8.0,
        },
    )?;
    let (_, obs) = p.sample_pair(&mut rng)?;
    let post = p.posterior(&obs.y)?;
    let mean = post.mean();
    let worst = (0..2)
        .map(|i| {
            let want = (m0[i] / v0[i] + obs.y.data()[i] / (s * s)) / (1.0 / v0[i] + 1.0 / (s * s));
            (mean[i] - want).abs()
        })
        .fold(0.0f64, f64::max);
    let mass = match &post {
        Posterior::Grid(g) => (g.total_mass() - 1.0).abs(),
        Posterior::Mixture(_) => f64::NAN,
    };

    let comps = vec![
        MixtureComponent {
            weight: 0.5,
            mean: vec![1.0, -0.5],
            std: 0.3,
        },
        MixtureComponent {
            weight: 0.5,
            mean: vec![-1.0, 0.5],
            std: 0.3,
        },
    ];
    let sym = LinearOperator::circulant(Tensor::new(vec![1, 2], vec![0.7, 0.3]), 1, 2)?;
    let mix = ToyProblem::new(
        ToyPrior::GaussianMixture(comps),
        GaussianLikelihood::new(sym, 0.5)?,
        GridSpec::default(),
    )?;
    let sym_mean = mix
        .posterior(&Tensor::new(vec![1, 2], vec![0.0, 0.0]))?
        .mean();
    let asym = sym_mean.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    Ok(vec![
        Check::at_most("Gaussian grid mean vs conjugate closed form", worst, 1e-6),
        Check::at_most("grid normalization", mass, 1e-8),
        Check::at_most("symmetric mixture posterior mean", asym, 1e-12),
    ])
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn metrics(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 7;
    let pts = |rng: &mut ChaCha8Rng| {
        SampleSet::new(
            (0..n)
                .map(|_| normal_tensor(rng, &[3]).into_data())
                .collect(),
        )
    };
    let (a, b) = (pts(&mut rng)?, pts(&mut rng)?);
    let dir = normal_tensor(&mut rng, &[3]);
    let dir: Vec<f64> = dir.scale(1.0 / dir.norm()).into_data();
    let proj = |s: &SampleSet| -> Vec<f64> {
        s.points()
            .iter()
            .map(|p| p.iter().zip(&dir).map(|(u, v)| u * v).sum())
            .collect()
    };
    let (pa, pb) = (proj(&a), proj(&b));
    let brute = permutations(n)
        .iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| (pa[i] - pb[j]).powi(2))
                .sum::<f64>()
                / n as f64
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt();
    let sw_err = (sw_projection(&a, &b, &dir)? - brute).abs();

    let g = |m: f64, v: f64| {
        GaussianSummary::new(Tensor::vector(vec![m]), Tensor::new(vec![1, 1], vec![v]))
    };
    let unit = (frechet_gaussian(&g(0.0, 1.0)?, &g(1.0, 1.0)?)? - 1.0).abs();
    let (m1, m2, d1, d2): ([f64; 3], [f64; 3], [f64; 3], [f64; 3]) = (
        [0.2, -1.0, 0.5],
        [1.0, 0.0, -0.5],
        [0.5, 2.0, 1.5],
        [1.0, 0.7, 3.0],
    );
    let diag = |m: &[f64; 3], d: &[f64; 3]| {
        let mut c = vec![0.0; 9];
        (0..3).for_each(|i| c[i * 4] = d[i]);
        GaussianSummary::new(Tensor::vector(m.to_vec()), Tensor::new(vec![3, 3], c))
    };
    let closed: f64 = (0..3)
        .map(|i| (m1[i] - m2[i]).powi(2) + (d1[i].sqrt() - d2[i].sqrt()).powi(2))
        .sum();
    let diag_err = (frechet_gaussian(&diag(&m1, &d1)?, &diag(&m2, &d2)?)? - closed).abs();

    let draw = |r: &mut ChaCha8Rng| normal_tensor(r, &[2]).into_data();
    let (small, _) = sw_bias_baseline(draw, 100, 32, 20, &mut rng)?;
    let (large, _) = sw_bias_baseline(draw, 200, 32, 20, &mut rng)?;

    Ok(vec![
        Check::at_most("SW projection vs brute-force transport", sw_err, 1e-12),
        Check::at_most("Fréchet N(0,1) vs N(1,1) minus 1", unit, 0.0),
        Check::at_most("Fréchet diagonal closed form", diag_err, 1e-10),
        Check {
            name: "SW same-law baseline positive".into(),
            value: small,
            tolerance: 0.0,
            passed: small > 0.0,
        },
        Check::at_most(
            "SW baseline ratio n=200 over n=100",
            large / small,
            1.0 - 1e-9,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_on_clean_build() {
        for suite in [
            Suite::Autodiff,
            Suite::Conditional,
            Suite::Quadrature,
            Suite::Metrics,
        ] {
            let checks = run(suite, 1, Hooks::default()).unwrap();
            assert!(!checks.is_empty());
            for c in &checks {
                assert!(c.passed, "{suite:?}: {c}");
            }
        }
    }

    #[test]
    fn corrupted_gradient_fails_autodiff() {
        let checks = run(
            Suite::Autodiff,
            1,
            Hooks {
                corrupt_gradient: true,
            },
        )
        .unwrap();
        assert!(checks.iter().all(|c| !c.passed));
    }

    #[test]
    fn reports_are_seed_deterministic() {
        let a = run(Suite::Metrics, 4, Hooks::default()).unwrap();
        let b = run(Suite::Metrics, 4, Hooks::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(5).len(), 120);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!("bogus".parse::<Suite>().is_err());
    }
}
