//! Builds problems, models and trainers from a [`RunConfig`].

use std::path::Path;

use umcmc::kernels::{LatinoInit, UnfoldedModel};
use umcmc::linops::GaussianLikelihood;
use umcmc::persist::Archive;
use umcmc::priors::{Denoiser, LatentLaplacePrior, SmallDense, VpSchedule};
use umcmc::problems::{Dataset, DatasetSource, GridSpec, OperatorSpec, Split, ToyProblem};
use umcmc::rng::{Role, StreamKey};
use umcmc::training::{load_params, Discriminator, ProblemSource, TrainItem, Trainer};
use umcmc::{Error, Result, Tensor};

use crate::config::{DenoiserConfig, LatinoInitConfig, ModelConfig, ProblemConfig, RunConfig};

/// Root chain index of keys used while building a run.
const ROOT_SETUP: u64 = 3;

fn setup_key(seed: u64) -> StreamKey {
    StreamKey::new(seed, ROOT_SETUP)
}

/// Training data: an endless toy generator or a dataset split.
#[derive(Debug, Clone)]
pub enum Problem {
    Toy(ToyProblem),
    Dataset(DatasetSource),
}

impl ProblemSource for Problem {
    fn draw(&self, key: StreamKey) -> Result<TrainItem> {
        match self {
            Problem::Toy(t) => t.draw(key),
            Problem::Dataset(d) => d.draw(key),
        }
    }
}

impl Problem {
    pub fn build(config: &RunConfig) -> Result<Self> {
        match &config.problem {
            ProblemConfig::Toy {
                sigma,
                shape,
                operator,
                prior,
                grid_points,
                grid_half_width,
            } => {
                let op =
                    operator.build(shape, &mut setup_key(config.seed).stream(0, Role::Init))?;
                let lik = GaussianLikelihood::new(op, *sigma)?;
                let grid = GridSpec {
                    points: *grid_points,
                    half_width: *grid_half_width,
                };
                Ok(Problem::Toy(ToyProblem::new(prior.build()?, lik, grid)?))
            }
            ProblemConfig::Dataset { manifest, operator } => {
                let ds = Dataset::from_manifest(manifest)?;
                Ok(Problem::Dataset(DatasetSource::new(
                    ds,
                    operator.clone(),
                    Split::Train,
                )?))
            }
        }
    }

    /// Signal and measurement lengths.
    pub fn dims(&self, seed: u64) -> Result<(usize, usize, f64)> {
        let item = self.draw(setup_key(seed).child(0))?;
        Ok((item.x.len(), item.obs.y.len(), item.obs.lipschitz()))
    }

    pub fn as_toy(&self) -> Option<&ToyProblem> {
        match self {
            Problem::Toy(t) => Some(t),
            Problem::Dataset(_) => None,
        }
    }
}

/// Operator family used when evaluating against external images.
pub fn operator_spec(config: &RunConfig) -> &OperatorSpec {
    match &config.problem {
        ProblemConfig::Toy { operator, .. } | ProblemConfig::Dataset { operator, .. } => operator,
    }
}

/// Initial model for `config`, drawn from the run seed.
pub fn build_model(config: &RunConfig, problem: &Problem) -> Result<UnfoldedModel> {
    let (d_x, _, lipschitz) = problem.dims(config.seed)?;
    let mut rng = setup_key(config.seed).stream(1, Role::Init);
    match &config.model {
        ModelConfig::Sgs {
            layers,
            burn_in,
            gamma,
            rho,
            d_z,
            lambda,
        } => {
            let prior = LatentLaplacePrior::init(d_x, *d_z, *lambda, &mut rng)?;
            UnfoldedModel::sgs_uniform(*layers, *burn_in, *gamma, *rho, prior)
        }
        ModelConfig::Latino {
            layers,
            burn_in,
            denoiser,
            gamma,
            beta_min,
            beta_max,
            init,
        } => {
            let shape = match problem {
                Problem::Toy(t) => t.lik.operator.domain_shape(),
                Problem::Dataset(d) => d
                    .dataset
                    .image_shape()
                    .map(|s| s.to_vec())
                    .unwrap_or_default(),
            };
            let denoiser = match denoiser {
                DenoiserConfig::Analytic { mean, var } => {
                    Denoiser::analytic(Tensor::full(&shape, *mean), Tensor::full(&shape, *var))?
                }
                DenoiserConfig::SmallDense => Denoiser::SmallDense(SmallDense::init(d_x, &mut rng)),
            };
            let mut per_layer = umcmc::kernels::zero_shot_latino_defaults(*layers, lipschitz)?;
            if let Some(g) = gamma {
                per_layer.iter_mut().for_each(|p| p.0 = *g);
            }
            let init = match init {
                LatinoInitConfig::BackProjection => LatinoInit::BackProjection,
                LatinoInitConfig::Zero => LatinoInit::Zero,
            };
            UnfoldedModel::latino(
                *layers,
                *burn_in,
                &per_layer,
                denoiser,
                VpSchedule::new(*beta_min, *beta_max)?,
                init,
            )
        }
    }
}

/// Fresh trainer for `config`.
pub fn build_trainer(config: &RunConfig, problem: &Problem) -> Result<Trainer> {
    let (d_x, d_y, _) = problem.dims(config.seed)?;
    let model = build_model(config, problem)?;
    let disc = Discriminator::init(d_x + d_y, &mut setup_key(config.seed).stream(2, Role::Init));
    Trainer::new(config.training.clone(), model, disc, config.seed)
}

/// Run configuration and trained model stored in a checkpoint.
pub struct Loaded {
    pub config: RunConfig,
    pub problem: Problem,
    pub model: UnfoldedModel,
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let archive = Archive::load(path)?;
    let config = RunConfig::parse(&archive.config, Path::new("."))
        .map_err(|e| Error::Format(format!("{}: stored configuration: {e}", path.display())))?;
    let problem = Problem::build(&config)?;
    let mut model = build_model(&config, &problem)?;
    load_params(&archive, &mut |f| model.visit_mut(f))?;
    Ok(Loaded {
        config,
        problem,
        model,
    })
}
