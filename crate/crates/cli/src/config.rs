//! Run configuration: a TOML file with `[problem]`, `[model]` and
//! `[training]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use umcmc::problems::{OperatorSpec, ToyPrior};
use umcmc::training::TrainingConfig;
use umcmc::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory for checkpoints and the metrics log.
    pub output_dir: PathBuf,
    pub problem: ProblemConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// Synthetic low-dimensional problem with a fixed operator.
    Toy {
        sigma: f64,
        shape: [usize; 2],
        operator: OperatorSpec,
        prior: ToyPriorConfig,
        #[serde(default = "default_grid_points")]
        grid_points: usize,
        #[serde(default = "default_grid_half_width")]
        grid_half_width: f64,
    },
    /// Images listed in a dataset manifest, one operator per item.
    Dataset {
        manifest: PathBuf,
        operator: OperatorSpec,
    },
}

fn default_grid_points() -> usize {
    201
}

fn default_grid_half_width() -> f64 {
    8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToyPriorConfig {
    Gaussian {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    GaussianMixture {
        components: Vec<ComponentConfig>,
    },
    /// Decoder `w` is row-major `[d_x, d_z]`.
    LatentLaplace {
        w: Vec<f64>,
        d_z: usize,
        lambda: f64,
        rho: f64,
    },
}

impl ToyPriorConfig {
    pub fn build(&self) -> Result<ToyPrior> {
        use umcmc::priors::LatentLaplacePrior;
        use umcmc::problems::MixtureComponent;
        use umcmc::Tensor;
        Ok(match self {
            ToyPriorConfig::Gaussian { mean, var } => ToyPrior::Gaussian {
                mean: mean.clone(),
                var: var.clone(),
            },
            ToyPriorConfig::GaussianMixture { components } => ToyPrior::GaussianMixture(
                components
                    .iter()
                    .map(|c| MixtureComponent {
                        weight: c.weight,
                        mean: c.mean.clone(),
                        std: c.std,
                    })
                    .collect(),
            ),
            ToyPriorConfig::LatentLaplace {
                w,
                d_z,
                lambda,
                rho,
            } => {
                if *d_z == 0 || w.len() % d_z != 0 {
                    return Err(Error::Config(format!(
                        "decoder of {} entries is not [d_x, {d_z}]",
                        w.len()
                    )));
                }
                let w = Tensor::from_vec(vec![w.len() / d_z, *d_z], w.clone())?;
                ToyPrior::LatentLaplace {
                    prior: LatentLaplacePrior::new(w, *lambda)?,
                    rho: *rho,
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Sgs {
        layers: usize,
        burn_in: usize,
        gamma: f64,
        rho: f64,
        d_z: usize,
        lambda: f64,
    },
    Latino {
        layers: usize,
        burn_in: usize,
        denoiser: DenoiserConfig,
        /// Defaults to half the operator norm bound.
        gamma: Option<f64>,
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
        #[serde(default)]
        init: LatinoInitConfig,
    },
}

fn default_beta_min() -> f64 {
    0.1
}

fn default_beta_max() -> f64 {
    20.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserConfig {
    /// Independent Gaussian prior `N(mean, var)` on every pixel.
    Analytic {
        mean: f64,
        var: f64,
    },
    SmallDense,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatinoInitConfig {
    #[default]
    BackProjection,
    Zero,
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        match self {
            ModelConfig::Sgs { layers, .. } | ModelConfig::Latino { layers, .. } => *layers,
        }
    }

    pub fn burn_in(&self) -> usize {
        match self {
            ModelConfig::Sgs { burn_in, .. } | ModelConfig::Latino { burn_in, .. } => *burn_in,
        }
    }
}

/// Extra validation metrics written to the log at validation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    #[serde(default = "default_monitor_items")]
    pub items: usize,
    #[serde(default = "default_projections")]
    pub projections: usize,
}

fn default_monitor_items() -> usize {
    64
}

fn default_projections() -> usize {
    64
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            items: default_monitor_items(),
            projections: default_projections(),
        }
    }
}

impl RunConfig {
    /// Parses and validates `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(describe(text, &e)))?;
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        Self::parse(&text, &base)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let ProblemConfig::Dataset { manifest, .. } = &mut self.problem {
            join(manifest);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let (layers, burn_in) = (self.model.layers(), self.model.burn_in());
        if layers == 0 {
            return Err(Error::Config("model.layers must be at least 1".into()));
        }
        if burn_in > layers {
            return Err(Error::Config(format!(
                "model.burn_in = {burn_in} exceeds model.layers = {layers}"
            )));
        }
        if let ProblemConfig::Dataset { manifest, .. } = &self.problem {
            if !manifest.is_file() {
                return Err(Error::Config(format!(
                    "manifest {} does not exist",
                    manifest.display()
                )));
            }
        }
        if let ProblemConfig::Toy { sigma, .. } = &self.problem {
            if !(*sigma > 0.0) {
                return Err(Error::Config(format!(
                    "problem.sigma must be positive, got {sigma}"
                )));
            }
        }
        if self.monitor.items == 0 || self.monitor.projections == 0 {
            return Err(Error::Config(
                "monitor.items and monitor.projections must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Canonical TOML text, stored inside checkpoints.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Renders a parse error as `line L, column C: message`. Errors inside
/// tagged sections carry the span of the whole section, so an unknown key
/// is located by searching for its own line.
fn describe(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message();
    let unknown = msg
        .strip_prefix("unknown field `")
        .and_then(|rest| rest.split('`').next())
        .and_then(|key| {
            text.lines().position(|l| {
                let l = l.trim_start();
                l.strip_prefix(key)
                    .is_some_and(|r| r.trim_start().starts_with('='))
            })
        });
    if let Some(i) = unknown {
        return format!("line {}, column 1: {msg}", i + 1);
    }
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before
                .rfind('\n')
                .map_or(before.len(), |i| before.len() - i - 1)
                + 1;
            format!("line {line}, column {col}: {msg}")
        }
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY: &str = r#"
seed = 3
output_dir = "out"

[problem]
kind = "toy"
sigma = 0.3
shape = [1, 2]
operator = { kind = "circulant", kernel = [0.8, 0.4], kernel_shape = [1, 2] }

[problem.prior]
kind = "gaussian_mixture"
components = [
  { weight = 0.5, mean = [0.25, 0.3], std = 0.08 },
  { weight = 0.5, mean = [0.75, 0.7], std = 0.08 },
]

[model]
kernel = "sgs"
layers = 4
burn_in = 2
gamma = 0.05
rho = 0.3
d_z = 2
lambda = 0.5

[training]
sd_threshold = 1.0
"#;

    #[test]
    fn parses_toy_config_and_resolves_paths() {
        let c = RunConfig::parse(TOY, Path::new("/tmp/base")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/tmp/base/out"));
        assert_eq!(c.model.layers(), 4);
        assert_eq!(c.monitor, MonitorConfig::default());
        let again = RunConfig::parse(&c.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = TOY.replace("rho = 0.3\nd_z", "rho = 0.3\nbogus = 1\nd_z");
        let err = RunConfig::parse(&text, Path::new("."))
            .unwrap_err()
            .to_string();
        let line = text.lines().position(|l| l.starts_with("bogus")).unwrap() + 1;
        assert!(err.contains(&format!("line {line}")), "{err}");
    }

    #[test]
    fn burn_in_beyond_layers_is_rejected() {
        let text = TOY.replace("burn_in = 2", "burn_in = 5");
        assert!(matches!(
            RunConfig::parse(&text, Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_manifest_is_rejected() {
        let text = TOY.replace(
            "kind = \"toy\"\nsigma = 0.3\nshape = [1, 2]\n",
            "kind = \"dataset\"\nmanifest = \"/definitely/missing.toml\"\n",
        );
        let text = text.split("[problem.prior]").next().unwrap().to_string()
            + "[model]"
            + TOY.split("[model]").nth(1).unwrap();
        let err = RunConfig::parse(&text, Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("does not exist"), "{err}");
    }
}
