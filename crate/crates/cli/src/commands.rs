//! The `train`, `sample`, `eval` and `simulate` commands.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use umcmc::kernels::{unfold_chain, ChainTrace, UnfoldedModel};
use umcmc::metrics::{
    latent_w2, median_bandwidth, mmd_rbf, posterior_pca, psnr, residual_correlation,
    sliced_wasserstein, ssim, PcaEncoder, SampleSet,
};
use umcmc::persist::Archive;
use umcmc::problems::{Dataset, DatasetSource, Split};
use umcmc::rng::{Role, StreamKey};
use umcmc::training::{ProblemSource, StepRecord};
use umcmc::{Error, Result, Tensor};

use crate::config::RunConfig;
use crate::obsfile;
use crate::setup::{build_trainer, load_checkpoint, operator_spec, Problem};

pub const LOG_FILE: &str = "metrics.tsv";
pub const SAMPLE_FILE: &str = "samples.umc";
const ROOT_MONITOR: u64 = 4;
const ROOT_SIMULATE: u64 = 5;

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.umc")
}

pub fn log_header() -> String {
    format!("{}\tval_psnr\tval_sw", StepRecord::HEADER)
}

/// PSNR of ergodic means and SW distance between `(x, y)` and `(x̂, y)`
/// pairs on a fixed monitoring set.
pub fn monitor(
    model: &UnfoldedModel,
    problem: &Problem,
    seed: u64,
    items: usize,
    projections: usize,
) -> Result<(f64, f64)> {
    let key = StreamKey::new(seed, ROOT_MONITOR);
    let rows: Vec<(Tensor, Tensor, Tensor, f64)> = (0..items as u64)
        .into_par_iter()
        .map(|i| {
            let item = problem.draw(key.child(i).child(0))?;
            let trace = unfold_chain(model, &item.obs, key.child(i).child(1))?;
            let x = item.x.reshape(trace.ergodic_mean.shape().to_vec())?;
            let p = psnr(&x, &trace.ergodic_mean, 1.0)?;
            let last = trace.samples.last().expect("nonempty chain").clone();
            Ok((x, item.obs.y, last, p))
        })
        .collect::<Result<_>>()?;
    let finite: Vec<f64> = rows.iter().map(|r| r.3).filter(|p| p.is_finite()).collect();
    let mean_psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let xs: Vec<Tensor> = rows.iter().map(|r| r.0.clone()).collect();
    let ys: Vec<Tensor> = rows.iter().map(|r| r.1.clone()).collect();
    let gs: Vec<Tensor> = rows.iter().map(|r| r.2.clone()).collect();
    let sw = sliced_wasserstein(
        &SampleSet::paired(&xs, &ys)?,
        &SampleSet::paired(&gs, &ys)?,
        projections,
        &mut key.stream(0, Role::Misc),
    )?;
    Ok((mean_psnr, sw))
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub log: PathBuf,
}

fn read_log_prefix(path: &Path, upto: u64) -> Result<String> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split('\t')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= upto);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    if out.is_empty() {
        out = log_header() + "\n";
    }
    Ok(out)
}

/// Trains from `config_path`, optionally resuming from a checkpoint. On
/// divergence the last good state is saved as `diverged.umc` before the
/// error is returned.
pub fn train(config_path: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let config = RunConfig::load(config_path)?;
    let text = config.to_text();
    let problem = Problem::build(&config)?;
    let mut trainer = build_trainer(&config, &problem)?;
    if let Some(ckpt) = resume {
        trainer.restore(&Archive::load(ckpt)?)?;
    }
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    let log = dir.join(LOG_FILE);
    fs::write(&log, read_log_prefix(&log, trainer.state.step)?.as_bytes())?;
    let mut out = OpenOptions::new().append(true).open(&log)?;
    let mut checkpoints = Vec::new();
    let mut save = |t: &umcmc::training::Trainer| -> Result<()> {
        let p = dir.join(checkpoint_name(t.state.step));
        t.checkpoint(&text).save(&p)?;
        checkpoints.push(p);
        Ok(())
    };
    if trainer.state.step == 0 {
        save(&trainer)?;
    }
    let total = config.training.total_steps;
    while trainer.state.step < total {
        let rec = match trainer.step(&problem) {
            Ok(r) => r,
            Err(e) => {
                trainer.checkpoint(&text).save(&dir.join("diverged.umc"))?;
                return Err(e);
            }
        };
        let extra = if rec.validation.is_some() {
            let (p, sw) = monitor(
                &trainer.state.model,
                &problem,
                config.seed,
                config.monitor.items,
                config.monitor.projections,
            )?;
            format!("\t{}\t{}", fmt(p), fmt(sw))
        } else {
            "\t\t".to_string()
        };
        writeln!(out, "{}{extra}", rec.to_line())?;
        let step = trainer.state.step;
        if step % config.training.validation_interval == 0 || step == total {
            save(&trainer)?;
        }
    }
    Ok(TrainOutcome {
        steps: trainer.state.step,
        checkpoints,
        log,
    })
}

/// Draws a signal and its observation from the configured problem.
pub fn simulate(config_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let config = RunConfig::load(config_path)?;
    let problem = Problem::build(&config)?;
    let item = problem.draw(StreamKey::new(seed, ROOT_SIMULATE))?;
    obsfile::write(out, &item.obs, Some(&item.x))
}

fn run_chains(
    model: &UnfoldedModel,
    obs: &umcmc::kernels::Observation,
    chains: usize,
    key: StreamKey,
) -> Result<Vec<ChainTrace>> {
    (0..chains as u64)
        .into_par_iter()
        .map(|c| unfold_chain(model, obs, key.child(c)))
        .collect()
}

/// Elementwise mean and population standard deviation of `samples`.
fn moments(samples: &[&Tensor]) -> (Tensor, Tensor) {
    let n = samples.len() as f64;
    let mut mean = Tensor::zeros(samples[0].shape());
    for s in samples {
        mean.axpy(1.0 / n, s);
    }
    let var = samples.iter().fold(Tensor::zeros(mean.shape()), |acc, s| {
        acc.zip_map(s, |a, v| a + v * v / n).expect("same shape")
    });
    let std = var
        .zip_map(&mean, |q, m| (q - m * m).max(0.0).sqrt())
        .expect("same shape");
    (mean, std)
}

/// Runs `chains` chains on the observation in `obs_path` and writes their
/// samples, ergodic means, overall mean and per-pixel std to
/// `out_dir/samples.umc`.
pub fn sample(
    ckpt: &Path,
    obs_path: &Path,
    chains: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    if chains == 0 {
        return Err(Error::InvalidInput("need at least one chain".into()));
    }
    let loaded = load_checkpoint(ckpt)?;
    let (obs, _) = obsfile::read(obs_path)?;
    let (d_x, d_y, _) = loaded.problem.dims(loaded.config.seed)?;
    if obs.lik.operator.domain_len() != d_x || obs.y.len() != d_y {
        return Err(Error::Shape(format!(
            "observation with domain {:?} and {} measurements; model expects {d_x} and {d_y}",
            obs.lik.operator.domain_shape(),
            obs.y.len()
        )));
    }
    let traces = run_chains(&loaded.model, &obs, chains, StreamKey::new(seed, 0))?;
    let shape = obs.domain_shape();
    let retained = traces[0].samples.len();
    let all: Vec<&Tensor> = traces.iter().flat_map(|t| t.samples.iter()).collect();
    let (mean, std) = moments(&all);
    let flat = |ts: Vec<&Tensor>, lead: Vec<usize>| {
        let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(
            lead.into_iter().chain(shape.iter().copied()).collect(),
            data,
        )
    };
    let arrays = vec![
        (
            "samples".to_string(),
            flat(all.clone(), vec![chains, retained]),
        ),
        (
            "ergodic_means".to_string(),
            flat(
                traces.iter().map(|t| &t.ergodic_mean).collect(),
                vec![chains],
            ),
        ),
        ("mean".to_string(), mean),
        ("std".to_string(), std),
    ];
    let mut rng_state = [0u8; 16];
    rng_state[..8].copy_from_slice(&seed.to_le_bytes());
    rng_state[8..].copy_from_slice(&(chains as u64).to_le_bytes());
    let archive = Archive {
        arrays,
        config: format!("chains = {chains}\nseed = {seed}\n"),
        rng_state,
    };
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join(SAMPLE_FILE);
    archive.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    Sw,
    LatentW2,
    Mmd,
    Pca,
    ResidualCorr,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "psnr" => Metric::Psnr,
            "ssim" => Metric::Ssim,
            "sw" => Metric::Sw,
            "latent_w2" => Metric::LatentW2,
            "mmd" => Metric::Mmd,
            "pca" => Metric::Pca,
            "residual_corr" => Metric::ResidualCorr,
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown metric {other:?} (expected psnr, ssim, sw, latent_w2, mmd, pca, residual_corr)"
                )))
            }
        })
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let names: Vec<&str> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidInput("empty metric list".into()));
    }
    let mut out: Vec<Metric> = Vec::new();
    for n in names {
        let m = n.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

/// Per-item rows and aggregate values of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub aggregate: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("item\t{}\n", self.columns.join("\t"));
        for (i, r) in self.rows.iter().enumerate() {
            let vals: Vec<String> = r.iter().map(|v| fmt(*v)).collect();
            s.push_str(&format!("{i}\t{}\n", vals.join("\t")));
        }
        let means: Vec<String> = (0..self.columns.len())
            .map(|c| {
                let col: Vec<f64> = self.rows.iter().map(|r| r[c]).collect();
                fmt(col.iter().sum::<f64>() / col.len() as f64)
            })
            .collect();
        if !self.rows.is_empty() && !self.columns.is_empty() {
            s.push_str(&format!("mean\t{}\n", means.join("\t")));
        }
        for (k, v) in &self.aggregate {
            s.push_str(&format!("{k} = {}\n", fmt(*v)));
        }
        s
    }
}

const PCA_COMPONENTS: usize = 3;
const EVAL_PROJECTIONS: usize = 128;

/// Evaluates the checkpoint on the test split of `manifest` (all items if
/// the manifest has no test split).
pub fn eval(
    ckpt: &Path,
    manifest: &Path,
    metrics: &[Metric],
    seed: u64,
    chains: usize,
) -> Result<EvalReport> {
    if metrics.is_empty() {
        return Err(Error::InvalidInput("empty metric list".into()));
    }
    if chains == 0 {
        return Err(Error::InvalidInput("need at least one chain".into()));
    }
    let loaded = load_checkpoint(ckpt)?;
    let mut ds = Dataset::from_manifest(manifest)?;
    if ds.indices(Split::Test).is_empty() {
        ds.splits.iter_mut().for_each(|s| *s = Split::Test);
    }
    let src = DatasetSource::new(ds, operator_spec(&loaded.config).clone(), Split::Test)?;
    let key = StreamKey::new(seed, 0);
    struct ItemOut {
        x: Tensor,
        y: Tensor,
        single: Tensor,
        mean: Tensor,
        std: Tensor,
        samples: Vec<Tensor>,
    }
    let items: Vec<ItemOut> = (0..src.len())
        .into_par_iter()
        .map(|k| {
            let item = src.item(k)?;
            let traces = run_chains(&loaded.model, &item.obs, chains, key.child(k as u64))?;
            let all: Vec<&Tensor> = traces.iter().flat_map(|t| t.samples.iter()).collect();
            let (_, std) = moments(&all);
            let means: Vec<&Tensor> = traces.iter().map(|t| &t.ergodic_mean).collect();
            let (mean, _) = moments(&means);
            let shape = item.x.shape().to_vec();
            let image = |t: &Tensor| t.reshape(shape.clone());
            Ok(ItemOut {
                single: image(traces[0].samples.last().expect("nonempty chain"))?,
                mean: image(&mean)?,
                std: image(&std)?,
                samples: all.into_iter().map(image).collect::<Result<_>>()?,
                y: item.obs.y.clone(),
                x: item.x,
            })
        })
        .collect::<Result<_>>()?;

    let mut columns = Vec::new();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); items.len()];
    let mut aggregate = Vec::new();
    for m in metrics {
        match m {
            Metric::Psnr | Metric::Ssim => {
                let name = if *m == Metric::Psnr { "psnr" } else { "ssim" };
                let f = |a: &Tensor, b: &Tensor| {
                    if *m == Metric::Psnr {
                        psnr(a, b, 1.0)
                    } else {
                        ssim(a, b, 1.0)
                    }
                };
                columns.push(format!("{name}_sample"));
                columns.push(format!("{name}_mean"));
                for (row, it) in rows.iter_mut().zip(&items) {
                    row.push(f(&it.x, &it.single)?);
                    row.push(f(&it.x, &it.mean)?);
                }
            }
            Metric::ResidualCorr => {
                columns.push("residual_corr".into());
                for (row, it) in rows.iter_mut().zip(&items) {
                    let resid = it.x.sub(&it.mean)?.map(f64::abs);
                    let block = if it.x.rank() == 2 && it.x.shape().iter().all(|&d| d % 4 == 0) {
                        4
                    } else {
                        1
                    };
                    row.push(residual_correlation(&it.std, &resid, block).unwrap_or(f64::NAN));
                }
            }
            Metric::Pca => {
                for c in 0..PCA_COMPONENTS {
                    columns.push(format!("pca_{}", c + 1));
                }
                for (row, it) in rows.iter_mut().zip(&items) {
                    let set = SampleSet::from_tensors(&it.samples)?;
                    let k = PCA_COMPONENTS
                        .min(set.len().saturating_sub(1))
                        .min(set.dim());
                    let vals = if k == 0 {
                        Vec::new()
                    } else {
                        posterior_pca(&set, k)?.0
                    };
                    row.extend(
                        (0..PCA_COMPONENTS).map(|c| vals.get(c).copied().unwrap_or(f64::NAN)),
                    );
                }
            }
            Metric::Sw | Metric::Mmd => {
                let xs: Vec<Tensor> = items.iter().map(|i| i.x.clone()).collect();
                let ys: Vec<Tensor> = items.iter().map(|i| i.y.clone()).collect();
                let gs: Vec<Tensor> = items.iter().map(|i| i.single.clone()).collect();
                let (a, b) = (SampleSet::paired(&xs, &ys)?, SampleSet::paired(&gs, &ys)?);
                if *m == Metric::Sw {
                    let mut rng = StreamKey::new(seed, 1).stream(0, Role::Misc);
                    aggregate.push((
                        "sw".into(),
                        sliced_wasserstein(&a, &b, EVAL_PROJECTIONS, &mut rng)?,
                    ));
                } else if a.len() >= 2 {
                    aggregate.push(("mmd".into(), mmd_rbf(&a, &b, median_bandwidth(&a, &b))?));
                } else {
                    aggregate.push(("mmd".into(), f64::NAN));
                }
            }
            Metric::LatentW2 => {
                let xs: Vec<Tensor> = items.iter().map(|i| i.x.clone()).collect();
                let truth = SampleSet::from_tensors(&xs)?;
                let k = PcaEncoder::DEFAULT_DIM
                    .min(truth.len().saturating_sub(1))
                    .min(truth.dim());
                let value = if k == 0 {
                    f64::NAN
                } else {
                    let enc = PcaEncoder::fit(&truth, k)?;
                    let gen = SampleSet::from_tensors(
                        &items.iter().map(|i| i.single.clone()).collect::<Vec<_>>(),
                    )?;
                    latent_w2(|p| enc.encode(p), &[gen], &[truth])?
                };
                aggregate.push(("latent_w2".into(), value));
            }
        }
    }
    Ok(EvalReport {
        columns,
        rows,
        aggregate,
    })
}
