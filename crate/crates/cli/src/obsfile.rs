//! Observation files: a measurement, its operator and noise level, and
//! optionally the clean signal, in the named-array container.

use std::path::Path;

use num_complex::Complex64;
use umcmc::kernels::Observation;
use umcmc::linops::{GaussianLikelihood, LinearOperator, OperatorKind};
use umcmc::persist::Archive;
use umcmc::{Error, Result, Tensor};

const KIND_IDENTITY: f64 = 0.0;
const KIND_CIRCULANT: f64 = 1.0;
const KIND_MASK: f64 = 2.0;
const KIND_DENSE: f64 = 3.0;

pub fn to_archive(obs: &Observation, truth: Option<&Tensor>) -> Archive {
    let op = &obs.lik.operator;
    let shape = op.domain_shape();
    let mut arrays = vec![
        ("y".to_string(), obs.y.clone()),
        ("sigma".to_string(), Tensor::vector(vec![obs.lik.sigma()])),
        (
            "op.domain".to_string(),
            Tensor::vector(shape.iter().map(|&d| d as f64).collect()),
        ),
    ];
    let kind = match op.kind() {
        OperatorKind::Identity => KIND_IDENTITY,
        OperatorKind::Circulant2D => {
            arrays.push((
                "op.kernel".into(),
                op.kernel().expect("circulant kernel").clone(),
            ));
            KIND_CIRCULANT
        }
        OperatorKind::FourierMask => {
            let m = op.mask().expect("mask");
            arrays.push((
                "op.mask.re".into(),
                Tensor::new(shape.clone(), m.iter().map(|c| c.re).collect()),
            ));
            arrays.push((
                "op.mask.im".into(),
                Tensor::new(shape.clone(), m.iter().map(|c| c.im).collect()),
            ));
            KIND_MASK
        }
        OperatorKind::Dense => {
            arrays.push(("op.matrix".into(), op.matrix().expect("matrix").clone()));
            KIND_DENSE
        }
    };
    arrays.push(("op.kind".into(), Tensor::vector(vec![kind])));
    if let Some(x) = truth {
        arrays.push(("x".into(), x.clone()));
    }
    Archive {
        arrays,
        config: String::new(),
        rng_state: [0; 16],
    }
}

pub fn from_archive(archive: &Archive) -> Result<(Observation, Option<Tensor>)> {
    let domain: Vec<usize> = archive
        .get("op.domain")?
        .data()
        .iter()
        .map(|&d| d as usize)
        .collect();
    let kind = archive
        .get("op.kind")?
        .data()
        .first()
        .copied()
        .unwrap_or(f64::NAN);
    let op = if kind == KIND_IDENTITY {
        LinearOperator::identity(domain.iter().product())
    } else if kind == KIND_CIRCULANT {
        let [h, w] = domain[..] else {
            return Err(Error::Format(format!("circulant domain {domain:?}")));
        };
        LinearOperator::circulant(archive.get("op.kernel")?.clone(), h, w)?
    } else if kind == KIND_MASK {
        let [h, w] = domain[..] else {
            return Err(Error::Format(format!("mask domain {domain:?}")));
        };
        let (re, im) = (archive.get("op.mask.re")?, archive.get("op.mask.im")?);
        let mask = re
            .data()
            .iter()
            .zip(im.data())
            .map(|(&a, &b)| Complex64::new(a, b))
            .collect();
        LinearOperator::fourier_mask(mask, h, w)?
    } else if kind == KIND_DENSE {
        LinearOperator::dense(archive.get("op.matrix")?.clone())?
    } else {
        return Err(Error::Format(format!("unknown operator code {kind}")));
    };
    let sigma = archive
        .get("sigma")?
        .data()
        .first()
        .copied()
        .unwrap_or(f64::NAN);
    let obs = Observation::new(
        archive.get("y")?.clone(),
        GaussianLikelihood::new(op, sigma)?,
    )?;
    let truth = archive.get("x").ok().cloned();
    if let Some(x) = &truth {
        if x.len() != obs.lik.operator.domain_len() {
            return Err(Error::Shape(format!(
                "truth {:?} vs operator domain {domain:?}",
                x.shape()
            )));
        }
    }
    Ok((obs, truth))
}

pub fn write(path: &Path, obs: &Observation, truth: Option<&Tensor>) -> Result<()> {
    to_archive(obs, truth).save(path)
}

pub fn read(path: &Path) -> Result<(Observation, Option<Tensor>)> {
    from_archive(&Archive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use umcmc::problems::{make_observation, OperatorSpec, TrackParams};

    #[test]
    fn round_trips_every_operator_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::full(&[8, 8], 0.3);
        let specs = [
            OperatorSpec::Identity,
            OperatorSpec::Blur {
                size: 3,
                length_scale: 0.3,
                gp_std: 0.25,
            },
            OperatorSpec::FourierMask {
                n_tracks: 2,
                tracks: TrackParams::default(),
            },
        ];
        for spec in specs {
            let op = spec.build(&[8, 8], &mut rng).unwrap();
            let obs =
                make_observation(&x, GaussianLikelihood::new(op, 0.1).unwrap(), &mut rng).unwrap();
            let bytes = to_archive(&obs, Some(&x)).to_bytes().unwrap();
            let (back, truth) = from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back.y, obs.y);
            assert_eq!(truth.as_ref(), Some(&x));
            assert_eq!(
                back.lik.operator.apply(&x).unwrap(),
                obs.lik.operator.apply(&x).unwrap()
            );
        }
    }

    #[test]
    fn rejects_unknown_operator() {
        let mut a = to_archive(
            &Observation::new(
                Tensor::zeros(&[4]),
                GaussianLikelihood::new(LinearOperator::identity(4), 1.0).unwrap(),
            )
            .unwrap(),
            None,
        );
        a.arrays.iter_mut().find(|e| e.0 == "op.kind").unwrap().1 = Tensor::vector(vec![9.0]);
        assert!(matches!(from_archive(&a), Err(Error::Format(_))));
    }
}
