//! Reconstruction and posterior-quality metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB; `+∞` when the root-mean-square error
/// is at most one unit in the last place of `peak`.
pub fn psnr(x: &Tensor, xhat: &Tensor, peak: f64) -> Result<f64> {
    x.expect_same_shape(xhat, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidInput(format!(
            "psnr peak must be positive, got {peak}"
        )));
    }
    let mse = x.sub(xhat)?.norm_sq() / x.len() as f64;
    if mse <= (f64::EPSILON * peak).powi(2) {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean structural similarity over all `window × window` patches with
/// uniform weights and the usual constants `(0.01·peak)²`, `(0.03·peak)²`.
pub fn ssim(x: &Tensor, xhat: &Tensor, peak: f64) -> Result<f64> {
    ssim_with(x, xhat, 7, (0.01 * peak).powi(2), (0.03 * peak).powi(2))
}

pub fn ssim_with(x: &Tensor, xhat: &Tensor, window: usize, c1: f64, c2: f64) -> Result<f64> {
    x.expect_same_shape(xhat, "ssim")?;
    let (h, w) = x.dims2()?;
    if window == 0 || h < window || w < window {
        return Err(Error::InvalidInput(format!(
            "image {h}×{w} smaller than ssim window {window}"
        )));
    }
    let (a, b) = (x.data(), xhat.data());
    let n = (window * window) as f64;
    let mut total = 0.0;
    for i in 0..=h - window {
        for j in 0..=w - window {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..window {
                for dj in 0..window {
                    let k = (i + di) * w + j + dj;
                    sa += a[k];
                    sb += b[k];
                    saa += a[k] * a[k];
                    sbb += b[k] * b[k];
                    sab += a[k] * b[k];
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((h - window + 1) * (w - window + 1)) as f64)
}

/// Empirical measure with uniform weights on points of a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        let d = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("empty sample set".into()))?;
        if d == 0 {
            return Err(Error::InvalidInput("zero-dimensional samples".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(Error::Shape(format!(
                "sample of length {} in a set of dimension {d}",
                p.len()
            )));
        }
        Ok(SampleSet { points })
    }

    pub fn from_tensors(ts: &[Tensor]) -> Result<Self> {
        SampleSet::new(ts.iter().map(|t| t.data().to_vec()).collect())
    }

    /// Joint samples `[x, y]` from paired signals and observations.
    pub fn paired(xs: &[Tensor], ys: &[Tensor]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Shape(format!(
                "{} signals vs {} observations",
                xs.len(),
                ys.len()
            )));
        }
        SampleSet::new(
            xs.iter()
                .zip(ys)
                .map(|(x, y)| x.data().iter().chain(y.data()).copied().collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for p in &self.points {
            for (a, v) in m.iter_mut().zip(p) {
                *a += v;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }

    fn project(&self, dir: &[f64]) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn centered(&self) -> DMatrix<f64> {
        let m = self.mean();
        DMatrix::from_fn(self.len(), self.dim(), |i, j| self.points[i][j] - m[j])
    }
}

/// Exact `W₂` between two equal-size empirical measures on the line.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "1D transport between sets of size {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let s: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// `W₂` of the projections of both sets onto `dir`.
pub fn sw_projection(s1: &SampleSet, s2: &SampleSet, dir: &[f64]) -> Result<f64> {
    check_pair(s1, s2)?;
    if dir.len() != s1.dim() {
        return Err(Error::Shape(format!(
            "direction of length {} for dimension {}",
            dir.len(),
            s1.dim()
        )));
    }
    w2_1d(&s1.project(dir), &s2.project(dir))
}

fn check_pair(s1: &SampleSet, s2: &SampleSet) -> Result<()> {
    if s1.len() != s2.len() {
        return Err(Error::Shape(format!(
            "sliced Wasserstein needs equal cardinalities, got {} and {}",
            s1.len(),
            s2.len()
        )));
    }
    if s1.dim() != s2.dim() {
        return Err(Error::Shape(format!(
            "dimensions {} and {}",
            s1.dim(),
            s2.dim()
        )));
    }
    Ok(())
}

/// `n` directions drawn uniformly on the unit sphere of `ℝ^dim`.
pub fn random_directions<R: Rng + ?Sized>(dim: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let g = normal_tensor(rng, &[dim]);
            let norm = g.norm();
            if norm > 1e-300 {
                break g.data().iter().map(|v| v / norm).collect();
            }
        })
        .collect()
}

/// Mean over `n_proj` random directions of the projected 1D `W₂` distance.
pub fn sliced_wasserstein<R: Rng + ?Sized>(
    s1: &SampleSet,
    s2: &SampleSet,
    n_proj: usize,
    rng: &mut R,
) -> Result<f64> {
    check_pair(s1, s2)?;
    if n_proj == 0 {
        return Err(Error::InvalidInput(
            "sliced Wasserstein needs at least one projection".into(),
        ));
    }
    let dirs = random_directions(s1.dim(), n_proj, rng);
    let per: Vec<f64> = dirs
        .par_iter()
        .map(|d| sw_projection(s1, s2, d))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / n_proj as f64)
}

/// Mean and standard deviation of the SW distance between two disjoint
/// same-law sample sets of size `n`.
pub fn sw_bias_baseline<R, F>(
    mut sampler: F,
    n: usize,
    n_proj: usize,
    repetitions: usize,
    rng: &mut R,
) -> Result<(f64, f64)>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Vec<f64>,
{
    if n < 2 || repetitions == 0 {
        return Err(Error::InvalidInput(format!(
            "baseline needs n ≥ 2 and repetitions ≥ 1, got {n}, {repetitions}"
        )));
    }
    let mut vals = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let a = SampleSet::new((0..n).map(|_| sampler(rng)).collect())?;
        let b = SampleSet::new((0..n).map(|_| sampler(rng)).collect())?;
        vals.push(sliced_wasserstein(&a, &b, n_proj, rng)?);
    }
    let m = vals.iter().sum::<f64>() / repetitions as f64;
    let var = if repetitions > 1 {
        vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (repetitions - 1) as f64
    } else {
        0.0
    };
    Ok((m, var.sqrt()))
}

/// Mean and covariance of a Gaussian surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Tensor,
    pub cov: Tensor,
}

const PSD_TOL: f64 = 1e-10;

impl GaussianSummary {
    pub fn new(mean: Tensor, cov: Tensor) -> Result<Self> {
        let d = mean.len();
        let (r, c) = cov.dims2()?;
        if r != d || c != d {
            return Err(Error::Shape(format!(
                "mean of length {d} with covariance [{r}, {c}]"
            )));
        }
        let cv = cov.data();
        let scale = cv.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (cv[i * d + j] - cv[j * d + i]).abs() > PSD_TOL * scale {
                    return Err(Error::InvalidInput("covariance is not symmetric".into()));
                }
            }
        }
        Ok(GaussianSummary {
            mean: Tensor::vector(mean.into_data()),
            cov,
        })
    }

    /// Sample mean and unbiased covariance (zero for a single sample).
    pub fn fit(s: &SampleSet) -> GaussianSummary {
        let x = s.centered();
        let denom = (s.len().max(2) - 1) as f64;
        let c = x.transpose() * &x / denom;
        let d = s.dim();
        GaussianSummary {
            mean: Tensor::vector(s.mean()),
            cov: Tensor::new(vec![d, d], (0..d * d).map(|k| c[(k / d, k % d)]).collect()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Adds `eps` to the covariance diagonal.
    pub fn regularized(mut self, eps: f64) -> Self {
        let d = self.dim();
        for i in 0..d {
            self.cov.data_mut()[i * d + i] += eps;
        }
        self
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, self.cov.data())
    }
}

/// Symmetric square root, erroring on eigenvalues below `−tol·scale`.
fn sqrtm_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(v) = eig.eigenvalues.iter().find(|&&v| v < -PSD_TOL * scale) {
        return Err(Error::InvalidInput(format!(
            "{what} is not positive semidefinite (eigenvalue {v:e})"
        )));
    }
    let root = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Squared `W₂` distance between two Gaussians.
pub fn frechet_gaussian(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Shape(format!(
            "Gaussians of dimension {} and {}",
            g1.dim(),
            g2.dim()
        )));
    }
    let (c1, c2) = (g1.cov_matrix(), g2.cov_matrix());
    let r1 = sqrtm_psd(&c1, "first covariance")?;
    sqrtm_psd(&c2, "second covariance")?;
    let cross = sqrtm_psd(&(&r1 * &c2 * &r1), "cross term")?;
    let shift = g1.mean.sub(&g2.mean)?.norm_sq();
    Ok(shift + (c1.trace() + c2.trace() - 2.0 * cross.trace()))
}

/// Top `k` eigenpairs of the sample covariance, obtained from the `n × n`
/// Gram matrix of centered samples. Eigenvectors for zero eigenvalues are
/// completed to an orthonormal set.
pub fn posterior_pca(samples: &SampleSet, k: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (n, d) = (samples.len(), samples.dim());
    if n < 2 || k == 0 || k > (n - 1).min(d) {
        return Err(Error::InvalidInput(format!(
            "PCA of {k} components from {n} samples of dimension {d}"
        )));
    }
    let x = samples.centered();
    let denom = (n - 1) as f64;
    let gram = &x * x.transpose() / denom;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut values = Vec::with_capacity(k);
    let mut vectors: Vec<DVector<f64>> = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let lam = eig.eigenvalues[idx].max(0.0);
        let v = if lam > 1e-12 * top.max(f64::MIN_POSITIVE) {
            let v = x.transpose() * eig.eigenvectors.column(idx);
            let v = v / (lam * denom).sqrt();
            orthonormalize(v, &vectors).unwrap_or_else(|| complement(d, &vectors))
        } else {
            complement(d, &vectors)
        };
        values.push(if lam > 1e-12 * top { lam } else { 0.0 });
        vectors.push(v);
    }
    Ok((
        values,
        vectors
            .into_iter()
            .map(|v| v.iter().copied().collect())
            .collect(),
    ))
}

fn orthonormalize(mut v: DVector<f64>, basis: &[DVector<f64>]) -> Option<DVector<f64>> {
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(&v);
            v -= b * c;
        }
    }
    let n = v.norm();
    (n > 1e-8).then(|| v / n)
}

fn complement(d: usize, basis: &[DVector<f64>]) -> DVector<f64> {
    (0..d)
        .find_map(|i| {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            orthonormalize(e, basis)
        })
        .expect("basis smaller than the dimension")
}

/// Linear encoder onto the leading principal directions of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaEncoder {
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

impl PcaEncoder {
    pub const DEFAULT_DIM: usize = 12;

    pub fn fit(training: &SampleSet, k: usize) -> Result<Self> {
        let (_, components) = posterior_pca(training, k)?;
        Ok(PcaEncoder {
            mean: training.mean(),
            components,
        })
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                c.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(a, (v, m))| a * (v - m))
                    .sum()
            })
            .collect()
    }
}

/// Fréchet distance between Gaussian fits of encoded sets, averaged over
/// observations.
pub fn latent_w2<E>(encoder: E, posterior: &[SampleSet], reference: &[SampleSet]) -> Result<f64>
where
    E: Fn(&[f64]) -> Vec<f64>,
{
    if posterior.len() != reference.len() || posterior.is_empty() {
        return Err(Error::Shape(format!(
            "{} posterior sets vs {} reference sets",
            posterior.len(),
            reference.len()
        )));
    }
    let fit = |s: &SampleSet| -> Result<GaussianSummary> {
        let enc = SampleSet::new(s.points().iter().map(|p| encoder(p)).collect())?;
        let g = GaussianSummary::fit(&enc);
        Ok(if enc.len() < enc.dim() + 1 {
            g.regularized(1e-6)
        } else {
            g
        })
    };
    let mut total = 0.0;
    for (p, r) in posterior.iter().zip(reference) {
        total += frechet_gaussian(&fit(p)?, &fit(r)?)?;
    }
    Ok(total / posterior.len() as f64)
}

/// Median pairwise Euclidean distance over the pooled sets.
pub fn median_bandwidth(s1: &SampleSet, s2: &SampleSet) -> f64 {
    let pooled: Vec<&Vec<f64>> = s1.points().iter().chain(s2.points()).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// Unbiased squared MMD with kernel `exp(−‖a−b‖² / (2h²))`.
pub fn mmd_rbf(s1: &SampleSet, s2: &SampleSet, bandwidth: f64) -> Result<f64> {
    if s1.len() < 2 || s2.len() < 2 {
        return Err(Error::InvalidInput(
            "MMD needs at least two samples per set".into(),
        ));
    }
    if s1.dim() != s2.dim() {
        return Err(Error::Shape(format!(
            "dimensions {} and {}",
            s1.dim(),
            s2.dim()
        )));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * bandwidth * bandwidth)).exp();
    let within = |s: &SampleSet| {
        let p = s.points();
        let mut t = 0.0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                if i != j {
                    t += k(&p[i], &p[j]);
                }
            }
        }
        t / (p.len() * (p.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in s1.points() {
        for b in s2.points() {
            cross += k(a, b);
        }
    }
    cross /= (s1.len() * s2.len()) as f64;
    Ok(within(s1) + within(s2) - 2.0 * cross)
}

fn block_mean(m: &Tensor, block: usize) -> Result<Vec<f64>> {
    let (h, w) = m.dims2()?;
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::InvalidInput(format!(
            "block {block} does not divide {h}×{w}"
        )));
    }
    let (bh, bw) = (h / block, w / block);
    let mut out = vec![0.0; bh * bw];
    for i in 0..h {
        for j in 0..w {
            out[(i / block) * bw + j / block] += m.data()[i * w + j];
        }
    }
    let n = (block * block) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Pearson correlation of block-averaged maps.
pub fn residual_correlation(std_map: &Tensor, residual_map: &Tensor, block: usize) -> Result<f64> {
    std_map.expect_same_shape(residual_map, "residual_correlation")?;
    let a = block_mean(std_map, block)?;
    let b = block_mean(residual_map, block)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 {
        return Err(Error::ConstantMap("standard-deviation"));
    }
    if sbb == 0.0 {
        return Err(Error::ConstantMap("residual"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Named scalar results rendered as `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.entries.push((key.into(), value));
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_table(&self) -> String {
        let keys: Vec<&str> = self.entries.iter().map(|e| e.0.as_str()).collect();
        let vals: Vec<String> = self.entries.iter().map(|e| e.1.to_string()).collect();
        format!("{}\n{}\n", keys.join("\t"), vals.join("\t"))
    }
}
