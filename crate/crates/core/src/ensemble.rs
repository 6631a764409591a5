//! Probability measures on parameter space: Gaussian mixtures, particle
//! ensembles and Gaussian kernel density estimates.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{sorted_quantile, sq_dist};
use crate::rng::StreamFamily;

const WEIGHT_TOL: f64 = 1e-12;

/// One weighted Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub covariance: Vec<Vec<f64>>,
}

/// A finite mixture of Gaussians, as declared in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl GaussianMixtureSpec {
    /// Convenience constructor for one-dimensional mixtures of `(weight, mean, std)`.
    pub fn univariate(parts: &[(f64, f64, f64)]) -> Self {
        Self {
            components: parts
                .iter()
                .map(|&(weight, mean, std)| MixtureComponent {
                    weight,
                    mean: vec![mean],
                    covariance: vec![vec![std * std]],
                })
                .collect(),
        }
    }

    pub fn standard_normal(dim: usize) -> Self {
        let mut cov = vec![vec![0.0; dim]; dim];
        for (i, row) in cov.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0; dim],
                covariance: cov,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (acc, x) in m.iter_mut().zip(&c.mean) {
                *acc += c.weight * x;
            }
        }
        m
    }

    /// Per-coordinate variance of the mixture.
    pub fn marginal_variances(&self) -> Vec<f64> {
        let mean = self.mean();
        (0..self.dim())
            .map(|j| {
                self.components
                    .iter()
                    .map(|c| c.weight * (c.covariance[j][j] + (c.mean[j] - mean[j]).powi(2)))
                    .sum()
            })
            .collect()
    }

    /// Checks weights, dimensions, symmetry and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidSpec("mixture has no components".into()));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidSpec("mixture component has zero dimension".into()));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidSpec(format!("component {k} has weight {}", c.weight)));
            }
            total += c.weight;
            check_dim(d, c.mean.len())?;
            if c.mean.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec(format!("component {k} has a non-finite mean")));
            }
            check_dim(d, c.covariance.len())?;
            for row in &c.covariance {
                check_dim(d, row.len())?;
            }
            for i in 0..d {
                for j in 0..i {
                    let (a, b) = (c.covariance[i][j], c.covariance[j][i]);
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                        return Err(Error::InvalidSpec(format!(
                            "component {k} covariance is not symmetric"
                        )));
                    }
                }
            }
            let m = DMatrix::from_fn(d, d, |i, j| c.covariance[i][j]);
            let eig = SymmetricEigen::new(m);
            if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::InvalidSpec(format!(
                    "component {k} covariance is not positive definite"
                )));
            }
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidSpec(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }
}

/// A validated mixture with cached Cholesky factors, ready for sampling.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    spec: GaussianMixtureSpec,
    cumulative: Vec<f64>,
    chol: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(spec: GaussianMixtureSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim();
        let mut cumulative = Vec::with_capacity(spec.components.len());
        let mut acc = 0.0;
        let mut chol = Vec::with_capacity(spec.components.len());
        for c in &spec.components {
            acc += c.weight;
            cumulative.push(acc);
            let m = DMatrix::from_fn(d, d, |i, j| c.covariance[i][j]);
            let l = m
                .cholesky()
                .ok_or_else(|| Error::InvalidSpec("covariance is not positive definite".into()))?;
            chol.push(l.l());
        }
        Ok(Self {
            spec,
            cumulative,
            chol,
        })
    }

    pub fn spec(&self) -> &GaussianMixtureSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn pick_component(&self, u: f64) -> usize {
        // Inverse CDF on the weights; the last nonzero component absorbs rounding.
        let total = *self.cumulative.last().unwrap();
        let target = u * total;
        let k = self.cumulative.partition_point(|&c| c <= target);
        let mut k = k.min(self.cumulative.len() - 1);
        while self.spec.components[k].weight == 0.0 && k > 0 {
            k -= 1;
        }
        k
    }

    /// Draws one point into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let d = self.dim();
        let k = self.pick_component(rng.random::<f64>());
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let comp = &self.spec.components[k];
        let l = &self.chol[k];
        for i in 0..d {
            let mut v = comp.mean[i];
            for j in 0..=i {
                v += l[(i, j)] * z[j];
            }
            out[i] = v;
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let terms: Vec<f64> = self
            .spec
            .components
            .iter()
            .zip(&self.chol)
            .filter(|(c, _)| c.weight > 0.0)
            .map(|(c, l)| {
                let diff = nalgebra::DVector::from_fn(d, |i, _| x[i] - c.mean[i]);
                let sol = l.solve_lower_triangular(&diff).expect("cholesky factor is invertible");
                let log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
                c.weight.ln()
                    - 0.5 * sol.norm_squared()
                    - 0.5 * log_det
                    - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
            })
            .collect();
        crate::numeric::log_sum_exp(&terms)
    }
}

/// Draws `n` i.i.d. points from a mixture. Point `i` uses stream `(0, i)` of
/// `streams`, so the result does not depend on scheduling.
pub fn sample_mixture(spec: &GaussianMixtureSpec, n: usize, streams: &StreamFamily) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let mix = GaussianMixture::new(spec.clone())?;
    let d = mix.dim();
    let mut particles = Array2::zeros((n, d));
    for (i, mut row) in particles.axis_iter_mut(Axis(0)).enumerate() {
        let mut rng = streams.stream(0, i as u64);
        mix.sample_into(&mut rng, row.as_slice_mut().expect("standard layout"));
    }
    ParticleEnsemble::new(particles)
}

/// Law of the parameters: either a Gaussian mixture or an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentLaw {
    Mixture(GaussianMixtureSpec),
    Uniform { low: Vec<f64>, high: Vec<f64> },
}

impl LatentLaw {
    pub fn dim(&self) -> usize {
        match self {
            LatentLaw::Mixture(m) => m.dim(),
            LatentLaw::Uniform { low, .. } => low.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LatentLaw::Mixture(m) => m.validate(),
            LatentLaw::Uniform { low, high } => {
                check_dim(low.len(), high.len())?;
                if low.is_empty() {
                    return Err(Error::InvalidSpec("uniform law has zero dimension".into()));
                }
                if low.iter().zip(high).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
                    return Err(Error::InvalidSpec("uniform law needs finite low < high".into()));
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, n: usize, streams: &StreamFamily) -> Result<ParticleEnsemble> {
        self.validate()?;
        match self {
            LatentLaw::Mixture(m) => sample_mixture(m, n, streams),
            LatentLaw::Uniform { low, high } => {
                if n == 0 {
                    return Err(Error::Empty("sample count"));
                }
                let d = low.len();
                let mut particles = Array2::zeros((n, d));
                for (i, mut row) in particles.axis_iter_mut(Axis(0)).enumerate() {
                    let mut rng = streams.stream(0, i as u64);
                    for j in 0..d {
                        row[j] = low[j] + (high[j] - low[j]) * rng.random::<f64>();
                    }
                }
                ParticleEnsemble::new(particles)
            }
        }
    }
}

/// `N` equally weighted particles in `ℝ^d`. The weights `1/N` are implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    particles: Array2<f64>,
    generation: u64,
}

impl ParticleEnsemble {
    pub fn new(particles: Array2<f64>) -> Result<Self> {
        Self::with_generation(particles, 0)
    }

    pub fn with_generation(particles: Array2<f64>, generation: u64) -> Result<Self> {
        if particles.nrows() == 0 {
            return Err(Error::Empty("particle ensemble"));
        }
        if particles.ncols() == 0 {
            return Err(Error::InvalidSpec("particles have zero dimension".into()));
        }
        if let Some(pos) = particles.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "particle {} has a non-finite coordinate",
                pos / particles.ncols()
            )));
        }
        let particles = particles.as_standard_layout().into_owned();
        Ok(Self {
            particles,
            generation,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.particles.ncols()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn particles(&self) -> ArrayView2<'_, f64> {
        self.particles.view()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.particles.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn into_particles(self) -> Array2<f64> {
        self.particles
    }

    /// Coordinate `j` of every particle.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.particles.column(j).to_vec()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.particles
            .mean_axis(Axis(0))
            .expect("nonempty ensemble")
            .to_vec()
    }

    /// CSV with header `dim0,...,dim{d-1}`; values use Rust's shortest
    /// round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, self.particles.view(), None)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let m = read_matrix_csv(path)?;
        Self::new(m)
    }
}

fn default_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("dim{j}")).collect()
}

pub(crate) fn write_matrix_csv(path: &Path, m: ArrayView2<'_, f64>, header: Option<&[String]>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let owned;
    let header = match header {
        Some(h) => h,
        None => {
            owned = default_header(m.ncols());
            &owned
        }
    };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for row in m.axis_iter(Axis(0)) {
        let mut first = true;
        for v in row.iter() {
            if !first {
                w.write_all(b",").map_err(io)?;
            }
            first = false;
            write!(w, "{v:?}").map_err(io)?;
        }
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub(crate) fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let header = lines
        .next()
        .ok_or_else(|| parse_err("missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let d = header.split(',').count();
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("line {}: bad number `{field}`", lineno + 2)))?;
            data.push(v);
        }
        if data.len() - before != d {
            return Err(parse_err(format!("line {}: expected {d} fields", lineno + 2)));
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, d), data).map_err(|e| parse_err(e.to_string()))
}

/// Isotropic Gaussian kernel density estimate
/// `ρ(y) = (1/M) Σ_j (2πε)^{-d/2} exp(-‖y - c_j‖² / 2ε)`.
///
/// `bandwidth` is the kernel variance `ε`, not its standard deviation.
#[derive(Debug, Clone)]
pub struct KdeDensity {
    centers: Array2<f64>,
    bandwidth: f64,
}

impl KdeDensity {
    pub fn new(centers: Array2<f64>, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidBandwidth(bandwidth));
        }
        if centers.nrows() == 0 {
            return Err(Error::Empty("kde centers"));
        }
        Ok(Self {
            centers: centers.as_standard_layout().into_owned(),
            bandwidth,
        })
    }

    pub fn from_view(centers: ArrayView2<'_, f64>, bandwidth: f64) -> Result<Self> {
        Self::new(centers.to_owned(), bandwidth)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn centers(&self) -> ArrayView2<'_, f64> {
        self.centers.view()
    }

    fn log_norm(&self) -> f64 {
        -0.5 * self.dim() as f64 * (2.0 * std::f64::consts::PI * self.bandwidth).ln()
            - (self.centers.nrows() as f64).ln()
    }

    /// Squared distances from `y` to every center and their minimum.
    fn sq_dists(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let d = self.dim();
        let flat = self.centers.as_slice().expect("standard layout");
        let mut min = f64::INFINITY;
        let dists: Vec<f64> = flat
            .chunks_exact(d)
            .map(|c| {
                let s = sq_dist(y, c);
                min = min.min(s);
                s
            })
            .collect();
        (dists, min)
    }

    /// `log ρ(y)`, stable far outside the data.
    pub fn log_eval(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), y.len())?;
        let (dists, min) = self.sq_dists(y);
        let inv = 0.5 / self.bandwidth;
        let s: f64 = dists.iter().map(|&s| (-(s - min) * inv).exp()).sum();
        Ok(self.log_norm() - min * inv + s.ln())
    }

    /// `ρ(y)`. May underflow to zero extremely far from every center; use
    /// [`KdeDensity::log_eval`] there.
    pub fn eval(&self, y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), y.len())?;
        let (dists, _) = self.sq_dists(y);
        let inv = 0.5 / self.bandwidth;
        let s: f64 = dists.iter().map(|&s| (-s * inv).exp()).sum();
        Ok(s * self.log_norm().exp())
    }

    /// `∇_y log ρ(y)`: a softmax-weighted average of `(c_j - y)/ε`.
    pub fn grad_log(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; y.len()];
        self.grad_log_into(y, &mut out)?;
        Ok(out)
    }

    pub fn grad_log_into(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), y.len())?;
        check_dim(self.dim(), out.len())?;
        let d = self.dim();
        let (dists, min) = self.sq_dists(y);
        let inv = 0.5 / self.bandwidth;
        let flat = self.centers.as_slice().expect("standard layout");
        let mut total = 0.0;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, &s) in flat.chunks_exact(d).zip(&dists) {
            let w = (-(s - min) * inv).exp();
            total += w;
            for k in 0..d {
                out[k] += w * c[k];
            }
        }
        for k in 0..d {
            out[k] = (out[k] / total - y[k]) / self.bandwidth;
        }
        Ok(())
    }
}

/// Rule-of-thumb KDE variance for 1D samples:
/// `ε = (0.9 · min(std, IQR/1.34) · n^{-1/5})²`.
///
/// `std` is the population standard deviation and the quartiles use linear
/// interpolation between order statistics.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    Ok(silverman_width(samples)?.powi(2))
}

/// The rule-of-thumb kernel width (standard deviation units).
pub fn silverman_width(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateData("need at least two samples".into()));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("bandwidth sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[n - 1] {
        return Err(Error::DegenerateData("all samples are identical".into()));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let std = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let iqr = sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

/// Evaluate a 1D KDE over a grid, used for plot data.
pub fn kde_curve_1d(samples: ArrayView1<'_, f64>, bandwidth: f64, grid: &[f64]) -> Result<Vec<f64>> {
    let centers = samples.to_owned().insert_axis(Axis(1));
    let kde = KdeDensity::new(centers, bandwidth)?;
    grid.iter().map(|&x| kde.eval(&[x])).collect()
}
