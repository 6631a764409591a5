//! Discrepancies between sample clouds and the data-space gradients of their
//! first variations.
//!
//! All double sums include the diagonal. The loss used by the flow for
//! [`DiscrepancySpec::Energy`] is `mmd_sq_value` with the energy kernel, which
//! equals half the squared energy distance.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numeric::{exp_fast, norm, sq_dist, CompensatedSum};

/// Dimension from which pairwise distances go through a matrix product.
const GEMM_MIN_DIM: usize = 32;
/// Target number of entries in one block of a pairwise matrix.
const BLOCK_ENTRIES: usize = 1 << 21;

/// An empirical measure `(1/N) Σ δ_{y_i}` in data space.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    points: Array2<f64>,
}

impl SampleCloud {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Empty("sample cloud"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("sample cloud entry".into()));
        }
        Ok(Self {
            points: points.as_standard_layout().into_owned(),
        })
    }

    pub fn from_view(points: ArrayView2<'_, f64>) -> Result<Self> {
        Self::new(points.to_owned())
    }

    /// A cloud of scalars.
    pub fn from_1d(values: &[f64]) -> Result<Self> {
        Self::new(Array1::from(values.to_vec()).insert_axis(Axis(1)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(Error::Empty("sample cloud"))?;
        let mut flat = Vec::with_capacity(rows.len() * d);
        for r in rows {
            check_dim(d, r.len())?;
            flat.extend_from_slice(r);
        }
        Self::new(Array2::from_shape_vec((rows.len(), d), flat).expect("shape checked"))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.points.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    /// The sub-cloud with the given row indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Self::new(self.points.select(Axis(0), rows))
    }

    /// Values of a one-dimensional cloud.
    pub fn values_1d(&self) -> Result<&[f64]> {
        check_dim(1, self.dim())?;
        Ok(self.points.as_slice().expect("standard layout"))
    }
}

/// A symmetric positive-definite kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    /// `k(x, y) = -‖x - y‖ + ‖x‖ + ‖y‖`.
    Energy,
    /// `k(x, y) = exp(-‖x - y‖² / 2h²)` with width `h`.
    Gaussian { bandwidth: f64 },
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Energy => Ok(()),
            Kernel::Gaussian { bandwidth } if bandwidth > 0.0 && bandwidth.is_finite() => Ok(()),
            Kernel::Gaussian { bandwidth } => Err(Error::InvalidBandwidth(bandwidth)),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            Kernel::Energy => -sq_dist(x, y).sqrt() + norm(x) + norm(y),
            Kernel::Gaussian { bandwidth } => (-sq_dist(x, y) / (2.0 * bandwidth * bandwidth)).exp(),
        }
    }

    /// `out += scale · ∇_y k(y, z)`, taking `∇‖·‖ = 0` at the origin.
    pub fn grad_add(&self, y: &[f64], z: &[f64], scale: f64, out: &mut [f64]) {
        match *self {
            Kernel::Energy => {
                let r = sq_dist(y, z).sqrt();
                if r > 0.0 {
                    for k in 0..y.len() {
                        out[k] -= scale * (y[k] - z[k]) / r;
                    }
                }
                let n = norm(y);
                if n > 0.0 {
                    for k in 0..y.len() {
                        out[k] += scale * y[k] / n;
                    }
                }
            }
            Kernel::Gaussian { bandwidth } => {
                let h2 = bandwidth * bandwidth;
                let kv = (-sq_dist(y, z) / (2.0 * h2)).exp();
                for k in 0..y.len() {
                    out[k] -= scale * kv * (y[k] - z[k]) / h2;
                }
            }
        }
    }

    /// Translation-invariant part `k̃(s)` of the kernel as a function of the
    /// squared distance `s`. The norm terms of the energy kernel cancel in
    /// every discrepancy, so they are dropped here.
    #[inline]
    fn reduced(&self, s: f64) -> f64 {
        match *self {
            Kernel::Energy => -s.sqrt(),
            Kernel::Gaussian { bandwidth } => (-s / (2.0 * bandwidth * bandwidth)).exp(),
        }
    }

    /// `φ(s)` such that `∇_y k̃(‖y - x‖²) = φ · (y - x)`.
    #[inline]
    fn reduced_grad_factor(&self, s: f64) -> f64 {
        match *self {
            Kernel::Energy => {
                if s > 0.0 {
                    -1.0 / s.sqrt()
                } else {
                    0.0
                }
            }
            Kernel::Gaussian { bandwidth } => {
                let h2 = bandwidth * bandwidth;
                -(-s / (2.0 * h2)).exp() / h2
            }
        }
    }
}

/// Which discrepancy `D(ρ_y, ρ_y^δ)` drives the flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", try_from = "RawSpec")]
pub enum DiscrepancySpec {
    /// MMD with the energy kernel; reported as the energy distance.
    Energy,
    Mmd { kernel: Kernel },
    /// `KL(ρ_y ‖ ρ_y^δ)` between Gaussian KDEs sharing variance `bandwidth`.
    /// Left unset, it is filled in from the observed data.
    Kl {
        #[serde(default)]
        bandwidth: Option<f64>,
    },
}

/// Flat form used for parsing, so that stray keys are rejected for every kind.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    kind: String,
    #[serde(default)]
    kernel: Option<Kernel>,
    #[serde(default)]
    bandwidth: Option<f64>,
}

impl TryFrom<RawSpec> for DiscrepancySpec {
    type Error = String;

    fn try_from(raw: RawSpec) -> std::result::Result<Self, String> {
        match (raw.kind.as_str(), raw.kernel, raw.bandwidth) {
            ("energy", None, None) => Ok(DiscrepancySpec::Energy),
            ("mmd", Some(kernel), None) => Ok(DiscrepancySpec::Mmd { kernel }),
            ("kl", None, bandwidth) => Ok(DiscrepancySpec::Kl { bandwidth }),
            ("energy" | "mmd" | "kl", _, _) => Err(format!("unexpected or missing fields for discrepancy `{}`", raw.kind)),
            (other, _, _) => Err(format!("unknown discrepancy kind `{other}`")),
        }
    }
}

impl DiscrepancySpec {
    pub fn name(&self) -> &'static str {
        match self {
            DiscrepancySpec::Energy => "energy",
            DiscrepancySpec::Mmd { .. } => "mmd",
            DiscrepancySpec::Kl { .. } => "kl",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DiscrepancySpec::Energy => Ok(()),
            DiscrepancySpec::Mmd { kernel } => kernel.validate(),
            DiscrepancySpec::Kl { bandwidth: None } => Ok(()),
            DiscrepancySpec::Kl { bandwidth: Some(e) } if e > 0.0 && e.is_finite() => Ok(()),
            DiscrepancySpec::Kl { bandwidth: Some(e) } => Err(Error::InvalidBandwidth(e)),
        }
    }

    pub fn kernel(&self) -> Option<Kernel> {
        match *self {
            DiscrepancySpec::Energy => Some(Kernel::Energy),
            DiscrepancySpec::Mmd { kernel } => Some(kernel),
            DiscrepancySpec::Kl { .. } => None,
        }
    }

    /// Binds the observed cloud and precomputes what does not change between
    /// iterations.
    pub fn prepare(&self, observed: SampleCloud) -> Result<PreparedDiscrepancy> {
        self.validate()?;
        if let DiscrepancySpec::Kl { bandwidth: None } = self {
            return Err(Error::InvalidSpec("kl bandwidth is unset".into()));
        }
        let sorted = if observed.dim() == 1 && matches!(self, DiscrepancySpec::Energy | DiscrepancySpec::Kl { .. }) {
            let mut v = observed.values_1d()?.to_vec();
            v.sort_by(f64::total_cmp);
            Some(SortedValues::new(v))
        } else {
            None
        };
        Ok(PreparedDiscrepancy {
            spec: *self,
            norms: row_sq_norms(observed.points()),
            observed,
            sorted,
            self_sum: OnceLock::new(),
            table: OnceLock::new(),
            gram: OnceLock::new(),
        })
    }
}

/// Loss value and per-point data-space gradients `∇_y δD/δρ_y(y_i)`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub gradients: Array2<f64>,
}

/// A discrepancy bound to a fixed observed cloud.
#[derive(Debug)]
pub struct PreparedDiscrepancy {
    spec: DiscrepancySpec,
    observed: SampleCloud,
    norms: Vec<f64>,
    sorted: Option<SortedValues>,
    self_sum: OnceLock<f64>,
    table: OnceLock<TabulatedKde>,
    /// Kernel matrix of the observed cloud, built for minibatch subsets.
    gram: OnceLock<Option<Array2<f64>>>,
}

/// Largest observed cloud whose kernel matrix is kept for subsets.
const GRAM_MAX_POINTS: usize = 4096;

impl PreparedDiscrepancy {
    pub fn spec(&self) -> &DiscrepancySpec {
        &self.spec
    }

    pub fn observed(&self) -> &SampleCloud {
        &self.observed
    }

    /// The same discrepancy bound to the observed rows `rows`. For kernel
    /// losses the constant observed-observed sum is read off a cached kernel
    /// matrix when the cloud is small enough.
    pub fn subset(&self, rows: &[usize]) -> Result<PreparedDiscrepancy> {
        let batch = self.spec.prepare(self.observed.select(rows)?)?;
        if let Some(kernel) = self.spec.kernel() {
            let gram = self.gram.get_or_init(|| {
                (self.observed.len() <= GRAM_MAX_POINTS).then(|| {
                    let z = self.observed.points();
                    sq_dist_block(z, &self.norms, z, &self.norms).mapv(|s| kernel.reduced(s))
                })
            });
            if let Some(g) = gram {
                let mut acc = CompensatedSum::new();
                for &i in rows {
                    let row = g.row(i);
                    rows.iter().for_each(|&j| acc.add(row[j]));
                }
                let _ = batch.self_sum.set(acc.value());
            }
        }
        Ok(batch)
    }

    /// Loss `D(ρ_y, ρ_y^δ)` and its gradient field at every predicted point.
    pub fn evaluate(&self, predicted: &SampleCloud) -> Result<Evaluation> {
        check_dim(self.observed.dim(), predicted.dim())?;
        let eval = match (self.spec, &self.sorted) {
            (DiscrepancySpec::Energy, Some(sorted)) => energy_1d(predicted.values_1d()?, sorted),
            (DiscrepancySpec::Kl { bandwidth: Some(eps) }, Some(sorted)) => {
                let table = self.table.get_or_init(|| TabulatedKde::new(&sorted.values, eps));
                kl_1d(predicted.values_1d()?, &sorted.values, table, eps)
            }
            (DiscrepancySpec::Kl { bandwidth: Some(eps) }, _) => self.kl_batch(predicted, eps),
            (spec, _) => self.kernel_batch(predicted, spec.kernel().expect("kernel discrepancy")),
        };
        if !eval.loss.is_finite() || eval.gradients.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("{} discrepancy evaluation", self.spec.name())));
        }
        Ok(eval)
    }

    fn kernel_batch(&self, predicted: &SampleCloud, kernel: Kernel) -> Evaluation {
        let (n, m, d) = (predicted.len(), self.observed.len(), predicted.dim());
        let p = predicted.points();
        let z = self.observed.points();
        let p_norms = row_sq_norms(p);
        let zz = *self
            .self_sum
            .get_or_init(|| pair_kernel_sum(z, &self.norms, z, &self.norms, kernel));
        let mut pp = CompensatedSum::new();
        let mut pz = CompensatedSum::new();
        let mut grads = Array2::zeros((n, d));
        let block = (BLOCK_ENTRIES / (n + m)).max(1);
        let (inv_n, inv_m) = (1.0 / n as f64, 1.0 / m as f64);
        for start in (0..n).step_by(block) {
            let end = (start + block).min(n);
            let pb = p.slice(s![start..end, ..]);
            let mut wpp = sq_dist_block(pb, &p_norms[start..end], p, &p_norms);
            let mut wpz = sq_dist_block(pb, &p_norms[start..end], z, &self.norms);
            let mut row_w = vec![0.0; end - start];
            for (r, mut row) in wpp.rows_mut().into_iter().enumerate() {
                for w in row.iter_mut() {
                    pp.add(kernel.reduced(*w));
                    *w = inv_n * kernel.reduced_grad_factor(*w);
                    row_w[r] += *w;
                }
            }
            for (r, mut row) in wpz.rows_mut().into_iter().enumerate() {
                for w in row.iter_mut() {
                    pz.add(kernel.reduced(*w));
                    *w = -inv_m * kernel.reduced_grad_factor(*w);
                    row_w[r] += *w;
                }
            }
            // row i: Σ_k w_ik (y_i - x_k)
            let mut g = wpp.dot(&p);
            g += &wpz.dot(&z);
            let mut gb = grads.slice_mut(s![start..end, ..]);
            for (r, (mut out, acc)) in gb.rows_mut().into_iter().zip(g.rows()).enumerate() {
                for k in 0..d {
                    out[k] = row_w[r] * pb[[r, k]] - acc[k];
                }
            }
        }
        let loss = 0.5 * inv_n * inv_n * pp.value() + 0.5 * inv_m * inv_m * zz - inv_n * inv_m * pz.value();
        Evaluation { loss, gradients: grads }
    }

    fn kl_batch(&self, predicted: &SampleCloud, eps: f64) -> Evaluation {
        let (n, d) = (predicted.len(), predicted.dim());
        let p = predicted.points();
        let z = self.observed.points();
        let p_norms = row_sq_norms(p);
        let mut grads = Array2::zeros((n, d));
        let mut loss = CompensatedSum::new();
        let block = (BLOCK_ENTRIES / (n + self.observed.len())).max(1);
        for start in (0..n).step_by(block) {
            let end = (start + block).min(n);
            let pb = p.slice(s![start..end, ..]);
            let (log_p, grad_p) = kde_log_and_grad(pb, &p_norms[start..end], p, &p_norms, eps);
            let (log_z, grad_z) = kde_log_and_grad(pb, &p_norms[start..end], z, &self.norms, eps);
            for r in 0..end - start {
                loss.add(log_p[r] - log_z[r]);
            }
            grads.slice_mut(s![start..end, ..]).assign(&(grad_p - grad_z));
        }
        Evaluation {
            loss: loss.value() / n as f64,
            gradients: grads,
        }
    }
}

/// Kernel terms more than `e^-KL_WINDOW` below the largest one are dropped
/// by the 1D path; with at most a few million centers the relative error of
/// each density stays below `1e-11`.
const KL_WINDOW: f64 = 40.0;

/// `log ρ̂(x)` (up to the normalizing constant), `∂ log ρ̂` and `∂² log ρ̂`
/// for a 1D Gaussian KDE over sorted `centers`, summing only the centers
/// inside the window around `x`.
fn kde_1d_at(x: f64, centers: &[f64], eps: f64) -> [f64; 3] {
    let m = centers.len();
    let k = centers.partition_point(|&c| c < x);
    let mut near = f64::INFINITY;
    if k < m {
        near = centers[k] - x;
    }
    if k > 0 {
        near = near.min(x - centers[k - 1]);
    }
    let base = near * near;
    let reach = (base + 2.0 * eps * KL_WINDOW).sqrt();
    let lo = centers[..k].partition_point(|&c| c < x - reach);
    let hi = k + centers[k..].partition_point(|&c| c <= x + reach);
    let inv = 0.5 / eps;
    // Independent lanes so that the loop pipelines and vectorizes.
    const LANES: usize = 8;
    let (mut s0, mut s1, mut s2) = ([0.0; LANES], [0.0; LANES], [0.0; LANES]);
    let window = &centers[lo..hi];
    let mut chunks = window.chunks_exact(LANES);
    for chunk in &mut chunks {
        for l in 0..LANES {
            let d = chunk[l] - x;
            let w = exp_fast((base - d * d) * inv);
            s0[l] += w;
            s1[l] += w * d;
            s2[l] += w * d * d;
        }
    }
    for (l, &c) in chunks.remainder().iter().enumerate() {
        let d = c - x;
        let w = exp_fast((base - d * d) * inv);
        s0[l] += w;
        s1[l] += w * d;
        s2[l] += w * d * d;
    }
    let s: f64 = s0.iter().sum();
    let m1 = s1.iter().sum::<f64>() / s;
    let m2 = s2.iter().sum::<f64>() / s;
    [s.ln() - base * inv, m1 / eps, (m2 - m1 * m1) / (eps * eps) - 1.0 / eps]
}

/// `log ρ̂` of a fixed 1D KDE and its first derivative, tabulated with their
/// derivatives on a grid of spacing `√ε / 64` and read back by cubic Hermite
/// interpolation (absolute error of order `1e-10`). Outside the grid the
/// exact window sum is used.
#[derive(Debug)]
struct TabulatedKde {
    x0: f64,
    h: f64,
    nodes: Vec<[f64; 3]>,
}

impl TabulatedKde {
    const STEPS_PER_WIDTH: f64 = 64.0;

    fn new(centers: &[f64], eps: f64) -> Self {
        let h = eps.sqrt() / Self::STEPS_PER_WIDTH;
        let pad = 4.0 * eps.sqrt();
        let x0 = centers[0] - pad;
        let count = ((centers[centers.len() - 1] + pad - x0) / h).ceil() as usize + 2;
        let nodes = (0..count).into_par_iter().map(|i| kde_1d_at(x0 + i as f64 * h, centers, eps)).collect();
        Self { x0, h, nodes }
    }

    /// `(log ρ̂, ∂ log ρ̂)` at `x`, or `None` outside the grid.
    fn eval(&self, x: f64) -> Option<(f64, f64)> {
        let u = (x - self.x0) / self.h;
        if !(u >= 0.0) || u >= (self.nodes.len() - 1) as f64 {
            return None;
        }
        let i = u as usize;
        let t = u - i as f64;
        let (a, b) = (self.nodes[i], self.nodes[i + 1]);
        let h = self.h;
        let (t2, t3) = (t * t, t * t * t);
        let hermite = |f0: f64, d0: f64, f1: f64, d1: f64| {
            (2.0 * t3 - 3.0 * t2 + 1.0) * f0 + (t3 - 2.0 * t2 + t) * h * d0 + (-2.0 * t3 + 3.0 * t2) * f1 + (t3 - t2) * h * d1
        };
        Some((hermite(a[0], a[1], b[0], b[1]), hermite(a[1], a[2], b[1], b[2])))
    }
}

/// `KL(ρ̂_y ‖ ρ̂_δ)` and its gradients in one dimension; both KDEs share the
/// normalizing constant, which therefore cancels except for the counts.
fn kl_1d(pred: &[f64], observed_sorted: &[f64], table: &TabulatedKde, eps: f64) -> Evaluation {
    let n = pred.len();
    let mut own = pred.to_vec();
    own.sort_by(f64::total_cmp);
    let shift = (observed_sorted.len() as f64 / n as f64).ln();
    let rows: Vec<(f64, f64)> = pred
        .par_iter()
        .map(|&x| {
            let [lp, gp, _] = kde_1d_at(x, &own, eps);
            let (lz, gz) = table.eval(x).unwrap_or_else(|| {
                let [l, g, _] = kde_1d_at(x, observed_sorted, eps);
                (l, g)
            });
            (lp - lz + shift, gp - gz)
        })
        .collect();
    let mut loss = CompensatedSum::new();
    let mut grads = Array2::zeros((n, 1));
    for (i, (l, g)) in rows.into_iter().enumerate() {
        loss.add(l);
        grads[[i, 0]] = g;
    }
    Evaluation {
        loss: loss.value() / n as f64,
        gradients: grads,
    }
}

/// Sorted scalars with prefix sums.
#[derive(Debug)]
struct SortedValues {
    values: Vec<f64>,
    prefix: Vec<f64>,
    pair_sum: f64,
}

impl SortedValues {
    fn new(values: Vec<f64>) -> Self {
        let mut prefix = Vec::with_capacity(values.len() + 1);
        let mut acc = CompensatedSum::new();
        prefix.push(0.0);
        for &v in &values {
            acc.add(v);
            prefix.push(acc.value());
        }
        let pair_sum = sorted_pair_abs_sum(&values);
        Self { values, prefix, pair_sum }
    }

    /// `Σ_j |x - v_j|` together with `Σ_j sign(x - v_j)`.
    fn abs_and_sign_sum(&self, x: f64) -> (f64, f64) {
        let m = self.values.len();
        let lo = self.values.partition_point(|&v| v < x);
        let hi = self.values.partition_point(|&v| v <= x);
        let total = self.prefix[m];
        let abs = (x * lo as f64 - self.prefix[lo]) + ((total - self.prefix[hi]) - x * (m - hi) as f64);
        (abs, lo as f64 - (m - hi) as f64)
    }
}

/// `Σ_i Σ_j |v_i - v_j|` over the full square for sorted `v`.
fn sorted_pair_abs_sum(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mut acc = CompensatedSum::new();
    for (k, &v) in sorted.iter().enumerate() {
        acc.add(v * (2.0 * k as f64 - n + 1.0));
    }
    2.0 * acc.value()
}

fn energy_1d(pred: &[f64], target: &SortedValues) -> Evaluation {
    let (n, m) = (pred.len() as f64, target.values.len() as f64);
    let mut sorted = pred.to_vec();
    sorted.sort_by(f64::total_cmp);
    let own = SortedValues::new(sorted);
    let mut cross = CompensatedSum::new();
    let mut grads = Array2::zeros((pred.len(), 1));
    for (i, &y) in pred.iter().enumerate() {
        let (_, sign_p) = own.abs_and_sign_sum(y);
        let (abs_z, sign_z) = target.abs_and_sign_sum(y);
        cross.add(abs_z);
        grads[[i, 0]] = -sign_p / n + sign_z / m;
    }
    let loss = -own.pair_sum / (2.0 * n * n) - target.pair_sum / (2.0 * m * m) + cross.value() / (n * m);
    Evaluation { loss, gradients: grads }
}

pub(crate) fn row_sq_norms(a: ArrayView2<'_, f64>) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Squared distances between the rows of `a` and the rows of `b`.
pub(crate) fn sq_dist_block(a: ArrayView2<'_, f64>, a_norms: &[f64], b: ArrayView2<'_, f64>, b_norms: &[f64]) -> Array2<f64> {
    let d = a.ncols();
    if d >= GEMM_MIN_DIM {
        let mut g = a.dot(&b.t());
        for (i, mut row) in g.rows_mut().into_iter().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let scale = a_norms[i] + b_norms[j];
                let s = scale - 2.0 * *v;
                // Cancellation leaves only absolute accuracy ~ scale·ε; redo
                // nearly coincident pairs directly.
                *v = if s <= 1e-8 * scale {
                    sq_dist_view(a.row(i), b.row(j))
                } else {
                    s
                };
            }
        }
        g
    } else {
        let mut out = Array2::zeros((a.nrows(), b.nrows()));
        for (i, ai) in a.rows().into_iter().enumerate() {
            let ai = ai.as_slice().expect("contiguous rows");
            for (j, bj) in b.rows().into_iter().enumerate() {
                out[[i, j]] = sq_dist(ai, bj.as_slice().expect("contiguous rows"));
            }
        }
        out
    }
}

fn sq_dist_view(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `Σ_i Σ_j k̃(‖a_i - b_j‖²)`.
fn pair_kernel_sum(a: ArrayView2<'_, f64>, a_norms: &[f64], b: ArrayView2<'_, f64>, b_norms: &[f64], kernel: Kernel) -> f64 {
    let mut acc = CompensatedSum::new();
    let block = (BLOCK_ENTRIES / b.nrows()).max(1);
    for start in (0..a.nrows()).step_by(block) {
        let end = (start + block).min(a.nrows());
        let dists = sq_dist_block(a.slice(s![start..end, ..]), &a_norms[start..end], b, b_norms);
        dists.iter().for_each(|&s| acc.add(kernel.reduced(s)));
    }
    acc.value()
}

/// Log density and its gradient for a Gaussian KDE with centers `c`,
/// evaluated at every row of `q`.
fn kde_log_and_grad(
    q: ArrayView2<'_, f64>,
    q_norms: &[f64],
    c: ArrayView2<'_, f64>,
    c_norms: &[f64],
    eps: f64,
) -> (Vec<f64>, Array2<f64>) {
    let d = q.ncols();
    let mut w = sq_dist_block(q, q_norms, c, c_norms);
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * eps).ln() - (c.nrows() as f64).ln();
    let inv = 0.5 / eps;
    let mut log = Vec::with_capacity(q.nrows());
    let mut totals = Vec::with_capacity(q.nrows());
    for mut row in w.rows_mut() {
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (-(*v - min) * inv).exp();
            total += *v;
        }
        log.push(log_norm - min * inv + total.ln());
        totals.push(total);
    }
    let mut grad = w.dot(&c);
    for (r, mut row) in grad.rows_mut().into_iter().enumerate() {
        for k in 0..d {
            row[k] = (row[k] / totals[r] - q[[r, k]]) / eps;
        }
    }
    (log, grad)
}

fn check_pair(mu: &SampleCloud, nu: &SampleCloud) -> Result<()> {
    check_dim(mu.dim(), nu.dim())
}

/// `(1/NM) Σ_i Σ_j ‖a_i - b_j‖`.
fn mean_pair_distance(a: &SampleCloud, b: &SampleCloud) -> f64 {
    let sum = if a.dim() == 1 {
        let mut sorted = b.values_1d().expect("1d").to_vec();
        sorted.sort_by(f64::total_cmp);
        let sv = SortedValues::new(sorted);
        let mut acc = CompensatedSum::new();
        for &x in a.values_1d().expect("1d") {
            acc.add(sv.abs_and_sign_sum(x).0);
        }
        acc.value()
    } else {
        let an = row_sq_norms(a.points());
        let bn = row_sq_norms(b.points());
        -pair_kernel_sum(a.points(), &an, b.points(), &bn, Kernel::Energy)
    };
    sum / (a.len() as f64 * b.len() as f64)
}

/// `2E‖x - y‖ - E‖x - x̃‖ - E‖y - ỹ‖`, clamped at zero.
pub fn energy_distance_sq(mu: &SampleCloud, nu: &SampleCloud) -> Result<f64> {
    check_pair(mu, nu)?;
    let v = 2.0 * mean_pair_distance(mu, nu) - mean_pair_distance(mu, mu) - mean_pair_distance(nu, nu);
    Ok(v.max(0.0))
}

/// Energy distance `sqrt(max(0, 2E‖x - y‖ - E‖x - x̃‖ - E‖y - ỹ‖))`.
pub fn energy_distance(mu: &SampleCloud, nu: &SampleCloud) -> Result<f64> {
    Ok(energy_distance_sq(mu, nu)?.sqrt())
}

/// Half the squared MMD:
/// `(1/2N²) ΣΣ k(y_i, y_i') + (1/2M²) ΣΣ k(y*_j, y*_j') - (1/NM) ΣΣ k(y_i, y*_j)`.
pub fn mmd_sq_value(mu: &SampleCloud, nu: &SampleCloud, kernel: &Kernel) -> Result<f64> {
    check_pair(mu, nu)?;
    kernel.validate()?;
    let (n, m) = (mu.len() as f64, nu.len() as f64);
    let (mn, nn) = (row_sq_norms(mu.points()), row_sq_norms(nu.points()));
    let xx = pair_kernel_sum(mu.points(), &mn, mu.points(), &mn, *kernel);
    let yy = pair_kernel_sum(nu.points(), &nn, nu.points(), &nn, *kernel);
    let xy = pair_kernel_sum(mu.points(), &mn, nu.points(), &nn, *kernel);
    Ok(xx / (2.0 * n * n) + yy / (2.0 * m * m) - xy / (n * m))
}

/// `(1/N) Σ ∇_y k(y, y_i) - (1/M) Σ ∇_y k(y, y*_j)`.
pub fn mmd_first_variation_grad(y: &[f64], mu: &SampleCloud, nu: &SampleCloud, kernel: &Kernel) -> Result<Vec<f64>> {
    check_pair(mu, nu)?;
    check_dim(mu.dim(), y.len())?;
    kernel.validate()?;
    let mut out = vec![0.0; y.len()];
    let (wn, wm) = (1.0 / mu.len() as f64, 1.0 / nu.len() as f64);
    for i in 0..mu.len() {
        kernel.grad_add(y, mu.point(i), wn, &mut out);
    }
    for j in 0..nu.len() {
        kernel.grad_add(y, nu.point(j), -wm, &mut out);
    }
    Ok(out)
}

fn kde_pair(mu: &SampleCloud, nu: &SampleCloud, bandwidth: f64) -> Result<(crate::ensemble::KdeDensity, crate::ensemble::KdeDensity)> {
    check_pair(mu, nu)?;
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidBandwidth(bandwidth));
    }
    Ok((
        crate::ensemble::KdeDensity::from_view(mu.points(), bandwidth)?,
        crate::ensemble::KdeDensity::from_view(nu.points(), bandwidth)?,
    ))
}

/// `(1/N) Σ_i log(ρ̂_μ(y_i) / ρ̂_ν(y_i))` over the points `y_i` of `μ`, with
/// both KDEs using variance `bandwidth`.
pub fn kl_value(mu: &SampleCloud, nu: &SampleCloud, bandwidth: f64) -> Result<f64> {
    let (kmu, knu) = kde_pair(mu, nu, bandwidth)?;
    let mut acc = CompensatedSum::new();
    for i in 0..mu.len() {
        let y = mu.point(i);
        acc.add(kmu.log_eval(y)? - knu.log_eval(y)?);
    }
    Ok(acc.value() / mu.len() as f64)
}

/// `∇_y log ρ̂_μ(y) - ∇_y log ρ̂_ν(y)`.
pub fn kl_first_variation_grad(y: &[f64], mu: &SampleCloud, nu: &SampleCloud, bandwidth: f64) -> Result<Vec<f64>> {
    let (kmu, knu) = kde_pair(mu, nu, bandwidth)?;
    let a = kmu.grad_log(y)?;
    let b = knu.grad_log(y)?;
    Ok(a.iter().zip(&b).map(|(a, b)| a - b).collect())
}

/// Smallest eigenvalue of the kernel Gram matrix on `cloud`.
pub fn gram_min_eigenvalue(kernel: &Kernel, cloud: &SampleCloud) -> Result<f64> {
    kernel.validate()?;
    let n = cloud.len();
    let gram = DMatrix::from_fn(n, n, |i, j| kernel.eval(cloud.point(i), cloud.point(j)));
    Ok(SymmetricEigen::new(gram).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Rejects kernels whose Gram matrix on `cloud` has an eigenvalue below
/// `-1e-10`.
pub fn check_positive_definite(kernel: &Kernel, cloud: &SampleCloud) -> Result<()> {
    let min = gram_min_eigenvalue(kernel, cloud)?;
    if min < -1e-10 {
        return Err(Error::InvalidSpec(format!("kernel Gram matrix has eigenvalue {min}")));
    }
    Ok(())
}
