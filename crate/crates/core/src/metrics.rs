//! Evaluation metrics: empirical W₂ distances and PCA projections.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;

use crate::error::{check_dim, Error, Result};
use crate::numeric::CompensatedSum;
use crate::rng::{Purpose, StreamFamily};

pub use crate::discrepancy::{energy_distance, energy_distance_sq};

/// Exact W₂ between two empirical measures on the line.
///
/// Equal sizes pair sorted samples. Unequal sizes use the monotone quantile
/// coupling, which is still the exact optimal plan in 1D.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("w2 sample list"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("w2 sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let mut acc = CompensatedSum::new();
    if n == m {
        for (x, y) in a.iter().zip(&b) {
            acc.add((x - y) * (x - y));
        }
        return Ok((acc.value() / n as f64).sqrt());
    }
    // Each a_i carries m units of mass and each b_j carries n units.
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (m, n);
    while i < n && j < m {
        let t = ra.min(rb);
        acc.add(t as f64 * (a[i] - b[j]).powi(2));
        ra -= t;
        rb -= t;
        if ra == 0 {
            i += 1;
            ra = m;
        }
        if rb == 0 {
            j += 1;
            rb = n;
        }
    }
    Ok((acc.value() / (n * m) as f64).sqrt())
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, O(n³)). Returns `assignment[row] = column`.
pub fn linear_assignment(cost: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    check_dim(n, cost.ncols())?;
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // 1-based arrays; index 0 is the virtual column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Exact W₂ between two equal-size, equally weighted point clouds:
/// `sqrt((1/N) min_π Σ ‖a_i - b_π(i)‖²)`.
pub fn w2_assignment(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    let n = a.nrows();
    if n == 0 {
        return Err(Error::Empty("w2 cloud"));
    }
    check_dim(n, b.nrows())?;
    check_dim(a.ncols(), b.ncols())?;
    let mut cost = Array2::zeros((n, n));
    for (i, ai) in a.rows().into_iter().enumerate() {
        for (j, bj) in b.rows().into_iter().enumerate() {
            cost[[i, j]] = ai.iter().zip(bj.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
    }
    let assignment = linear_assignment(cost.view())?;
    let mut acc = CompensatedSum::new();
    for (i, &j) in assignment.iter().enumerate() {
        acc.add(cost[[i, j]]);
    }
    Ok((acc.value() / n as f64).sqrt())
}

/// W₂ between two ensembles of any sizes. In 1D this is exact; otherwise the
/// larger cloud is subsampled without replacement (seeded) to the smaller
/// size before solving the assignment problem.
pub fn w2_ensembles(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, seed: u64) -> Result<f64> {
    check_dim(a.ncols(), b.ncols())?;
    if a.ncols() == 1 {
        let av: Vec<f64> = a.column(0).to_vec();
        let bv: Vec<f64> = b.column(0).to_vec();
        return w2_1d(&av, &bv);
    }
    let (na, nb) = (a.nrows(), b.nrows());
    if na == nb {
        return w2_assignment(a, b);
    }
    let mut rng = StreamFamily::new(seed, Purpose::Resample).stream(0, 0);
    let (small, large) = if na < nb { (a, b) } else { (b, a) };
    let mut rows = sample(&mut rng, large.nrows(), small.nrows()).into_vec();
    rows.sort_unstable();
    let sub = large.select(Axis(0), &rows);
    w2_assignment(small, sub.view())
}

/// A two-component principal basis fit on a reference cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Array1<f64>,
    /// 2 × d, orthonormal rows.
    pub components: Array2<f64>,
    /// Variances of the reference projections, descending.
    pub explained_variance: [f64; 2],
}

impl PcaBasis {
    /// Coordinates `(β₁, β₂)` of every row of `cloud`.
    pub fn project(&self, cloud: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(self.mean.len(), cloud.ncols())?;
        let centered = &cloud - &self.mean.view().insert_axis(Axis(0));
        Ok(centered.dot(&self.components.t()))
    }
}

/// Dimension up to which PCA diagonalizes the covariance directly.
const DIRECT_PCA_MAX_DIM: usize = 256;

/// Fits the top-2 principal basis on `reference` and projects it and every
/// cloud in `others` onto it.
pub fn pca_fit_project(reference: ArrayView2<'_, f64>, others: &[ArrayView2<'_, f64>]) -> Result<(PcaBasis, Vec<Array2<f64>>)> {
    let (n, d) = reference.dim();
    if n < 3 {
        return Err(Error::DegenerateData(format!("pca needs at least 3 reference points, got {n}")));
    }
    if d < 2 {
        return Err(Error::DegenerateData("pca needs at least 2 dimensions".into()));
    }
    for o in others {
        check_dim(d, o.ncols())?;
    }
    let mean = reference.mean_axis(Axis(0)).expect("non-empty");
    let centered = &reference - &mean.view().insert_axis(Axis(0));
    let total_var = centered.iter().map(|x| x * x).sum::<f64>() / n as f64;
    let components = if d <= DIRECT_PCA_MAX_DIM {
        top2_direct(&centered)
    } else {
        top2_subspace(&centered)
    };
    let proj = centered.dot(&components.t());
    let var = |k: usize| proj.column(k).iter().map(|x| x * x).sum::<f64>() / n as f64;
    let (v1, v2) = (var(0), var(1));
    if !(total_var > 0.0) || v2 <= 1e-12 * total_var {
        return Err(Error::DegenerateData("reference cloud has fewer than two nonzero principal directions".into()));
    }
    let basis = PcaBasis {
        mean,
        components,
        explained_variance: [v1, v2],
    };
    let mut projected = Vec::with_capacity(others.len() + 1);
    projected.push(proj);
    for o in others {
        projected.push(basis.project(*o)?);
    }
    Ok((basis, projected))
}

/// Top-2 eigenvectors of the covariance by dense symmetric eigendecomposition.
fn top2_direct(centered: &Array2<f64>) -> Array2<f64> {
    let (n, d) = centered.dim();
    let cov = centered.t().dot(centered) / n as f64;
    let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut comps = Array2::zeros((2, d));
    for (r, &k) in order.iter().take(2).enumerate() {
        for j in 0..d {
            comps[[r, j]] = eig.eigenvectors[(j, k)];
        }
    }
    orient(&mut comps);
    comps
}

/// Top-2 eigenvectors of `XᵀX` by block subspace iteration followed by a
/// Rayleigh–Ritz step. Deterministic: the start block is built from the data.
fn top2_subspace(centered: &Array2<f64>) -> Array2<f64> {
    const BLOCK: usize = 8;
    const ITERATIONS: usize = 60;
    let (n, d) = centered.dim();
    let b = BLOCK.min(n).min(d);
    // Start from evenly spaced data rows: they span the leading directions
    // with overwhelming probability and need no random stream.
    let mut q = Array2::zeros((d, b));
    for k in 0..b {
        let row = centered.row(k * n / b);
        for j in 0..d {
            q[[j, k]] = row[j] + if j % b == k { 1e-3 } else { 0.0 };
        }
    }
    orthonormalize_columns(&mut q);
    for _ in 0..ITERATIONS {
        let xq = centered.dot(&q);
        q = centered.t().dot(&xq);
        orthonormalize_columns(&mut q);
    }
    let xq = centered.dot(&q);
    let small = xq.t().dot(&xq);
    let m = DMatrix::from_fn(b, b, |i, j| small[[i, j]]);
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let mut comps = Array2::zeros((2, d));
    for (r, &k) in order.iter().take(2).enumerate() {
        for c in 0..b {
            let w = eig.eigenvectors[(c, k)];
            for j in 0..d {
                comps[[r, j]] += w * q[[j, c]];
            }
        }
    }
    // Re-orthonormalize the two rows against rounding.
    let mut t = comps.t().to_owned();
    orthonormalize_columns(&mut t);
    let mut comps = t.t().to_owned();
    orient(&mut comps);
    comps
}

/// Modified Gram–Schmidt, applied twice.
fn orthonormalize_columns(q: &mut Array2<f64>) {
    let k = q.ncols();
    for _ in 0..2 {
        for c in 0..k {
            for p in 0..c {
                let proj = q.column(p).dot(&q.column(c));
                let prev = q.column(p).to_owned();
                q.column_mut(c).scaled_add(-proj, &prev);
            }
            let nrm = q.column(c).dot(&q.column(c)).sqrt();
            if nrm > 0.0 {
                q.column_mut(c).mapv_inplace(|x| x / nrm);
            }
        }
    }
}

/// Fixes each component's sign so its largest-magnitude entry is positive.
fn orient(comps: &mut Array2<f64>) {
    for mut row in comps.rows_mut() {
        let mut best = 0.0f64;
        for &x in row.iter() {
            if x.abs() > best.abs() {
                best = x;
            }
        }
        if best < 0.0 {
            row.mapv_inplace(|x| -x);
        }
    }
}

/// Writes labelled 2D projections as `beta1,beta2,cloud_label`.
pub fn write_projection_csv(path: &Path, clouds: &[(&str, ArrayView2<'_, f64>)]) -> Result<()> {
    let mut out = String::from("beta1,beta2,cloud_label\n");
    for (label, cloud) in clouds {
        check_dim(2, cloud.ncols())?;
        for row in cloud.rows() {
            out.push_str(&format!("{:?},{:?},{}\n", row[0], row[1], label));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
