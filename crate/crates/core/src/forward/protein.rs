//! A synthetic pseudo-atom "protein": reference atom positions deformed along
//! a few orthonormal linear modes.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ensemble::{read_matrix_csv, write_matrix_csv};
use crate::error::{check_dim, Error, Result};
use crate::rng::{Purpose, StreamFamily};

const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAtomModel {
    base: Array2<f64>,
    modes: Vec<Array2<f64>>,
    mode_scales: Vec<f64>,
}

impl PseudoAtomModel {
    pub fn new(base: Array2<f64>, modes: Vec<Array2<f64>>, mode_scales: Vec<f64>) -> Result<Self> {
        if base.nrows() == 0 || base.ncols() != 3 {
            return Err(Error::InvalidSpec("base positions must be A × 3 with A ≥ 1".into()));
        }
        check_dim(modes.len(), mode_scales.len())?;
        if modes.is_empty() {
            return Err(Error::InvalidSpec("model needs at least one mode".into()));
        }
        for m in &modes {
            if m.dim() != base.dim() {
                return Err(Error::InvalidSpec("mode shape differs from base positions".into()));
            }
        }
        if mode_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpec("mode scales must be positive".into()));
        }
        for i in 0..modes.len() {
            for j in 0..=i {
                let ip: f64 = modes[i].iter().zip(modes[j].iter()).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (ip - target).abs() > ORTHO_TOL {
                    return Err(Error::InvalidSpec(format!(
                        "modes {i} and {j} are not orthonormal (inner product {ip})"
                    )));
                }
            }
        }
        Ok(Self {
            base: base.as_standard_layout().into_owned(),
            modes: modes
                .into_iter()
                .map(|m| m.as_standard_layout().into_owned())
                .collect(),
            mode_scales,
        })
    }

    /// `atoms` positions uniform in a ball of radius `radius`, `mode_scales.len()`
    /// modes from Gram–Schmidt on Gaussian fields, all from `seed`.
    pub fn synthetic(atoms: usize, radius: f64, mode_scales: Vec<f64>, seed: u64) -> Result<Self> {
        if atoms == 0 {
            return Err(Error::InvalidSpec("model needs at least one atom".into()));
        }
        let n_modes = mode_scales.len();
        if n_modes > 3 * atoms {
            return Err(Error::InvalidSpec("more modes than degrees of freedom".into()));
        }
        let fam = StreamFamily::new(seed, Purpose::Model);
        let mut rng = fam.stream(0, 0);
        let mut base = Array2::zeros((atoms, 3));
        for mut row in base.rows_mut() {
            // Rejection sampling from the enclosing cube.
            loop {
                let p: [f64; 3] = std::array::from_fn(|_| 2.0 * rng.random::<f64>() - 1.0);
                if p.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    for k in 0..3 {
                        row[k] = radius * p[k];
                    }
                    break;
                }
            }
        }
        let mut rng = fam.stream(0, 1);
        let mut flat: Vec<Vec<f64>> = Vec::with_capacity(n_modes);
        while flat.len() < n_modes {
            let mut v: Vec<f64> = (0..3 * atoms).map(|_| rng.sample(StandardNormal)).collect();
            // Two passes of modified Gram–Schmidt for orthogonality at rounding level.
            for _ in 0..2 {
                for u in &flat {
                    let ip: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= ip * b);
                }
            }
            let n: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= n);
            flat.push(v);
        }
        let modes = flat
            .into_iter()
            .map(|v| Array2::from_shape_vec((atoms, 3), v).expect("3·A entries"))
            .collect();
        Self::new(base, modes, mode_scales)
    }

    pub fn atoms(&self) -> usize {
        self.base.nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn base(&self) -> ArrayView2<'_, f64> {
        self.base.view()
    }

    pub fn mode(&self, i: usize) -> ArrayView2<'_, f64> {
        self.modes[i].view()
    }

    pub fn mode_scales(&self) -> &[f64] {
        &self.mode_scales
    }

    /// `P(θ) = base + Σ_i θ_i · scale_i · mode_i`.
    pub fn positions(&self, theta: &[f64]) -> Result<Vec<[f64; 3]>> {
        check_dim(self.n_modes(), theta.len())?;
        let mut out: Vec<[f64; 3]> = self
            .base
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        for ((m, &s), &t) in self.modes.iter().zip(&self.mode_scales).zip(theta) {
            let c = t * s;
            for (p, r) in out.iter_mut().zip(m.rows()) {
                p[0] += c * r[0];
                p[1] += c * r[1];
                p[2] += c * r[2];
            }
        }
        Ok(out)
    }

    /// Writes `atoms.csv` and `mode{i}.csv` (header `x,y,z`) plus
    /// `mode_scales.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        write_matrix_csv(&dir.join("atoms.csv"), self.base.view(), Some(&header))?;
        for (i, m) in self.modes.iter().enumerate() {
            write_matrix_csv(&dir.join(format!("mode{i}.csv")), m.view(), Some(&header))?;
        }
        let scales = Array2::from_shape_vec((self.mode_scales.len(), 1), self.mode_scales.clone())
            .expect("column");
        write_matrix_csv(&dir.join("mode_scales.csv"), scales.view(), Some(&["scale".to_string()]))
    }

    pub fn read_csv(dir: &Path) -> Result<Self> {
        let base = read_matrix_csv(&dir.join("atoms.csv"))?;
        let scales = read_matrix_csv(&dir.join("mode_scales.csv"))?;
        let mode_scales: Vec<f64> = scales.iter().copied().collect();
        let modes = (0..mode_scales.len())
            .map(|i| read_matrix_csv(&dir.join(format!("mode{i}.csv"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(base, modes, mode_scales)
    }
}
