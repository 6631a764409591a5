//! Random forward operators `T(θ, ω)` and their vector-Jacobian products.
//!
//! Every operator is `T(θ, (r, n)) = H_r(θ) + n`: a deterministic map that may
//! depend on a rotation `r`, followed by additive noise `n`. The noise never
//! enters the Jacobian, so `vjp` only needs `θ` and `r`.

mod image;
mod protein;
mod quaternion;

pub use image::{read_image_stack, write_image_stack, ImageSpec, ImageStackMeta, Splatter, IMAGE_DTYPE};
pub use protein::PseudoAtomModel;
pub use quaternion::{sample_rotation, Quaternion};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// One realization of the nuisance variable: a rotation and a noise field
/// shaped like one datum.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceDraw {
    pub rotation: Quaternion,
    pub noise: Vec<f64>,
}

impl NuisanceDraw {
    pub fn new(rotation: Quaternion, noise: Vec<f64>) -> Result<Self> {
        if (rotation.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec(format!(
                "rotation quaternion has norm {}",
                rotation.norm()
            )));
        }
        if noise.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("nuisance noise".into()));
        }
        Ok(Self { rotation, noise })
    }

    /// Identity rotation and zero noise.
    pub fn zero(data_dim: usize) -> Self {
        Self {
            rotation: Quaternion::IDENTITY,
            noise: vec![0.0; data_dim],
        }
    }
}

/// How rotations are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RotationLaw {
    /// Always the identity.
    #[default]
    Identity,
    /// Haar-uniform on SO(3).
    Uniform,
    /// A single fixed viewing direction.
    Fixed(Quaternion),
}

/// The law `μ_ω` of the nuisance draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuisanceLaw {
    pub rotation: RotationLaw,
    pub noise_sigma: f64,
    pub data_dim: usize,
}

impl NuisanceLaw {
    pub fn new(rotation: RotationLaw, noise_sigma: f64, data_dim: usize) -> Result<Self> {
        if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!("noise sigma {noise_sigma} must be ≥ 0")));
        }
        if let RotationLaw::Fixed(q) = rotation {
            if (q.norm() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidSpec("fixed rotation must be a unit quaternion".into()));
            }
        }
        Ok(Self {
            rotation,
            noise_sigma,
            data_dim,
        })
    }

    /// Draws the rotation first, then the noise field, from one stream.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, draw: &mut NuisanceDraw) {
        draw.rotation = match self.rotation {
            RotationLaw::Identity => Quaternion::IDENTITY,
            RotationLaw::Uniform => sample_rotation(rng),
            RotationLaw::Fixed(q) => q,
        };
        draw.noise.resize(self.data_dim, 0.0);
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma validated");
            for n in draw.noise.iter_mut() {
                *n = normal.sample(rng);
            }
        } else {
            draw.noise.iter_mut().for_each(|n| *n = 0.0);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NuisanceDraw {
        let mut d = NuisanceDraw::zero(self.data_dim);
        self.sample_into(rng, &mut d);
        d
    }
}

/// `T(θ, ω) = θ + n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineIdentity {
    pub dim: usize,
}

/// Four atoms at `θ/2` and its three axis reflections, rendered from the top.
#[derive(Debug, Clone)]
pub struct Nanocluster {
    spec: ImageSpec,
    splatter: Splatter,
}

impl Nanocluster {
    pub fn new(spec: ImageSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            splatter: Splatter::new(&spec),
            spec,
        })
    }

    pub fn spec(&self) -> &ImageSpec {
        &self.spec
    }

    fn atoms(theta: &[f64]) -> [[f64; 2]; 4] {
        let a = [0.5 * theta[0], 0.5 * theta[1]];
        [[a[0], a[1]], [a[0], -a[1]], [-a[0], a[1]], [-a[0], -a[1]]]
    }
}

/// Pseudo-atom model deformed along modes, rotated, projected along z and
/// rendered with Gaussian splats.
#[derive(Debug, Clone)]
pub struct ToyProtein {
    model: PseudoAtomModel,
    spec: ImageSpec,
    splatter: Splatter,
}

impl ToyProtein {
    pub fn new(model: PseudoAtomModel, spec: ImageSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            splatter: Splatter::new(&spec),
            model,
            spec,
        })
    }

    pub fn model(&self) -> &PseudoAtomModel {
        &self.model
    }

    pub fn spec(&self) -> &ImageSpec {
        &self.spec
    }

    fn projected(&self, theta: &[f64], rotation: &Quaternion) -> Result<Vec<[f64; 2]>> {
        let r = rotation.to_matrix();
        Ok(self
            .model
            .positions(theta)?
            .into_iter()
            .map(|p| {
                [
                    r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
                    r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
                ]
            })
            .collect())
    }
}

/// A forward-operator handle.
#[derive(Debug, Clone)]
pub enum Operator {
    AffineIdentity(AffineIdentity),
    Nanocluster(Nanocluster),
    ToyProtein(ToyProtein),
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::AffineIdentity(_) => "affine_identity",
            Operator::Nanocluster(_) => "nanocluster",
            Operator::ToyProtein(_) => "toy_protein",
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            Operator::AffineIdentity(op) => op.dim,
            Operator::Nanocluster(_) => 2,
            Operator::ToyProtein(op) => op.model.n_modes(),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Operator::AffineIdentity(op) => op.dim,
            Operator::Nanocluster(op) => op.spec.pixels(),
            Operator::ToyProtein(op) => op.spec.pixels(),
        }
    }

    /// Whether the noise-free output depends on the rotation.
    pub fn uses_rotation(&self) -> bool {
        matches!(self, Operator::ToyProtein(_))
    }

    /// True when `θ ↦ H_r(θ)` is affine, the setting of the MAP equivalence.
    pub fn is_linear_in_theta(&self) -> bool {
        matches!(self, Operator::AffineIdentity(_))
    }

    /// Writes `H_r(θ)` (no noise) into `out`.
    pub fn apply_clean_into(&self, theta: &[f64], rotation: &Quaternion, out: &mut [f64]) -> Result<()> {
        check_dim(self.param_dim(), theta.len())?;
        check_dim(self.data_dim(), out.len())?;
        match self {
            Operator::AffineIdentity(_) => out.copy_from_slice(theta),
            Operator::Nanocluster(op) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                op.splatter.render_add(&Nanocluster::atoms(theta), out);
            }
            Operator::ToyProtein(op) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let pts = op.projected(theta, rotation)?;
                op.splatter.render_add(&pts, out);
            }
        }
        Ok(())
    }

    /// Writes `T(θ, ω) = H_r(θ) + n` into `out`.
    pub fn apply_into(&self, theta: &[f64], draw: &NuisanceDraw, out: &mut [f64]) -> Result<()> {
        check_dim(self.data_dim(), draw.noise.len())?;
        self.apply_clean_into(theta, &draw.rotation, out)?;
        for (o, n) in out.iter_mut().zip(&draw.noise) {
            *o += n;
        }
        Ok(())
    }

    pub fn apply(&self, theta: &[f64], draw: &NuisanceDraw) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.data_dim()];
        self.apply_into(theta, draw, &mut out)?;
        Ok(out)
    }

    /// `∇_θ H_r(θ)ᵀ · cotangent`, written into `out`.
    pub fn vjp_into(&self, theta: &[f64], rotation: &Quaternion, cotangent: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.param_dim(), theta.len())?;
        check_dim(self.data_dim(), cotangent.len())?;
        check_dim(self.param_dim(), out.len())?;
        match self {
            Operator::AffineIdentity(_) => out.copy_from_slice(cotangent),
            Operator::Nanocluster(op) => {
                let atoms = Nanocluster::atoms(theta);
                let mut g = [[0.0; 2]; 4];
                op.splatter.adjoint(&atoms, cotangent, &mut g);
                // a1 = θ/2, a2 = (θ₁, -θ₂)/2, a3 = (-θ₁, θ₂)/2, a4 = -θ/2
                out[0] = 0.5 * (g[0][0] + g[1][0] - g[2][0] - g[3][0]);
                out[1] = 0.5 * (g[0][1] - g[1][1] + g[2][1] - g[3][1]);
            }
            Operator::ToyProtein(op) => {
                let pts = op.projected(theta, rotation)?;
                let mut g = vec![[0.0; 2]; pts.len()];
                op.splatter.adjoint(&pts, cotangent, &mut g);
                let r = rotation.to_matrix();
                // Pull (gx, gy, 0) back through the rotation: Rᵀ g.
                let back: Vec<[f64; 3]> = g
                    .iter()
                    .map(|g| {
                        [
                            r[0][0] * g[0] + r[1][0] * g[1],
                            r[0][1] * g[0] + r[1][1] * g[1],
                            r[0][2] * g[0] + r[1][2] * g[1],
                        ]
                    })
                    .collect();
                for (i, o) in out.iter_mut().enumerate() {
                    let mode = op.model.mode(i);
                    let mut acc = 0.0;
                    for (b, m) in back.iter().zip(mode.rows()) {
                        acc += b[0] * m[0] + b[1] * m[1] + b[2] * m[2];
                    }
                    *o = op.model.mode_scales()[i] * acc;
                }
            }
        }
        Ok(())
    }
}

/// `θ + noise`; the rotation is ignored.
pub fn affine_identity_apply(theta: &[f64], draw: &NuisanceDraw) -> Result<Vec<f64>> {
    check_dim(theta.len(), draw.noise.len())?;
    Ok(theta.iter().zip(&draw.noise).map(|(t, n)| t + n).collect())
}

/// Noise-free nanocluster image for latent `θ ∈ ℝ²`.
pub fn nanocluster_render(theta: &[f64], spec: &ImageSpec) -> Result<Vec<f64>> {
    let op = Operator::Nanocluster(Nanocluster::new(*spec)?);
    let mut out = vec![0.0; spec.pixels()];
    op.apply_clean_into(theta, &Quaternion::IDENTITY, &mut out)?;
    Ok(out)
}

pub fn toy_protein_apply(
    theta: &[f64],
    draw: &NuisanceDraw,
    model: &PseudoAtomModel,
    spec: &ImageSpec,
) -> Result<Vec<f64>> {
    let op = Operator::ToyProtein(ToyProtein::new(model.clone(), *spec)?);
    op.apply(theta, draw)
}

/// `∇T_ω(θ)ᵀ · cotangent`. Additive noise contributes nothing.
pub fn vjp(op: &Operator, theta: &[f64], draw: &NuisanceDraw, cotangent: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; op.param_dim()];
    op.vjp_into(theta, &draw.rotation, cotangent, &mut out)?;
    Ok(out)
}

/// Central-difference Jacobian, one column per parameter.
pub fn finite_difference_jacobian(op: &Operator, theta: &[f64], draw: &NuisanceDraw, step: f64) -> Result<Vec<Vec<f64>>> {
    let mut plus = vec![0.0; op.data_dim()];
    let mut minus = vec![0.0; op.data_dim()];
    let mut cols = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let mut t = theta.to_vec();
        t[j] = theta[j] + step;
        op.apply_into(&t, draw, &mut plus)?;
        t[j] = theta[j] - step;
        op.apply_into(&t, draw, &mut minus)?;
        cols.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * step)).collect());
    }
    Ok(cols)
}

/// Compares the finite-difference Jacobian with the one assembled from `vjp`
/// on canonical basis cotangents. Returns `‖J_vjp - J_fd‖_F / ‖J_fd‖_F`
/// (the absolute Frobenius error when `J_fd` vanishes).
pub fn finite_difference_check(op: &Operator, theta: &[f64], draw: &NuisanceDraw, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidSpec(format!("finite-difference step {step} must be positive")));
    }
    let cols = finite_difference_jacobian(op, theta, draw, step)?;
    let mut basis = vec![0.0; op.data_dim()];
    let mut row = vec![0.0; op.param_dim()];
    let mut err2 = 0.0;
    let mut ref2 = 0.0;
    for p in 0..op.data_dim() {
        basis[p] = 1.0;
        op.vjp_into(theta, &draw.rotation, &basis, &mut row)?;
        basis[p] = 0.0;
        for (j, col) in cols.iter().enumerate() {
            err2 += (row[j] - col[p]).powi(2);
            ref2 += col[p] * col[p];
        }
    }
    Ok(if ref2 > 0.0 { (err2 / ref2).sqrt() } else { err2.sqrt() })
}
