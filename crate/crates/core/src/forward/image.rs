//! Square pixel grids and Gaussian splat rendering.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel grid plus rendering and noise parameters.
///
/// Pixel `(i, j)` sits at `(-extent + 2·extent·i/side, -extent + 2·extent·j/side)`
/// and is stored at flat index `i·side + j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub side: usize,
    pub extent: f64,
    /// Gaussian splat width `τ`.
    pub kernel_width: f64,
    /// Pixel-wise noise standard deviation `σ`.
    pub noise_sigma: f64,
}

impl ImageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::InvalidSpec(format!("image side {} < 2", self.side)));
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::InvalidSpec(format!("image extent {} must be positive", self.extent)));
        }
        if !(self.kernel_width > 0.0) || !self.kernel_width.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "kernel width {} must be positive",
                self.kernel_width
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "noise sigma {} must be nonnegative",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.extent + 2.0 * self.extent * i as f64 / self.side as f64
    }

    pub fn axis(&self) -> Vec<f64> {
        (0..self.side).map(|i| self.coord(i)).collect()
    }

    /// Index of the grid coordinate closest to `x`.
    pub fn nearest_index(&self, x: f64) -> usize {
        let step = 2.0 * self.extent / self.side as f64;
        (((x + self.extent) / step).round().max(0.0) as usize).min(self.side - 1)
    }
}

/// Renders sums of isotropic Gaussians on an [`ImageSpec`] grid.
///
/// The kernel is separable, so each point costs `2·side` exponentials plus
/// one rank-one update of the image.
#[derive(Debug, Clone)]
pub struct Splatter {
    side: usize,
    axis: Vec<f64>,
    inv_two_tau2: f64,
    inv_tau2: f64,
}

impl Splatter {
    pub fn new(spec: &ImageSpec) -> Self {
        let tau2 = spec.kernel_width * spec.kernel_width;
        Self {
            side: spec.side,
            axis: spec.axis(),
            inv_two_tau2: 0.5 / tau2,
            inv_tau2: 1.0 / tau2,
        }
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    fn profile(&self, center: f64, out: &mut [f64]) {
        for (o, &g) in out.iter_mut().zip(&self.axis) {
            let d = g - center;
            *o = (-d * d * self.inv_two_tau2).exp();
        }
    }

    /// Adds `Σ_k exp(-‖p_k - g‖² / 2τ²)` to `out`.
    pub fn render_add(&self, points: &[[f64; 2]], out: &mut [f64]) {
        let n = self.side;
        let mut ex = vec![0.0; n];
        let mut ey = vec![0.0; n];
        for p in points {
            self.profile(p[0], &mut ex);
            self.profile(p[1], &mut ey);
            for (i, row) in out.chunks_exact_mut(n).enumerate() {
                let a = ex[i];
                for (o, &b) in row.iter_mut().zip(&ey) {
                    *o += a * b;
                }
            }
        }
    }

    /// Gradient of `⟨cotangent, render(points)⟩` with respect to each point.
    pub fn adjoint(&self, points: &[[f64; 2]], cotangent: &[f64], grads: &mut [[f64; 2]]) {
        let n = self.side;
        let mut ex = vec![0.0; n];
        let mut ey = vec![0.0; n];
        let mut row_proj = vec![0.0; n];
        let mut col_proj = vec![0.0; n];
        for (p, g) in points.iter().zip(grads.iter_mut()) {
            self.profile(p[0], &mut ex);
            self.profile(p[1], &mut ey);
            col_proj.iter_mut().for_each(|c| *c = 0.0);
            for (i, row) in cotangent.chunks_exact(n).enumerate() {
                let mut acc = 0.0;
                for ((&v, &b), c) in row.iter().zip(&ey).zip(col_proj.iter_mut()) {
                    acc += v * b;
                    *c += v * ex[i];
                }
                row_proj[i] = acc;
            }
            let mut gx = 0.0;
            let mut gy = 0.0;
            for i in 0..n {
                gx += ex[i] * (self.axis[i] - p[0]) * row_proj[i];
                gy += ey[i] * (self.axis[i] - p[1]) * col_proj[i];
            }
            g[0] = gx * self.inv_tau2;
            g[1] = gy * self.inv_tau2;
        }
    }
}

/// Metadata written next to a raw image stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageStackMeta {
    pub side: usize,
    pub extent: f64,
    pub count: usize,
    pub dtype: String,
}

pub const IMAGE_DTYPE: &str = "float32-le";

fn sidecar_path(raw: &Path) -> PathBuf {
    let mut s = raw.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `images` (one flattened image per row) as little-endian `f32`,
/// row-major, plus a JSON sidecar at `<path>.json`.
pub fn write_image_stack(path: &Path, images: ArrayView2<'_, f64>, spec: &ImageSpec) -> Result<()> {
    if images.ncols() != spec.pixels() {
        return Err(Error::DimensionMismatch {
            expected: spec.pixels(),
            got: images.ncols(),
        });
    }
    let mut bytes = Vec::with_capacity(images.len() * 4);
    for row in images.axis_iter(Axis(0)) {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let meta = ImageStackMeta {
        side: spec.side,
        extent: spec.extent,
        count: images.nrows(),
        dtype: IMAGE_DTYPE.to_string(),
    };
    let side = sidecar_path(path);
    let mut f = std::fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    writeln!(f, "{text}").map_err(|e| Error::io(&side, e))?;
    Ok(())
}

pub fn read_image_stack(path: &Path) -> Result<(Array2<f64>, ImageStackMeta)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: ImageStackMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: side.clone(),
        message: e.to_string(),
    })?;
    if meta.dtype != IMAGE_DTYPE {
        return Err(Error::Parse {
            path: side,
            message: format!("unsupported dtype {}", meta.dtype),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let pixels = meta.side * meta.side;
    if bytes.len() != meta.count * pixels * 4 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected {} bytes, found {}", meta.count * pixels * 4, bytes.len()),
        });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let images = Array2::from_shape_vec((meta.count, pixels), data).expect("shape checked");
    Ok((images, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ImageSpec {
        ImageSpec {
            side: 16,
            extent: 4.0,
            kernel_width: 0.6,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn grid_matches_convention() {
        let s = ImageSpec {
            side: 128,
            extent: 4.0,
            kernel_width: 1.0,
            noise_sigma: 0.0,
        };
        assert_eq!(s.coord(0), -4.0);
        assert!((s.coord(127) - (-4.0 + 8.0 * 127.0 / 128.0)).abs() < 1e-15);
        assert_eq!(s.nearest_index(0.0), 64);
    }

    #[test]
    fn render_matches_pointwise_sum() {
        let s = spec();
        let sp = Splatter::new(&s);
        let pts = [[0.3, -1.1], [2.0, 2.5]];
        let mut img = vec![0.0; s.pixels()];
        sp.render_add(&pts, &mut img);
        for i in 0..s.side {
            for j in 0..s.side {
                let g = [s.coord(i), s.coord(j)];
                let direct: f64 = pts
                    .iter()
                    .map(|p| (-((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)) / (2.0 * 0.36)).exp())
                    .sum();
                assert!((img[i * s.side + j] - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adjoint_matches_finite_difference() {
        let s = spec();
        let sp = Splatter::new(&s);
        let pts = [[0.3, -1.1], [1.0, 0.5]];
        let cot: Vec<f64> = (0..s.pixels()).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let mut grads = [[0.0; 2]; 2];
        sp.adjoint(&pts, &cot, &mut grads);
        let f = |p: &[[f64; 2]]| {
            let mut img = vec![0.0; s.pixels()];
            sp.render_add(p, &mut img);
            img.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-5;
        for k in 0..2 {
            for c in 0..2 {
                let mut plus = pts;
                let mut minus = pts;
                plus[k][c] += h;
                minus[k][c] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((fd - grads[k][c]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} {}", grads[k][c]);
            }
        }
    }

    #[test]
    fn image_stack_round_trip() {
        let s = spec();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.f32");
        let imgs = Array2::from_shape_fn((3, s.pixels()), |(i, j)| (i * 1000 + j) as f64 * 0.5);
        write_image_stack(&path, imgs.view(), &s).unwrap();
        let (back, meta) = read_image_stack(&path).unwrap();
        assert_eq!(meta.count, 3);
        assert_eq!(meta.side, 16);
        assert_eq!(back, imgs);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[4..8], &0.5f32.to_le_bytes());
    }
}
