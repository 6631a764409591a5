//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::discrepancy::DiscrepancySpec;
use crate::ensemble::{GaussianMixtureSpec, LatentLaw, MixtureComponent};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, McStrategy};
use crate::forward::{
    AffineIdentity, ImageSpec, Nanocluster, NuisanceLaw, Operator, PseudoAtomModel, Quaternion, RotationLaw, ToyProtein,
};
use crate::mapdto::{GaussianPrior, MapOptimizerSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Onedim,
    Nanocluster,
    Toyprotein,
    Mapdto,
    Diagnostics,
}

/// Pseudo-atom model parameters for the toy protein.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_atoms")]
    pub atoms: usize,
    /// Ball radius for the atom positions; `2·extent/3` when unset.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_mode_scales")]
    pub mode_scales: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_atoms() -> usize {
    16
}

fn default_mode_scales() -> Vec<f64> {
    vec![1.0, 0.8, 0.5, 0.3]
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            atoms: default_atoms(),
            radius: None,
            mode_scales: default_mode_scales(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorConfig {
    AffineIdentity {},
    Nanocluster {
        image: ImageSpec,
    },
    ToyProtein {
        image: ImageSpec,
        #[serde(default)]
        model: ModelConfig,
    },
}

impl OperatorConfig {
    pub fn image(&self) -> Option<&ImageSpec> {
        match self {
            OperatorConfig::AffineIdentity {} => None,
            OperatorConfig::Nanocluster { image } | OperatorConfig::ToyProtein { image, .. } => Some(image),
        }
    }

    fn image_mut(&mut self) -> Option<&mut ImageSpec> {
        match self {
            OperatorConfig::AffineIdentity {} => None,
            OperatorConfig::Nanocluster { image } | OperatorConfig::ToyProtein { image, .. } => Some(image),
        }
    }

    /// Builds the operator; `dim` is the latent dimension for the identity map.
    pub fn build(&self, dim: usize) -> Result<Operator> {
        Ok(match self {
            OperatorConfig::AffineIdentity {} => Operator::AffineIdentity(AffineIdentity { dim }),
            OperatorConfig::Nanocluster { image } => Operator::Nanocluster(Nanocluster::new(*image)?),
            OperatorConfig::ToyProtein { image, model } => {
                let radius = model.radius.unwrap_or(2.0 * image.extent / 3.0);
                let m = PseudoAtomModel::synthetic(model.atoms, radius, model.mode_scales.clone(), model.seed)?;
                Operator::ToyProtein(ToyProtein::new(m, *image)?)
            }
        })
    }
}

/// The loss-comparison study over a noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub sigmas: Vec<f64>,
    pub losses: Vec<DiscrepancySpec>,
    /// Stop once parameter-space W₂ falls below this value.
    pub threshold: f64,
    /// Iteration budget per cell.
    pub budget: usize,
    /// Iterations between W₂ checks.
    #[serde(default = "default_check_every")]
    pub check_every: usize,
}

fn default_check_every() -> usize {
    25
}

/// Settings for the discretize-then-optimize baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapdtoConfig {
    /// Particle count `K` of the single MAP fit.
    pub k: usize,
    /// `λ`; `K/N` when unset.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub prior: GaussianPrior,
    #[serde(default = "default_nodes")]
    pub rotation_nodes: usize,
    pub optimizer: MapOptimizerSettings,
    pub n_schedule: Vec<usize>,
    pub k_schedule: Vec<usize>,
    pub seeds: usize,
    pub k_check_observations: usize,
    pub fixed_ensemble_size: usize,
    /// `λ` used across the consistency schedules.
    #[serde(default)]
    pub diagnostics_lambda: f64,
}

fn default_nodes() -> usize {
    64
}

/// Monte Carlo estimator-suite settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub n: usize,
    pub k: usize,
    pub replicates: usize,
}

/// Grids for plot-data output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Viewing direction used for the image PCA comparison.
    #[serde(default)]
    pub pca_rotation: Quaternion,
    /// Images per cloud in the PCA comparison.
    #[serde(default = "default_pca_count")]
    pub pca_count: usize,
}

fn default_grid_points() -> usize {
    400
}

fn default_pca_count() -> usize {
    1000
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            grid_points: default_grid_points(),
            pca_rotation: Quaternion::IDENTITY,
            pca_count: default_pca_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Master seed; overrides `flow.seed`.
    pub seed: u64,
    #[serde(default)]
    pub paper_parity: bool,
    pub output_dir: PathBuf,
    pub observed_count: usize,
    pub particles: usize,
    /// Noise level for the identity operator; image operators carry theirs
    /// in the image spec.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    pub truth: LatentLaw,
    pub initial: LatentLaw,
    pub operator: OperatorConfig,
    #[serde(default)]
    pub rotation: RotationLaw,
    pub discrepancy: DiscrepancySpec,
    pub flow: FlowConfig,
    #[serde(default)]
    pub plots: PlotConfig,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
    #[serde(default)]
    pub mapdto: Option<MapdtoConfig>,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsConfig>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.flow.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.flow.seed = seed;
    }

    /// `σ` of the additive noise.
    pub fn sigma(&self) -> f64 {
        match self.operator.image() {
            Some(img) => img.noise_sigma,
            None => self.noise_sigma.unwrap_or(0.0),
        }
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        match self.operator.image_mut() {
            Some(img) => img.noise_sigma = sigma,
            None => self.noise_sigma = Some(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        self.initial.validate()?;
        if self.truth.dim() != self.initial.dim() {
            return Err(Error::Config(format!(
                "truth has dimension {} but the initial law has {}",
                self.truth.dim(),
                self.initial.dim()
            )));
        }
        if self.observed_count < 2 || self.particles < 2 {
            return Err(Error::Config("observed_count and particles must be at least 2".into()));
        }
        match (&self.operator, self.noise_sigma) {
            (OperatorConfig::AffineIdentity {}, None) => {
                return Err(Error::Config("noise_sigma is required for the affine identity operator".into()))
            }
            (OperatorConfig::AffineIdentity {}, Some(s)) if !(s >= 0.0) || !s.is_finite() => {
                return Err(Error::Config(format!("noise_sigma {s} must be nonnegative")))
            }
            (OperatorConfig::Nanocluster { .. } | OperatorConfig::ToyProtein { .. }, Some(_)) => {
                return Err(Error::Config("image operators take their noise level from image.noise_sigma".into()))
            }
            _ => {}
        }
        let op = self.operator.build(self.truth.dim())?;
        if op.param_dim() != self.truth.dim() {
            return Err(Error::Config(format!(
                "operator `{}` takes {} parameters but the truth has dimension {}",
                op.name(),
                op.param_dim(),
                self.truth.dim()
            )));
        }
        NuisanceLaw::new(self.rotation, self.sigma(), op.data_dim())?;
        self.discrepancy.validate()?;
        self.flow.validate()?;
        self.flow.learning_rate.resolve(op.param_dim())?;
        if let Some(c) = &self.compare {
            if self.experiment != ExperimentKind::Onedim {
                return Err(Error::Config("the loss comparison is defined for the onedim experiment only".into()));
            }
            if c.sigmas.is_empty() || c.losses.is_empty() || c.budget == 0 || c.check_every == 0 {
                return Err(Error::Config("compare needs sigmas, losses, a positive budget and check interval".into()));
            }
            if c.sigmas.iter().any(|s| !(*s >= 0.0)) || c.threshold.is_nan() {
                return Err(Error::Config("compare sigmas must be nonnegative and threshold a number".into()));
            }
            c.losses.iter().try_for_each(|l| l.validate())?;
        }
        if let Some(m) = &self.mapdto {
            if m.k == 0 || m.seeds == 0 || m.rotation_nodes == 0 || !(m.prior.scale > 0.0) {
                return Err(Error::Config("mapdto needs positive k, seeds, rotation_nodes and prior scale".into()));
            }
        }
        if self.experiment == ExperimentKind::Mapdto && self.mapdto.is_none() {
            return Err(Error::Config("the mapdto experiment needs a `mapdto` section".into()));
        }
        if self.experiment == ExperimentKind::Diagnostics && self.diagnostics.is_none() {
            return Err(Error::Config("the diagnostics experiment needs a `diagnostics` section".into()));
        }
        if self.plots.grid_points < 2 || self.plots.pca_count < 3 {
            return Err(Error::Config("plots need at least 2 grid points and 3 PCA images".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), excluding
    /// the output directory.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("output_dir");
        }
        hash_value(&value)
    }

    /// Restores the stated values of the matching published setup.
    pub fn apply_paper_parity(&mut self) {
        self.paper_parity = true;
        match self.experiment {
            ExperimentKind::Onedim | ExperimentKind::Mapdto | ExperimentKind::Diagnostics => {
                self.truth = paper_onedim_truth();
                self.initial = LatentLaw::Mixture(GaussianMixtureSpec::standard_normal(1));
                self.noise_sigma = Some(1.5);
                self.observed_count = 10_000;
                self.particles = 10_000;
                self.flow.iterations = 25_000;
            }
            ExperimentKind::Nanocluster => {
                self.truth = paper_nanocluster_truth();
                self.initial = paper_nanocluster_initial();
                if let Some(img) = self.operator.image_mut() {
                    img.side = 128;
                    img.extent = 4.0;
                    img.noise_sigma = 1.5;
                }
                self.observed_count = 1000;
                self.flow.iterations = 3000;
            }
            ExperimentKind::Toyprotein => {
                if let OperatorConfig::ToyProtein { image, model } = &mut self.operator {
                    image.side = 128;
                    image.noise_sigma = 1.0;
                    let (truth, initial) = paper_protein_laws(&model.mode_scales);
                    self.truth = truth;
                    self.initial = initial;
                }
                self.rotation = RotationLaw::Uniform;
                self.observed_count = 3000;
                self.flow.iterations = 90_000;
            }
        }
    }

    /// Names of every setting whose value is not stated by the published
    /// setup this experiment mirrors.
    pub fn non_paper_parameters(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut flag = |cond: bool, name: &str| {
            if cond {
                out.push(name.to_string());
            }
        };
        // Never stated anywhere.
        flag(true, "flow.learning_rate");
        flag(self.flow.lr_schedule != Default::default(), "flow.lr_schedule");
        flag(self.flow.minibatch.is_some(), "flow.minibatch");
        flag(self.flow.optimizer != Default::default(), "flow.optimizer");
        match self.experiment {
            ExperimentKind::Onedim | ExperimentKind::Mapdto | ExperimentKind::Diagnostics => {
                flag(!same_law(&self.truth, &paper_onedim_truth()), "truth");
                flag(!same_law(&self.initial, &LatentLaw::Mixture(GaussianMixtureSpec::standard_normal(1))), "initial");
                flag(self.noise_sigma != Some(1.5), "noise_sigma");
                flag(self.observed_count != 10_000, "observed_count");
                flag(self.particles != 10_000, "particles");
                flag(self.flow.iterations != 25_000, "flow.iterations");
                if let DiscrepancySpec::Kl { bandwidth: Some(_) } = self.discrepancy {
                    flag(true, "discrepancy.bandwidth");
                }
                if let Some(c) = &self.compare {
                    flag(true, "compare.sigmas");
                    flag(c.budget != 25_000, "compare.budget");
                }
                if self.mapdto.is_some() {
                    flag(true, "mapdto");
                }
                if self.diagnostics.is_some() {
                    flag(true, "diagnostics");
                }
            }
            ExperimentKind::Nanocluster => {
                flag(!same_law(&self.truth, &paper_nanocluster_truth()), "truth");
                flag(!same_law(&self.initial, &paper_nanocluster_initial()), "initial");
                let img = self.operator.image().expect("image operator");
                flag(img.side != 128, "operator.image.side");
                flag(img.extent != 4.0, "operator.image.extent");
                flag(true, "operator.image.kernel_width");
                flag(img.noise_sigma != 1.5, "operator.image.noise_sigma");
                flag(self.observed_count != 1000, "observed_count");
                flag(true, "particles");
                flag(self.flow.iterations != 3000, "flow.iterations");
            }
            ExperimentKind::Toyprotein => {
                let img = self.operator.image().expect("image operator");
                flag(img.side != 128, "operator.image.side");
                flag(true, "operator.image.extent");
                flag(true, "operator.image.kernel_width");
                flag(img.noise_sigma != 1.0, "operator.image.noise_sigma");
                flag(true, "operator.model");
                if let OperatorConfig::ToyProtein { model, .. } = &self.operator {
                    let (truth, initial) = paper_protein_laws(&model.mode_scales);
                    flag(!same_law(&self.truth, &truth), "truth");
                    flag(!same_law(&self.initial, &initial), "initial");
                }
                flag(self.rotation != RotationLaw::Uniform, "rotation");
                flag(self.observed_count != 3000, "observed_count");
                flag(true, "particles");
                flag(self.flow.iterations != 90_000, "flow.iterations");
                flag(true, "plots.pca_rotation");
            }
        }
        if self.flow.mc_strategy != McStrategy::Joint {
            out.push("flow.mc_strategy".into());
        }
        out
    }

    /// Output directory, creating it if needed.
    pub fn prepare_output(&self) -> Result<PathBuf> {
        let dir = self.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }
}

/// Law equality up to rounding in the parameters.
fn same_law(a: &LatentLaw, b: &LatentLaw) -> bool {
    fn close(a: &serde_json::Value, b: &serde_json::Value) -> bool {
        use serde_json::Value;
        match (a, b) {
            (Value::Number(x), Value::Number(y)) => {
                let (x, y) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
                (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0)
            }
            (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(u, v)| close(u, v)),
            (Value::Object(x), Value::Object(y)) => x.len() == y.len() && x.iter().all(|(k, u)| y.get(k).is_some_and(|v| close(u, v))),
            _ => a == b,
        }
    }
    close(&serde_json::to_value(a).expect("serializes"), &serde_json::to_value(b).expect("serializes"))
}

pub(crate) fn hash_value(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key, so this form is canonical.
    let text = serde_json::to_string(value).expect("value serializes");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn paper_onedim_truth() -> LatentLaw {
    LatentLaw::Mixture(GaussianMixtureSpec::univariate(&[(0.5, -2.0, 0.75), (0.5, 2.0, 0.3)]))
}

pub fn paper_nanocluster_truth() -> LatentLaw {
    LatentLaw::Mixture(GaussianMixtureSpec {
        components: vec![
            MixtureComponent {
                weight: 0.2,
                mean: vec![3.0, 3.0],
                covariance: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            },
            MixtureComponent {
                weight: 0.8,
                mean: vec![5.0, 5.0],
                covariance: vec![vec![0.7, 0.5], vec![0.5, 1.0]],
            },
        ],
    })
}

pub fn paper_nanocluster_initial() -> LatentLaw {
    LatentLaw::Mixture(GaussianMixtureSpec {
        components: vec![MixtureComponent {
            weight: 1.0,
            mean: vec![4.0, 4.0],
            covariance: vec![vec![0.8, 0.3], vec![0.3, 0.8]],
        }],
    })
}

/// Truth and initial laws of the four-mode study with `1/√λ_i` replaced by
/// `scales[i]`: modes 1–2 bimodal, the rest standard normal, and a uniform
/// box on `(-7, 7)` per mode for the initial law.
pub fn paper_protein_laws(scales: &[f64]) -> (LatentLaw, LatentLaw) {
    let d = scales.len();
    let bimodal = d.min(2);
    // Product of per-mode laws; the bimodal modes are independent, so the
    // truth is a 2^bimodal component mixture.
    let mut components = Vec::new();
    for pattern in 0..(1usize << bimodal) {
        let mut mean = vec![0.0; d];
        let mut cov = vec![vec![0.0; d]; d];
        for i in 0..d {
            let s = scales[i];
            if i < bimodal {
                mean[i] = s * if pattern >> i & 1 == 0 { 9.0 } else { -7.0 };
            }
            cov[i][i] = s * s;
        }
        components.push(MixtureComponent {
            weight: 1.0 / (1usize << bimodal) as f64,
            mean,
            covariance: cov,
        });
    }
    let truth = LatentLaw::Mixture(GaussianMixtureSpec { components });
    let initial = LatentLaw::Uniform {
        low: scales.iter().map(|s| -7.0 * s).collect(),
        high: scales.iter().map(|s| 7.0 * s).collect(),
    };
    (truth, initial)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONEDIM: &str = r#"{
        "experiment": "onedim",
        "seed": 3,
        "output_dir": "out",
        "observed_count": 100,
        "particles": 50,
        "noise_sigma": 1.5,
        "truth": {"mixture": {"components": [
            {"weight": 0.5, "mean": [-2.0], "covariance": [[0.5625]]},
            {"weight": 0.5, "mean": [2.0], "covariance": [[0.09]]}]}},
        "initial": {"mixture": {"components": [{"weight": 1.0, "mean": [0.0], "covariance": [[1.0]]}]}},
        "operator": {"type": "affine_identity"},
        "discrepancy": {"kind": "energy"},
        "flow": {"iterations": 10, "learning_rate": 0.01}
    }"#;

    #[test]
    fn parses_and_propagates_seed() {
        let cfg = ExperimentConfig::from_json(ONEDIM).unwrap();
        assert_eq!(cfg.flow.seed, 3);
        assert_eq!(cfg.sigma(), 1.5);
        assert_eq!(cfg.truth, paper_onedim_truth());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ONEDIM.replace("\"particles\"", "\"particels\": 3, \"particles\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
        let text = ONEDIM.replace("{\"type\": \"affine_identity\"}", "{\"type\": \"affine_identity\", \"dim\": 1}");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let a = ExperimentConfig::from_json(ONEDIM).unwrap();
        let reordered = ONEDIM.replace("\"seed\": 3,", "").replace("\"particles\": 50,", "\"particles\": 50, \"seed\": 3,");
        let mut b = ExperimentConfig::from_json(&reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.set_seed(4);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn parity_clears_size_flags() {
        let mut cfg = ExperimentConfig::from_json(ONEDIM).unwrap();
        assert!(cfg.non_paper_parameters().contains(&"particles".to_string()));
        cfg.apply_paper_parity();
        let flags = cfg.non_paper_parameters();
        assert!(!flags.contains(&"particles".to_string()));
        assert!(!flags.contains(&"flow.iterations".to_string()));
        assert!(flags.contains(&"flow.learning_rate".to_string()));
    }

    #[test]
    fn protein_laws_follow_scales() {
        let (truth, initial) = paper_protein_laws(&[1.0, 0.5, 0.3, 0.2]);
        let LatentLaw::Mixture(m) = truth else { panic!() };
        assert_eq!(m.components.len(), 4);
        assert_eq!(m.mean(), vec![1.0, 0.5, 0.0, 0.0]);
        assert_eq!(initial.dim(), 4);
    }
}
