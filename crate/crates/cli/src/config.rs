//! Run configuration, read from TOML.
//!
//! Relative paths are resolved against the directory holding the config file
//! and checked for existence before any command runs.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;
use sls_core::blend::ConvexSet;
use sls_core::cartpole::{CartPoleParams, SwingUpHeuristic, TrackingNoise, TrackingOptions};
use sls_core::Norm;

/// Marks an error as caused by the configuration rather than the computation.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every random draw; required when any draw happens.
    pub seed: Option<u64>,
    /// Sequence norms reported in summaries.
    #[serde(default = "all_norms")]
    pub p_norms: Vec<Norm>,
    pub plant: Option<PlantConfig>,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    pub antiwindup: Option<AntiwindupConfig>,
}

fn all_norms() -> Vec<Norm> {
    Norm::ALL.to_vec()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantConfig {
    /// `x_{t+1} = A x_t + B u_t + w_{t+1}`.
    Lti {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        horizon: usize,
    },
    CartPole {
        #[serde(default)]
        params: CartPoleParams,
        /// Reference CSV; the swing-up heuristic is rolled out when absent.
        reference: Option<PathBuf>,
        horizon: Option<usize>,
        #[serde(default)]
        heuristic: SwingUpHeuristic,
        #[serde(default)]
        tracking: TrackingOptions,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisMethod {
    #[default]
    Decomposed,
    Stacked,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub fir: usize,
    pub method: SynthesisMethod,
    /// Previously written CLM directory; used instead of synthesizing.
    pub kernels: Option<PathBuf>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            fir: 2,
            method: SynthesisMethod::Decomposed,
            kernels: None,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub disturbance: Disturbance,
    /// Cart-pole perturbations and initial offset.
    pub noise: TrackingNoise,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    #[default]
    Zero,
    /// i.i.d. zero-mean Gaussian entries.
    Gaussian {
        sigma: f64,
    },
    /// i.i.d. entries uniform on `[-amplitude, amplitude]`.
    Uniform {
        amplitude: f64,
    },
    Impulse {
        at: usize,
        value: Vec<f64>,
    },
    Constant {
        value: Vec<f64>,
    },
    /// Sequence CSV with header `t,v0,…`.
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub norm: Norm,
    /// Sample pairs for the gain estimate.
    pub samples: usize,
    /// Radius of the ball the estimate is claimed on.
    pub rho: f64,
    pub trials: usize,
    /// Standard deviation of the Gaussian trial disturbances.
    pub sigma: f64,
    pub target: CertifyTarget,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Inf,
            samples: 200,
            rho: 10.0,
            trials: 20,
            sigma: 0.1,
            target: CertifyTarget::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CertifyTarget {
    /// Residual of the synthesized CLM against the plant, or against `true_a`.
    #[default]
    Loop,
    Mismatch {
        true_a: Vec<Vec<f64>>,
    },
    /// `Δ = γ·delay` on `dim` channels.
    ScaledDelay {
        gamma: f64,
        dim: usize,
        horizon: usize,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntiwindupConfig {
    pub w_set: ConvexSet,
    /// Defaults to the image of `W` under the CLM.
    pub x_set: Option<ConvexSet>,
    pub u_set: Option<ConvexSet>,
    /// Defaults to the smallest contracting power of `A`.
    pub t_bar: Option<usize>,
    #[serde(default = "default_t_max")]
    pub t_max: usize,
    pub gamma: Option<f64>,
    #[serde(default = "default_awp_norm")]
    pub norm: Norm,
}

fn default_t_max() -> usize {
    100
}

fn default_awp_norm() -> Norm {
    Norm::Inf
}

/// Config text, its origin, and command-line overrides.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub source: String,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(text, path.display().to_string(), &base)
    }

    pub fn from_text(text: &str, source: &str) -> anyhow::Result<Self> {
        Self::parse(text.to_string(), source.to_string(), Path::new("."))
    }

    fn parse(text: String, source: String, base: &Path) -> anyhow::Result<Self> {
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| config_error(format!("{source}: {e}")))?;
        config.resolve_paths(base)?;
        config.validate()?;
        Ok(Self { config, text, source })
    }
}

fn resolve(base: &Path, p: &mut PathBuf) -> anyhow::Result<()> {
    if p.is_relative() {
        *p = base.join(&*p);
    }
    if !p.exists() {
        return Err(config_error(format!("file not found: {}", p.display())));
    }
    Ok(())
}

impl RunConfig {
    fn resolve_paths(&mut self, base: &Path) -> anyhow::Result<()> {
        if let Some(PlantConfig::CartPole { reference: Some(p), .. }) = &mut self.plant {
            resolve(base, p)?;
        }
        if let Some(p) = &mut self.synthesis.kernels {
            resolve(base, p)?;
        }
        if let Disturbance::File { path } = &mut self.simulation.disturbance {
            resolve(base, path)?;
        }
        Ok(())
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.p_norms.is_empty() {
            return Err(config_error("p_norms must not be empty"));
        }
        match &self.plant {
            None => {}
            Some(PlantConfig::Lti { a, b, horizon }) => {
                let a = matrix("plant.a", a)?;
                let b = matrix("plant.b", b)?;
                if !a.is_square() || a.nrows() != b.nrows() {
                    return Err(config_error(format!(
                        "plant.a is {}x{} and plant.b is {}x{}",
                        a.nrows(),
                        a.ncols(),
                        b.nrows(),
                        b.ncols()
                    )));
                }
                if *horizon == 0 {
                    return Err(config_error("plant.horizon must be positive"));
                }
            }
            Some(PlantConfig::CartPole {
                params,
                reference,
                horizon,
                ..
            }) => {
                params
                    .validate()
                    .map_err(|e| config_error(format!("plant.params: {e}")))?;
                if reference.is_none() && horizon.is_none() {
                    return Err(config_error("cart_pole plant needs a reference file or a horizon"));
                }
            }
        }
        if self.synthesis.fir < 2 {
            return Err(config_error("synthesis.fir must be at least 2"));
        }
        Ok(())
    }

    /// Seed for a stochastic run; a missing seed is a configuration error.
    pub fn require_seed(&self, what: &str) -> anyhow::Result<u64> {
        self.seed
            .ok_or_else(|| config_error(format!("{what} draws random samples; set `seed` or pass --seed")))
    }
}

/// Row-major nested list to a matrix.
pub fn matrix(name: &str, rows: &[Vec<f64>]) -> anyhow::Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(config_error(format!(
            "{name} must be a non-empty list of equal-length rows"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_rows() {
        let m = matrix("a", &[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m[(1, 0)], 3.0);
        assert!(matrix("a", &[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(matrix("a", &[]).is_err());
    }

    #[test]
    fn defaults_and_plant_shapes() {
        let cfg = LoadedConfig::from_text("[plant]\nkind = \"lti\"\na = [[1.0]]\nb = [[1.0]]\nhorizon = 4\n", "t")
            .unwrap()
            .config;
        assert_eq!(cfg.p_norms, Norm::ALL.to_vec());
        assert_eq!(cfg.synthesis.fir, 2);
        assert!(matches!(cfg.simulation.disturbance, Disturbance::Zero));
        let bad = LoadedConfig::from_text(
            "[plant]\nkind = \"lti\"\na = [[1.0, 0.0]]\nb = [[1.0]]\nhorizon = 4\n",
            "t",
        );
        assert!(bad.err().expect("shape mismatch").is::<ConfigError>());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::TempDir::new().unwrap();
        std::fs::write(dir.path().join("w.csv"), "t,v0\n0,0.0\n1,1.0\n").unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[plant]\nkind = \"lti\"\na = [[1.0]]\nb = [[1.0]]\nhorizon = 1\n\
             [simulation.disturbance]\nkind = \"file\"\npath = \"w.csv\"\n",
        )
        .unwrap();
        let cfg = LoadedConfig::from_file(&path).unwrap().config;
        let Disturbance::File { path } = cfg.simulation.disturbance else {
            panic!()
        };
        assert_eq!(path, dir.path().join("w.csv"));
    }

    #[test]
    fn seed_is_required_on_demand() {
        let cfg = LoadedConfig::from_text("seed = 4\n", "t").unwrap().config;
        assert_eq!(cfg.require_seed("x").unwrap(), 4);
        let cfg = LoadedConfig::from_text("", "t").unwrap().config;
        assert!(cfg.require_seed("x").unwrap_err().is::<ConfigError>());
    }
}
