//! Campaign files for `momglm simulate`.
//!
//! ```toml
//! [model]
//! estimand = "glm"          # glm | glm-unknown-sigma | linear-unknown-sigma | ce | mar | gcm
//! link = "logistic"
//! link_a = "logistic"       # treatment / missingness link
//! noise_sd = 1.0
//! psi = 0.0
//! coords = [1, 2]
//!
//! [design]
//! kind = "gaussian"         # gaussian | rademacher
//! covariance = "identity"   # identity | ar1 | equicorrelated | file
//! rho = 0.3
//! sigma_file = "sigma.csv"  # with covariance = "file"
//! mean_norm = 0.0           # every coordinate c/sqrt(p)
//! mean = [0.1, 0.2]         # explicit mean, overrides mean_norm
//! coef_scheme = "dense"     # dense | sparse | spike
//! alpha = [...]             # fixed coefficients instead of the scheme
//! beta = [...]
//! freeze_coefficients = false
//!
//! [sim]
//! n_grid = [500, 1000]
//! ratio = 1.2
//! replicates = 100
//! seed = 20240501
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use momglm::simlab::{CoefScheme, CovSpec, DesignKind, MeanSpec, SimConfig, SimEstimand, TrueParams};
use momglm::{Error, LinkSpec, Result};
use nalgebra::DVector;
use serde::Deserialize;

use crate::sigma::read_sigma_csv;

pub const SEED_ENV: &str = "MOMGLM_SEED";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    #[serde(default)]
    design: RawDesign,
    #[serde(default)]
    sim: RawSim,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    estimand: String,
    link: Option<String>,
    link_a: Option<String>,
    noise_sd: Option<f64>,
    psi: Option<f64>,
    #[serde(default)]
    coords: Vec<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesign {
    kind: Option<String>,
    covariance: Option<String>,
    rho: Option<f64>,
    sigma_file: Option<PathBuf>,
    mean_norm: Option<f64>,
    mean: Option<Vec<f64>>,
    coef_scheme: Option<String>,
    alpha: Option<Vec<f64>>,
    beta: Option<Vec<f64>>,
    #[serde(default)]
    freeze_coefficients: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    n_grid: Option<Vec<usize>>,
    ratio: Option<f64>,
    replicates: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub output_dir: PathBuf,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

fn link(name: &str) -> Result<LinkSpec> {
    LinkSpec::from_name(name).map_err(|_| invalid(format!("unknown link `{name}`")))
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let seed_override = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| invalid(format!("{SEED_ENV} must be a non-negative integer, got `{s}`")))?,
            ),
            Err(_) => None,
        };
        RunConfig::parse(&text, base, seed_override)
    }

    pub fn parse(text: &str, base: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let estimand = SimEstimand::from_name(&raw.model.estimand)?;
        let mut sim = SimConfig::new(estimand);

        if let Some(l) = &raw.model.link {
            sim.link = link(l)?;
        }
        if let Some(l) = &raw.model.link_a {
            sim.link_a = link(l)?;
        }
        if let Some(v) = raw.model.noise_sd {
            sim.noise_sd = v;
        }
        if let Some(v) = raw.model.psi {
            sim.psi = v;
        }
        sim.coords = raw.model.coords;

        let d = raw.design;
        sim.design = match d.kind.as_deref().unwrap_or("gaussian") {
            "rademacher" => {
                if d.covariance.is_some() || d.mean.is_some() || d.mean_norm.is_some() {
                    return Err(invalid("a Rademacher design has fixed mean and covariance"));
                }
                DesignKind::Rademacher
            }
            "gaussian" => {
                let sigma = match d.covariance.as_deref().unwrap_or("identity") {
                    "identity" => CovSpec::Identity,
                    "ar1" => CovSpec::Ar1(d.rho.ok_or_else(|| invalid("covariance = \"ar1\" needs rho"))?),
                    "equicorrelated" => CovSpec::Equicorrelated(
                        d.rho.ok_or_else(|| invalid("covariance = \"equicorrelated\" needs rho"))?,
                    ),
                    "file" => {
                        let f = d
                            .sigma_file
                            .as_ref()
                            .ok_or_else(|| invalid("covariance = \"file\" needs sigma_file"))?;
                        let path = base.join(f);
                        CovSpec::Explicit(read_sigma_csv(&path, None).map_err(|e| invalid(e.to_string()))?)
                    }
                    other => return Err(invalid(format!("unknown covariance `{other}`"))),
                };
                let mu = match (d.mean, d.mean_norm) {
                    (Some(m), _) => MeanSpec::Explicit(DVector::from_vec(m)),
                    (None, Some(c)) if c != 0.0 => MeanSpec::Constant(c),
                    _ => MeanSpec::Zero,
                };
                if matches!((&mu, &sigma), (MeanSpec::Zero, CovSpec::Identity)) {
                    DesignKind::GaussianIdentity
                } else {
                    DesignKind::GaussianGeneral { mu, sigma }
                }
            }
            other => return Err(invalid(format!("unknown design kind `{other}`"))),
        };
        if let Some(s) = &d.coef_scheme {
            sim.coef_scheme = CoefScheme::from_name(s)?;
        }
        if d.alpha.is_some() || d.beta.is_some() {
            sim.true_params = Some(TrueParams {
                alpha: d.alpha.map(DVector::from_vec),
                beta: d.beta.map(DVector::from_vec),
            });
        }
        sim.freeze_coefficients = d.freeze_coefficients;

        if let Some(v) = raw.sim.n_grid {
            sim.n_grid = v;
        }
        if let Some(v) = raw.sim.ratio {
            sim.ratio = v;
        }
        if let Some(v) = raw.sim.replicates {
            sim.replicates = v;
        }
        if let Some(v) = seed_override.or(raw.sim.seed) {
            sim.seed = v;
        }
        sim.validate()?;

        let output_dir = base.join(raw.output.dir.unwrap_or_else(|| PathBuf::from("momglm-out")));
        Ok(RunConfig { sim, output_dir })
    }
}
