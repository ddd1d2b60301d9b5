//! Run configuration: a single JSON file with a `mode` discriminator
//! plus the sections each mode needs. Scalar fields can be overridden
//! from the command line.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::estimate::EstimationConfig;
use crate::invest::UtilityModel;
use crate::model::{GridSpec, InitialConditionSpec, ModelParams, ScalingSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulate,
    Estimate,
    Optimize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub alpha_ask: f64,
    pub alpha_bid: f64,
    pub sigma_ask: PolyConfig,
    pub sigma_bid: PolyConfig,
    pub u0_ask: ProfileConfig,
    pub u0_bid: ProfileConfig,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyConfig {
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub coeffs: Vec<f64>,
    pub gamma: f64,
}

impl ModelConfig {
    /// Rebuild the validated domain type; configuration values are
    /// untrusted until this passes.
    pub fn build(&self) -> Result<ModelParams> {
        ModelParams::new(
            self.alpha_ask,
            self.alpha_bid,
            ScalingSpec::new(self.sigma_ask.coeffs.clone())?,
            ScalingSpec::new(self.sigma_bid.coeffs.clone())?,
            InitialConditionSpec::new(self.u0_ask.coeffs.clone(), self.u0_ask.gamma)?,
            InitialConditionSpec::new(self.u0_bid.coeffs.clone(), self.u0_bid.gamma)?,
            self.rho,
        )
    }

    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            alpha_ask: params.alpha_ask,
            alpha_bid: params.alpha_bid,
            sigma_ask: PolyConfig {
                coeffs: params.sigma_ask.coeffs().to_vec(),
            },
            sigma_bid: PolyConfig {
                coeffs: params.sigma_bid.coeffs().to_vec(),
            },
            u0_ask: ProfileConfig {
                coeffs: params.u0_ask.coeffs().to_vec(),
                gamma: params.u0_ask.gamma(),
            },
            u0_bid: ProfileConfig {
                coeffs: params.u0_bid.coeffs().to_vec(),
                gamma: params.u0_bid.gamma(),
            },
            rho: params.rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dt: f64,
    pub dx: f64,
    pub n_time: usize,
    pub n_price: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<GridSpec> {
        GridSpec::new(self.dt, self.dx, self.n_time, self.n_price)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub blowup_threshold: Option<f64>,
    #[serde(default)]
    pub initial_mid: Option<f64>,
    #[serde(default)]
    pub estimation: Option<EstimationConfig>,
    #[serde(default)]
    pub utility: Option<UtilityModel>,
    #[serde(default)]
    pub wealth: Option<f64>,
    /// Dataset row used as the optimize-mode snapshot; defaults to the
    /// last row.
    #[serde(default)]
    pub snapshot_row: Option<usize>,
    #[serde(default)]
    pub foc_tol: Option<f64>,
    /// Input directory holding ask.csv / bid.csv / mid.csv.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Output directory; defaults to the current directory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn require_model(&self) -> Result<ModelParams> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::MissingField("model".into()))?
            .build()
    }

    pub fn require_grid(&self) -> Result<GridSpec> {
        self.grid
            .as_ref()
            .ok_or_else(|| Error::MissingField("grid".into()))?
            .build()
    }

    pub fn require_data_dir(&self) -> Result<&PathBuf> {
        self.data_dir
            .as_ref()
            .ok_or_else(|| Error::MissingField("data_dir".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}
