use std::path::Path;

use misaligned_cp::data::{ExpressionFormat, GeneFilter, Stratification};
use misaligned_cp::eval::LassoConfig;
use misaligned_cp::selection::SelectionConfig;
use misaligned_cp::simulation::SimConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a run can be configured with. Every section is optional in
/// the file; missing keys take their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub gene_filter: Option<GeneFilterConfig>,
    pub selection: SelectionConfig,
    pub simulation: SimConfig,
    pub grid: GridConfig,
    pub lasso: LassoConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Wide,
    Long,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub expression_format: Format,
    /// Standardize every gene to mean 0, variance 1 over all cells.
    pub zscore: bool,
}

impl DataConfig {
    pub fn format(&self) -> ExpressionFormat {
        match self.expression_format {
            Format::Wide => ExpressionFormat::Wide,
            Format::Long => ExpressionFormat::Long,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratMode {
    #[default]
    All,
    Any,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneFilterConfig {
    pub min_detect_frac: f64,
    pub near_radius_um: f64,
    pub forced_includes: Vec<String>,
    pub stratification: StratMode,
}

impl Default for GeneFilterConfig {
    fn default() -> Self {
        GeneFilterConfig {
            min_detect_frac: 0.1,
            near_radius_um: 50.0,
            forced_includes: Vec::new(),
            stratification: StratMode::All,
        }
    }
}

impl GeneFilterConfig {
    pub fn filter(&self) -> GeneFilter {
        GeneFilter {
            min_detect_frac: self.min_detect_frac,
            near_radius_um: self.near_radius_um,
            forced_includes: self.forced_includes.clone(),
            stratification: match self.stratification {
                StratMode::All => Stratification::All,
                StratMode::Any => Stratification::Any,
            },
        }
    }
}

/// Replicate grid for `simulate`. Empty lists fall back to the single value
/// in the `simulation` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub replicates: usize,
    pub plaques: Vec<usize>,
    pub sigma2: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { replicates: 1, plaques: Vec::new(), sigma2: Vec::new() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Loadings listed per mode in the component summary.
    pub top_k: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { top_k: 10 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        cfg.selection.validate()?;
        cfg.simulation.validate()?;
        if cfg.grid.replicates == 0 {
            return Err(CliError::input("grid.replicates must be at least 1"));
        }
        Ok(cfg)
    }
}
