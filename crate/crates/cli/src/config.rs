use std::path::Path;

use attnedit::data::DataPlan;
use attnedit::distill::{DistillConfig, PretrainConfig};
use attnedit::model::{EditOptions, ModelSpec};
use attnedit::{Error, Result};
use serde::Deserialize;

/// Everything a run can configure from a file. Command-line flags take
/// precedence over these fields, and `RUN_SEED` / `--seed` over `seed`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub teacher_spec: Option<ModelSpec>,
    pub pretrain: PretrainConfig,
    pub edit: EditOptions,
    pub distill: DistillConfig,
    /// Defaults to the reference plan sized from the step budgets.
    pub data: Option<DataPlan>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn data_plan(&self, vocab: usize) -> Result<DataPlan> {
        if let Some(d) = &self.data {
            if d.vocab != vocab {
                return Err(Error::Config(format!("data plan vocab {} differs from the model's {vocab}", d.vocab)));
            }
            d.validate()?;
            return Ok(d.clone());
        }
        let d = &self.distill;
        let per_step = (d.batch * d.seq_len) as u64;
        DataPlan::reference(vocab, d.stage1_steps.max(1) * per_step, (d.stage2_steps / 3).max(1) * per_step)
    }
}

pub fn read_spec(path: &Path) -> Result<ModelSpec> {
    let file = if path.is_dir() { path.join("spec.json") } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
    let spec = ModelSpec::from_json(&text)?;
    spec.validate()?;
    Ok(spec)
}
