pub mod server;

use anyhow::{Context, Result};
use convqa_core::data::{ReformulationMode, ReformulationProvider};
use convqa_core::PipelineConfig;

/// Live answering has no stored reformulations, so dataset mode falls back
/// to the template generator that produced them.
pub fn live_provider(cfg: &PipelineConfig) -> Result<ReformulationProvider> {
    if cfg.eval.reformulation == ReformulationMode::Dataset {
        return Ok(ReformulationProvider::template(cfg.eval.template_count));
    }
    cfg.provider().context("building the reformulation provider")
}
