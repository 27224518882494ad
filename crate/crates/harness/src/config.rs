//! Run configuration files: model keys and training keys in one `key = value` file.

use std::path::Path;

use efnet_core::pipeline::{parse_entries, ModelConfig};

use crate::error::{HarnessError, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Each key goes to the model first, then to training; anything else is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for e in parse_entries(text)? {
            if !cfg.model.set(&e.key, &e.value)? && !cfg.train.set(&e.key, &e.value)? {
                return Err(HarnessError::Config {
                    field: e.key,
                    msg: format!("line {}: unknown key", e.line),
                });
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        format!("# model\n{}\n# training\n{}", self.model.to_text(), self.train.to_text())
    }
}

#[cfg(test)]
mod tests {
    use efnet_core::pipeline::FusionMode;

    use super::*;
    use crate::optim::OptimizerKind;

    #[test]
    fn mixed_keys_route_to_both_sections() {
        let cfg = RunConfig::parse("fusion = add  # ablation\nlr = 0.001\n\noptimizer = sgd\nheight = 32\nwidth = 32\n").unwrap();
        assert_eq!(cfg.model.fusion, FusionMode::Add);
        assert_eq!((cfg.train.lr, cfg.train.optimizer), (0.001, OptimizerKind::Sgd));
        assert_eq!(cfg.model.height, 32);
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 17;
        cfg.model.ratio = 0.3;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let field_of = |text: &str| match RunConfig::parse(text) {
            Err(HarnessError::Config { field, .. }) => field,
            Err(HarnessError::Core(efnet_core::Error::Config { field, .. })) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field_of("colour = red"), "colour");
        assert_eq!(field_of("lr = 1\nlr = 2"), "lr");
        assert_eq!(field_of("ratio = 2"), "ratio");
        assert_eq!(field_of("steps = -1"), "steps");
        assert_eq!(field_of("fusion = concat"), "fusion");
    }
}
