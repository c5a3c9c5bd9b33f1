use std::fmt::Write as _;
use std::path::PathBuf;

use cmcseg::config::{join_list, parse_entries, parse_list, parse_value, Entry};
use cmcseg::metrics::RegionSpec;
use cmcseg::training::TrainConfig;
use cmcseg::{FormatError, ModelConfig};

/// Everything one command needs: model, training, data and output settings.
///
/// Besides the model and training keys it accepts `sequence_stride`,
/// `data_dir`, `out_dir` and `region_<name> = l1,l2,...`. Redefining a
/// region keeps its position; an empty list drops it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sequence_stride: usize,
    pub regions: Vec<RegionSpec>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sequence_stride: 1,
            regions: RegionSpec::defaults(),
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), FormatError> {
        if self.model.apply(key, value)? {
            self.train.seed = self.model.seed;
            return Ok(());
        }
        if self.train.apply(key, value)? {
            return Ok(());
        }
        match key {
            "sequence_stride" => self.sequence_stride = parse_value(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => {
                let Some(name) = key.strip_prefix("region_") else {
                    return Err(FormatError::Config(format!("unknown key `{key}`")));
                };
                let slot = self.regions.iter().position(|r| r.name == name);
                if value.is_empty() {
                    if let Some(i) = slot {
                        self.regions.remove(i);
                    }
                } else {
                    let labels: Vec<u8> = parse_list(key, value)?;
                    let region = RegionSpec::new(name, &labels)
                        .map_err(|e| FormatError::Config(e.to_string()))?;
                    match slot {
                        Some(i) => self.regions[i] = region,
                        None => self.regions.push(region),
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies a configuration file's entries over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), FormatError> {
        for Entry { line, key, value } in parse_entries(text)? {
            self.apply(&key, &value)
                .map_err(|e| FormatError::Config(format!("line {line}: {e}")))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), FormatError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            FormatError::Config(format!("override `{assignment}` is not `key=value`"))
        })?;
        self.apply(key.trim(), value.trim())
    }

    pub fn validate(&self) -> cmcseg::Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sequence_stride == 0 {
            return Err(cmcseg::Error::InvalidArgument(
                "sequence_stride must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The fully resolved configuration; feeding it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# model\n");
        s.push_str(&self.model.to_text());
        s.push_str("\n# training\n");
        s.push_str(&self.train.to_text());
        let _ = writeln!(s, "sequence_stride = {}", self.sequence_stride);
        s.push_str("\n# evaluation regions\n");
        for r in &self.regions {
            let _ = writeln!(s, "region_{} = {}", r.name, join_list(&r.labels));
        }
        for d in RegionSpec::defaults() {
            if !self.regions.iter().any(|r| r.name == d.name) {
                let _ = writeln!(s, "region_{} =", d.name);
            }
        }
        s.push_str("\n# paths\n");
        if let Some(p) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {}", p.display());
        }
        if let Some(p) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", p.display());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_text(text: &str) -> RunConfig {
        let mut c = RunConfig::default();
        c.apply_text(text).unwrap();
        c
    }

    #[test]
    fn resolved_text_reproduces_the_config() {
        let c = from_text(
            "seed = 12  # shared\nlr_phase1 = 2e-3\nencoder_channels = 4,4,8,8\nregion_core = 3,4\nregion_enhancing =\nregion_active = 4,3\ndata_dir = /tmp/x\n",
        );
        assert_eq!(c.train.seed, 12);
        assert_eq!(
            c.regions
                .iter()
                .map(|r| r.name.as_str())
                .collect::<Vec<_>>(),
            ["complete", "core", "active"]
        );
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("learning_rate = 1").is_err());
        assert!(c.apply_text("region_bad = 0,1").is_err());
        assert!(c.apply_text("batch_size = three").is_err());
        assert!(c.apply_override("batch_size").is_err());
        c.apply_override("batch_size=5").unwrap();
        assert_eq!(c.train.batch_size, 5);
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut c = RunConfig::default();
        c.apply_text("lr_phase2 = 1e-3").unwrap();
        assert!(c.validate().is_err());
    }
}
