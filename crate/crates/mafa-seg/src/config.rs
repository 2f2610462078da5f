//! Experiment configuration: a flat `section.key = value` text format with
//! defaults for every field, so an empty file is a valid configuration. The
//! resolved configuration is written back into every output directory so a
//! run is reproducible from its artifacts alone.

use crate::error::{Error, Result};
use crate::geometry::RotationMode;
use crate::mafa::{Aggregation, Placement};
use crate::model::ModelConfig;
use crate::optim::LrSchedule;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: LrSchedule,
    /// Photometric + flip/zoom augmentation on training samples.
    pub augment: bool,
    /// Random-rotation augmentation (independent switch for ablations).
    pub rotation_augment: bool,
    /// Add the contour Dice term to the loss.
    pub contour_supervision: bool,
    pub contour_width: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            seed: 0,
            lr: LrSchedule::default(),
            augment: true,
            rotation_augment: true,
            contour_supervision: true,
            contour_width: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]>
where
    T: Copy + Default,
{
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::Config(format!(
            "{key}: expected {N} comma-separated values, got {v:?}"
        )));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_num(key, p)?;
    }
    Ok(out)
}

impl ExperimentConfig {
    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model.input_size" => self.model.input_size = parse_num(key, v)?,
            "model.in_channels" => self.model.in_channels = parse_num(key, v)?,
            "model.widths" => self.model.widths = parse_list(key, v)?,
            "model.skip_channels" => self.model.skip_channels = parse_num(key, v)?,
            "model.aspp_channels" => self.model.aspp_channels = parse_num(key, v)?,
            "model.atrous_rates" => self.model.atrous_rates = parse_list(key, v)?,
            "model.decoder_widths" => self.model.decoder_widths = parse_list(key, v)?,
            "model.batchnorm" => self.model.batchnorm = parse_bool(key, v)?,
            "model.dropout_keep" => self.model.dropout_keep = parse_num(key, v)?,
            "mafa.n_angles" => self.model.mafa.n_angles = parse_num(key, v)?,
            "mafa.aggregation" => {
                self.model.mafa.aggregation = match v {
                    "mean" => Aggregation::Mean,
                    "max_out" => Aggregation::MaxOut,
                    _ => return Err(Error::Config(format!("{key}: unknown mode {v:?}"))),
                }
            }
            "mafa.rotation_mode" => {
                self.model.mafa.rotation_mode = match v {
                    "exact_quarter" => RotationMode::ExactQuarter,
                    "bilinear" => RotationMode::Bilinear,
                    _ => return Err(Error::Config(format!("{key}: unknown mode {v:?}"))),
                }
            }
            "mafa.placement" => {
                self.model.mafa.placement = match v {
                    "encoder_output" => Placement::EncoderOutput,
                    "backbone_mid" => Placement::BackboneMid,
                    "backbone_last" => Placement::BackboneLast,
                    _ => return Err(Error::Config(format!("{key}: unknown placement {v:?}"))),
                }
            }
            "train.epochs" => self.train.epochs = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.seed" => self.train.seed = parse_num(key, v)?,
            "train.lr.base" => self.train.lr.base = parse_num(key, v)?,
            "train.lr.decay" => self.train.lr.decay = parse_num(key, v)?,
            "train.lr.step_epochs" => self.train.lr.step_epochs = parse_num(key, v)?,
            "train.augment" => self.train.augment = parse_bool(key, v)?,
            "train.rotation_augment" => self.train.rotation_augment = parse_bool(key, v)?,
            "train.contour_supervision" => self.train.contour_supervision = parse_bool(key, v)?,
            "train.contour_width" => self.train.contour_width = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse the flat text format: one `key = value` per line, `#` comments,
    /// blank lines ignored. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Serialize every field, defaults included, in parse order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let agg = match m.mafa.aggregation {
            Aggregation::Mean => "mean",
            Aggregation::MaxOut => "max_out",
        };
        let rot = match m.mafa.rotation_mode {
            RotationMode::ExactQuarter => "exact_quarter",
            RotationMode::Bilinear => "bilinear",
        };
        let place = match m.mafa.placement {
            Placement::EncoderOutput => "encoder_output",
            Placement::BackboneMid => "backbone_mid",
            Placement::BackboneLast => "backbone_last",
        };
        format!(
            "model.input_size = {}\n\
             model.in_channels = {}\n\
             model.widths = {},{},{}\n\
             model.skip_channels = {}\n\
             model.aspp_channels = {}\n\
             model.atrous_rates = {},{}\n\
             model.decoder_widths = {},{}\n\
             model.batchnorm = {}\n\
             model.dropout_keep = {}\n\
             mafa.n_angles = {}\n\
             mafa.aggregation = {agg}\n\
             mafa.rotation_mode = {rot}\n\
             mafa.placement = {place}\n\
             train.epochs = {}\n\
             train.batch_size = {}\n\
             train.seed = {}\n\
             train.lr.base = {}\n\
             train.lr.decay = {}\n\
             train.lr.step_epochs = {}\n\
             train.augment = {}\n\
             train.rotation_augment = {}\n\
             train.contour_supervision = {}\n\
             train.contour_width = {}\n",
            m.input_size,
            m.in_channels,
            m.widths[0],
            m.widths[1],
            m.widths[2],
            m.skip_channels,
            m.aspp_channels,
            m.atrous_rates[0],
            m.atrous_rates[1],
            m.decoder_widths[0],
            m.decoder_widths[1],
            m.batchnorm,
            m.dropout_keep,
            m.mafa.n_angles,
            t.epochs,
            t.batch_size,
            t.seed,
            t.lr.base,
            t.lr.decay,
            t.lr.step_epochs,
            t.augment,
            t.rotation_augment,
            t.contour_supervision,
            t.contour_width,
        )
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Write the resolved configuration into an output directory.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(out_dir.join("config.resolved.txt"), self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.lr.base, 0.0005);
        assert_eq!(cfg.model.input_size, 96);
        assert_eq!(cfg.model.mafa.n_angles, 4);
    }

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.widths = [8, 16, 32];
        cfg.model.mafa.n_angles = 6;
        cfg.model.mafa.rotation_mode = RotationMode::Bilinear;
        cfg.model.mafa.aggregation = Aggregation::MaxOut;
        cfg.model.mafa.placement = Placement::BackboneMid;
        cfg.train.epochs = 12;
        cfg.train.contour_supervision = false;
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = ExperimentConfig::parse(
            "# a comment\n\n  train.epochs = 3   # trailing comment\nmafa.aggregation=max_out\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.mafa.aggregation, Aggregation::MaxOut);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("nonsense").is_err());
        assert!(ExperimentConfig::parse("unknown.key = 1").is_err());
        assert!(ExperimentConfig::parse("train.epochs = soon").is_err());
        assert!(ExperimentConfig::parse("model.widths = 1,2").is_err());
        assert!(ExperimentConfig::parse("mafa.aggregation = median").is_err());
        // cross-field validation: five angles need bilinear rotation
        assert!(ExperimentConfig::parse("mafa.n_angles = 5").is_err());
        assert!(
            ExperimentConfig::parse("mafa.n_angles = 5\nmafa.rotation_mode = bilinear").is_ok()
        );
    }

    #[test]
    fn resolved_file_lands_in_output_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        cfg.write_resolved(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("config.resolved.txt")).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }
}
