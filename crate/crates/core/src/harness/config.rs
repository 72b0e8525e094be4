//! Training configuration: TOML files plus dotted-key overrides.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Unknown keys, in the file or in overrides, are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::DatasetSpec;
use super::model::ModelSpec;
use crate::autodiff::SgdConfig;
use crate::error::{Error, Result};
use crate::prt::PrtConfig;
use crate::quant::{check_bits, BitsSource, QuantSpec, QuantizerKind, Rounding, TensorClass};
use crate::schedule::{LrSchedule, Pattern, PrecisionSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecisionConfig {
    pub pattern: Pattern,
    pub b_min: u32,
    pub b_max: u32,
    pub num_cycles: usize,
    pub per_iteration: bool,
    /// Static bits for errors and gradients.
    pub bw_bits: u32,
    /// Let errors/gradients follow the schedule over `[bw_min_bits, bw_bits]`.
    pub gradient_cpt: bool,
    pub bw_min_bits: u32,
    /// Forward bits stay at `b_min` before this epoch.
    pub cpt_start_epoch: usize,
    /// Forward bits used for test accuracy; defaults to `b_max`.
    pub eval_bits: Option<u32>,
}

impl Default for PrecisionConfig {
    fn default() -> Self {
        Self {
            pattern: Pattern::Cosine,
            b_min: 3,
            b_max: 8,
            num_cycles: 8,
            per_iteration: false,
            bw_bits: 8,
            gradient_cpt: false,
            bw_min_bits: 6,
            cpt_start_epoch: 0,
            eval_bits: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationPlacement {
    /// Layer inputs are quantized, i.e. activations after the nonlinearity.
    PostRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub weight: QuantizerKind,
    pub activation: QuantizerKind,
    pub activation_placement: ActivationPlacement,
    /// Rounding for weight gradients. Errors always round stochastically.
    pub gradient_rounding: Rounding,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight: QuantizerKind::MaxScaleSymmetric,
            activation: QuantizerKind::MaxScaleUnsigned,
            activation_placement: ActivationPlacement::PostRelu,
            gradient_rounding: Rounding::Stochastic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub model: ModelSpec,
    pub data: DatasetSpec,
    pub lr: LrSchedule,
    pub optimizer: SgdConfig,
    pub precision: PrecisionConfig,
    pub quant: QuantConfig,
    pub prt: PrtConfig,
    /// Write a checkpoint after every `n` epochs when an output directory is set.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            batch_size: 32,
            model: ModelSpec::Cnn,
            data: DatasetSpec::default(),
            lr: LrSchedule {
                stage_boundaries: vec![20, 30, 40],
                stage_lrs: vec![0.05, 0.005, 0.0005],
            },
            optimizer: SgdConfig::default(),
            precision: PrecisionConfig::default(),
            quant: QuantConfig::default(),
            prt: PrtConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.lr.validate()?;
        if self.lr.total_epochs() < self.epochs {
            return Err(Error::Config(format!(
                "lr schedule covers {} epochs, training runs {}",
                self.lr.total_epochs(),
                self.epochs
            )));
        }
        self.fw_schedule()?;
        let p = &self.precision;
        check_bits(p.bw_bits).map_err(|e| Error::Config(e.to_string()))?;
        if p.gradient_cpt {
            check_bits(p.bw_min_bits).map_err(|e| Error::Config(e.to_string()))?;
            if p.bw_min_bits > p.bw_bits {
                return Err(Error::Config("bw_min_bits exceeds bw_bits".into()));
            }
        }
        if p.cpt_start_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "cpt_start_epoch {} must precede the final epoch {}",
                p.cpt_start_epoch, self.epochs
            )));
        }
        if let Some(b) = p.eval_bits {
            check_bits(b).map_err(|e| Error::Config(e.to_string()))?;
        }
        for spec in self.quant_specs() {
            spec.validate(p.gradient_cpt)?;
        }
        Ok(())
    }

    pub fn fw_schedule(&self) -> Result<PrecisionSchedule> {
        let p = &self.precision;
        let mut s = PrecisionSchedule {
            b_min: p.b_min,
            b_max: p.b_max,
            total_epochs: self.epochs,
            num_cycles: p.num_cycles,
            pattern: p.pattern,
            per_iteration: p.per_iteration,
        };
        if s.pattern == Pattern::Static {
            s.b_min = s.b_max;
        }
        s.validate()?;
        Ok(s)
    }

    /// Quantizer settings per tensor class, with bit sources resolved.
    pub fn quant_specs(&self) -> [QuantSpec; 4] {
        let backward_bits = if self.precision.gradient_cpt {
            BitsSource::Schedule
        } else {
            BitsSource::Static(self.precision.bw_bits)
        };
        [
            QuantSpec {
                tensor_class: TensorClass::Weight,
                bits_source: BitsSource::Schedule,
                quantizer_kind: self.quant.weight,
                rounding: Rounding::NearestEven,
            },
            QuantSpec {
                tensor_class: TensorClass::Activation,
                bits_source: BitsSource::Schedule,
                quantizer_kind: self.quant.activation,
                rounding: Rounding::NearestEven,
            },
            QuantSpec {
                tensor_class: TensorClass::Error,
                bits_source: backward_bits,
                quantizer_kind: QuantizerKind::MaxScaleSymmetric,
                rounding: Rounding::Stochastic,
            },
            QuantSpec {
                tensor_class: TensorClass::Gradient,
                bits_source: backward_bits,
                quantizer_kind: QuantizerKind::MaxScaleSymmetric,
                rounding: self.quant.gradient_rounding,
            },
        ]
    }

    pub fn eval_bits(&self) -> u32 {
        self.precision.eval_bits.unwrap_or(self.precision.b_max)
    }

    /// SHA-256 of the canonical JSON form. Checkpoint frequency is left out
    /// since it does not change the run.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.checkpoint_every = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !overrides.is_empty() {
            // Overrides into a table the file leaves out start from the default
            // table, so `data.train_size=64` works without restating `data`.
            let defaults = toml::Table::try_from(TrainConfig::default())
                .map_err(|e| Error::Config(e.to_string()))?;
            for ov in overrides {
                let top = ov.split(['.', '=']).next().unwrap_or("").trim();
                if ov.split('=').next().is_some_and(|k| k.contains('.')) && !root.contains_key(top) {
                    if let Some(t @ toml::Value::Table(_)) = defaults.get(top) {
                        root.insert(top.to_string(), t.clone());
                    }
                }
                apply_override(&mut root, ov)?;
            }
        }
        let cfg: TrainConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Applies a precision shorthand such as `fw3-8_bw8`, `fw8_bw8` or `fw32_bw32`.
    pub fn with_precision_shorthand(mut self, code: &str) -> Result<Self> {
        let (fw, bw) = parse_precision_shorthand(code)?;
        let p = &mut self.precision;
        p.bw_bits = bw;
        match fw {
            (lo, hi) if lo == hi => {
                p.pattern = Pattern::Static;
                p.b_min = hi;
                p.b_max = hi;
            }
            (lo, hi) => {
                if p.pattern == Pattern::Static {
                    p.pattern = Pattern::Cosine;
                }
                p.b_min = lo;
                p.b_max = hi;
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn output_paths(dir: &Path) -> OutputPaths {
        OutputPaths {
            metrics_jsonl: dir.join("metrics.jsonl"),
            metrics_csv: dir.join("metrics.csv"),
            cost_json: dir.join("cost.json"),
            cost_csv: dir.join("cost_per_epoch.csv"),
            resolved_config: dir.join("resolved_config.toml"),
            checkpoint_dir: dir.join("checkpoints"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub metrics_jsonl: PathBuf,
    pub metrics_csv: PathBuf,
    pub cost_json: PathBuf,
    pub cost_csv: PathBuf,
    pub resolved_config: PathBuf,
    pub checkpoint_dir: PathBuf,
}

/// `fwA-B_bwC` or `fwA_bwC` into `((A, B), C)`.
pub fn parse_precision_shorthand(code: &str) -> Result<((u32, u32), u32)> {
    let bad = || Error::Config(format!("precision shorthand `{code}` is not like fw3-8_bw8"));
    let (fw, bw) = code.split_once('_').ok_or_else(bad)?;
    let fw = fw.strip_prefix("fw").ok_or_else(bad)?;
    let bw: u32 = bw.strip_prefix("bw").ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let (lo, hi) = match fw.split_once('-') {
        Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
        None => {
            let v: u32 = fw.parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    for b in [lo, hi, bw] {
        check_bits(b).map_err(|e| Error::Config(e.to_string()))?;
    }
    if lo > hi {
        return Err(bad());
    }
    Ok(((lo, hi), bw))
}

/// Sets `a.b.c = value`. The value is parsed as TOML, falling back to a bare
/// string. Whether the key exists is checked when the table is deserialized.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back = TrainConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(TrainConfig::from_toml_str("", &[]).unwrap(), cfg);
    }

    #[test]
    fn nested_override_starts_from_default_table() {
        let cfg = TrainConfig::from_toml_str("", &["data.train_size=64".into()]).unwrap();
        let mut want = TrainConfig::default();
        if let DatasetSpec::Digits { train_size, .. } = &mut want.data {
            *train_size = 64;
        }
        assert_eq!(cfg, want);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = TrainConfig::from_toml_str(
            "epochs = 10\n[lr]\nstage_boundaries = [10]\nstage_lrs = [0.1]\n",
            &[
                "precision.b_min=4".into(),
                "seed = 9".into(),
                "precision.pattern=triangular".into(),
                "num_cycles_typo=1".into(),
            ][..3],
        )
        .unwrap();
        assert_eq!(cfg.precision.b_min, 4);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.precision.pattern, Pattern::Triangular);

        for bad in ["precision.bogus=1", "nope=2", "precision=3", "epochs"] {
            assert!(
                matches!(TrainConfig::from_toml_str("", &[bad.to_string()]), Err(Error::Config(_))),
                "{bad}"
            );
        }
        assert!(TrainConfig::from_toml_str("mystery = 1", &[]).is_err());
    }

    #[test]
    fn dataset_and_model_tables() {
        let cfg = TrainConfig::from_toml_str(
            "[data]\nkind = \"bit_gated\"\nk = 4\ntrain_size = 100\ntest_size = 10\nseed = 1\n[model]\npreset = \"linear\"\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.model, ModelSpec::Linear);
        assert!(TrainConfig::from_toml_str(
            "[data]\nkind = \"bit_gated\"\nk = 4\ntrain_size = 100\ntest_size = 10\nseed = 1\nextra = 2\n",
            &[]
        )
        .is_err());
    }

    #[test]
    fn validation_rules() {
        let mut cfg = TrainConfig::default();
        cfg.precision.cpt_start_epoch = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 50;
        assert!(cfg.validate().is_err(), "lr schedule too short");
        let mut cfg = TrainConfig::default();
        cfg.precision.b_min = 9;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shorthand() {
        assert_eq!(parse_precision_shorthand("fw3-8_bw8").unwrap(), ((3, 8), 8));
        assert_eq!(parse_precision_shorthand("fw6_bw6").unwrap(), ((6, 6), 6));
        assert!(parse_precision_shorthand("fw8-3_bw8").is_err());
        assert!(parse_precision_shorthand("w3_b8").is_err());
        let cfg = TrainConfig::default().with_precision_shorthand("fw8_bw8").unwrap();
        assert_eq!(cfg.precision.pattern, Pattern::Static);
        assert_eq!(cfg.fw_schedule().unwrap().table(), vec![8; 40]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.checkpoint_every = Some(3);
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
