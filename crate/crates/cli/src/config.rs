//! Run configuration: a single TOML file describes the dataset, the detector
//! and every training and evaluation knob. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tripatch::compositor::PlacementSpec;
use tripatch::data_io::{DatasetFormat, SyntheticConfig};
use tripatch::detector::{ToyDetector, ToyDetectorConfig};
use tripatch::evaluation::EvalProtocol;
use tripatch::losses::LossWeights;
use tripatch::optimizer::TrainConfig;

use crate::error::CliError;

/// Detector selection: `"toy"` or `"blackbox:<command line>"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DetectorSpec {
    Toy,
    /// Program followed by its arguments, split on whitespace.
    Blackbox(Vec<String>),
}

impl TryFrom<String> for DetectorSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "toy" {
            return Ok(Self::Toy);
        }
        match s.strip_prefix("blackbox:") {
            Some(cmd) => {
                let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
                if argv.is_empty() {
                    Err("blackbox detector needs a command after `blackbox:`".into())
                } else {
                    Ok(Self::Blackbox(argv))
                }
            }
            None => Err(format!("unknown detector `{s}`, expected `toy` or `blackbox:<command>`")),
        }
    }
}

impl From<DetectorSpec> for String {
    fn from(d: DetectorSpec) -> String {
        d.to_string()
    }
}

impl fmt::Display for DetectorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Toy => f.write_str("toy"),
            Self::Blackbox(argv) => write!(f, "blackbox:{}", argv.join(" ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub format: DatasetFormat,
    /// COCO annotation JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    /// Directory COCO `file_name`s are relative to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    #[serde(default = "default_person_category")]
    pub person_category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
    /// Per-image `name.txt` box files; defaults to `image_dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes_dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

fn default_person_category() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSpec {
    pub name: String,
    pub detector: DetectorSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSpec {
    /// Every `*.tpch` file in here becomes a row, named by its file stem.
    pub patch_dir: Option<PathBuf>,
    /// Adds a `clean` row evaluating the unpatched scenes.
    pub include_clean: bool,
    /// Columns; empty means the run's own detector, named `target`.
    pub victims: Vec<VictimSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSpec {
    pub epochs: Vec<usize>,
    /// Patch width as a fraction of the person-box width.
    pub patch_size: Vec<f64>,
    pub loss_weights: Vec<LossWeights>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSpec {
    fn default() -> Self {
        let w = |det, iou, nms| LossWeights {
            det,
            iou,
            nms,
            ..LossWeights::default()
        };
        Self {
            epochs: vec![1, 5, 25],
            patch_size: vec![0.1, 0.2, 0.3, 0.4],
            loss_weights: vec![
                w(1.0, 1.0, 0.5),
                w(0.5, 1.0, 0.5),
                w(2.0, 1.0, 0.5),
                w(1.0, 0.5, 0.5),
                w(1.0, 2.0, 0.5),
                w(1.0, 1.0, 0.25),
                w(1.0, 1.0, 1.0),
            ],
            seeds: vec![42, 7, 123, 203],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Not echoed into outputs, so a rerun into another directory produces
    /// identical files.
    #[serde(default, skip_serializing)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_detector")]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub toy: ToyDetectorConfig,
    #[serde(default = "default_timeout")]
    pub adapter_timeout_secs: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    #[serde(default)]
    pub transfer: TransferSpec,
    #[serde(default)]
    pub ablate: AblateSpec,
}

fn default_detector() -> DetectorSpec {
    DetectorSpec::Toy
}

fn default_timeout() -> f64 {
    60.0
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn require_path(field: &str, p: &Option<PathBuf>, format: &str) -> Result<(), CliError> {
    match p {
        None => Err(CliError::config(format!("{field}: required for dataset format {format}"))),
        Some(path) if !path.exists() => Err(CliError::config(format!("{field}: {} does not exist", path.display()))),
        Some(_) => Ok(()),
    }
}

impl RunConfig {
    /// Reads, resolves relative paths against the file's directory, applies
    /// the seed override and validates.
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.out_dir,
            &mut cfg.dataset.annotations,
            &mut cfg.dataset.image_root,
            &mut cfg.dataset.image_dir,
            &mut cfg.dataset.boxes_dir,
            &mut cfg.transfer.patch_dir,
        ] {
            resolve(base, p);
        }
        if let Some(seed) = seed_override.or(cfg.seed) {
            cfg.seed = Some(seed);
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        match d.format {
            DatasetFormat::CocoJson => {
                require_path("dataset.annotations", &d.annotations, "coco-json")?;
                require_path("dataset.image_root", &d.image_root, "coco-json")?;
            }
            DatasetFormat::BoxfileDir => {
                require_path("dataset.image_dir", &d.image_dir, "boxfile-dir")?;
                if d.boxes_dir.is_some() {
                    require_path("dataset.boxes_dir", &d.boxes_dir, "boxfile-dir")?;
                }
            }
            DatasetFormat::Synthetic => {
                let (lo, hi) = d.synthetic.contrast_range;
                if d.synthetic.count == 0 {
                    return Err(CliError::config("dataset.synthetic.count must be >= 1"));
                }
                if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                    return Err(CliError::config(
                        "dataset.synthetic.contrast_range must satisfy 0 < lo <= hi <= 1",
                    ));
                }
            }
        }
        self.train.validate()?;
        self.eval.validate()?;
        ToyDetector::new(self.toy.clone())?;
        if !(self.adapter_timeout_secs.is_finite() && self.adapter_timeout_secs > 0.0) {
            return Err(CliError::config("adapter_timeout_secs must be > 0"));
        }
        let a = &self.ablate;
        if a.epochs.contains(&0) {
            return Err(CliError::config("ablate.epochs entries must be >= 1"));
        }
        for &beta in &a.patch_size {
            PlacementSpec {
                scale_fraction: beta,
                ..self.train.placement
            }
            .validate()
            .map_err(|_| CliError::config(format!("ablate.patch_size entry {beta} must be in (0, 1]")))?;
        }
        for w in &a.loss_weights {
            w.validate().map_err(|e| CliError::config(format!("ablate.loss_weights: {e}")))?;
        }
        for v in &self.transfer.victims {
            if v.name.is_empty() {
                return Err(CliError::config("transfer.victims[].name must not be empty"));
            }
        }
        Ok(())
    }

    pub fn adapter_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.adapter_timeout_secs)
    }
}
