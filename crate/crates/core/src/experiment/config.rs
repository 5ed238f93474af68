//! Strict TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_blob_images, gen_multilabel_blobs, gen_two_moons, load_csv, load_dataset, BlobConfig,
    DataKind, Dataset, SplitSpec,
};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, Backbone};
use crate::perturb::PerturbConfig;
use crate::rng::{keyed, Stream};
use crate::trainer::TrainConfig;

pub const MAX_CELLS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Blobs,
    MultilabelBlobs,
    TwoMoons,
    /// An `.rcds` dataset file, or a headerless CSV with the label last.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub generator: Generator,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub imbalance_ratio: f64,
    /// Pixel noise for the image generators, coordinate noise for two moons.
    pub noise_sd: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Blobs,
            seed: 0,
            path: None,
            n: 1000,
            classes: 3,
            size: 12,
            imbalance_ratio: 1.0,
            noise_sd: None,
        }
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<Dataset> {
        let mut rng = keyed(self.seed, Stream::Data, &[]);
        match self.generator {
            Generator::Blobs => {
                let defaults = BlobConfig::default();
                let cfg = BlobConfig {
                    n: self.n,
                    classes: self.classes,
                    size: self.size,
                    imbalance_ratio: self.imbalance_ratio,
                    pixel_noise_sd: self.noise_sd.unwrap_or(defaults.pixel_noise_sd),
                    ..defaults
                };
                gen_blob_images(&cfg, &mut rng)
            }
            Generator::MultilabelBlobs => {
                gen_multilabel_blobs(self.n, self.size, self.noise_sd.unwrap_or(0.15), &mut rng)
            }
            Generator::TwoMoons => gen_two_moons(self.n, self.noise_sd.unwrap_or(0.1), &mut rng),
            Generator::File => {
                let path = self.path.as_deref().ok_or_else(|| {
                    Error::Config("dataset.path is required when generator = \"file\"".into())
                })?;
                if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                    load_csv(path)
                } else {
                    load_dataset(path)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.generator == Generator::File {
            match &self.path {
                None => {
                    return Err(Error::Config(
                        "dataset.path is required when generator = \"file\"".into(),
                    ))
                }
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("dataset.path {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        if self.noise_sd.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("dataset.noise_sd must be finite and >= 0".into()));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "dataset.imbalance_ratio must be finite and >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneChoice {
    /// Conv net for images, MLP for vectors.
    Auto,
    Mlp,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneChoice,
    pub hidden: Vec<usize>,
    pub channels: [usize; 2],
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneChoice::Auto,
            hidden: vec![32],
            channels: [8, 16],
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self, ds: &Dataset) -> Result<ArchSpec> {
        let image = ds.kind == DataKind::Image;
        let backbone = match (self.backbone, image) {
            (BackboneChoice::Conv, false) => {
                return Err(Error::Config("model.backbone = \"conv\" needs image data".into()))
            }
            (BackboneChoice::Conv, true) | (BackboneChoice::Auto, true) => Backbone::Conv {
                channels: self.channels,
            },
            _ => Backbone::Mlp {
                hidden: self.hidden.clone(),
            },
        };
        let input_shape = match backbone {
            Backbone::Mlp { .. } => vec![ds.sample_shape().iter().product()],
            Backbone::Conv { .. } => ds.sample_shape().to_vec(),
        };
        let spec = ArchSpec {
            input_shape,
            backbone,
            num_classes: ds.num_classes,
            dropout_rate: self.dropout,
        };
        spec.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(spec)
    }
}

/// Lists swept in a cross product; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub variant: Vec<String>,
    pub beta: Vec<f64>,
    pub labeled_fraction: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    /// Epoch indices after which relation matrices are dumped.
    pub dump_relations: Vec<usize>,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub perturb: PerturbConfig,
    pub model: ModelConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            dump_relations: Vec::new(),
            dataset: DatasetConfig::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            perturb: PerturbConfig::default(),
            model: ModelConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub beta: f64,
    pub fraction: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.split.validate().map_err(prefix("split."))?;
        self.train.validate()?;
        self.perturb.validate().map_err(prefix("perturb: "))?;
        if !(0.0..1.0).contains(&self.model.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must be in [0, 1), got {}",
                self.model.dropout
            )));
        }
        let cells = self.grid_size();
        if cells > MAX_CELLS {
            return Err(Error::Config(format!(
                "sweep has {cells} cells, more than the limit of {MAX_CELLS}"
            )));
        }
        for cell in self.cells() {
            self.cell_train(&cell).validate().map_err(prefix("sweep: "))?;
            self.cell_split(&cell).validate().map_err(prefix("sweep: "))?;
        }
        Ok(())
    }

    fn grid_size(&self) -> usize {
        let len = |n: usize| n.max(1);
        len(self.sweep.variant.len())
            * len(self.sweep.beta.len())
            * len(self.sweep.labeled_fraction.len())
            * len(self.sweep.seeds.len())
    }

    /// Full cross product in a fixed order: fraction, variant, beta, seed.
    pub fn cells(&self) -> Vec<Cell> {
        let or = |v: &Vec<f64>, base: f64| if v.is_empty() { vec![base] } else { v.clone() };
        let variants = if self.sweep.variant.is_empty() {
            vec![self.train.variant.clone()]
        } else {
            self.sweep.variant.clone()
        };
        let seeds = if self.sweep.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.sweep.seeds.clone()
        };
        let mut out = Vec::new();
        for fraction in or(&self.sweep.labeled_fraction, self.split.labeled_fraction) {
            for variant in &variants {
                for &beta in &or(&self.sweep.beta, self.train.beta) {
                    for &seed in &seeds {
                        out.push(Cell {
                            variant: variant.clone(),
                            beta,
                            fraction,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    /// The base cell repeated over the sweep seeds only.
    pub fn single_cell(&self) -> ExperimentConfig {
        ExperimentConfig {
            sweep: SweepConfig {
                seeds: self.sweep.seeds.clone(),
                ..SweepConfig::default()
            },
            ..self.clone()
        }
    }

    pub fn cell_train(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            variant: cell.variant.clone(),
            beta: cell.beta,
            seed: cell.seed,
            ..self.train.clone()
        }
    }

    pub fn cell_split(&self, cell: &Cell) -> SplitSpec {
        SplitSpec {
            labeled_fraction: cell.fraction,
            ..self.split.clone()
        }
    }

    /// Canonical TOML rendering, used as the config echo and for hashing.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Prepends `tag` to configuration errors, e.g. `split.` to qualify a key.
fn prefix(tag: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Config(msg) => Error::Config(format!("{tag}{msg}")),
        other => other,
    }
}

/// Line (1-based) of `key` inside `[section]`, or at top level when `section` is empty.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        let k = t.split('=').next().unwrap_or("").trim();
        if current == section && k == key {
            return Some(i + 1);
        }
    }
    None
}

/// Adds the source line to range errors of the form `section.key must ...`.
fn with_line(text: &str, err: Error) -> Error {
    let Error::Config(msg) = &err else { return err };
    let path = msg.split_whitespace().next().unwrap_or("");
    let (section, key) = path.split_once('.').unwrap_or(("", path));
    match locate(text, section, key.trim_end_matches(':')) {
        Some(line) => Error::Config(format!("line {line}: {msg}")),
        None => err,
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
    cfg.validate().map_err(|e| with_line(text, e))?;
    Ok(cfg)
}

/// Reads and validates a config; relative dataset paths resolve against the
/// config file's directory.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if let (Some(p), Some(dir)) = (&raw.dataset.path, path.parent()) {
        if p.is_relative() {
            raw.dataset.path = Some(dir.join(p));
        }
    }
    raw.validate().map_err(|e| with_line(&text, e))?;
    Ok(raw)
}
