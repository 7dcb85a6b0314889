//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected, and
//! every value is validated before any compute starts. Slash-separated
//! lists follow the schedule notation (`schedule = 60/120`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::attention::OutputActivation;
use crate::backbone::{AttentionKind, BlockKind, FExt, NetworkConfig, StageSpec};
use crate::data::{CifarVariant, DataSpec, DIFFICULTY_MID};
use crate::error::{Error, Result};
use crate::forest::ForestHyperParams;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub trees: usize,
    /// Sample count (b_z) drawn from the dataset for trace capture.
    pub samples: usize,
    pub min_leaf: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            trees: 100,
            samples: 512,
            min_leaf: 2,
        }
    }
}

impl AnalysisOptions {
    pub fn forest_params(&self, seed: u64) -> ForestHyperParams {
        ForestHyperParams {
            tree_count: self.trees,
            min_leaf: self.min_leaf,
            seed,
            ..ForestHyperParams::default()
        }
    }
}

/// Everything a run needs: network, training, analysis, output directory.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisOptions,
    pub out: PathBuf,
}

fn parse_list(value: &str) -> Vec<&str> {
    value.split('/').filter(|s| !s.is_empty()).collect()
}

fn bad(key: &str, value: &str, wanted: &str) -> Error {
    Error::Config(format!("key '{key}': expected {wanted}, got '{value}'"))
}

struct KeyBag {
    map: HashMap<String, String>,
}

impl KeyBag {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, &v, "an unsigned integer")),
        }
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, &v, "an unsigned integer")),
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, &v, "a number")),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(bad(key, &v, "true or false")),
            },
        }
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let mut map: HashMap<String, String> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
    }
    build_config(map)
}

pub fn parse_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

fn build_config(map: HashMap<String, String>) -> Result<ExperimentConfig> {
    let mut bag = KeyBag { map };

    // --- network ------------------------------------------------------
    let channels: Vec<usize> = match bag.take("channels") {
        None => vec![16, 32, 64],
        Some(v) => parse_list(&v)
            .iter()
            .map(|s| s.parse().map_err(|_| bad("channels", &v, "a /-list of integers")))
            .collect::<Result<_>>()?,
    };
    if channels.is_empty() {
        return Err(Error::Config("channels list is empty".into()));
    }

    let block_kind = match bag.take("block").as_deref() {
        None | Some("basic") => BlockKind::Basic,
        Some("bottleneck") => BlockKind::Bottleneck,
        Some(v) => return Err(bad("block", v, "basic or bottleneck")),
    };

    let blocks_key = bag.take("blocks");
    let depth_key = bag.take("depth");
    let blocks: Vec<usize> = match (blocks_key, depth_key) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("give either 'blocks' or 'depth', not both".into()))
        }
        (Some(v), None) => {
            let list = parse_list(&v)
                .iter()
                .map(|s| s.parse().map_err(|_| bad("blocks", &v, "a /-list of integers")))
                .collect::<Result<Vec<usize>>>()?;
            match list.len() {
                1 => vec![list[0]; channels.len()],
                n if n == channels.len() => list,
                _ => {
                    return Err(Error::Config(format!(
                        "'blocks' lists {} stages but 'channels' lists {}",
                        list.len(),
                        channels.len()
                    )))
                }
            }
        }
        (None, Some(v)) => {
            let depth: usize = v.parse().map_err(|_| bad("depth", &v, "an integer"))?;
            let per_block = match block_kind {
                BlockKind::Basic => 2,
                BlockKind::Bottleneck => 3,
            };
            let stages = channels.len();
            if depth < 2 || (depth - 2) % (per_block * stages) != 0 {
                return Err(Error::Config(format!(
                    "depth {depth} does not decompose into {stages} stages of {per_block}-conv blocks"
                )));
            }
            vec![(depth - 2) / (per_block * stages); stages]
        }
        (None, None) => vec![3; channels.len()],
    };

    let stages: Vec<StageSpec> = channels
        .iter()
        .zip(&blocks)
        .enumerate()
        .map(|(i, (&c, &b))| StageSpec {
            channels: c,
            blocks: b,
            stride: if i == 0 { 1 } else { 2 },
        })
        .collect();

    let attention = match bag.take("attention").as_deref() {
        None | Some("dia_lstm") => AttentionKind::DiaLstm,
        Some("se") => AttentionKind::Se,
        Some("none") => AttentionKind::None,
        Some("standard_lstm") => AttentionKind::StandardLstm,
        Some(v) => return Err(bad("attention", v, "none, se, dia_lstm, or standard_lstm")),
    };
    let output_activation = match bag.take("output_activation").as_deref() {
        None | Some("sigmoid") => OutputActivation::Sigmoid,
        Some("tanh") => OutputActivation::Tanh,
        Some(v) => return Err(bad("output_activation", v, "sigmoid or tanh")),
    };
    let f_ext = match bag.take("f_ext").as_deref() {
        None | Some("gap") => FExt::Gap,
        Some("bn_gap") => FExt::BnGap,
        Some(v) => return Err(bad("f_ext", v, "gap or bn_gap")),
    };
    let dia_enabled_stages: Vec<usize> = match bag.take("dia_stages") {
        None => (0..stages.len()).collect(),
        Some(v) if v == "all" => (0..stages.len()).collect(),
        Some(v) => {
            let mut idx = Vec::new();
            for s in parse_list(&v) {
                let one_based: usize = s
                    .parse()
                    .map_err(|_| bad("dia_stages", &v, "a /-list of 1-based stage numbers"))?;
                if one_based == 0 {
                    return Err(bad("dia_stages", &v, "stage numbers starting at 1"));
                }
                idx.push(one_based - 1);
            }
            idx
        }
    };

    // --- dataset ------------------------------------------------------
    let dataset_name = bag.take("dataset").unwrap_or_else(|| "synth".to_string());
    let difficulty = bag.f64_or("difficulty", DIFFICULTY_MID)?;
    let data_path = bag.take("data_path");
    let explicit_classes = bag.take("classes");
    let classes = match explicit_classes {
        Some(v) => Some(v.parse::<usize>().map_err(|_| bad("classes", &v, "an integer"))?),
        None => None,
    };
    let data = match dataset_name.as_str() {
        "synth" => DataSpec::Synth {
            classes: classes.unwrap_or(10),
            difficulty,
        },
        "cifar10" | "cifar100" => {
            let variant = if dataset_name == "cifar10" {
                CifarVariant::C10
            } else {
                CifarVariant::C100
            };
            if let Some(k) = classes {
                if k != variant.classes() {
                    return Err(Error::Config(format!(
                        "'classes = {k}' contradicts dataset {dataset_name}"
                    )));
                }
            }
            let dir = data_path.ok_or_else(|| {
                Error::Config("CIFAR datasets need 'data_path = <dir with train.bin/test.bin>'".into())
            })?;
            DataSpec::Cifar {
                variant,
                dir: PathBuf::from(dir),
            }
        }
        other => return Err(bad("dataset", other, "synth, cifar10, or cifar100")),
    };

    let network = NetworkConfig {
        stages,
        block_kind,
        attention,
        reduction_ratio: bag.usize_or("reduction_ratio", 4)?,
        cells_per_unit: bag.usize_or("cells", 1)?,
        output_activation,
        f_ext,
        use_batch_norm: bag.bool_or("use_bn", true)?,
        skip_removal_fraction: bag.f64_or("skip_removal_fraction", 0.0)?,
        dia_enabled_stages,
        classes: data.classes(),
        force_attention_ones: false,
    };

    // --- training -----------------------------------------------------
    let schedule: Vec<usize> = match bag.take("schedule") {
        None => Vec::new(),
        Some(v) => parse_list(&v)
            .iter()
            .map(|s| s.parse().map_err(|_| bad("schedule", &v, "a /-list of epochs")))
            .collect::<Result<_>>()?,
    };
    let train = TrainConfig {
        batch_size: bag.usize_or("batch_size", 16)?,
        epochs: bag.usize_or("epoch", 3)?,
        lr: bag.f64_or("lr", 0.1)?,
        momentum: bag.f64_or("momentum", 0.9)?,
        weight_decay: bag.f64_or("wd", 1e-4)?,
        schedule,
        gamma: bag.f64_or("gamma", 0.1)?,
        augment: bag.bool_or("augment", false)?,
        seed: bag.u64_or("seed", 1)?,
        data,
        subset: bag.usize_or("subset", 2000)?,
        test_subset: bag.usize_or("test_subset", 1000)?,
        eval_interval: bag.usize_or("eval_interval", 1)?,
        max_steps: bag.usize_or("max_steps", 0)?,
        capture_attention_range: bag.bool_or("capture_attention", false)?,
        inject_nan_at_step: bag.usize_or("inject_nan_at_step", 0)?,
    };

    let analysis = AnalysisOptions {
        trees: bag.usize_or("trees", 100)?,
        samples: bag.usize_or("analysis_samples", 512)?,
        min_leaf: bag.usize_or("min_leaf", 2)?,
    };

    let out = PathBuf::from(bag.take("out").unwrap_or_else(|| "out".to_string()));

    if let Some(unknown) = bag.map.keys().next() {
        return Err(Error::Config(format!("unknown key '{unknown}'")));
    }

    network.validate()?;
    train.validate()?;
    Ok(ExperimentConfig {
        network,
        train,
        analysis,
        out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_the_desk_profile() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.network.stages.len(), 3);
        assert_eq!(cfg.network.stages[0].channels, 16);
        assert_eq!(cfg.network.stages[2].channels, 64);
        assert_eq!(cfg.network.attention, AttentionKind::DiaLstm);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.analysis.trees, 100);
    }

    #[test]
    fn parses_appendix_style_keys() {
        let text = "\
# a training run
batch_size = 128
epoch = 180
schedule = 60/120
wd = 1.0e-4
gamma = 0.1
lr = 0.1
f_ext = gap
attention = dia_lstm
reduction_ratio = 4
cells = 1
output_activation = sigmoid
depth = 20
use_bn = true
augment = true
seed = 7
dataset = synth
classes = 10
subset = 512
";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.train.epochs, 180);
        assert_eq!(cfg.train.schedule, vec![60, 120]);
        assert_eq!(cfg.network.stages.iter().map(|s| s.blocks).collect::<Vec<_>>(), vec![3, 3, 3]);
        assert!(cfg.train.augment);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            parse_config_str("no_such_key = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        assert!(parse_config_str("lr = 0.1\nlr = 0.2").is_err());
    }

    #[test]
    fn invalid_values_are_rejected_before_compute() {
        assert!(parse_config_str("gamma = 1.5").is_err());
        assert!(parse_config_str("schedule = 10/5").is_err());
        assert!(parse_config_str("attention = trellis").is_err());
        assert!(parse_config_str("blocks = 2/2").is_err(), "blocks/channels length clash");
        assert!(parse_config_str("blocks = 2\ndepth = 20").is_err());
        assert!(parse_config_str("dataset = cifar10").is_err(), "cifar needs data_path");
        assert!(parse_config_str("dataset = cifar10\ndata_path = d\nclasses = 7").is_err());
    }

    #[test]
    fn dia_stage_selection_is_one_based() {
        let cfg = parse_config_str("dia_stages = 1/3").unwrap();
        assert_eq!(cfg.network.dia_enabled_stages, vec![0, 2]);
        assert!(parse_config_str("dia_stages = 0").is_err());
        assert!(parse_config_str("dia_stages = 9").is_err(), "out of range");
    }

    #[test]
    fn depth_must_decompose() {
        assert!(parse_config_str("depth = 21").is_err());
        let cfg = parse_config_str("depth = 14").unwrap();
        assert_eq!(
            cfg.network.stages.iter().map(|s| s.blocks).collect::<Vec<_>>(),
            vec![2, 2, 2]
        );
    }
}
