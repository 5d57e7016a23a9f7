//! TOML run configuration.
//!
//! ```toml
//! [model]
//! input = [1, 56, 56]        # channels, height, width
//! keypoints = 4
//! grid = [7, 7]              # coarse head extent
//! taps = [2, 1]              # 1x1 taps, coarse to fine
//!
//! [[model.layers]]
//! out_channels = 8
//! kernel = 3                 # or [kh, kw]
//! stride = 2
//! pad = 1                    # optional, defaults to kernel / 2
//! nms = 2                    # optional group extent, or [gh, gw]
//!
//! [train]                    # every field optional
//! learning_rate = 0.01
//! momentum = 0.9
//! weight_decay = 0.0005
//! batch_size = 16
//! epochs = 10                # per coarse-to-fine stage
//! k = 2
//! lr_decay_per_finer_scale = 10.0
//! positive_radius = 1.0
//! seed = 0
//! stages = 3                 # optional, defaults to all scales
//!
//! [data]                     # generator settings, every field optional
//! n_samples = 2000
//! image_size = 56
//! n_keypoints = 4
//! occlusion_rate = 0.3
//! ambiguity = 1.0
//! noise_std = 0.05
//! seed = 0
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::{GroupShape, LayerConfig};
use crate::tensor::Dims;
use crate::train::{Architecture, TrainConfig};

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
enum Extent {
    Square(usize),
    Rect([usize; 2]),
}

impl Extent {
    fn pair(self) -> (usize, usize) {
        match self {
            Extent::Square(v) => (v, v),
            Extent::Rect([a, b]) => (a, b),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerToml {
    out_channels: usize,
    kernel: Extent,
    #[serde(default = "one")]
    stride: usize,
    pad: Option<Extent>,
    nms: Option<Extent>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelToml {
    input: [usize; 3],
    keypoints: usize,
    grid: Extent,
    #[serde(default)]
    taps: Vec<usize>,
    layers: Vec<LayerToml>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainToml {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    batch_size: usize,
    epochs: usize,
    k: usize,
    lr_decay_per_finer_scale: f64,
    positive_radius: f64,
    seed: u64,
    stages: Option<usize>,
}

impl Default for TrainToml {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainToml {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            epochs: d.epochs,
            k: d.k,
            lr_decay_per_finer_scale: d.lr_decay_per_finer_scale,
            positive_radius: d.positive_radius,
            seed: d.seed,
            stages: d.stages,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataToml {
    n_samples: usize,
    image_size: usize,
    n_keypoints: usize,
    occlusion_rate: f64,
    ambiguity: f64,
    noise_std: f64,
    seed: u64,
}

impl Default for DataToml {
    fn default() -> Self {
        let d = DatasetSpec::default();
        DataToml {
            n_samples: d.n_samples,
            image_size: d.image_size,
            n_keypoints: d.n_keypoints,
            occlusion_rate: d.occlusion_rate,
            ambiguity: d.ambiguity,
            noise_std: d.noise_std,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunToml {
    model: ModelToml,
    #[serde(default)]
    train: TrainToml,
    #[serde(default)]
    data: DataToml,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RunToml = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let m = raw.model;
        let input = Dims::new(m.input[0], m.input[1], m.input[2]);
        let mut channels = input.channels;
        let mut layers = Vec::with_capacity(m.layers.len());
        for (n, l) in m.layers.iter().enumerate() {
            let kernel = l.kernel.pair();
            let pad = l.pad.map_or((kernel.0 / 2, kernel.1 / 2), Extent::pair);
            let nms = l.nms.map(|g| {
                let (h, w) = g.pair();
                GroupShape { h, w }
            });
            if nms.is_some_and(|g| g.h == 0 || g.w == 0) {
                return Err(config_err(format!(
                    "model.layers[{n}]: nms extent must be positive"
                )));
            }
            layers.push(LayerConfig {
                in_channels: channels,
                out_channels: l.out_channels,
                kernel,
                stride: l.stride,
                pad,
                nms,
            });
            channels = l.out_channels;
        }
        let architecture = Architecture {
            input,
            layers,
            keypoints: m.keypoints,
            grid: m.grid.pair(),
            taps: m.taps,
        };
        architecture
            .build()
            .map_err(|e| config_err(format!("[model]: {e}")))?;
        let t = raw.train;
        let train = TrainConfig {
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            k: t.k,
            lr_decay_per_finer_scale: t.lr_decay_per_finer_scale,
            positive_radius: t.positive_radius,
            seed: t.seed,
            stages: t.stages,
        };
        train
            .validate()
            .map_err(|e| config_err(format!("[train]: {e}")))?;
        let d = raw.data;
        let data = DatasetSpec {
            n_samples: d.n_samples,
            image_size: d.image_size,
            n_keypoints: d.n_keypoints,
            occlusion_rate: d.occlusion_rate,
            ambiguity: d.ambiguity,
            noise_std: d.noise_std,
            seed: d.seed,
        };
        data.validate()
            .map_err(|e| config_err(format!("[data]: {e}")))?;
        Ok(RunConfig {
            architecture,
            train,
            data,
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// The default desk-scale setup: three stride-2 layers on 56x56 inputs,
/// NMS on the lower two, a 7x7 coarse head and taps on layers 2 and 1.
pub const DEFAULT_CONFIG: &str = r#"
[model]
input = [1, 56, 56]
keypoints = 4
grid = [7, 7]
taps = [2, 1]

[[model.layers]]
out_channels = 8
kernel = 3
stride = 2
nms = 2

[[model.layers]]
out_channels = 16
kernel = 3
stride = 2
nms = 2

[[model.layers]]
out_channels = 16
kernel = 3
stride = 2

[train]
learning_rate = 0.2
momentum = 0.9
weight_decay = 0.0005
batch_size = 16
epochs = 6
k = 2
lr_decay_per_finer_scale = 10.0
positive_radius = 2.0
seed = 0

[data]
n_samples = 2000
image_size = 56
n_keypoints = 4
occlusion_rate = 0.3
ambiguity = 1.0
noise_std = 0.05
seed = 0
"#;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_toml_str(DEFAULT_CONFIG).expect("built-in config is valid")
    }
}
