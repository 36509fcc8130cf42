//! Pipeline configuration, stored as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::forest::ForestParams;
use crate::mlp::{TrainParams, HIDDEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Small two-conv network with seeded random weights.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub input_side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Desk,
            input_side: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            lr: 0.2,
            momentum: 0.5,
            epochs: 100,
            batch_size: 64,
            hidden: HIDDEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    /// Caps the regions used to grow the forest; a seeded subset is drawn
    /// when more are available.
    pub max_samples: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        let p = ForestParams::default();
        ForestConfig {
            n_trees: p.n_trees,
            max_depth: p.max_depth,
            min_leaf: p.min_leaf,
            features_per_split: p.features_per_split,
            bootstrap: p.bootstrap,
            max_samples: None,
        }
    }
}

/// Relative sizes of the train, validation and test splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 5,
            val: 1,
            test: 4,
        }
    }
}

impl SplitRatios {
    /// Items per split for a dataset of `n` items, as (train, val, test).
    /// Validation and test sizes round to nearest; training takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let total = (self.train + self.val + self.test) as f64;
        let share = |r: u32| ((n as f64 * r as f64 / total).round() as usize).min(n);
        let mut val = share(self.val);
        let mut test = share(self.test);
        if self.val > 0 && val == 0 && n >= 2 {
            val = 1;
        }
        while val + test > n.saturating_sub(1) && test > 0 {
            test -= 1;
        }
        while val + test > n.saturating_sub(1) && val > 0 {
            val -= 1;
        }
        (n - val - test, val, test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of segmentation levels.
    pub levels: usize,
    /// Region-count target of the finest level.
    pub finest: usize,
    /// Region-count target of the coarsest level.
    pub coarsest: usize,
    /// Minimum fraction of same-label pixels for a training region.
    pub purity: f64,
    pub backbone: BackboneConfig,
    pub mlp: MlpConfig,
    pub forest: ForestConfig,
    pub crf: CrfParams,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            levels: 15,
            finest: 300,
            coarsest: 20,
            purity: 0.7,
            backbone: BackboneConfig::default(),
            mlp: MlpConfig::default(),
            forest: ForestConfig::default(),
            crf: CrfParams::default(),
            split: SplitRatios::default(),
            seed: 0,
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("config: {what}")))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check((1..=64).contains(&self.levels), "levels must be in 1..=64")?;
        check(self.coarsest >= 1, "coarsest must be at least 1")?;
        check(self.finest >= self.coarsest, "finest must be >= coarsest")?;
        check(self.purity > 0.5 && self.purity <= 1.0, "purity must be in (0.5, 1]")?;
        check(
            self.backbone.input_side >= 4 && self.backbone.input_side % 4 == 0,
            "backbone input_side must be a positive multiple of 4",
        )?;
        let m = &self.mlp;
        check(m.lr > 0.0 && m.lr.is_finite(), "mlp lr must be positive")?;
        check((0.0..1.0).contains(&m.momentum), "mlp momentum must be in [0, 1)")?;
        check(m.batch_size >= 1, "mlp batch_size must be at least 1")?;
        check(m.hidden >= 1, "mlp hidden must be at least 1")?;
        let f = &self.forest;
        check(f.n_trees >= 1, "forest n_trees must be at least 1")?;
        check(f.min_leaf >= 1, "forest min_leaf must be at least 1")?;
        check(f.max_depth != Some(0), "forest max_depth must be at least 1")?;
        check(f.features_per_split != Some(0), "forest features_per_split must be at least 1")?;
        check(f.max_samples != Some(0), "forest max_samples must be at least 1")?;
        self.crf.validate()?;
        check(self.split.train >= 1, "split train ratio must be at least 1")?;
        check(self.split.val >= 1, "split val ratio must be at least 1")?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn backbone_spec(&self, mean_rgb: [f64; 3]) -> BackboneSpec {
        match self.backbone.kind {
            BackboneKind::Desk => BackboneSpec::desk(self.backbone.input_side, mean_rgb, self.seed),
        }
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            lr: self.mlp.lr,
            momentum: self.mlp.momentum,
            epochs: self.mlp.epochs,
            batch_size: self.mlp.batch_size,
            hidden: (self.mlp.hidden, self.mlp.hidden),
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.forest.n_trees,
            max_depth: self.forest.max_depth,
            min_leaf: self.forest.min_leaf,
            features_per_split: self.forest.features_per_split,
            bootstrap: self.forest.bootstrap,
            seed: self.seed.wrapping_add(2),
        }
    }
}
