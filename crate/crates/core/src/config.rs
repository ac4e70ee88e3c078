//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Unknown and duplicate keys are
//! rejected. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{GarError, Result};
use crate::model::{Aggregator, EarlyPe, FusionMode, ModelConfig, PeStage};
use crate::rng::derive_seed;
use crate::scenes::{DatasetHeader, LabelRule, SceneConfig};
use crate::training::{OptimizerKind, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "root seed; per-purpose streams are derived from it"),
    ("scene.rule", "key-actor | majority"),
    ("scene.count", "number of scenes to generate"),
    ("scene.train_fraction", "fraction of scenes (by id) assigned to the training split"),
    ("scene.min_actors", "fewest actors per scene"),
    ("scene.max_actors", "most actors per scene"),
    ("scene.num_actions", "individual action classes"),
    ("scene.num_activities", "group activity classes"),
    ("scene.branch_dims", "feature width of each branch, e.g. 16,16"),
    ("scene.noise", "feature noise standard deviation"),
    ("scene.complementary", "true to make branches complementary"),
    ("scene.frames", "clip length metadata"),
    ("model.branches", "scene branches consumed by the model, e.g. 0 or 0,1"),
    ("model.d_model", "embedding width"),
    ("model.num_heads", "attention heads per layer"),
    ("model.num_layers", "encoder layers"),
    ("model.d_ff", "feed-forward width"),
    ("model.dropout", "dropout rate"),
    ("model.use_pe", "true to add positional encodings"),
    ("model.pe_scale", "positional encoding scale"),
    ("model.pe_stage", "after-embed | before-embed"),
    ("model.early_pe", "after-fusion | per-branch"),
    ("model.aggregator", "transformer | maxpool"),
    ("model.fusion", "none | early-sum | early-concat | late"),
    ("model.late_weights", "late-fusion weight per branch, e.g. 2,1"),
    ("train.optimizer", "sgd | adam"),
    ("train.momentum", "SGD momentum"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.epsilon", "Adam epsilon"),
    ("train.lr_schedule", "iteration:lr pairs, e.g. 0:0.01,10000:0.001"),
    ("train.batch_size", "scenes per mini-batch"),
    ("train.iterations", "total optimizer steps"),
    ("train.lambda_group", "group activity loss weight"),
    ("train.lambda_action", "individual action loss weight"),
    ("data.train", "training dataset file"),
    ("data.test", "evaluation dataset file"),
    ("ablate.layers", "encoder layer counts to sweep"),
    ("ablate.heads", "head counts to sweep"),
    ("ablate.pe", "positional encoding settings to sweep (on/off)"),
    ("ablate.fusion", "fusion modes to sweep"),
    ("ablate.aggregator", "aggregators to sweep"),
    ("ablate.seeds", "model seeds per grid cell"),
    ("attention.scenes", "scene ids for attention-dump"),
];

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// `true/false`, `on/off`, `yes/no` or `1/0`.
pub fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

pub(crate) fn list_text<V: Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| GarError::Parse {
                source_name: source.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !known(k) {
                return Err(err(format!("unknown key '{k}'")));
            }
            if cfg.values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(format!("duplicate key '{k}'")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GarError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Overrides or adds a setting.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !known(key) {
            return Err(GarError::Config(format!("unknown key '{key}'")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse_value<V: FromStr>(key: &str, v: &str) -> Result<V> {
        v.parse()
            .map_err(|_| GarError::Config(format!("invalid value '{v}' for {key}")))
    }

    fn value<V: FromStr>(&self, key: &str) -> Result<Option<V>> {
        self.get(key).map(|v| Self::parse_value(key, v)).transpose()
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| parse_flag(v).ok_or_else(|| GarError::Config(format!("invalid flag '{v}' for {key}"))))
            .transpose()
    }

    fn list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>> {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(|x| Self::parse_value(key, x.trim()))
                    .collect::<Result<Vec<V>>>()
            })
            .transpose()
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| GarError::Config(format!("missing required key '{key}'")))
    }

    pub fn seed(&self) -> Result<u64> {
        Ok(self.value("seed")?.unwrap_or(0))
    }

    /// Scene settings; `scene.rule` is required and picks the preset that
    /// the remaining keys override.
    pub fn scene_config(&self) -> Result<SceneConfig> {
        let rule: LabelRule = self.require("scene.rule")?.parse()?;
        let seed = derive_seed(self.seed()?, "data", &[]);
        let mut c = match rule {
            LabelRule::KeyActor => SceneConfig::volleyball_like(seed),
            LabelRule::Majority => SceneConfig::collective_like(seed),
        };
        macro_rules! over {
            ($key:literal, $field:ident) => {
                if let Some(v) = self.value($key)? {
                    c.$field = v;
                }
            };
        }
        over!("scene.min_actors", min_actors);
        over!("scene.max_actors", max_actors);
        over!("scene.num_actions", num_actions);
        over!("scene.num_activities", num_activities);
        over!("scene.noise", noise);
        over!("scene.frames", frames);
        if let Some(d) = self.list("scene.branch_dims")? {
            c.branch_dims = d;
        }
        if let Some(b) = self.flag("scene.complementary")? {
            c.complementary = b;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn scene_count(&self) -> Result<usize> {
        let n = self.value("scene.count")?.unwrap_or(5000);
        if n == 0 {
            return Err(GarError::Data("scene.count is zero: dataset would be empty".into()));
        }
        Ok(n)
    }

    pub fn train_fraction(&self) -> Result<f64> {
        let f: f64 = self.value("scene.train_fraction")?.unwrap_or(0.72);
        if !(0.0..=1.0).contains(&f) {
            return Err(GarError::Config(format!("train fraction {f} not in [0, 1]")));
        }
        Ok(f)
    }

    /// Model settings; class counts and branch widths come from the dataset.
    pub fn model_config(&self, header: &DatasetHeader) -> Result<ModelConfig> {
        let fusion_name = self.get("model.fusion").unwrap_or("none");
        let all: Vec<usize> = (0..header.branch_dims.len()).collect();
        let branches: Vec<usize> = match self.list("model.branches")? {
            Some(b) => b,
            None if fusion_name == "none" => vec![0],
            None => all,
        };
        let branch_dims = branches
            .iter()
            .map(|&b| {
                header.branch_dims.get(b).copied().ok_or_else(|| {
                    GarError::Config(format!("dataset has no branch {b}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = match fusion_name {
            "none" => FusionMode::None,
            "early-sum" => FusionMode::EarlySum,
            "early-concat" => FusionMode::EarlyConcat,
            "late" => FusionMode::Late {
                weights: match self.list("model.late_weights")? {
                    Some(w) => w,
                    None => default_late_weights(branches.len()),
                },
            },
            other => return Err(GarError::Config(format!("unknown fusion mode '{other}'"))),
        };
        let mut c = ModelConfig {
            branches,
            branch_dims,
            num_actions: header.num_actions,
            num_activities: header.num_activities,
            fusion,
            ..ModelConfig::default()
        };
        macro_rules! over {
            ($key:literal, $field:ident) => {
                if let Some(v) = self.value($key)? {
                    c.$field = v;
                }
            };
        }
        over!("model.d_model", d_model);
        over!("model.num_heads", num_heads);
        over!("model.num_layers", num_layers);
        over!("model.d_ff", d_ff);
        over!("model.dropout", dropout);
        over!("model.pe_scale", pe_scale);
        if let Some(v) = self.value::<PeStage>("model.pe_stage")? {
            c.pe_stage = v;
        }
        if let Some(v) = self.value::<EarlyPe>("model.early_pe")? {
            c.early_pe = v;
        }
        if let Some(v) = self.value::<Aggregator>("model.aggregator")? {
            c.aggregator = v;
        }
        if let Some(b) = self.flag("model.use_pe")? {
            c.use_pe = b;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let seed = self.seed()?;
        let mut c = match self.get("train.optimizer").unwrap_or("sgd") {
            "sgd" => TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            "adam" => TrainConfig::adam_collective(seed),
            other => return Err(GarError::Config(format!("unknown optimizer '{other}'"))),
        };
        match &mut c.optimizer {
            OptimizerKind::SgdMomentum { momentum } => {
                if let Some(v) = self.value("train.momentum")? {
                    *momentum = v;
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if let Some(v) = self.value("train.beta1")? {
                    *beta1 = v;
                }
                if let Some(v) = self.value("train.beta2")? {
                    *beta2 = v;
                }
                if let Some(v) = self.value("train.epsilon")? {
                    *epsilon = v;
                }
            }
        }
        if let Some(s) = self.get("train.lr_schedule") {
            c.schedule = s.parse()?;
        }
        if let Some(v) = self.value("train.batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = self.value("train.iterations")? {
            c.iterations = v;
        }
        if let Some(v) = self.value("train.lambda_group")? {
            c.lambda_group = v;
        }
        if let Some(v) = self.value("train.lambda_action")? {
            c.lambda_action = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn ablation_grid(&self) -> Result<AblationGrid> {
        let pe = match self.get("ablate.pe") {
            Some(v) => v
                .split(',')
                .map(|x| {
                    parse_flag(x.trim())
                        .ok_or_else(|| GarError::Config(format!("invalid flag '{x}' in ablate.pe")))
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(AblationGrid {
            layers: self.list("ablate.layers")?.unwrap_or_default(),
            heads: self.list("ablate.heads")?.unwrap_or_default(),
            pe,
            fusion: self
                .get("ablate.fusion")
                .map(|v| v.split(',').map(|s| s.trim().to_string()).collect())
                .unwrap_or_default(),
            aggregator: self.list("ablate.aggregator")?.unwrap_or_default(),
            seeds: match self.list("ablate.seeds")? {
                Some(s) => s,
                None => vec![self.seed()?],
            },
        })
    }

    pub fn attention_scenes(&self) -> Result<Option<Vec<u64>>> {
        self.list("attention.scenes")
    }
}

/// Static branch weighted twice as much as each dynamic branch.
pub fn default_late_weights(branches: usize) -> Vec<f64> {
    (0..branches).map(|b| if b == 0 { 2.0 } else { 1.0 }).collect()
}

/// Sweep axes; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationGrid {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
    pub pe: Vec<bool>,
    pub fusion: Vec<String>,
    pub aggregator: Vec<Aggregator>,
    pub seeds: Vec<u64>,
}

/// One grid cell: the overrides it applies and the model seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub overrides: Vec<(&'static str, String)>,
    pub seed: u64,
}

impl AblationCell {
    /// `key=value;...` over the overridden keys, in a fixed order.
    pub fn key(&self) -> String {
        self.overrides
            .iter()
            .map(|(k, v)| format!("{}={v}", k.trim_start_matches("model.")))
            .collect::<Vec<_>>()
            .join(";")
    }
}

impl AblationGrid {
    /// Cartesian product of all non-empty axes, sorted by config key then seed.
    pub fn cells(&self) -> Vec<AblationCell> {
        let axes: Vec<(&'static str, Vec<String>)> = [
            ("model.num_layers", self.layers.iter().map(|v| v.to_string()).collect::<Vec<_>>()),
            ("model.num_heads", self.heads.iter().map(|v| v.to_string()).collect()),
            ("model.use_pe", self.pe.iter().map(|&b| if b { "on" } else { "off" }.to_string()).collect()),
            ("model.fusion", self.fusion.clone()),
            ("model.aggregator", self.aggregator.iter().map(|a| a.to_string()).collect()),
        ]
        .into_iter()
        .filter(|(_, vals)| !vals.is_empty())
        .collect();

        let mut combos: Vec<Vec<(&'static str, String)>> = vec![Vec::new()];
        for (key, vals) in &axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    vals.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((*key, v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut cells: Vec<AblationCell> = combos
            .into_iter()
            .flat_map(|overrides| {
                self.seeds.iter().map(move |&seed| AblationCell {
                    overrides: overrides.clone(),
                    seed,
                })
            })
            .collect();
        cells.sort_by(|a, b| a.key().cmp(&b.key()).then(a.seed.cmp(&b.seed)));
        cells.dedup();
        cells
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> DatasetHeader {
        DatasetHeader {
            rule: LabelRule::KeyActor,
            seed: 0,
            noise: 0.5,
            frames: 10,
            num_actions: 9,
            num_activities: 8,
            branch_dims: vec![16, 12],
        }
    }

    #[test]
    fn parses_comments_and_rejects_unknown_or_duplicate_keys() {
        let c = RunConfig::parse("# run\nseed = 7  # root\n\nmodel.d_model=32\n", "t").unwrap();
        assert_eq!(c.seed().unwrap(), 7);
        assert_eq!(c.get("model.d_model"), Some("32"));
        assert!(matches!(
            RunConfig::parse("seed = 1\nmodel.width = 3\n", "t"),
            Err(GarError::Parse { line: 2, .. })
        ));
        assert!(RunConfig::parse("seed = 1\nseed = 2\n", "t").is_err());
        assert!(RunConfig::parse("seed\n", "t").is_err());
        assert_eq!(RunConfig::parse(&c.to_text(), "t").unwrap(), c);
    }

    #[test]
    fn typed_sections() {
        let c = RunConfig::parse(
            "scene.rule = key-actor\nscene.noise = 0\nscene.branch_dims = 8,8\n\
             model.fusion = late\nmodel.d_model = 16\nmodel.use_pe = off\n\
             train.optimizer = adam\ntrain.lr_schedule = 0:0.1,10:0.01\ntrain.iterations = 20\n",
            "t",
        )
        .unwrap();
        let s = c.scene_config().unwrap();
        assert_eq!((s.noise, s.branch_dims.clone()), (0.0, vec![8, 8]));
        let m = c.model_config(&header()).unwrap();
        assert_eq!(m.branches, vec![0, 1]);
        assert_eq!(m.branch_dims, vec![16, 12]);
        assert_eq!(m.fusion, FusionMode::Late { weights: vec![2.0, 1.0] });
        assert!(!m.use_pe);
        let t = c.train_config().unwrap();
        assert_eq!(t.optimizer.name(), "adam");
        assert_eq!(t.schedule.lr_at(15), 0.01);
        assert_eq!(t.iterations, 20);
        if let OptimizerKind::Adam { epsilon, .. } = t.optimizer {
            assert_eq!(epsilon, 1e-10);
        }

        assert!(RunConfig::default().scene_config().is_err(), "scene.rule is required");
        let bad = RunConfig::parse("model.branches = 3\n", "t").unwrap();
        assert!(bad.model_config(&header()).is_err());
        let bad = RunConfig::parse("scene.count = 0\n", "t").unwrap();
        assert!(bad.scene_count().is_err());
    }

    #[test]
    fn ablation_grid_is_a_sorted_cartesian_product() {
        let c = RunConfig::parse(
            "ablate.layers = 2,1\nablate.heads = 1,2\nablate.pe = on,off\nseed = 3\n",
            "t",
        )
        .unwrap();
        let cells = c.ablation_grid().unwrap().cells();
        assert_eq!(cells.len(), 8);
        assert!(cells.windows(2).all(|w| w[0].key() < w[1].key()));
        assert_eq!(cells[0].key(), "num_layers=1;num_heads=1;use_pe=off");
        assert!(cells.iter().all(|c| c.seed == 3));
    }
}
