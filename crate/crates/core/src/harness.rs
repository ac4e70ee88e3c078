//! Command implementations behind the `gar` binary. Every command writes its
//! outputs under an output directory through temporary files that are renamed
//! once complete.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{AblationCell, RunConfig};
use crate::error::{GarError, Result};
use crate::eval::{attention_csv, evaluate, predict_scenes, EvalReport};
use crate::model::GarModel;
use crate::scenes::{load_dataset, save_dataset, write_atomic, Dataset, SceneGenerator};
use crate::training::{loss_curve_csv, train, LossRecord, TrainState};

pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GROUP_CONFUSION_FILE: &str = "confusion_group.csv";
pub const ACTION_CONFUSION_FILE: &str = "confusion_action.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ATTENTION_DIR: &str = "attention";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GarError::io(dir, e))
}

fn data_path(cfg: &RunConfig, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(cfg.require(key)?))
}

/// Generates the configured dataset and splits it by scene id.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let generator = SceneGenerator::new(cfg.scene_config()?)?;
    let ds = generator.generate(cfg.scene_count()?)?;
    ds.split(cfg.train_fraction()?)
}

/// Writes `train.txt` and `test.txt`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = generate_splits(cfg)?;
    ensure_dir(out)?;
    save_dataset(&train, &out.join(TRAIN_FILE))?;
    save_dataset(&test, &out.join(TEST_FILE))?;
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub curve: Vec<LossRecord>,
    pub iteration: usize,
}

/// Trains on `data.train` and writes `checkpoint.txt` and `loss.csv`. With
/// `resume`, weights and optimizer state come from that checkpoint and the
/// iteration counter continues from it.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let data = load_dataset(&data_path(cfg, "data.train")?)?;
    let tc = cfg.train_config()?;
    let (mut model, mut state) = match resume {
        Some(path) => {
            let ck: Checkpoint = load_checkpoint(path)?;
            let state = match ck.state {
                Some(s) => s,
                None => TrainState::new(&ck.model.weights, &tc.optimizer),
            };
            (ck.model, state)
        }
        None => {
            let mc = cfg.model_config(&data.header)?;
            let model = GarModel::<f64>::init(mc, tc.seed)?;
            let state = TrainState::new(&model.weights, &tc.optimizer);
            (model, state)
        }
    };
    let curve = train(&mut model, &data.scenes, &tc, &mut state)?;
    ensure_dir(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let iteration = state.iteration;
    save_checkpoint(
        &Checkpoint {
            model,
            state: Some(state),
        },
        &checkpoint,
    )?;
    write_atomic(&out.join(LOSS_FILE), &loss_curve_csv(&curve))?;
    Ok(TrainOutcome {
        checkpoint,
        curve,
        iteration,
    })
}

/// Evaluates a checkpoint on `data.test`; writes the summary and both
/// confusion matrices.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<EvalReport> {
    let ck: Checkpoint = load_checkpoint(checkpoint)?;
    let data = load_dataset(&data_path(cfg, "data.test")?)?;
    let report = evaluate(&ck.model, &data.scenes)?;
    ensure_dir(out)?;
    write_atomic(&out.join(SUMMARY_FILE), &report.summary_csv())?;
    write_atomic(&out.join(GROUP_CONFUSION_FILE), &report.group.to_csv())?;
    write_atomic(&out.join(ACTION_CONFUSION_FILE), &report.action.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub group_accuracy: f64,
    pub action_accuracy: f64,
}

pub const ABLATION_HEADER: &str = "config,seed,group_accuracy,action_accuracy";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.config, r.seed, r.group_accuracy, r.action_accuracy
        );
    }
    s
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let mut lines = text.lines();
    let bad = |line: usize| GarError::Parse {
        source_name: "ablation table".into(),
        line,
        msg: "malformed row".into(),
    };
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(bad(1));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 2));
            }
            Ok(AblationRow {
                config: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad(i + 2))?,
                group_accuracy: f[2].parse().map_err(|_| bad(i + 2))?,
                action_accuracy: f[3].parse().map_err(|_| bad(i + 2))?,
            })
        })
        .collect()
}

/// Trains and evaluates one grid cell on shared data.
pub fn run_cell(cfg: &RunConfig, cell: &AblationCell, train_set: &Dataset, test_set: &Dataset) -> Result<AblationRow> {
    let mut c = cfg.clone();
    for (k, v) in &cell.overrides {
        c.set(k, v.clone())?;
    }
    c.set("seed", cell.seed.to_string())?;
    let mc = c.model_config(&train_set.header)?;
    let tc = c.train_config()?;
    let mut model = GarModel::<f64>::init(mc, cell.seed)?;
    let mut state = TrainState::new(&model.weights, &tc.optimizer);
    train(&mut model, &train_set.scenes, &tc, &mut state)?;
    let report = evaluate(&model, &test_set.scenes)?;
    Ok(AblationRow {
        config: cell.key(),
        seed: cell.seed,
        group_accuracy: report.group_accuracy(),
        action_accuracy: report.action_accuracy(),
    })
}

/// Runs the cartesian ablation grid and writes `ablation.csv`. Data comes from
/// `data.train`/`data.test` when both are set and is generated otherwise; the
/// cells share it and differ only in their overrides and model seed.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let (train_set, test_set) = match (cfg.get("data.train"), cfg.get("data.test")) {
        (Some(a), Some(b)) => (load_dataset(Path::new(a))?, load_dataset(Path::new(b))?),
        _ => generate_splits(cfg)?,
    };
    let rows = cfg
        .ablation_grid()?
        .cells()
        .iter()
        .map(|cell| run_cell(cfg, cell, &train_set, &test_set))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(out)?;
    write_atomic(&out.join(ABLATION_FILE), &ablation_csv(&rows))?;
    Ok(rows)
}

/// Writes one attention CSV per scene, branch, layer and head under
/// `attention/`. Scenes come from `ids`, then `attention.scenes`, else the
/// first five test scenes.
pub fn cmd_attention_dump(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    ids: Option<&[u64]>,
) -> Result<Vec<PathBuf>> {
    let ck: Checkpoint = load_checkpoint(checkpoint)?;
    let data = load_dataset(&data_path(cfg, "data.test")?)?;
    let from_cfg = cfg.attention_scenes()?;
    let scenes = match ids.or(from_cfg.as_deref()) {
        Some(ids) => ids
            .iter()
            .map(|id| {
                data.scenes
                    .iter()
                    .find(|s| s.id == *id)
                    .cloned()
                    .ok_or_else(|| GarError::Data(format!("no scene with id {id}")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => data.scenes.iter().take(5).cloned().collect(),
    };
    let dir = out.join(ATTENTION_DIR);
    ensure_dir(&dir)?;
    let mut written = Vec::new();
    for item in predict_scenes(&ck.model, &scenes, true) {
        let (scene, pred) = item?;
        if pred.attention.maps.is_empty() {
            return Err(GarError::Usage("model has no attention layers".into()));
        }
        for m in &pred.attention.maps {
            let path = dir.join(format!(
                "scene_{}_branch_{}_layer_{}_head_{}.csv",
                scene.id, m.branch, m.layer, m.head
            ));
            write_atomic(&path, &attention_csv(&m.weights))?;
            written.push(path);
        }
    }
    Ok(written)
}
