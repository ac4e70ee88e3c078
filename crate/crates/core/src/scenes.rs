//! Synthetic multi-actor scenes and the dataset file format.
//!
//! Actor features are drawn as `prototype[action] + noise`, one prototype
//! basis per branch. Two label rules are supported:
//!
//! * **key actor**: exactly one actor performs a key action, which fixes the
//!   base activity; the side of the frame it stands on (`x < 0.5` is left)
//!   picks the left or right variant. Everyone else performs a background
//!   action. Left activities are `0..K`, right ones `K..2K`.
//! * **majority**: the group label is the action most actors perform. Scenes
//!   without a unique most-frequent action are redrawn.
//!
//! With `complementary` set, pairs of label-relevant actions share a
//! prototype in all but one branch, so each branch alone is ambiguous on some
//! classes while the branches together are not.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{GarError, Result};
use crate::model::BranchInput;
use crate::posenc::BoxCenter;
use crate::rng::{rng_for, Rng};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &str = "gar-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelRule {
    KeyActor,
    Majority,
}

impl FromStr for LabelRule {
    type Err = GarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key-actor" => Ok(LabelRule::KeyActor),
            "majority" => Ok(LabelRule::Majority),
            other => Err(GarError::Config(format!("unknown label rule '{other}'"))),
        }
    }
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelRule::KeyActor => "key-actor",
            LabelRule::Majority => "majority",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub min_actors: usize,
    pub max_actors: usize,
    pub num_actions: usize,
    pub num_activities: usize,
    /// Feature width per branch; branch 0 is static, the rest dynamic.
    pub branch_dims: Vec<usize>,
    pub rule: LabelRule,
    pub noise: f64,
    pub complementary: bool,
    /// Clip length, carried as metadata.
    pub frames: usize,
    pub seed: u64,
}

impl SceneConfig {
    /// 12 actors, 9 actions, 8 activities (4 base activities × left/right).
    pub fn volleyball_like(seed: u64) -> Self {
        SceneConfig {
            min_actors: 12,
            max_actors: 12,
            num_actions: 9,
            num_activities: 8,
            branch_dims: vec![16, 16],
            rule: LabelRule::KeyActor,
            noise: 0.5,
            complementary: false,
            frames: 10,
            seed,
        }
    }

    /// 2 to 12 actors, 5 actions, group label is the majority action.
    pub fn collective_like(seed: u64) -> Self {
        SceneConfig {
            min_actors: 2,
            max_actors: 12,
            num_actions: 5,
            num_activities: 5,
            branch_dims: vec![16, 16],
            rule: LabelRule::Majority,
            noise: 0.5,
            complementary: false,
            frames: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GarError::Config(m));
        if self.min_actors < 1 || self.min_actors > self.max_actors {
            return err(format!(
                "actor range {}..={} is invalid",
                self.min_actors, self.max_actors
            ));
        }
        if self.branch_dims.is_empty() || self.branch_dims.iter().any(|&d| d < 4) {
            return err("every branch needs at least 4 feature dimensions".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return err(format!("noise {} must be a finite non-negative value", self.noise));
        }
        match self.rule {
            LabelRule::KeyActor => {
                if self.num_activities < 2 || self.num_activities % 2 != 0 {
                    return err("key-actor rule needs an even number of activities".into());
                }
                if self.num_actions <= self.num_activities / 2 {
                    return err(format!(
                        "key-actor rule needs more than {} actions so background actions exist",
                        self.num_activities / 2
                    ));
                }
                if self.max_actors > 1 && self.num_actions == self.num_activities / 2 {
                    return err("no background actions available".into());
                }
            }
            LabelRule::Majority => {
                if self.num_actions < 2 || self.num_activities != self.num_actions {
                    return err("majority rule needs num_activities == num_actions >= 2".into());
                }
            }
        }
        Ok(())
    }

    /// Number of base activities under the key-actor rule.
    pub fn key_actions(&self) -> usize {
        self.num_activities / 2
    }

    fn label_relevant_actions(&self) -> usize {
        match self.rule {
            LabelRule::KeyActor => self.key_actions(),
            LabelRule::Majority => self.num_actions,
        }
    }
}

/// One sample: per-branch actor features, box centers, and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorScene {
    pub id: u64,
    /// One `N × f_b` matrix per branch.
    pub features: Vec<Tensor<f64>>,
    pub centers: Vec<BoxCenter>,
    pub actions: Vec<usize>,
    pub activity: usize,
}

impl ActorScene {
    pub fn num_actors(&self) -> usize {
        self.centers.len()
    }

    /// Model inputs for the selected branches.
    pub fn inputs(&self, branches: &[usize]) -> Result<Vec<BranchInput<'_, f64>>> {
        branches
            .iter()
            .map(|&b| {
                let features = self.features.get(b).ok_or_else(|| {
                    GarError::Data(format!("scene {} has no branch {b}", self.id))
                })?;
                Ok(BranchInput {
                    features,
                    centers: &self.centers,
                })
            })
            .collect()
    }

    /// Reorders actors: new actor `i` is old actor `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        ActorScene {
            id: self.id,
            features: self.features.iter().map(|f| f.permute_rows(perm)).collect(),
            centers: perm.iter().map(|&p| self.centers[p]).collect(),
            actions: perm.iter().map(|&p| self.actions[p]).collect(),
            activity: self.activity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub rule: LabelRule,
    pub seed: u64,
    pub noise: f64,
    pub frames: usize,
    pub num_actions: usize,
    pub num_activities: usize,
    pub branch_dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub scenes: Vec<ActorScene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Splits by position: the first `round(fraction · len)` scenes train.
    pub fn split(self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(GarError::Config(format!(
                "train fraction {train_fraction} not in [0, 1]"
            )));
        }
        let n_train = (train_fraction * self.scenes.len() as f64).round() as usize;
        let mut train = self.scenes;
        let test = train.split_off(n_train);
        Ok((
            Dataset {
                header: self.header.clone(),
                scenes: train,
            },
            Dataset {
                header: self.header,
                scenes: test,
            },
        ))
    }
}

/// Per-branch, per-action prototype vectors shared by every scene of a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// `[branch][action]` → feature vector.
    pub vectors: Vec<Vec<Vec<f64>>>,
}

impl Prototypes {
    pub fn draw(cfg: &SceneConfig) -> Self {
        let mut rng = rng_for(cfg.seed, "prototypes", &[]);
        let branches = cfg.branch_dims.len();
        let relevant = cfg.label_relevant_actions();
        let vectors = cfg
            .branch_dims
            .iter()
            .enumerate()
            .map(|(b, &dim)| {
                let mut protos: Vec<Vec<f64>> = (0..cfg.num_actions)
                    .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                    .collect();
                if cfg.complementary && branches > 1 {
                    // pair (2p, 2p+1) stays distinct only in branch p mod B
                    for first in (0..relevant.saturating_sub(1)).step_by(2) {
                        if (first / 2) % branches != b {
                            protos[first + 1] = protos[first].clone();
                        }
                    }
                }
                protos
            })
            .collect();
        Prototypes { vectors }
    }
}

pub struct SceneGenerator {
    cfg: SceneConfig,
    protos: Prototypes,
}

impl SceneGenerator {
    pub fn new(cfg: SceneConfig) -> Result<Self> {
        cfg.validate()?;
        let protos = Prototypes::draw(&cfg);
        Ok(SceneGenerator { cfg, protos })
    }

    pub fn config(&self) -> &SceneConfig {
        &self.cfg
    }

    pub fn prototypes(&self) -> &Prototypes {
        &self.protos
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            rule: self.cfg.rule,
            seed: self.cfg.seed,
            noise: self.cfg.noise,
            frames: self.cfg.frames,
            num_actions: self.cfg.num_actions,
            num_activities: self.cfg.num_activities,
            branch_dims: self.cfg.branch_dims.clone(),
        }
    }

    /// Scenes with ids `0..count`.
    pub fn generate(&self, count: usize) -> Result<Dataset> {
        if count == 0 {
            return Err(GarError::Config("cannot generate an empty dataset".into()));
        }
        let scenes = (0..count as u64).map(|id| self.scene(id)).collect();
        Ok(Dataset {
            header: self.header(),
            scenes,
        })
    }

    /// Scene `id` depends only on the seed and the id.
    pub fn scene(&self, id: u64) -> ActorScene {
        let cfg = &self.cfg;
        let mut rng = rng_for(cfg.seed, "scene", &[id]);
        let n = rng.random_range(cfg.min_actors..=cfg.max_actors);
        let (actions, centers, activity) = match cfg.rule {
            LabelRule::KeyActor => key_actor_layout(cfg, n, &mut rng),
            LabelRule::Majority => majority_layout(cfg, n, &mut rng),
        };
        let features = self.features(&actions, &mut rng);
        ActorScene {
            id,
            features,
            centers,
            actions,
            activity,
        }
    }

    fn features(&self, actions: &[usize], rng: &mut Rng) -> Vec<Tensor<f64>> {
        self.cfg
            .branch_dims
            .iter()
            .enumerate()
            .map(|(b, &dim)| {
                let mut data = Vec::with_capacity(actions.len() * dim);
                for &a in actions {
                    for &p in &self.protos.vectors[b][a] {
                        let z: f64 = rng.sample(StandardNormal);
                        data.push(p + self.cfg.noise * z);
                    }
                }
                Tensor::new(vec![actions.len(), dim], data).expect("n ≥ 1, dim ≥ 4")
            })
            .collect()
    }
}

fn key_actor_layout(cfg: &SceneConfig, n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<BoxCenter>, usize) {
    let k = cfg.key_actions();
    let base = rng.random_range(0..k);
    let right = rng.random_bool(0.5);
    let key = rng.random_range(0..n);
    let mut actions = Vec::with_capacity(n);
    let mut centers = Vec::with_capacity(n);
    for i in 0..n {
        if i == key {
            let x = if right {
                rng.random_range(0.55..=0.95)
            } else {
                rng.random_range(0.05..=0.45)
            };
            let y = rng.random_range(0.05..=0.95);
            actions.push(base);
            centers.push(BoxCenter { x, y });
        } else {
            actions.push(rng.random_range(k..cfg.num_actions));
            centers.push(BoxCenter {
                x: rng.random_range(0.05..=0.95),
                y: rng.random_range(0.05..=0.95),
            });
        }
    }
    (actions, centers, base + if right { k } else { 0 })
}

fn majority_layout(cfg: &SceneConfig, n: usize, rng: &mut Rng) -> (Vec<usize>, Vec<BoxCenter>, usize) {
    loop {
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.num_actions)).collect();
        if let Some(label) = unique_mode(&actions, cfg.num_actions) {
            let centers = (0..n)
                .map(|_| BoxCenter {
                    x: rng.random_range(0.05..=0.95),
                    y: rng.random_range(0.05..=0.95),
                })
                .collect();
            return (actions, centers, label);
        }
    }
}

/// The most frequent value, or `None` when the maximum count is shared.
pub fn unique_mode(values: &[usize], classes: usize) -> Option<usize> {
    let mut counts = vec![0usize; classes];
    for &v in values {
        counts[v] += 1;
    }
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (label, _) = winners.next()?;
    winners.next().is_none().then_some(label)
}

/// Activity label after mirroring every x-coordinate (left ↔ right).
pub fn mirrored_activity(activity: usize, num_activities: usize) -> usize {
    let k = num_activities / 2;
    (activity + k) % num_activities
}

/// Labels scenes from their features and positions by the generating rule,
/// using the true prototypes.
pub struct PrototypeOracle<'a> {
    protos: &'a Prototypes,
    rule: LabelRule,
    key_actions: usize,
    num_actions: usize,
}

impl<'a> PrototypeOracle<'a> {
    pub fn new(generator: &'a SceneGenerator) -> Self {
        PrototypeOracle {
            protos: &generator.protos,
            rule: generator.cfg.rule,
            key_actions: generator.cfg.key_actions(),
            num_actions: generator.cfg.num_actions,
        }
    }

    fn distance(&self, scene: &ActorScene, actor: usize, action: usize) -> f64 {
        scene
            .features
            .iter()
            .zip(&self.protos.vectors)
            .map(|(f, protos)| {
                f.row(actor)
                    .iter()
                    .zip(&protos[action])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Nearest-prototype action of every actor, summed over branches.
    pub fn actions(&self, scene: &ActorScene) -> Vec<usize> {
        (0..scene.num_actors())
            .map(|i| {
                let d: Vec<f64> = (0..self.num_actions).map(|a| self.distance(scene, i, a)).collect();
                crate::model::argmax(&d.iter().map(|v| -v).collect::<Vec<_>>())
            })
            .collect()
    }

    pub fn activity(&self, scene: &ActorScene) -> usize {
        let actions = self.actions(scene);
        match self.rule {
            LabelRule::Majority => {
                let mut counts = vec![0usize; self.num_actions];
                for &a in &actions {
                    counts[a] += 1;
                }
                crate::model::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
            }
            LabelRule::KeyActor => {
                let k = self.key_actions;
                // the actor closest to any key prototype
                let (key, base) = (0..scene.num_actors())
                    .flat_map(|i| (0..k).map(move |a| (i, a)))
                    .min_by(|&(i, a), &(j, b)| {
                        self.distance(scene, i, a)
                            .partial_cmp(&self.distance(scene, j, b))
                            .expect("finite distances")
                    })
                    .expect("at least one actor");
                base + if scene.centers[key].x >= 0.5 { k } else { 0 }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// File format

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join_values<I: IntoIterator<Item = String>>(it: I) -> String {
    it.into_iter().collect::<Vec<_>>().join(" ")
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    let h = &ds.header;
    let mut s = String::new();
    let _ = writeln!(s, "{DATASET_MAGIC} {DATASET_VERSION}");
    let _ = writeln!(s, "rule {}", h.rule);
    let _ = writeln!(s, "seed {}", h.seed);
    let _ = writeln!(s, "noise {}", fmt_f64(h.noise));
    let _ = writeln!(s, "frames {}", h.frames);
    let _ = writeln!(s, "num_actions {}", h.num_actions);
    let _ = writeln!(s, "num_activities {}", h.num_activities);
    let _ = writeln!(s, "branch_dims {}", join_values(h.branch_dims.iter().map(|d| d.to_string())));
    let _ = writeln!(s, "scenes {}", ds.scenes.len());
    for sc in &ds.scenes {
        let _ = writeln!(s, "scene {} {} {}", sc.id, sc.num_actors(), sc.activity);
        let _ = writeln!(s, "actions {}", join_values(sc.actions.iter().map(|a| a.to_string())));
        let _ = writeln!(
            s,
            "centers {}",
            join_values(sc.centers.iter().flat_map(|c| [fmt_f64(c.x), fmt_f64(c.y)]))
        );
        for (b, f) in sc.features.iter().enumerate() {
            let _ = writeln!(s, "features {b} {}", join_values(f.data().iter().map(|&v| fmt_f64(v))));
        }
    }
    s.push_str("end\n");
    s
}

/// Writes through a temporary file and renames on success.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, contents).map_err(|e| GarError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| GarError::io(path, e))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &dataset_to_string(ds))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| GarError::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

/// Line-oriented reader with positioned errors, shared with the checkpoint format.
pub(crate) struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    source: String,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str, source: &str) -> Self {
        LineReader {
            lines: text.lines().enumerate(),
            source: source.to_string(),
            line_no: 0,
        }
    }

    pub(crate) fn error(&self, msg: impl Into<String>) -> GarError {
        GarError::Parse {
            source_name: self.source.clone(),
            line: self.line_no,
            msg: msg.into(),
        }
    }

    /// Next line split into its keyword and remaining fields.
    pub(crate) fn next_record(&mut self) -> Result<(&'a str, Vec<&'a str>)> {
        loop {
            let Some((i, line)) = self.lines.next() else {
                self.line_no += 1;
                return Err(self.error("unexpected end of file"));
            };
            self.line_no = i + 1;
            let mut parts = line.split_ascii_whitespace();
            if let Some(key) = parts.next() {
                return Ok((key, parts.collect()));
            }
        }
    }

    pub(crate) fn expect(&mut self, keyword: &str) -> Result<Vec<&'a str>> {
        let (key, fields) = self.next_record()?;
        if key != keyword {
            return Err(self.error(format!("expected '{keyword}', found '{key}'")));
        }
        Ok(fields)
    }

    pub(crate) fn parse<V: FromStr>(&self, field: &str, what: &str) -> Result<V> {
        field
            .parse()
            .map_err(|_| self.error(format!("invalid {what} '{field}'")))
    }

    pub(crate) fn single<V: FromStr>(&mut self, keyword: &str) -> Result<V> {
        let fields = self.expect(keyword)?;
        if fields.len() != 1 {
            return Err(self.error(format!("'{keyword}' takes exactly one value")));
        }
        self.parse(fields[0], keyword)
    }

    pub(crate) fn list<V: FromStr>(&self, fields: &[&str], expected: usize, what: &str) -> Result<Vec<V>> {
        if fields.len() != expected {
            return Err(self.error(format!(
                "expected {expected} {what} values, found {}",
                fields.len()
            )));
        }
        fields.iter().map(|f| self.parse(f, what)).collect()
    }
}

pub fn parse_dataset(text: &str, source: &str) -> Result<Dataset> {
    let mut r = LineReader::new(text, source);
    let magic = r.expect(DATASET_MAGIC)?;
    let version: u32 = match magic.as_slice() {
        [v] => r.parse(v, "version")?,
        _ => return Err(r.error("malformed header")),
    };
    if version != DATASET_VERSION {
        return Err(r.error(format!("unsupported dataset version {version}")));
    }
    let rule: String = r.single("rule")?;
    let rule: LabelRule = rule.parse().map_err(|_| r.error(format!("unknown rule '{rule}'")))?;
    let seed: u64 = r.single("seed")?;
    let noise: f64 = r.single("noise")?;
    let frames: usize = r.single("frames")?;
    let num_actions: usize = r.single("num_actions")?;
    let num_activities: usize = r.single("num_activities")?;
    let dims_fields = r.expect("branch_dims")?;
    let branch_dims: Vec<usize> = r.list(&dims_fields, dims_fields.len(), "branch_dims")?;
    if branch_dims.is_empty() || branch_dims.contains(&0) {
        return Err(r.error("branch_dims must list positive widths"));
    }
    let count: usize = r.single("scenes")?;

    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let head = r.expect("scene")?;
        let [id, n, activity]: [&str; 3] = head
            .try_into()
            .map_err(|_| r.error("scene line needs id, actor count and activity"))?;
        let id: u64 = r.parse(id, "scene id")?;
        let n: usize = r.parse(n, "actor count")?;
        let activity: usize = r.parse(activity, "activity")?;
        if n == 0 {
            return Err(r.error("scene without actors"));
        }
        if activity >= num_activities {
            return Err(r.error(format!("activity {activity} out of range")));
        }
        let fields = r.expect("actions")?;
        let actions: Vec<usize> = r.list(&fields, n, "action")?;
        if let Some(a) = actions.iter().find(|&&a| a >= num_actions) {
            return Err(r.error(format!("action {a} out of range")));
        }
        let fields = r.expect("centers")?;
        let coords: Vec<f64> = r.list(&fields, 2 * n, "center")?;
        let centers = coords
            .chunks(2)
            .map(|c| BoxCenter::new(c[0], c[1]).map_err(|e| r.error(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut features = Vec::with_capacity(branch_dims.len());
        for (b, &dim) in branch_dims.iter().enumerate() {
            let fields = r.expect("features")?;
            let Some((idx, values)) = fields.split_first() else {
                return Err(r.error("features line needs a branch index"));
            };
            let idx: usize = r.parse(idx, "branch index")?;
            if idx != b {
                return Err(r.error(format!("expected branch {b}, found {idx}")));
            }
            let data: Vec<f64> = r.list(values, n * dim, "feature")?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(r.error("non-finite feature value"));
            }
            features.push(Tensor::new(vec![n, dim], data)?);
        }
        scenes.push(ActorScene {
            id,
            features,
            centers,
            actions,
            activity,
        });
    }
    r.expect("end")?;
    Ok(Dataset {
        header: DatasetHeader {
            rule,
            seed,
            noise,
            frames,
            num_actions,
            num_activities,
            branch_dims,
        },
        scenes,
    })
}
