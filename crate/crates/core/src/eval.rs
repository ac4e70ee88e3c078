//! Accuracy, confusion matrices and attention summaries.

use std::fmt::Write as _;

use crate::error::{GarError, Result};
use crate::model::{argmax, predict, GarModel, Prediction};
use crate::scalar::Real;
use crate::scenes::ActorScene;
use crate::tensor::Tensor;

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// `trace / total`; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true");
        for j in 0..self.classes {
            let _ = write!(s, ",pred_{j}");
        }
        s.push('\n');
        for i in 0..self.classes {
            let _ = write!(s, "{i}");
            for j in 0..self.classes {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| GarError::Parse {
            source_name: "confusion matrix".into(),
            line,
            msg: msg.into(),
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty file"))?;
        let classes = header.split(',').count() - 1;
        let mut m = ConfusionMatrix::new(classes);
        let mut rows = 0;
        for (i, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != classes + 1 || fields[0] != i.to_string() || i >= classes {
                return Err(err(i + 2, "malformed row"));
            }
            for (j, f) in fields[1..].iter().enumerate() {
                m.counts[i * classes + j] = f.parse().map_err(|_| err(i + 2, "invalid count"))?;
            }
            rows += 1;
        }
        if rows != classes {
            return Err(err(rows + 2, "wrong number of rows"));
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub group: ConfusionMatrix,
    pub action: ConfusionMatrix,
}

pub const SUMMARY_HEADER: &str = "metric,value";

impl EvalReport {
    pub fn group_accuracy(&self) -> f64 {
        self.group.accuracy()
    }

    pub fn action_accuracy(&self) -> f64 {
        self.action.accuracy()
    }

    /// One-line human summary.
    pub fn summary_line(&self) -> String {
        format!(
            "group accuracy {} ({} / {}), action accuracy {} ({} / {})",
            self.group_accuracy(),
            self.group.trace(),
            self.group.total(),
            self.action_accuracy(),
            self.action.trace(),
            self.action.total()
        )
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "{SUMMARY_HEADER}\ngroup_accuracy,{}\naction_accuracy,{}\nscenes,{}\nactors,{}\n",
            self.group_accuracy(),
            self.action_accuracy(),
            self.group.total(),
            self.action.total()
        )
    }
}

/// `(metric, value)` rows of a summary CSV.
pub fn parse_summary_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(GarError::Parse {
            source_name: "summary".into(),
            line: 1,
            msg: "missing header".into(),
        });
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || GarError::Parse {
                source_name: "summary".into(),
                line: i + 2,
                msg: format!("malformed row '{l}'"),
            };
            let (k, v) = l.split_once(',').ok_or_else(bad)?;
            Ok((k.to_string(), v.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn predict_scenes<'s, 'm, T: Real>(
    model: &'m GarModel<T>,
    scenes: &'s [ActorScene],
    record_attention: bool,
) -> impl Iterator<Item = Result<(&'s ActorScene, Prediction<T>)>> + use<'s, 'm, T> {
    scenes.iter().map(move |s| {
        let feats: Vec<Tensor<T>> = model
            .config
            .branches
            .iter()
            .map(|&b| {
                s.features
                    .get(b)
                    .map(|f| f.cast())
                    .ok_or_else(|| GarError::Data(format!("scene {} has no branch {b}", s.id)))
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<_> = feats
            .iter()
            .map(|features| crate::model::BranchInput {
                features,
                centers: &s.centers,
            })
            .collect();
        Ok((s, model.predict_scene(&inputs, record_attention)?))
    })
}

pub fn evaluate<T: Real>(model: &GarModel<T>, scenes: &[ActorScene]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(GarError::Data("evaluation set is empty".into()));
    }
    let c = &model.config;
    let mut report = EvalReport {
        group: ConfusionMatrix::new(c.num_activities),
        action: ConfusionMatrix::new(c.num_actions),
    };
    for item in predict_scenes(model, scenes, false) {
        let (scene, pred) = item?;
        if scene.activity >= c.num_activities || scene.actions.iter().any(|&a| a >= c.num_actions) {
            return Err(GarError::Data(format!("scene {} has labels outside the model's classes", scene.id)));
        }
        let (group, actions) = predict(&pred);
        report.group.add(scene.activity, group);
        for (&t, p) in scene.actions.iter().zip(actions) {
            report.action.add(t, p);
        }
    }
    Ok(report)
}

/// Mean attention each actor receives: the column means of every recorded
/// map, averaged over maps.
pub fn attention_received<T: Real>(pred: &Prediction<T>) -> Vec<f64> {
    let maps = &pred.attention.maps;
    let Some(first) = maps.first() else {
        return Vec::new();
    };
    let n = first.weights.cols();
    let mut col = vec![0.0; n];
    for m in maps {
        let rows = m.weights.rows() as f64;
        for i in 0..m.weights.rows() {
            for (j, c) in col.iter_mut().enumerate() {
                *c += m.weights.get(i, j).to_f64_lossy() / rows;
            }
        }
    }
    let k = maps.len() as f64;
    col.iter_mut().for_each(|c| *c /= k);
    col
}

/// Index of the actor whose action is below `key_actions`, if exactly one.
pub fn key_actor(scene: &ActorScene, key_actions: usize) -> Option<usize> {
    let mut it = scene.actions.iter().enumerate().filter(|(_, &a)| a < key_actions);
    match (it.next(), it.next()) {
        (Some((i, _)), None) => Some(i),
        _ => None,
    }
}

/// Fraction of key-actor scenes whose key actor receives the most attention.
pub fn key_attention_fraction<T: Real>(
    model: &GarModel<T>,
    scenes: &[ActorScene],
    key_actions: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for item in predict_scenes(model, scenes, true) {
        let (scene, pred) = item?;
        let Some(key) = key_actor(scene, key_actions) else {
            continue;
        };
        let col = attention_received(&pred);
        if col.is_empty() {
            return Err(GarError::Usage("model records no attention".into()));
        }
        total += 1;
        hits += usize::from(argmax(&col) == key);
    }
    if total == 0 {
        return Err(GarError::Data("no scene with a unique key actor".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Attention matrix as CSV: header `query,k0,k1,...`, one row per query actor.
pub fn attention_csv<T: Real>(weights: &Tensor<T>) -> String {
    let n = weights.cols();
    let mut s = String::from("query");
    for j in 0..n {
        let _ = write!(s, ",k{j}");
    }
    s.push('\n');
    for i in 0..weights.rows() {
        let _ = write!(s, "{i}");
        for v in weights.row(i) {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_attention_csv(text: &str) -> Result<Tensor<f64>> {
    let bad = |line: usize| GarError::Parse {
        source_name: "attention".into(),
        line,
        msg: "malformed attention matrix".into(),
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1))?;
    let n = header.split(',').count() - 1;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, l) in lines.filter(|l| !l.is_empty()).enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != n + 1 {
            return Err(bad(i + 2));
        }
        for v in &f[1..] {
            data.push(v.parse().map_err(|_| bad(i + 2))?);
        }
        rows += 1;
    }
    Tensor::new(vec![rows, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{AttentionMap, AttentionRecord};

    #[test]
    fn confusion_accounting() {
        let mut m = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (0, 1), (1, 1), (2, 2), (2, 0)] {
            m.add(t, p);
        }
        assert_eq!(m.total(), 5);
        assert_eq!(m.trace(), 3);
        assert_eq!(m.row_sums(), vec![2, 1, 2]);
        assert_eq!(m.accuracy(), 0.6);
        assert_eq!(ConfusionMatrix::parse_csv(&m.to_csv()).unwrap(), m);
        assert!(ConfusionMatrix::parse_csv("true,pred_0\n0,x\n").is_err());
    }

    #[test]
    fn summary_round_trip() {
        let mut g = ConfusionMatrix::new(2);
        g.add(0, 0);
        g.add(1, 0);
        g.add(1, 1);
        let mut a = ConfusionMatrix::new(2);
        a.add(0, 1);
        let r = EvalReport { group: g, action: a };
        let rows = parse_summary_csv(&r.summary_csv()).unwrap();
        assert_eq!(rows[0], ("group_accuracy".to_string(), 2.0 / 3.0));
        assert_eq!(rows[1].1, 0.0);
    }

    #[test]
    fn attention_summaries() {
        let w = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.3, 0.7]]).unwrap();
        let pred = Prediction::<f64> {
            action_logits: Tensor::zeros(&[2, 2]),
            activity_logits: Tensor::zeros(&[2]),
            attention: AttentionRecord {
                maps: vec![AttentionMap {
                    branch: 0,
                    layer: 0,
                    head: 0,
                    weights: w.clone(),
                }],
            },
        };
        let col = attention_received(&pred);
        assert!((col[0] - 0.2).abs() < 1e-15 && (col[1] - 0.8).abs() < 1e-15);
        assert_eq!(parse_attention_csv(&attention_csv(&w)).unwrap(), w);
    }
}
