//! Text checkpoints: model configuration, every weight tensor by name, and
//! optionally the optimizer state. Values use the shortest representation
//! that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::list_text;
use crate::error::{GarError, Result};
use crate::model::{FusionMode, GarModel, ModelConfig};
use crate::params::{named_leaves, ParamTree};
use crate::scalar::Real;
use crate::scenes::{write_atomic, LineReader};
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const CHECKPOINT_MAGIC: &str = "gar-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real = f64> {
    pub model: GarModel<T>,
    pub state: Option<TrainState<T>>,
}

fn scalar_name<T: Real>() -> &'static str {
    std::any::type_name::<T>()
}

/// `(key, value)` pairs describing a model configuration.
pub fn model_config_pairs(c: &ModelConfig) -> Vec<(&'static str, String)> {
    let mut v = vec![
        ("branches", list_text(&c.branches)),
        ("branch_dims", list_text(&c.branch_dims)),
        ("d_model", c.d_model.to_string()),
        ("num_heads", c.num_heads.to_string()),
        ("num_layers", c.num_layers.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("dropout", c.dropout.to_string()),
        ("num_actions", c.num_actions.to_string()),
        ("num_activities", c.num_activities.to_string()),
        ("use_pe", c.use_pe.to_string()),
        ("pe_scale", c.pe_scale.to_string()),
        ("pe_stage", c.pe_stage.to_string()),
        ("early_pe", c.early_pe.to_string()),
        ("aggregator", c.aggregator.to_string()),
        ("fusion", c.fusion.name().to_string()),
    ];
    if let FusionMode::Late { weights } = &c.fusion {
        v.push(("late_weights", list_text(weights)));
    }
    v
}

fn model_config_from_pairs(r: &LineReader<'_>, m: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        m.get(k)
            .map(String::as_str)
            .ok_or_else(|| r.error(format!("missing config entry '{k}'")))
    };
    let one = |k: &str| -> Result<String> { get(k).map(str::to_string) };
    fn parse<V: std::str::FromStr>(r: &LineReader<'_>, k: &str, v: &str) -> Result<V> {
        v.parse().map_err(|_| r.error(format!("invalid value '{v}' for {k}")))
    }
    let list = |k: &str| -> Result<Vec<String>> {
        Ok(get(k)?.split(',').map(str::to_string).collect())
    };
    let usizes = |k: &str| -> Result<Vec<usize>> {
        list(k)?.iter().map(|v| parse(r, k, v)).collect()
    };
    let fusion = match get("fusion")? {
        "none" => FusionMode::None,
        "early-sum" => FusionMode::EarlySum,
        "early-concat" => FusionMode::EarlyConcat,
        "late" => FusionMode::Late {
            weights: list("late_weights")?
                .iter()
                .map(|v| parse(r, "late_weights", v))
                .collect::<Result<_>>()?,
        },
        other => return Err(r.error(format!("unknown fusion '{other}'"))),
    };
    let c = ModelConfig {
        branches: usizes("branches")?,
        branch_dims: usizes("branch_dims")?,
        d_model: parse(r, "d_model", &one("d_model")?)?,
        num_heads: parse(r, "num_heads", &one("num_heads")?)?,
        num_layers: parse(r, "num_layers", &one("num_layers")?)?,
        d_ff: parse(r, "d_ff", &one("d_ff")?)?,
        dropout: parse(r, "dropout", &one("dropout")?)?,
        num_actions: parse(r, "num_actions", &one("num_actions")?)?,
        num_activities: parse(r, "num_activities", &one("num_activities")?)?,
        use_pe: parse(r, "use_pe", &one("use_pe")?)?,
        pe_scale: parse(r, "pe_scale", &one("pe_scale")?)?,
        pe_stage: parse(r, "pe_stage", &one("pe_stage")?)?,
        early_pe: parse(r, "early_pe", &one("early_pe")?)?,
        aggregator: parse(r, "aggregator", &one("aggregator")?)?,
        fusion,
    };
    c.validate().map_err(|e| r.error(e.to_string()))?;
    Ok(c)
}

fn write_tensor<T: Real>(s: &mut String, keyword: &str, name: &str, t: &Tensor<T>) {
    let _ = write!(s, "{keyword} {name} {}", list_text(t.shape()));
    for v in t.data() {
        let _ = write!(s, " {v:e}");
    }
    s.push('\n');
}

pub fn checkpoint_to_string<T: Real>(ck: &Checkpoint<T>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(s, "scalar {}", scalar_name::<T>());
    for (k, v) in model_config_pairs(&ck.model.config) {
        let _ = writeln!(s, "config {k} {v}");
    }
    let leaves = named_leaves(&ck.model.weights);
    let _ = writeln!(s, "tensors {}", leaves.len());
    for (name, t) in &leaves {
        write_tensor(&mut s, "tensor", name, t);
    }
    match &ck.state {
        None => s.push_str("state none\n"),
        Some(st) => {
            let _ = writeln!(
                s,
                "state {} {} {} {}",
                st.iteration,
                st.adam_steps,
                st.first.len(),
                st.second.len()
            );
            for (i, t) in st.first.iter().enumerate() {
                write_tensor(&mut s, "first", &i.to_string(), t);
            }
            for (i, t) in st.second.iter().enumerate() {
                write_tensor(&mut s, "second", &i.to_string(), t);
            }
        }
    }
    s.push_str("end\n");
    s
}

fn read_tensor<T: Real>(r: &mut LineReader<'_>, keyword: &str) -> Result<(String, Tensor<T>)> {
    let fields = r.expect(keyword)?;
    let [name, dims, values @ ..] = fields.as_slice() else {
        return Err(r.error(format!("'{keyword}' needs a name and a shape")));
    };
    let shape: Vec<usize> = dims
        .split(',')
        .map(|d| r.parse(d, "extent"))
        .collect::<Result<_>>()?;
    let n = shape.iter().product();
    let data: Vec<T> = r.list(values, n, "tensor")?;
    let t = Tensor::new(shape, data).map_err(|e| r.error(e.to_string()))?;
    Ok((name.to_string(), t))
}

pub fn parse_checkpoint<T: Real>(text: &str, source: &str) -> Result<Checkpoint<T>> {
    let mut r = LineReader::new(text, source);
    let version: u32 = r.single(CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let scalar: String = r.single("scalar")?;
    if scalar != scalar_name::<T>() {
        return Err(r.error(format!(
            "checkpoint holds {scalar} values, expected {}",
            scalar_name::<T>()
        )));
    }
    let mut pairs = BTreeMap::new();
    let count = loop {
        let (key, fields) = r.next_record()?;
        match (key, fields.as_slice()) {
            ("config", [k, v]) => {
                pairs.insert(k.to_string(), v.to_string());
            }
            ("tensors", [n]) => break r.parse::<usize>(n, "tensor count")?,
            _ => return Err(r.error(format!("unexpected '{key}' line in config block"))),
        }
    };
    let config = model_config_from_pairs(&r, &pairs)?;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor::<T>(&mut r, "tensor")?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(r.error(format!("duplicate tensor '{name}'")));
        }
    }
    let mut model = GarModel::<T>::init(config, 0)?;
    let mut problem = None;
    model.weights.for_each_mut("", &mut |name, w| match tensors.remove(name) {
        Some(t) if t.shape() == w.shape() => *w = t,
        Some(t) => {
            problem.get_or_insert(format!(
                "tensor '{name}' has shape {:?}, model expects {:?}",
                t.shape(),
                w.shape()
            ));
        }
        None => {
            problem.get_or_insert(format!("missing tensor '{name}'"));
        }
    });
    if let Some(p) = problem {
        return Err(r.error(p));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(r.error(format!("unexpected tensor '{extra}'")));
    }

    let (key, fields) = r.next_record()?;
    if key != "state" {
        return Err(r.error(format!("expected 'state', found '{key}'")));
    }
    let state = match fields.as_slice() {
        ["none"] => None,
        [it, steps, n1, n2] => {
            let iteration = r.parse(it, "iteration")?;
            let adam_steps = r.parse(steps, "step count")?;
            let n1: usize = r.parse(n1, "slot count")?;
            let n2: usize = r.parse(n2, "slot count")?;
            let shapes: Vec<Vec<usize>> = named_leaves(&model.weights)
                .iter()
                .map(|(_, t)| t.shape().to_vec())
                .collect();
            let read_slots = |r: &mut LineReader<'_>, kw: &str, n: usize| -> Result<Vec<Tensor<T>>> {
                if n != 0 && n != shapes.len() {
                    return Err(r.error(format!("{n} '{kw}' slots for {} parameters", shapes.len())));
                }
                (0..n)
                    .map(|i| {
                        let (idx, t) = read_tensor::<T>(r, kw)?;
                        if idx != i.to_string() || t.shape() != shapes[i].as_slice() {
                            return Err(r.error(format!("'{kw}' slot {idx} does not match parameter {i}")));
                        }
                        Ok(t)
                    })
                    .collect()
            };
            let first = read_slots(&mut r, "first", n1)?;
            let second = read_slots(&mut r, "second", n2)?;
            Some(TrainState {
                iteration,
                adam_steps,
                first,
                second,
            })
        }
        _ => return Err(r.error("malformed state line")),
    };
    r.expect("end")?;
    Ok(Checkpoint { model, state })
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_string(ck))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| GarError::io(path, e))?;
    parse_checkpoint(&text, &path.display().to_string())
}
