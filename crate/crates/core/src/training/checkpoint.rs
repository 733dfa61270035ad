//! Checkpoint file: a little-endian `u64` header length, the JSON header,
//! then one NART blob per tensor in header order.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{AdamState, TrainSetup, TrainState};
use crate::encoders::{init_params, Head, InputShape, ModelParams};
use crate::error::{Error, Result};
use crate::nart;
use crate::scalar::Scalar;
use crate::tensor::TensorMap;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    /// `param`, `running`, `adam_m` or `adam_v`.
    pub group: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub setup: TrainSetup,
    pub input: InputShape,
    pub heads: Vec<Head>,
    pub animals: Vec<u32>,
    pub n_classes: usize,
    pub epochs_completed: usize,
    pub adam_step: u64,
    pub seed: u64,
    pub tensors: Vec<TensorRecord>,
}

const HEADER_FIELDS: [&str; 11] = [
    "format_version",
    "dtype",
    "setup",
    "input",
    "heads",
    "animals",
    "n_classes",
    "epochs_completed",
    "adam_step",
    "seed",
    "tensors",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S = f64> {
    pub header: CheckpointHeader,
    pub model: ModelParams<S>,
    pub optimizer: AdamState<S>,
}

fn dtype_name<S: Scalar>() -> &'static str {
    if S::BYTES == 4 {
        "f32"
    } else {
        "f64"
    }
}

const GROUPS: [&str; 4] = ["param", "running", "adam_m", "adam_v"];

impl<S: Scalar> Checkpoint<S> {
    pub fn new(
        setup: &TrainSetup,
        input: InputShape,
        heads: &[Head],
        animals: &[u32],
        n_classes: usize,
        state: &TrainState<S>,
    ) -> Self {
        let mut tensors = Vec::new();
        for (group, map) in GROUPS.iter().zip([
            &state.model.params,
            &state.model.running,
            &state.optimizer.m,
            &state.optimizer.v,
        ]) {
            for (name, t) in map {
                tensors.push(TensorRecord {
                    name: name.clone(),
                    group: group.to_string(),
                    shape: t.shape().to_vec(),
                });
            }
        }
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                dtype: dtype_name::<S>().into(),
                setup: setup.clone(),
                input,
                heads: heads.to_vec(),
                animals: animals.to_vec(),
                n_classes,
                epochs_completed: state.epochs_completed,
                adam_step: state.optimizer.step,
                seed: setup.train.seed,
                tensors,
            },
            model: state.model.clone(),
            optimizer: state.optimizer.clone(),
        }
    }

    fn group(&self, group: &str) -> &TensorMap<S> {
        match group {
            "param" => &self.model.params,
            "running" => &self.model.running,
            "adam_m" => &self.optimizer.m,
            _ => &self.optimizer.v,
        }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| Error::Json {
        context: "checkpoint header".into(),
        source: e,
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for rec in &ckpt.header.tensors {
        let t = ckpt
            .group(&rec.group)
            .get(&rec.name)
            .ok_or_else(|| Error::invalid(format!("tensor `{}` listed but missing", rec.name)))?;
        out.extend_from_slice(&nart::encode(t));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, path: &Path) -> Result<T> {
    let v = obj
        .get(name)
        .ok_or_else(|| format_err(path, format!("header field `{name}` is missing")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| format_err(path, format!("header field `{name}`: {e}")))
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<CheckpointHeader> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| format_err(path, format!("header is not valid JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(format_err(path, "header is not a JSON object"));
    };
    if let Some(k) = obj.keys().find(|k| !HEADER_FIELDS.contains(&k.as_str())) {
        return Err(format_err(path, format!("unknown header field `{k}`")));
    }
    let version: u32 = field(&obj, "format_version", path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: path.display().to_string(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(CheckpointHeader {
        format_version: version,
        dtype: field(&obj, "dtype", path)?,
        setup: field(&obj, "setup", path)?,
        input: field(&obj, "input", path)?,
        heads: field(&obj, "heads", path)?,
        animals: field(&obj, "animals", path)?,
        n_classes: field(&obj, "n_classes", path)?,
        epochs_completed: field(&obj, "epochs_completed", path)?,
        adam_step: field(&obj, "adam_step", path)?,
        seed: field(&obj, "seed", path)?,
        tensors: field(&obj, "tensors", path)?,
    })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(format_err(
            path,
            "file shorter than the header length prefix",
        ));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes")) as usize;
    if len > bytes.len() - 8 {
        return Err(format_err(
            path,
            format!("header length {len} exceeds the file size"),
        ));
    }
    let header = parse_header(&bytes[8..8 + len], path)?;
    if header.dtype != dtype_name::<S>() {
        return Err(format_err(
            path,
            format!(
                "header field `dtype` is {} but {} was requested",
                header.dtype,
                dtype_name::<S>()
            ),
        ));
    }
    header.setup.validate()?;
    let fresh = init_params::<S>(&header.setup.model, header.input, &header.heads, 0)?;
    let mut model = ModelParams {
        params: TensorMap::new(),
        running: TensorMap::new(),
        specs: fresh.specs,
    };
    let mut optimizer = AdamState {
        step: header.adam_step,
        ..AdamState::default()
    };
    let mut pos = 8 + len;
    for rec in &header.tensors {
        let what = format!("{} ({})", path.display(), rec.name);
        let (t, used) = nart::decode_prefix::<S>(&bytes[pos..], &what)?;
        pos += used;
        if t.shape() != rec.shape.as_slice() {
            return Err(format_err(
                path,
                format!(
                    "tensor `{}` has shape {:?}, header says {:?}",
                    rec.name,
                    t.shape(),
                    rec.shape
                ),
            ));
        }
        let slot = match rec.group.as_str() {
            "param" => &mut model.params,
            "running" => &mut model.running,
            "adam_m" => &mut optimizer.m,
            "adam_v" => &mut optimizer.v,
            g => {
                return Err(format_err(
                    path,
                    format!("tensor `{}` has unknown group `{g}`", rec.name),
                ))
            }
        };
        if slot.insert(rec.name.clone(), t).is_some() {
            return Err(format_err(
                path,
                format!("tensor `{}` listed twice in group {}", rec.name, rec.group),
            ));
        }
    }
    if pos != bytes.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes", bytes.len() - pos),
        ));
    }
    for (name, spec) in &model.specs {
        match model.params.get(name) {
            None => return Err(format_err(path, format!("parameter `{name}` is missing"))),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(format_err(
                    path,
                    format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        spec.shape
                    ),
                ))
            }
            _ => {}
        }
    }
    if let Some(extra) = model.params.keys().find(|k| !model.specs.contains_key(*k)) {
        return Err(format_err(
            path,
            format!("parameter `{extra}` is not part of the model"),
        ));
    }
    for (name, t) in &fresh.running {
        if model.running.get(name).map(|r| r.shape()) != Some(t.shape()) {
            return Err(format_err(
                path,
                format!("running statistic `{name}` is missing or misshapen"),
            ));
        }
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}
