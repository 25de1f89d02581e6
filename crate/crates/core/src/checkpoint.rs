//! DGIBCK01 checkpoints: magic, `u32` manifest length, JSON manifest, then a
//! little-endian `f64` payload holding parameters, Adam moments and the
//! optional prior table. Layout details are in `docs/formats.md`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{DisGenModel, ModelDims, PriorTable};
use crate::objective::ObjectiveConfig;
use crate::optim::OptState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGIBCK01";
const PREFIX_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub name: String,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub payload_bytes: usize,
    pub epoch: usize,
    pub seed: u64,
    pub dims: ModelDims,
    pub sigma_rec: f64,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub prior_sigma: Option<f64>,
    pub optimizers: Vec<OptimizerEntry>,
    pub tensors: Vec<TensorEntry>,
    /// Resolved run configuration, echoed verbatim.
    pub config: Value,
}

fn optimizers(tr: &Trainer) -> [(&'static str, &OptState); 3] {
    [("main", &tr.opt), ("approx_a", &tr.opt_a), ("approx_z", &tr.opt_z)]
}

/// Serializes a trainer; identical trainers give identical bytes.
pub fn trainer_to_bytes(tr: &Trainer, config: &Value) -> Result<Vec<u8>> {
    let store = &tr.model.store;
    let mut tensors: Vec<(String, &[usize], &[f64])> = Vec::new();
    for (name, t) in store.iter() {
        tensors.push((format!("param/{name}"), t.shape(), t.data()));
    }
    for (group, opt) in optimizers(tr) {
        for (k, id) in opt.ids().iter().enumerate() {
            let (m, v) = opt.moments(k);
            let shape = store.get(*id).shape();
            let pname = store.name(*id);
            tensors.push((format!("adam/{group}/m/{pname}"), shape, m));
            tensors.push((format!("adam/{group}/v/{pname}"), shape, v));
        }
    }
    if let Some(p) = &tr.priors {
        tensors.push(("prior/attributes".into(), p.attributes().shape(), p.attributes().data()));
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in &tensors {
        let bytes = 8 * data.len();
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.to_vec(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let manifest = Manifest {
        format: "DGIBCK01".into(),
        dtype: "f64".into(),
        payload_bytes: offset,
        epoch: tr.epoch,
        seed: tr.seed,
        dims: tr.model.dims,
        sigma_rec: tr.model.sigma_rec,
        objective: tr.objective.clone(),
        train: tr.config.clone(),
        prior_sigma: tr.priors.as_ref().map(PriorTable::sigma),
        optimizers: optimizers(tr)
            .iter()
            .map(|(name, o)| OptimizerEntry {
                name: (*name).into(),
                step: o.step,
            })
            .collect(),
        tensors: entries,
        config: config.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::contract("manifest exceeds u32 length"))?;
    let mut buf = Vec::with_capacity(PREFIX_LEN + json.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

/// Validates framing and returns the manifest plus the payload slice.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < PREFIX_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(format_err(
            0,
            format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..8])),
        ));
    }
    let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let end = PREFIX_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            format_err(
                bytes.len(),
                format!("truncated manifest: need {len} bytes at offset 12"),
            )
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[PREFIX_LEN..end])
        .map_err(|e| format_err(PREFIX_LEN, format!("manifest: {e}")))?;
    if manifest.format != "DGIBCK01" || manifest.dtype != "f64" {
        return Err(format_err(
            PREFIX_LEN,
            format!("unsupported format {:?} dtype {:?}", manifest.format, manifest.dtype),
        ));
    }
    let payload = &bytes[end..];
    if payload.len() != manifest.payload_bytes {
        return Err(format_err(
            end,
            format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_bytes
            ),
        ));
    }
    let mut expect = 0;
    for t in &manifest.tensors {
        let numel: usize = t.shape.iter().product();
        if t.offset != expect || t.bytes != 8 * numel {
            return Err(format_err(
                end + expect,
                format!("tensor {} is not contiguous with its shape", t.name),
            ));
        }
        expect += t.bytes;
    }
    if expect != payload.len() {
        return Err(format_err(end + expect, "tensor table does not cover the payload"));
    }
    Ok((manifest, payload))
}

fn decode(payload: &[u8], t: &TensorEntry) -> Result<Tensor> {
    let data = payload[t.offset..t.offset + t.bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(t.shape.clone(), data)
}

/// Inverse of [`trainer_to_bytes`]; returns the trainer and the echoed config.
pub fn trainer_from_bytes(bytes: &[u8]) -> Result<(Trainer, Value)> {
    let (manifest, payload) = read_manifest(bytes)?;
    let mut params = ParamStore::new();
    let mut moments = std::collections::HashMap::new();
    let mut attributes = None;
    for t in &manifest.tensors {
        let value = decode(payload, t)?;
        if let Some(name) = t.name.strip_prefix("param/") {
            params.insert(name, value);
        } else if let Some(rest) = t.name.strip_prefix("adam/") {
            moments.insert(rest.to_string(), value);
        } else if t.name == "prior/attributes" {
            attributes = Some(value);
        } else {
            return Err(format_err(PREFIX_LEN, format!("unknown tensor {}", t.name)));
        }
    }
    let model = DisGenModel::from_store(manifest.dims, manifest.sigma_rec, params)?;
    let priors = match (attributes, manifest.prior_sigma) {
        (Some(a), Some(s)) => Some(PriorTable::new(a, s)?),
        (None, None) => None,
        _ => {
            return Err(format_err(
                PREFIX_LEN,
                "prior table and prior_sigma must appear together",
            ))
        }
    };
    let mut tr = Trainer::new(
        model,
        &manifest.objective,
        manifest.train.clone(),
        priors,
        manifest.seed,
    )?;
    tr.epoch = manifest.epoch;
    let steps: std::collections::HashMap<&str, u64> =
        manifest.optimizers.iter().map(|o| (o.name.as_str(), o.step)).collect();
    let store = tr.model.store.clone();
    for (group, opt) in [
        ("main", &mut tr.opt),
        ("approx_a", &mut tr.opt_a),
        ("approx_z", &mut tr.opt_z),
    ] {
        opt.step = *steps
            .get(group)
            .ok_or_else(|| format_err(PREFIX_LEN, format!("missing optimizer {group}")))?;
        for k in 0..opt.ids().len() {
            let pname = store.name(opt.ids()[k]);
            let take = |which: &str| -> Result<Vec<f64>> {
                moments
                    .get(&format!("{group}/{which}/{pname}"))
                    .map(|t: &Tensor| t.data().to_vec())
                    .ok_or_else(|| format_err(PREFIX_LEN, format!("missing adam/{group}/{which}/{pname}")))
            };
            opt.set_moments(k, take("m")?, take("v")?)?;
        }
    }
    Ok((tr, manifest.config))
}

pub fn checkpoint_write(tr: &Trainer, config: &Value, path: &Path) -> Result<()> {
    std::fs::write(path, trainer_to_bytes(tr, config)?)?;
    Ok(())
}

pub fn checkpoint_read(path: &Path) -> Result<(Trainer, Value)> {
    trainer_from_bytes(&std::fs::read(path)?)
}
