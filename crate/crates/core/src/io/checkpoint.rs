use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::json::parse_json;
use super::{write_atomic, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::model::{NetRole, ParameterSet};
use crate::tensor::Tensor;
use crate::train::{AdamState, Checkpoint, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HWCKPT01";
/// Magic plus the little-endian u64 preamble length.
const PREFIX_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
    /// Byte offset into the buffer region.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preamble {
    version: String,
    config: TrainConfig,
    iteration: u64,
    adam_theta_step: Option<u64>,
    adam_phi_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

fn net_tensors<'a>(tag: &str, p: &'a Option<ParameterSet>, adam: &'a Option<AdamState>) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    if let Some(p) = p {
        let learn: Vec<String> = p.learnable().into_iter().map(|(n, _)| n).collect();
        out.extend(p.named_tensors().into_iter().map(|(n, t)| (format!("{tag}/{n}"), t)));
        if let Some(a) = adam {
            for (n, t) in learn.iter().zip(&a.m) {
                out.push((format!("{tag}.adam_m/{n}"), t));
            }
            for (n, t) in learn.iter().zip(&a.v) {
                out.push((format!("{tag}.adam_v/{n}"), t));
            }
        }
    }
    out
}

fn net_tensors_mut<'a>(
    tag: &str,
    p: &'a mut Option<ParameterSet>,
    adam: &'a mut Option<AdamState>,
) -> Vec<(String, &'a mut Tensor)> {
    let mut out = Vec::new();
    if let Some(p) = p {
        let learn: Vec<String> = p.learnable().into_iter().map(|(n, _)| n).collect();
        out.extend(
            p.named_tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("{tag}/{n}"), t)),
        );
        if let Some(a) = adam {
            for (n, t) in learn.iter().zip(a.m.iter_mut()) {
                out.push((format!("{tag}.adam_m/{n}"), t));
            }
            for (n, t) in learn.iter().zip(a.v.iter_mut()) {
                out.push((format!("{tag}.adam_v/{n}"), t));
            }
        }
    }
    out
}

/// Single-file container: magic, u64 preamble length, JSON preamble (config,
/// counters, tensor directory) and concatenated little-endian f64 buffers.
pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let mut tensors = net_tensors("theta", &ck.theta, &ck.adam_theta);
    tensors.extend(net_tensors("phi", &ck.phi, &ck.adam_phi));
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dims: t.dims().to_vec(),
            offset,
        });
        offset += 8 * t.numel() as u64;
    }
    let preamble = Preamble {
        version: SCHEMA_VERSION.to_string(),
        config: ck.config.clone(),
        iteration: ck.iteration,
        adam_theta_step: ck.adam_theta.as_ref().map(|a| a.step),
        adam_phi_step: ck.adam_phi.as_ref().map(|a| a.step),
        tensors: entries,
    };
    let json = serde_json::to_vec(&preamble)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path.as_ref(), &out)
}

/// Reads a checkpoint and checks every stored tensor against the shapes its
/// own configuration implies.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < PREFIX_LEN {
        return Err(fail(bytes.len(), "truncated checkpoint header".into()));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(0, "not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = PREFIX_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail(8, format!("preamble length {len} exceeds file size {}", bytes.len())))?;
    let pre: Preamble = parse_json(&bytes[PREFIX_LEN..body_start], path).map_err(|e| match e {
        Error::Format { offset, message, .. } => fail(PREFIX_LEN + offset as usize, message),
        other => other,
    })?;
    if pre.version != SCHEMA_VERSION {
        return Err(fail(
            PREFIX_LEN,
            format!("checkpoint version {:?}, expected {SCHEMA_VERSION:?}", pre.version),
        ));
    }
    pre.config
        .validate()
        .map_err(|e| fail(PREFIX_LEN, format!("invalid stored config: {e}")))?;

    let mode = pre.config.mode;
    let skeleton = |use_it: bool, role, cfg| -> Result<Option<ParameterSet>> {
        use_it
            .then(|| ParameterSet::zeros(role, cfg))
            .transpose()
            .map_err(|e| fail(PREFIX_LEN, format!("invalid stored network config: {e}")))
    };
    let mut theta = skeleton(mode.uses_theta(), NetRole::Segmentation, &pre.config.seg_net)?;
    let mut phi = skeleton(mode.uses_phi(), NetRole::Registration, &pre.config.reg_net)?;
    let adam_for = |p: &Option<ParameterSet>, step: Option<u64>, tag: &str| -> Result<Option<AdamState>> {
        match (p, step) {
            (Some(p), Some(step)) => {
                let mut a = AdamState::zeros_like(p.learnable().into_iter().map(|(_, t)| t));
                a.step = step;
                Ok(Some(a))
            }
            (None, None) => Ok(None),
            _ => Err(fail(
                PREFIX_LEN,
                format!("optimizer state for {tag} does not match the {mode} mode"),
            )),
        }
    };
    let mut adam_theta = adam_for(&theta, pre.adam_theta_step, "theta")?;
    let mut adam_phi = adam_for(&phi, pre.adam_phi_step, "phi")?;

    let buffers = &bytes[body_start..];
    let mut directory: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for e in &pre.tensors {
        if directory.insert(&e.name, e).is_some() {
            return Err(fail(PREFIX_LEN, format!("tensor {} listed twice", e.name)));
        }
    }
    let mut used = 0usize;
    let mut expected = net_tensors_mut("theta", &mut theta, &mut adam_theta);
    expected.extend(net_tensors_mut("phi", &mut phi, &mut adam_phi));
    let n_expected = expected.len();
    for (name, t) in expected {
        let e = directory
            .get(name.as_str())
            .ok_or_else(|| fail(PREFIX_LEN, format!("missing tensor {name}")))?;
        if e.dims != t.dims() {
            return Err(fail(
                PREFIX_LEN,
                format!(
                    "tensor {name} is {:?} but the stored config implies {:?}",
                    e.dims,
                    t.dims()
                ),
            ));
        }
        let start = e.offset as usize;
        let end = start + 8 * t.numel();
        if end > buffers.len() {
            return Err(fail(bytes.len(), format!("truncated buffer for {name}")));
        }
        for (v, c) in t.data_mut().iter_mut().zip(buffers[start..end].chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
        used += end - start;
    }
    if directory.len() != n_expected {
        return Err(fail(
            PREFIX_LEN,
            format!("{} unexpected tensors", directory.len() - n_expected),
        ));
    }
    if used != buffers.len() {
        return Err(fail(
            body_start + used,
            format!("buffer region is {} bytes, expected {used}", buffers.len()),
        ));
    }
    Ok(Checkpoint {
        config: pre.config,
        iteration: pre.iteration,
        theta,
        phi,
        adam_theta,
        adam_phi,
    })
}
