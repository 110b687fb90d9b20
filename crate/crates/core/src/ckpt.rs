//! Checkpoint files.
//!
//! Layout: magic `KCPT`, `u32` LE format version, `u64` LE header length,
//! UTF-8 JSON header, payload. The header embeds the graph and lists every
//! tensor (`f32`, little-endian) and mask (`u8`, 0 or 1) by byte offset and
//! length into the payload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::kcp::{KernelMask, MaskSet};
use crate::metrics::write_atomic;
use crate::nn::state::LayerState;
use crate::nn::{ModelGraph, ModelState};
use crate::tensor::{checked_numel, Tensor};

pub const MAGIC: [u8; 4] = *b"KCPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskEntry {
    layer: usize,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    graph: ModelGraph,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    masks: Vec<MaskEntry>,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: ModelGraph,
    pub state: ModelState,
    pub masks: MaskSet,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Slot {
    Param(usize),
    Buffer(usize),
    Velocity(usize),
}

/// Directory names for layer `i`, with where each tensor lives in a
/// [`LayerState`].
fn layer_slots(graph: &ModelGraph, i: usize) -> Vec<(String, Slot)> {
    let mut out = Vec::new();
    for (j, name) in graph.param_names(i).iter().enumerate() {
        out.push((format!("layers.{i}.{name}"), Slot::Param(j)));
    }
    for (j, name) in graph.buffer_names(i).iter().enumerate() {
        out.push((format!("layers.{i}.{name}"), Slot::Buffer(j)));
    }
    for (j, name) in graph.param_names(i).iter().enumerate() {
        out.push((format!("layers.{i}.{name}.velocity"), Slot::Velocity(j)));
    }
    out
}

fn tensor_of(layer: &LayerState, slot: Slot) -> &Tensor {
    match slot {
        Slot::Param(j) => &layer.params[j],
        Slot::Buffer(j) => &layer.buffers[j],
        Slot::Velocity(j) => &layer.velocity[j],
    }
}

/// Serializes a checkpoint. Without `masks` no mask directory is written and
/// the loader treats every kernel as kept.
pub fn to_bytes(graph: &ModelGraph, state: &ModelState, masks: Option<&MaskSet>) -> Result<Vec<u8>> {
    graph.output_shapes()?;
    state.check_against(graph)?;
    if let Some(m) = masks {
        m.check_against(graph)?;
    }
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (i, layer) in state.layers.iter().enumerate() {
        for (name, slot) in layer_slots(graph, i) {
            let t = tensor_of(layer, slot);
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                length: payload.len() as u64 - offset,
            });
        }
    }
    let mut mask_entries = Vec::new();
    if let Some(m) = masks {
        for (layer, mask) in m.iter() {
            let offset = payload.len() as u64;
            payload.extend_from_slice(&mask.to_bytes());
            let (o, c) = mask.shape();
            mask_entries.push(MaskEntry {
                layer,
                shape: vec![o, c],
                dtype: "u8".into(),
                offset,
                length: mask.len() as u64,
            });
        }
    }
    let header = Header {
        graph: graph.clone(),
        tensors,
        masks: mask_entries,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes a checkpoint atomically: readers see either the old file or the
/// complete new one.
pub fn save_checkpoint(graph: &ModelGraph, state: &ModelState, masks: Option<&MaskSet>, path: &Path) -> Result<()> {
    let bytes = to_bytes(graph, state, masks)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn dir_err(msg: impl Into<String>) -> Error {
    CheckpointError::CorruptDirectory(msg.into()).into()
}

fn payload_err(msg: impl Into<String>) -> Error {
    CheckpointError::CorruptPayload(msg.into()).into()
}

/// Byte range of a directory entry, checked against the payload.
fn range(offset: u64, length: u64, payload: usize, what: &str) -> Result<(usize, usize)> {
    let end = offset
        .checked_add(length)
        .ok_or_else(|| dir_err(format!("{what}: range overflows")))?;
    if end > payload as u64 {
        return Err(payload_err(format!(
            "{what}: bytes {offset}..{end} beyond payload of {payload} bytes"
        )));
    }
    Ok((offset as usize, end as usize))
}

/// Parses and fully validates a checkpoint image. Never reads outside the
/// declared ranges; allocations are bounded by the input length.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(CheckpointError::NotACheckpoint.into());
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::CorruptHeader("truncated preamble".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    if header_len > rest.len() as u64 {
        return Err(CheckpointError::CorruptHeader(format!(
            "header length {header_len} exceeds file size"
        ))
        .into());
    }
    let (header, payload) = rest.split_at(header_len as usize);
    let header: Header =
        serde_json::from_slice(header).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let graph = header.graph;
    graph
        .output_shapes()
        .map_err(|e| CheckpointError::CorruptHeader(format!("embedded graph: {e}")))?;

    // directory checks: names, shapes, dtypes, lengths, overlap
    let mut expected: BTreeMap<String, (usize, Slot, Vec<usize>)> = BTreeMap::new();
    for i in 0..graph.layers.len() {
        let params = graph.param_shapes(i);
        let buffers = graph.buffer_shapes(i);
        for (name, slot) in layer_slots(&graph, i) {
            let shape = match slot {
                Slot::Param(j) | Slot::Velocity(j) => params[j].clone(),
                Slot::Buffer(j) => buffers[j].clone(),
            };
            expected.insert(name, (i, slot, shape));
        }
    }
    let mut spans: Vec<(u64, u64)> = Vec::new();
    let mut seen = BTreeSet::new();
    for e in &header.tensors {
        let Some((_, _, shape)) = expected.get(&e.name) else {
            return Err(dir_err(format!("unknown tensor {}", e.name)));
        };
        if !seen.insert(e.name.as_str()) {
            return Err(dir_err(format!("duplicate tensor {}", e.name)));
        }
        if e.dtype != "f32" {
            return Err(dir_err(format!("{}: dtype {} is not f32", e.name, e.dtype)));
        }
        if &e.shape != shape {
            return Err(dir_err(format!("{}: shape {:?}, graph needs {:?}", e.name, e.shape, shape)));
        }
        let numel = checked_numel(shape).ok_or_else(|| dir_err(format!("{}: shape overflows", e.name)))?;
        if Some(e.length) != (numel as u64).checked_mul(4) {
            return Err(dir_err(format!("{}: {} bytes for {numel} elements", e.name, e.length)));
        }
        spans.push((e.offset, e.length));
    }
    for (name, (_, slot, _)) in &expected {
        if !matches!(slot, Slot::Velocity(_)) && !seen.contains(name.as_str()) {
            return Err(dir_err(format!("missing tensor {name}")));
        }
    }
    let mut mask_layers = BTreeSet::new();
    for m in &header.masks {
        let Some(crate::nn::graph::LayerKind::Conv2d {
            in_channels,
            out_channels,
            ..
        }) = graph.layers.get(m.layer).map(|l| &l.kind)
        else {
            return Err(dir_err(format!("mask for layer {} which is not a conv layer", m.layer)));
        };
        if !mask_layers.insert(m.layer) {
            return Err(dir_err(format!("duplicate mask for layer {}", m.layer)));
        }
        if m.dtype != "u8" {
            return Err(dir_err(format!("mask {}: dtype {} is not u8", m.layer, m.dtype)));
        }
        if m.shape != [*out_channels, *in_channels] {
            return Err(dir_err(format!("mask {}: shape {:?}", m.layer, m.shape)));
        }
        if Some(m.length) != out_channels.checked_mul(*in_channels).map(|n| n as u64) {
            return Err(dir_err(format!("mask {}: length {}", m.layer, m.length)));
        }
        spans.push((m.offset, m.length));
    }
    let mut sorted = spans.clone();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0].0.saturating_add(w[0].1) > w[1].0 {
            return Err(dir_err("overlapping entries"));
        }
    }

    // payload
    let mut state = PartialState::new(&graph);
    for e in &header.tensors {
        let (start, end) = range(e.offset, e.length, payload.len(), &e.name)?;
        let (layer, slot, shape) = &expected[&e.name];
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape.clone(), data).map_err(|e| dir_err(e.to_string()))?;
        let ls = &mut state.layers[*layer];
        match *slot {
            Slot::Param(j) => ls.params[j] = Some(t),
            Slot::Buffer(j) => ls.buffers[j] = Some(t),
            Slot::Velocity(j) => ls.velocity[j] = Some(t),
        }
    }
    let mut masks = MaskSet::default();
    for m in &header.masks {
        let (start, end) = range(m.offset, m.length, payload.len(), &format!("mask {}", m.layer))?;
        let mask = KernelMask::from_bytes(m.shape[0], m.shape[1], &payload[start..end])
            .ok_or_else(|| payload_err(format!("mask {}: values other than 0 and 1", m.layer)))?;
        masks.insert(m.layer, mask);
    }
    let used = spans.iter().map(|&(o, l)| o + l).max().unwrap_or(0);
    if (payload.len() as u64) > used {
        return Err(payload_err(format!("{} trailing bytes", payload.len() as u64 - used)));
    }
    let state = state.finish(&graph);
    for (layer, mask) in MaskSet::all_kept(&graph).iter() {
        if masks.get(layer).is_none() {
            masks.insert(layer, mask.clone());
        }
    }
    Ok(Checkpoint { graph, state, masks })
}

/// Layer states filled in piece by piece while loading.
struct PartialState {
    layers: Vec<PartialLayer>,
}

struct PartialLayer {
    params: Vec<Option<Tensor>>,
    buffers: Vec<Option<Tensor>>,
    velocity: Vec<Option<Tensor>>,
}

impl PartialState {
    fn new(graph: &ModelGraph) -> Self {
        Self {
            layers: (0..graph.layers.len())
                .map(|i| {
                    let p = graph.param_names(i).len();
                    PartialLayer {
                        params: vec![None; p],
                        buffers: vec![None; graph.buffer_names(i).len()],
                        velocity: vec![None; p],
                    }
                })
                .collect(),
        }
    }

    /// Params and buffers are known present; missing velocity is zero.
    fn finish(self, graph: &ModelGraph) -> ModelState {
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let shapes = graph.param_shapes(i);
                let params: Vec<Tensor> = l.params.into_iter().map(|t| t.expect("validated")).collect();
                let velocity = l
                    .velocity
                    .into_iter()
                    .zip(&shapes)
                    .map(|(v, s)| v.unwrap_or_else(|| Tensor::zeros(s)))
                    .collect();
                LayerState {
                    params,
                    buffers: l.buffers.into_iter().map(|t| t.expect("validated")).collect(),
                    velocity,
                }
            })
            .collect();
        ModelState { layers }
    }
}
