//! The `EXPW` weights container.
//!
//! ```text
//! "EXPW" | version: u8 = 1 | entry count: u16
//! entry*: layer index: u16 | rank: u32 | dims: u32 × rank | byte offset: u64
//! payload: little-endian f32 values, per layer the kernel then the bias
//! ```
//!
//! Integers are little-endian. Offsets are relative to the payload start.
//! The layer structure is recovered from the table: a conv is followed by
//! ReLU and (when the index gap says so) a 2×2 pool, a hidden dense layer by a
//! ReLU, and the final dense layer by the softmax.

use std::path::Path;

use crate::error::{Error, Result};

use super::spec::{LayerKind, NetworkSpec, Shape, Weights};

pub const MAGIC: &[u8; 4] = b"EXPW";
pub const VERSION: u8 = 1;

struct Entry {
    layer: u16,
    dims: Vec<u32>,
    offset: u64,
}

pub fn encode_weights(spec: &NetworkSpec, weights: &Weights) -> Result<Vec<u8>> {
    weights.validate(spec)?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for block in &weights.blocks {
        let layer = u16::try_from(block.layer).map_err(|_| Error::contract("layer index exceeds u16"))?;
        let kdims = block.kernel_shape.iter().map(|&d| d as u32).collect();
        entries.push(Entry { layer, dims: kdims, offset });
        offset += 4 * block.kernel.len() as u64;
        entries.push(Entry {
            layer,
            dims: vec![block.bias.len() as u32],
            offset,
        });
        offset += 4 * block.bias.len() as u64;
    }
    let count = u16::try_from(entries.len()).map_err(|_| Error::contract("too many tensors"))?;

    let mut out = Vec::with_capacity(offset as usize + 64 * entries.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&e.layer.to_le_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&e.offset.to_le_bytes());
    }
    for v in weights.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("weights file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn decode_weights(bytes: &[u8]) -> Result<(NetworkSpec, Weights)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("bad magic, not an EXPW file"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(format_err(format!("unsupported EXPW version {version}")));
    }
    let count = r.u16()? as usize;
    if count == 0 || count % 2 != 0 {
        return Err(format_err("tensor table must hold kernel/bias pairs"));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let layer = r.u16()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(format_err(format!("unsupported tensor rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        entries.push(Entry { layer, dims, offset });
    }
    let payload = &bytes[r.pos..];

    let read_tensor = |e: &Entry| -> Result<Vec<f32>> {
        let n: usize = e.dims.iter().map(|&d| d as usize).product();
        let start = usize::try_from(e.offset).map_err(|_| format_err("offset overflow"))?;
        let end = start
            .checked_add(4 * n)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| format_err("tensor payload out of range"))?;
        Ok(payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    };

    let spec = infer_spec(&entries)?;
    let mut weights = Weights::zeros(&spec);
    if weights.blocks.len() * 2 != entries.len() {
        return Err(format_err("tensor table does not match the inferred network"));
    }
    for (block, pair) in weights.blocks.iter_mut().zip(entries.chunks_exact(2)) {
        if pair[0].layer as usize != block.layer || pair[1].layer as usize != block.layer {
            return Err(format_err("tensor table layer indices are inconsistent"));
        }
        block.kernel = read_tensor(&pair[0])?;
        block.bias = read_tensor(&pair[1])?;
    }
    let expected: usize = weights.param_count() * 4;
    if payload.len() != expected {
        return Err(format_err(format!(
            "payload holds {} bytes, expected {expected}",
            payload.len()
        )));
    }
    weights.validate(&spec)?;
    Ok((spec, weights))
}

fn infer_spec(entries: &[Entry]) -> Result<NetworkSpec> {
    let pairs: Vec<&[Entry]> = entries.chunks_exact(2).collect();
    let kinds: Vec<(usize, &Entry)> = pairs.iter().map(|p| (p[0].layer as usize, &p[0])).collect();
    for w in kinds.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(format_err("layer indices must increase"));
        }
    }
    let (first_layer, first) = kinds[0];
    if first_layer != 0 {
        return Err(format_err("first parameterized layer must be layer 0"));
    }

    // Count pools to recover the input's spatial size from the first dense layer.
    let mut pools = 0u32;
    let mut layer_kinds: Vec<LayerKind> = Vec::new();
    let mut conv_channels = None;
    let mut first_dense_inputs = None;
    for (i, &(li, e)) in kinds.iter().enumerate() {
        if layer_kinds.len() != li {
            return Err(format_err("layer index gap cannot be decoded"));
        }
        let next = kinds.get(i + 1).map(|k| k.0);
        match e.dims.len() {
            4 => {
                if e.dims[2] != 3 || e.dims[3] != 3 {
                    return Err(format_err("only 3x3 kernels are supported"));
                }
                if first_dense_inputs.is_some() {
                    return Err(format_err("conv after dense is not supported"));
                }
                layer_kinds.push(LayerKind::Conv3x3 { filters: e.dims[0] as usize });
                conv_channels = Some(e.dims[0] as usize);
                let gap = next.ok_or_else(|| format_err("network cannot end with a conv"))? - li - 1;
                match gap {
                    0 => {}
                    1 => layer_kinds.push(LayerKind::Relu),
                    2 => {
                        layer_kinds.push(LayerKind::Relu);
                        layer_kinds.push(LayerKind::MaxPool2);
                        pools += 1;
                    }
                    _ => return Err(format_err("layer index gap cannot be decoded")),
                }
            }
            2 => {
                layer_kinds.push(LayerKind::Dense { units: e.dims[0] as usize });
                first_dense_inputs.get_or_insert(e.dims[1] as usize);
                match next.map(|n| n - li - 1) {
                    None => layer_kinds.push(LayerKind::Softmax),
                    Some(0) => {}
                    Some(1) => layer_kinds.push(LayerKind::Relu),
                    Some(_) => return Err(format_err("layer index gap cannot be decoded")),
                }
            }
            _ => return Err(format_err("kernel tensors must be rank 2 or 4")),
        }
    }

    let input = match conv_channels {
        None => Shape::vector(first.dims[1] as usize),
        Some(c_last) => {
            let flat = first_dense_inputs.ok_or_else(|| format_err("network needs a dense output"))?;
            if flat % c_last != 0 {
                return Err(format_err("dense input is not a multiple of conv channels"));
            }
            let area = flat / c_last;
            let side = (area as f64).sqrt().round() as usize;
            if side * side != area {
                return Err(format_err("only square inputs are supported"));
            }
            let full = side << pools;
            Shape::new(first.dims[1] as usize, full, full)
        }
    };

    let mut builder = NetworkSpec::builder(input);
    for kind in layer_kinds {
        builder = match kind {
            LayerKind::Conv3x3 { filters } => builder.conv3x3(filters),
            LayerKind::Dense { units } => builder.dense(units),
            LayerKind::MaxPool2 => builder.maxpool2(),
            LayerKind::Relu => builder.relu(),
            LayerKind::Softmax => builder.softmax(),
        };
    }
    builder.build().map_err(|e| format_err(format!("decoded network is invalid: {e}")))
}

pub fn write_weights(path: &Path, spec: &NetworkSpec, weights: &Weights) -> Result<()> {
    let bytes = encode_weights(spec, weights)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<(NetworkSpec, Weights)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
