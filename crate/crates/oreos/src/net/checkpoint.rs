//! Versioned binary checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "OREONET1"
//! version          u32      currently 1
//! input_h          u32      trunk input rows
//! input_w          u32      trunk input columns
//! place_dim        u32
//! orientation_dim  u32
//! trunk_layers     u32      followed by that many layer records
//! yaw_layers       u32      followed by that many layer records
//! parameters       raw f64  trunk then yaw head, each layer's tensors in
//!                           declaration order (conv: kernel, bias;
//!                           fully connected: weight, bias; prelu: slopes)
//! ```
//!
//! A layer record is a u32 byte length followed by a u8 kind tag and the
//! kind's u32 fields: 0 conv2d (in, out, kh, kw, stride), 1 maxpool2d
//! (ph, pw), 2 fully_connected (in, out), 3 prelu (channels), 4 flatten.

use super::OreosNet;
use crate::autodiff::{LayerSpec, NetError, Sequential, Tensor};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"OREONET1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { path: PathBuf, offset: usize, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

fn encode_layer(spec: &LayerSpec, out: &mut Vec<u8>) {
    let mut body = Vec::new();
    match *spec {
        LayerSpec::Conv2d { in_channels, out_channels, kernel_h, kernel_w, stride } => {
            body.push(0u8);
            for v in [in_channels, out_channels, kernel_h, kernel_w, stride] {
                body.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        LayerSpec::MaxPool2d { pool_h, pool_w } => {
            body.push(1u8);
            for v in [pool_h, pool_w] {
                body.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        LayerSpec::FullyConnected { in_features, out_features } => {
            body.push(2u8);
            for v in [in_features, out_features] {
                body.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        LayerSpec::PRelu { channels } => {
            body.push(3u8);
            body.extend_from_slice(&(channels as u32).to_le_bytes());
        }
        LayerSpec::Flatten => body.push(4u8),
    }
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> CheckpointError {
        CheckpointError::Corrupt {
            path: self.path.to_path_buf(),
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(self.corrupt(format!("expected {n} more bytes")));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_layer(cursor: &mut Cursor) -> Result<LayerSpec, CheckpointError> {
    let len = cursor.u32()? as usize;
    let start = cursor.offset;
    let tag = cursor.take(1)?[0];
    let field = |cursor: &mut Cursor| -> Result<usize, CheckpointError> {
        Ok(cursor.u32()? as usize)
    };
    let spec = match tag {
        0 => LayerSpec::Conv2d {
            in_channels: field(cursor)?,
            out_channels: field(cursor)?,
            kernel_h: field(cursor)?,
            kernel_w: field(cursor)?,
            stride: field(cursor)?,
        },
        1 => LayerSpec::MaxPool2d { pool_h: field(cursor)?, pool_w: field(cursor)? },
        2 => LayerSpec::FullyConnected {
            in_features: field(cursor)?,
            out_features: field(cursor)?,
        },
        3 => LayerSpec::PRelu { channels: field(cursor)? },
        4 => LayerSpec::Flatten,
        other => return Err(cursor.corrupt(format!("unknown layer tag {other}"))),
    };
    if cursor.offset - start != len {
        return Err(cursor.corrupt(format!(
            "layer record length {len} does not match tag {tag}"
        )));
    }
    Ok(spec)
}

impl OreosNet {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        let (h, w) = self.input_size();
        for v in [h, w, self.place_dim, self.orientation_dim] {
            bytes.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for net in [&self.trunk, &self.yaw_head] {
            bytes.extend_from_slice(&(net.specs().len() as u32).to_le_bytes());
            for spec in net.specs() {
                encode_layer(spec, &mut bytes);
            }
        }
        for net in [&self.trunk, &self.yaw_head] {
            for group in net.params() {
                for tensor in group {
                    for value in tensor.data() {
                        bytes.extend_from_slice(&value.to_le_bytes());
                    }
                }
            }
        }
        let io_err = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        let mut file = std::fs::File::create(path).map_err(io_err)?;
        file.write_all(&bytes).map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<OreosNet, CheckpointError> {
        let bytes = std::fs::read(path)
            .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        let mut cursor = Cursor { bytes: &bytes, offset: 0, path };
        if cursor.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic { path: path.to_path_buf() });
        }
        let version = cursor.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { path: path.to_path_buf(), version });
        }
        let input_h = cursor.u32()? as usize;
        let input_w = cursor.u32()? as usize;
        let place_dim = cursor.u32()? as usize;
        let orientation_dim = cursor.u32()? as usize;

        let mut spec_lists = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = cursor.u32()? as usize;
            let mut specs = Vec::with_capacity(count);
            for _ in 0..count {
                specs.push(decode_layer(&mut cursor)?);
            }
            spec_lists.push(specs);
        }

        let mut param_lists = Vec::with_capacity(2);
        for specs in &spec_lists {
            let mut params = Vec::with_capacity(specs.len());
            for spec in specs {
                let mut group = Vec::new();
                for shape in spec.param_shapes() {
                    let numel: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        data.push(cursor.f64()?);
                    }
                    group.push(Tensor::new(shape, data)?);
                }
                params.push(group);
            }
            param_lists.push(params);
        }
        if cursor.offset != bytes.len() {
            return Err(cursor.corrupt("trailing bytes after parameters"));
        }

        let yaw_params = param_lists.pop().unwrap();
        let trunk_params = param_lists.pop().unwrap();
        let yaw_specs = spec_lists.pop().unwrap();
        let trunk_specs = spec_lists.pop().unwrap();
        let trunk = Sequential::from_parts(vec![1, input_h, input_w], trunk_specs, trunk_params)?;
        let yaw_head =
            Sequential::from_parts(vec![2 * orientation_dim], yaw_specs, yaw_params)?;
        if trunk.output_shape() != [place_dim + orientation_dim] {
            return Err(CheckpointError::Corrupt {
                path: path.to_path_buf(),
                offset: 0,
                reason: format!(
                    "trunk output {:?} does not match descriptor dims {place_dim}+{orientation_dim}",
                    trunk.output_shape()
                ),
            });
        }
        Ok(OreosNet { trunk, yaw_head, place_dim, orientation_dim })
    }
}
