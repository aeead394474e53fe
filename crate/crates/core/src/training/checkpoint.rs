//! Little-endian checkpoint container.
//!
//! Layout: magic `MSRP`, `u32` format version, `u32` array count, then per array
//! `u32` name length, UTF-8 name, `u32` rank, `rank x u64` dims and the `f64`
//! payload in row-major order. A trailing `u32` CRC32 covers every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};

use crate::decoder::DecoderParameters;
use crate::encoder::{Activation, EncoderParameters};
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: [u8; 4] = *b"MSRP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub data: ArrayD<f64>,
}

pub fn encode_arrays(arrays: &[NamedArray]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        buf.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(a.name.as_bytes());
        buf.extend_from_slice(&(a.data.ndim() as u32).to_le_bytes());
        for &d in a.data.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in a.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_arrays(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = ArrayD::from_shape_vec(IxDyn(&dims), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        arrays.push(NamedArray { name, data });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last array".into()));
    }
    Ok(arrays)
}

fn scalar(name: &str, v: f64) -> NamedArray {
    NamedArray {
        name: name.into(),
        data: ArrayD::from_elem(IxDyn(&[]), v),
    }
}

fn named(name: &str, data: ArrayD<f64>) -> NamedArray {
    NamedArray { name: name.into(), data }
}

pub fn model_to_arrays(model: &Model) -> Vec<NamedArray> {
    vec![
        named("encoder.kernels", model.encoder.kernels.clone().into_dyn()),
        named("encoder.dilated_kernels", model.encoder.dilated_kernels.clone().into_dyn()),
        named("decoder.frequencies", model.decoder.frequencies.clone().into_dyn()),
        named("decoder.phases", model.decoder.phases.clone().into_dyn()),
        named("decoder.modulators", model.decoder.modulators.clone().into_dyn()),
        scalar("meta.stride", model.encoder.stride as f64),
        scalar("meta.dilation", model.encoder.dilation as f64),
        scalar("meta.square_freq", if model.decoder.square_freq { 1.0 } else { 0.0 }),
    ]
}

fn find<'a>(arrays: &'a [NamedArray], name: &str) -> Result<&'a ArrayD<f64>> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .map(|a| &a.data)
        .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))
}

fn meta_usize(arrays: &[NamedArray], name: &str) -> Result<usize> {
    let v = find(arrays, name)?.iter().next().copied().unwrap_or(f64::NAN);
    if v >= 1.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(Error::Checkpoint(format!("'{name}' must be a positive integer, got {v}")))
    }
}

fn dim_err(name: &str) -> impl Fn(ndarray::ShapeError) -> Error + '_ {
    move |_| Error::Checkpoint(format!("array '{name}' has the wrong rank"))
}

pub fn model_from_arrays(arrays: &[NamedArray]) -> Result<Model> {
    let get2 = |n: &str| -> Result<Array2<f64>> {
        find(arrays, n)?.clone().into_dimensionality().map_err(dim_err(n))
    };
    let get1 = |n: &str| -> Result<Array1<f64>> {
        find(arrays, n)?.clone().into_dimensionality().map_err(dim_err(n))
    };
    let dilated: Array3<f64> = find(arrays, "encoder.dilated_kernels")?
        .clone()
        .into_dimensionality()
        .map_err(dim_err("encoder.dilated_kernels"))?;
    let stride = meta_usize(arrays, "meta.stride")?;
    let model = Model {
        encoder: EncoderParameters {
            kernels: get2("encoder.kernels")?,
            dilated_kernels: dilated,
            stride,
            dilation: meta_usize(arrays, "meta.dilation")?,
        },
        decoder: DecoderParameters {
            frequencies: get1("decoder.frequencies")?,
            phases: get1("decoder.phases")?,
            modulators: get2("decoder.modulators")?,
            square_freq: find(arrays, "meta.square_freq")?.iter().next() == Some(&1.0),
            stride,
        },
        activation: Activation::Relu,
    };
    model.validate().map_err(|e| Error::Checkpoint(format!("inconsistent parameters: {e}")))?;
    Ok(model)
}

/// Writes the checkpoint through a temporary sibling file and an atomic rename.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let bytes = encode_arrays(&model_to_arrays(model));
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_arrays(&decode_arrays(&bytes)?)
}
