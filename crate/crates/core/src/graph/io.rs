//! Binary model file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "HQPM" | version u16 = 1 | flags u16 (bit 0: quantized)
//! [input QuantParams record, when quantized]
//! layer count u32
//! per layer: kind u8, dims header, raw tensor payloads
//! trailer: name (u32 len + utf8), input shape (3 x u32),
//!          num_classes u32, baseline accuracy (u8 flag + f32)
//! ```
//!
//! Float tensors are stored as `rank u32, dims u32.., f32 elems`. Quantized
//! weights store one byte per element (`unsigned code - 128` as i8) followed
//! by a QuantParams record `{f32 scale, i32 zero_point, u8 bits, f32 min,
//! f32 max}`. Quantized biases are i32 arrays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{QuantLayer, QuantParams, QuantTensor, QuantizedModel};
use crate::tensor::Tensor;

use super::{LayerSpec, ModelGraph};

const MAGIC: &[u8; 4] = b"HQPM";
const VERSION: u16 = 1;
const FLAG_QUANTIZED: u16 = 1;

const KIND_CONV: u8 = 0;
const KIND_DENSE: u8 = 1;
const KIND_BATCHNORM: u8 = 2;
const KIND_RELU: u8 = 3;
const KIND_POOL: u8 = 4;
const KIND_RESIDUAL_BEGIN: u8 = 5;
const KIND_RESIDUAL_END: u8 = 6;
const KIND_CLASSIFIER: u8 = 7;

/// Either kind of model, as stored on disk.
pub enum LoadedModel {
    Float(ModelGraph),
    Quantized(QuantizedModel),
}

// ---- writing -------------------------------------------------------------

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32(w: &mut impl Write, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.elems() {
        write_f32(w, v)?;
    }
    Ok(())
}

fn write_params(w: &mut impl Write, p: &QuantParams) -> Result<()> {
    write_f32(w, p.scale)?;
    w.write_all(&p.zero_point.to_le_bytes())?;
    w.write_all(&[p.bits])?;
    write_f32(w, p.min)?;
    write_f32(w, p.max)?;
    Ok(())
}

fn write_qtensor(w: &mut impl Write, t: &QuantTensor) -> Result<()> {
    write_u32(w, t.shape.len() as u32)?;
    for &d in &t.shape {
        write_u32(w, d as u32)?;
    }
    let bytes: Vec<u8> = t
        .codes
        .iter()
        .map(|&c| (c as i16 - 128) as i8 as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn write_i32_array(w: &mut impl Write, values: &[i32]) -> Result<()> {
    write_u32(w, values.len() as u32)?;
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_trailer(
    w: &mut impl Write,
    name: &str,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    baseline: Option<f32>,
) -> Result<()> {
    write_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    write_u32(w, input_shape.0 as u32)?;
    write_u32(w, input_shape.1 as u32)?;
    write_u32(w, input_shape.2 as u32)?;
    write_u32(w, num_classes as u32)?;
    match baseline {
        Some(a) => {
            w.write_all(&[1])?;
            write_f32(w, a)?;
        }
        None => w.write_all(&[0, 0, 0, 0, 0])?,
    }
    Ok(())
}

pub fn write_model(w: &mut impl Write, model: &ModelGraph) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    write_u32(w, model.layers.len() as u32)?;
    for layer in &model.layers {
        match layer {
            LayerSpec::Conv { kernel, bias, stride, padding } => {
                w.write_all(&[KIND_CONV])?;
                write_u32(w, *stride as u32)?;
                write_u32(w, *padding as u32)?;
                write_tensor(w, kernel)?;
                write_tensor(w, bias)?;
            }
            LayerSpec::Dense { weight, bias } => {
                w.write_all(&[KIND_DENSE])?;
                write_tensor(w, weight)?;
                write_tensor(w, bias)?;
            }
            LayerSpec::BatchNorm { gamma, beta, mean, var, eps } => {
                w.write_all(&[KIND_BATCHNORM])?;
                write_f32(w, *eps)?;
                write_tensor(w, gamma)?;
                write_tensor(w, beta)?;
                write_tensor(w, mean)?;
                write_tensor(w, var)?;
            }
            LayerSpec::Relu => w.write_all(&[KIND_RELU])?,
            LayerSpec::GlobalAvgPool => w.write_all(&[KIND_POOL])?,
            LayerSpec::ResidualBegin => w.write_all(&[KIND_RESIDUAL_BEGIN])?,
            LayerSpec::ResidualEnd => w.write_all(&[KIND_RESIDUAL_END])?,
            LayerSpec::Classifier { weight, bias } => {
                w.write_all(&[KIND_CLASSIFIER])?;
                write_tensor(w, weight)?;
                write_tensor(w, bias)?;
            }
        }
    }
    write_trailer(
        w,
        &model.name,
        model.input_shape,
        model.num_classes,
        model.baseline_accuracy,
    )
}

pub fn write_quantized(w: &mut impl Write, model: &QuantizedModel) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&FLAG_QUANTIZED.to_le_bytes())?;
    write_params(w, &model.input_params)?;
    write_u32(w, model.layers.len() as u32)?;
    for layer in &model.layers {
        match layer {
            QuantLayer::Conv { kernel, kernel_params, bias, stride, padding, out_params } => {
                w.write_all(&[KIND_CONV])?;
                write_u32(w, *stride as u32)?;
                write_u32(w, *padding as u32)?;
                write_qtensor(w, kernel)?;
                write_params(w, kernel_params)?;
                write_i32_array(w, bias)?;
                write_params(w, out_params)?;
            }
            QuantLayer::Relu { out_params } => {
                w.write_all(&[KIND_RELU])?;
                write_params(w, out_params)?;
            }
            QuantLayer::GlobalAvgPool { out_params } => {
                w.write_all(&[KIND_POOL])?;
                write_params(w, out_params)?;
            }
            QuantLayer::ResidualBegin => w.write_all(&[KIND_RESIDUAL_BEGIN])?,
            QuantLayer::ResidualEnd { out_params } => {
                w.write_all(&[KIND_RESIDUAL_END])?;
                write_params(w, out_params)?;
            }
            QuantLayer::Classifier { weight, weight_params, bias } => {
                w.write_all(&[KIND_CLASSIFIER])?;
                write_qtensor(w, weight)?;
                write_params(w, weight_params)?;
                write_i32_array(w, bias)?;
            }
        }
    }
    write_trailer(w, &model.name, model.input_shape, model.num_classes, None)
}

// ---- reading -------------------------------------------------------------

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile
        } else {
            Error::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_i32(r: &mut impl Read) -> Result<i32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(i32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_dims(r: &mut impl Read) -> Result<Vec<usize>> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::FormatError(format!("tensor rank {rank} out of range")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u32(r)? as usize;
        numel = numel.saturating_mul(d as u64);
        dims.push(d);
    }
    if numel > (1 << 28) {
        return Err(Error::FormatError(format!("tensor too large: {numel} elements")));
    }
    Ok(dims)
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let dims = read_dims(r)?;
    let n: usize = dims.iter().product();
    let mut elems = Vec::with_capacity(n);
    for _ in 0..n {
        elems.push(read_f32(r)?);
    }
    Tensor::new(dims, elems).map_err(|e| Error::FormatError(e.to_string()))
}

fn read_params(r: &mut impl Read) -> Result<QuantParams> {
    Ok(QuantParams {
        scale: read_f32(r)?,
        zero_point: read_i32(r)?,
        bits: read_u8(r)?,
        min: read_f32(r)?,
        max: read_f32(r)?,
    })
}

fn read_qtensor(r: &mut impl Read) -> Result<QuantTensor> {
    let dims = read_dims(r)?;
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n];
    read_exact(r, &mut bytes)?;
    let codes = bytes.iter().map(|&b| (b as i8 as i16 + 128) as u8).collect();
    Ok(QuantTensor { shape: dims, codes })
}

fn read_i32_array(r: &mut impl Read) -> Result<Vec<i32>> {
    let n = read_u32(r)? as usize;
    if n > (1 << 24) {
        return Err(Error::FormatError(format!("array too large: {n} elements")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_i32(r)?);
    }
    Ok(out)
}

struct Trailer {
    name: String,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    baseline: Option<f32>,
}

fn read_trailer(r: &mut impl Read) -> Result<Trailer> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(Error::FormatError("model name too long".into()));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(r, &mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::FormatError("model name is not utf-8".into()))?;
    let c = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let num_classes = read_u32(r)? as usize;
    let has_baseline = read_u8(r)?;
    let baseline_bits = read_f32(r)?;
    Ok(Trailer {
        name,
        input_shape: (c, h, w),
        num_classes,
        baseline: (has_baseline == 1).then_some(baseline_bits),
    })
}

fn read_header(r: &mut impl Read) -> Result<u16> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = read_u16(r)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    read_u16(r)
}

pub fn read_any(r: &mut impl Read) -> Result<LoadedModel> {
    let flags = read_header(r)?;
    if flags & FLAG_QUANTIZED != 0 {
        read_quantized_body(r).map(LoadedModel::Quantized)
    } else {
        read_float_body(r).map(LoadedModel::Float)
    }
}

fn read_float_body(r: &mut impl Read) -> Result<ModelGraph> {
    let count = read_u32(r)? as usize;
    if count > 4096 {
        return Err(Error::FormatError(format!("layer count {count} out of range")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = read_u8(r)?;
        layers.push(match kind {
            KIND_CONV => {
                let stride = read_u32(r)? as usize;
                let padding = read_u32(r)? as usize;
                let kernel = read_tensor(r)?;
                let bias = read_tensor(r)?;
                LayerSpec::Conv { kernel, bias, stride, padding }
            }
            KIND_DENSE => LayerSpec::Dense {
                weight: read_tensor(r)?,
                bias: read_tensor(r)?,
            },
            KIND_BATCHNORM => {
                let eps = read_f32(r)?;
                LayerSpec::BatchNorm {
                    gamma: read_tensor(r)?,
                    beta: read_tensor(r)?,
                    mean: read_tensor(r)?,
                    var: read_tensor(r)?,
                    eps,
                }
            }
            KIND_RELU => LayerSpec::Relu,
            KIND_POOL => LayerSpec::GlobalAvgPool,
            KIND_RESIDUAL_BEGIN => LayerSpec::ResidualBegin,
            KIND_RESIDUAL_END => LayerSpec::ResidualEnd,
            KIND_CLASSIFIER => LayerSpec::Classifier {
                weight: read_tensor(r)?,
                bias: read_tensor(r)?,
            },
            other => return Err(Error::FormatError(format!("unknown layer kind {other}"))),
        });
    }
    let trailer = read_trailer(r)?;
    let mut model = ModelGraph::new(trailer.name, layers, trailer.input_shape, trailer.num_classes)
        .map_err(|e| Error::FormatError(e.to_string()))?;
    model.baseline_accuracy = trailer.baseline;
    Ok(model)
}

fn read_quantized_body(r: &mut impl Read) -> Result<QuantizedModel> {
    let input_params = read_params(r)?;
    let count = read_u32(r)? as usize;
    if count > 4096 {
        return Err(Error::FormatError(format!("layer count {count} out of range")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = read_u8(r)?;
        layers.push(match kind {
            KIND_CONV => {
                let stride = read_u32(r)? as usize;
                let padding = read_u32(r)? as usize;
                let kernel = read_qtensor(r)?;
                let kernel_params = read_params(r)?;
                let bias = read_i32_array(r)?;
                let out_params = read_params(r)?;
                QuantLayer::Conv { kernel, kernel_params, bias, stride, padding, out_params }
            }
            KIND_RELU => QuantLayer::Relu { out_params: read_params(r)? },
            KIND_POOL => QuantLayer::GlobalAvgPool { out_params: read_params(r)? },
            KIND_RESIDUAL_BEGIN => QuantLayer::ResidualBegin,
            KIND_RESIDUAL_END => QuantLayer::ResidualEnd { out_params: read_params(r)? },
            KIND_CLASSIFIER => {
                let weight = read_qtensor(r)?;
                let weight_params = read_params(r)?;
                let bias = read_i32_array(r)?;
                QuantLayer::Classifier { weight, weight_params, bias }
            }
            other => {
                return Err(Error::FormatError(format!(
                    "layer kind {other} not valid in a quantized model"
                )))
            }
        });
    }
    let trailer = read_trailer(r)?;
    Ok(QuantizedModel {
        name: trailer.name,
        layers,
        input_params,
        input_shape: trailer.input_shape,
        num_classes: trailer.num_classes,
    })
}

// ---- path-level API -------------------------------------------------------

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn save_quantized(model: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_quantized(&mut w, model)?;
    w.flush()?;
    Ok(())
}

/// Loads a float model; a quantized file is an error here.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    match load_any(path)? {
        LoadedModel::Float(m) => Ok(m),
        LoadedModel::Quantized(_) => Err(Error::WrongModelKind),
    }
}

pub fn load_quantized(path: impl AsRef<Path>) -> Result<QuantizedModel> {
    match load_any(path)? {
        LoadedModel::Quantized(m) => Ok(m),
        LoadedModel::Float(_) => Err(Error::AlreadyQuantized),
    }
}

pub fn load_any(path: impl AsRef<Path>) -> Result<LoadedModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_any(&mut r)
}

/// Bytes of serialized weight-tensor payload (conv kernels plus dense and
/// classifier weight matrices). Biases, batch norm tensors, and params
/// records are excluded so float and integer storage of the same graph
/// compare at exactly 4:1.
pub fn weight_payload_bytes(model: &ModelGraph) -> u64 {
    model
        .layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv { kernel, .. } => 4 * kernel.numel() as u64,
            LayerSpec::Dense { weight, .. } | LayerSpec::Classifier { weight, .. } => {
                4 * weight.numel() as u64
            }
            _ => 0,
        })
        .sum()
}

pub fn quantized_weight_payload_bytes(model: &QuantizedModel) -> u64 {
    model
        .layers
        .iter()
        .map(|l| match l {
            QuantLayer::Conv { kernel, .. } => kernel.codes.len() as u64,
            QuantLayer::Classifier { weight, .. } => weight.codes.len() as u64,
            _ => 0,
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_mini_resnet;

    #[test]
    fn float_model_round_trips_bit_exactly() {
        let mut model = build_mini_resnet(2, 6, (1, 12, 12), 10, 5).unwrap();
        model.baseline_accuracy = Some(0.9375);
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        let LoadedModel::Float(back) = read_any(&mut buf.as_slice()).unwrap() else {
            panic!("expected a float model");
        };
        assert_eq!(model, back);
    }

    #[test]
    fn wrong_magic_is_a_distinct_error() {
        let mut buf = Vec::new();
        write_model(&mut buf, &build_mini_resnet(1, 4, (1, 8, 8), 10, 0).unwrap()).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_any(&mut buf.as_slice()), Err(Error::BadMagic)));
    }

    #[test]
    fn unsupported_version_is_a_distinct_error() {
        let mut buf = Vec::new();
        write_model(&mut buf, &build_mini_resnet(1, 4, (1, 8, 8), 10, 0).unwrap()).unwrap();
        buf[4] = 9;
        assert!(matches!(
            read_any(&mut buf.as_slice()),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncation_is_a_distinct_error() {
        let mut buf = Vec::new();
        write_model(&mut buf, &build_mini_resnet(1, 4, (1, 8, 8), 10, 0).unwrap()).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(matches!(
            read_any(&mut buf.as_slice()),
            Err(Error::TruncatedFile)
        ));
    }

    #[test]
    fn weight_payload_counts_only_weight_tensors() {
        let model = build_mini_resnet(1, 4, (1, 8, 8), 10, 0).unwrap();
        let expected: u64 = model
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { kernel, .. } => 4 * kernel.numel() as u64,
                LayerSpec::Classifier { weight, .. } => 4 * weight.numel() as u64,
                _ => 0,
            })
            .sum();
        assert_eq!(weight_payload_bytes(&model), expected);
        assert!(expected > 0);
    }
}
