//! Tensor dumps: `<stem>.bin` holds the raw little-endian values and
//! `<stem>.txt` a `key value` header (dtype, shape, scale).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ir::TensorShape;

use super::tensor::{FloatTensor, QuantParams, QuantTensor};

#[derive(Debug, Clone, PartialEq)]
pub enum DumpData {
    Int8(QuantTensor),
    Float(FloatTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpHeader {
    pub dtype: String,
    pub shape: TensorShape,
    pub scale: Option<f64>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("txt"))
}

pub fn write_dump(stem: &Path, data: &DumpData) -> Result<()> {
    let (bin, txt) = paths(stem);
    let (dtype, shape, scale, bytes): (&str, TensorShape, Option<f64>, Vec<u8>) = match data {
        DumpData::Int8(q) => ("i8", q.shape, Some(q.params.scale), q.data.iter().map(|&v| v as u8).collect()),
        DumpData::Float(f) => ("f64", f.shape, None, f.data.iter().flat_map(|v| v.to_le_bytes()).collect()),
    };
    let s = shape;
    let mut header = format!("dtype {dtype}\nshape {} {} {} {}\n", s.batch, s.channels, s.height, s.width);
    if let Some(scale) = scale {
        header.push_str(&format!("scale {scale:e}\n"));
    }
    fs::write(&bin, bytes)?;
    fs::write(&txt, header)?;
    Ok(())
}

fn parse_header(text: &str) -> Result<DumpHeader> {
    let mut dtype = None;
    let mut shape = None;
    let mut scale = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let mut it = line.split_whitespace();
        let key = it.next().unwrap_or_default();
        let vals: Vec<&str> = it.collect();
        let bad = || Error::Dump(format!("malformed header line `{line}`"));
        match key {
            "dtype" => dtype = Some(vals.first().ok_or_else(bad)?.to_string()),
            "shape" => {
                let v: Vec<usize> = vals.iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if v.len() != 4 {
                    return Err(bad());
                }
                shape = Some(TensorShape::new(v[0], v[1], v[2], v[3]));
            }
            "scale" => scale = Some(vals.first().and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad)?),
            _ => return Err(Error::Dump(format!("unknown header key `{key}`"))),
        }
    }
    Ok(DumpHeader {
        dtype: dtype.ok_or_else(|| Error::Dump("header lacks dtype".into()))?,
        shape: shape.ok_or_else(|| Error::Dump("header lacks shape".into()))?,
        scale,
    })
}

pub fn read_dump(stem: &Path) -> Result<DumpData> {
    let (bin, txt) = paths(stem);
    let header = parse_header(&fs::read_to_string(&txt)?)?;
    let bytes = fs::read(&bin)?;
    let n = header.shape.numel();
    match header.dtype.as_str() {
        "i8" => {
            if bytes.len() != n {
                return Err(Error::Dump(format!("{} bytes for {n} int8 values", bytes.len())));
            }
            let scale = header.scale.ok_or_else(|| Error::Dump("int8 dump lacks scale".into()))?;
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Dump(format!("invalid scale {scale}")));
            }
            let data = bytes.iter().map(|&b| b as i8).collect();
            Ok(DumpData::Int8(QuantTensor::new(header.shape, data, QuantParams::new(scale))?))
        }
        "f64" => {
            if bytes.len() != 8 * n {
                return Err(Error::Dump(format!("{} bytes for {n} f64 values", bytes.len())));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok(DumpData::Float(FloatTensor::new(header.shape, data)?))
        }
        other => Err(Error::Dump(format!("unsupported dtype `{other}`"))),
    }
}
