//! `ALRT` raster tensor files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "ALRT"
//! version u8       1
//! dtype   u8       0 = u8, 1 = f64
//! ndim    u8       2 or 3
//! dims    u32 * ndim
//! payload row-major samples
//! ```
//!
//! A [`LabelMask`] is a 2-D u8 tensor whose payload holds the label plane
//! followed by a provenance plane of the same size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{LabelMask, ProbabilityMap, Provenance};

pub const MAGIC: &[u8; 4] = b"ALRT";
pub const VERSION: u8 = 1;

/// Upper bound on the element count of a single tensor (2^32 samples).
const MAX_ELEMENTS: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    U8 = 0,
    F64 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

/// A decoded tensor. `payload_planes` is 2 for label masks, 1 otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            dims,
            data: TensorData::F64(data),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::U8(_) => Dtype::U8,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

fn write_header(w: &mut impl Write, dtype: Dtype, dims: &[usize]) -> Result<()> {
    if dims.len() != 2 && dims.len() != 3 {
        return Err(Error::BadNdim(dims.len() as u8));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, dtype as u8, dims.len() as u8])?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow(vec![u32::MAX]))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

/// Reads the header and returns `(dtype, dims, element count)`.
fn read_header(r: &mut impl Read, planes: u64) -> Result<(Dtype, Vec<usize>, usize)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut head = [0u8; 3];
    read_exact(r, &mut head, "header")?;
    let [version, dtype, ndim] = head;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let dtype = match dtype {
        0 => Dtype::U8,
        1 => Dtype::F64,
        other => return Err(Error::UnknownDtype(other)),
    };
    if ndim != 2 && ndim != 3 {
        return Err(Error::BadNdim(ndim));
    }
    let mut raw = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, "dims")?;
        raw.push(u32::from_le_bytes(b));
    }
    let count = raw
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(u64::from(d)))
        .and_then(|n| n.checked_mul(planes))
        .filter(|&n| n <= MAX_ELEMENTS && n <= usize::MAX as u64)
        .ok_or_else(|| Error::DimOverflow(raw.clone()))?;
    Ok((
        dtype,
        raw.iter().map(|&d| d as usize).collect(),
        count as usize,
    ))
}

fn read_payload(r: &mut impl Read, dtype: Dtype, count: usize) -> Result<TensorData> {
    match dtype {
        Dtype::U8 => {
            let mut buf = Vec::new();
            let got = r.take(count as u64).read_to_end(&mut buf)?;
            if got != count {
                return Err(Error::Truncated(format!("payload: {got} of {count} bytes")));
            }
            Ok(TensorData::U8(buf))
        }
        Dtype::F64 => {
            let mut buf = Vec::new();
            let want = count * 8;
            let got = r.take(want as u64).read_to_end(&mut buf)?;
            if got != want {
                return Err(Error::Truncated(format!("payload: {got} of {want} bytes")));
            }
            Ok(TensorData::F64(
                buf.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ))
        }
    }
}

/// Writes a plain tensor (one payload plane).
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    if t.element_count()
        != match &t.data {
            TensorData::U8(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    {
        return Err(Error::InvalidTensor("payload does not match dims".into()));
    }
    write_header(w, t.dtype(), &t.dims)?;
    match &t.data {
        TensorData::U8(v) => w.write_all(v)?,
        TensorData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let (dtype, dims, count) = read_header(r, 1)?;
    let data = read_payload(r, dtype, count)?;
    Ok(Tensor { dims, data })
}

pub fn write_probability_map(w: &mut impl Write, pm: &ProbabilityMap) -> Result<()> {
    write_header(w, Dtype::F64, &[pm.height(), pm.width(), pm.num_classes()])?;
    let mut buf = Vec::with_capacity(pm.data().len() * 8);
    for x in pm.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_probability_map(r: &mut impl Read) -> Result<ProbabilityMap> {
    let t = read_tensor(r)?;
    match (t.dims.as_slice(), t.data) {
        (&[h, w, c], TensorData::F64(data)) => ProbabilityMap::new(h, w, c, data),
        _ => Err(Error::InvalidTensor(
            "probability maps are 3-D f64 tensors".into(),
        )),
    }
}

pub fn write_label_mask(w: &mut impl Write, lm: &LabelMask) -> Result<()> {
    write_header(w, Dtype::U8, &[lm.height(), lm.width()])?;
    w.write_all(lm.labels())?;
    let prov: Vec<u8> = lm.provenance().iter().map(|&p| p as u8).collect();
    w.write_all(&prov)?;
    Ok(())
}

pub fn read_label_mask(r: &mut impl Read) -> Result<LabelMask> {
    let (dtype, dims, count) = read_header(r, 2)?;
    let (h, w) = match (dtype, dims.as_slice()) {
        (Dtype::U8, &[h, w]) => (h, w),
        _ => {
            return Err(Error::InvalidTensor(
                "label masks are 2-D u8 tensors".into(),
            ))
        }
    };
    let TensorData::U8(mut data) = read_payload(r, Dtype::U8, count)? else {
        unreachable!()
    };
    let prov = data
        .split_off(h * w)
        .into_iter()
        .map(|code| {
            Provenance::from_code(code)
                .ok_or_else(|| Error::InvalidTensor(format!("provenance code {code}")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMask::from_parts(h, w, data, prov)
}

pub fn save_probability_map(path: impl AsRef<Path>, pm: &ProbabilityMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_probability_map(&mut w, pm)?;
    w.flush()?;
    Ok(())
}

pub fn load_probability_map(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    read_probability_map(&mut BufReader::new(File::open(path)?))
}

pub fn save_label_mask(path: impl AsRef<Path>, lm: &LabelMask) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_label_mask(&mut w, lm)?;
    w.flush()?;
    Ok(())
}

pub fn load_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    read_label_mask(&mut BufReader::new(File::open(path)?))
}
