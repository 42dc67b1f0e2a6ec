//! Binary tensor (`.pdt`) and checkpoint (`.pdck`) files.
//!
//! `.pdt`: magic `PDT1`, u8 dtype code (1 = f32, 2 = f64, 3 = i32), u8 ndim,
//! `ndim` little-endian u32 dims, then raw little-endian data.
//!
//! `.pdck`: magic `PDCK`, u32 version, u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name, dtype code, ndim, dims and data laid out
//! as in `.pdt`.
//!
//! All writes go through a temporary file in the destination directory and a
//! rename, so a crashed writer never leaves a truncated file under the final
//! name.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const PDT_MAGIC: &[u8; 4] = b"PDT1";
pub const PDCK_MAGIC: &[u8; 4] = b"PDCK";
pub const PDCK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A typed n-dimensional array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.len() > u8::MAX as usize {
            return Err(Error::Config(format!("too many dimensions: {}", dims.len())));
        }
        if numel != data.len() {
            return Err(Error::dim("data length", numel, data.len()));
        }
        Ok(Array { dims, data })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self::from_tensor_dims(t, t.shape().dims().to_vec())
    }

    /// Stores `t` under a different (equal-size) dimension list, e.g. `[3, H, W]`.
    pub fn from_tensor_dims<T: Scalar>(t: &Tensor<T>, dims: Vec<usize>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), t.numel());
        let data = match T::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Array { dims, data }
    }

    pub fn from_i32(dims: Vec<usize>, values: Vec<i32>) -> Result<Self> {
        Self::new(dims, ArrayData::I32(values))
    }

    /// Interprets the array as a rank-4 tensor, padding missing leading
    /// axes with 1. Integer arrays are converted to floating point.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dims.len() > 4 {
            return Err(Error::Format {
                kind: "pdt",
                reason: format!("rank {} cannot be read as a rank-4 tensor", self.dims.len()),
            });
        }
        let mut d = [1usize; 4];
        d[4 - self.dims.len()..].copy_from_slice(&self.dims);
        let values: Vec<T> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            ArrayData::I32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
        };
        Tensor::new(Shape::new(d[0], d[1], d[2], d[3]), values)
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            ArrayData::I32(v) => Some(v),
            _ => None,
        }
    }

    fn encode_body(&self, out: &mut Vec<u8>) {
        out.push(self.data.dtype().code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            ArrayData::F32(v) => v.iter().for_each(|x| x.write_le(out)),
            ArrayData::F64(v) => v.iter().for_each(|x| x.write_le(out)),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn decode_body(r: &mut Reader<'_>) -> Result<Self> {
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| r.err(format!("unknown dtype code {code}")))?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.err("dimension product overflows".into()))?;
        let nbytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| r.err("payload size overflows".into()))?;
        let raw = r.take(nbytes)?;
        let data = match dtype {
            DType::F32 => ArrayData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => ArrayData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            DType::I32 => ArrayData::I32(
                raw.chunks_exact(4)
                    .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
        };
        Ok(Array { dims, data })
    }

    pub fn encode_pdt(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 8 * self.data.len());
        out.extend_from_slice(PDT_MAGIC);
        self.encode_body(&mut out);
        out
    }

    pub fn decode_pdt(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "pdt");
        r.magic(PDT_MAGIC)?;
        let a = Self::decode_body(&mut r)?;
        r.finish()?;
        Ok(a)
    }
}

pub fn write_pdt(path: impl AsRef<Path>, array: &Array) -> Result<()> {
    write_atomic(path.as_ref(), &array.encode_pdt())
}

pub fn read_pdt(path: impl AsRef<Path>) -> Result<Array> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Array::decode_pdt(&bytes)
}

/// Named arrays in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        self.entries.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PDCK_MAGIC);
        out.extend_from_slice(&PDCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            array.encode_body(&mut out);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "pdck");
        r.magic(PDCK_MAGIC)?;
        let version = r.u32()?;
        if version != PDCK_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("tensor name is not UTF-8".into()))?
                .to_string();
            entries.push((name, Array::decode_body(&mut r)?));
        }
        r.finish()?;
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir().map_err(|e| Error::io(path, e))?,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Reader { bytes, pos: 0, kind }
    }

    fn err(&self, reason: String) -> Error {
        Error::Format {
            kind: self.kind,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| self.err("file too short for magic".into()))?;
        if got != expected {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pdt_header_layout() {
        let a = Array::from_i32(vec![2, 3], vec![1, -2, 3, 4, 5, 6]).unwrap();
        let bytes = a.encode_pdt();
        assert_eq!(&bytes[..4], b"PDT1");
        assert_eq!(bytes[4], 3);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &(-2i32).to_le_bytes());
        assert_eq!(bytes.len(), 6 + 8 + 24);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing() {
        let a = Array::new(vec![4], ArrayData::F64(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let bytes = a.encode_pdt();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Array::decode_pdt(&bad).unwrap_err().to_string().contains("magic"));
        assert!(Array::decode_pdt(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("truncated"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Array::decode_pdt(&long).is_err());
        let mut code = bytes;
        code[4] = 9;
        assert!(Array::decode_pdt(&code).is_err());
    }

    #[test]
    fn checkpoint_rejects_version_and_truncation() {
        let mut ck = Checkpoint::default();
        ck.push("a.w", Array::new(vec![2], ArrayData::F32(vec![1.0, 2.0])).unwrap());
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..4], b"PDCK");
        for cut in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut v = bytes.clone();
        v[4] = 7;
        assert!(Checkpoint::decode(&v).is_err());
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }

    #[test]
    fn tensor_view_pads_leading_axes() {
        let a = Array::from_i32(vec![2, 3], (0..6).collect()).unwrap();
        let t: Tensor<f32> = a.to_tensor().unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 3));
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
    }

    fn arb_array() -> impl Strategy<Value = Array> {
        prop::collection::vec(1usize..5, 0..5).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n).prop_map(ArrayData::F32),
                prop::collection::vec(any::<f64>(), n).prop_map(ArrayData::F64),
                prop::collection::vec(any::<i32>(), n).prop_map(ArrayData::I32),
            ]
            .prop_map(move |data| Array {
                dims: dims.clone(),
                data,
            })
        })
    }

    fn bits(a: &Array) -> Vec<u64> {
        match &a.data {
            ArrayData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
            ArrayData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
            ArrayData::I32(v) => v.iter().map(|&x| x as u32 as u64).collect(),
        }
    }

    proptest! {
        #[test]
        fn pdt_round_trip_is_bit_exact(a in arb_array()) {
            let back = Array::decode_pdt(&a.encode_pdt()).unwrap();
            prop_assert_eq!(&back.dims, &a.dims);
            prop_assert_eq!(back.data.dtype(), a.data.dtype());
            prop_assert_eq!(bits(&back), bits(&a));
        }

        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            arrays in prop::collection::vec(arb_array(), 0..4),
        ) {
            let mut ck = Checkpoint::default();
            for (i, a) in arrays.iter().enumerate() {
                ck.push(format!("layer{i}.weight"), a.clone());
            }
            let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
            prop_assert_eq!(back.entries.len(), ck.entries.len());
            for ((n1, a1), (n2, a2)) in back.entries.iter().zip(&ck.entries) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(&a1.dims, &a2.dims);
                prop_assert_eq!(bits(a1), bits(a2));
            }
        }
    }
}
