//! Binary tensor records, checkpoint containers and binary PGM images.
//!
//! Tensor record (`GCT1`), little-endian:
//! `b"GCT1"`, dtype `u8` (0 = f32), ndim `u8`, ndim x `u32` dims, f32 payload.
//!
//! Checkpoint (`GCKP`): `b"GCKP"`, `u32` entry count, then per entry a `u16`
//! name length, the UTF-8 name and one tensor record.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ScoreNetwork;
use crate::real::Real;

pub const TENSOR_MAGIC: &[u8; 4] = b"GCT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCKP";
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if n != Some(data.len()) {
            return Err(Error::param(format!("dims {dims:?} do not match {} values", data.len())));
        }
        if dims.len() > u8::MAX as usize || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::param("tensor rank or dimension exceeds the record format"));
        }
        Ok(Self { dims, data })
    }

    pub fn from_reals<S: Real>(dims: Vec<usize>, data: &[S]) -> Result<Self> {
        Self::new(dims, data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
    }

    pub fn to_reals<S: Real>(&self) -> Vec<S> {
        self.data.iter().map(|&v| S::from(v).expect("f32 converts")).collect()
    }

    /// Splits along the leading axis.
    pub fn rows(&self) -> Result<Vec<Vec<f32>>> {
        let first = *self.dims.first().ok_or_else(|| Error::param("scalar tensor has no rows"))?;
        if first == 0 {
            return Ok(Vec::new());
        }
        Ok(self.data.chunks_exact(self.data.len() / first).map(<[f32]>::to_vec).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one record from the start of `bytes`; `base` offsets error
    /// positions. Returns the tensor and the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8], base: usize) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0, base };
        if r.take(4)? != TENSOR_MAGIC {
            return Err(Error::format(base, "bad tensor magic"));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(base + 4, format!("unsupported dtype code {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let at = r.offset();
            let d = r.u32()? as usize;
            count = count
                .checked_mul(d)
                .filter(|c| c.checked_mul(4).is_some())
                .ok_or_else(|| Error::format(at, "dimension product overflows"))?;
            dims.push(d);
        }
        let payload_at = r.offset();
        if r.remaining() < count * 4 {
            return Err(Error::format(
                payload_at,
                format!("payload truncated: need {} bytes, have {}", count * 4, r.remaining()),
            ));
        }
        let data = r
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((Self { dims, data }, r.pos))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode_prefix(bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::format(used, "trailing bytes after tensor payload"));
        }
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(self.offset(), format!("truncated: need {n} bytes, have {}", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::param(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &t.encode())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::decode(&read(path)?)
}

pub fn encode_checkpoint<S: Real>(net: &ScoreNetwork<S>) -> Result<Vec<u8>> {
    let tensors = net.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::param(format!("tensor name `{name}` too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&Tensor::from_reals(dims, &data)?.encode());
    }
    Ok(out)
}

pub fn decode_checkpoint<S: Real>(bytes: &[u8]) -> Result<ScoreNetwork<S>> {
    let mut r = Reader { bytes, pos: 0, base: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
        let (t, used) = Tensor::decode_prefix(&bytes[r.pos..], r.offset())?;
        r.pos += used;
        tensors.push((name.to_string(), t.dims.clone(), t.to_reals::<S>()));
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after checkpoint entries"));
    }
    ScoreNetwork::from_tensors(&tensors)
}

pub fn write_checkpoint<S: Real>(path: &Path, net: &ScoreNetwork<S>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net)?)
}

pub fn read_checkpoint<S: Real>(path: &Path) -> Result<ScoreNetwork<S>> {
    decode_checkpoint(&read(path)?)
}

/// Single-channel image with values in [-1, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

pub fn encode_pgm(img: &GrayImage) -> Result<Vec<u8>> {
    if img.data.len() != img.width * img.height {
        return Err(Error::Shape {
            expected: img.width * img.height,
            got: img.data.len(),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| {
        let q = ((v + 1.0) * 127.5).round();
        if q.is_nan() {
            0
        } else {
            q.clamp(0.0, 255.0) as u8
        }
    }));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(Error::format(0, "bad PGM magic, expected P5"));
    }
    let num = |i: usize| -> Result<usize> {
        fields[i]
            .1
            .parse()
            .map_err(|_| Error::format(fields[i].0, format!("bad PGM header field `{}`", fields[i].1)))
    };
    let (width, height, maxval) = (num(1)?, num(2)?, num(3)?);
    if maxval != 255 {
        return Err(Error::format(fields[3].0, format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(fields[1].0, "image size overflows"))?;
    if bytes.len() < pos + n {
        return Err(Error::format(bytes.len().min(pos), format!("raster truncated: need {n} bytes")));
    }
    Ok(GrayImage {
        width,
        height,
        data: bytes[pos..pos + n].iter().map(|&b| b as f64 / 127.5 - 1.0).collect(),
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &encode_pgm(img)?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetMode;
    use proptest::prelude::*;

    #[test]
    fn header_layout_for_2x3() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f32).collect()).unwrap();
        let b = t.encode();
        assert_eq!(&b[..14], &[0x47, 0x43, 0x54, 0x31, 0, 2, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 14 + 24);
        assert_eq!(&b[14 + 4..14 + 8], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_records_report_offsets() {
        let good = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap().encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Tensor::decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(Tensor::decode(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(Tensor::decode(&good[..20]), Err(Error::Format { offset: 14, .. })));
        assert!(matches!(Tensor::decode(&good[..9]), Err(Error::Format { offset: 6, .. })));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(Tensor::decode(&long), Err(Error::Format { offset: 38, .. })));
        let mut huge = vec![];
        huge.extend_from_slice(TENSOR_MAGIC);
        huge.extend_from_slice(&[0, 3]);
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(Tensor::decode(&huge), Err(Error::Format { offset: 10 | 14, .. })));
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let net = ScoreNetwork::<f32>::init(NetMode::Point2d, 4);
        let bytes = encode_checkpoint(&net).unwrap();
        let back: ScoreNetwork<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.mode(), NetMode::Point2d);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint::<f32>(cut), Err(Error::Format { .. })));
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let img = GrayImage {
            width: 5,
            height: 3,
            data: (0..15).map(|i| -1.0 + i as f64 / 7.0).collect(),
        };
        let back = decode_pgm(&encode_pgm(&img).unwrap()).unwrap();
        assert_eq!((back.width, back.height), (5, 3));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 2.0 / 255.0);
        }
        let clamped = decode_pgm(&encode_pgm(&GrayImage { width: 2, height: 1, data: vec![-3.0, 3.0] }).unwrap()).unwrap();
        assert_eq!(clamped.data, vec![-1.0, 1.0]);
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n\0"), Err(Error::Format { offset: 0, .. })));
        assert!(decode_pgm(b"P5\n4 4\n255\n\0\0").is_err());
        let commented = decode_pgm(b"P5\n# note\n1 1\n255\n\xff").unwrap();
        assert_eq!(commented.data, vec![1.0]);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("t.gct");
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        write_tensor(&p, &t).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn tensor_round_trip_is_byte_identical(
            dims in prop::collection::vec(0usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let b = t.encode();
            let back = Tensor::decode(&b).unwrap();
            prop_assert_eq!(back.encode(), b);
            prop_assert_eq!(back.dims, t.dims);
        }
    }
}
