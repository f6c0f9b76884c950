//! Binary dataset containers (`RSTK`), training checkpoints (`TBLT`) and PNG
//! rendering of frames and error maps.
//!
//! Both binary formats are little-endian and end in a CRC32 of every
//! preceding byte. A tensor entry is encoded as
//! `name_len: u16, name: utf-8, rank: u8, extents: u32 × rank, payload: f32 × numel`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::datasim::{Dataset, Sample};
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: [u8; 4] = *b"RSTK";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TBLT";
pub const FORMAT_VERSION: u16 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: [u8; 4]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&magic);
        w.u16(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn entry(&mut self, name: &str, t: &Tensor<f32>) -> Result<()> {
        let name_len = u16::try_from(name.len())
            .map_err(|_| FormatError::InvalidEntry(format!("entry name of {} bytes is too long", name.len())))?;
        let rank = u8::try_from(t.rank()).map_err(|_| FormatError::InvalidEntry(format!("rank {} too large", t.rank())))?;
        self.u16(name_len);
        self.buf.extend_from_slice(name.as_bytes());
        self.u8(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| FormatError::ExtentOverflow { extents: vec![u32::MAX] })?;
            self.u32(e);
        }
        self.buf.reserve(t.numel() * 4);
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - available });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    /// Checks magic and version; the trailing checksum is not part of the body.
    fn open(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self, FormatError> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated { offset: bytes.len(), needed: 4 - bytes.len() });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        if bytes.len() < 10 {
            return Err(FormatError::Truncated { offset: bytes.len(), needed: 10 - bytes.len() });
        }
        let mut r = Reader { buf: &bytes[..bytes.len() - 4], pos: 4 };
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        Ok(r)
    }

    fn entry(&mut self) -> Result<(String, Tensor<f32>), FormatError> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| FormatError::InvalidEntry("entry name is not valid UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(self.u32()?);
        }
        if extents.contains(&0) {
            return Err(FormatError::InvalidEntry(format!("entry {name:?} has a zero extent {extents:?}")));
        }
        let bytes = extents
            .iter()
            .try_fold(4usize, |acc, &e| acc.checked_mul(e as usize))
            .ok_or_else(|| FormatError::ExtentOverflow { extents: extents.clone() })?;
        let payload = self.take(bytes)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let shape: Vec<usize> = extents.iter().map(|&e| e as usize).collect();
        Ok((name, Tensor::from_parts(shape, data)))
    }

    /// Verifies that the body was consumed exactly and that the checksum matches.
    fn close(self, whole: &[u8]) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::TrailingBytes(self.buf.len() - self.pos));
        }
        let stored = u32::from_le_bytes(whole[whole.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(self.buf);
        if stored != computed {
            return Err(FormatError::CrcMismatch { stored, computed });
        }
        Ok(())
    }
}

const SAMPLE_FIELDS: [&str; 4] = ["msi_clouded", "sar", "mask", "target"];

/// Serializes samples in order; the training split is implied by the sample count.
pub fn encode_container(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::new(CONTAINER_MAGIC);
    w.u32(u32::try_from(dataset.len()).map_err(|_| Error::Data("too many samples".into()))?);
    for s in &dataset.samples {
        let mut entries = vec![("msi_clouded", &s.msi_clouded)];
        if let Some(sar) = &s.sar {
            entries.push(("sar", sar));
        }
        entries.push(("mask", &s.mask));
        entries.push(("target", &s.target));
        w.u16(entries.len() as u16);
        for (name, t) in entries {
            w.entry(name, t)?;
        }
    }
    Ok(w.finish())
}

pub fn decode_container(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, CONTAINER_MAGIC)?;
    let count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let n = r.u16()? as usize;
        let mut fields: IndexMap<String, Tensor<f32>> = IndexMap::new();
        for _ in 0..n {
            let (name, t) = r.entry()?;
            if !SAMPLE_FIELDS.contains(&name.as_str()) {
                return Err(FormatError::InvalidEntry(format!("sample {index}: unknown entry {name:?}")).into());
            }
            if fields.insert(name.clone(), t).is_some() {
                return Err(FormatError::InvalidEntry(format!("sample {index}: duplicate entry {name:?}")).into());
            }
        }
        let mut take = |name: &str| {
            fields
                .shift_remove(name)
                .ok_or_else(|| Error::from(FormatError::InvalidEntry(format!("sample {index}: missing entry {name:?}"))))
        };
        let msi_clouded = take("msi_clouded")?;
        let mask = take("mask")?;
        let target = take("target")?;
        let sar = fields.shift_remove("sar");
        samples.push(Sample { msi_clouded, sar, mask, target });
    }
    r.close(bytes)?;
    Ok(Dataset::new(samples))
}

pub fn write_container(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode_container(dataset)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

/// Hex SHA-256 of the container encoding, used as a content digest.
pub fn digest_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dataset_digest(dataset: &Dataset) -> Result<String> {
    Ok(digest_bytes(&encode_container(dataset)?))
}

/// A JSON metadata blob plus named float tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    let json = serde_json::to_vec(&ckpt.meta)?;
    w.u32(u32::try_from(json.len()).map_err(|_| Error::Data("checkpoint metadata too large".into()))?);
    w.buf.extend_from_slice(&json);
    w.u32(ckpt.tensors.len() as u32);
    for (name, t) in &ckpt.tensors {
        w.entry(name, t)?;
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let json_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| FormatError::InvalidEntry(format!("checkpoint metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let (name, t) = r.entry()?;
        if tensors.contains_key(&name) {
            return Err(FormatError::InvalidEntry(format!("duplicate entry {name:?}")).into());
        }
        tensors.insert(name, t);
    }
    r.close(bytes)?;
    Ok(Checkpoint { meta, tensors })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Natural-colour composite: B4, B3, B2.
pub const NATURAL_COLOR: (usize, usize, usize) = (3, 2, 1);

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB bytes of a `[C, H, W]` frame using `bands` as (red, green, blue).
pub fn render_rgb(frame: &Tensor<f32>, bands: (usize, usize, usize)) -> Result<Vec<u8>> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::shape(format!("expected a [C, H, W] frame, got {s:?}")));
    }
    let (c, plane) = (s[0], s[1] * s[2]);
    for b in [bands.0, bands.1, bands.2] {
        if b >= c {
            return Err(Error::config(format!("band index {b} out of range for {c} channels")));
        }
    }
    let d = frame.data();
    let mut out = Vec::with_capacity(plane * 3);
    for px in 0..plane {
        out.extend([bands.0, bands.1, bands.2].map(|b| to_byte(d[b * plane + px])));
    }
    Ok(out)
}

/// Diverging ramp over a signed `[H, W]` map: white at 0, blue towards
/// `-limit`, red towards `+limit`.
pub fn render_diverging(error: &Tensor<f32>, limit: f32) -> Result<Vec<u8>> {
    if error.rank() != 2 {
        return Err(Error::shape(format!("expected an [H, W] map, got {:?}", error.shape())));
    }
    if !(limit > 0.0) {
        return Err(Error::config(format!("error-map limit must be positive, got {limit}")));
    }
    let mut out = Vec::with_capacity(error.numel() * 3);
    for &e in error.data() {
        let a = (e / limit).clamp(-1.0, 1.0);
        let fade = to_byte(1.0 - a.abs());
        out.extend(if a >= 0.0 { [255, fade, fade] } else { [fade, fade, 255] });
    }
    Ok(out)
}

/// Channel-mean signed error `pred − target` of two `[C, H, W]` frames.
pub fn error_map(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = pred.shape();
    if s.len() != 3 || s != target.shape() {
        return Err(Error::shape(format!("error map needs matching [C, H, W] frames, got {s:?} and {:?}", target.shape())));
    }
    let plane = s[1] * s[2];
    Ok(Tensor::from_fn([s[1], s[2]], |px| {
        (0..s[0]).map(|c| pred.data()[c * plane + px] - target.data()[c * plane + px]).sum::<f32>() / s[0] as f32
    }))
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_err)?;
    w.write_image_data(rgb).map_err(to_err)?;
    w.finish().map_err(to_err)
}

/// Writes a `[C, H, W]` frame as an 8-bit RGB PNG, values clamped to `[0, 1]`.
pub fn write_png(frame: &Tensor<f32>, bands: (usize, usize, usize), path: &Path) -> Result<()> {
    let rgb = render_rgb(frame, bands)?;
    write_rgb_png(path, frame.shape()[2], frame.shape()[1], &rgb)
}

/// Writes a signed `[H, W]` map with the diverging ramp.
pub fn write_error_png(error: &Tensor<f32>, limit: f32, path: &Path) -> Result<()> {
    let rgb = render_diverging(error, limit)?;
    write_rgb_png(path, error.shape()[1], error.shape()[0], &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::make_dataset;

    fn small_checkpoint() -> Checkpoint {
        let mut tensors = IndexMap::new();
        tensors.insert("a.weight".to_string(), Tensor::from_fn([3, 4], |i| i as f32 * 0.25 - 1.0));
        tensors.insert("a.bias".to_string(), Tensor::from_fn([3], |i| -(i as f32)));
        Checkpoint { meta: serde_json::json!({"epoch": 3, "name": "x"}), tensors }
    }

    #[test]
    fn container_round_trip() {
        let d = make_dataset(3, 5, 10, 10, 6, 0.3).unwrap();
        let bytes = encode_container(&d).unwrap();
        let back = decode_container(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_container(&back).unwrap(), bytes);
        let no_sar = d.without_sar();
        assert_eq!(decode_container(&encode_container(&no_sar).unwrap()).unwrap(), no_sar);
    }

    #[test]
    fn empty_container_round_trips() {
        let d = Dataset::new(Vec::new());
        assert!(decode_container(&encode_container(&d).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn checkpoint_round_trip_and_crc() {
        let c = small_checkpoint();
        let mut bytes = encode_checkpoint(&c).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), c);
        let last_payload = bytes.len() - 5;
        bytes[last_payload] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(FormatError::CrcMismatch { .. }))));
    }

    #[test]
    fn distinct_format_errors() {
        let bytes = encode_checkpoint(&small_checkpoint()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 9]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        assert!(matches!(decode_container(&bytes), Err(Error::Format(FormatError::BadMagic { .. }))));

        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u32(2);
        w.buf.extend_from_slice(b"{}");
        w.u32(1);
        w.u16(1);
        w.buf.push(b'x');
        w.u8(3);
        for _ in 0..3 {
            w.u32(u32::MAX);
        }
        let huge = w.finish();
        assert!(matches!(decode_checkpoint(&huge), Err(Error::Format(FormatError::ExtentOverflow { .. }))));
    }

    #[test]
    fn zero_frame_renders_black_and_bands_checked() {
        let f = Tensor::<f32>::zeros([11, 2, 3]);
        assert!(render_rgb(&f, NATURAL_COLOR).unwrap().iter().all(|&b| b == 0));
        assert!(matches!(render_rgb(&f, (11, 0, 0)), Err(Error::Config(_))));
        let g = Tensor::<f32>::from_fn([11, 1, 1], |c| c as f32 / 10.0);
        assert_eq!(render_rgb(&g, NATURAL_COLOR).unwrap(), vec![77, 51, 26]);
    }

    #[test]
    fn identical_frames_give_white_error_map() {
        let f = Tensor::<f32>::from_fn([11, 4, 4], |i| (i % 5) as f32 / 5.0);
        let e = error_map(&f, &f).unwrap();
        assert!(render_diverging(&e, 0.2).unwrap().iter().all(|&b| b == 255));
        let signed = Tensor::new([1, 2], vec![0.2f32, -0.2]).unwrap();
        assert_eq!(render_diverging(&signed, 0.2).unwrap(), vec![255, 0, 0, 0, 0, 255]);
    }
}
