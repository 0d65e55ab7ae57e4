//! Zero-run + LEB128 count codec and the MAKS1 container.
//!
//! Payload grammar: a nonzero count `c` is `varint(c)`; a run of `r ≥ 1`
//! zero cells is `varint(0) varint(r)`.
//!
//! Container: `MAKS1`, then six fields each prefixed by a little-endian u32
//! byte length: dims (u32 LE each), rebin factors (u32 LE each), encoding
//! (one byte), monitor (u64 LE), live time (f64 LE), payload.

use std::fs;
use std::io;
use std::path::Path;

use super::{rebin, VizError};
use crate::residents::Histogram;

pub const MAKS_MAGIC: &[u8; 5] = b"MAKS1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// Counts as u64 LE, one per cell.
    Raw = 0,
    /// Zero-run + LEB128.
    ZeroRun = 1,
}

impl Encoding {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Raw),
            1 => Some(Self::ZeroRun),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedSpectrum {
    /// Dims before rebinning.
    pub dims: Vec<usize>,
    pub factors: Vec<usize>,
    pub encoding: Encoding,
    pub monitor: u64,
    pub live_time: f64,
    pub payload: Vec<u8>,
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let b = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(b);
            return;
        }
        out.push(b | 0x80);
    }
}

fn get_varint(buf: &[u8], pos: &mut usize) -> Result<u64, VizError> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let Some(&b) = buf.get(*pos) else {
            return Err(VizError::CorruptPayload(format!(
                "truncated varint at byte {}",
                *pos
            )));
        };
        *pos += 1;
        let bits = (b & 0x7f) as u64;
        if shift == 63 && bits > 1 {
            return Err(VizError::CorruptPayload("varint overflows u64".into()));
        }
        v |= bits << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(VizError::CorruptPayload(
        "varint longer than 10 bytes".into(),
    ))
}

pub fn encode_counts(counts: &[u64]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < counts.len() {
        if counts[i] == 0 {
            let run = counts[i..].iter().take_while(|&&c| c == 0).count();
            put_varint(&mut out, 0);
            put_varint(&mut out, run as u64);
            i += run;
        } else {
            put_varint(&mut out, counts[i]);
            i += 1;
        }
    }
    out
}

/// Decodes exactly `cells` counts; anything short, long or malformed is
/// corrupt.
pub fn decode_counts(payload: &[u8], cells: usize) -> Result<Vec<u64>, VizError> {
    let mut out = Vec::with_capacity(cells);
    let mut pos = 0;
    while pos < payload.len() {
        let v = get_varint(payload, &mut pos)?;
        if v != 0 {
            out.push(v);
        } else {
            let run = get_varint(payload, &mut pos)? as usize;
            if run == 0 || run > cells - out.len().min(cells) {
                return Err(VizError::CorruptPayload(format!("bad zero run {run}")));
            }
            out.resize(out.len() + run, 0);
        }
        if out.len() > cells {
            return Err(VizError::CorruptPayload(format!("more than {cells} cells")));
        }
    }
    if out.len() != cells {
        return Err(VizError::CorruptPayload(format!(
            "payload holds {} of {cells} cells",
            out.len()
        )));
    }
    Ok(out)
}

/// Rebins `h` by `factors` and encodes the result.
pub fn compress(h: &Histogram, factors: &[usize]) -> Result<CompressedSpectrum, VizError> {
    let r = rebin(h, factors)?;
    Ok(CompressedSpectrum {
        dims: h.dims.clone(),
        factors: factors.to_vec(),
        encoding: Encoding::ZeroRun,
        monitor: h.monitor,
        live_time: h.live_time,
        payload: encode_counts(&r.counts),
    })
}

/// Raw serialization of `h`, as streamed by direct readout.
pub fn direct(h: &Histogram) -> CompressedSpectrum {
    CompressedSpectrum {
        dims: h.dims.clone(),
        factors: vec![1; h.dims.len()],
        encoding: Encoding::Raw,
        monitor: h.monitor,
        live_time: h.live_time,
        payload: h.counts.iter().flat_map(|c| c.to_le_bytes()).collect(),
    }
}

pub fn decompress(c: &CompressedSpectrum) -> Result<Histogram, VizError> {
    if c.factors.len() != c.dims.len()
        || c.factors
            .iter()
            .zip(&c.dims)
            .any(|(&f, &d)| f == 0 || d % f != 0)
    {
        return Err(VizError::CorruptPayload(format!(
            "factors {:?} do not divide dims {:?}",
            c.factors, c.dims
        )));
    }
    let dims: Vec<usize> = c.dims.iter().zip(&c.factors).map(|(d, f)| d / f).collect();
    let cells: usize = dims.iter().product();
    let counts = match c.encoding {
        Encoding::ZeroRun => decode_counts(&c.payload, cells)?,
        Encoding::Raw => {
            if c.payload.len() != cells * 8 {
                return Err(VizError::CorruptPayload(format!(
                    "raw payload of {} bytes for {cells} cells",
                    c.payload.len()
                )));
            }
            c.payload
                .chunks_exact(8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .collect()
        }
    };
    Ok(Histogram {
        dims,
        counts,
        monitor: c.monitor,
        live_time: c.live_time,
    })
}

fn put_field(out: &mut Vec<u8>, field: &[u8]) {
    out.extend_from_slice(&(field.len() as u32).to_le_bytes());
    out.extend_from_slice(field);
}

fn u32s(v: &[usize]) -> Vec<u8> {
    v.iter().flat_map(|&x| (x as u32).to_le_bytes()).collect()
}

fn read_u32s(field: &[u8]) -> Result<Vec<usize>, VizError> {
    if !field.len().is_multiple_of(4) {
        return Err(VizError::CorruptPayload("misaligned u32 field".into()));
    }
    Ok(field
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect())
}

fn fixed<const N: usize>(field: &[u8], what: &str) -> Result<[u8; N], VizError> {
    field
        .try_into()
        .map_err(|_| VizError::CorruptPayload(format!("{what} field is {} bytes", field.len())))
}

impl CompressedSpectrum {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_len() + self.payload.len());
        out.extend_from_slice(MAKS_MAGIC);
        put_field(&mut out, &u32s(&self.dims));
        put_field(&mut out, &u32s(&self.factors));
        put_field(&mut out, &[self.encoding as u8]);
        put_field(&mut out, &self.monitor.to_le_bytes());
        put_field(&mut out, &self.live_time.to_le_bytes());
        put_field(&mut out, &self.payload);
        out
    }

    /// Container size excluding the payload bytes.
    pub fn header_len(&self) -> usize {
        MAKS_MAGIC.len() + 6 * 4 + 8 * self.dims.len() + 1 + 8 + 8
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, VizError> {
        let rest = buf
            .strip_prefix(MAKS_MAGIC.as_slice())
            .ok_or_else(|| VizError::CorruptPayload("missing MAKS1 magic".into()))?;
        let mut fields = Vec::with_capacity(6);
        let mut pos = 0;
        while fields.len() < 6 {
            let len_bytes: [u8; 4] = rest
                .get(pos..pos + 4)
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| VizError::CorruptPayload("truncated header".into()))?;
            let len = u32::from_le_bytes(len_bytes) as usize;
            pos += 4;
            let field = rest.get(pos..pos + len).ok_or_else(|| {
                VizError::CorruptPayload(format!("field {} truncated", fields.len() + 1))
            })?;
            fields.push(field);
            pos += len;
        }
        if pos != rest.len() {
            return Err(VizError::CorruptPayload(
                "trailing bytes after payload".into(),
            ));
        }
        let encoding = match fields[2] {
            [b] => Encoding::from_byte(*b),
            _ => None,
        }
        .ok_or_else(|| VizError::CorruptPayload("unknown encoding".into()))?;
        Ok(Self {
            dims: read_u32s(fields[0])?,
            factors: read_u32s(fields[1])?,
            encoding,
            monitor: u64::from_le_bytes(fixed(fields[3], "monitor")?),
            live_time: f64::from_le_bytes(fixed(fields[4], "live time")?),
            payload: fields[5].to_vec(),
        })
    }
}

pub fn write_maks(path: &Path, c: &CompressedSpectrum) -> io::Result<()> {
    fs::write(path, c.to_bytes())
}

pub fn read_maks(path: &Path) -> io::Result<CompressedSpectrum> {
    let buf = fs::read(path)?;
    CompressedSpectrum::from_bytes(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn varint_boundaries() {
        for v in [0u64, 1, 127, 128, 16383, 16384, u64::MAX >> 1, u64::MAX] {
            let mut buf = Vec::new();
            put_varint(&mut buf, v);
            // 7 payload bits per byte
            let expected_len = if v == 0 {
                1
            } else {
                (64 - v.leading_zeros() as usize).div_ceil(7)
            };
            assert_eq!(buf.len(), expected_len, "{v}");
            let mut pos = 0;
            assert_eq!(get_varint(&buf, &mut pos).unwrap(), v);
            assert_eq!(pos, buf.len());
        }
        let mut pos = 0;
        assert!(get_varint(&[0xff; 10], &mut pos).is_err());
    }

    #[test]
    fn all_zero_psd_is_one_run() {
        let h = Histogram::zeros(&[64, 64, 256]);
        let c = compress(&h, &[1, 1, 1]).unwrap();
        // varint(0) + varint(1 << 20), the latter being three bytes
        assert_eq!(c.payload, vec![0x00, 0x80, 0x80, 0x40]);
        assert!(c.payload.len() <= 64);
        assert_eq!(decompress(&c).unwrap(), h);
    }

    #[test]
    fn hand_encoded_runs() {
        assert_eq!(
            encode_counts(&[5, 0, 0, 0, 300, 0]),
            vec![5, 0, 3, 0xac, 0x02, 0, 1]
        );
        assert_eq!(
            decode_counts(&[5, 0, 3, 0xac, 0x02, 0, 1], 6).unwrap(),
            vec![5, 0, 0, 0, 300, 0]
        );
    }

    #[test]
    fn corrupt_payloads() {
        let h = Histogram {
            dims: vec![4],
            counts: vec![1, 0, 0, 200],
            monitor: 0,
            live_time: 0.0,
        };
        let mut c = compress(&h, &[1]).unwrap();
        c.payload.pop();
        assert!(matches!(decompress(&c), Err(VizError::CorruptPayload(_))));
        assert!(decode_counts(&[0, 0], 3).is_err());
        assert!(decode_counts(&[0, 5], 3).is_err());
        assert!(decode_counts(&[1, 1, 1, 1], 3).is_err());
        let mut raw = direct(&h);
        raw.payload.truncate(7);
        assert!(decompress(&raw).is_err());
    }

    #[test]
    fn zero_size_histogram() {
        let c = CompressedSpectrum {
            dims: vec![0, 16],
            factors: vec![1, 1],
            encoding: Encoding::ZeroRun,
            monitor: 0,
            live_time: 0.0,
            payload: Vec::new(),
        };
        let h = decompress(&c).unwrap();
        assert_eq!(h.cells(), 0);
        assert_eq!(h.dims, vec![0, 16]);
    }

    #[test]
    fn container_round_trip_and_damage() {
        let h = Histogram {
            dims: vec![2, 3],
            counts: vec![0, 9, 0, 0, 1, 70000],
            monitor: 17,
            live_time: 2.25,
        };
        let c = compress(&h, &[1, 1]).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), c.header_len() + c.payload.len());
        assert_eq!(CompressedSpectrum::from_bytes(&bytes).unwrap(), c);
        assert!(CompressedSpectrum::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(CompressedSpectrum::from_bytes(b"MAKS2").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CompressedSpectrum::from_bytes(&extra).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.maks");
        write_maks(&path, &c).unwrap();
        assert_eq!(decompress(&read_maks(&path).unwrap()).unwrap(), h);
    }

    #[test]
    fn empty_histogram_header_sizes_match() {
        let h = Histogram::zeros(&[0]);
        let c = compress(&h, &[1]).unwrap();
        let d = direct(&h);
        assert!(c.payload.is_empty() && d.payload.is_empty());
        assert_eq!(c.to_bytes().len(), d.to_bytes().len());
        assert_eq!(c.to_bytes().len(), c.header_len());
    }

    fn histogram() -> impl Strategy<Value = (Histogram, Vec<usize>)> {
        // extents are multiples of 4 so every factor in {1, 2, 4} divides them
        (prop::collection::vec(1usize..4, 1..4), any::<u64>()).prop_flat_map(|(units, monitor)| {
            let dims: Vec<usize> = units.iter().map(|u| u * 4).collect();
            let cells: usize = dims.iter().product();
            let counts = prop::collection::vec(
                prop_oneof![4 => Just(0u64), 3 => 0u64..300, 1 => any::<u64>().prop_map(|c| c >> 8)],
                cells,
            );
            let factors = prop::collection::vec(prop::sample::select(vec![1usize, 2, 4]), dims.len());
            (counts, factors).prop_map(move |(counts, factors)| {
                (
                    Histogram {
                        dims: dims.clone(),
                        counts,
                        monitor,
                        live_time: 1.0,
                    },
                    factors,
                )
            })
        })
    }

    proptest! {
        #[test]
        fn decompress_inverts_compress((h, factors) in histogram()) {
            let c = compress(&h, &factors).unwrap();
            let back = decompress(&CompressedSpectrum::from_bytes(&c.to_bytes()).unwrap()).unwrap();
            let r = rebin(&h, &factors).unwrap();
            prop_assert_eq!(back.total(), h.total());
            prop_assert_eq!(&back, &r);
            let ones = vec![1; h.dims.len()];
            prop_assert_eq!(decompress(&compress(&h, &ones).unwrap()).unwrap(), h.clone());
            prop_assert_eq!(decompress(&direct(&h)).unwrap(), h);
        }
    }
}
