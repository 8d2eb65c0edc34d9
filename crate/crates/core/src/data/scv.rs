//! "SCV1" study files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SCV1"
//!      4     4  version (u32, = 1)
//!      8     2  slices S (u16)
//!     10     2  height H (u16)
//!     12     2  width W (u16)
//!     14     1  label (u8)
//!     15     1  padding (0)
//!     16  4·SHW CT voxels, f32
//!   ...   4·SHW CTA voxels, f32
//! ```
//!
//! All fields little-endian.

use std::fs;
use std::path::Path;

use super::study::PatientStudy;
use crate::error::{Error, Result};

pub const SCV_MAGIC: &[u8; 4] = b"SCV1";
pub const SCV_VERSION: u32 = 1;
pub const SCV_HEADER_LEN: usize = 16;

/// File size of a two-modality study.
pub fn study_file_size(slices: usize, height: usize, width: usize) -> u64 {
    SCV_HEADER_LEN as u64 + 2 * (slices * height * width) as u64 * 4
}

pub fn encode_study(study: &PatientStudy) -> Result<Vec<u8>> {
    let dims = [study.slices, study.height, study.width];
    let mut out = Vec::with_capacity(study_file_size(dims[0], dims[1], dims[2]) as usize);
    out.extend_from_slice(SCV_MAGIC);
    out.extend_from_slice(&SCV_VERSION.to_le_bytes());
    for d in dims {
        let d = u16::try_from(d).map_err(|_| Error::Argument(format!("extent {d} does not fit the SCV1 header")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(study.label);
    out.push(0);
    for v in study.ct.iter().chain(&study.cta) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses a whole file image. `id` is attached to the study since the
/// format does not store one.
pub fn decode_study(bytes: &[u8], id: &str) -> Result<PatientStudy> {
    let fmt = |offset: usize, detail: String| Error::Format {
        offset: offset as u64,
        detail,
    };
    if bytes.len() < SCV_HEADER_LEN {
        return Err(fmt(bytes.len(), format!("truncated header ({} of {SCV_HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[..4] != SCV_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != SCV_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let (s, h, w) = (u16_at(8), u16_at(10), u16_at(12));
    if s == 0 || h == 0 || w == 0 {
        return Err(fmt(8, format!("zero extent {s}x{h}x{w}")));
    }
    let label = bytes[14];
    if label > 1 {
        return Err(fmt(14, format!("label {label} is not 0 or 1")));
    }
    let expected = study_file_size(s, h, w) as usize;
    if bytes.len() < expected {
        return Err(fmt(bytes.len(), format!("truncated payload, expected {expected} bytes")));
    }
    if bytes.len() > expected {
        return Err(fmt(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let n = s * h * w;
    let floats = |from: usize| -> Vec<f32> {
        bytes[from..from + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    };
    let ct = floats(SCV_HEADER_LEN);
    let cta = floats(SCV_HEADER_LEN + 4 * n);
    if let Some(i) = ct.iter().chain(&cta).position(|v| !v.is_finite()) {
        return Err(fmt(SCV_HEADER_LEN + 4 * i, "non-finite voxel".into()));
    }
    Ok(PatientStudy {
        id: id.to_string(),
        slices: s,
        height: h,
        width: w,
        ct,
        cta,
        label,
    })
}

pub fn save_study(path: &Path, study: &PatientStudy) -> Result<()> {
    fs::write(path, encode_study(study)?).map_err(|e| Error::io(path, e))
}

/// Loads a study; its id is the file stem.
pub fn load_study(path: &Path) -> Result<PatientStudy> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    decode_study(&bytes, &id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PatientStudy {
        let ct: Vec<f32> = (0..12).map(|i| i as f32 * 0.1).collect();
        let cta: Vec<f32> = (0..12).map(|i| 1.0 - i as f32 * 0.05).collect();
        PatientStudy::new("s", (2, 2, 3), ct, cta, 1).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = encode_study(&sample()).unwrap();
        assert_eq!(&b[..4], b"SCV1");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..16], &[2, 0, 2, 0, 3, 0, 1, 0]);
        assert_eq!(b.len() as u64, study_file_size(2, 2, 3));
    }

    #[test]
    fn errors_carry_offsets() {
        let b = encode_study(&sample()).unwrap();
        let cut = decode_study(&b[..b.len() - 1], "s").unwrap_err();
        assert!(matches!(cut, Error::Format { offset, .. } if offset == b.len() as u64 - 1));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_study(&bad, "s"), Err(Error::Format { offset: 0, .. })));
        let mut bad = b;
        bad[4] = 2;
        assert!(matches!(decode_study(&bad, "s"), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_study(b"SCV1", "s"), Err(Error::Format { .. })));
    }
}
