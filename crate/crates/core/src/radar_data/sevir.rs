//! Reader for SEVIR-shaped archives exported as `.npy`.
//!
//! SEVIR stores VIL events as `[N, H, W, T]` unsigned bytes. This adapter
//! reads a C-ordered `uint8` `.npy` array of that shape and transposes each
//! event to `[T, H, W]`. No cropping or resampling is applied.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4};

use super::RadarSequence;
use crate::error::{Error, Result};

pub fn load_sevir_npy(path: &Path, id_prefix: &str, interval_minutes: u32) -> Result<Vec<RadarSequence>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (shape, offset) = parse_npy_header(&bytes)?;
    if shape.len() != 4 {
        return Err(Error::Format(format!("expected a rank-4 [N, H, W, T] array, found shape {shape:?}")));
    }
    let (n, h, w, t) = (shape[0], shape[1], shape[2], shape[3]);
    let payload = &bytes[offset..];
    if payload.len() != n * h * w * t {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n * h * w * t
        )));
    }
    let events = Array4::from_shape_vec((n, h, w, t), payload.to_vec()).expect("length checked");
    Ok(events
        .outer_iter()
        .enumerate()
        .map(|(i, ev)| {
            let frames: Array3<u8> = ev.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
            RadarSequence::new(format!("{id_prefix}{i:05}"), frames, interval_minutes)
        })
        .collect())
}

fn parse_npy_header(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    const MAGIC: &[u8] = b"\x93NUMPY";
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("not an .npy file".into()));
    }
    let (header_len, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12),
        v => return Err(Error::Format(format!("unsupported .npy version {v}"))),
    };
    let end = start + header_len;
    let header = bytes
        .get(start..end)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| Error::Format("truncated .npy header".into()))?;

    let field = |key: &str| -> Result<&str> {
        let pos = header
            .find(&format!("'{key}'"))
            .ok_or_else(|| Error::Format(format!(".npy header lacks '{key}'")))?;
        Ok(header[pos + key.len() + 2..].trim_start().trim_start_matches(':').trim_start())
    };
    let descr = field("descr")?;
    if !(descr.starts_with("'|u1'") || descr.starts_with("'<u1'") || descr.starts_with("'u1'")) {
        return Err(Error::Format(format!("only uint8 arrays are supported, found {descr:.8}")));
    }
    if field("fortran_order")?.starts_with("True") {
        return Err(Error::Format("fortran-ordered arrays are not supported".into()));
    }
    let shape_src = field("shape")?;
    let close = shape_src.find(')').ok_or_else(|| Error::Format("malformed shape".into()))?;
    let shape = shape_src[1..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::Format(format!("bad dimension `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((shape, end))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn npy_u8(shape: &[usize], data: &[u8]) -> Vec<u8> {
        npy("|u1", shape, data)
    }

    fn npy(descr: &str, shape: &[usize], data: &[u8]) -> Vec<u8> {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': ({},), }}", dims.join(", "));
        while (10 + header.len() + 1) % 64 != 0 {
            header.push(' ');
        }
        header.push('\n');
        let mut out = b"\x93NUMPY\x01\x00".to_vec();
        out.extend((header.len() as u16).to_le_bytes());
        out.extend(header.as_bytes());
        out.extend(data);
        out
    }

    #[test]
    fn transposes_nhwt_to_thw() {
        let (n, h, w, t) = (2, 3, 4, 5);
        let data: Vec<u8> = (0..n * h * w * t).map(|v| (v % 251) as u8).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vil.npy");
        std::fs::write(&path, npy_u8(&[n, h, w, t], &data)).unwrap();
        let seqs = load_sevir_npy(&path, "vil-", 5).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].frames.shape(), &[t, h, w]);
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let src = ((h + y) * w + x) * t + ti;
                    assert_eq!(seqs[1].frames[[ti, y, x]], data[src]);
                }
            }
        }
        assert_eq!(seqs[0].id, "vil-00000");
    }

    #[test]
    fn rejects_other_dtypes_and_ranks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        std::fs::write(&path, npy_u8(&[2, 2], &[0; 4])).unwrap();
        assert!(load_sevir_npy(&path, "x", 5).is_err());
        std::fs::write(&path, npy("<f4", &[1, 1, 1, 1], &[0; 4])).unwrap();
        assert!(load_sevir_npy(&path, "x", 5).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_sevir_npy(&path, "x", 5).is_err());
    }
}
