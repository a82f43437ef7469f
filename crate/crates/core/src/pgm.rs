//! Binary PGM (P5, 8-bit) mask files. Any nonzero byte reads as foreground;
//! foreground is written as 255.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::skeleton::BinaryMask;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("not a binary PGM: {0}")]
    Format(String),
}

pub fn decode(bytes: &[u8]) -> Result<BinaryMask, PgmError> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, PgmError> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(PgmError::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P5" {
        return Err(PgmError::Format(format!("magic {magic:?}")));
    }
    let mut number = |what: &str| -> Result<usize, PgmError> {
        let t = token()?;
        t.parse().map_err(|_| PgmError::Format(format!("bad {what} {t:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::Format(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::Format(format!("maxval {maxval} (only 8-bit supported)")));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes
        .get(pos + 1..)
        .ok_or_else(|| PgmError::Format("missing raster".into()))?;
    if data.len() < width * height {
        return Err(PgmError::Format(format!(
            "raster has {} bytes, expected {}",
            data.len(),
            width * height
        )));
    }
    let mut mask = BinaryMask::new(width, height);
    for (i, &b) in data[..width * height].iter().enumerate() {
        if b != 0 {
            mask.set(i / width, i % width, true);
        }
    }
    Ok(mask)
}

pub fn encode(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.data().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn read(path: &Path) -> Result<BinaryMask, PgmError> {
    decode(&fs::read(path)?)
}

pub fn write(path: &Path, mask: &BinaryMask) -> Result<(), PgmError> {
    fs::write(path, encode(mask))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut m = BinaryMask::new(5, 3);
        m.set(0, 0, true);
        m.set(2, 4, true);
        m.set(1, 2, true);
        let bytes = encode(&m);
        assert_eq!(&bytes[..11], b"P5\n5 3\n255\n");
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn any_nonzero_is_foreground_and_comments_skip() {
        let mut bytes = b"P5 # a comment\n2 2\n# another\n200\n".to_vec();
        bytes.extend([0u8, 1, 7, 0]);
        let m = decode(&bytes).unwrap();
        assert!(!m.get(0, 0) && m.get(0, 1) && m.get(1, 0) && !m.get(1, 1));
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n2 2\n255\n\0").is_err());
        assert!(decode(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").is_err());
        assert!(decode(b"P5\n0 2\n255\n").is_err());
        assert!(decode(b"P5\n2").is_err());
    }
}
