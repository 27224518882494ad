//! Binary netpbm images: PPM (`P6`) and PGM (`P5`) with maxval 255.

use std::path::Path;

use crate::error::{HarnessError, Result};

/// 8-bit interleaved raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 3 for PPM, 1 for PGM.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(HarnessError::contract(format!("netpbm images have 1 or 3 channels, not {channels}")));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(HarnessError::contract(format!(
                "{width}×{height}×{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    fn magic(&self) -> &'static str {
        if self.channels == 3 {
            "P6"
        } else {
            "P5"
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses a `P6` or `P5` buffer; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut p = Parser { bytes, pos: 0, path };
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(p.err("expected magic P6 or P5")),
        };
        p.pos = 2;
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval = p.number("maxval")?;
        if maxval != 255 {
            return Err(p.err(format!("maxval {maxval} unsupported, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(p.err("zero image extent"));
        }
        // exactly one whitespace byte separates the header from the raster
        if !p.peek().is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(p.err("missing whitespace after maxval"));
        }
        p.pos += 1;
        let need = width * height * channels;
        let have = bytes.len() - p.pos;
        if have < need {
            return Err(p.err(format!("truncated raster: need {need} bytes, {have} present")));
        }
        if have > need {
            return Err(HarnessError::format(path, (p.pos + need) as u64, format!("{} trailing bytes", have - need)));
        }
        Image::new(width, height, channels, bytes[p.pos..].to_vec())
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Parser<'_> {
    fn err(&self, msg: impl Into<String>) -> HarnessError {
        HarnessError::format(self.path, self.pos as u64, msg)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.peek().is_some_and(|b| b != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.peek().is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| HarnessError::format(self.path, start as u64, format!("{what} out of range")))
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Image::decode(&bytes, path)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, img.encode()).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use proptest::prelude::*;

    use super::*;

    fn decode(bytes: &[u8]) -> Result<Image> {
        Image::decode(bytes, &PathBuf::from("mem"))
    }

    fn offset(r: Result<Image>) -> u64 {
        match r {
            Err(HarnessError::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn parses_headers_with_comments() {
        let img = decode(b"P5 # gray\n# size next\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, vec![0, 255]);
        let img = decode(b"P6\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.data, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_bad_inputs_with_offsets() {
        assert_eq!(offset(decode(b"P3\n1 1\n255\n")), 0);
        assert_eq!(offset(decode(b"P5\n1 1\n65535\n\x00\x00")), 12);
        assert_eq!(offset(decode(b"P5\n2 2\n255\n\x00")), 11);
        assert_eq!(offset(decode(b"P5\n1 1\n255\n\x00\x00")), 12);
        assert_eq!(offset(decode(b"P5\nx 1\n255\n\x00")), 3);
        assert_eq!(offset(decode(b"P5\n1")), 4);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Image::new(2, 2, 3, vec![255; 12]).unwrap();
        write_image(&path, &img).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        let missing = read_image(&dir.path().join("missing.pgm"));
        assert!(matches!(missing, Err(HarnessError::Io { .. })));
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let data: Vec<u8> = (0..w * h * c).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let img = Image::new(w, h, c, data).unwrap();
            prop_assert_eq!(decode(&img.encode()).unwrap(), img);
        }
    }
}
