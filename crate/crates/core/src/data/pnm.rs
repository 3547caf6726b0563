//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::path::Path;

use crate::error::{Result, SvtrError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    /// Interleaved, row-major.
    pub data: Vec<u8>,
}

impl PnmImage {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("truncated header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(format!("unsupported magic {m:?}, expected P5 or P6")),
        };
        let mut num = |what: &str| -> std::result::Result<usize, String> {
            let t = token()?;
            t.parse().map_err(|_| format!("bad {what} {t:?}"))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if width == 0 || height == 0 {
            return Err(format!("empty image {width}x{height}"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(format!("maxval {maxval} unsupported, need 1..=255"));
        }
        // exactly one whitespace byte separates header and raster
        let start = pos + 1;
        let len = width * height * channels;
        let raster = bytes
            .get(start..start + len)
            .ok_or_else(|| format!("raster holds {} bytes, expected {len}", bytes.len().saturating_sub(start)))?;
        let data = if maxval == 255 {
            raster.to_vec()
        } else {
            raster.iter().map(|&v| ((v as usize * 255 + maxval / 2) / maxval) as u8).collect()
        };
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SvtrError::io(path, e))?;
        Self::decode(&bytes).map_err(|m| SvtrError::Image(format!("{}: {m}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| SvtrError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        let g = PnmImage::gray(3, 2, vec![0, 1, 2, 253, 254, 255]);
        assert_eq!(PnmImage::decode(&g.encode()).unwrap(), g);
        let c = PnmImage::rgb(1, 2, vec![9, 8, 7, 6, 5, 4]);
        assert_eq!(PnmImage::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn comments_and_small_maxval() {
        let mut bytes = b"P5 # gray\n2 1\n# max\n15\n".to_vec();
        bytes.extend([0, 15]);
        let img = PnmImage::decode(&bytes).unwrap();
        assert_eq!(img.data, vec![0, 255]);
    }

    #[test]
    fn rejects_truncated_and_ascii() {
        assert!(PnmImage::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(PnmImage::decode(b"P2\n1 1\n255\n0").is_err());
    }
}
