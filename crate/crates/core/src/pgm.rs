//! Portable graymap (P2 ASCII / P5 binary) reading and writing.

use std::io::Write;

use crate::error::{Error, Result};

/// Decoded graymap; `pixels` are row-major, values in `0..=maxval`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse("truncated graymap header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|e| Error::Parse(e.to_string()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| Error::Parse(format!("bad graymap number `{t}`")))
    }
}

pub fn parse(bytes: &[u8]) -> Result<Graymap> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.token()?.to_string();
    let width = c.number()?;
    let height = c.number()?;
    let maxval = c.number()?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("bad graymap header {width}x{height} max {maxval}")));
    }
    let n = width * height;
    let pixels = match magic.as_str() {
        "P2" => (0..n)
            .map(|_| {
                let v = c.number()?;
                if v > maxval {
                    return Err(Error::Parse(format!("pixel {v} above maxval {maxval}")));
                }
                Ok(v as u16)
            })
            .collect::<Result<Vec<_>>>()?,
        "P5" => {
            // exactly one whitespace byte separates the header from the raster
            let start = c.pos + 1;
            let wide = maxval > 255;
            let need = if wide { 2 * n } else { n };
            if bytes.len() < start + need {
                return Err(Error::Parse("truncated P5 raster".into()));
            }
            let raster = &bytes[start..start + need];
            if wide {
                raster.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
            } else {
                raster.iter().map(|&b| b as u16).collect()
            }
        }
        other => return Err(Error::Parse(format!("unsupported graymap magic `{other}`"))),
    };
    Ok(Graymap {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn read(path: &std::path::Path) -> Result<Graymap> {
    parse(&std::fs::read(path)?)
}

/// Encodes an 8-bit P5 graymap.
pub fn encode_p5(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::dim("pgm", format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut out = Vec::with_capacity(pixels.len() + 20);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_p5(path: &std::path::Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    std::fs::write(path, encode_p5(width, height, pixels)?)?;
    Ok(())
}
