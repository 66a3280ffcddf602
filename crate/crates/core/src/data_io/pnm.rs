//! Binary portable graymap (`P5`, 1 channel) and pixmap (`P6`, 3 channels), maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::RasterImage;

pub fn encode_pnm(r: &RasterImage) -> Vec<u8> {
    let magic = if r.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    out.extend(r.to_bytes());
    out
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { offset: self.pos, message: message.into() }
    }

    fn skip_ws_and_comments(&mut self) {
        loop {
            while self.pos < self.b.len() && self.b[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.b.len() && self.b[self.pos] == b'#' {
                while self.pos < self.b.len() && self.b[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.b.len() && self.b[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.b[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format { offset: start, message: format!("{what} out of range") })
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<RasterImage> {
    let mut c = Cursor { b: bytes, pos: 0 };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(c.err("expected magic P5 or P6")),
    };
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(c.err(format!("only maxval 255 is supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected single whitespace before pixel data")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| c.err("image dimensions overflow"))?;
    let payload = &bytes[c.pos..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated pixel data: {} of {need} bytes", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Format { offset: c.pos + need, message: "trailing bytes after pixel data".into() });
    }
    RasterImage::from_bytes(height, width, channels, payload)
}

pub fn write_raster(r: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pnm(r))?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterImage> {
    decode_pnm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let r = RasterImage::filled(1, 1, 3, 1.0).unwrap();
        let b = encode_pnm(&r);
        assert_eq!(b, b"P6\n1 1\n255\n\xff\xff\xff");
        assert_eq!(decode_pnm(&b).unwrap(), r);
    }

    #[test]
    fn gray_round_trip_and_comments() {
        let r = RasterImage::from_bytes(2, 3, 1, &[0, 10, 20, 30, 40, 255]).unwrap();
        let b = encode_pnm(&r);
        assert_eq!(encode_pnm(&decode_pnm(&b).unwrap()), b);
        let with_comment = b"P5\n# made by hand\n3 2\n255\n\x00\x0a\x14\x1e\x28\xff";
        assert_eq!(decode_pnm(with_comment).unwrap(), r);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        match decode_pnm(b"P7\n1 1\n255\n\x00") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pnm(b"P5\n2 2\n255\n\x00\x01") {
            Err(Error::Format { offset: 13, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(decode_pnm(b"P5\nx 2\n255\n").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
