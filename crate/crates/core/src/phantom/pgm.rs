//! Binary portable graymap (P5), 8-bit.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("pgm: {0}")]
pub struct PgmError(pub String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Pixel values rescaled to `[0, 1]` by `v / maxval`.
    pub fn to_unit(&self) -> impl Iterator<Item = f64> + '_ {
        let m = f64::from(self.maxval);
        self.pixels.iter().map(move |&v| f64::from(v) / m)
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&c) = self.buf.get(self.pos) {
            if c == b'#' {
                while self.buf.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PgmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PgmError(format!("missing {what}")));
        }
        if self.pos - start > 9 {
            return Err(PgmError(format!("{what} too large")));
        }
        let s = std::str::from_utf8(&self.buf[start..self.pos]).expect("ascii digits");
        Ok(s.parse().expect("at most nine digits"))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if !bytes.starts_with(b"P5") {
        return Err(PgmError("not a binary graymap (missing P5 magic)".into()));
    }
    let mut h = Header { buf: bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError(format!("empty image {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err(PgmError(format!("maxval {maxval} unsupported (need 1..=255)")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(PgmError("header must end with one whitespace byte".into())),
    }
    let n = width * height;
    let body = &bytes[h.pos..];
    if body.len() != n {
        return Err(PgmError(format!("expected {n} pixel bytes, found {}", body.len())));
    }
    if body.iter().any(|&v| usize::from(v) > maxval) {
        return Err(PgmError(format!("pixel value exceeds maxval {maxval}")));
    }
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u8,
        pixels: body.to_vec(),
    })
}
