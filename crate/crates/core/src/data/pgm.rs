//! Binary 8-bit PGM (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    atomic_write(path, &encode_pgm(width, height, pixels))
}

/// Header tokens are separated by whitespace; `#` starts a comment running
/// to the end of the line. Exactly one whitespace byte follows the maxval.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    let bad = |reason: &str| Error::dataset(path, format!("malformed PGM: {reason}"));
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("header ended early"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(bad("magic is not P5"));
    }
    let num = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| bad(&format!("{what} `{t}` is not a number")))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::dataset(
            path,
            format!("unsupported PGM maxval {maxval} (only 255)"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero extent"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let body = &bytes[pos..];
    if body.len() != width * height {
        return Err(bad(&format!(
            "expected {} pixel bytes, found {}",
            width * height,
            body.len()
        )));
    }
    Ok(Pgm {
        width,
        height,
        pixels: body.to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let p = Path::new("x.pgm");
        let px: Vec<u8> = (0..12).collect();
        let enc = encode_pgm(4, 3, &px);
        assert_eq!(parse_pgm(&enc, p).unwrap().pixels, px);
        let mut commented = b"P5\n# made by hand\n4 3\n255\n".to_vec();
        commented.extend_from_slice(&px);
        assert_eq!(parse_pgm(&commented, p).unwrap(), parse_pgm(&enc, p).unwrap());
    }

    #[test]
    fn rejects_bad_headers() {
        let p = Path::new("x.pgm");
        let err = parse_pgm(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0", p).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
        assert!(parse_pgm(b"P2\n2 2\n255\n1 2 3 4", p).is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\0\0\0", p).is_err());
        assert!(parse_pgm(b"P5\n2", p).is_err());
    }
}
