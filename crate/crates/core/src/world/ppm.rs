//! Binary PPM (P6, 8-bit) encoding for frames and patch textures.

use std::io::{Read, Write};

use super::WorldError;

pub fn encode(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write<W: Write>(mut w: W, width: usize, height: usize, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&encode(width, height, values))
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String, WorldError> {
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
        return Err(WorldError::Ppm("unexpected end of header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes a P6 image into (width, height, values in [0,1]).
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>), WorldError> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != "P6" {
        return Err(WorldError::Ppm("not a P6 image".into()));
    }
    let parse = |s: String| s.parse::<usize>().map_err(|_| WorldError::Ppm(format!("bad header field {s:?}")));
    let width = parse(next_token(bytes, &mut pos)?)?;
    let height = parse(next_token(bytes, &mut pos)?)?;
    let maxval = parse(next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(WorldError::Ppm("only 8-bit images are supported".into()));
    }
    pos += 1;
    let n = width * height * 3;
    let body = bytes.get(pos..pos + n).ok_or_else(|| WorldError::Ppm("truncated pixel data".into()))?;
    Ok((width, height, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

pub fn read<R: Read>(mut r: R) -> Result<(usize, usize, Vec<f64>), WorldError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_quantized() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64 / 255.0 * 20.0).collect();
        let bytes = encode(2, 2, &vals);
        let (w, h, back) = decode(&bytes).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in vals.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_truncation_and_wrong_magic() {
        let bytes = encode(2, 2, &[0.5; 12]);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"P3\n1 1\n255\n").is_err());
    }
}
