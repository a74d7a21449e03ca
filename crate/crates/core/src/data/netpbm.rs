//! Binary NetPBM (P5 PGM / P6 PPM, maxval 255) reading and writing.
//!
//! The only image codec in the project; parse errors carry the byte offset
//! of the problem. Values scale to `[0,1]` on read; writing rounds back to
//! 8-bit, so a write/read round trip is within 1/255 per element and exact
//! for byte-sourced data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PnmKind {
    Pgm,
    Ppm,
}

struct Header {
    kind: PnmKind,
    width: usize,
    height: usize,
    data_offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::format(self.path, self.pos, msg))
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token_usize(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail(format!("expected {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(self.path, start, format!("bad {what}")))
    }
}

fn parse_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<Header> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if bytes.len() < 2 {
        return cur.fail("file too short for a PNM magic");
    }
    let kind = match &bytes[..2] {
        b"P5" => PnmKind::Pgm,
        b"P6" => PnmKind::Ppm,
        _ => return cur.fail("expected P5 or P6 magic"),
    };
    cur.pos = 2;
    let width = cur.token_usize("width")?;
    let height = cur.token_usize("height")?;
    let maxval = cur.token_usize("maxval")?;
    if width == 0 || height == 0 {
        return cur.fail("zero image dimension");
    }
    if maxval != 255 {
        return cur.fail(format!("unsupported maxval {maxval} (only 255)"));
    }
    // exactly one whitespace byte separates the header from the payload
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return cur.fail("expected single whitespace before payload");
    }
    cur.pos += 1;
    Ok(Header {
        kind,
        width,
        height,
        data_offset: cur.pos,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn payload<'a>(bytes: &'a [u8], header: &Header, path: &Path) -> Result<&'a [u8]> {
    let channels = match header.kind {
        PnmKind::Pgm => 1,
        PnmKind::Ppm => 3,
    };
    let want = header.width * header.height * channels;
    let have = bytes.len() - header.data_offset;
    if have < want {
        return Err(Error::format(
            path,
            bytes.len(),
            format!("truncated payload: want {want} bytes, have {have}"),
        ));
    }
    Ok(&bytes[header.data_offset..header.data_offset + want])
}

/// Reads a P6 PPM into a `[3,H,W]` tensor scaled to `[0,1]`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let header = parse_header(&bytes, path)?;
    if header.kind != PnmKind::Ppm {
        return Err(Error::format(path, 0, "expected P6 (PPM)"));
    }
    let data = payload(&bytes, &header, path)?;
    let (w, h) = (header.width, header.height);
    // interleaved RGB -> planar [3,H,W]
    let mut out = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            out[c * h * w + i] = data[i * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// Reads a P5 PGM into a `[1,H,W]` tensor scaled to `[0,1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let header = parse_header(&bytes, path)?;
    if header.kind != PnmKind::Pgm {
        return Err(Error::format(path, 0, "expected P5 (PGM)"));
    }
    let data = payload(&bytes, &header, path)?;
    let (w, h) = (header.width, header.height);
    let out: Vec<f32> = data.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![1, h, w], out)
}

/// Reads a P5 PGM as a binary mask: bytes > 127 become 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let header = parse_header(&bytes, path)?;
    if header.kind != PnmKind::Pgm {
        return Err(Error::format(path, 0, "expected P5 (PGM) mask"));
    }
    let data = payload(&bytes, &header, path)?;
    let (w, h) = (header.width, header.height);
    let out: Vec<f32> = data.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, h, w], out)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3,H,W]` tensor as binary P6, rounding to 8 bits.
pub fn write_ppm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("write_ppm wants [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = image.data();
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(data[c * plane + i]));
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a `[1,H,W]` tensor as binary P5, rounding to 8 bits.
pub fn write_pgm(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Shape(format!("write_pgm wants [1,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("trun-netpbm-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn pgm_known_bytes_decode() {
        // 2x2 P5 payload [0, 255, 128, 64] -> [0, 1, 0.50196, 0.25098]
        let path = tmp("known.pgm");
        fs::write(&path, [b"P5\n2 2\n255\n".as_ref(), &[0, 255, 128, 64]].concat()).unwrap();
        let t = read_pgm(&path).unwrap();
        let want = [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0];
        for (a, b) in t.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        // mask thresholding: > 127 -> 1
        let m = read_mask(&path).unwrap();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn ppm_roundtrip_within_one_part_in_255() {
        let mut rng = SeededRng::new(8);
        let img = Tensor::from_fn(vec![3, 5, 4], |_| rng.uniform() as f32);
        let path = tmp("roundtrip.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7, "{a} vs {b}");
        }
        // a second write/read is exact (already quantized)
        let path2 = tmp("roundtrip2.ppm");
        write_ppm(&back, &path2).unwrap();
        assert_eq!(read_ppm(&path2).unwrap().data(), back.data());
        fs::remove_file(&path).ok();
        fs::remove_file(&path2).ok();
    }

    #[test]
    fn all_black_reads_as_zeros() {
        let path = tmp("black.pgm");
        fs::write(&path, [b"P5\n3 2\n255\n".as_ref(), &[0u8; 6]].concat()).unwrap();
        assert!(read_pgm(&path).unwrap().data().iter().all(|&v| v == 0.0));
        fs::remove_file(&path).ok();
    }

    #[test]
    fn malformed_inputs_fail_with_offsets() {
        let path = tmp("bad.pgm");
        // wrong magic
        fs::write(&path, b"P7\n1 1\n255\n\0").unwrap();
        assert!(matches!(
            read_pgm(&path),
            Err(Error::Format { offset: 0, .. })
        ));
        // unsupported maxval
        fs::write(&path, b"P5\n1 1\n65535\n\0\0").unwrap();
        assert!(read_pgm(&path).is_err());
        // truncated payload
        fs::write(&path, b"P5\n2 2\n255\n\0\0").unwrap();
        let err = read_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        fs::remove_file(&path).ok();
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmp("comment.pgm");
        fs::write(
            &path,
            [b"P5 # a pgm\n# more\n2 1 # dims\n255\n".as_ref(), &[7, 9]].concat(),
        )
        .unwrap();
        let t = read_pgm(&path).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        fs::remove_file(&path).ok();
    }
}
