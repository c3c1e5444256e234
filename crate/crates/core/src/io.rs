//! Binary PPM (P6) and PGM (P5) reading and writing.
//!
//! Images map to `[3, H, W]` float tensors with `value / 255`; label maps
//! store the class index as the gray value.

use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Refuse to read anything claiming to be larger than this per side.
const MAX_DIM: usize = 8192;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[3, H, W]` tensor as binary PPM. `comment`, when given, lands
/// as a `#` header line.
pub fn write_ppm(path: &Path, image: &Tensor, comment: Option<&str>) -> Result<()> {
    if image.shape.len() != 3 || image.shape[0] != 3 {
        return Err(Error::shape("write_ppm", format!("expected [3,H,W], got {:?}", image.shape)));
    }
    let (h, w) = (image.shape[1], image.shape[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 3 + 64);
    out.extend_from_slice(b"P6\n");
    if let Some(c) = comment {
        debug_assert!(!c.contains('\n'));
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image.data[ch * plane + p]));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Write a label map as binary PGM with the class index as gray value.
pub fn write_pgm(path: &Path, labels: &LabelMap, comment: Option<&str>) -> Result<()> {
    let mut out = Vec::with_capacity(labels.data.len() + 64);
    out.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        out.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n255\n", labels.width, labels.height).as_bytes());
    out.extend_from_slice(&labels.data);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    /// Skip whitespace and `#` comment lines between header tokens.
    fn skip_separators(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format("pnm", "truncated header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::format("pnm", format!("bad numeric token {:?}", String::from_utf8_lossy(tok))))
    }

    /// Consume exactly one whitespace byte after the maxval, per the spec.
    fn start_of_data(mut self) -> Result<usize> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::format("pnm", "missing separator before pixel data"));
        }
        self.pos += 1;
        Ok(self.pos)
    }
}

fn parse_header(bytes: &[u8], magic: &[u8], context: &'static str) -> Result<(usize, usize, usize)> {
    let mut p = HeaderParser::new(bytes);
    let m = p.token()?;
    if m != magic {
        return Err(Error::format(
            context,
            format!("expected {:?}, found {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(m)),
        ));
    }
    let w = p.number()?;
    let h = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return Err(Error::format(context, format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 || w > MAX_DIM || h > MAX_DIM {
        return Err(Error::format(context, format!("unreasonable dimensions {w}x{h}")));
    }
    let data_at = p.start_of_data()?;
    Ok((w, h, data_at))
}

/// Read a binary PPM into a `[3, H, W]` tensor with values `byte / 255`.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, at) = parse_header(&bytes, b"P6", "ppm")?;
    let plane = w * h;
    if bytes.len() < at + 3 * plane {
        return Err(Error::format("ppm", format!("expected {} pixel bytes, found {}", 3 * plane, bytes.len() - at)));
    }
    let mut img = Tensor::zeros(&[3, h, w]);
    for p in 0..plane {
        for ch in 0..3 {
            img.data[ch * plane + p] = bytes[at + 3 * p + ch] as f32 / 255.0;
        }
    }
    Ok(img)
}

/// Read a binary PGM into a label map (gray value = class index).
pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = std::fs::read(path)?;
    let (w, h, at) = parse_header(&bytes, b"P5", "pgm")?;
    if bytes.len() < at + w * h {
        return Err(Error::format("pgm", format!("expected {} bytes, found {}", w * h, bytes.len() - at)));
    }
    LabelMap::new(h, w, bytes[at..at + w * h].to_vec())
}

/// Read a PGM as a float `[H, W]` map scaled into `[0, 1]`; used for
/// boundary-guidance inputs.
pub fn read_pgm_as_map(path: &Path) -> Result<Tensor> {
    let labels = read_pgm(path)?;
    Ok(Tensor {
        shape: vec![labels.height, labels.width],
        data: labels.data.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("texshield_io_{}_{}", std::process::id(), name));
        p
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let mut rng = crate::rng::Xoshiro256PlusPlus::new(3);
        let img = Tensor::rand_uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        let path = tmp("rt.ppm");
        write_ppm(&path, &img, Some("test image")).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape, vec![3, 5, 7]);
        for (a, b) in img.data.iter().zip(back.data.iter()) {
            // 8-bit quantization bound.
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-6, "{a} vs {b}");
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn byte_exact_second_roundtrip() {
        // Once quantized, encode(decode(x)) is byte-identical.
        let mut rng = crate::rng::Xoshiro256PlusPlus::new(5);
        let img = Tensor::rand_uniform(&[3, 4, 4], 0.0, 1.0, &mut rng);
        let p1 = tmp("b1.ppm");
        let p2 = tmp("b2.ppm");
        write_ppm(&p1, &img, None).unwrap();
        let once = read_ppm(&p1).unwrap();
        write_ppm(&p2, &once, None).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).ok();
        std::fs::remove_file(&p2).ok();
    }

    #[test]
    fn pgm_roundtrip_exact() {
        let labels = LabelMap::new(3, 4, vec![0, 1, 2, 3, 3, 2, 1, 0, 255, 0, 1, 2]).unwrap();
        let path = tmp("rt.pgm");
        write_pgm(&path, &labels, None).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, labels);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let path = tmp("bad.ppm");
        std::fs::write(&path, b"P3\n2 2\n255\n").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::write(&path, b"P6\n2 2\n255\nab").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::write(&path, b"P6\n99999 2\n255\n").unwrap();
        assert!(read_ppm(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn header_comments_are_skipped() {
        let path = tmp("comment.ppm");
        let mut bytes = b"P6\n# a comment\n2 1\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        std::fs::write(&path, &bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.shape, vec![3, 1, 2]);
        assert!((img.data[0] - 10.0 / 255.0).abs() < 1e-6);
        std::fs::remove_file(&path).ok();
    }
}
