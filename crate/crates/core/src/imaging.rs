//! Binary netpbm (P5/P6, maxval 255) I/O and mask rendering.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 8-bit image, interleaved channels, rows top to bottom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("{channels} channels; expected 1 or 3")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Image(format!(
                "{} bytes for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Header { bytes, pos: 0 };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(Error::Image("unsupported magic; expected P5 or P6".into())),
        };
        cur.pos = 2;
        if !bytes.get(2).is_some_and(|&b| b.is_ascii_whitespace() || b == b'#') {
            return Err(Error::Image("missing whitespace after magic".into()));
        }
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval = cur.number()?;
        if maxval != 255 {
            return Err(Error::Image(format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Image("missing whitespace after maxval".into())),
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Image(format!("image {width}x{height} too large")))?;
        let payload = &bytes[cur.pos..];
        if payload.len() < need {
            return Err(Error::Image(format!(
                "truncated payload: {} of {need} bytes",
                payload.len()
            )));
        }
        Self::new(width, height, channels, payload[..need].to_vec())
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let begin = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if begin == self.pos {
            return Err(Error::Image("truncated or malformed header".into()));
        }
        std::str::from_utf8(&self.bytes[begin..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("header number out of range".into()))
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::decode(&bytes).map_err(|e| match e {
        Error::Image(msg) => Error::Image(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, img.encode()).map_err(|e| Error::io(path, e))
}

#[inline]
fn round_half_up(x: f64) -> u8 {
    (x + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// `(C, H, W)` tensor with values `byte / 255`.
pub fn to_input_tensor<T: Scalar>(img: &Image) -> Result<Tensor<T>> {
    let (c, plane) = (img.channels, img.width * img.height);
    Tensor::from_fn(vec![c, img.height, img.width], |i| {
        let (ch, p) = (i / plane, i % plane);
        T::from_acc(img.pixels[p * c + ch] as f64 / 255.0)
    })
}

fn check_mask_shape<T: Scalar>(mask: &Tensor<T>, width: usize, height: usize) -> Result<()> {
    if mask.shape() != [height, width] {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match image {height}x{width}",
            mask.shape()
        )));
    }
    Ok(())
}

/// Grayscale image with `round(255 * m)` per pixel.
pub fn mask_to_image<T: Scalar>(mask: &Tensor<T>) -> Result<Image> {
    let (h, w) = mask.hw()?;
    let pixels = mask.data().iter().map(|m| round_half_up(255.0 * m.acc())).collect();
    Image::gray(w, h, pixels)
}

/// Red overlay: `R = max(g, round(255 m))`, `G = B = round(g (1 - m))`.
pub fn overlay_red<T: Scalar>(gray: &Image, mask: &Tensor<T>) -> Result<Image> {
    if gray.channels != 1 {
        return Err(Error::Image("overlay needs a grayscale image".into()));
    }
    check_mask_shape(mask, gray.width, gray.height)?;
    let mut pixels = Vec::with_capacity(gray.pixels.len() * 3);
    for (&g, m) in gray.pixels.iter().zip(mask.data()) {
        let m = m.acc().clamp(0.0, 1.0);
        let rest = round_half_up(g as f64 * (1.0 - m));
        pixels.extend_from_slice(&[g.max(round_half_up(255.0 * m)), rest, rest]);
    }
    Image::new(gray.width, gray.height, 3, pixels)
}

/// Mean over channels, rounded; grayscale images are returned unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let pixels = img
        .pixels
        .chunks_exact(img.channels)
        .map(|px| round_half_up(px.iter().map(|&b| b as f64).sum::<f64>() / img.channels as f64))
        .collect();
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray2x2() -> Image {
        Image::gray(2, 2, vec![0, 85, 170, 255]).unwrap()
    }

    #[test]
    fn p5_bytes_map_directly() {
        let img = Image::decode(b"P5\n2 2\n255\n\x00\x55\xaa\xff").unwrap();
        assert_eq!(img, gray2x2());
    }

    #[test]
    fn header_comments_and_spacing() {
        let img = Image::decode(b"P6 # rgb\n# size next\n1\t1\n# max\n255\n\x01\x02\x03").unwrap();
        assert_eq!((img.width, img.height, img.channels), (1, 1, 3));
        assert_eq!(img.pixels, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_bad_files() {
        let cases: [&[u8]; 6] = [
            b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00",
            b"P2\n1 1\n255\n0",
            b"P5\n2 2\n255\n\x00\x01",
            b"P5\n2",
            b"P5\n2 2\n255",
            b"P5\n0 2\n255\n",
        ];
        for bytes in cases {
            assert!(matches!(Image::decode(bytes), Err(Error::Image(_))), "{bytes:?}");
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        save_image(&gray2x2(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, gray2x2());
        save_image(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
        assert!(matches!(load_image(&dir.path().join("none.pgm")), Err(Error::Io { .. })));
    }

    #[test]
    fn input_tensor_is_planar_and_scaled() {
        let rgb = Image::new(2, 1, 3, vec![255, 0, 51, 0, 255, 102]).unwrap();
        let t: Tensor<f32> = to_input_tensor(&rgb).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
        let g: Tensor<f32> = to_input_tensor(&gray2x2()).unwrap();
        assert_eq!(g.shape(), &[1, 2, 2]);
    }

    #[test]
    fn overlay_examples() {
        let img = gray2x2();
        let zero = Tensor::<f32>::zeros(vec![2, 2]).unwrap();
        let o = overlay_red(&img, &zero).unwrap();
        assert_eq!(o.pixels, vec![0, 0, 0, 85, 85, 85, 170, 170, 170, 255, 255, 255]);

        let g100 = Image::gray(1, 1, vec![100]).unwrap();
        let one = Tensor::<f32>::filled(vec![1, 1], 1.0).unwrap();
        assert_eq!(overlay_red(&g100, &one).unwrap().pixels, vec![255, 0, 0]);

        let white = Image::gray(2, 1, vec![255, 255]).unwrap();
        let half = Tensor::<f32>::filled(vec![1, 2], 0.5).unwrap();
        assert_eq!(overlay_red(&white, &half).unwrap().pixels, vec![255, 128, 128, 255, 128, 128]);

        let wrong = Tensor::<f32>::zeros(vec![2, 1]).unwrap();
        assert!(matches!(overlay_red(&img, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_bytes_round_half_up() {
        let m = Tensor::<f32>::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(mask_to_image(&m).unwrap().pixels, vec![0, 128, 255]);
    }

    #[test]
    fn grayscale_conversion() {
        let rgb = Image::new(1, 1, 3, vec![10, 20, 31]).unwrap();
        assert_eq!(to_grayscale(&rgb).pixels, vec![20]);
    }
}
