//! RGB raster images in `[0,1]` plus binary Netpbm (P5/P6) I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Channel-major (C×H×W) RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Shape {
                shape: vec![3, height, width],
                len: data.len(),
            });
        }
        let mut img = Self { height, width, data };
        img.clamp();
        Ok(img)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat(c.clamp(0.0, 1.0)).take(height * width));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Per-pixel luminance, H×W.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| LUMA[0] * self.data[i] + LUMA[1] * self.data[n + i] + LUMA[2] * self.data[2 * n + i])
            .collect()
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("consistent by construction")
    }

    /// 8-bit quantization used by the file formats.
    pub fn quantize(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        let n = self.height * self.width;
        out.reserve(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(to_u8(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, maxval, body) = parse_header(bytes)?;
        if magic != *b"P6" {
            return Err(Error::Input("expected binary PPM (P6)".into()));
        }
        if maxval != 255 {
            return Err(Error::Input(format!("unsupported maxval {maxval}")));
        }
        let n = width * height;
        if body.len() < 3 * n {
            return Err(Error::Input("truncated PPM payload".into()));
        }
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = body[3 * i + c] as f64 / 255.0;
            }
        }
        Self::new(height, width, data)
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_ppm_bytes(&buf)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }
}

/// Single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, width, height, maxval, body) = parse_header(bytes)?;
        if magic != *b"P5" || maxval != 255 {
            return Err(Error::Input("expected 8-bit binary PGM (P5)".into()));
        }
        if body.len() < width * height {
            return Err(Error::Input("truncated PGM payload".into()));
        }
        Ok(Self {
            height,
            width,
            data: body[..width * height].to_vec(),
        })
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_pgm_bytes())?;
        Ok(())
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_header(bytes: &[u8]) -> Result<([u8; 2], usize, usize, usize, &[u8])> {
    if bytes.len() < 2 {
        return Err(Error::Input("not a netpbm file".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| Error::Input("malformed netpbm header".into()))?;
    }
    // exactly one whitespace byte before the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Input("malformed netpbm header".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Input("empty image".into()));
    }
    Ok((magic, width, height, maxval, &bytes[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_header_layout() {
        let img = RasterImage::filled(2, 3, [1.0, 0.0, 0.5]);
        let bytes = img.to_ppm_bytes();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let g = GrayImage::from_pgm_bytes(&bytes).unwrap();
        assert_eq!(g.data, vec![7, 9]);
    }

    #[test]
    fn rejects_truncated() {
        assert!(RasterImage::from_ppm_bytes(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(RasterImage::from_ppm_bytes(b"P3\n1 1\n255\n").is_err());
    }

    proptest! {
        #[test]
        fn ppm_roundtrip_of_quantized(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
            let img = RasterImage::new(h, w, data).unwrap().quantize();
            let back = RasterImage::from_ppm_bytes(&img.to_ppm_bytes()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
