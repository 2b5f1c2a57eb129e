//! Simulated domain shift: photometric transforms that leave geometry alone.
//!
//! A simulated target image is `grayscale(gaussian_blur(color_jitter(x)))`
//! with every intensity drawn uniformly from its configured range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RasterImage;

/// Sampling ranges for the three transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRanges {
    /// Brightness, contrast and saturation factors are drawn from `[1-r, 1+r]`.
    pub jitter: f64,
    /// Hue shift drawn from `[-hue, hue]`, in turns.
    pub hue: f64,
    pub sigma: (f64, f64),
    pub blend: (f64, f64),
}

impl Default for AugmentationRanges {
    fn default() -> Self {
        Self {
            jitter: 0.4,
            hue: 0.1,
            sigma: (0.1, 2.0),
            blend: (0.0, 1.0),
        }
    }
}

impl AugmentationRanges {
    /// Every transform collapsed to its identity setting.
    pub fn neutral() -> Self {
        Self {
            jitter: 0.0,
            hue: 0.0,
            sigma: (0.0, 0.0),
            blend: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.jitter)
            && (0.0..=0.5).contains(&self.hue)
            && 0.0 <= self.sigma.0
            && self.sigma.0 <= self.sigma.1
            && 0.0 <= self.blend.0
            && self.blend.0 <= self.blend.1
            && self.blend.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentationIntensity {
        let r = self.jitter;
        AugmentationIntensity {
            jitter: ColorJitter {
                brightness: uniform(rng, 1.0 - r, 1.0 + r),
                contrast: uniform(rng, 1.0 - r, 1.0 + r),
                saturation: uniform(rng, 1.0 - r, 1.0 + r),
                hue: uniform(rng, -self.hue, self.hue),
            },
            sigma: uniform(rng, self.sigma.0, self.sigma.1),
            blend: uniform(rng, self.blend.0, self.blend.1),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Turns; wraps modulo 1.
    pub hue: f64,
}

impl ColorJitter {
    pub const NEUTRAL: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

/// The sampled intensities of one simulated target image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationIntensity {
    pub jitter: ColorJitter,
    pub sigma: f64,
    pub blend: f64,
}

impl AugmentationIntensity {
    /// `key = value` lines, used for the sidecar written next to augmented images.
    pub fn to_sidecar(&self) -> String {
        format!(
            "brightness = {}\ncontrast = {}\nsaturation = {}\nhue = {}\nsigma = {}\nblend = {}\n",
            self.jitter.brightness, self.jitter.contrast, self.jitter.saturation, self.jitter.hue, self.sigma, self.blend
        )
    }
}

/// Brightness, contrast, saturation and hue, in that order, clamping after each.
pub fn color_jitter(x: &RasterImage, p: &ColorJitter) -> RasterImage {
    let mut out = x.clone();
    let n = out.height() * out.width();

    for ch in 0..3 {
        for v in out.channel_mut(ch).iter_mut() {
            *v *= p.brightness;
        }
    }
    out.clamp();

    // blend form keeps factor 1 an exact identity
    let mean_lum = out.luminance().iter().sum::<f64>() / n as f64;
    let (c, ci) = (p.contrast, 1.0 - p.contrast);
    for ch in 0..3 {
        for v in out.channel_mut(ch).iter_mut() {
            *v = c * *v + ci * mean_lum;
        }
    }
    out.clamp();

    let lum = out.luminance();
    let (s, si) = (p.saturation, 1.0 - p.saturation);
    for ch in 0..3 {
        for (v, l) in out.channel_mut(ch).iter_mut().zip(&lum) {
            *v = s * *v + si * l;
        }
    }
    out.clamp();

    if p.hue != 0.0 {
        for y in 0..out.height() {
            for x in 0..out.width() {
                let (h, s, v) = rgb_to_hsv(out.pixel(y, x));
                out.set_pixel(y, x, hsv_to_rgb(((h + p.hue) % 1.0 + 1.0) % 1.0, s, v));
            }
        }
        out.clamp();
    }
    out
}

/// Separable Gaussian blur, radius `ceil(3σ)`, mirror padding. `sigma == 0`
/// is the identity.
pub fn gaussian_blur(x: &RasterImage, sigma: f64) -> RasterImage {
    if sigma <= 0.0 {
        return x.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (x.height(), x.width());
    let mut out = x.clone();
    let mut tmp = vec![0.0; h * w];
    for c in 0..3 {
        let src = x.channel(c);
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(xx as isize + k as isize - r, w);
                    acc += kv * src[yy * w + sx];
                }
                tmp[yy * w + xx] = acc;
            }
        }
        let dst = out.channel_mut(c);
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(yy as isize + k as isize - r, h);
                    acc += kv * tmp[sy * w + xx];
                }
                dst[yy * w + xx] = acc;
            }
        }
    }
    out.clamp();
    out
}

/// Normalized 1-D Gaussian taps of length `2·ceil(3σ)+1`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Mirror index without repeating the edge sample (`… c b | a b c …`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `(1-blend)·x + blend·luminance(x)` on every channel.
pub fn grayscale(x: &RasterImage, blend: f64) -> RasterImage {
    let lum = x.luminance();
    let mut out = x.clone();
    let keep = 1.0 - blend;
    for c in 0..3 {
        for (v, l) in out.channel_mut(c).iter_mut().zip(&lum) {
            *v = keep * *v + blend * l;
        }
    }
    out.clamp();
    out
}

/// Applies the three transforms with given intensities.
pub fn apply(x: &RasterImage, phi: &AugmentationIntensity) -> RasterImage {
    let jittered = color_jitter(x, &phi.jitter);
    let blurred = gaussian_blur(&jittered, phi.sigma);
    grayscale(&blurred, phi.blend)
}

/// Draws intensities from `ranges` and builds the simulated target image.
pub fn simulate_target<R: Rng + ?Sized>(
    x: &RasterImage,
    ranges: &AugmentationRanges,
    rng: &mut R,
) -> (RasterImage, AugmentationIntensity) {
    let phi = ranges.sample(rng);
    (apply(x, &phi), phi)
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn test_image() -> RasterImage {
        let mut img = RasterImage::filled(16, 16, [0.1, 0.2, 0.3]);
        for y in 5..9 {
            for x in 6..11 {
                img.set_pixel(y, x, [0.9, 0.4, 0.2]);
            }
        }
        img
    }

    #[test]
    fn jitter_neutral_is_identity() {
        let img = test_image();
        assert_eq!(color_jitter(&img, &ColorJitter::NEUTRAL), img);
    }

    #[test]
    fn brightness_zero_blacks_out() {
        let p = ColorJitter {
            brightness: 0.0,
            ..ColorJitter::NEUTRAL
        };
        let out = color_jitter(&test_image(), &p);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn brightness_on_mid_gray() {
        let img = RasterImage::filled(4, 4, [0.5; 3]);
        let p = ColorJitter {
            brightness: 1.2,
            ..ColorJitter::NEUTRAL
        };
        let out = color_jitter(&img, &p);
        for &v in out.data() {
            assert!((v - 0.5 * 1.2).abs() < 1e-12);
        }
    }

    #[test]
    fn hue_full_turn_and_gray_fixed() {
        let img = test_image();
        let p = ColorJitter {
            hue: 1.0 / 3.0,
            ..ColorJitter::NEUTRAL
        };
        // a third of a turn maps pure red to pure green
        let red = RasterImage::filled(1, 1, [1.0, 0.0, 0.0]);
        let g = color_jitter(&red, &p);
        assert!((g.get(1, 0, 0) - 1.0).abs() < 1e-12 && g.get(0, 0, 0).abs() < 1e-12);
        let gray = RasterImage::filled(2, 2, [0.4; 3]);
        assert!(color_jitter(&gray, &p).data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(color_jitter(&img, &p).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_constant_image() {
        let img = RasterImage::filled(9, 7, [0.3, 0.6, 0.9]);
        let out = gaussian_blur(&img, 1.3);
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    fn dense_blur_oracle(x: &RasterImage, sigma: f64) -> RasterImage {
        let r = (3.0 * sigma).ceil() as isize;
        let mut taps = Vec::new();
        for i in -r..=r {
            taps.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
        }
        let norm: f64 = taps.iter().sum();
        let (h, w) = (x.height(), x.width());
        let mut out = x.clone();
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let sy = reflect(y as isize + dy, h);
                            let sx = reflect(xx as isize + dx, w);
                            let k = taps[(dy + r) as usize] * taps[(dx + r) as usize] / (norm * norm);
                            acc += k * x.get(c, sy, sx);
                        }
                    }
                    out.set(c, y, xx, acc);
                }
            }
        }
        out
    }

    #[test]
    fn blur_single_pixel_matches_dense_oracle() {
        let mut img = RasterImage::filled(11, 11, [0.0; 3]);
        img.set_pixel(5, 5, [1.0; 3]);
        let out = gaussian_blur(&img, 1.0);
        let oracle = dense_blur_oracle(&img, 1.0);
        assert!(out.data().iter().zip(oracle.data()).all(|(a, b)| (a - b).abs() < 1e-9));
        let k = gaussian_kernel(1.0);
        let center = k[k.len() / 2];
        assert!((out.get(0, 5, 5) - center * center).abs() < 1e-9);

        // and on a random image near the borders
        let mut rng = stream(3, &[]);
        let data = (0..3 * 8 * 9).map(|_| rng.random::<f64>()).collect();
        let img = RasterImage::new(8, 9, data).unwrap();
        let out = gaussian_blur(&img, 0.7);
        let oracle = dense_blur_oracle(&img, 0.7);
        assert!(out.data().iter().zip(oracle.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn blur_preserves_mean_with_constant_border() {
        let img = test_image();
        let out = gaussian_blur(&img, 0.8);
        assert!((img.mean() - out.mean()).abs() < 1e-6);
    }

    #[test]
    fn grayscale_examples() {
        let img = test_image();
        assert_eq!(grayscale(&img, 0.0), img);
        let red = RasterImage::filled(1, 1, [1.0, 0.0, 0.0]);
        let g = grayscale(&red, 1.0);
        for c in 0..3 {
            assert!((g.get(c, 0, 0) - 0.299).abs() < 1e-12);
        }
        let gray = RasterImage::filled(3, 3, [0.25; 3]);
        let g = grayscale(&gray, 0.37);
        assert!(g.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn neutral_ranges_identity() {
        let img = test_image();
        let (out, phi) = simulate_target(&img, &AugmentationRanges::neutral(), &mut stream(1, &[]));
        assert_eq!(out, img);
        assert_eq!(phi.jitter, ColorJitter::NEUTRAL);
    }

    #[test]
    fn seeded_simulation_is_deterministic_and_composes() {
        let img = test_image();
        let ranges = AugmentationRanges::default();
        let (a, phi) = simulate_target(&img, &ranges, &mut stream(7, &[]));
        let (b, _) = simulate_target(&img, &ranges, &mut stream(7, &[]));
        assert_eq!(a, b);
        let manual = grayscale(&gaussian_blur(&color_jitter(&img, &phi.jitter), phi.sigma), phi.blend);
        assert_eq!(a, manual);
        assert!(phi.sigma >= 0.1 && phi.sigma <= 2.0);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn sampled_intensities_in_range() {
        let ranges = AugmentationRanges::default();
        let mut rng = stream(11, &[]);
        for _ in 0..200 {
            let p = ranges.sample(&mut rng);
            for f in [p.jitter.brightness, p.jitter.contrast, p.jitter.saturation] {
                assert!((0.6..=1.4).contains(&f));
            }
            assert!(p.jitter.hue.abs() <= 0.1);
            assert!((0.0..=1.0).contains(&p.blend));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        let r = AugmentationRanges {
            blend: (0.5, 1.5),
            ..Default::default()
        };
        assert!(r.validate().is_err());
        assert!(AugmentationRanges::default().validate().is_ok());
    }
}
