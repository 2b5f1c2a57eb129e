//! Procedural shapes rendered in distinct visual styles.
//!
//! Shapes are drawn from signed distance fields with equal nominal area,
//! so neither the amount of foreground nor the amount of outline ink tells
//! classes apart. Every style draws its colors independently of the class.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sre_core::image::{RasterImage, LUMA};
use sre_core::rng::{self, tag};
use sre_core::{Error, Result};

pub const CLASS_NAMES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    pub fn from_name(name: &str) -> Option<Self> {
        CLASS_NAMES.iter().position(|&n| n == name).map(|i| Self::ALL[i])
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }

    /// Perimeter divided by √area, used to equalize outline ink.
    fn perimeter_factor(self) -> f64 {
        match self {
            Shape::Circle => 2.0 * std::f64::consts::PI.sqrt(),
            Shape::Square => 4.0,
            Shape::Triangle => 3.0 * (4.0 / 3f64.sqrt()).sqrt(),
            Shape::Cross => 12.0 / 5f64.sqrt(),
            // both boundaries of the annulus count
            Shape::Ring => {
                let k = RING_INNER;
                2.0 * std::f64::consts::PI * (1.0 + k) / (std::f64::consts::PI * (1.0 - k * k)).sqrt()
            }
        }
    }

    /// Signed distance in pixels from `(x, y)`, relative to the shape
    /// centre and already rotated, for a shape of area `area`.
    fn sdf(self, x: f64, y: f64, area: f64) -> f64 {
        match self {
            Shape::Circle => (x * x + y * y).sqrt() - (area / std::f64::consts::PI).sqrt(),
            Shape::Square => {
                let h = area.sqrt() / 2.0;
                sd_box(x, y, h, h)
            }
            Shape::Triangle => {
                let a = (4.0 * area / 3f64.sqrt()).sqrt();
                sd_triangle(x, y, a)
            }
            Shape::Cross => {
                let t = (area / 5.0).sqrt();
                sd_box(x, y, 1.5 * t, 0.5 * t).min(sd_box(x, y, 0.5 * t, 1.5 * t))
            }
            Shape::Ring => {
                let r_out = (area / (std::f64::consts::PI * (1.0 - RING_INNER * RING_INNER))).sqrt();
                let r_in = RING_INNER * r_out;
                ((x * x + y * y).sqrt() - (r_out + r_in) / 2.0).abs() - (r_out - r_in) / 2.0
            }
        }
    }
}

const RING_INNER: f64 = 0.55;
/// Largest rotation away from upright, in radians.
const MAX_TILT: f64 = 0.35;

fn sd_box(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let dx = x.abs() - hx;
    let dy = y.abs() - hy;
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    outside + dx.max(dy).min(0.0)
}

/// Equilateral triangle of side `a` centred on its centroid.
fn sd_triangle(x: f64, y: f64, a: f64) -> f64 {
    let k = 3f64.sqrt();
    let r = a / 2.0;
    // shift so the centroid sits at the origin
    let mut px = x.abs() - r;
    let mut py = -y + r / k;
    if px + k * py > 0.0 {
        let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
        px = nx;
        py = ny;
    }
    px -= px.clamp(-2.0 * r, 0.0);
    -(px * px + py * py).sqrt() * py.signum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Flat,
    Stripes,
    Noise,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ink {
    /// Filled shape.
    Fill,
    /// Filled shape with a dark outline.
    FillOutline,
    /// Outline only.
    Outline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    /// Background colors are drawn between these two corners.
    pub background: [[f64; 3]; 2],
    /// Foreground colors are drawn between these two corners.
    pub foreground: [[f64; 3]; 2],
    pub texture: Texture,
    pub ink: Ink,
    pub tint: [f64; 3],
    /// Scales deviations from mid-gray.
    pub contrast: f64,
    pub grayscale: bool,
}

impl DomainStyle {
    fn distinct_fields(&self, other: &Self) -> usize {
        [
            self.background != other.background,
            self.foreground != other.foreground,
            self.texture != other.texture,
            self.ink != other.ink,
            self.tint != other.tint,
            self.contrast != other.contrast,
            self.grayscale != other.grayscale,
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

fn style(
    name: &str,
    background: [[f64; 3]; 2],
    foreground: [[f64; 3]; 2],
    texture: Texture,
    ink: Ink,
    tint: [f64; 3],
    contrast: f64,
    grayscale: bool,
) -> DomainStyle {
    DomainStyle {
        name: name.into(),
        background,
        foreground,
        texture,
        ink,
        tint,
        contrast,
        grayscale,
    }
}

/// The four benchmark domains.
pub fn benchmark_styles() -> Vec<DomainStyle> {
    vec![
        style(
            "photo",
            [[0.25, 0.3, 0.2], [0.65, 0.6, 0.5]],
            [[0.1, 0.1, 0.1], [0.9, 0.9, 0.9]],
            Texture::Noise,
            Ink::Fill,
            [1.0, 1.0, 1.0],
            1.0,
            false,
        ),
        style(
            "art",
            [[0.5, 0.3, 0.2], [0.9, 0.7, 0.5]],
            [[0.1, 0.2, 0.4], [0.6, 0.8, 1.0]],
            Texture::Stripes,
            Ink::Fill,
            [1.0, 0.85, 0.7],
            0.8,
            false,
        ),
        style(
            "cartoon",
            [[0.7, 0.7, 0.3], [1.0, 1.0, 1.0]],
            [[0.0, 0.3, 0.0], [1.0, 0.6, 1.0]],
            Texture::Flat,
            Ink::FillOutline,
            [1.0, 1.0, 1.0],
            1.2,
            false,
        ),
        style(
            "sketch",
            [[0.95, 0.95, 0.95], [1.0, 1.0, 1.0]],
            [[0.05, 0.05, 0.05], [0.3, 0.3, 0.3]],
            Texture::Flat,
            Ink::Outline,
            [1.0, 1.0, 1.0],
            1.0,
            true,
        ),
    ]
}

/// Styles used only for contrastive pretraining, disjoint from the
/// benchmark domains.
pub fn pretrain_styles() -> Vec<DomainStyle> {
    vec![
        style(
            "mosaic",
            [[0.2, 0.2, 0.5], [0.6, 0.5, 0.9]],
            [[0.5, 0.5, 0.0], [1.0, 1.0, 0.6]],
            Texture::Gradient,
            Ink::Fill,
            [1.0, 1.0, 1.0],
            1.0,
            false,
        ),
        style(
            "night",
            [[0.0, 0.0, 0.05], [0.2, 0.15, 0.3]],
            [[0.5, 0.6, 0.6], [1.0, 1.0, 1.0]],
            Texture::Noise,
            Ink::Fill,
            [0.9, 0.95, 1.1],
            1.1,
            false,
        ),
        style(
            "blueprint",
            [[0.05, 0.15, 0.45], [0.15, 0.3, 0.6]],
            [[0.8, 0.85, 0.9], [1.0, 1.0, 1.0]],
            Texture::Stripes,
            Ink::Outline,
            [1.0, 1.0, 1.0],
            0.9,
            false,
        ),
    ]
}

/// A style with every field drawn at random, used to diversify the
/// pretraining corpus. Palettes are narrow ranges around random centres.
pub fn random_style<R: Rng + ?Sized>(rng: &mut R) -> DomainStyle {
    let palette = |rng: &mut R| {
        let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let w: f64 = rng.random_range(0.05..0.3);
        [c.map(|v| (v - w).max(0.0)), c.map(|v| (v + w).min(1.0))]
    };
    let background = palette(rng);
    let foreground = palette(rng);
    let texture = [Texture::Flat, Texture::Stripes, Texture::Noise, Texture::Gradient][rng.random_range(0..4)];
    let ink = [Ink::Fill, Ink::FillOutline, Ink::Outline][rng.random_range(0..3)];
    let tint = [(); 3].map(|_| rng.random_range(0.8..1.2));
    DomainStyle {
        name: "random".into(),
        background,
        foreground,
        texture,
        ink,
        tint,
        contrast: rng.random_range(0.7..1.3),
        grayscale: rng.random_bool(0.2),
    }
}

/// Geometry of one rendered shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub angle: f64,
    pub area: f64,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: [f64; 3]) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t[0],
        a[1] + (b[1] - a[1]) * t[1],
        a[2] + (b[2] - a[2]) * t[2],
    ]
}

fn draw_color<R: Rng + ?Sized>(range: &[[f64; 3]; 2], rng: &mut R) -> [f64; 3] {
    lerp3(range[0], range[1], [rng.random(), rng.random(), rng.random()])
}

/// Renders `shape` in `style`. All randomness comes from `rng`.
pub fn render<R: Rng + ?Sized>(shape: Shape, style: &DomainStyle, size: usize, rng: &mut R) -> (RasterImage, Placement) {
    let s = size as f64;
    let base_area = 0.16 * s * s;
    let placement = Placement {
        cx: s / 2.0 + rng.random_range(-0.12..0.12) * s,
        cy: s / 2.0 + rng.random_range(-0.12..0.12) * s,
        angle: rng.random_range(-MAX_TILT..MAX_TILT),
        area: base_area * rng.random_range(0.6..1.4),
    };
    let bg = draw_color(&style.background, rng);
    let bg2 = draw_color(&style.background, rng);
    let fg = draw_color(&style.foreground, rng);
    let outline = [0.08, 0.08, 0.08];
    let stripe_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let stripe_period: f64 = rng.random_range(3.0..7.0);
    let grad_angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let stroke = 0.5 * placement.area.sqrt() / shape.perimeter_factor();
    let (sin, cos) = placement.angle.sin_cos();

    let mut img = RasterImage::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let background = match style.texture {
                Texture::Flat => bg,
                Texture::Stripes => {
                    let u = px * stripe_angle.cos() + py * stripe_angle.sin();
                    if (u / stripe_period).floor() as i64 % 2 == 0 {
                        bg
                    } else {
                        bg2
                    }
                }
                Texture::Noise => {
                    let n: f64 = rng.random_range(-0.15..0.15);
                    [bg[0] + n, bg[1] + n, bg[2] + n]
                }
                Texture::Gradient => {
                    let t = ((px - s / 2.0) * grad_angle.cos() + (py - s / 2.0) * grad_angle.sin()) / s + 0.5;
                    let t = t.clamp(0.0, 1.0);
                    lerp3(bg, bg2, [t; 3])
                }
            };
            let (dx, dy) = (px - placement.cx, py - placement.cy);
            let (lx, ly) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let d = shape.sdf(lx, ly, placement.area);
            let fill = (0.5 - d).clamp(0.0, 1.0);
            let line = (stroke / 2.0 + 0.5 - d.abs()).clamp(0.0, 1.0);
            let mut c = background;
            match style.ink {
                Ink::Fill => c = mix(c, fg, fill),
                Ink::FillOutline => {
                    c = mix(c, fg, fill);
                    c = mix(c, outline, line);
                }
                Ink::Outline => c = mix(c, fg, line),
            }
            let mut c = [
                (c[0] * style.tint[0] - 0.5) * style.contrast + 0.5,
                (c[1] * style.tint[1] - 0.5) * style.contrast + 0.5,
                (c[2] * style.tint[2] - 0.5) * style.contrast + 0.5,
            ];
            if style.grayscale {
                let l = LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2];
                c = [l; 3];
            }
            img.set_pixel(y, x, c.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    (img, placement)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<String>,
    pub domains: Vec<DomainStyle>,
    pub per_cell: usize,
    pub image_size: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            domains: benchmark_styles(),
            per_cell: 100,
            image_size: 32,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.domains.len() < 2 {
            return Err(Error::Config("need at least two domains".into()));
        }
        if self.per_cell == 0 || self.image_size == 0 {
            return Err(Error::Config("per_cell and image_size must be positive".into()));
        }
        for c in &self.classes {
            if Shape::from_name(c).is_none() {
                return Err(Error::Config(format!("unknown shape class {c:?}")));
            }
        }
        for (i, a) in self.domains.iter().enumerate() {
            for b in &self.domains[i + 1..] {
                if a.name == b.name || a.distinct_fields(b) < 2 {
                    return Err(Error::Config(format!("styles {} and {} are too similar", a.name, b.name)));
                }
            }
        }
        Ok(())
    }
}

/// One generated image before it is written anywhere.
#[derive(Clone, Debug)]
pub struct Generated {
    pub domain: usize,
    pub label: usize,
    pub index: usize,
    pub image: RasterImage,
}

/// Renders every cell deterministically; each image has its own stream.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Vec<Generated>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.domains.len() * spec.classes.len() * spec.per_cell);
    for (d, st) in spec.domains.iter().enumerate() {
        for (c, name) in spec.classes.iter().enumerate() {
            let shape = Shape::from_name(name).expect("validated");
            for i in 0..spec.per_cell {
                let mut r = rng::stream(seed, &[tag::DATA, d as u64, c as u64, i as u64]);
                let (image, _) = render(shape, st, spec.image_size, &mut r);
                out.push(Generated {
                    domain: d,
                    label: c,
                    index: i,
                    image,
                });
            }
        }
    }
    Ok(out)
}
