//! Refined-attention heatmaps: patch grid → bilinear upsample → PGM plus
//! an RGB overlay and a small JSON sidecar.

use std::path::{Path, PathBuf};

use serde::Serialize;

use sre_core::image::{to_u8, GrayImage, RasterImage};
use sre_core::{Error, Result};

/// Spread below which a map counts as constant.
const FLAT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sidecar {
    pub degenerate: bool,
    pub grid: usize,
    /// Range of the patch entries before normalization.
    pub min: f64,
    pub max: f64,
    pub class: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Heatmap {
    pub gray: GrayImage,
    pub overlay: RasterImage,
    pub sidecar: Sidecar,
}

/// Patch entries of a full attention row (class token first), row-major.
pub fn patch_grid(attention: &[f64], grid: usize) -> Result<Vec<f64>> {
    if attention.len() != 1 + grid * grid {
        return Err(Error::Input(format!(
            "attention has {} entries, expected {} for a {grid}×{grid} grid",
            attention.len(),
            1 + grid * grid
        )));
    }
    Ok(attention[1..].to_vec())
}

/// Bilinear upsampling with samples at patch centres and clamped edges.
pub fn upsample(grid_values: &[f64], grid: usize, size: usize) -> Vec<f64> {
    let scale = grid as f64 / size as f64;
    let coord = |i: usize| {
        let g = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = g.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        (lo, hi, g - lo as f64)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, ty) = coord(y);
        for x in 0..size {
            let (x0, x1, tx) = coord(x);
            let at = |gy: usize, gx: usize| grid_values[gy * grid + gx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Builds the heatmap of `attention` for `image`.
pub fn render(image: &RasterImage, attention: &[f64], grid: usize, class: Option<String>) -> Result<Heatmap> {
    if image.height() != image.width() {
        return Err(Error::Input("heatmaps need square images".into()));
    }
    let size = image.height();
    let cells = patch_grid(attention, grid)?;
    if cells.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention map"));
    }
    let min = cells.iter().copied().fold(f64::INFINITY, f64::min);
    let max = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = max - min < FLAT;
    let values: Vec<f64> = if degenerate {
        vec![0.5; size * size]
    } else {
        let up = upsample(&cells, grid, size);
        let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        up.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    let gray = GrayImage {
        height: size,
        width: size,
        data: values.iter().map(|&v| to_u8(v)).collect(),
    };
    let mut overlay = image.clone();
    for y in 0..size {
        for x in 0..size {
            let h = values[y * size + x];
            let heat = [h, 0.2, 1.0 - h];
            let p = image.pixel(y, x);
            overlay.set_pixel(y, x, [0, 1, 2].map(|c| 0.5 * p[c] + 0.5 * heat[c]));
        }
    }
    Ok(Heatmap {
        gray,
        overlay,
        sidecar: Sidecar {
            degenerate,
            grid,
            min,
            max,
            class,
        },
    })
}

/// Paths written next to `out`: the PGM itself, `.overlay.ppm` and `.json`.
pub fn output_paths(out: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = out.with_extension("");
    let name = |suffix: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(suffix);
        PathBuf::from(s)
    };
    (out.to_path_buf(), name(".overlay.ppm"), name(".json"))
}

pub fn write(h: &Heatmap, out: &Path) -> Result<()> {
    let (pgm, ppm, json) = output_paths(out);
    if let Some(dir) = pgm.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    h.gray.write_pgm(&pgm)?;
    h.overlay.write_ppm(&ppm)?;
    std::fs::write(json, serde_json::to_string_pretty(&h.sidecar).expect("plain data"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_map_is_degenerate_mid_gray() {
        let img = RasterImage::filled(8, 8, [0.3; 3]);
        let h = render(&img, &[0.2; 5], 2, None).unwrap();
        assert!(h.sidecar.degenerate);
        assert!(h.gray.data.iter().all(|&v| v == 128));
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(patch_grid(&[0.0; 4], 2).is_err());
    }

    #[test]
    fn output_names() {
        let (a, b, c) = output_paths(Path::new("out/heat.pgm"));
        assert_eq!(a, Path::new("out/heat.pgm"));
        assert_eq!(b, Path::new("out/heat.overlay.ppm"));
        assert_eq!(c, Path::new("out/heat.json"));
    }
}
