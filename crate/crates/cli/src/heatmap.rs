//! PNG export of coverage grids.

use std::path::Path;

use image::{Rgb, RgbImage};
use radiomap_core::raytrace::CoverageGrid;
use radiomap_core::scene::Scene;

use crate::CliError;

pub const BUILDING_RGB: [u8; 3] = [128, 0, 160];
pub const TRANSMITTER_RGB: [u8; 3] = [30, 90, 255];

const STOPS: [[f32; 3]; 5] = [
    [13.0, 8.0, 135.0],
    [126.0, 3.0, 168.0],
    [204.0, 71.0, 120.0],
    [248.0, 149.0, 64.0],
    [240.0, 249.0, 33.0],
];

/// Colour for `t` in `[0, 1]`; values outside are clamped.
pub fn ramp(t: f32) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f32;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + (STOPS[i + 1][c] - STOPS[i][c]) * f).round() as u8;
    }
    out
}

/// Each cell becomes a `scale x scale` block; buildings and transmitters
/// from `scene` are drawn over the heatmap.
pub fn render(grid: &CoverageGrid, floor_dbm: f64, ceil_dbm: f64, scene: Option<&Scene>, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    let span = (ceil_dbm - floor_dbm).max(f64::EPSILON);
    let mut img = RgbImage::new(grid.width as u32 * scale, grid.height as u32 * scale);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let mut px = ramp(((grid.at(x, y) as f64 - floor_dbm) / span) as f32);
            if let Some(s) = scene {
                if s.region().is_building(x, y) {
                    px = BUILDING_RGB;
                }
                if s.transmitters().iter().any(|t| t.x == x && t.y == y) {
                    px = TRANSMITTER_RGB;
                }
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(x as u32 * scale + dx, y as u32 * scale + dy, Rgb(px));
                }
            }
        }
    }
    img
}

pub fn save_png(
    grid: &CoverageGrid,
    floor_dbm: f64,
    ceil_dbm: f64,
    scene: Option<&Scene>,
    path: impl AsRef<Path>,
) -> Result<(), CliError> {
    let scale = (512 / grid.width.max(grid.height).max(1)).clamp(1, 16) as u32;
    render(grid, floor_dbm, ceil_dbm, scene, scale).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_clamping() {
        assert_eq!(ramp(0.0), [13, 8, 135]);
        assert_eq!(ramp(1.0), [240, 249, 33]);
        assert_eq!(ramp(-3.0), ramp(0.0));
        assert_eq!(ramp(7.0), ramp(1.0));
        assert_eq!(ramp(f32::NAN), ramp(0.0));
    }

    #[test]
    fn render_scales_and_overlays() {
        let grid = CoverageGrid::new(2, 1, vec![-100.0, 0.0]).unwrap();
        let img = render(&grid, -100.0, 0.0, None, 3);
        assert_eq!(img.dimensions(), (6, 3));
        assert_eq!(img.get_pixel(0, 0).0, ramp(0.0));
        assert_eq!(img.get_pixel(5, 2).0, ramp(1.0));
    }
}
