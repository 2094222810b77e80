//! Deterministic 2D ray launching over a building grid.
//!
//! Rays leave each transmitter at evenly spaced angles and march cell by cell
//! (DDA). A ray entering a building cell is reflected specularly about the
//! struck face; the mirrored transmitter position (image source) is tracked so
//! that the unfolded path length to any cell is its distance from the image.
//! Every free cell a ray visits receives a candidate power from the free-space
//! path loss at that distance minus a fixed loss per bounce. Cells keep their
//! strongest candidate; transmitters add in linear power.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use radiomap_nn::exec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Scene, Transmitter};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;
pub const DEFAULT_FREQUENCY_HZ: f64 = 2.4e9;
pub const DEFAULT_FLOOR_DBM: f64 = -100.0;
pub const DEFAULT_REFLECTIONS: usize = 6;
pub const RAYS_AT_256: usize = 4096;

/// Rays per work item; fixed so results do not depend on the thread count.
const RAY_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub ray_count: usize,
    pub max_reflections: usize,
    pub frequency_hz: f64,
    pub receiver_floor_dbm: f64,
    pub max_path_length_m: f64,
    pub reflection_loss_db: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            ray_count: RAYS_AT_256,
            max_reflections: DEFAULT_REFLECTIONS,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
            receiver_floor_dbm: DEFAULT_FLOOR_DBM,
            max_path_length_m: 512.0,
            reflection_loss_db: 3.0,
        }
    }
}

impl PropagationConfig {
    /// Defaults with the ray count scaled to the grid perimeter
    /// (4096 rays for 256x256) and the path budget to `width + height` cells.
    pub fn for_grid(width: usize, height: usize, cell_size_m: f64) -> Self {
        PropagationConfig {
            ray_count: (RAYS_AT_256 * (width + height) / 512).max(360),
            max_path_length_m: (width + height) as f64 * cell_size_m,
            ..PropagationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ray_count < 8 {
            return Err(Error::Config(format!("ray_count must be >= 8, got {}", self.ray_count)));
        }
        if !(self.frequency_hz.is_finite() && self.frequency_hz > 0.0) {
            return Err(Error::Config("frequency_hz must be positive".into()));
        }
        if !(self.max_path_length_m.is_finite() && self.max_path_length_m > 0.0) {
            return Err(Error::Config("max_path_length_m must be positive".into()));
        }
        if !self.receiver_floor_dbm.is_finite() || !self.reflection_loss_db.is_finite() || self.reflection_loss_db < 0.0 {
            return Err(Error::Config("floor and reflection loss must be finite, loss >= 0".into()));
        }
        Ok(())
    }

    /// Free-space path loss in dB at `distance_m`.
    pub fn path_loss_db(&self, distance_m: f64) -> f64 {
        20.0 * (4.0 * std::f64::consts::PI * distance_m * self.frequency_hz / SPEED_OF_LIGHT).log10()
    }
}

/// Received power per cell in dBm, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CoverageGrid {
    pub width: usize,
    pub height: usize,
    pub power_dbm: Vec<f32>,
}

impl CoverageGrid {
    pub fn new(width: usize, height: usize, power_dbm: Vec<f32>) -> Result<Self> {
        if power_dbm.len() != width * height {
            return Err(Error::Mismatch(format!(
                "coverage {width}x{height} needs {} values, got {}",
                width * height,
                power_dbm.len()
            )));
        }
        Ok(CoverageGrid {
            width,
            height,
            power_dbm,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.power_dbm[y * self.width + x]
    }
}

/// Unreached cells hold `NEG_INFINITY`.
fn trace_transmitter(scene: &Scene, tx: &Transmitter, cfg: &PropagationConfig) -> Vec<f64> {
    let region = scene.region();
    let (w, h) = (region.width(), region.height());
    let cell = region.cell_size_m();
    let min_d = 0.5 * cell;
    let chunks = cfg.ray_count.div_ceil(RAY_CHUNK);
    let partials = exec::map_indexed(chunks, |ci| {
        let mut best = vec![f64::NEG_INFINITY; w * h];
        let mut record = |cx: usize, cy: usize, img: (f64, f64), bounces: usize| {
            let dx = cx as f64 + 0.5 - img.0;
            let dy = cy as f64 + 0.5 - img.1;
            let d = ((dx * dx + dy * dy).sqrt() * cell).max(min_d);
            let p = tx.power_dbm - cfg.path_loss_db(d) - cfg.reflection_loss_db * bounces as f64;
            let slot = &mut best[cy * w + cx];
            if p > *slot {
                *slot = p;
            }
        };
        for ray in ci * RAY_CHUNK..((ci + 1) * RAY_CHUNK).min(cfg.ray_count) {
            let theta = 2.0 * std::f64::consts::PI * ray as f64 / cfg.ray_count as f64;
            march(region, tx, theta, cfg, &mut record);
        }
        best
    });
    let mut best = vec![f64::NEG_INFINITY; w * h];
    for part in partials {
        for (b, p) in best.iter_mut().zip(part) {
            if p > *b {
                *b = p;
            }
        }
    }
    best
}

/// Follows one ray, calling `record(cx, cy, image_source, bounces)` for each
/// free cell visited (including the starting cell).
fn march(
    region: &crate::scene::RegionMap,
    tx: &Transmitter,
    theta: f64,
    cfg: &PropagationConfig,
    record: &mut impl FnMut(usize, usize, (f64, f64), usize),
) {
    let (w, h) = (region.width() as i64, region.height() as i64);
    let budget = cfg.max_path_length_m / region.cell_size_m();
    let (mut cx, mut cy) = (tx.x as i64, tx.y as i64);
    let (mut px, mut py) = (cx as f64 + 0.5, cy as f64 + 0.5);
    let mut img = (px, py);
    let (mut dx, mut dy) = (theta.cos(), theta.sin());
    // Snap near-axis components so rays along rows/columns stay exact.
    if dx.abs() < 1e-12 {
        dx = 0.0;
    }
    if dy.abs() < 1e-12 {
        dy = 0.0;
    }
    let mut travelled = 0.0;
    let mut bounces = 0usize;
    record(cx as usize, cy as usize, img, 0);
    loop {
        let tx_cross = if dx > 0.0 {
            ((cx + 1) as f64 - px) / dx
        } else if dx < 0.0 {
            (cx as f64 - px) / dx
        } else {
            f64::INFINITY
        };
        let ty_cross = if dy > 0.0 {
            ((cy + 1) as f64 - py) / dy
        } else if dy < 0.0 {
            (cy as f64 - py) / dy
        } else {
            f64::INFINITY
        };
        let step_x = tx_cross <= ty_cross;
        let t = if step_x { tx_cross } else { ty_cross }.max(0.0);
        travelled += t;
        if travelled > budget {
            return;
        }
        let (nx, ny);
        if step_x {
            let face = if dx > 0.0 { cx + 1 } else { cx };
            px = face as f64;
            py += dy * t;
            nx = cx + dx.signum() as i64;
            ny = cy;
        } else {
            let face = if dy > 0.0 { cy + 1 } else { cy };
            py = face as f64;
            px += dx * t;
            nx = cx;
            ny = cy + dy.signum() as i64;
        }
        if nx < 0 || ny < 0 || nx >= w || ny >= h {
            return;
        }
        if region.is_building(nx as usize, ny as usize) {
            if bounces >= cfg.max_reflections {
                return;
            }
            bounces += 1;
            if step_x {
                dx = -dx;
                img.0 = 2.0 * px - img.0;
            } else {
                dy = -dy;
                img.1 = 2.0 * py - img.1;
            }
            continue;
        }
        cx = nx;
        cy = ny;
        record(cx as usize, cy as usize, img, bounces);
    }
}

/// Coverage of every cell of `scene`.
pub fn simulate(scene: &Scene, cfg: &PropagationConfig) -> Result<CoverageGrid> {
    cfg.validate()?;
    let region = scene.region();
    for (i, t) in scene.transmitters().iter().enumerate() {
        if region.is_building(t.x, t.y) {
            return Err(Error::InvalidScene(format!("transmitter {i} on a building cell at ({}, {})", t.x, t.y)));
        }
    }
    let per_tx: Vec<Vec<f64>> = scene
        .transmitters()
        .iter()
        .map(|t| trace_transmitter(scene, t, cfg))
        .collect();
    let floor = cfg.receiver_floor_dbm;
    let n = region.width() * region.height();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let strongest = per_tx.iter().map(|g| g[i]).fold(f64::NEG_INFINITY, f64::max);
        let v = if region.occupancy()[i] || strongest == f64::NEG_INFINITY {
            floor
        } else if per_tx.len() == 1 {
            strongest
        } else {
            let mw: f64 = per_tx.iter().map(|g| 10f64.powf(g[i] / 10.0)).sum();
            (10.0 * mw.log10()).max(strongest)
        };
        out.push(v.max(floor) as f32);
    }
    CoverageGrid::new(region.width(), region.height(), out)
}

pub const RCOV_MAGIC: &[u8; 4] = b"RCOV";
pub const RCOV_VERSION: u16 = 1;
pub const RCOV_HEADER_LEN: usize = 16;

pub fn write_coverage<W: Write>(grid: &CoverageGrid, mut out: W) -> Result<()> {
    let w = u32::try_from(grid.width).map_err(|_| Error::Format("width exceeds u32".into()))?;
    let h = u32::try_from(grid.height).map_err(|_| Error::Format("height exceeds u32".into()))?;
    out.write_all(RCOV_MAGIC)?;
    out.write_all(&RCOV_VERSION.to_le_bytes())?;
    out.write_all(&0u16.to_le_bytes())?;
    out.write_all(&w.to_le_bytes())?;
    out.write_all(&h.to_le_bytes())?;
    for v in &grid.power_dbm {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_coverage<R: Read>(mut input: R) -> Result<CoverageGrid> {
    let mut header = [0u8; RCOV_HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated RCOV header".into()))?;
    if &header[0..4] != RCOV_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"RCOV\"", String::from_utf8_lossy(&header[0..4]))));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != RCOV_VERSION {
        return Err(Error::Format(format!("unsupported RCOV version {version}")));
    }
    let w = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
    let bytes = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("dimension overflow: {w}x{h}")))?;
    let mut payload = Vec::new();
    input.take(bytes as u64 + 1).read_to_end(&mut payload)?;
    if payload.len() < bytes {
        return Err(Error::Format(format!(
            "truncated payload: {w}x{h} needs {bytes} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > bytes {
        return Err(Error::Format("trailing bytes after RCOV payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    CoverageGrid::new(w, h, data)
}

pub fn save_coverage(grid: &CoverageGrid, path: impl AsRef<Path>) -> Result<()> {
    write_coverage(grid, BufWriter::new(File::create(path)?))
}

pub fn load_coverage(path: impl AsRef<Path>) -> Result<CoverageGrid> {
    read_coverage(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::RegionMap;

    #[test]
    fn config_validation() {
        let mut c = PropagationConfig::default();
        c.ray_count = 4;
        assert!(c.validate().is_err());
        assert_eq!(PropagationConfig::for_grid(256, 256, 1.0).ray_count, 4096);
    }

    #[test]
    fn tx_cell_is_the_maximum() {
        let scene = Scene::new(RegionMap::empty(16, 16), vec![Transmitter::new(8, 8)], "t").unwrap();
        let g = simulate(&scene, &PropagationConfig::for_grid(16, 16, 1.0)).unwrap();
        let max = g.power_dbm.iter().cloned().fold(f32::MIN, f32::max);
        assert_eq!(g.at(8, 8), max);
    }

    #[test]
    fn rcov_rejects_bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        write_coverage(&CoverageGrid::new(2, 2, vec![0.0; 4]).unwrap(), &mut bytes).unwrap();
        assert_eq!(bytes.len(), 32);
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_coverage(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_coverage(&bytes[..30]), Err(Error::Format(_))));
    }
}
