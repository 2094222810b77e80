//! Frame extraction, normalisation, input encoding, region split and the
//! dataset file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use radiomap_nn::{exec, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raytrace::CoverageGrid;
use crate::scene::{RegionMap, Scene};

pub const DEFAULT_FLOOR_DBM: f64 = -100.0;
pub const DEFAULT_STRIDE: usize = 3;
pub const DEFAULT_EDGE_PADDING: usize = 5;
pub const DEFAULT_BOUNDARY: usize = 60;
pub const DEFAULT_GAP: usize = 20;
pub const REFERENCE_WIDTH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub floor_dbm: f64,
    pub ceil_dbm: f64,
}

impl NormalizationSpec {
    pub fn new(floor_dbm: f64, ceil_dbm: f64) -> Result<Self> {
        if !(floor_dbm.is_finite() && ceil_dbm.is_finite() && ceil_dbm > floor_dbm) {
            return Err(Error::Config(format!(
                "normalization needs finite ceil > floor, got floor {floor_dbm} ceil {ceil_dbm}"
            )));
        }
        Ok(NormalizationSpec { floor_dbm, ceil_dbm })
    }

    pub fn span(&self) -> f64 {
        self.ceil_dbm - self.floor_dbm
    }

    /// Maps dBm to `[0, 1]`; the flag reports clamping above the ceiling.
    pub fn normalize(&self, dbm: f64) -> (f64, bool) {
        let v = (dbm.max(self.floor_dbm) - self.floor_dbm) / self.span();
        if v > 1.0 {
            (1.0, true)
        } else {
            (v, false)
        }
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        self.floor_dbm + v * self.span()
    }

    /// Normalises a dBm slice, returning the values and the saturated count.
    pub fn normalize_all(&self, dbm: &[f32]) -> (Vec<f32>, usize) {
        let mut saturated = 0;
        let vals = dbm
            .iter()
            .map(|&d| {
                let (v, s) = self.normalize(d as f64);
                saturated += s as usize;
                v as f32
            })
            .collect();
        (vals, saturated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingScheme {
    /// One channel: building 1, transmitter 2.
    Combined,
    /// Building mask and transmitter one-hot.
    TwoBinary,
    /// Building mask and distance to the nearest transmitter over the window diagonal.
    Euclidean,
    /// Building mask and `1 / (1 + d^2)` with `d` in cells.
    InverseSquare,
}

impl Default for EncodingScheme {
    fn default() -> Self {
        EncodingScheme::TwoBinary
    }
}

impl EncodingScheme {
    pub fn channels(self) -> usize {
        match self {
            EncodingScheme::Combined => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncodingScheme::Combined => "combined",
            EncodingScheme::TwoBinary => "two-binary",
            EncodingScheme::Euclidean => "euclidean",
            EncodingScheme::InverseSquare => "inverse-square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "combined" | "combined-single-channel" => EncodingScheme::Combined,
            "two-binary" | "two-binary-channels" => EncodingScheme::TwoBinary,
            "euclidean" | "euclidean-distance-channel" => EncodingScheme::Euclidean,
            "inverse-square" | "inverse-square-distance-channel" => EncodingScheme::InverseSquare,
            other => return Err(Error::Config(format!("unknown encoding `{other}`"))),
        })
    }
}

/// Encodes an `s x s` occupancy window with transmitters at window-local
/// cells into a `[C, s, s]` tensor. Several transmitters superimpose.
pub fn encode_input(occupancy: &[bool], s: usize, transmitters: &[(usize, usize)], scheme: EncodingScheme) -> Result<Tensor> {
    if occupancy.len() != s * s {
        return Err(Error::Mismatch(format!("occupancy window of {} cells for size {s}", occupancy.len())));
    }
    if transmitters.is_empty() {
        return Err(Error::InvalidScene("encoding needs at least one transmitter".into()));
    }
    if let Some(&(x, y)) = transmitters.iter().find(|&&(x, y)| x >= s || y >= s) {
        return Err(Error::InvalidScene(format!("transmitter ({x}, {y}) outside the {s}x{s} window")));
    }
    let plane = s * s;
    let building: Vec<f32> = occupancy.iter().map(|&b| b as u8 as f32).collect();
    let nearest_sq = |px: usize, py: usize| -> f64 {
        transmitters
            .iter()
            .map(|&(tx, ty)| {
                let dx = px as f64 - tx as f64;
                let dy = py as f64 - ty as f64;
                dx * dx + dy * dy
            })
            .fold(f64::INFINITY, f64::min)
    };
    let data = match scheme {
        EncodingScheme::Combined => {
            let mut c = building;
            for &(x, y) in transmitters {
                c[y * s + x] = 2.0;
            }
            c
        }
        EncodingScheme::TwoBinary => {
            let mut d = building;
            d.resize(2 * plane, 0.0);
            for &(x, y) in transmitters {
                d[plane + y * s + x] = 1.0;
            }
            d
        }
        EncodingScheme::Euclidean | EncodingScheme::InverseSquare => {
            let diag = ((s.max(2) - 1) as f64) * std::f64::consts::SQRT_2;
            let mut d = building;
            d.reserve(plane);
            for py in 0..s {
                for px in 0..s {
                    let d2 = nearest_sq(px, py);
                    d.push(if scheme == EncodingScheme::Euclidean {
                        (d2.sqrt() / diag) as f32
                    } else {
                        (1.0 / (1.0 + d2)) as f32
                    });
                }
            }
            d
        }
    };
    Ok(Tensor::new(vec![scheme.channels(), s, s], data)?)
}

/// A kept window: its upper-left corner and the transmitter's window-local cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowDesc {
    pub origin_x: usize,
    pub origin_y: usize,
    pub transmitter_xy: (usize, usize),
}

/// Offsets `0, stride, ..` with the window fully inside `len`.
pub fn window_offsets(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if size > len || stride == 0 {
        return Vec::new();
    }
    (0..=(len - size) / stride).map(|i| i * stride).collect()
}

fn building_prefix(region: &RegionMap) -> Vec<u32> {
    let (w, h) = (region.width(), region.height());
    let mut p = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += region.is_building(x, y) as u32;
            p[(y + 1) * (w + 1) + x + 1] = p[y * (w + 1) + x + 1] + row;
        }
    }
    p
}

/// Windows that contain the (single) transmitter at least `edge_padding`
/// cells from every edge and at least one building cell.
pub fn extract_frames(
    coverage: &CoverageGrid,
    scene: &Scene,
    frame_size: usize,
    stride: usize,
    edge_padding: usize,
) -> Result<Vec<WindowDesc>> {
    let region = scene.region();
    if coverage.width != region.width() || coverage.height != region.height() {
        return Err(Error::Mismatch(format!(
            "coverage {}x{} does not match scene {}x{}",
            coverage.width,
            coverage.height,
            region.width(),
            region.height()
        )));
    }
    if frame_size == 0 || frame_size > region.width() || frame_size > region.height() {
        return Err(Error::Config(format!(
            "frame size {frame_size} does not fit a {}x{} region",
            region.width(),
            region.height()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let [tx] = scene.transmitters() else {
        return Err(Error::InvalidScene(format!(
            "frame extraction needs single-transmitter scenes, `{}` has {}",
            scene.region_id(),
            scene.transmitters().len()
        )));
    };
    let prefix = building_prefix(region);
    let pw = region.width() + 1;
    let buildings_in = |x0: usize, y0: usize| {
        let (x1, y1) = (x0 + frame_size, y0 + frame_size);
        prefix[y1 * pw + x1] + prefix[y0 * pw + x0] - prefix[y0 * pw + x1] - prefix[y1 * pw + x0]
    };
    let keep = |o: usize, t: usize| t >= o + edge_padding && t + edge_padding < o + frame_size;
    let mut out = Vec::new();
    for oy in window_offsets(region.height(), frame_size, stride) {
        if !keep(oy, tx.y) {
            continue;
        }
        for ox in window_offsets(region.width(), frame_size, stride) {
            if keep(ox, tx.x) && buildings_in(ox, oy) > 0 {
                out.push(WindowDesc {
                    origin_x: ox,
                    origin_y: oy,
                    transmitter_xy: (tx.x - ox, tx.y - oy),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `origin_x < boundary` trains, `origin_x > boundary + gap` tests, the rest is dropped.
pub fn split_label(origin_x: usize, boundary: usize, gap: usize) -> Option<Split> {
    if origin_x < boundary {
        Some(Split::Train)
    } else if origin_x > boundary + gap {
        Some(Split::Test)
    } else {
        None
    }
}

pub fn split_by_region(origins_x: &[usize], boundary: usize, gap: usize) -> Vec<Option<Split>> {
    origins_x.iter().map(|&x| split_label(x, boundary, gap)).collect()
}

/// The 256-wide defaults scaled to a region of `width` cells.
pub fn scaled_boundary_gap(width: usize) -> (usize, usize) {
    let scale = width as f64 / REFERENCE_WIDTH as f64;
    (
        (DEFAULT_BOUNDARY as f64 * scale).round() as usize,
        (DEFAULT_GAP as f64 * scale).round() as usize,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[C, S, S]`.
    pub input: Tensor,
    /// `[1, S, S]` in `[0, 1]`.
    pub target: Tensor,
    pub origin_x: usize,
    pub origin_y: usize,
    pub region_id: String,
    pub transmitter_xy: (usize, usize),
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub frame_size: usize,
    pub encoding: EncodingScheme,
    pub floor_dbm: f64,
    pub stride: usize,
    pub edge_padding: usize,
    /// `None` scales the default to each source region's width.
    pub boundary: Option<usize>,
    pub gap: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            frame_size: 32,
            encoding: EncodingScheme::TwoBinary,
            floor_dbm: DEFAULT_FLOOR_DBM,
            stride: DEFAULT_STRIDE,
            edge_padding: DEFAULT_EDGE_PADDING,
            boundary: None,
            gap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frame_size: usize,
    pub encoding: EncodingScheme,
    pub norm: NormalizationSpec,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.encoding.channels()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.frames.iter().filter(|f| f.split == split).count()
    }
}

/// Extract, normalise, encode and split every source; frames are ordered by
/// `(region_id, origin_y, origin_x)`, sources with equal keys in input order.
pub fn build_dataset(sources: &[(Scene, CoverageGrid)], cfg: &DatasetConfig) -> Result<Dataset> {
    if sources.is_empty() {
        return Err(Error::EmptyDataset("no source scenes given".into()));
    }
    let mut ceil = f64::NEG_INFINITY;
    for (scene, cov) in sources {
        if cov.width != scene.width() || cov.height != scene.height() {
            return Err(Error::Mismatch(format!(
                "coverage {}x{} does not match scene `{}` {}x{}",
                cov.width,
                cov.height,
                scene.region_id(),
                scene.width(),
                scene.height()
            )));
        }
        for &v in &cov.power_dbm {
            ceil = ceil.max((v as f64).max(cfg.floor_dbm));
        }
    }
    let norm = NormalizationSpec::new(cfg.floor_dbm, ceil).map_err(|_| {
        Error::EmptyDataset(format!(
            "every coverage value is at or below the floor ({} dBm); nothing to normalize",
            cfg.floor_dbm
        ))
    })?;
    let s = cfg.frame_size;
    let per_source: Vec<Result<Vec<Frame>>> = exec::map_indexed(sources.len(), |i| {
        let (scene, cov) = &sources[i];
        let (db, dg) = scaled_boundary_gap(scene.width());
        let (boundary, gap) = (cfg.boundary.unwrap_or(db), cfg.gap.unwrap_or(dg));
        let windows = extract_frames(cov, scene, s, cfg.stride, cfg.edge_padding)?;
        let mut frames = Vec::new();
        for wd in windows {
            let Some(split) = split_label(wd.origin_x, boundary, gap) else { continue };
            let occ = scene.region().window(wd.origin_x, wd.origin_y, s, s);
            let input = encode_input(&occ, s, &[wd.transmitter_xy], cfg.encoding)?;
            let mut dbm = Vec::with_capacity(s * s);
            for y in wd.origin_y..wd.origin_y + s {
                dbm.extend_from_slice(&cov.power_dbm[y * cov.width + wd.origin_x..y * cov.width + wd.origin_x + s]);
            }
            let (vals, _) = norm.normalize_all(&dbm);
            frames.push(Frame {
                input,
                target: Tensor::new(vec![1, s, s], vals)?,
                origin_x: wd.origin_x,
                origin_y: wd.origin_y,
                region_id: scene.region_id().to_string(),
                transmitter_xy: wd.transmitter_xy,
                split,
            });
        }
        Ok(frames)
    });
    let mut frames = Vec::new();
    for r in per_source {
        frames.extend(r?);
    }
    frames.sort_by(|a, b| (&a.region_id, a.origin_y, a.origin_x).cmp(&(&b.region_id, b.origin_y, b.origin_x)));
    if frames.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no {s}x{s} frame passed the filters (transmitter >= {} cells from the edges, >= 1 building, \
             outside the split gap); try more buildings, a smaller frame or padding",
            cfg.edge_padding
        )));
    }
    Ok(Dataset {
        frame_size: s,
        encoding: cfg.encoding,
        norm,
        frames,
    })
}

pub const DATASET_FORMAT: &str = "radiomap-dataset";
pub const TENSOR_MAGIC: &[u8; 4] = b"RTNS";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    frame_size: usize,
    encoding: EncodingScheme,
    floor_dbm: f64,
    ceil_dbm: f64,
    frame_count: usize,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    origin_x: usize,
    origin_y: usize,
    region_id: String,
    transmitter_xy: (usize, usize),
    split: Split,
}

fn write_block<W: Write>(t: &Tensor, out: &mut W) -> Result<()> {
    let [c, h, w] = <[usize; 3]>::try_from(t.shape()).map_err(|_| Error::Format("tensor block must be rank 3".into()))?;
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&TENSOR_VERSION.to_le_bytes())?;
    out.write_all(&(c as u16).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    out.write_all(&(h as u32).to_le_bytes())?;
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_block<R: Read>(input: &mut R, expect: [usize; 3]) -> Result<Tensor> {
    let mut hdr = [0u8; 16];
    input
        .read_exact(&mut hdr)
        .map_err(|_| Error::Format("truncated tensor header".into()))?;
    if &hdr[0..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor block magic".into()));
    }
    let c = u16::from_le_bytes([hdr[6], hdr[7]]) as usize;
    let w = u32::from_le_bytes(hdr[8..12].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(hdr[12..16].try_into().expect("4 bytes")) as usize;
    if [c, h, w] != expect {
        return Err(Error::Format(format!("tensor block {c}x{h}x{w}, expected {expect:?}")));
    }
    let mut bytes = vec![0u8; c * h * w * 4];
    input
        .read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated tensor payload".into()))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::new(vec![c, h, w], data)?)
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: 1,
        frame_size: ds.frame_size,
        encoding: ds.encoding,
        floor_dbm: ds.norm.floor_dbm,
        ceil_dbm: ds.norm.ceil_dbm,
        frame_count: ds.frames.len(),
        channels: ds.channels(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for f in &ds.frames {
        let meta = FrameMeta {
            origin_x: f.origin_x,
            origin_y: f.origin_y,
            region_id: f.region_id.clone(),
            transmitter_xy: f.transmitter_xy,
            split: f.split,
        };
        serde_json::to_writer(&mut out, &meta)?;
        out.write_all(b"\n")?;
        write_block(&f.input, &mut out)?;
        write_block(&f.target, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(mut input: R) -> Result<Dataset> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: DatasetHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    if header.format != DATASET_FORMAT || header.version != 1 {
        return Err(Error::Format(format!("unsupported dataset `{}` v{}", header.format, header.version)));
    }
    if header.channels != header.encoding.channels() {
        return Err(Error::Format("channel count disagrees with encoding".into()));
    }
    let norm = NormalizationSpec::new(header.floor_dbm, header.ceil_dbm)?;
    let s = header.frame_size;
    let mut frames = Vec::with_capacity(header.frame_count);
    for i in 0..header.frame_count {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Err(Error::Format(format!("dataset ends after {i} of {} frames", header.frame_count)));
        }
        let meta: FrameMeta =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("frame {i} metadata: {e}")))?;
        let inp = read_block(&mut input, [header.channels, s, s])?;
        let target = read_block(&mut input, [1, s, s])?;
        frames.push(Frame {
            input: inp,
            target,
            origin_x: meta.origin_x,
            origin_y: meta.origin_y,
            region_id: meta.region_id,
            transmitter_xy: meta.transmitter_xy,
            split: meta.split,
        });
    }
    Ok(Dataset {
        frame_size: s,
        encoding: header.encoding,
        norm,
        frames,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let n = NormalizationSpec::new(-100.0, -20.0).unwrap();
        assert_eq!(n.normalize(-100.0), (0.0, false));
        assert_eq!(n.normalize(-60.0), (0.5, false));
        assert_eq!(n.normalize(-130.0), (0.0, false));
        assert_eq!(n.normalize(0.0), (1.0, true));
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_label(59, 60, 20), Some(Split::Train));
        assert_eq!(split_label(81, 60, 20), Some(Split::Test));
        assert_eq!(split_label(70, 60, 20), None);
        assert_eq!(split_label(80, 60, 20), None);
        assert_eq!(scaled_boundary_gap(256), (60, 20));
        assert_eq!(scaled_boundary_gap(64), (15, 5));
    }

    #[test]
    fn encoding_examples() {
        let occ = vec![false; 64];
        let t = encode_input(&occ, 8, &[(3, 4)], EncodingScheme::TwoBinary).unwrap();
        assert_eq!(t.data()[64..].iter().sum::<f32>(), 1.0);
        let e = encode_input(&occ, 8, &[(3, 4)], EncodingScheme::Euclidean).unwrap();
        assert_eq!(e.data()[64 + 4 * 8 + 3], 0.0);
        let q = encode_input(&occ, 8, &[(3, 4)], EncodingScheme::InverseSquare).unwrap();
        assert_eq!(q.data()[64 + 4 * 8 + 4], 0.5);
        let c = encode_input(&occ, 8, &[(3, 4)], EncodingScheme::Combined).unwrap();
        assert_eq!(c.shape(), &[1, 8, 8]);
        assert_eq!(c.data()[4 * 8 + 3], 2.0);
        assert!(encode_input(&occ, 8, &[(8, 0)], EncodingScheme::TwoBinary).is_err());
    }

    #[test]
    fn offsets_count() {
        assert_eq!(window_offsets(256, 32, 3).len(), (256 - 32) / 3 + 1);
        assert_eq!(window_offsets(256, 32, 3).len(), 75);
    }
}
