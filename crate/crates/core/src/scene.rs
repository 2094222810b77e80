//! Urban regions on a cell grid, transmitters, and the scene JSON format.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 50 W expressed in dBm.
pub const DEFAULT_POWER_DBM: f64 = 46.99;
pub const DEFAULT_HEIGHT_M: f64 = 6.0;

/// Building occupancy grid, row-major with `y` increasing downward.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    width: usize,
    height: usize,
    cell_size_m: f64,
    occupancy: Vec<bool>,
}

impl RegionMap {
    pub fn new(width: usize, height: usize, cell_size_m: f64, occupancy: Vec<bool>) -> Result<Self> {
        if occupancy.len() != width * height {
            return Err(Error::InvalidRegion(format!(
                "occupancy length mismatch: {width}x{height} needs {} cells, got {}",
                width * height,
                occupancy.len()
            )));
        }
        if !(cell_size_m.is_finite() && cell_size_m > 0.0) {
            return Err(Error::InvalidRegion(format!("cell_size_m must be positive, got {cell_size_m}")));
        }
        Ok(RegionMap {
            width,
            height,
            cell_size_m,
            occupancy,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        RegionMap {
            width,
            height,
            cell_size_m: 1.0,
            occupancy: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell_size_m(&self) -> f64 {
        self.cell_size_m
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    pub fn is_building(&self, x: usize, y: usize) -> bool {
        self.occupancy[y * self.width + x]
    }

    pub fn set_building(&mut self, x: usize, y: usize, v: bool) {
        self.occupancy[y * self.width + x] = v;
    }

    /// Marks the rectangle `[x0, x0+w) x [y0, y0+h)`, clipped to the grid.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, w: usize, h: usize) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.set_building(x, y, true);
            }
        }
    }

    pub fn building_count(&self) -> usize {
        self.occupancy.iter().filter(|&&b| b).count()
    }

    /// Copy of the sub-grid `[x0, x0+w) x [y0, y0+h)`.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            out.extend_from_slice(&self.occupancy[y * self.width + x0..y * self.width + x0 + w]);
        }
        out
    }
}

/// Drops the last row and/or column of odd dimensions.
pub fn crop_to_even(region: &RegionMap) -> Result<RegionMap> {
    if region.width < 2 || region.height < 2 {
        return Err(Error::InvalidRegion(format!(
            "cannot crop a {}x{} region; both dimensions must be at least 2",
            region.width, region.height
        )));
    }
    let w = region.width & !1;
    let h = region.height & !1;
    Ok(RegionMap {
        width: w,
        height: h,
        cell_size_m: region.cell_size_m,
        occupancy: region.window(0, 0, w, h),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transmitter {
    pub x: usize,
    pub y: usize,
    pub power_dbm: f64,
    pub height_m: f64,
}

impl Transmitter {
    pub fn new(x: usize, y: usize) -> Self {
        Transmitter {
            x,
            y,
            power_dbm: DEFAULT_POWER_DBM,
            height_m: DEFAULT_HEIGHT_M,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    region: RegionMap,
    transmitters: Vec<Transmitter>,
    region_id: String,
}

impl Scene {
    pub fn new(region: RegionMap, transmitters: Vec<Transmitter>, region_id: impl Into<String>) -> Result<Self> {
        if transmitters.is_empty() {
            return Err(Error::InvalidScene("scene needs at least one transmitter".into()));
        }
        for (i, t) in transmitters.iter().enumerate() {
            if !region.contains(t.x as i64, t.y as i64) {
                return Err(Error::InvalidScene(format!("transmitter {i} out of bounds at ({}, {})", t.x, t.y)));
            }
            if region.is_building(t.x, t.y) {
                return Err(Error::InvalidScene(format!("transmitter {i} on a building cell at ({}, {})", t.x, t.y)));
            }
            if !t.power_dbm.is_finite() {
                return Err(Error::InvalidScene(format!("transmitter {i} power is not finite")));
            }
        }
        Ok(Scene {
            region,
            transmitters,
            region_id: region_id.into(),
        })
    }

    pub fn region(&self) -> &RegionMap {
        &self.region
    }

    pub fn transmitters(&self) -> &[Transmitter] {
        &self.transmitters
    }

    pub fn region_id(&self) -> &str {
        &self.region_id
    }

    pub fn width(&self) -> usize {
        self.region.width
    }

    pub fn height(&self) -> usize {
        self.region.height
    }

    /// Same buildings with a different transmitter set.
    pub fn with_transmitters(&self, transmitters: Vec<Transmitter>) -> Result<Scene> {
        Scene::new(self.region.clone(), transmitters, self.region_id.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct TransmitterDoc {
    x: i64,
    y: i64,
    #[serde(default = "default_power")]
    power_dbm: f64,
    #[serde(default = "default_height")]
    height_m: f64,
}

fn default_power() -> f64 {
    DEFAULT_POWER_DBM
}

fn default_height() -> f64 {
    DEFAULT_HEIGHT_M
}

fn default_cell() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    region_id: String,
    width: usize,
    height: usize,
    #[serde(default = "default_cell")]
    cell_size_m: f64,
    occupancy: Vec<u8>,
    transmitters: Vec<TransmitterDoc>,
}

fn parse_err(field: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Parse {
        field: field.into(),
        msg: msg.into(),
    }
}

pub fn scene_to_json(scene: &Scene) -> String {
    let doc = SceneDoc {
        region_id: scene.region_id.clone(),
        width: scene.region.width,
        height: scene.region.height,
        cell_size_m: scene.region.cell_size_m,
        occupancy: scene.region.occupancy.iter().map(|&b| b as u8).collect(),
        transmitters: scene
            .transmitters
            .iter()
            .map(|t| TransmitterDoc {
                x: t.x as i64,
                y: t.y as i64,
                power_dbm: t.power_dbm,
                height_m: t.height_m,
            })
            .collect(),
    };
    serde_json::to_string(&doc).expect("scene serializes")
}

pub fn json_to_scene(text: &str) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_str(text).map_err(|e| parse_err("document", e.to_string()))?;
    scene_from_value(doc)
}

/// Parses an already-decoded JSON value (e.g. a field of a request body).
pub fn scene_from_json_value(value: serde_json::Value) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_value(value).map_err(|e| parse_err("scene", e.to_string()))?;
    scene_from_value(doc)
}

pub fn scene_to_json_value(scene: &Scene) -> serde_json::Value {
    serde_json::from_str(&scene_to_json(scene)).expect("scene json is valid")
}

fn scene_from_value(doc: SceneDoc) -> Result<Scene> {
    let cells = doc
        .width
        .checked_mul(doc.height)
        .ok_or_else(|| parse_err("width", "dimensions overflow"))?;
    if doc.occupancy.len() != cells {
        return Err(parse_err(
            "occupancy",
            format!(
                "occupancy length mismatch: {}x{} declares {cells} cells, got {}",
                doc.width,
                doc.height,
                doc.occupancy.len()
            ),
        ));
    }
    if let Some(i) = doc.occupancy.iter().position(|&v| v > 1) {
        return Err(parse_err(format!("occupancy[{i}]"), "entries must be 0 or 1"));
    }
    if !(doc.cell_size_m.is_finite() && doc.cell_size_m > 0.0) {
        return Err(parse_err("cell_size_m", "must be positive"));
    }
    let region = RegionMap::new(
        doc.width,
        doc.height,
        doc.cell_size_m,
        doc.occupancy.iter().map(|&v| v == 1).collect(),
    )?;
    if doc.transmitters.is_empty() {
        return Err(parse_err("transmitters", "at least one transmitter required"));
    }
    let mut txs = Vec::with_capacity(doc.transmitters.len());
    for (i, t) in doc.transmitters.iter().enumerate() {
        if !region.contains(t.x, t.y) {
            return Err(parse_err(
                format!("transmitters[{i}]"),
                format!("transmitter out of bounds at ({}, {})", t.x, t.y),
            ));
        }
        if region.is_building(t.x as usize, t.y as usize) {
            return Err(parse_err(
                format!("transmitters[{i}]"),
                format!("transmitter on a building cell at ({}, {})", t.x, t.y),
            ));
        }
        if !t.power_dbm.is_finite() {
            return Err(parse_err(format!("transmitters[{i}].power_dbm"), "must be finite"));
        }
        txs.push(Transmitter {
            x: t.x as usize,
            y: t.y as usize,
            power_dbm: t.power_dbm,
            height_m: t.height_m,
        });
    }
    Scene::new(region, txs, doc.region_id)
}

/// Parameters of the synthetic city generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub min_side: usize,
    /// Largest building side; `None` derives it from the grid size.
    pub max_side: Option<usize>,
    pub power_dbm: f64,
    pub height_m: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            min_side: 2,
            max_side: None,
            power_dbm: DEFAULT_POWER_DBM,
            height_m: DEFAULT_HEIGHT_M,
        }
    }
}

pub fn random_scene(width: usize, height: usize, building_count: usize, rng_seed: u64) -> Result<Scene> {
    random_scene_with(width, height, building_count, rng_seed, &SceneGenConfig::default())
}

/// Random axis-aligned rectangles (overlaps allowed) and one transmitter on
/// a free cell, both drawn from a seeded generator.
pub fn random_scene_with(
    width: usize,
    height: usize,
    building_count: usize,
    rng_seed: u64,
    cfg: &SceneGenConfig,
) -> Result<Scene> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidRegion(format!("cannot generate a {width}x{height} region")));
    }
    let max_side = cfg.max_side.unwrap_or((width.min(height) / 5).max(3)).min(width.min(height));
    let min_side = cfg.min_side.max(1).min(max_side);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut region = RegionMap::empty(width, height);
    for _ in 0..building_count {
        let w = rng.gen_range(min_side..=max_side);
        let h = rng.gen_range(min_side..=max_side);
        let x0 = rng.gen_range(0..=width - w);
        let y0 = rng.gen_range(0..=height - h);
        region.fill_rect(x0, y0, w, h);
    }
    let free: Vec<usize> = (0..width * height).filter(|&i| !region.occupancy[i]).collect();
    if free.is_empty() {
        return Err(Error::Placement(format!(
            "no free cell left for a transmitter after placing {building_count} buildings"
        )));
    }
    let cell = free[rng.gen_range(0..free.len())];
    let tx = Transmitter {
        x: cell % width,
        y: cell / width,
        power_dbm: cfg.power_dbm,
        height_m: cfg.height_m,
    };
    Scene::new(region, vec![tx], format!("rand-{rng_seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_examples() {
        let r = RegionMap::empty(257, 257);
        let c = crop_to_even(&r).unwrap();
        assert_eq!((c.width(), c.height()), (256, 256));
        let even = RegionMap::empty(256, 256);
        assert_eq!(crop_to_even(&even).unwrap(), even);
        assert!(crop_to_even(&RegionMap::empty(1, 8)).is_err());
    }

    #[test]
    fn json_rejects_bad_documents() {
        let doc = r#"{"region_id":"r","width":2,"height":1,"cell_size_m":1.0,"occupancy":[0,0],
            "transmitters":[{"x":-1,"y":0,"power_dbm":46.99,"height_m":6.0}]}"#;
        let err = json_to_scene(doc).unwrap_err().to_string();
        assert!(err.contains("transmitter out of bounds"), "{err}");
        let doc = format!(
            r#"{{"region_id":"r","width":10,"height":10,"cell_size_m":1.0,"occupancy":[{}],
            "transmitters":[{{"x":1,"y":1,"power_dbm":46.99,"height_m":6.0}}]}}"#,
            vec!["0"; 99].join(",")
        );
        let err = json_to_scene(&doc).unwrap_err().to_string();
        assert!(err.contains("occupancy length mismatch"), "{err}");
    }

    #[test]
    fn zero_buildings_scene() {
        let s = random_scene(32, 32, 0, 7).unwrap();
        assert_eq!(s.region().building_count(), 0);
        assert_eq!(s.transmitters().len(), 1);
    }

    #[test]
    fn full_grid_fails_placement() {
        let cfg = SceneGenConfig {
            min_side: 4,
            max_side: Some(4),
            ..SceneGenConfig::default()
        };
        let err = random_scene_with(4, 4, 1, 1, &cfg).unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
    }
}
