//! Procedural terrain rasters and per-pose feature extraction.
//!
//! Rasters are sampled at grid nodes spaced `cell_size` apart, covering
//! `[0, (width-1)*cell_size] x [0, (height-1)*cell_size]`. Elevation between
//! nodes is bilinear; categorical layers (class, friction, roughness) use the
//! nearest node.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Undulating,
    Hill,
    Directional,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Undulating, Scenario::Hill, Scenario::Directional];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Undulating => "undulating",
            Scenario::Hill => "hill",
            Scenario::Directional => "directional",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainClass {
    Grass = 0,
    Gravel = 1,
    Sand = 2,
    WetClay = 3,
}

impl TerrainClass {
    pub const ALL: [TerrainClass; 4] = [
        TerrainClass::Grass,
        TerrainClass::Gravel,
        TerrainClass::Sand,
        TerrainClass::WetClay,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TerrainClass::Grass => "grass",
            TerrainClass::Gravel => "gravel",
            TerrainClass::Sand => "sand",
            TerrainClass::WetClay => "wet_clay",
        }
    }
}

/// Friction coefficient per terrain class. Wet clay has a dry and a wet value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionTable {
    pub grass: f64,
    pub gravel: f64,
    pub sand: f64,
    pub wet_clay_dry: f64,
    pub wet_clay_wet: f64,
}

impl Default for FrictionTable {
    fn default() -> Self {
        Self {
            grass: 0.6,
            gravel: 0.9,
            sand: 1.2,
            wet_clay_dry: 0.5,
            wet_clay_wet: 1.4,
        }
    }
}

impl FrictionTable {
    pub fn friction(&self, class: TerrainClass, wet: bool) -> f64 {
        match class {
            TerrainClass::Grass => self.grass,
            TerrainClass::Gravel => self.gravel,
            TerrainClass::Sand => self.sand,
            TerrainClass::WetClay if wet => self.wet_clay_wet,
            TerrainClass::WetClay => self.wet_clay_dry,
        }
    }
}

/// Generation knobs shared by all scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    pub cell_size: f64,
    pub friction: FrictionTable,
    /// Moisture state of the wet-clay region in the directional scenario.
    pub wet_clay_wet: bool,
    /// Max slope of the undulations laid over the directional quadrants.
    pub directional_max_slope_deg: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            friction: FrictionTable::default(),
            wet_clay_wet: true,
            directional_max_slope_deg: 12.0,
        }
    }
}

/// Radius used for obstacle density (m).
pub const OBSTACLE_RADIUS: f64 = 2.0;
/// Roughness above which a node counts as an obstacle (m).
pub const ROUGHNESS_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub elevation: Vec<f64>,
    pub friction: Vec<f64>,
    pub terrain_class: Vec<TerrainClass>,
    pub roughness: Vec<f64>,
    pub wet: Vec<bool>,
    pub seed: u64,
}

/// Per-pose feature vector, ordered `[z, ∇z, n, t, r, μ, ρ, κ, d]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVec {
    pub z: f64,
    pub grad_z: [f64; 2],
    pub normal: [f64; 3],
    pub terrain_class: TerrainClass,
    pub roughness: f64,
    pub friction: f64,
    pub obstacle_density: f64,
    pub curvature: f64,
    pub goal_dir: [f64; 2],
}

impl FeatureVec {
    pub const LEN: usize = 13;

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.z,
            self.grad_z[0],
            self.grad_z[1],
            self.normal[0],
            self.normal[1],
            self.normal[2],
            self.terrain_class.index() as f64,
            self.roughness,
            self.friction,
            self.obstacle_density,
            self.curvature,
            self.goal_dir[0],
            self.goal_dir[1],
        ]
    }
}

impl TerrainGrid {
    fn blank(size_m: f64, cell_size: f64, seed: u64) -> Result<Self> {
        if !(size_m > 0.0) || !size_m.is_finite() {
            return Err(Error::Config(format!("terrain size must be > 0, got {size_m}")));
        }
        if !(cell_size > 0.0) || cell_size > size_m {
            return Err(Error::Config(format!(
                "cell size must be in (0, {size_m}], got {cell_size}"
            )));
        }
        let cells = (size_m / cell_size).round();
        if (cells * cell_size - size_m).abs() > 1e-9 * size_m {
            return Err(Error::Config(format!(
                "cell size {cell_size} does not divide terrain size {size_m}"
            )));
        }
        let n = cells as usize + 1;
        Ok(Self {
            width: n,
            height: n,
            cell_size,
            elevation: vec![0.0; n * n],
            friction: vec![FrictionTable::default().grass; n * n],
            terrain_class: vec![TerrainClass::Grass; n * n],
            roughness: vec![0.0; n * n],
            wet: vec![false; n * n],
            seed,
        })
    }

    /// Grid whose elevation is `elevation(x, y)` sampled at the nodes, uniform class.
    pub fn from_fn<F>(size_m: f64, cell_size: f64, class: TerrainClass, mut elevation: F) -> Result<Self>
    where
        F: FnMut(f64, f64) -> f64,
    {
        let mut grid = Self::blank(size_m, cell_size, 0)?;
        let friction = FrictionTable::default().friction(class, false);
        for j in 0..grid.height {
            for i in 0..grid.width {
                let k = grid.index(i, j);
                grid.elevation[k] = elevation(i as f64 * cell_size, j as f64 * cell_size);
                grid.terrain_class[k] = class;
                grid.friction[k] = friction;
            }
        }
        Ok(grid)
    }

    pub fn flat(size_m: f64, cell_size: f64, class: TerrainClass) -> Result<Self> {
        Self::from_fn(size_m, cell_size, class, |_, _| 0.0)
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    pub fn extent_x(&self) -> f64 {
        (self.width - 1) as f64 * self.cell_size
    }

    pub fn extent_y(&self) -> f64 {
        (self.height - 1) as f64 * self.cell_size
    }

    pub fn size_m(&self) -> f64 {
        self.extent_x()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.extent_x()).contains(&x) && (0.0..=self.extent_y()).contains(&y)
    }

    fn check_bounds(&self, x: f64, y: f64) -> Result<()> {
        if self.contains(x, y) {
            Ok(())
        } else {
            Err(Error::OutOfBounds { x, y })
        }
    }

    fn elevation_unchecked(&self, x: f64, y: f64) -> f64 {
        let fx = (x / self.cell_size).clamp(0.0, (self.width - 1) as f64);
        let fy = (y / self.cell_size).clamp(0.0, (self.height - 1) as f64);
        let i = (fx.floor() as usize).min(self.width - 2);
        let j = (fy.floor() as usize).min(self.height - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let z00 = self.elevation[self.index(i, j)];
        let z10 = self.elevation[self.index(i + 1, j)];
        let z01 = self.elevation[self.index(i, j + 1)];
        let z11 = self.elevation[self.index(i + 1, j + 1)];
        (1.0 - ty) * ((1.0 - tx) * z00 + tx * z10) + ty * ((1.0 - tx) * z01 + tx * z11)
    }

    /// Bilinearly interpolated elevation.
    pub fn elevation_at(&self, x: f64, y: f64) -> Result<f64> {
        self.check_bounds(x, y)?;
        Ok(self.elevation_unchecked(x, y))
    }

    /// Central-difference gradient with a half-cell step (one-sided at the border).
    pub fn gradient_at(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        self.check_bounds(x, y)?;
        let h = 0.5 * self.cell_size;
        let diff = |lo: f64, hi: f64, along_x: bool| {
            let (zl, zh) = if along_x {
                (self.elevation_unchecked(lo, y), self.elevation_unchecked(hi, y))
            } else {
                (self.elevation_unchecked(x, lo), self.elevation_unchecked(x, hi))
            };
            (zh - zl) / (hi - lo)
        };
        let gx = diff((x - h).max(0.0), (x + h).min(self.extent_x()), true);
        let gy = diff((y - h).max(0.0), (y + h).min(self.extent_y()), false);
        Ok([gx, gy])
    }

    fn nearest(&self, x: f64, y: f64) -> usize {
        let i = ((x / self.cell_size).round() as usize).min(self.width - 1);
        let j = ((y / self.cell_size).round() as usize).min(self.height - 1);
        self.index(i, j)
    }

    pub fn class_at(&self, x: f64, y: f64) -> Result<TerrainClass> {
        self.check_bounds(x, y)?;
        Ok(self.terrain_class[self.nearest(x, y)])
    }

    pub fn friction_at(&self, x: f64, y: f64) -> Result<f64> {
        self.check_bounds(x, y)?;
        Ok(self.friction[self.nearest(x, y)])
    }

    pub fn wet_at(&self, x: f64, y: f64) -> Result<bool> {
        self.check_bounds(x, y)?;
        Ok(self.wet[self.nearest(x, y)])
    }

    /// Fraction of nodes within [`OBSTACLE_RADIUS`] whose roughness exceeds the threshold.
    pub fn obstacle_density_at(&self, x: f64, y: f64) -> Result<f64> {
        self.check_bounds(x, y)?;
        let reach = (OBSTACLE_RADIUS / self.cell_size).ceil() as isize;
        let (ci, cj) = (
            (x / self.cell_size).round() as isize,
            (y / self.cell_size).round() as isize,
        );
        let (mut inside, mut rough) = (0usize, 0usize);
        for j in (cj - reach).max(0)..=(cj + reach).min(self.height as isize - 1) {
            for i in (ci - reach).max(0)..=(ci + reach).min(self.width as isize - 1) {
                let (px, py) = (i as f64 * self.cell_size, j as f64 * self.cell_size);
                if (px - x).hypot(py - y) <= OBSTACLE_RADIUS {
                    inside += 1;
                    if self.roughness[self.index(i as usize, j as usize)] > ROUGHNESS_THRESHOLD {
                        rough += 1;
                    }
                }
            }
        }
        Ok(if inside == 0 { 0.0 } else { rough as f64 / inside as f64 })
    }

    /// Largest cell slope in degrees, each cell measured at its center from
    /// the mean of its two opposite edge differences in x and in y.
    pub fn max_slope_deg(&self) -> f64 {
        self.max_slope_tan().atan().to_degrees()
    }

    fn max_slope_tan(&self) -> f64 {
        self.cell_center_slopes_deg()
            .into_iter()
            .fold(0.0_f64, f64::max)
            .to_radians()
            .tan()
    }

    /// Slope (degrees) of each cell measured at its center.
    pub fn cell_center_slopes_deg(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity((self.width - 1) * (self.height - 1));
        for j in 0..self.height - 1 {
            for i in 0..self.width - 1 {
                let z = |a, b| self.elevation[self.index(a, b)];
                let gx = 0.5 * ((z(i + 1, j) - z(i, j)) + (z(i + 1, j + 1) - z(i, j + 1))) / self.cell_size;
                let gy = 0.5 * ((z(i, j + 1) - z(i, j)) + (z(i + 1, j + 1) - z(i + 1, j))) / self.cell_size;
                out.push(gx.hypot(gy).atan().to_degrees());
            }
        }
        out
    }

    /// Median cell slope over the inclined cells (slope > 1°): the hill flank.
    pub fn flank_slope_deg(&self) -> f64 {
        let mut inclined: Vec<f64> = self
            .cell_center_slopes_deg()
            .into_iter()
            .filter(|s| *s > 1.0)
            .collect();
        if inclined.is_empty() {
            return 0.0;
        }
        inclined.sort_by(f64::total_cmp);
        inclined[inclined.len() / 2]
    }

    pub fn distinct_classes(&self) -> Vec<TerrainClass> {
        let mut seen: Vec<TerrainClass> = self.terrain_class.clone();
        seen.sort();
        seen.dedup();
        seen
    }

    fn rescale_to_max_slope(&mut self, max_slope_deg: f64) {
        let current = self.max_slope_tan();
        if current > 0.0 {
            let factor = max_slope_deg.to_radians().tan() / current;
            self.elevation.iter_mut().for_each(|z| *z *= factor);
        }
        let min = self.elevation.iter().copied().fold(f64::INFINITY, f64::min);
        self.elevation.iter_mut().for_each(|z| *z -= min);
    }

    fn assign_materials(&mut self, friction: &FrictionTable) {
        for k in 0..self.elevation.len() {
            self.friction[k] = friction.friction(self.terrain_class[k], self.wet[k]);
        }
    }

    /// Writes one CSV per raster plus `meta.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let raster = |name: &str, value: &dyn Fn(usize) -> String| -> Result<()> {
            let mut text = String::new();
            for j in 0..self.height {
                let row: Vec<String> = (0..self.width).map(|i| value(self.index(i, j))).collect();
                text.push_str(&row.join(","));
                text.push('\n');
            }
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        raster("elevation.csv", &|k| self.elevation[k].to_string())?;
        raster("friction.csv", &|k| self.friction[k].to_string())?;
        raster("terrain_class.csv", &|k| self.terrain_class[k].index().to_string())?;
        raster("roughness.csv", &|k| self.roughness[k].to_string())?;
        raster("wet.csv", &|k| u8::from(self.wet[k]).to_string())?;
        let meta = GridMeta {
            format: GRID_FORMAT.to_string(),
            width: self.width,
            height: self.height,
            cell_size: self.cell_size,
            seed: self.seed,
            classes: TerrainClass::ALL.iter().map(|c| (c.index(), c.name().to_string())).collect(),
        };
        let path = dir.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: GridMeta = serde_json::from_str(&meta_text).map_err(|e| Error::parse("meta.json", e))?;
        if meta.format != GRID_FORMAT {
            return Err(Error::parse("meta.json", format!("unsupported format {:?}", meta.format)));
        }
        let n = meta.width * meta.height;
        let read = |name: &str| -> Result<Vec<String>> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let cells: Vec<String> = text
                .lines()
                .flat_map(|l| l.split(',').map(|s| s.trim().to_string()))
                .collect();
            if cells.len() != n {
                return Err(Error::parse(name, format!("expected {n} values, found {}", cells.len())));
            }
            Ok(cells)
        };
        let floats = |name: &str| -> Result<Vec<f64>> {
            read(name)?
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::parse(name, e)))
                .collect()
        };
        let classes = read("terrain_class.csv")?
            .iter()
            .map(|s| {
                s.parse::<usize>()
                    .ok()
                    .and_then(TerrainClass::from_index)
                    .ok_or_else(|| Error::parse("terrain_class.csv", format!("bad class {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let wet = read("wet.csv")?.iter().map(|s| s == "1").collect();
        Ok(Self {
            width: meta.width,
            height: meta.height,
            cell_size: meta.cell_size,
            elevation: floats("elevation.csv")?,
            friction: floats("friction.csv")?,
            terrain_class: classes,
            roughness: floats("roughness.csv")?,
            wet,
            seed: meta.seed,
        })
    }
}

const GRID_FORMAT: &str = "qnav-grid-v1";

#[derive(Debug, Serialize, Deserialize)]
struct GridMeta {
    format: String,
    width: usize,
    height: usize,
    cell_size: f64,
    seed: u64,
    classes: Vec<(usize, String)>,
}

fn check_slope(slope_deg: f64) -> Result<()> {
    if slope_deg > 0.0 && slope_deg <= 45.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("slope must be in (0°, 45°], got {slope_deg}°")))
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(ix as u64 ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Lattice value noise in [-1, 1] with quintic interpolation.
pub fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (fade(x - x0), fade(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = lattice(seed, ix, iy);
    let b = lattice(seed, ix + 1, iy);
    let c = lattice(seed, ix, iy + 1);
    let d = lattice(seed, ix + 1, iy + 1);
    (1.0 - ty) * ((1.0 - tx) * a + tx * b) + ty * ((1.0 - tx) * c + tx * d)
}

/// Fractal sum of `octaves` value-noise layers; `wavelength` is the base period in meters.
pub fn fbm(seed: u64, x: f64, y: f64, octaves: u32, wavelength: f64) -> f64 {
    let (mut sum, mut amp, mut norm, mut freq) = (0.0, 1.0, 0.0, 1.0 / wavelength);
    for o in 0..octaves {
        sum += amp * value_noise(splitmix(seed.wrapping_add(u64::from(o))), x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

fn fill_noise_elevation(grid: &mut TerrainGrid, seed: u64, wavelength: f64) {
    for j in 0..grid.height {
        for i in 0..grid.width {
            let k = grid.index(i, j);
            let (x, y) = (i as f64 * grid.cell_size, j as f64 * grid.cell_size);
            grid.elevation[k] = fbm(seed, x, y, 4, wavelength);
        }
    }
}

fn fill_roughness(grid: &mut TerrainGrid, seed: u64) {
    for j in 0..grid.height {
        for i in 0..grid.width {
            let k = grid.index(i, j);
            let (x, y) = (i as f64 * grid.cell_size, j as f64 * grid.cell_size);
            let base = match grid.terrain_class[k] {
                TerrainClass::Grass => 0.03,
                TerrainClass::Gravel => 0.06,
                TerrainClass::Sand => 0.04,
                TerrainClass::WetClay => 0.05,
            };
            grid.roughness[k] = base + 0.1 * fbm(seed, x, y, 2, 4.0).max(0.0);
        }
    }
}

/// Rolling multi-octave terrain whose steepest point is exactly `max_slope_deg`.
pub fn generate_undulating(seed: u64, size_m: f64, max_slope_deg: f64, opts: &GridOptions) -> Result<TerrainGrid> {
    check_slope(max_slope_deg)?;
    let mut grid = TerrainGrid::blank(size_m, opts.cell_size, seed)?;
    fill_noise_elevation(&mut grid, splitmix(seed ^ 0x01), 12.0);
    grid.rescale_to_max_slope(max_slope_deg);
    let class_seed = splitmix(seed ^ 0x02);
    for j in 0..grid.height {
        for i in 0..grid.width {
            let k = grid.index(i, j);
            let n = fbm(class_seed, i as f64 * grid.cell_size, j as f64 * grid.cell_size, 3, 10.0);
            grid.terrain_class[k] = if n < -0.15 {
                TerrainClass::Sand
            } else if n > 0.15 {
                TerrainClass::Gravel
            } else {
                TerrainClass::Grass
            };
        }
    }
    fill_roughness(&mut grid, splitmix(seed ^ 0x03));
    grid.assign_materials(&opts.friction);
    Ok(grid)
}

/// Central cone with a rounded cap. The west half is grass, the east half
/// gravel, so the two sides of the hill have different surface conditions.
pub fn generate_hill(seed: u64, size_m: f64, slope_deg: f64, opts: &GridOptions) -> Result<TerrainGrid> {
    check_slope(slope_deg)?;
    let mut grid = TerrainGrid::blank(size_m, opts.cell_size, seed)?;
    let center = 0.5 * grid.extent_x();
    let r_base = 0.35 * grid.extent_x();
    let r_cap = (0.05 * grid.extent_x()).max(2.0 * grid.cell_size).min(0.5 * r_base);
    let k = slope_deg.to_radians().tan();
    for j in 0..grid.height {
        for i in 0..grid.width {
            let idx = grid.index(i, j);
            let (x, y) = (i as f64 * grid.cell_size, j as f64 * grid.cell_size);
            let r = (x - center).hypot(y - center);
            grid.elevation[idx] = if r >= r_base {
                0.0
            } else if r >= r_cap {
                k * (r_base - r)
            } else {
                k * (r_base - r_cap) + k * (r_cap * r_cap - r * r) / (2.0 * r_cap)
            };
            grid.terrain_class[idx] = if x < center {
                TerrainClass::Grass
            } else {
                TerrainClass::Gravel
            };
        }
    }
    fill_roughness(&mut grid, splitmix(seed ^ 0x13));
    grid.assign_materials(&opts.friction);
    Ok(grid)
}

/// Which quadrant class a position falls into (south-west grass, south-east
/// gravel, north-west sand, north-east wet clay).
pub fn directional_quadrant(x: f64, y: f64, center: f64) -> TerrainClass {
    match (x >= center, y >= center) {
        (false, false) => TerrainClass::Grass,
        (true, false) => TerrainClass::Gravel,
        (false, true) => TerrainClass::Sand,
        (true, true) => TerrainClass::WetClay,
    }
}

/// Four terrain-type quadrants laid over gentle undulations.
pub fn generate_directional(seed: u64, size_m: f64, opts: &GridOptions) -> Result<TerrainGrid> {
    check_slope(opts.directional_max_slope_deg)?;
    let mut grid = TerrainGrid::blank(size_m, opts.cell_size, seed)?;
    fill_noise_elevation(&mut grid, splitmix(seed ^ 0x21), 10.0);
    grid.rescale_to_max_slope(opts.directional_max_slope_deg);
    let center = 0.5 * grid.extent_x();
    for j in 0..grid.height {
        for i in 0..grid.width {
            let k = grid.index(i, j);
            let class = directional_quadrant(i as f64 * grid.cell_size, j as f64 * grid.cell_size, center);
            grid.terrain_class[k] = class;
            grid.wet[k] = class == TerrainClass::WetClay && opts.wet_clay_wet;
        }
    }
    fill_roughness(&mut grid, splitmix(seed ^ 0x23));
    grid.assign_materials(&opts.friction);
    Ok(grid)
}

/// Default max slope of the undulating scenario (degrees).
pub const UNDULATING_MAX_SLOPE_DEG: f64 = 30.0;
/// Flank slope of the hill scenario (degrees).
pub const HILL_SLOPE_DEG: f64 = 20.0;

pub fn generate(scenario: Scenario, seed: u64, size_m: f64, opts: &GridOptions) -> Result<TerrainGrid> {
    match scenario {
        Scenario::Undulating => generate_undulating(seed, size_m, UNDULATING_MAX_SLOPE_DEG, opts),
        Scenario::Hill => generate_hill(seed, size_m, HILL_SLOPE_DEG, opts),
        Scenario::Directional => generate_directional(seed, size_m, opts),
    }
}

fn unit_or_east(dx: f64, dy: f64) -> [f64; 2] {
    let n = dx.hypot(dy);
    if n < 1e-12 {
        [1.0, 0.0]
    } else {
        [dx / n, dy / n]
    }
}

/// Features at `(x, y)` with zero curvature. At the goal itself the goal
/// direction falls back to east so it stays a unit vector.
pub fn sample_features(grid: &TerrainGrid, x: f64, y: f64, goal: (f64, f64)) -> Result<FeatureVec> {
    sample_features_with_curvature(grid, x, y, goal, 0.0)
}

pub fn sample_features_with_curvature(
    grid: &TerrainGrid,
    x: f64,
    y: f64,
    goal: (f64, f64),
    curvature: f64,
) -> Result<FeatureVec> {
    let z = grid.elevation_at(x, y)?;
    let grad_z = grid.gradient_at(x, y)?;
    let norm = (1.0 + grad_z[0] * grad_z[0] + grad_z[1] * grad_z[1]).sqrt();
    let k = grid.nearest(x, y);
    Ok(FeatureVec {
        z,
        grad_z,
        normal: [-grad_z[0] / norm, -grad_z[1] / norm, 1.0 / norm],
        terrain_class: grid.terrain_class[k],
        roughness: grid.roughness[k],
        friction: grid.friction[k],
        obstacle_density: grid.obstacle_density_at(x, y)?,
        curvature,
        goal_dir: unit_or_east(goal.0 - x, goal.1 - y),
    })
}

/// Signed slope angle along `heading`; positive is uphill.
pub fn slope_along(grid: &TerrainGrid, x: f64, y: f64, heading: f64) -> Result<f64> {
    let g = grid.gradient_at(x, y)?;
    Ok((g[0] * heading.cos() + g[1] * heading.sin()).atan())
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts() -> GridOptions {
        GridOptions::default()
    }

    #[test]
    fn undulating_hits_requested_max_slope() {
        for seed in [1, 2, 3] {
            let g = generate_undulating(seed, 32.0, 30.0, &opts()).unwrap();
            let s = g.max_slope_deg();
            assert!((29.5..=30.0 + 1e-9).contains(&s), "max slope {s}");
            assert!(g.elevation.iter().all(|z| z.is_finite()));
            assert!(g.friction.iter().all(|&f| f > 0.0));
        }
    }

    #[test]
    fn near_zero_slope_is_nearly_flat() {
        let g = generate_undulating(4, 32.0, 0.01, &opts()).unwrap();
        let max = g.elevation.iter().copied().fold(f64::MIN, f64::max);
        let min = g.elevation.iter().copied().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-3 * 32.0);
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let a = generate_undulating(9, 32.0, 30.0, &opts()).unwrap();
        let b = generate_undulating(9, 32.0, 30.0, &opts()).unwrap();
        assert_eq!(a, b);
        let c = generate_undulating(10, 32.0, 30.0, &opts()).unwrap();
        assert_ne!(a.elevation, c.elevation);
        assert_eq!(generate_directional(3, 32.0, &opts()).unwrap(), generate_directional(3, 32.0, &opts()).unwrap());
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(generate_undulating(1, 32.0, 0.0, &opts()).is_err());
        assert!(generate_undulating(1, 32.0, 46.0, &opts()).is_err());
        assert!(generate_hill(1, -1.0, 20.0, &opts()).is_err());
    }

    #[test]
    fn hill_geometry() {
        let g = generate_hill(1, 32.0, 20.0, &opts()).unwrap();
        let flank = g.flank_slope_deg();
        assert!((flank - 20.0).abs() <= 0.5, "flank slope {flank}");
        assert!(g.max_slope_deg() <= 20.0 + 1e-9);
        let c = 0.5 * g.extent_x();
        let top = g.elevation_at(c, c).unwrap();
        assert!(g.elevation.iter().all(|&z| z <= top + 1e-12));
        let west = g.friction_at(c - 5.0, c).unwrap();
        let east = g.friction_at(c + 5.0, c).unwrap();
        assert_ne!(west, east);
    }

    #[test]
    fn directional_has_four_quadrant_classes() {
        let g = generate_directional(5, 32.0, &opts()).unwrap();
        assert_eq!(g.distinct_classes(), TerrainClass::ALL.to_vec());
        let c = 0.5 * g.extent_x();
        for (x, y) in [(3.0, 3.0), (30.0, 3.0), (3.0, 30.0), (30.0, 30.0)] {
            assert_eq!(g.class_at(x, y).unwrap(), directional_quadrant(x, y, c));
        }
        assert!(g.wet_at(30.0, 30.0).unwrap());
        assert_eq!(g.friction_at(30.0, 30.0).unwrap(), 1.4);
        let dry = generate_directional(5, 32.0, &GridOptions { wet_clay_wet: false, ..opts() }).unwrap();
        assert_eq!(dry.friction_at(30.0, 30.0).unwrap(), 0.5);
    }

    #[test]
    fn flat_features() {
        let g = TerrainGrid::flat(10.0, 0.5, TerrainClass::Grass).unwrap();
        let f = sample_features(&g, 5.0, 5.0, (5.0, 9.0)).unwrap();
        assert_eq!(f.grad_z, [0.0, 0.0]);
        assert_eq!(f.normal, [0.0, 0.0, 1.0]);
        assert_eq!(f.goal_dir, [0.0, 1.0]);
        assert_eq!(f.to_vec().len(), FeatureVec::LEN);
    }

    #[test]
    fn ramp_gradient_and_slope() {
        let g = TerrainGrid::from_fn(10.0, 0.5, TerrainClass::Grass, |x, _| 0.2 * x).unwrap();
        for (x, y) in [(5.0, 5.0), (0.0, 2.0), (10.0, 10.0), (3.3, 7.1)] {
            let f = sample_features(&g, x, y, (0.0, 0.0)).unwrap();
            assert!((f.grad_z[0] - 0.2).abs() < 1e-6 && f.grad_z[1].abs() < 1e-6);
            let n = f.normal;
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-9);
        }
        let up = slope_along(&g, 5.0, 5.0, 0.0).unwrap();
        assert!((up - 0.2f64.atan()).abs() < 1e-9);
        assert!((up - 0.1974).abs() < 1e-4);
        assert!((slope_along(&g, 5.0, 5.0, PI).unwrap() + up).abs() < 1e-9);
        assert!(slope_along(&g, 5.0, 5.0, PI / 2.0).unwrap().abs() < 1e-9);
    }

    #[test]
    fn out_of_bounds_queries_fail() {
        let g = TerrainGrid::flat(10.0, 0.5, TerrainClass::Grass).unwrap();
        assert!(matches!(sample_features(&g, -0.1, 1.0, (0.0, 0.0)), Err(Error::OutOfBounds { .. })));
        assert!(matches!(slope_along(&g, 1.0, 10.5, 0.0), Err(Error::OutOfBounds { .. })));
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate_directional(8, 16.0, &opts()).unwrap();
        g.write_dir(dir.path()).unwrap();
        let back = TerrainGrid::read_dir(dir.path()).unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #[test]
        fn slope_along_is_antisymmetric(x in 0.0..32.0f64, y in 0.0..32.0f64, h in -PI..PI) {
            let g = generate_undulating(2, 32.0, 30.0, &GridOptions::default()).unwrap();
            let a = slope_along(&g, x, y, h).unwrap();
            let b = slope_along(&g, x, y, h + PI).unwrap();
            prop_assert!((a + b).abs() < 1e-9);
        }

        #[test]
        fn features_are_continuous(x in 1.0..31.0f64, y in 1.0..31.0f64) {
            let g = generate_hill(2, 32.0, 20.0, &GridOptions::default()).unwrap();
            let a = sample_features(&g, x, y, (16.0, 30.0)).unwrap().to_vec();
            let b = sample_features(&g, x + 1e-6, y - 1e-6, (16.0, 30.0)).unwrap().to_vec();
            // class, friction, roughness and density are piecewise constant; skip
            // the rare sample that lands on a boundary
            if a[6] == b[6] && a[7] == b[7] && a[9] == b[9] {
                for (u, v) in a.iter().zip(&b) {
                    prop_assert!((u - v).abs() < 1e-3);
                }
            }
        }

        #[test]
        fn wrap_angle_range(a in -50.0..50.0f64) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }
}
