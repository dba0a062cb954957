//! On-disk tile stacks (JSON manifest + raw little-endian `f32` payloads) and
//! stitched outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::StitchReport;
use crate::compose::{Extent, Mosaic};
use crate::error::{io_err, Error, Result};
use crate::grid::Grid;

/// Name reserved for the synthesized x-derivative channel.
pub const DERIV_X: &str = "deriv_x";

pub const MANIFEST_VERSION: u32 = 1;

/// Gray level used for invalid pixels in previews.
pub const PREVIEW_INVALID_GRAY: u8 = 128;

pub const MOSAIC_PAYLOAD: &str = "mosaic.f32";
pub const MOSAIC_MANIFEST: &str = "mosaic.json";
pub const PREVIEW_FILE: &str = "preview.png";
pub const REPORT_FILE: &str = "report.json";
pub const LAYOUT_FILE: &str = "layout.json";

/// Minimum tile side length accepted by the loader.
pub const MIN_TILE_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChannelId(String);

impl ChannelId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::InvalidChannel("channel name is empty".into()));
        }
        Ok(Self(name))
    }

    pub fn deriv_x() -> Self {
        Self(DERIV_X.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_deriv_x(&self) -> bool {
        self.0 == DERIV_X
    }
}

impl TryFrom<String> for ChannelId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<ChannelId> for String {
    fn from(c: ChannelId) -> String {
        c.0
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One scan position with all of its channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub index: usize,
    pub grids: BTreeMap<ChannelId, Grid>,
    /// Micrometers per pixel, when known.
    pub pixel_size: Option<f64>,
    /// Nominal (row, col) in the acquisition array. Never used for registration.
    pub origin_hint: Option<(f64, f64)>,
}

impl Tile {
    pub fn new(index: usize) -> Self {
        Self {
            index,
            grids: BTreeMap::new(),
            pixel_size: None,
            origin_hint: None,
        }
    }

    pub fn with_channel(mut self, channel: ChannelId, grid: Grid) -> Self {
        self.grids.insert(channel, grid);
        self
    }

    pub fn channel(&self, channel: &ChannelId) -> Option<&Grid> {
        self.grids.get(channel)
    }

    /// (width, height) shared by every channel grid.
    pub fn dims(&self) -> (usize, usize) {
        self.grids.values().next().map(Grid::dims).unwrap_or((0, 0))
    }

    fn check(&self) -> Result<()> {
        let mut dims = None;
        for (ch, g) in &self.grids {
            let (w, h) = g.dims();
            if w < MIN_TILE_SIDE || h < MIN_TILE_SIDE {
                return Err(Error::InvalidTile {
                    tile: self.index,
                    message: format!("channel {ch} is {w}x{h}, minimum is {MIN_TILE_SIDE}x{MIN_TILE_SIDE}"),
                });
            }
            match dims {
                None => dims = Some((w, h)),
                Some(d) if d != (w, h) => {
                    return Err(Error::InvalidTile {
                        tile: self.index,
                        message: format!("channel {ch} is {w}x{h}, other channels are {}x{}", d.0, d.1),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileStack {
    pub tiles: Vec<Tile>,
    pub channels: Vec<ChannelId>,
    pub meta: serde_json::Value,
}

impl TileStack {
    /// Validates the stack invariants and builds it.
    pub fn new(tiles: Vec<Tile>, channels: Vec<ChannelId>, meta: serde_json::Value) -> Result<Self> {
        let stack = Self {
            tiles,
            channels,
            meta,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiles.len() < 2 {
            return Err(Error::TooFewTiles(self.tiles.len()));
        }
        let unique: BTreeSet<_> = self.channels.iter().collect();
        if unique.len() != self.channels.len() {
            return Err(Error::InvalidChannel("duplicate channel in manifest".into()));
        }
        for (pos, tile) in self.tiles.iter().enumerate() {
            if tile.index != pos {
                return Err(Error::InvalidTile {
                    tile: tile.index,
                    message: format!("index does not match stack position {pos}"),
                });
            }
            for ch in &self.channels {
                if !ch.is_deriv_x() && !tile.grids.contains_key(ch) {
                    return Err(Error::MissingChannel {
                        tile: tile.index,
                        channel: ch.to_string(),
                    });
                }
            }
            tile.check()?;
        }
        Ok(())
    }

    pub fn has_channel(&self, channel: &ChannelId) -> bool {
        self.tiles.iter().all(|t| t.grids.contains_key(channel))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub channels: Vec<ChannelId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodata: Option<f32>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
    pub tiles: Vec<ManifestTile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTile {
    pub index: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_hint: Option<(f64, f64)>,
    pub payloads: BTreeMap<ChannelId, PathBuf>,
}

/// Sidecar written next to a stitched payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridManifest {
    pub version: u32,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Extent>,
    pub payload: PathBuf,
}

enum PayloadError {
    Io(Error),
    Size(usize),
}

fn read_payload(path: &Path, width: usize, height: usize, nodata: Option<f32>) -> std::result::Result<Grid, PayloadError> {
    let bytes = fs::read(path).map_err(|e| PayloadError::Io(io_err(path)(e)))?;
    if bytes.len() != width * height * 4 {
        return Err(PayloadError::Size(bytes.len()));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|b| {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            match nodata {
                Some(nd) if v == nd => f64::NAN,
                _ => f64::from(v),
            }
        })
        .collect();
    Ok(Grid::from_samples(width, height, samples))
}

fn write_payload(path: &Path, grid: &Grid) -> Result<()> {
    let mut bytes = Vec::with_capacity(grid.samples().len() * 4);
    for v in grid.to_f32() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            message: format!("unsupported version {}", manifest.version),
        });
    }
    Ok(manifest)
}

/// Loads a tile stack. Tiles keep manifest order and `tile.index` equals the
/// manifest position.
pub fn load_stack(manifest_path: &Path) -> Result<TileStack> {
    let manifest = read_manifest(manifest_path)?;
    if manifest.tiles.len() < 2 {
        return Err(Error::TooFewTiles(manifest.tiles.len()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let loaded: Vec<Result<Tile>> = manifest
        .tiles
        .par_iter()
        .enumerate()
        .map(|(pos, mt)| load_tile(base, pos, mt, &manifest))
        .collect();
    let tiles = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    TileStack::new(tiles, manifest.channels, manifest.meta)
}

fn load_tile(base: &Path, pos: usize, mt: &ManifestTile, manifest: &Manifest) -> Result<Tile> {
    if mt.index != pos {
        return Err(Error::InvalidTile {
            tile: mt.index,
            message: format!("index does not match manifest position {pos}"),
        });
    }
    let mut tile = Tile::new(pos);
    tile.pixel_size = mt.pixel_size;
    tile.origin_hint = mt.origin_hint;
    for ch in &manifest.channels {
        let Some(rel) = mt.payloads.get(ch) else {
            if ch.is_deriv_x() {
                continue;
            }
            return Err(Error::MissingChannel {
                tile: pos,
                channel: ch.to_string(),
            });
        };
        let path = base.join(rel);
        let grid = read_payload(&path, mt.width, mt.height, manifest.nodata).map_err(|e| match e {
            PayloadError::Size(actual) => Error::DimensionMismatch {
                tile: pos,
                channel: ch.to_string(),
                expected: mt.width * mt.height * 4,
                actual,
            },
            PayloadError::Io(e) => e,
        })?;
        tile.grids.insert(ch.clone(), grid);
    }
    Ok(tile)
}

/// Writes a stack as `manifest.json` plus one payload per tile and channel.
/// Returns the manifest path.
pub fn save_stack(stack: &TileStack, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tiles = Vec::with_capacity(stack.tiles.len());
    for tile in &stack.tiles {
        let (width, height) = tile.dims();
        let mut payloads = BTreeMap::new();
        for (ch, grid) in &tile.grids {
            let name = PathBuf::from(format!("tile{:03}_{}.f32", tile.index, ch));
            write_payload(&dir.join(&name), grid)?;
            payloads.insert(ch.clone(), name);
        }
        tiles.push(ManifestTile {
            index: tile.index,
            height,
            width,
            pixel_size: tile.pixel_size,
            origin_hint: tile.origin_hint,
            payloads,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        channels: stack.channels.clone(),
        nodata: None,
        meta: stack.meta.clone(),
        tiles,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Persists a grid as payload + sidecar manifest.
pub fn save_grid(grid: &Grid, extent: Option<Extent>, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let payload = PathBuf::from(format!("{stem}.f32"));
    write_payload(&dir.join(&payload), grid)?;
    let sidecar = GridManifest {
        version: MANIFEST_VERSION,
        width: grid.width(),
        height: grid.height(),
        extent,
        payload,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &sidecar)?;
    Ok(path)
}

/// Loads a grid written by [`save_grid`] / [`save_outputs`].
pub fn load_grid(sidecar_path: &Path) -> Result<(Grid, Option<Extent>)> {
    let text = fs::read_to_string(sidecar_path).map_err(io_err(sidecar_path))?;
    let sidecar: GridManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: sidecar_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = sidecar_path.parent().unwrap_or(Path::new("."));
    let path = base.join(&sidecar.payload);
    let grid = read_payload(&path, sidecar.width, sidecar.height, None).map_err(|e| match e {
        PayloadError::Size(actual) => Error::DimensionMismatch {
            tile: 0,
            channel: "mosaic".into(),
            expected: sidecar.width * sidecar.height * 4,
            actual,
        },
        PayloadError::Io(e) => e,
    })?;
    Ok((grid, sidecar.extent))
}

/// 8-bit preview: linear min-max over valid pixels, invalid pixels at
/// [`PREVIEW_INVALID_GRAY`]. Valid pixels never take the sentinel level.
pub fn preview_image(grid: &Grid) -> image::GrayImage {
    let (lo, hi) = grid.valid_range().unwrap_or((0.0, 0.0));
    let span = hi - lo;
    let mut img = image::GrayImage::new(grid.width() as u32, grid.height() as u32);
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            let px = match grid.value(r, c) {
                None => PREVIEW_INVALID_GRAY,
                Some(_) if span <= 0.0 => 0,
                Some(v) => match (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8 {
                    PREVIEW_INVALID_GRAY => PREVIEW_INVALID_GRAY - 1,
                    g => g,
                },
            };
            img.put_pixel(c as u32, r as u32, image::Luma([px]));
        }
    }
    img
}

/// Writes the stitched payload + sidecar, preview PNG, layout and report.
/// Nothing is written when the mosaic has no valid pixel.
pub fn save_outputs(mosaic: &Mosaic, report: &StitchReport, out_dir: &Path) -> Result<()> {
    if mosaic.grid.valid_count() == 0 {
        return Err(Error::NoValidPixels);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    save_grid(&mosaic.grid, Some(mosaic.extent), out_dir, "mosaic")?;
    let preview_path = out_dir.join(PREVIEW_FILE);
    preview_image(&mosaic.grid)
        .save_with_format(&preview_path, image::ImageFormat::Png)?;
    write_json(&out_dir.join(LAYOUT_FILE), &mosaic.layout.to_record())?;
    write_json(&out_dir.join(REPORT_FILE), report)?;
    Ok(())
}
