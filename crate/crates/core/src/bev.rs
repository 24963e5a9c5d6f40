//! Bird's-eye-view feature maps and the map-level operations used for
//! multi-source fusion and compression: element-wise fusion rules, rigid
//! registration between grids, 2x2 max pooling and 1x1 channel projection.
//!
//! A map is an `H x W x C` grid stored cell-major (`(row * W + col) * C + ch`).
//! Rows run along the local +y axis and columns along local +x; the center of
//! cell `(r, c)` sits at `((c + 0.5) * cell, (r + 0.5) * cell)` in the map
//! frame, and `origin` places that frame in the world.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Vec2};

/// Default BEV grid resolution in meters.
pub const DEFAULT_CELL_SIZE: f64 = 0.16;

/// Proper rigid motion of the plane: rotate, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform2D {
    rotation: f64,
    pub translation: Vec2,
}

impl Default for RigidTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform2D {
    pub fn new(rotation: f64, translation: Vec2) -> Self {
        Self {
            rotation: normalize_angle(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, Vec2::ZERO)
    }

    pub fn translation(x: f64, y: f64) -> Self {
        Self::new(0.0, Vec2::new(x, y))
    }

    /// Rotation by `angle` about a fixed point.
    pub fn rotation_about(angle: f64, pivot: Vec2) -> Self {
        Self::new(angle, pivot - pivot.rotate(angle))
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotate(self.rotation) + self.translation
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.rotation, -(self.translation.rotate(-self.rotation)))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform2D) -> Self {
        Self::new(self.rotation + other.rotation, self.apply(other.translation))
    }

    pub fn approx_eq(&self, other: &RigidTransform2D, tol: f64) -> bool {
        normalize_angle(self.rotation - other.rotation).abs() <= tol
            && (self.translation - other.translation).norm() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevMap {
    height: usize,
    width: usize,
    channels: usize,
    cell_size: f64,
    origin: RigidTransform2D,
    data: Vec<f32>,
}

impl BevMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        cell_size: f64,
        origin: RigidTransform2D,
        data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "data length {} != {height}*{width}*{channels}",
                data.len()
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Argument(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite feature value at {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            cell_size,
            origin,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            DEFAULT_CELL_SIZE,
            RigidTransform2D::identity(),
            vec![0.0; height * width * channels],
        )
    }

    /// Build a map by evaluating `f(row, col, channel)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(
            height,
            width,
            channels,
            DEFAULT_CELL_SIZE,
            RigidTransform2D::identity(),
            data,
        )
    }

    pub fn with_origin(mut self, origin: RigidTransform2D) -> Self {
        self.origin = origin;
        self
    }

    pub fn with_cell_size(self, cell_size: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            cell_size,
            self.origin,
            self.data,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn origin(&self) -> RigidTransform2D {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// Size of the map as dense float32.
    pub fn dense_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        assert!(value.is_finite(), "feature values must be finite");
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }

    /// Feature vector of one cell.
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn cells(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.channels)
    }

    /// Element-wise scaling.
    pub fn scaled(&self, k: f32) -> BevMap {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= k);
        out
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean_value(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    fn same_grid(&self, other: &BevMap) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
            && (self.cell_size - other.cell_size).abs() <= 1e-12
            && self.origin.approx_eq(&other.origin, 1e-9)
    }

    fn with_data(&self, data: Vec<f32>) -> BevMap {
        BevMap {
            data,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> BevMap {
        BevMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            cell_size: self.cell_size,
            origin: self.origin,
            data: Vec::new(),
        }
    }
}

fn check_stack(maps: &[BevMap]) -> Result<&BevMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Argument("fusion needs at least one map".into()))?;
    for (i, m) in maps.iter().enumerate().skip(1) {
        if !first.same_grid(m) {
            return Err(Error::Dimension(format!(
                "map {i} ({}x{}x{}) is not co-registered with map 0 ({}x{}x{})",
                m.height, m.width, m.channels, first.height, first.width, first.channels
            )));
        }
    }
    Ok(first)
}

/// Element-wise arithmetic mean of co-registered maps.
pub fn fuse_average(maps: &[BevMap]) -> Result<BevMap> {
    let first = check_stack(maps)?;
    let n = maps.len() as f64;
    let data = (0..first.data.len())
        .map(|i| (maps.iter().map(|m| m.data[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Ok(first.with_data(data))
}

/// Element-wise maximum of co-registered maps.
pub fn fuse_max(maps: &[BevMap]) -> Result<BevMap> {
    let first = check_stack(maps)?;
    let data = (0..first.data.len())
        .map(|i| {
            maps.iter()
                .map(|m| m.data[i])
                .fold(f32::NEG_INFINITY, f32::max)
        })
        .collect();
    Ok(first.with_data(data))
}

/// Reduction of the `[average, max]` pair to one map: per channel
/// `out = w_avg[ch] * avg + w_max[ch] * max`. Stored as a 2-row matrix
/// (row 0 weighs the average, row 1 the maximum) with either one column,
/// broadcast over channels, or one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKernel {
    weights: ChannelMatrix,
}

impl Default for SpatialKernel {
    fn default() -> Self {
        Self::blend(0.5, 0.5)
    }
}

impl SpatialKernel {
    pub fn blend(w_avg: f32, w_max: f32) -> Self {
        Self {
            weights: ChannelMatrix::new(2, 1, vec![w_avg, w_max]).expect("2x1 kernel"),
        }
    }

    pub fn from_matrix(weights: ChannelMatrix) -> Result<Self> {
        if weights.rows() != 2 {
            return Err(Error::Config(format!(
                "spatial fusion kernel needs 2 rows (avg, max), got {}",
                weights.rows()
            )));
        }
        Ok(Self { weights })
    }

    pub fn matrix(&self) -> &ChannelMatrix {
        &self.weights
    }

    fn weights_for(&self, ch: usize, channels: usize) -> Result<(f32, f32)> {
        match self.weights.cols() {
            1 => Ok((self.weights.get(0, 0), self.weights.get(1, 0))),
            n if n == channels => Ok((self.weights.get(0, ch), self.weights.get(1, ch))),
            n => Err(Error::Config(format!(
                "spatial fusion kernel has {n} columns, map has {channels} channels"
            ))),
        }
    }
}

/// Spatially adaptive fusion: the kernel reduces the stacked average- and
/// max-pooled maps to a single map.
pub fn fuse_spatial_adaptive(maps: &[BevMap], kernel: &SpatialKernel) -> Result<BevMap> {
    let avg = fuse_average(maps)?;
    let max = fuse_max(maps)?;
    let c = avg.channels;
    let weights = (0..c)
        .map(|ch| kernel.weights_for(ch, c))
        .collect::<Result<Vec<_>>>()?;
    let data = avg
        .data
        .iter()
        .zip(&max.data)
        .enumerate()
        .map(|(i, (&a, &m))| {
            let (wa, wm) = weights[i % c];
            wa * a + wm * m
        })
        .collect();
    Ok(avg.with_data(data))
}

/// Per-map fusion weights, normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights(pub Vec<f64>);

impl FusionWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// Normalize raw nonnegative scores; all-zero scores give uniform weights.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if let Some(s) = scores.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::Argument(format!(
                "map scores must be finite and nonnegative, got {s}"
            )));
        }
        let total: f64 = scores.iter().sum();
        if total == 0.0 {
            return Ok(Self::uniform(scores.len()));
        }
        Ok(Self(scores.iter().map(|s| s / total).collect()))
    }
}

/// Scores each map from its two scalar descriptors `(max, mean)`.
pub trait MapScore {
    fn weights(&self, descriptors: &[(f64, f64)]) -> Result<FusionWeights>;
}

impl<F: Fn(f64, f64) -> f64> MapScore for F {
    fn weights(&self, descriptors: &[(f64, f64)]) -> Result<FusionWeights> {
        let scores: Vec<f64> = descriptors.iter().map(|&(mx, avg)| self(mx, avg)).collect();
        FusionWeights::from_scores(&scores)
    }
}

/// Default descriptor score `exp(max + mean)`, normalized as a softmax so
/// large descriptors cannot overflow.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpScore;

impl MapScore for ExpScore {
    fn weights(&self, descriptors: &[(f64, f64)]) -> Result<FusionWeights> {
        let logits: Vec<f64> = descriptors.iter().map(|&(mx, avg)| mx + avg).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scores: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        FusionWeights::from_scores(&scores)
    }
}

/// Channel-adaptive fusion: weighted sum of the maps, weights derived from
/// each map's global max and mean.
pub fn fuse_channel_adaptive(
    maps: &[BevMap],
    score: &impl MapScore,
) -> Result<(BevMap, FusionWeights)> {
    let first = check_stack(maps)?;
    let descriptors: Vec<(f64, f64)> = maps
        .iter()
        .map(|m| (m.max_value() as f64, m.mean_value()))
        .collect();
    let weights = score.weights(&descriptors)?;
    let data = (0..first.data.len())
        .map(|i| {
            maps.iter()
                .zip(&weights.0)
                .map(|(m, w)| w * m.data[i] as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Ok((first.with_data(data), weights))
}

/// Resample `map` into the frame reached through `t` (input-local to
/// output-local coordinates). Nearest-neighbor: each output cell copies the
/// input cell containing its inverse-mapped center, zero when that falls
/// outside the input grid.
pub fn warp(map: &BevMap, t: &RigidTransform2D) -> BevMap {
    let inv = t.inverse();
    let cs = map.cell_size;
    let c = map.channels;
    let mut data = vec![0.0_f32; map.data.len()];
    for r in 0..map.height {
        for col in 0..map.width {
            let p = inv.apply(Vec2::new((col as f64 + 0.5) * cs, (r as f64 + 0.5) * cs));
            let sc = (p.x / cs).floor();
            let sr = (p.y / cs).floor();
            if sc < 0.0 || sr < 0.0 || sc >= map.width as f64 || sr >= map.height as f64 {
                continue;
            }
            let src = (sr as usize * map.width + sc as usize) * c;
            let dst = (r * map.width + col) * c;
            data[dst..dst + c].copy_from_slice(&map.data[src..src + c]);
        }
    }
    BevMap {
        origin: map.origin.compose(&inv),
        ..map.with_data(data)
    }
}

/// Re-register `map` onto a grid of the same shape whose frame is `target`.
pub fn warp_to(map: &BevMap, target: &RigidTransform2D) -> BevMap {
    let t = target.inverse().compose(&map.origin);
    let mut out = warp(map, &t);
    out.origin = *target;
    out
}

/// 2x2 max pooling; halves the grid and doubles the cell size.
pub fn max_pool2(map: &BevMap) -> Result<BevMap> {
    if map.height % 2 != 0 || map.width % 2 != 0 {
        return Err(Error::Dimension(format!(
            "max pooling needs even spatial dims, got {}x{}",
            map.height, map.width
        )));
    }
    let (h, w, c) = (map.height / 2, map.width / 2, map.channels);
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let v = map
                    .get(2 * r, 2 * col, ch)
                    .max(map.get(2 * r, 2 * col + 1, ch))
                    .max(map.get(2 * r + 1, 2 * col, ch))
                    .max(map.get(2 * r + 1, 2 * col + 1, ch));
                data.push(v);
            }
        }
    }
    BevMap::new(h, w, c, map.cell_size * 2.0, map.origin, data)
}

/// Nearest-neighbor 2x upsampling; halves the cell size.
pub fn upsample2(map: &BevMap) -> BevMap {
    let (h, w, c) = (map.height * 2, map.width * 2, map.channels);
    let mut data = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            data.extend_from_slice(map.cell(r / 2, col / 2));
        }
    }
    BevMap {
        height: h,
        width: w,
        channels: c,
        cell_size: map.cell_size / 2.0,
        origin: map.origin,
        data,
    }
}

const WEIGHT_MAGIC: &[u8; 4] = b"BEVW";

/// Dense row-major float32 matrix: channel projections (rows = input
/// channels) and fusion kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl ChannelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} with {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data,
        }
    }

    /// `rows x cols` matrix with orthonormal columns drawn from a seeded
    /// Gaussian and orthogonalized by modified Gram-Schmidt. Requires
    /// `cols <= rows`.
    pub fn seeded_orthonormal(rows: usize, cols: usize, seed: u64) -> Result<Self> {
        if cols == 0 || cols > rows {
            return Err(Error::Dimension(format!(
                "orthonormal columns need 0 < cols <= rows, got {rows}x{cols}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
        while columns.len() < cols {
            let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
            for q in &columns {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= n);
            columns.push(v);
        }
        let mut data = vec![0.0_f32; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * cols + j] = v as f32;
            }
        }
        Self::new(rows, cols, data)
    }

    /// Default encoder/decoder pair `(E, E^T)` for `channels -> channels / factor`.
    pub fn default_codec_pair(channels: usize, factor: usize, seed: u64) -> Result<(Self, Self)> {
        if factor == 0 || channels % factor != 0 {
            return Err(Error::Config(format!(
                "channel factor {factor} does not divide {channels}"
            )));
        }
        let enc = Self::seeded_orthonormal(channels, channels / factor, seed)?;
        let dec = enc.transpose();
        Ok((enc, dec))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.get(r, c);
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&(self.rows as u16).to_le_bytes());
        out.extend_from_slice(&(self.cols as u16).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::decode("header", "weight file shorter than 8 bytes"));
        }
        if &bytes[..4] != WEIGHT_MAGIC {
            return Err(Error::decode("magic", "expected BEVW"));
        }
        let rows = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
        let cols = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        let body = &bytes[8..];
        if body.len() != rows * cols * 4 {
            return Err(Error::decode(
                "values",
                format!("expected {} bytes for {rows}x{cols}, got {}", rows * cols * 4, body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(rows, cols, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

const MAP_MAGIC: &[u8; 4] = b"BEVM";
const MAP_HEADER_LEN: usize = 4 + 3 * 4 + 4 * 8;

impl BevMap {
    /// Dense file form: magic "BEVM", u32 H, W, C, f64 cell size, f64 origin
    /// x, y, yaw, then the cell-major float32 values, all little-endian.
    pub fn to_file_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAP_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAP_MAGIC);
        for d in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let o = self.origin;
        for v in [self.cell_size, o.translation.x, o.translation.y, o.rotation()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAP_HEADER_LEN {
            return Err(Error::decode("header", format!("map file shorter than {MAP_HEADER_LEN} bytes")));
        }
        if &bytes[..4] != MAP_MAGIC {
            return Err(Error::decode("magic", "expected BEVM"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        let f = |i: usize| f64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().expect("8 bytes"));
        let (h, w, c) = (u(0), u(1), u(2));
        let body = &bytes[MAP_HEADER_LEN..];
        let expected = h.checked_mul(w).and_then(|n| n.checked_mul(c)).and_then(|n| n.checked_mul(4));
        if expected != Some(body.len()) {
            return Err(Error::decode("values", format!("{h}x{w}x{c} map needs {expected:?} bytes, got {}", body.len())));
        }
        let data = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let origin = RigidTransform2D::new(f(3), Vec2::new(f(1), f(2)));
        BevMap::new(h, w, c, f(0), origin, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Per-cell `x^T M`: a 1x1 convolution from `M.rows()` to `M.cols()` channels.
pub fn project_channels(map: &BevMap, matrix: &ChannelMatrix) -> Result<BevMap> {
    if matrix.rows != map.channels {
        return Err(Error::Dimension(format!(
            "projection has {} input rows, map has {} channels",
            matrix.rows, map.channels
        )));
    }
    let cout = matrix.cols;
    let mut data = Vec::with_capacity(map.num_cells() * cout);
    let mut acc = vec![0.0_f64; cout];
    for cell in map.cells() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (i, &x) in cell.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &matrix.data[i * cout..(i + 1) * cout];
            for (a, &m) in acc.iter_mut().zip(row) {
                *a += x as f64 * m as f64;
            }
        }
        data.extend(acc.iter().map(|&a| a as f32));
    }
    BevMap::new(
        map.height,
        map.width,
        cout,
        map.cell_size,
        map.origin,
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ramp(h: usize, w: usize, c: usize) -> BevMap {
        BevMap::from_fn(h, w, c, |r, col, ch| {
            ((r * 7 + col * 3 + ch) as f32 * 0.37).sin() * 2.0
        })
        .unwrap()
    }

    fn assert_close(a: &BevMap, b: &BevMap, rel: f32) {
        assert_eq!(a.data.len(), b.data.len());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(
                (x - y).abs() <= rel * x.abs().max(y.abs()).max(1.0),
                "{x} vs {y}"
            );
        }
    }

    #[test]
    fn construction_rejects_bad_maps() {
        assert!(BevMap::zeros(0, 2, 2).is_err());
        let origin = RigidTransform2D::identity();
        assert!(BevMap::new(1, 1, 2, 0.16, origin, vec![0.0]).is_err());
        assert!(BevMap::new(1, 1, 1, 0.0, origin, vec![0.0]).is_err());
        assert!(BevMap::new(1, 1, 1, 0.16, origin, vec![f32::NAN]).is_err());
    }

    #[test]
    fn average_examples() {
        let x = ramp(3, 4, 2);
        let four = vec![x.clone(), x.clone(), x.clone(), x.clone()];
        assert_close(&fuse_average(&four).unwrap(), &x, 1e-6);
        let z = BevMap::zeros(3, 4, 2).unwrap();
        let stack = vec![z.clone(), z.clone(), z, x.scaled(4.0)];
        assert_close(&fuse_average(&stack).unwrap(), &x, 1e-6);
        assert_eq!(fuse_average(std::slice::from_ref(&x)).unwrap(), x);
        assert!(matches!(fuse_average(&[]), Err(Error::Argument(_))));
        assert!(matches!(
            fuse_average(&[x.clone(), ramp(3, 4, 1)]),
            Err(Error::Dimension(_))
        ));
        let moved = x.clone().with_origin(RigidTransform2D::translation(1.0, 0.0));
        assert!(matches!(fuse_max(&[x, moved]), Err(Error::Dimension(_))));
    }

    #[test]
    fn max_examples() {
        let x = ramp(3, 3, 2);
        assert_eq!(fuse_max(&[x.clone(), x.clone()]).unwrap(), x);
        let abs = fuse_max(&[x.clone(), x.scaled(-1.0)]).unwrap();
        for (a, v) in abs.data.iter().zip(&x.data) {
            assert_eq!(*a, v.abs());
        }
        // Brute force: compare each cell against zero by hand.
        let z = BevMap::zeros(3, 3, 2).unwrap();
        let relu = fuse_max(&[z, x.clone()]).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                for ch in 0..2 {
                    let v = x.get(r, c, ch);
                    let expect = if v > 0.0 { v } else { 0.0 };
                    assert_eq!(relu.get(r, c, ch), expect);
                }
            }
        }
    }

    #[test]
    fn spatial_adaptive_examples() {
        let x = ramp(2, 3, 2);
        let k = SpatialKernel::default();
        assert_close(&fuse_spatial_adaptive(&[x.clone(), x.clone()], &k).unwrap(), &x, 1e-6);
        let half_abs = fuse_spatial_adaptive(&[x.clone(), x.scaled(-1.0)], &k).unwrap();
        for (h, v) in half_abs.data.iter().zip(&x.data) {
            assert!((h - 0.5 * v.abs()).abs() < 1e-6);
        }
        let avg_only = SpatialKernel::blend(1.0, 0.0);
        let maps = [x.clone(), x.scaled(3.0), x.scaled(-0.5)];
        assert_close(
            &fuse_spatial_adaptive(&maps, &avg_only).unwrap(),
            &fuse_average(&maps).unwrap(),
            1e-6,
        );
        let per_channel =
            SpatialKernel::from_matrix(ChannelMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
                .unwrap();
        let mixed = fuse_spatial_adaptive(&maps, &per_channel).unwrap();
        let avg = fuse_average(&maps).unwrap();
        let max = fuse_max(&maps).unwrap();
        assert_eq!(mixed.get(1, 2, 0), avg.get(1, 2, 0));
        assert_eq!(mixed.get(1, 2, 1), max.get(1, 2, 1));
        let wrong =
            SpatialKernel::from_matrix(ChannelMatrix::new(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        assert!(matches!(
            fuse_spatial_adaptive(&maps, &wrong),
            Err(Error::Config(_))
        ));
        assert!(SpatialKernel::from_matrix(ChannelMatrix::identity(3)).is_err());
    }

    #[test]
    fn channel_adaptive_examples() {
        let x = ramp(2, 2, 3);
        let (out, w) = fuse_channel_adaptive(&[x.clone(), x.clone(), x.clone()], &ExpScore).unwrap();
        assert_eq!(out, x);
        assert_eq!(w, FusionWeights::uniform(3));

        let maps = [x.clone(), x.scaled(2.0), x.scaled(-1.0)];
        let constant = |_: f64, _: f64| 3.0;
        let (c_out, _) = fuse_channel_adaptive(&maps, &constant).unwrap();
        assert_close(&c_out, &fuse_average(&maps).unwrap(), 1e-6);

        // [X, 3X] with X = ones(2x2x1): descriptors (1, 1) and (3, 3), so the
        // raw scores are exp(2) and exp(6).
        let ones = BevMap::from_fn(2, 2, 1, |_, _, _| 1.0).unwrap();
        let (out, w) = fuse_channel_adaptive(&[ones.clone(), ones.scaled(3.0)], &ExpScore).unwrap();
        let e2 = 2.0_f64.exp();
        let e6 = 6.0_f64.exp();
        let (w1, w2) = (e2 / (e2 + e6), e6 / (e2 + e6));
        assert!((w.0[0] - w1).abs() < 1e-12 && (w.0[1] - w2).abs() < 1e-12, "{:?} vs {w1} {w2}", w.0);
        for v in out.data() {
            assert!(((*v as f64) - (w1 + 3.0 * w2)).abs() < 1e-6);
        }

        let zero = |_: f64, _: f64| 0.0;
        let (_, w) = fuse_channel_adaptive(&maps, &zero).unwrap();
        assert_eq!(w, FusionWeights::uniform(3));
        let negative = |_: f64, _: f64| -1.0;
        assert!(fuse_channel_adaptive(&maps, &negative).is_err());
    }

    #[test]
    fn warp_identity_and_shift() {
        let x = ramp(4, 5, 2);
        assert_eq!(warp(&x, &RigidTransform2D::identity()), x);
        let cs = x.cell_size();
        let shifted = warp(&x, &RigidTransform2D::translation(cs, 0.0));
        for r in 0..4 {
            for ch in 0..2 {
                assert_eq!(shifted.get(r, 0, ch), 0.0);
                for c in 1..5 {
                    assert_eq!(shifted.get(r, c, ch), x.get(r, c - 1, ch));
                }
            }
        }
    }

    #[test]
    fn warp_half_turn_mirrors_through_center() {
        let cs = DEFAULT_CELL_SIZE;
        let pivot = Vec2::new(2.5 * cs, 2.5 * cs);
        let t = RigidTransform2D::rotation_about(PI, pivot);
        for (r0, c0) in [(0, 0), (1, 3), (2, 2), (4, 1)] {
            let mut m = BevMap::zeros(5, 5, 1).unwrap();
            m.set(r0, c0, 0, 1.0);
            let out = warp(&m, &t);
            // Brute-force nearest-neighbor resample, written out longhand.
            for r in 0..5 {
                for c in 0..5 {
                    let px = (c as f64 + 0.5) * cs;
                    let py = (r as f64 + 0.5) * cs;
                    let sx = 2.0 * pivot.x - px;
                    let sy = 2.0 * pivot.y - py;
                    let src_c = (sx / cs).floor() as usize;
                    let src_r = (sy / cs).floor() as usize;
                    assert_eq!(out.get(r, c, 0), m.get(src_r, src_c, 0));
                }
            }
            assert_eq!(out.get(4 - r0, 4 - c0, 0), 1.0);
        }
    }

    #[test]
    fn warp_to_reregisters_frames() {
        let cs = DEFAULT_CELL_SIZE;
        let x = ramp(6, 6, 1).with_origin(RigidTransform2D::translation(2.0 * cs, 0.0));
        let out = warp_to(&x, &RigidTransform2D::identity());
        assert_eq!(out.origin(), RigidTransform2D::identity());
        assert_eq!(out.get(3, 4, 0), x.get(3, 2, 0));
        assert_eq!(out.get(3, 1, 0), 0.0);
    }

    #[test]
    fn transform_inverse_and_normalization() {
        let t = RigidTransform2D::new(7.0, Vec2::new(1.5, -2.0));
        assert!(t.rotation() > -PI && t.rotation() <= PI);
        assert!(t.compose(&t.inverse()).approx_eq(&RigidTransform2D::identity(), 1e-9));
        assert!(t.inverse().compose(&t).approx_eq(&RigidTransform2D::identity(), 1e-9));
        assert_eq!(RigidTransform2D::new(-PI, Vec2::ZERO).rotation(), PI);
    }

    #[test]
    fn pooling_examples() {
        let m = BevMap::from_fn(2, 2, 1, |r, c, _| (r * 2 + c + 1) as f32).unwrap();
        let p = max_pool2(&m).unwrap();
        assert_eq!((p.height(), p.width(), p.channels()), (1, 1, 1));
        assert_eq!(p.get(0, 0, 0), 4.0);
        assert!((p.cell_size() - 0.32).abs() < 1e-12);

        let k = BevMap::from_fn(4, 6, 2, |_, _, _| 1.5).unwrap();
        let kp = max_pool2(&k).unwrap();
        assert_eq!((kp.height(), kp.width()), (2, 3));
        assert!(kp.data().iter().all(|&v| v == 1.5));

        assert!(matches!(max_pool2(&ramp(3, 4, 1)), Err(Error::Dimension(_))));
        assert!(matches!(max_pool2(&ramp(4, 5, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn pooling_full_size_shape() {
        let m = BevMap::zeros(376, 280, 64).unwrap();
        let p = max_pool2(&m).unwrap();
        assert_eq!((p.height(), p.width(), p.channels()), (188, 140, 64));
    }

    #[test]
    fn projection_examples() {
        let m = BevMap::new(1, 1, 2, 0.16, RigidTransform2D::identity(), vec![1.0, 2.0]).unwrap();
        let diag = ChannelMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(project_channels(&m, &diag).unwrap().data(), &[1.0, 4.0]);

        let x = ramp(3, 3, 4);
        assert_eq!(project_channels(&x, &ChannelMatrix::identity(4)).unwrap(), x);

        let big = ramp(2, 2, 64);
        let (enc, dec) = ChannelMatrix::default_codec_pair(64, 8, 1).unwrap();
        let z = project_channels(&big, &enc).unwrap();
        assert_eq!(z.channels(), 8);
        assert_eq!(project_channels(&z, &dec).unwrap().channels(), 64);
        assert!(matches!(project_channels(&x, &enc), Err(Error::Dimension(_))));
    }

    #[test]
    fn seeded_columns_are_orthonormal() {
        let q = ChannelMatrix::seeded_orthonormal(64, 8, 42).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = (0..64).map(|r| q.get(r, i) as f64 * q.get(r, j) as f64).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-5);
            }
        }
        assert_eq!(q, ChannelMatrix::seeded_orthonormal(64, 8, 42).unwrap());
    }

    #[test]
    fn weight_file_roundtrip_and_errors() {
        let q = ChannelMatrix::seeded_orthonormal(16, 2, 3).unwrap();
        let bytes = q.to_bytes();
        assert_eq!(&bytes[..4], b"BEVW");
        assert_eq!(bytes.len(), 8 + 16 * 2 * 4);
        assert_eq!(ChannelMatrix::from_bytes(&bytes).unwrap(), q);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ChannelMatrix::from_bytes(&bad),
            Err(Error::Decode { field: "magic", .. })
        ));
        assert!(ChannelMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bevw");
        q.save(&path).unwrap();
        assert_eq!(ChannelMatrix::load(&path).unwrap(), q);
    }

    fn small_map() -> impl Strategy<Value = BevMap> {
        (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| {
            prop::collection::vec(-10.0f32..10.0, h * w * c).prop_map(move |data| {
                BevMap::new(h, w, c, DEFAULT_CELL_SIZE, RigidTransform2D::identity(), data)
                    .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn fusion_is_permutation_invariant(m in small_map(), k in -3.0f32..3.0) {
            let a = m.clone();
            let b = m.scaled(k);
            let c = m.scaled(-0.5);
            let fwd = [a.clone(), b.clone(), c.clone()];
            let rev = [c, a, b];
            prop_assert_eq!(fuse_max(&fwd).unwrap(), fuse_max(&rev).unwrap());
            let x = fuse_average(&fwd).unwrap();
            let y = fuse_average(&rev).unwrap();
            for (p, q) in x.data().iter().zip(y.data()) {
                prop_assert!((p - q).abs() <= 1e-5 * p.abs().max(1.0));
            }
        }

        #[test]
        fn channel_weights_are_a_distribution(m in small_map(), k in 0.1f32..3.0) {
            let (_, w) = fuse_channel_adaptive(&[m.clone(), m.scaled(k), m.scaled(-k)], &ExpScore).unwrap();
            prop_assert!(w.0.iter().all(|&v| v >= 0.0));
            prop_assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn pooled_cell_dominates_block_mean(m in small_map()) {
            let even = BevMap::from_fn(m.height() * 2, m.width() * 2, m.channels(), |r, c, ch| {
                m.get(r / 2, c / 2, ch) + ((r * 3 + c) % 5) as f32 * 0.1
            }).unwrap();
            let p = max_pool2(&even).unwrap();
            for r in 0..p.height() {
                for c in 0..p.width() {
                    for ch in 0..p.channels() {
                        let block = [
                            even.get(2 * r, 2 * c, ch),
                            even.get(2 * r, 2 * c + 1, ch),
                            even.get(2 * r + 1, 2 * c, ch),
                            even.get(2 * r + 1, 2 * c + 1, ch),
                        ];
                        let mean = block.iter().sum::<f32>() / 4.0;
                        prop_assert!(p.get(r, c, ch) >= mean - 1e-6);
                    }
                }
            }
        }

        #[test]
        fn projection_is_linear(m in small_map(), a in -2.0f32..2.0, b in -2.0f32..2.0, seed in 0u64..100) {
            let q = ChannelMatrix::seeded_orthonormal(m.channels(), m.channels(), seed).unwrap();
            let y = m.scaled(0.5);
            let combo = BevMap::new(
                m.height(), m.width(), m.channels(), m.cell_size(), m.origin(),
                m.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect(),
            ).unwrap();
            let lhs = project_channels(&combo, &q).unwrap();
            let pm = project_channels(&m, &q).unwrap();
            let py = project_channels(&y, &q).unwrap();
            for ((l, u), v) in lhs.data().iter().zip(pm.data()).zip(py.data()) {
                let r = a * u + b * v;
                prop_assert!((l - r).abs() <= 1e-5 * l.abs().max(r.abs()).max(1.0));
            }
        }

        #[test]
        fn grid_aligned_warp_roundtrips(m in small_map(), dx in -3i32..3, dy in -3i32..3) {
            let cs = m.cell_size();
            let t = RigidTransform2D::translation(dx as f64 * cs, dy as f64 * cs);
            let back = warp(&warp(&m, &t), &t.inverse());
            for r in 0..m.height() {
                for c in 0..m.width() {
                    let sr = r as i32 + dy;
                    let sc = c as i32 + dx;
                    let stays = sr >= 0 && sc >= 0 && (sr as usize) < m.height() && (sc as usize) < m.width();
                    if stays {
                        prop_assert_eq!(back.cell(r, c), m.cell(r, c));
                    }
                }
            }
        }
    }

    #[test]
    fn map_file_roundtrip() {
        let origin = RigidTransform2D::new(0.3, Vec2::new(1.5, -2.0));
        let m = BevMap::from_fn(5, 7, 3, |r, c, ch| (r * 100 + c * 10 + ch) as f32 - 50.0)
            .unwrap()
            .with_origin(origin);
        let bytes = m.to_file_bytes();
        assert_eq!(bytes.len(), 48 + 5 * 7 * 3 * 4);
        assert_eq!(BevMap::from_file_bytes(&bytes).unwrap(), m);
        assert!(BevMap::from_file_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(BevMap::from_file_bytes(&bad).is_err());
    }
}
