//! Feature-map compression for the I2V link.
//!
//! Pipeline: channel projection (`C -> C / factor`), optional 2x2 max pooling,
//! cell sparsification (a cell is dropped when the max-abs of its features is
//! at most the threshold) and float16 quantization of the surviving values.
//!
//! Wire layout, little-endian throughout:
//!
//! ```text
//! offset size field
//!      0    4 magic "BEVC"
//!      4    1 version (1)
//!      5    1 flags: bit0 float16 payload, bit1 spatially downsampled
//!      6    2 H (rows of the transmitted grid)
//!      8    2 W
//!     10    2 C
//!     12    2 cell size in millimeters (transmitted grid)
//!     14    1 source id
//!     15    1 modality (0 camera, 1 lidar)
//!     16    8 timestamp, microseconds
//!     24   12 grid origin pose x, y, yaw as float32
//!     36    - occupancy bitmap, ceil(H*W/8) bytes, cell i at bit (i % 8) of byte i / 8
//!     ..    - payload: C values per occupied cell, in bitmap order
//! ```

use half::f16;
use serde::{Deserialize, Serialize};

use crate::bev::{max_pool2, project_channels, upsample2, BevMap, ChannelMatrix, RigidTransform2D};
use crate::error::{Error, Result};
use crate::geometry::Vec2;

pub const MAGIC: &[u8; 4] = b"BEVC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 36;

const FLAG_F16: u8 = 0b01;
const FLAG_DOWNSAMPLED: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantization {
    Float32,
    Float16,
}

impl Quantization {
    pub fn bytes_per_value(self) -> usize {
        match self {
            Quantization::Float32 => 4,
            Quantization::Float16 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Camera = 0,
    Lidar = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sparsity_threshold: f32,
    pub quantization: Quantization,
    pub channel_factor: usize,
    pub downsample: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sparsity_threshold: 1e-3,
            quantization: Quantization::Float16,
            channel_factor: 8,
            downsample: true,
        }
    }
}

impl CodecConfig {
    /// Identity-matrix, full-resolution, float32, zero-threshold settings.
    pub fn lossless() -> Self {
        Self {
            sparsity_threshold: 0.0,
            quantization: Quantization::Float32,
            channel_factor: 1,
            downsample: false,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(self.sparsity_threshold >= 0.0) || !self.sparsity_threshold.is_finite() {
            return Err(Error::Config(format!(
                "sparsity threshold must be finite and >= 0, got {}",
                self.sparsity_threshold
            )));
        }
        if self.channel_factor == 0 || channels % self.channel_factor != 0 {
            return Err(Error::Config(format!(
                "channel factor {} does not divide {channels} channels",
                self.channel_factor
            )));
        }
        Ok(())
    }
}

/// Per-frame metadata carried in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub source_id: u8,
    pub modality: Modality,
    pub timestamp_us: u64,
}

impl Default for FrameMeta {
    fn default() -> Self {
        Self {
            source_id: 0,
            modality: Modality::Camera,
            timestamp_us: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameHeader {
    pub version: u8,
    pub float16: bool,
    pub downsampled: bool,
    pub height: u16,
    pub width: u16,
    pub channels: u16,
    pub cell_size_mm: u16,
    pub meta: FrameMeta,
    pub pose: [f32; 3],
}

impl FrameHeader {
    pub fn flags(&self) -> u8 {
        (if self.float16 { FLAG_F16 } else { 0 })
            | (if self.downsampled { FLAG_DOWNSAMPLED } else { 0 })
    }

    pub fn num_cells(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn bitmap_len(&self) -> usize {
        self.num_cells().div_ceil(8)
    }

    pub fn bytes_per_value(&self) -> usize {
        if self.float16 {
            2
        } else {
            4
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFrame {
    pub header: FrameHeader,
    pub bitmap: Vec<u8>,
    pub payload: Vec<u8>,
}

impl CompressedFrame {
    pub fn occupied_cells(&self) -> usize {
        self.bitmap.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_occupied(&self, cell: usize) -> bool {
        self.bitmap[cell / 8] >> (cell % 8) & 1 == 1
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.bitmap.len() + self.payload.len()
    }

    /// Fraction of transmitted-grid cells that are unoccupied.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.occupied_cells() as f64 / self.header.num_cells() as f64
    }

    /// Check bitmap and payload lengths against the header.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.version != VERSION {
            return Err(Error::decode("version", format!("unsupported version {}", h.version)));
        }
        if h.num_cells() == 0 || h.channels == 0 {
            return Err(Error::decode("dims", "H, W and C must be positive"));
        }
        if self.bitmap.len() != h.bitmap_len() {
            return Err(Error::decode(
                "bitmap",
                format!("expected {} bytes, got {}", h.bitmap_len(), self.bitmap.len()),
            ));
        }
        let tail_bits = h.num_cells() % 8;
        if tail_bits != 0 && self.bitmap[self.bitmap.len() - 1] >> tail_bits != 0 {
            return Err(Error::decode("bitmap", "padding bits set past the last cell"));
        }
        let expect = self.occupied_cells() * h.channels as usize * h.bytes_per_value();
        if self.payload.len() != expect {
            return Err(Error::decode(
                "payload",
                format!("expected {expect} bytes, got {}", self.payload.len()),
            ));
        }
        Ok(())
    }

    /// Payload values widened to float32, in bitmap order.
    pub fn values(&self) -> Vec<f32> {
        if self.header.float16 {
            self.payload
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect()
        } else {
            self.payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(h.version);
        out.push(h.flags());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.channels.to_le_bytes());
        out.extend_from_slice(&h.cell_size_mm.to_le_bytes());
        out.push(h.meta.source_id);
        out.push(h.meta.modality as u8);
        out.extend_from_slice(&h.meta.timestamp_us.to_le_bytes());
        for v in h.pose {
            out.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!(out.len(), HEADER_LEN);
        out.extend_from_slice(&self.bitmap);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::decode(
                "header",
                format!("need {HEADER_LEN} bytes, got {}", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::decode("magic", format!("expected BEVC, got {:?}", &bytes[0..4])));
        }
        let version = bytes[4];
        if version != VERSION {
            return Err(Error::decode("version", format!("unsupported version {version}")));
        }
        let flags = bytes[5];
        if flags & !(FLAG_F16 | FLAG_DOWNSAMPLED) != 0 {
            return Err(Error::decode("flags", format!("reserved bits set in {flags:#04x}")));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let f32_at = |i: usize| f32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let modality = match bytes[15] {
            0 => Modality::Camera,
            1 => Modality::Lidar,
            m => return Err(Error::decode("modality", format!("unknown modality {m}"))),
        };
        let mut ts = [0u8; 8];
        ts.copy_from_slice(&bytes[16..24]);
        let header = FrameHeader {
            version,
            float16: flags & FLAG_F16 != 0,
            downsampled: flags & FLAG_DOWNSAMPLED != 0,
            height: u16_at(6),
            width: u16_at(8),
            channels: u16_at(10),
            cell_size_mm: u16_at(12),
            meta: FrameMeta {
                source_id: bytes[14],
                modality,
                timestamp_us: u64::from_le_bytes(ts),
            },
            pose: [f32_at(24), f32_at(28), f32_at(32)],
        };
        if header.num_cells() == 0 || header.channels == 0 {
            return Err(Error::decode("dims", "H, W and C must be positive"));
        }
        let body = &bytes[HEADER_LEN..];
        let nb = header.bitmap_len();
        if body.len() < nb {
            return Err(Error::decode(
                "bitmap",
                format!("truncated: need {nb} bytes, got {}", body.len()),
            ));
        }
        let frame = CompressedFrame {
            header,
            bitmap: body[..nb].to_vec(),
            payload: body[nb..].to_vec(),
        };
        frame.validate()?;
        Ok(frame)
    }
}

/// Size accounting for one compressed map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    /// The uncompressed input map as dense float32.
    pub dense_bytes: usize,
    pub encoded_bytes: usize,
    /// Sparsity of the transmitted grid (after projection and pooling).
    pub sparsity_fraction: f64,
    pub compression_ratio: f64,
}

impl SizeReport {
    pub fn new(original: &BevMap, frame: &CompressedFrame) -> Self {
        Self::from_dense_bytes(original.dense_bytes(), frame)
    }

    pub fn from_dense_bytes(dense_bytes: usize, frame: &CompressedFrame) -> Self {
        let encoded_bytes = frame.encoded_len();
        Self {
            dense_bytes,
            encoded_bytes,
            sparsity_fraction: frame.sparsity(),
            compression_ratio: dense_bytes as f64 / encoded_bytes as f64,
        }
    }
}

/// Encoded size predicted from the transmitted-grid dims and its sparsity.
pub fn predicted_encoded_bytes(
    height: usize,
    width: usize,
    channels: usize,
    sparsity: f64,
    quant: Quantization,
) -> usize {
    let cells = height * width;
    let occupied = ((1.0 - sparsity) * cells as f64).round() as usize;
    HEADER_LEN + cells.div_ceil(8) + occupied * channels * quant.bytes_per_value()
}

fn cell_max_abs(cell: &[f32]) -> f32 {
    cell.iter().fold(0.0_f32, |m, v| m.max(v.abs()))
}

/// Fraction of cells whose max-abs over channels is at most `eps`.
pub fn sparsity(map: &BevMap, eps: f32) -> f64 {
    let empty = map.cells().filter(|c| cell_max_abs(c) <= eps).count();
    empty as f64 / map.num_cells() as f64
}

fn to_u16(v: usize, field: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Dimension(format!("{field} {v} does not fit in u16")))
}

pub fn compress(map: &BevMap, cfg: &CodecConfig, encoder: &ChannelMatrix) -> Result<CompressedFrame> {
    compress_with_meta(map, cfg, encoder, FrameMeta::default())
}

pub fn compress_with_meta(
    map: &BevMap,
    cfg: &CodecConfig,
    encoder: &ChannelMatrix,
    meta: FrameMeta,
) -> Result<CompressedFrame> {
    cfg.validate(map.channels())?;
    let target = map.channels() / cfg.channel_factor;
    if encoder.cols() != target {
        return Err(Error::Dimension(format!(
            "encoder maps to {} channels, config expects {target}",
            encoder.cols()
        )));
    }
    let mut reduced = project_channels(map, encoder)?;
    if cfg.downsample {
        reduced = max_pool2(&reduced)?;
    }
    let cell_mm = reduced.cell_size() * 1000.0;
    if (cell_mm - cell_mm.round()).abs() > 1e-6 || cell_mm.round() < 1.0 || cell_mm.round() > u16::MAX as f64 {
        return Err(Error::Config(format!(
            "cell size {} m is not a whole number of millimeters in u16 range",
            reduced.cell_size()
        )));
    }
    let origin = reduced.origin();
    let header = FrameHeader {
        version: VERSION,
        float16: cfg.quantization == Quantization::Float16,
        downsampled: cfg.downsample,
        height: to_u16(reduced.height(), "height")?,
        width: to_u16(reduced.width(), "width")?,
        channels: to_u16(reduced.channels(), "channels")?,
        cell_size_mm: cell_mm.round() as u16,
        meta,
        pose: [
            origin.translation.x as f32,
            origin.translation.y as f32,
            origin.rotation() as f32,
        ],
    };
    let mut bitmap = vec![0u8; header.bitmap_len()];
    let mut payload = Vec::new();
    for (i, cell) in reduced.cells().enumerate() {
        if cell_max_abs(cell) <= cfg.sparsity_threshold {
            continue;
        }
        bitmap[i / 8] |= 1 << (i % 8);
        match cfg.quantization {
            Quantization::Float32 => {
                for v in cell {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            Quantization::Float16 => {
                for &v in cell {
                    // Saturate instead of overflowing to infinity.
                    let q = f16::from_f32(v.clamp(f16::MIN.to_f32(), f16::MAX.to_f32()));
                    payload.extend_from_slice(&q.to_le_bytes());
                }
            }
        }
    }
    Ok(CompressedFrame {
        header,
        bitmap,
        payload,
    })
}

/// Rebuild the transmitted grid (dequantized, unoccupied cells zero) without
/// upsampling or channel decoding.
pub fn densify(frame: &CompressedFrame) -> Result<BevMap> {
    frame.validate()?;
    let h = &frame.header;
    let c = h.channels as usize;
    let mut data = vec![0.0_f32; h.num_cells() * c];
    let values = frame.values();
    let mut next = values.chunks_exact(c);
    for cell in 0..h.num_cells() {
        if frame.is_occupied(cell) {
            let v = next.next().expect("payload length validated");
            data[cell * c..(cell + 1) * c].copy_from_slice(v);
        }
    }
    let origin = RigidTransform2D::new(
        h.pose[2] as f64,
        Vec2::new(h.pose[0] as f64, h.pose[1] as f64),
    );
    BevMap::new(
        h.height as usize,
        h.width as usize,
        c,
        h.cell_size_mm as f64 / 1000.0,
        origin,
        data,
    )
    .map_err(|e| Error::decode("payload", e.to_string()))
}

/// Inverse pipeline: dequantize, densify, 2x nearest-neighbor upsample when
/// the frame was downsampled, then decode channels.
pub fn decompress(frame: &CompressedFrame, cfg: &CodecConfig, decoder: &ChannelMatrix) -> Result<BevMap> {
    let mut grid = densify(frame)?;
    if decoder.rows() != grid.channels() {
        return Err(Error::Dimension(format!(
            "decoder expects {} channels, frame carries {}",
            decoder.rows(),
            grid.channels()
        )));
    }
    if decoder.cols() != grid.channels() * cfg.channel_factor {
        return Err(Error::Dimension(format!(
            "decoder restores {} channels, config expects {}",
            decoder.cols(),
            grid.channels() * cfg.channel_factor
        )));
    }
    if frame.header.downsampled {
        grid = upsample2(&grid);
    }
    project_channels(&grid, decoder)
}

/// Test and demo input: a map whose 2x2 blocks are either all-zero or filled
/// with features, with `occupied_fraction` of the blocks filled (rounded).
/// Block granularity keeps the occupancy unchanged by 2x2 pooling.
pub fn synthetic_sparse_map(
    height: usize,
    width: usize,
    channels: usize,
    occupied_fraction: f64,
    seed: u64,
) -> Result<BevMap> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::Dimension(format!(
            "synthetic maps use 2x2 blocks, got {height}x{width}"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let blocks = (height / 2) * (width / 2);
    let filled = (occupied_fraction.clamp(0.0, 1.0) * blocks as f64).round() as usize;
    let mut order: Vec<usize> = (0..blocks).collect();
    order.shuffle(&mut rng);
    let mut occupied = vec![false; blocks];
    for &b in &order[..filled] {
        occupied[b] = true;
    }
    let mut data = vec![0.0_f32; height * width * channels];
    for r in 0..height {
        for c in 0..width {
            if !occupied[(r / 2) * (width / 2) + c / 2] {
                continue;
            }
            let base = (r * width + c) * channels;
            for v in &mut data[base..base + channels] {
                let mag: f32 = rng.random_range(0.05..2.0);
                *v = if rng.random_bool(0.5) { mag } else { -mag };
            }
        }
    }
    BevMap::new(
        height,
        width,
        channels,
        crate::bev::DEFAULT_CELL_SIZE,
        RigidTransform2D::identity(),
        data,
    )
}
