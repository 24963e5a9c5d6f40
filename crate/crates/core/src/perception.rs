//! Occlusion-aware sensing and detection-level fusion.
//!
//! Visibility is a 2.5D ray test: each footprint corner of a target, lifted to
//! the target's mid-height, is joined to the sensor by a straight segment. An
//! occluder blocks the corner when the segment passes over its footprint at a
//! height no greater than the occluder's height. Detection is a per-tick
//! Bernoulli draw whose probability comes from a calibration table keyed by
//! sensor configuration, object class and difficulty.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::RigidTransform2D;
use crate::codec::Modality;
use crate::error::{Error, Result};
use crate::garage::{EntityKind, InfraSite, WorldState};
use crate::geometry::{normalize_angle, Obb, Vec2};
use crate::link::Delivery;
use crate::seed;

pub const DEFAULT_STALENESS_S: f64 = 0.1;
pub const DUPLICATE_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub modality: Modality,
    /// Mount point in the platform frame; `z` is height above the floor.
    pub mount: Vec2,
    pub z: f64,
    pub yaw: f64,
    /// Downward tilt of the optical axis.
    pub pitch: f64,
    pub h_fov: f64,
    pub v_fov: f64,
    pub max_range: f64,
}

impl SensorSpec {
    pub fn vehicle_camera() -> Self {
        SensorSpec {
            modality: Modality::Camera,
            mount: Vec2::new(1.5, 0.0),
            z: 1.8,
            yaw: 0.0,
            pitch: 0.0,
            h_fov: 90f64.to_radians(),
            v_fov: 90f64.to_radians(),
            max_range: 40.0,
        }
    }

    /// Roof LiDAR with a -24.8..+2 degree vertical span.
    pub fn vehicle_lidar() -> Self {
        SensorSpec {
            modality: Modality::Lidar,
            mount: Vec2::ZERO,
            z: 1.9,
            yaw: 0.0,
            pitch: 11.4f64.to_radians(),
            h_fov: std::f64::consts::TAU,
            v_fov: 26.8f64.to_radians(),
            max_range: 50.0,
        }
    }

    pub fn infra_camera(site: &InfraSite) -> Self {
        SensorSpec {
            modality: Modality::Camera,
            mount: site.position,
            z: site.height,
            yaw: site.yaw,
            pitch: site.pitch,
            h_fov: 90f64.to_radians(),
            v_fov: 90f64.to_radians(),
            max_range: 40.0,
        }
    }

    /// Roadside LiDAR with a -60..+30 degree vertical span.
    pub fn infra_lidar(site: &InfraSite) -> Self {
        SensorSpec {
            modality: Modality::Lidar,
            mount: site.position,
            z: site.height,
            yaw: site.yaw,
            pitch: 15f64.to_radians(),
            h_fov: 120f64.to_radians(),
            v_fov: 90f64.to_radians(),
            max_range: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tau = std::f64::consts::TAU;
        for (name, fov) in [("h_fov", self.h_fov), ("v_fov", self.v_fov)] {
            if !(fov > 0.0 && fov <= tau + 1e-12) {
                return Err(Error::Config(format!("{name} must be in (0, 2pi], got {fov}")));
            }
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config(format!("max_range must be positive, got {}", self.max_range)));
        }
        Ok(())
    }

    /// The sensor carried by a platform at `pose`, expressed in the world frame.
    pub fn placed(&self, pose: &RigidTransform2D) -> SensorSpec {
        SensorSpec {
            mount: pose.apply(self.mount),
            yaw: normalize_angle(self.yaw + pose.rotation()),
            ..*self
        }
    }

    /// Range and field-of-view test for a world point.
    pub fn covers(&self, p: Vec2, z: f64) -> bool {
        let d = p - self.mount;
        let plan = d.norm();
        let dz = z - self.z;
        if (plan * plan + dz * dz).sqrt() > self.max_range {
            return false;
        }
        if self.h_fov < std::f64::consts::TAU {
            let bearing = normalize_angle(d.y.atan2(d.x) - self.yaw);
            if bearing.abs() > 0.5 * self.h_fov {
                return false;
            }
        }
        let depression = (-dz).atan2(plan);
        (depression - self.pitch).abs() <= 0.5 * self.v_fov
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
    Invisible,
}

impl Difficulty {
    pub fn from_count(count: u8) -> Self {
        match count {
            0 => Difficulty::Invisible,
            1 | 2 => Difficulty::Hard,
            _ => Difficulty::Easy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityReport {
    pub visible_vertex_count: u8,
    pub difficulty: Difficulty,
}

impl VisibilityReport {
    fn from_count(count: u8) -> Self {
        VisibilityReport { visible_vertex_count: count, difficulty: Difficulty::from_count(count) }
    }
}

/// Occluders with cached plan-view bounds for cheap rejection.
#[derive(Debug, Clone, Default)]
pub struct OccluderSet {
    boxes: Vec<(Obb, Vec2, Vec2)>,
}

impl OccluderSet {
    pub fn new<'a>(boxes: impl IntoIterator<Item = &'a Obb>) -> Self {
        OccluderSet {
            boxes: boxes
                .into_iter()
                .map(|b| {
                    let (lo, hi) = b.aabb();
                    (*b, lo, hi)
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// True when some occluder blocks the segment from `(a, za)` to `(b, zb)`.
    /// Occluders that contain `a` are ignored; a sensor sees out of its own body.
    pub fn blocks(&self, a: Vec2, za: f64, b: Vec2, zb: f64, skip: Option<usize>) -> bool {
        let seg_lo = Vec2::new(a.x.min(b.x), a.y.min(b.y));
        let seg_hi = Vec2::new(a.x.max(b.x), a.y.max(b.y));
        for (i, (obb, lo, hi)) in self.boxes.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            if hi.x < seg_lo.x || lo.x > seg_hi.x || hi.y < seg_lo.y || lo.y > seg_hi.y {
                continue;
            }
            // Cheap height reject: the segment is everywhere above this box.
            if za.min(zb) > obb.height {
                continue;
            }
            if obb.contains(a) {
                continue;
            }
            if let Some((t0, t1)) = obb.clip_segment(a, b) {
                let z0 = za + (zb - za) * t0;
                let z1 = za + (zb - za) * t1;
                if z0.min(z1) <= obb.height {
                    return true;
                }
            }
        }
        false
    }

    pub fn visible_vertices(&self, sensor: &SensorSpec, target: &Obb, skip: Option<usize>) -> VisibilityReport {
        let z = 0.5 * target.height;
        let count = target
            .corners()
            .iter()
            .filter(|&&c| sensor.covers(c, z) && !self.blocks(sensor.mount, sensor.z, c, z, skip))
            .count();
        VisibilityReport::from_count(count as u8)
    }
}

/// Visible footprint corners of `target` from `sensor`, with the corners
/// raised to the target's mid-height.
pub fn visible_vertices(sensor: &SensorSpec, target: &Obb, occluders: &[Obb]) -> VisibilityReport {
    OccluderSet::new(occluders).visible_vertices(sensor, target, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleConfig {
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "cam+lidar")]
    CamLidar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InfraConfig {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "cam+lidar")]
    CamLidar,
}

impl VehicleConfig {
    pub const ALL: [VehicleConfig; 2] = [VehicleConfig::Cam, VehicleConfig::CamLidar];

    pub fn as_str(self) -> &'static str {
        match self {
            VehicleConfig::Cam => "cam",
            VehicleConfig::CamLidar => "cam+lidar",
        }
    }

    pub fn sensors(self) -> Vec<SensorSpec> {
        match self {
            VehicleConfig::Cam => vec![SensorSpec::vehicle_camera()],
            VehicleConfig::CamLidar => vec![SensorSpec::vehicle_camera(), SensorSpec::vehicle_lidar()],
        }
    }
}

impl InfraConfig {
    pub const ALL: [InfraConfig; 3] = [InfraConfig::None, InfraConfig::Cam, InfraConfig::CamLidar];

    pub fn as_str(self) -> &'static str {
        match self {
            InfraConfig::None => "none",
            InfraConfig::Cam => "cam",
            InfraConfig::CamLidar => "cam+lidar",
        }
    }

    pub fn sensors(self, site: &InfraSite) -> Vec<SensorSpec> {
        match self {
            InfraConfig::None => Vec::new(),
            InfraConfig::Cam => vec![SensorSpec::infra_camera(site)],
            InfraConfig::CamLidar => vec![SensorSpec::infra_camera(site), SensorSpec::infra_lidar(site)],
        }
    }
}

impl fmt::Display for VehicleConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for InfraConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VehicleConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(VehicleConfig::Cam),
            "cam+lidar" => Ok(VehicleConfig::CamLidar),
            _ => Err(Error::Config(format!("unknown vehicle config {s:?} (expected cam or cam+lidar)"))),
        }
    }
}

impl FromStr for InfraConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InfraConfig::None),
            "cam" => Ok(InfraConfig::Cam),
            "cam+lidar" => Ok(InfraConfig::CamLidar),
            _ => Err(Error::Config(format!("unknown infra config {s:?} (expected none, cam or cam+lidar)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Car,
    Pedestrian,
}

impl ObjectClass {
    pub fn of(kind: EntityKind) -> Option<ObjectClass> {
        if kind.is_pedestrian() {
            Some(ObjectClass::Pedestrian)
        } else if kind.is_vehicle() {
            Some(ObjectClass::Car)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub vehicle: VehicleConfig,
    pub infra: InfraConfig,
    pub class: ObjectClass,
    pub difficulty: Difficulty,
    pub probability: f64,
}

/// Per-frame detection probabilities and position noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub sigma_camera: f64,
    pub sigma_lidar: f64,
    pub entries: Vec<CalibrationEntry>,
}

/// Easy and hard detection rates at IoU 0.01: (vehicle, infra, car easy,
/// car hard, pedestrian easy, pedestrian hard).
const DEFAULT_RATES: [(VehicleConfig, InfraConfig, [f64; 4]); 6] = [
    (VehicleConfig::Cam, InfraConfig::None, [0.983, 0.978, 0.785, 0.731]),
    (VehicleConfig::Cam, InfraConfig::Cam, [0.997, 0.996, 0.846, 0.806]),
    (VehicleConfig::Cam, InfraConfig::CamLidar, [0.997, 0.996, 0.936, 0.919]),
    (VehicleConfig::CamLidar, InfraConfig::None, [0.997, 0.997, 0.997, 0.993]),
    (VehicleConfig::CamLidar, InfraConfig::Cam, [0.998, 0.998, 0.998, 0.990]),
    (VehicleConfig::CamLidar, InfraConfig::CamLidar, [0.998, 0.998, 0.995, 0.995]),
];

impl Default for CalibrationTable {
    fn default() -> Self {
        let mut entries = Vec::with_capacity(24);
        for (vehicle, infra, rates) in DEFAULT_RATES {
            let cells = [
                (ObjectClass::Car, Difficulty::Easy),
                (ObjectClass::Car, Difficulty::Hard),
                (ObjectClass::Pedestrian, Difficulty::Easy),
                (ObjectClass::Pedestrian, Difficulty::Hard),
            ];
            for ((class, difficulty), probability) in cells.into_iter().zip(rates) {
                entries.push(CalibrationEntry { vehicle, infra, class, difficulty, probability });
            }
        }
        CalibrationTable { sigma_camera: 0.3, sigma_lidar: 0.1, entries }
    }
}

impl CalibrationTable {
    /// Same noise model, every probability replaced by `p`.
    pub fn constant(p: f64) -> Self {
        let mut t = CalibrationTable::default();
        for e in &mut t.entries {
            e.probability = p;
        }
        t
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.probability) {
                return Err(Error::Config(format!("calibration probability {} outside [0, 1]", e.probability)));
            }
            if e.difficulty == Difficulty::Invisible {
                return Err(Error::Config("calibration entries cannot target invisible objects".into()));
            }
        }
        for (name, s) in [("sigma_camera", self.sigma_camera), ("sigma_lidar", self.sigma_lidar)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: CalibrationTable =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        table.validate()?;
        Ok(table)
    }

    pub fn probability(
        &self,
        vehicle: VehicleConfig,
        infra: InfraConfig,
        class: ObjectClass,
        difficulty: Difficulty,
    ) -> Result<f64> {
        if difficulty == Difficulty::Invisible {
            return Ok(0.0);
        }
        self.entries
            .iter()
            .find(|e| e.vehicle == vehicle && e.infra == infra && e.class == class && e.difficulty == difficulty)
            .map(|e| e.probability)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no calibration entry for vehicle={vehicle} infra={infra} class={class:?} difficulty={difficulty:?}"
                ))
            })
    }

    pub fn sigma(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Camera => self.sigma_camera,
            Modality::Lidar => self.sigma_lidar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Vehicle,
    Infrastructure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    pub footprint: Obb,
    pub source: Platform,
    pub timestamp: f64,
    /// Position noise of the detecting modality.
    pub sigma: f64,
    /// Entity id of the detected object; bookkeeping only, never used for control.
    pub truth_id: u32,
}

impl Detection {
    pub fn transformed(&self, t: &RigidTransform2D) -> Detection {
        Detection {
            footprint: Obb {
                center: t.apply(self.footprint.center),
                yaw: normalize_angle(self.footprint.yaw + t.rotation()),
                ..self.footprint
            },
            ..*self
        }
    }
}

/// Coordinates of one sensing pass. Draws are keyed by these values and the
/// target id, so a platform's detections do not depend on what else was drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SenseKey {
    pub seed: u64,
    pub platform: Platform,
    pub tick: u64,
    pub vehicle: VehicleConfig,
    pub infra: InfraConfig,
}

impl SenseKey {
    /// Calibration row used for this platform. The vehicle's own sensing uses
    /// its standalone row; roadside sensing uses the cooperative row.
    fn calibration_row(&self) -> (VehicleConfig, InfraConfig) {
        match self.platform {
            Platform::Vehicle => (self.vehicle, InfraConfig::None),
            Platform::Infrastructure => (self.vehicle, self.infra),
        }
    }
}

/// Best visibility of `target` over a platform's sensors, and the sensor that achieved it.
pub fn best_view(
    sensors: &[SensorSpec],
    target: &Obb,
    occluders: &OccluderSet,
    skip: Option<usize>,
) -> Option<(VisibilityReport, Modality)> {
    let mut best: Option<(VisibilityReport, Modality)> = None;
    for s in sensors {
        let r = occluders.visible_vertices(s, target, skip);
        if r.visible_vertex_count == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((b, m)) => {
                r.visible_vertex_count > b.visible_vertex_count
                    || (r.visible_vertex_count == b.visible_vertex_count && m == Modality::Camera && s.modality == Modality::Lidar)
            }
        };
        if better {
            best = Some((r, s.modality));
        }
    }
    best
}

/// Detections of the world's moving agents by one platform. `sensors` must
/// already be placed in the world frame. Everything except the ego's own
/// body occludes; each target is excluded from its own occluder set.
pub fn sense(
    sensors: &[SensorSpec],
    world: &WorldState,
    calib: &CalibrationTable,
    key: &SenseKey,
) -> Result<Vec<Detection>> {
    let occluders = OccluderSet::new(world.entities.iter().map(|e| &e.obb));
    sense_with(sensors, world, &occluders, calib, key)
}

/// [`sense`] with a prebuilt occluder set whose indices match `world.entities`.
pub fn sense_with(
    sensors: &[SensorSpec],
    world: &WorldState,
    occluders: &OccluderSet,
    calib: &CalibrationTable,
    key: &SenseKey,
) -> Result<Vec<Detection>> {
    let (row_v, row_i) = key.calibration_row();
    let platform_tag = key.platform as u64;
    let mut out = Vec::new();
    for (idx, e) in world.entities.iter().enumerate() {
        if idx == world.ego || !e.is_dynamic() {
            continue;
        }
        let Some(class) = ObjectClass::of(e.kind) else { continue };
        let Some((report, modality)) = best_view(sensors, &e.obb, occluders, Some(idx)) else {
            continue;
        };
        let p = calib.probability(row_v, row_i, class, report.difficulty)?;
        let mut rng = seed::rng(&[key.seed, platform_tag, key.tick, e.id as u64]);
        let u: f64 = rng.random();
        if u >= p {
            continue;
        }
        let sigma = calib.sigma(modality);
        let offset = if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("finite sigma");
            Vec2::new(n.sample(&mut rng), n.sample(&mut rng))
        } else {
            Vec2::ZERO
        };
        out.push(Detection {
            class,
            footprint: Obb { center: e.obb.center + offset, ..e.obb },
            source: key.platform,
            timestamp: world.sim_time,
            sigma,
            truth_id: e.id,
        });
    }
    Ok(out)
}

/// A roadside frame as it travels over the link: detections in the
/// infrastructure's local frame plus the link's delivery record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfraFrame {
    pub delivery: Delivery,
    pub detections: Vec<Detection>,
}

/// Latest usable frame: delivered by `t_now` and no older than `staleness_limit`.
pub fn latest_usable(frames: &[InfraFrame], t_now: f64, staleness_limit: f64) -> Option<&InfraFrame> {
    frames
        .iter()
        .filter(|f| {
            !f.delivery.dropped
                && f.delivery.arrives_at_s <= t_now + 1e-9
                && t_now - f.delivery.timestamp_s <= staleness_limit + 1e-9
        })
        .max_by(|a, b| a.delivery.timestamp_s.total_cmp(&b.delivery.timestamp_s))
}

/// Union of vehicle detections and the latest usable roadside frame mapped
/// through `gamma`. A roadside detection within [`DUPLICATE_RADIUS`] of a
/// vehicle detection of the same class is merged into it, keeping whichever
/// has the lower noise; ties keep the vehicle's own detection.
pub fn fuse_detections(
    vehicle: &[Detection],
    frames: &[InfraFrame],
    t_now: f64,
    gamma: &RigidTransform2D,
    staleness_limit: f64,
) -> Vec<Detection> {
    let mut fused = vehicle.to_vec();
    let Some(frame) = latest_usable(frames, t_now, staleness_limit) else {
        return fused;
    };
    let n_vehicle = fused.len();
    for d in &frame.detections {
        let d = d.transformed(gamma);
        let dup = fused[..n_vehicle].iter().position(|v| {
            v.class == d.class && v.footprint.center.distance(d.footprint.center) < DUPLICATE_RADIUS
        });
        match dup {
            Some(i) => {
                if d.sigma < fused[i].sigma {
                    fused[i] = d;
                }
            }
            None => fused.push(d),
        }
    }
    fused
}
