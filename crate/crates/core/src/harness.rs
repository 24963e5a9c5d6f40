//! Monte Carlo safety experiments: one closed-loop trial per seed, crash
//! tables over a (configuration, speed) grid, and the maximum safe speed.
//!
//! Per control tick the roadside unit senses, encodes a feature frame and
//! offers it to the link; the vehicle senses, fuses the latest usable roadside
//! detections, and sets its acceleration command. Physics runs in substeps
//! between ticks.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::RigidTransform2D;
use crate::codec::{predicted_encoded_bytes, Quantization};
use crate::control::{step_dynamics, target_accel, target_speed, ControlConfig, ObjectGap, VehicleState};
use crate::error::{Error, Result};
use crate::garage::{build_default_map, first_collision, spawn, EntityKind, GarageMap, Scenario, ScenarioConfig, WorldState};
use crate::geometry::{Obb, Vec2};
use crate::link::{budget_check, LinkConfig, LinkScheduler, OutgoingFrame};
use crate::perception::{
    fuse_detections, sense_with, CalibrationTable, InfraConfig, InfraFrame, OccluderSet, Platform, SenseKey,
    VehicleConfig, DEFAULT_STALENESS_S,
};
use crate::seed;

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "AVP_CP_THREADS";

/// Shape of the roadside feature frame: the 0.16 m detection grid after one
/// 2x pooling, with 8 feature channels.
pub const FRAME_HEIGHT: usize = 188;
pub const FRAME_WIDTH: usize = 140;
pub const FRAME_CHANNELS: usize = 8;

/// Roadside sensing is run for the configuration but reported to the vehicle
/// over the link; this is the spread of post-pipeline sparsity per frame.
pub const SPARSITY_RANGE: (f64, f64) = (0.82, 0.88);

/// Rigid offset applied to the infrastructure-to-vehicle transform.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationError {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub vehicle_configs: Vec<VehicleConfig>,
    pub infra_configs: Vec<InfraConfig>,
    pub speeds: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
    pub link: LinkConfig,
    pub control: ControlConfig,
    /// Scenario parameters; `scenario`, `cruise_speed` and `seed` are set per trial.
    pub world: ScenarioConfig,
    pub calibration: CalibrationTable,
    pub staleness_s: f64,
    pub localization_error: LocalizationError,
    pub quantization: Quantization,
    pub record_trajectory: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::PedestrianCrossing,
            vehicle_configs: VehicleConfig::ALL.to_vec(),
            infra_configs: InfraConfig::ALL.to_vec(),
            speeds: (3..=10).map(f64::from).collect(),
            trials: 20,
            base_seed: 42,
            link: LinkConfig::default(),
            control: ControlConfig::default(),
            world: ScenarioConfig::default(),
            calibration: CalibrationTable::default(),
            staleness_s: DEFAULT_STALENESS_S,
            localization_error: LocalizationError::default(),
            quantization: Quantization::Float16,
            record_trajectory: false,
        }
    }
}

impl ExperimentSpec {
    pub fn for_scenario(scenario: Scenario) -> Self {
        Self { scenario, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.speeds.is_empty() {
            return bad("speed grid is empty");
        }
        if self.speeds.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("speeds must be positive");
        }
        if self.speeds.windows(2).any(|w| w[1] <= w[0]) {
            return bad("speed grid must be strictly increasing");
        }
        if self.trials == 0 {
            return bad("trials must be >= 1");
        }
        if self.vehicle_configs.is_empty() || self.infra_configs.is_empty() {
            return bad("at least one vehicle and one infra configuration is required");
        }
        if !(self.staleness_s >= 0.0) {
            return bad("staleness_s must be >= 0");
        }
        self.link.validate()?;
        self.control.validate()?;
        self.calibration.validate()?;
        self.world.validate()
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &vehicle in &self.vehicle_configs {
            for &infra in &self.infra_configs {
                for &speed in &self.speeds {
                    out.push(GridPoint { vehicle, infra, speed });
                }
            }
        }
        out
    }

    /// Scene seed of one trial. It leaves out the sensor configuration so all
    /// configurations face the same scenes and the same detection draws.
    pub fn trial_seed(&self, speed: f64, trial: usize) -> u64 {
        seed::mix(&[self.base_seed, seed::label(self.scenario.short_name()), speed.to_bits(), trial as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub vehicle: VehicleConfig,
    pub infra: InfraConfig,
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub v_star: f64,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub crashed: bool,
    pub collision_time: Option<f64>,
    pub collided_with: Option<EntityKind>,
    /// Smallest ratio of in-lane gap ahead to ego speed.
    pub min_ttc: Option<f64>,
    /// Plan distance from the front bumper to the scenario's first agent
    /// when that agent is first perceived.
    pub first_detection_distance: Option<f64>,
    pub end_time: f64,
    pub frames_sent: usize,
    pub frames_dropped: usize,
    pub bytes_sent: usize,
    pub sparsity_sum: f64,
    pub max_abs_jerk: f64,
    pub min_accel: f64,
    pub max_accel: f64,
    pub warnings: Vec<String>,
    pub trajectory: Option<Vec<TrajectorySample>>,
}

/// Gap from an ego footprint to a perceived footprint, measured in the ego's
/// frame: ahead of the front bumper and away from the centerline.
pub fn object_gap(ego: &Obb, other: &Obb) -> ObjectGap {
    let front = ego.half_extents.x;
    let local = other.corners().map(|c| ego.to_local(c));
    let min_x = local.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = local.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    // Only a footprint wholly behind the bumper plane counts as behind.
    let longitudinal = if min_x >= front {
        min_x - front
    } else if max_x < front {
        max_x - front
    } else {
        0.0
    };
    let min_y = local.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = local.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let lateral = if min_y <= 0.0 && max_y >= 0.0 { 0.0 } else { min_y.abs().min(max_y.abs()) };
    ObjectGap { longitudinal, lateral }
}

fn nearest_distance(ego: &Obb, other: &Obb) -> f64 {
    let bumper = ego.center + Vec2::from_angle(ego.yaw) * ego.half_extents.x;
    other.distance_to_point(bumper)
}

/// Time-to-collision proxy: gap to the nearest agent whose footprint overlaps
/// the ego's lane band, over the ego's speed.
fn ttc(world: &WorldState, speed: f64) -> Option<f64> {
    if speed <= 0.0 {
        return None;
    }
    let ego = &world.ego().obb;
    let band = ego.half_extents.y;
    world
        .dynamic_agents()
        .filter_map(|e| {
            let g = object_gap(ego, &e.obb);
            (g.lateral <= band && g.longitudinal >= 0.0).then_some(g.longitudinal / speed)
        })
        .min_by(f64::total_cmp)
}

fn world_config(spec: &ExperimentSpec, point: GridPoint, trial_seed: u64) -> Result<ScenarioConfig> {
    let cfg = ScenarioConfig {
        scenario: spec.scenario,
        cruise_speed: point.speed,
        seed: trial_seed,
        ..spec.world
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_trial(spec: &ExperimentSpec, map: &GarageMap, point: GridPoint, trial: usize) -> Result<TrialResult> {
    let trial_seed = spec.trial_seed(point.speed, trial);
    let world_cfg = world_config(spec, point, trial_seed)?;
    let world = spawn(map, &world_cfg, &mut seed::rng(&[trial_seed, seed::label("spawn")]))?;
    simulate(spec, map, point, world, trial_seed)
}

/// Closed-loop run of a prepared world. The ego must sit at `world.ego_start`
/// on the +x lane; the first dynamic agent is the one whose first detection
/// is reported.
pub fn simulate(
    spec: &ExperimentSpec,
    map: &GarageMap,
    point: GridPoint,
    mut world: WorldState,
    trial_seed: u64,
) -> Result<TrialResult> {
    let world_cfg = world_config(spec, point, trial_seed)?;
    let control = ControlConfig { cruise_speed: point.speed, ..spec.control };
    control.validate()?;
    let primary = world.dynamic_agents().next().map(|e| e.id);

    let substeps = (world_cfg.physics_hz / world_cfg.control_hz).round() as usize;
    let tick_dt = 1.0 / world_cfg.control_hz;
    let dt = tick_dt / substeps as f64;

    let site = map.infra_site(spec.scenario);
    let infra_pose = RigidTransform2D::new(site.yaw, site.position);
    let to_infra = infra_pose.inverse();
    let err = spec.localization_error;
    let gamma = infra_pose.compose(&RigidTransform2D::new(err.dyaw, Vec2::new(err.dx, err.dy)));
    let infra_sensors = point.infra.sensors(site);
    let vehicle_sensors = point.vehicle.sensors();

    let mut warnings = Vec::new();
    let mut link = LinkScheduler::new(spec.link);
    let frame_probe = predicted_encoded_bytes(
        FRAME_HEIGHT,
        FRAME_WIDTH,
        FRAME_CHANNELS,
        SPARSITY_RANGE.0,
        spec.quantization,
    );
    if point.infra != InfraConfig::None {
        let report = budget_check(frame_probe, world_cfg.control_hz, &spec.link)?;
        if !report.feasible {
            warnings.push(format!(
                "link budget infeasible: {} B at {} Hz needs {:.0} bps, link has {:.0} bps; stale frames will drop",
                frame_probe, world_cfg.control_hz, report.required_bps, report.data_rate_bps
            ));
        }
    }

    let mut frames: Vec<InfraFrame> = Vec::new();
    let mut state = VehicleState::cruising(point.speed);
    let mut result = TrialResult {
        seed: trial_seed,
        crashed: false,
        collision_time: None,
        collided_with: None,
        min_ttc: None,
        first_detection_distance: None,
        end_time: 0.0,
        frames_sent: 0,
        frames_dropped: 0,
        bytes_sent: 0,
        sparsity_sum: 0.0,
        max_abs_jerk: 0.0,
        min_accel: 0.0,
        max_accel: 0.0,
        warnings: Vec::new(),
        trajectory: spec.record_trajectory.then(Vec::new),
    };

    let ticks = (world_cfg.timeout_s * world_cfg.control_hz).ceil() as u64;
    'ticks: for tick in 0..ticks {
        let t = world.sim_time;
        let occluders = OccluderSet::new(world.entities.iter().map(|e| &e.obb));
        let key = |platform| SenseKey {
            seed: trial_seed,
            platform,
            tick,
            vehicle: point.vehicle,
            infra: point.infra,
        };

        if !infra_sensors.is_empty() {
            let seen = sense_with(&infra_sensors, &world, &occluders, &spec.calibration, &key(Platform::Infrastructure))?;
            let detections = seen.iter().map(|d| d.transformed(&to_infra)).collect();
            let mut frame_rng = seed::rng(&[trial_seed, seed::label("frame"), tick]);
            let sparsity = frame_rng.random_range(SPARSITY_RANGE.0..=SPARSITY_RANGE.1);
            let size = predicted_encoded_bytes(FRAME_HEIGHT, FRAME_WIDTH, FRAME_CHANNELS, sparsity, spec.quantization);
            let delivery = link.offer(OutgoingFrame { id: tick, timestamp_s: t, size_bytes: size }, None)?;
            result.frames_sent += 1;
            result.sparsity_sum += sparsity;
            frames.push(InfraFrame { delivery, detections });
            // Older frames can never win over a newer delivered one.
            let keep_from = frames.len().saturating_sub(4);
            frames.drain(..keep_from);
        }

        let ego_pose = RigidTransform2D::new(world.ego().obb.yaw, world.ego().obb.center);
        let placed: Vec<_> = vehicle_sensors.iter().map(|s| s.placed(&ego_pose)).collect();
        let own = sense_with(&placed, &world, &occluders, &spec.calibration, &key(Platform::Vehicle))?;
        let fused = fuse_detections(&own, &frames, t, &gamma, spec.staleness_s);

        let ego_box = world.ego().obb;
        if result.first_detection_distance.is_none() {
            if let Some(id) = primary {
                if fused.iter().any(|d| d.truth_id == id) {
                    let agent = world.entities.iter().find(|e| e.id == id).expect("primary agent exists");
                    result.first_detection_distance = Some(nearest_distance(&ego_box, &agent.obb));
                }
            }
        }
        let gaps: Vec<ObjectGap> = fused.iter().map(|d| object_gap(&ego_box, &d.footprint)).collect();
        let v_star = target_speed(&gaps, point.speed);
        let a_star = target_accel(v_star, &state, &control);
        if let Some(traj) = result.trajectory.as_mut() {
            traj.push(TrajectorySample {
                t,
                x: ego_box.center.x,
                v: state.speed,
                a: state.accel,
                v_star,
                detections: fused.len(),
            });
        }

        for _ in 0..substeps {
            let next = step_dynamics(&state, a_star, &control, dt);
            // The standstill reset zeroes acceleration outside the jerk law.
            if !(next.speed == 0.0 && next.accel == 0.0 && state.accel != 0.0) {
                result.max_abs_jerk = result.max_abs_jerk.max(((next.accel - state.accel) / dt).abs());
            }
            result.min_accel = result.min_accel.min(next.accel);
            result.max_accel = result.max_accel.max(next.accel);
            state = next;
            world.step(dt);
            world.set_ego(state.position, state.speed);
            if let Some(hit) = first_collision(&world) {
                result.crashed = true;
                result.collision_time = Some(world.sim_time);
                result.collided_with = Some(hit.kind);
                break 'ticks;
            }
            if let Some(tt) = ttc(&world, state.speed) {
                result.min_ttc = Some(result.min_ttc.map_or(tt, |m: f64| m.min(tt)));
            }
        }
        if world.ego().obb.center.x > world_cfg.exit_x {
            break;
        }
    }

    result.end_time = world.sim_time;
    result.frames_dropped = link.dropped();
    result.bytes_sent = link.bytes_sent();
    result.warnings = warnings;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrashCell {
    pub vehicle: VehicleConfig,
    pub infra: InfraConfig,
    pub speed: f64,
    pub trials: usize,
    pub crashes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashTable {
    pub scenario: Scenario,
    pub cells: Vec<CrashCell>,
}

impl CrashTable {
    pub fn row(&self, vehicle: VehicleConfig, infra: InfraConfig) -> Vec<CrashCell> {
        let mut row: Vec<CrashCell> =
            self.cells.iter().filter(|c| c.vehicle == vehicle && c.infra == infra).copied().collect();
        row.sort_by(|a, b| a.speed.total_cmp(&b.speed));
        row
    }
}

/// Largest tested speed with no crashes there or at any lower speed; `None`
/// when even the lowest speed crashed or the row is missing.
pub fn max_safe_speed(table: &CrashTable, vehicle: VehicleConfig, infra: InfraConfig) -> Option<f64> {
    let mut best = None;
    for cell in table.row(vehicle, infra) {
        if cell.crashes > 0 {
            break;
        }
        best = Some(cell.speed);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub point: GridPoint,
    pub trial: usize,
    pub result: TrialResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub spec: ExperimentSpec,
    pub table: CrashTable,
    pub records: Vec<TrialRecord>,
}

/// Thread count from [`THREADS_ENV`], if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {s:?}"))),
        },
    }
}

/// Run every trial of every grid point. `threads` of `None` uses the
/// environment setting or rayon's default.
pub fn run_experiment(spec: &ExperimentSpec, threads: Option<usize>) -> Result<ExperimentOutput> {
    spec.validate()?;
    let map = build_default_map(spec.world.seed);
    let grid = spec.grid();
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..spec.trials).map(move |t| (g, t))).collect();
    let threads = match threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records: Vec<TrialRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(g, trial)| {
                run_trial(spec, &map, grid[g], trial).map(|result| TrialRecord { point: grid[g], trial, result })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(ExperimentOutput { spec: spec.clone(), table: tabulate(spec, &records), records })
}

/// Crash counts per grid point; independent of record order.
pub fn tabulate(spec: &ExperimentSpec, records: &[TrialRecord]) -> CrashTable {
    let cells = spec
        .grid()
        .into_iter()
        .map(|p| {
            let mine = records.iter().filter(|r| r.point == p);
            let (trials, crashes) = mine.fold((0, 0), |(n, c), r| (n + 1, c + r.result.crashed as usize));
            CrashCell { vehicle: p.vehicle, infra: p.infra, speed: p.speed, trials, crashes }
        })
        .collect();
    CrashTable { scenario: spec.scenario, cells }
}

pub fn crash_csv(tables: &[&CrashTable]) -> String {
    let mut out = String::from("scenario,veh_config,infra_config,speed,trials,crashes,max_safe_flag\n");
    for table in tables {
        for c in &table.cells {
            let flag = max_safe_speed(table, c.vehicle, c.infra) == Some(c.speed);
            writeln!(
                out,
                "{},{},{},{:.1},{},{},{}",
                table.scenario.short_name(),
                c.vehicle,
                c.infra,
                c.speed,
                c.trials,
                c.crashes,
                flag as u8
            )
            .expect("writing to a String");
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub scenario: Scenario,
    pub vehicle: VehicleConfig,
    pub infra: InfraConfig,
    /// `None` serializes as null: no tested speed was safe.
    pub max_safe_speed: Option<f64>,
    pub crashes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub frames_sent: usize,
    pub frames_dropped: usize,
    pub bytes_sent: usize,
    pub mean_frame_bytes: f64,
    pub mean_sparsity: f64,
    /// Encoded size relative to a dense float32 frame of the same shape.
    pub compression_ratio: f64,
    /// Fraction of the link's capacity used over the simulated time.
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub speeds: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
    pub configs: Vec<ConfigSummary>,
    pub link: LinkSummary,
    pub warnings: Vec<String>,
}

pub fn summarize(outputs: &[&ExperimentOutput]) -> Summary {
    let mut configs = Vec::new();
    let (mut frames, mut dropped, mut bytes, mut sparsity, mut busy_time, mut capacity) = (0, 0, 0, 0.0, 0.0, 0.0);
    let mut warnings = Vec::new();
    for out in outputs {
        for &vehicle in &out.spec.vehicle_configs {
            for &infra in &out.spec.infra_configs {
                configs.push(ConfigSummary {
                    scenario: out.table.scenario,
                    vehicle,
                    infra,
                    max_safe_speed: max_safe_speed(&out.table, vehicle, infra),
                    crashes: out.table.row(vehicle, infra).iter().map(|c| c.crashes).collect(),
                });
            }
        }
        for r in &out.records {
            let res = &r.result;
            frames += res.frames_sent;
            dropped += res.frames_dropped;
            bytes += res.bytes_sent;
            sparsity += res.sparsity_sum;
            if res.frames_sent > 0 {
                busy_time += res.bytes_sent as f64 * 8.0;
                capacity += out.spec.link.data_rate_bps * res.end_time;
            }
            for w in &res.warnings {
                if !warnings.contains(w) {
                    warnings.push(w.clone());
                }
            }
        }
    }
    let delivered = frames - dropped;
    let mean_frame_bytes = if delivered > 0 { bytes as f64 / delivered as f64 } else { 0.0 };
    let dense = (FRAME_HEIGHT * FRAME_WIDTH * FRAME_CHANNELS * 4) as f64;
    let first = outputs.first().map(|o| &o.spec);
    Summary {
        speeds: first.map(|s| s.speeds.clone()).unwrap_or_default(),
        trials: first.map_or(0, |s| s.trials),
        base_seed: first.map_or(0, |s| s.base_seed),
        configs,
        link: LinkSummary {
            frames_sent: frames,
            frames_dropped: dropped,
            bytes_sent: bytes,
            mean_frame_bytes,
            mean_sparsity: if frames > 0 { sparsity / frames as f64 } else { 0.0 },
            compression_ratio: if mean_frame_bytes > 0.0 { dense / mean_frame_bytes } else { 0.0 },
            utilization: if capacity > 0.0 { busy_time / capacity } else { 0.0 },
        },
        warnings,
    }
}

/// Write `crashes.csv` and `summary.json` into `dir`.
pub fn write_outputs(outputs: &[&ExperimentOutput], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tables: Vec<&CrashTable> = outputs.iter().map(|o| &o.table).collect();
    let csv_path = dir.join("crashes.csv");
    std::fs::write(&csv_path, crash_csv(&tables)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summarize(outputs)).expect("summary serializes") + "\n";
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(speed: f64, crashes: usize) -> CrashCell {
        CrashCell { vehicle: VehicleConfig::Cam, infra: InfraConfig::None, speed, trials: 20, crashes }
    }

    fn table(cells: Vec<CrashCell>) -> CrashTable {
        CrashTable { scenario: Scenario::PedestrianCrossing, cells }
    }

    #[test]
    fn max_safe_speed_examples() {
        let t = table(vec![cell(3.0, 0), cell(4.0, 1), cell(5.0, 3)]);
        assert_eq!(max_safe_speed(&t, VehicleConfig::Cam, InfraConfig::None), Some(3.0));
        let t = table(vec![cell(5.0, 0), cell(6.0, 0), cell(7.0, 1)]);
        assert_eq!(max_safe_speed(&t, VehicleConfig::Cam, InfraConfig::None), Some(6.0));
        let t = table(vec![cell(3.0, 2), cell(4.0, 20)]);
        assert_eq!(max_safe_speed(&t, VehicleConfig::Cam, InfraConfig::None), None);
        // A later zero after a crash does not count.
        let t = table(vec![cell(3.0, 0), cell(4.0, 1), cell(5.0, 0)]);
        assert_eq!(max_safe_speed(&t, VehicleConfig::Cam, InfraConfig::None), Some(3.0));
        assert_eq!(max_safe_speed(&t, VehicleConfig::CamLidar, InfraConfig::None), None);
    }

    #[test]
    fn max_safe_speed_is_monotone_under_fewer_crashes() {
        use proptest::prelude::*;
        proptest!(|(counts in proptest::collection::vec(0usize..4, 1..8), mask in proptest::collection::vec(any::<bool>(), 8))| {
            let row: Vec<_> = counts.iter().enumerate().map(|(i, &c)| cell(3.0 + i as f64, c)).collect();
            let fewer: Vec<_> = row.iter().zip(&mask).map(|(c, &m)| CrashCell { crashes: if m { 0 } else { c.crashes }, ..*c }).collect();
            let a = max_safe_speed(&table(row), VehicleConfig::Cam, InfraConfig::None).unwrap_or(0.0);
            let b = max_safe_speed(&table(fewer), VehicleConfig::Cam, InfraConfig::None).unwrap_or(0.0);
            prop_assert!(b >= a);
        });
    }

    #[test]
    fn gap_measurement() {
        let ego = Obb::new(Vec2::new(0.0, 0.0), 0.0, 4.6, 1.9, 1.5);
        let ped = Obb::new(Vec2::new(10.0, 3.0), 0.0, 0.5, 0.5, 1.75);
        let g = object_gap(&ego, &ped);
        assert!((g.longitudinal - (9.75 - 2.3)).abs() < 1e-12);
        assert!((g.lateral - 2.75).abs() < 1e-12);
        let across = Obb::new(Vec2::new(6.0, 0.3), 0.0, 0.5, 4.0, 1.75);
        assert_eq!(object_gap(&ego, &across).lateral, 0.0);
        // Straddling the bumper plane is not behind.
        let beside = Obb::new(Vec2::new(2.0, 3.0), 0.0, 4.6, 1.9, 1.5);
        assert_eq!(object_gap(&ego, &beside).longitudinal, 0.0);
        let behind = Obb::new(Vec2::new(-6.0, 0.0), 0.0, 4.6, 1.9, 1.5);
        assert!((object_gap(&ego, &behind).longitudinal - (-3.7 - 2.3)).abs() < 1e-12);
    }

    #[test]
    fn empty_table_csv_is_header_only() {
        let t = table(vec![]);
        assert_eq!(crash_csv(&[&t]), "scenario,veh_config,infra_config,speed,trials,crashes,max_safe_flag\n");
    }

    #[test]
    fn csv_flags_max_safe_cell() {
        let t = table(vec![cell(3.0, 0), cell(4.0, 0), cell(5.0, 2)]);
        let csv = crash_csv(&[&t]);
        assert!(csv.contains("s1,cam,none,4.0,20,0,1\n"));
        assert!(csv.contains("s1,cam,none,3.0,20,0,0\n"));
    }

    #[test]
    fn spec_validation() {
        let mut s = ExperimentSpec::default();
        assert!(s.validate().is_ok());
        s.speeds = vec![4.0, 3.0];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.speeds = vec![];
        assert!(s.validate().is_err());
        let s = ExperimentSpec { trials: 0, ..ExperimentSpec::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s: ExperimentSpec = serde_json::from_str(r#"{"scenario": "s2", "trials": 3}"#).unwrap();
        assert_eq!(s.scenario, Scenario::TJunction);
        assert_eq!(s.trials, 3);
        assert_eq!(s.speeds.len(), 8);
    }
}
