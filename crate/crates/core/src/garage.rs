//! Garage geometry, the two scenario generators, scripted-agent kinematics and
//! collision checks.
//!
//! World frame: the main road runs along +x with its centerline at `y = 0`.
//! The ego drives in the right-hand lane (`y = -lane_width / 2`). Parking rows
//! flank the road on both sides; a side road leaves the right-hand row at the
//! T-junction, and its mouth is framed by two corner pillars.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Obb, Vec2};

pub const SLOT_LENGTH: f64 = 5.8;
pub const SLOT_WIDTH: f64 = 3.2;
pub const LANE_WIDTH: f64 = 3.4;
pub const PILLAR_SIZE: f64 = 0.8;
pub const STRUCTURE_HEIGHT: f64 = 8.0;
pub const GRID_CELL: f64 = 0.16;

pub const ADULT_SPEED: f64 = 1.5;
pub const CHILD_SPEED: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Ego,
    Car,
    Van,
    PedestrianAdult,
    PedestrianChild,
    Pillar,
    Wall,
}

impl EntityKind {
    pub fn is_pedestrian(self) -> bool {
        matches!(self, EntityKind::PedestrianAdult | EntityKind::PedestrianChild)
    }

    pub fn is_vehicle(self) -> bool {
        matches!(self, EntityKind::Ego | EntityKind::Car | EntityKind::Van)
    }

    pub fn is_structure(self) -> bool {
        matches!(self, EntityKind::Pillar | EntityKind::Wall)
    }

    /// Footprint length, width and height.
    pub fn dims(self) -> (f64, f64, f64) {
        match self {
            EntityKind::Ego | EntityKind::Car => (4.6, 1.9, 1.5),
            EntityKind::Van => (5.2, 2.0, 2.2),
            EntityKind::PedestrianAdult => (0.5, 0.5, 1.75),
            EntityKind::PedestrianChild => (0.5, 0.5, 1.2),
            EntityKind::Pillar => (PILLAR_SIZE, PILLAR_SIZE, STRUCTURE_HEIGHT),
            EntityKind::Wall => (1.0, 0.4, STRUCTURE_HEIGHT),
        }
    }
}

/// One piece of a scripted path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Line {
        from: Vec2,
        to: Vec2,
    },
    /// Circular arc; `sweep > 0` turns counter-clockwise.
    Arc {
        center: Vec2,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Line { from, to } => from.distance(to),
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Position and heading after travelling `s` along the segment.
    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        match *self {
            Segment::Line { from, to } => {
                let d = to - from;
                let len = d.norm();
                let u = d * (1.0 / len);
                (from + u * s, d.y.atan2(d.x))
            }
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let dir = sweep.signum();
                let theta = start_angle + dir * s / radius;
                let p = center + Vec2::from_angle(theta) * radius;
                (p, theta + dir * FRAC_PI_2)
            }
        }
    }
}

/// A path followed at constant speed from `start_time` on. Before that the
/// agent waits at the start; after the end it either stops or, if `extend`,
/// keeps going along the final heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub segments: Vec<Segment>,
    pub start_time: f64,
    pub extend: bool,
}

impl Route {
    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    pub fn pose_at(&self, mut s: f64) -> (Vec2, f64) {
        s = s.max(0.0);
        let last = self.segments.len() - 1;
        for (i, seg) in self.segments.iter().enumerate() {
            let len = seg.length();
            if s <= len || i == last {
                if i == last && s > len && !self.extend {
                    return seg.pose_at(len);
                }
                return seg.pose_at(s);
            }
            s -= len;
        }
        unreachable!("route has at least one segment")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub kind: EntityKind,
    #[serde(rename = "box")]
    pub obb: Obb,
    pub speed: f64,
    pub heading: f64,
    pub route: Option<Route>,
}

impl Entity {
    pub fn fixed(id: u32, kind: EntityKind, center: Vec2, yaw: f64, length: f64, width: f64) -> Self {
        let (_, _, h) = kind.dims();
        Self {
            id,
            kind,
            obb: Obb::new(center, yaw, length, width, h),
            speed: 0.0,
            heading: yaw,
            route: None,
        }
    }

    fn scripted(id: u32, kind: EntityKind, speed: f64, route: Route) -> Self {
        let (l, w, h) = kind.dims();
        let (p, heading) = route.pose_at(0.0);
        Self {
            id,
            kind,
            obb: Obb::new(p, heading, l, w, h),
            speed,
            heading,
            route: Some(route),
        }
    }

    /// Moves on its own: pedestrians and driving vehicles, but not the ego.
    pub fn is_dynamic(&self) -> bool {
        self.route.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSide {
    /// `y > 0`, across the road from the ego.
    Left,
    /// `y < 0`, the ego's side.
    Right,
}

impl RowSide {
    fn sign(self) -> f64 {
        match self {
            RowSide::Left => 1.0,
            RowSide::Right => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub side: RowSide,
    pub index: usize,
    /// Center of the slot rectangle (`SLOT_WIDTH` along x, `SLOT_LENGTH` along y).
    pub center: Vec2,
}

impl Slot {
    pub fn x_range(&self) -> (f64, f64) {
        (self.center.x - SLOT_WIDTH / 2.0, self.center.x + SLOT_WIDTH / 2.0)
    }
}

/// Mounting point of the roadside unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfraSite {
    pub position: Vec2,
    pub height: f64,
    pub yaw: f64,
    /// Downward tilt, radians.
    pub pitch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarageMap {
    pub seed: u64,
    pub slot_length: f64,
    pub slot_width: f64,
    pub lane_width: f64,
    pub region_min: Vec2,
    pub region_max: Vec2,
    pub slots_per_row: usize,
    pub slots: Vec<Slot>,
    pub pillars: Vec<Obb>,
    pub walls: Vec<Obb>,
    /// Centerline x of the side road.
    pub junction_x: f64,
    /// Pedestrians may appear at right-row gaps whose x lies in this range.
    pub crossing_zone: (f64, f64),
    /// Roadside unit overlooking the crossing zone.
    pub infra_crossing: InfraSite,
    /// Roadside unit overlooking the side road.
    pub infra_junction: InfraSite,
}

impl GarageMap {
    /// Detection-region grid as `(rows along y, columns along x)`.
    pub fn grid_dims(&self) -> (usize, usize) {
        let h = ((self.region_max.y - self.region_min.y) / GRID_CELL).round() as usize;
        let w = ((self.region_max.x - self.region_min.x) / GRID_CELL).round() as usize;
        (h, w)
    }

    pub fn ego_lane_y(&self) -> f64 {
        -self.lane_width / 2.0
    }

    /// Half-open x range of the side road, without the corner pillars.
    pub fn side_road(&self) -> (f64, f64) {
        (self.junction_x - self.lane_width, self.junction_x + self.lane_width)
    }

    /// Right-row gaps between two occupied neighbours, as the x of the shared
    /// slot boundary, in increasing order.
    pub fn right_row_gaps(&self) -> Vec<f64> {
        let mut xs: Vec<(usize, f64)> = self
            .slots
            .iter()
            .filter(|s| s.side == RowSide::Right)
            .map(|s| (s.index, s.x_range().1))
            .collect();
        xs.sort_by_key(|&(i, _)| i);
        xs.windows(2)
            .filter(|w| w[1].0 == w[0].0 + 1)
            .map(|w| w[0].1)
            .collect()
    }

    pub fn crossing_gaps(&self) -> Vec<f64> {
        let (lo, hi) = self.crossing_zone;
        self.right_row_gaps()
            .into_iter()
            .filter(|&x| x >= lo - 1e-9 && x <= hi + 1e-9)
            .collect()
    }

    /// Roadside unit used in `scenario`.
    pub fn infra_site(&self, scenario: Scenario) -> &InfraSite {
        match scenario {
            Scenario::PedestrianCrossing => &self.infra_crossing,
            Scenario::TJunction => &self.infra_junction,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }
}

/// The garage used throughout. The layout does not depend on `seed`; it is
/// recorded so scenario files can name the map they were generated against.
pub fn build_default_map(seed: u64) -> GarageMap {
    let region_min = Vec2::new(0.0, -30.08);
    let region_max = Vec2::new(44.8, 30.08);
    let slots_per_row = ((region_max.x - region_min.x) / SLOT_WIDTH + 1e-9).floor() as usize;
    let junction_x = 30.4;
    let road_half = LANE_WIDTH;
    let mouth_lo = junction_x - road_half - PILLAR_SIZE;
    let mouth_hi = junction_x + road_half + PILLAR_SIZE;

    let mut slots = Vec::new();
    for side in [RowSide::Left, RowSide::Right] {
        for index in 0..slots_per_row {
            let x0 = region_min.x + index as f64 * SLOT_WIDTH;
            let x1 = x0 + SLOT_WIDTH;
            if side == RowSide::Right && x1 > mouth_lo && x0 < mouth_hi {
                continue;
            }
            let cy = side.sign() * (LANE_WIDTH + SLOT_LENGTH / 2.0);
            slots.push(Slot {
                side,
                index,
                center: Vec2::new((x0 + x1) / 2.0, cy),
            });
        }
    }

    let back = LANE_WIDTH + SLOT_LENGTH + PILLAR_SIZE / 2.0;
    let pillar = |x: f64, y: f64| Obb::new(Vec2::new(x, y), 0.0, PILLAR_SIZE, PILLAR_SIZE, STRUCTURE_HEIGHT);
    let mut pillars = Vec::new();
    let mut k = 0;
    loop {
        let x = region_min.x + k as f64 * 3.0 * SLOT_WIDTH;
        if x > region_max.x + 1e-9 {
            break;
        }
        pillars.push(pillar(x, back));
        if x + PILLAR_SIZE / 2.0 < mouth_lo || x - PILLAR_SIZE / 2.0 > mouth_hi {
            pillars.push(pillar(x, -back));
        }
        k += 1;
    }
    // Corner pillars stand on the junction corners and reach into both roads.
    let corner_y = -LANE_WIDTH;
    pillars.push(pillar(junction_x - road_half, corner_y));
    pillars.push(pillar(junction_x + road_half, corner_y));

    // Side-road walls start behind the parking row so the row itself frames
    // the mouth.
    let wall_top = -(LANE_WIDTH + SLOT_LENGTH + PILLAR_SIZE);
    let wall_len = wall_top - region_min.y;
    let wall = |x: f64| {
        Obb::new(
            Vec2::new(x, wall_top - wall_len / 2.0),
            FRAC_PI_2,
            wall_len,
            PILLAR_SIZE,
            STRUCTURE_HEIGHT,
        )
    };
    let walls = vec![
        wall(mouth_lo + PILLAR_SIZE / 2.0),
        wall(mouth_hi - PILLAR_SIZE / 2.0),
    ];

    GarageMap {
        seed,
        slot_length: SLOT_LENGTH,
        slot_width: SLOT_WIDTH,
        lane_width: LANE_WIDTH,
        region_min,
        region_max,
        slots_per_row,
        slots,
        pillars,
        walls,
        junction_x,
        crossing_zone: (12.8, 25.6),
        infra_crossing: InfraSite {
            position: Vec2::new(22.0, 9.0),
            height: 7.0,
            yaw: -FRAC_PI_2,
            pitch: 30f64.to_radians(),
        },
        // On the far corner pillar, looking back down the side road.
        infra_junction: InfraSite {
            position: Vec2::new(junction_x + road_half, corner_y),
            height: 7.0,
            yaw: (-115f64).to_radians(),
            pitch: 30f64.to_radians(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "pedestrian_crossing", alias = "s1")]
    PedestrianCrossing,
    #[serde(rename = "t_junction", alias = "s2")]
    TJunction,
}

impl Scenario {
    pub fn short_name(self) -> &'static str {
        match self {
            Scenario::PedestrianCrossing => "s1",
            Scenario::TJunction => "s2",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" | "pedestrian_crossing" => Ok(Scenario::PedestrianCrossing),
            "s2" | "t_junction" => Ok(Scenario::TJunction),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (expected s1 or s2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub cruise_speed: f64,
    pub spawn_prob: f64,
    /// Probability that a spawned pedestrian is an adult.
    pub adult_child_ratio: f64,
    pub seed: u64,
    pub control_hz: f64,
    pub physics_hz: f64,
    pub timeout_s: f64,
    /// Ego starts here on the approach road, upstream of the garage.
    pub ego_start_x: f64,
    pub exit_x: f64,
    pub van_fraction: f64,
    /// Range of the other vehicle's arrival-time lead at the conflict point.
    pub min_arrival_offset_s: f64,
    pub max_arrival_offset_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::PedestrianCrossing,
            cruise_speed: 5.0,
            spawn_prob: 0.5,
            adult_child_ratio: 0.5,
            seed: 0,
            control_hz: 20.0,
            physics_hz: 100.0,
            timeout_s: 60.0,
            ego_start_x: -30.0,
            exit_x: 46.0,
            van_fraction: 0.4,
            min_arrival_offset_s: 0.0,
            max_arrival_offset_s: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.cruise_speed > 0.0 && self.cruise_speed.is_finite()) {
            return bad(format!("cruise_speed must be > 0, got {}", self.cruise_speed));
        }
        for (name, p) in [
            ("spawn_prob", self.spawn_prob),
            ("adult_child_ratio", self.adult_child_ratio),
            ("van_fraction", self.van_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.control_hz > 0.0 && self.physics_hz > 0.0) {
            return bad("rates must be positive".into());
        }
        let ratio = self.physics_hz / self.control_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return bad(format!(
                "physics rate {} must be a whole multiple of control rate {}",
                self.physics_hz, self.control_hz
            ));
        }
        if !(self.timeout_s > 0.0) {
            return bad("timeout must be > 0".into());
        }
        if !(self.min_arrival_offset_s <= self.max_arrival_offset_s && self.max_arrival_offset_s.is_finite() && self.min_arrival_offset_s.is_finite()) {
            return bad(format!(
                "arrival offset range [{}, {}] is empty",
                self.min_arrival_offset_s, self.max_arrival_offset_s
            ));
        }
        if !(self.exit_x > self.ego_start_x) {
            return bad("exit_x must lie beyond ego_start_x".into());
        }
        Ok(())
    }
}

/// Everything that exists in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub sim_time: f64,
    pub entities: Vec<Entity>,
    /// Index of the ego in `entities`.
    pub ego: usize,
    pub ego_start: Vec2,
    /// Conflict point of the scripted encounter, if any.
    pub conflict_point: Option<Vec2>,
}

impl WorldState {
    pub fn ego(&self) -> &Entity {
        &self.entities[self.ego]
    }

    /// Place the ego `progress` meters along its straight path.
    pub fn set_ego(&mut self, progress: f64, speed: f64) {
        let start = self.ego_start;
        let e = &mut self.entities[self.ego];
        e.obb.center = Vec2::new(start.x + progress, start.y);
        e.speed = speed;
    }

    /// Advance scripted agents by `dt`; the ego is moved by `set_ego`.
    pub fn step(&mut self, dt: f64) {
        if dt != 0.0 {
            self.step_to(self.sim_time + dt);
        }
    }

    pub fn dynamic_agents(&self) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(|e| e.is_dynamic())
    }
}

pub fn step_world(state: &WorldState, dt: f64) -> WorldState {
    let mut next = state.clone();
    next.step(dt);
    next
}

/// First entity the ego overlaps, if any.
pub fn first_collision(state: &WorldState) -> Option<&Entity> {
    let ego = state.ego();
    state
        .entities
        .iter()
        .enumerate()
        .find(|&(i, e)| i != state.ego && ego.obb.overlaps(&e.obb))
        .map(|(_, e)| e)
}

pub fn check_collision(state: &WorldState) -> bool {
    first_collision(state).is_some()
}

fn parked_vehicles(map: &GarageMap, cfg: &ScenarioConfig, rng: &mut impl RngCore, next_id: &mut u32) -> Vec<Entity> {
    let mut out = Vec::with_capacity(map.slots.len());
    for slot in &map.slots {
        let kind = if rng.random_bool(cfg.van_fraction) {
            EntityKind::Van
        } else {
            EntityKind::Car
        };
        let (l0, w0, _) = kind.dims();
        let length = l0 + rng.random_range(-0.2..=0.2);
        let width = w0 + rng.random_range(-0.1..=0.05);
        // Road-side end of the vehicle sits 0.05..0.3 m inside the slot.
        let inset = rng.random_range(0.05..=0.3);
        let x = slot.center.x + rng.random_range(-0.15..=0.15);
        let sign = slot.side.sign();
        let y = sign * (LANE_WIDTH + inset + length / 2.0);
        let yaw = sign * FRAC_PI_2;
        out.push(Entity::fixed(*next_id, kind, Vec2::new(x, y), yaw, length, width));
        *next_id += 1;
    }
    out
}

fn static_world(map: &GarageMap, cfg: &ScenarioConfig, rng: &mut impl RngCore) -> WorldState {
    let mut next_id = 1;
    let mut entities = Vec::new();
    let ego_start = Vec2::new(cfg.ego_start_x, map.ego_lane_y());
    let (l, w, _) = EntityKind::Ego.dims();
    let mut ego = Entity::fixed(0, EntityKind::Ego, ego_start, 0.0, l, w);
    ego.speed = cfg.cruise_speed;
    entities.push(ego);
    for p in &map.pillars {
        entities.push(Entity {
            id: next_id,
            kind: EntityKind::Pillar,
            obb: *p,
            speed: 0.0,
            heading: p.yaw,
            route: None,
        });
        next_id += 1;
    }
    for wall in &map.walls {
        entities.push(Entity {
            id: next_id,
            kind: EntityKind::Wall,
            obb: *wall,
            speed: 0.0,
            heading: wall.yaw,
            route: None,
        });
        next_id += 1;
    }
    entities.extend(parked_vehicles(map, cfg, rng, &mut next_id));
    WorldState {
        sim_time: 0.0,
        entities,
        ego: 0,
        ego_start,
        conflict_point: None,
    }
}

/// Time for the unbraked ego's front bumper to reach `x`.
fn unbraked_arrival(cfg: &ScenarioConfig, x: f64) -> f64 {
    let half = EntityKind::Ego.dims().0 / 2.0;
    (x - (cfg.ego_start_x + half)) / cfg.cruise_speed
}

/// Deepest road-end setback of the parked vehicles either side of a
/// right-row gap, measured from the road centerline.
fn neighbour_recess(world: &WorldState, gap_x: f64, slot_width: f64) -> f64 {
    world
        .entities
        .iter()
        .filter(|e| e.kind.is_vehicle() && e.route.is_none() && e.kind != EntityKind::Ego)
        .filter(|e| e.obb.center.y < 0.0 && (e.obb.center.x - gap_x).abs() < slot_width)
        .map(|e| -e.obb.center.y - e.obb.half_extents.x)
        .fold(LANE_WIDTH, f64::max)
}

/// Pedestrian crossing: every crossing-zone gap independently hosts a
/// pedestrian who waits inside the gap and then walks straight across the road
/// so that it is inside the ego's lane when an unbraked ego would get there.
pub fn spawn_s1(map: &GarageMap, cfg: &ScenarioConfig, rng: &mut impl RngCore) -> Result<WorldState> {
    cfg.validate()?;
    if cfg.scenario != Scenario::PedestrianCrossing {
        return Err(Error::Config("spawn_s1 needs the pedestrian_crossing scenario".into()));
    }
    let mut world = static_world(map, cfg, rng);
    let mut next_id = world.entities.iter().map(|e| e.id).max().unwrap_or(0) + 1;
    let lane_y = map.ego_lane_y();
    let ego_half_w = EntityKind::Ego.dims().1 / 2.0;
    for gap_x in map.crossing_gaps() {
        if !rng.random_bool(cfg.spawn_prob) {
            continue;
        }
        let adult = rng.random_bool(cfg.adult_child_ratio);
        let (kind, speed) = if adult {
            (EntityKind::PedestrianAdult, ADULT_SPEED)
        } else {
            (EntityKind::PedestrianChild, CHILD_SPEED)
        };
        let half = kind.dims().0 / 2.0;
        let x = gap_x + rng.random_range(-0.1..=0.1);
        // Waiting spot: front edge behind the road ends of both neighbours.
        let recess = neighbour_recess(&world, gap_x, map.slot_width);
        let y_start = -(recess + half + rng.random_range(0.2..=0.5));
        // Position inside the ego's swept band when the ego would arrive.
        let band_lo = lane_y - ego_half_w - half;
        let y_hit = rng.random_range(band_lo + 0.3..=band_lo + 1.2);
        let t_arrive = unbraked_arrival(cfg, x - half);
        let start_time = t_arrive - (y_hit - y_start) / speed;
        let y_end = LANE_WIDTH + half + 2.0;
        let route = Route {
            segments: vec![Segment::Line {
                from: Vec2::new(x, y_start),
                to: Vec2::new(x, y_end),
            }],
            start_time,
            extend: false,
        };
        let mut e = Entity::scripted(next_id, kind, speed, route);
        // Pedestrians face the road while waiting.
        e.heading = FRAC_PI_2;
        world.entities.push(e);
        next_id += 1;
    }
    world.step_to(0.0);
    Ok(world)
}

/// Geometry of the turning vehicle's path: up the side road in its right-hand
/// lane, then a left turn across the ego's lane into the far lane.
pub struct TurnPath {
    pub lane_x: f64,
    pub mouth_y: f64,
    pub arc_center: Vec2,
    pub radius: f64,
    /// Where the path center crosses the ego's lane centerline.
    pub conflict_point: Vec2,
    /// Arc length from the arc start to the conflict point.
    pub arc_to_conflict: f64,
}

pub fn turn_path(map: &GarageMap) -> TurnPath {
    let lane_x = map.junction_x + map.lane_width / 2.0;
    let far_lane_y = map.lane_width / 2.0;
    let mouth_y = -map.lane_width;
    let radius = far_lane_y - mouth_y;
    let arc_center = Vec2::new(lane_x - radius, mouth_y);
    let phi = ((map.ego_lane_y() - mouth_y) / radius).asin();
    TurnPath {
        lane_x,
        mouth_y,
        arc_center,
        radius,
        conflict_point: arc_center + Vec2::from_angle(phi) * radius,
        arc_to_conflict: radius * phi,
    }
}

/// Occluded T-junction: a vehicle comes up the side road at the ego's cruise
/// speed and turns left across the ego's lane without braking.
/// `offset > 0` means it reaches the conflict point that many seconds before
/// an unbraked ego would.
pub fn spawn_s2_with_offset(map: &GarageMap, cfg: &ScenarioConfig, rng: &mut impl RngCore, offset: f64) -> Result<WorldState> {
    cfg.validate()?;
    if cfg.scenario != Scenario::TJunction {
        return Err(Error::Config("spawn_s2 needs the t_junction scenario".into()));
    }
    let mut world = static_world(map, cfg, rng);
    let next_id = world.entities.iter().map(|e| e.id).max().unwrap_or(0) + 1;
    let path = turn_path(map);
    let t_ego = unbraked_arrival(cfg, path.conflict_point.x);
    let t_other = t_ego - offset;
    let straight = cfg.cruise_speed * t_other - path.arc_to_conflict;
    let kind = if rng.random_bool(cfg.van_fraction) {
        EntityKind::Van
    } else {
        EntityKind::Car
    };
    // Start beyond the map if the approach is longer than the side road.
    let route = Route {
        segments: vec![
            Segment::Line {
                from: Vec2::new(path.lane_x, path.mouth_y - straight),
                to: Vec2::new(path.lane_x, path.mouth_y),
            },
            Segment::Arc {
                center: path.arc_center,
                radius: path.radius,
                start_angle: 0.0,
                sweep: FRAC_PI_2,
            },
            Segment::Line {
                from: Vec2::new(path.arc_center.x, path.mouth_y + path.radius),
                to: Vec2::new(path.arc_center.x - 1.0, path.mouth_y + path.radius),
            },
        ],
        start_time: 0.0,
        extend: true,
    };
    world.entities.push(Entity::scripted(next_id, kind, cfg.cruise_speed, route));
    world.conflict_point = Some(path.conflict_point);
    world.step_to(0.0);
    Ok(world)
}

pub fn spawn_s2(map: &GarageMap, cfg: &ScenarioConfig, rng: &mut impl RngCore) -> Result<WorldState> {
    let offset = rng.random_range(cfg.min_arrival_offset_s..=cfg.max_arrival_offset_s);
    spawn_s2_with_offset(map, cfg, rng, offset)
}

pub fn spawn(map: &GarageMap, cfg: &ScenarioConfig, rng: &mut impl RngCore) -> Result<WorldState> {
    match cfg.scenario {
        Scenario::PedestrianCrossing => spawn_s1(map, cfg, rng),
        Scenario::TJunction => spawn_s2(map, cfg, rng),
    }
}

impl WorldState {
    /// Set the clock and re-pose every scripted agent.
    fn step_to(&mut self, t: f64) {
        self.sim_time = t;
        for e in &mut self.entities {
            if let Some(route) = &e.route {
                let s = e.speed * (t - route.start_time).max(0.0);
                let (p, heading) = route.pose_at(s);
                e.obb.center = p;
                if e.kind.is_pedestrian() {
                    // Footprint is square; keep it axis-aligned with the walk.
                    e.obb.yaw = FRAC_PI_2;
                    e.heading = FRAC_PI_2;
                } else {
                    e.obb.yaw = heading;
                    e.heading = heading;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s1_cfg(v: f64, p: f64, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario: Scenario::PedestrianCrossing,
            cruise_speed: v,
            spawn_prob: p,
            seed,
            ..Default::default()
        }
    }

    fn s2_cfg(v: f64) -> ScenarioConfig {
        ScenarioConfig {
            scenario: Scenario::TJunction,
            cruise_speed: v,
            ..Default::default()
        }
    }

    fn pedestrians(w: &WorldState) -> Vec<&Entity> {
        w.entities.iter().filter(|e| e.kind.is_pedestrian()).collect()
    }

    #[test]
    fn map_is_deterministic() {
        assert_eq!(build_default_map(0).to_json(), build_default_map(0).to_json());
    }

    #[test]
    fn map_dimensions() {
        let m = build_default_map(0);
        assert_eq!(m.slots_per_row, 14);
        assert_eq!(m.grid_dims(), (376, 280));
        assert_eq!(m.slots.iter().filter(|s| s.side == RowSide::Left).count(), 14);
        // The side road and its corner pillars take three right-row slots.
        assert_eq!(m.slots.iter().filter(|s| s.side == RowSide::Right).count(), 11);
    }

    #[test]
    fn slots_do_not_intrude_on_the_side_road() {
        let m = build_default_map(0);
        let (lo, hi) = m.side_road();
        for s in m.slots.iter().filter(|s| s.side == RowSide::Right) {
            let (a, b) = s.x_range();
            assert!(b <= lo - PILLAR_SIZE + 1e-9 || a >= hi + PILLAR_SIZE - 1e-9, "{s:?}");
        }
    }

    #[test]
    fn spawn_probability_extremes() {
        let m = build_default_map(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = spawn_s1(&m, &s1_cfg(5.0, 0.0, 1), &mut rng).unwrap();
        assert!(pedestrians(&w).is_empty());
        let w = spawn_s1(&m, &s1_cfg(5.0, 1.0, 1), &mut rng).unwrap();
        assert_eq!(pedestrians(&w).len(), m.crossing_gaps().len());
    }

    #[test]
    fn spawn_is_deterministic() {
        let m = build_default_map(0);
        let a = spawn_s1(&m, &s1_cfg(6.0, 0.5, 9), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = spawn_s1(&m, &s1_cfg(6.0, 0.5, 9), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let a = spawn_s2(&m, &s2_cfg(6.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = spawn_s2(&m, &s2_cfg(6.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_world_is_collision_free() {
        let m = build_default_map(0);
        for seed in 0..50 {
            for v in [3.0, 10.0] {
                let w = spawn_s1(&m, &s1_cfg(v, 1.0, seed), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                assert!(!check_collision(&w));
                let w = spawn_s2(&m, &s2_cfg(v), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                assert!(!check_collision(&w));
            }
        }
    }

    /// Drive the ego at constant speed and report whether it ever collides.
    fn unbraked_crash(mut w: WorldState, v: f64, horizon: f64) -> bool {
        let dt = 0.01;
        let n = (horizon / dt) as usize;
        for i in 1..=n {
            w.step(dt);
            w.set_ego(v * i as f64 * dt, v);
            if check_collision(&w) {
                return true;
            }
        }
        false
    }

    #[test]
    fn unbraked_ego_meets_every_pedestrian() {
        let m = build_default_map(0);
        for seed in 0..20 {
            for v in [3.0, 6.0, 10.0] {
                let cfg = s1_cfg(v, 1.0, seed);
                let w = spawn_s1(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                // Keep one pedestrian at a time.
                for keep in pedestrians(&w).iter().map(|p| p.id).collect::<Vec<_>>() {
                    let mut one = w.clone();
                    one.entities.retain(|e| !e.kind.is_pedestrian() || e.id == keep);
                    assert!(unbraked_crash(one, v, 40.0), "seed {seed} v {v} ped {keep}");
                }
            }
        }
    }

    #[test]
    fn pedestrians_walk_perpendicular_at_their_speed() {
        let m = build_default_map(0);
        let w0 = spawn_s1(&m, &s1_cfg(5.0, 1.0, 3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut w = w0.clone();
        let dt = 0.01;
        for _ in 0..2000 {
            let before = w.clone();
            w.step(dt);
            for (a, b) in before.entities.iter().zip(&w.entities) {
                if a.kind.is_pedestrian() {
                    let d = b.obb.center - a.obb.center;
                    assert_eq!(d.x, 0.0);
                    assert!(d.y >= 0.0 && d.y <= a.speed * dt + 1e-12);
                }
            }
        }
    }

    #[test]
    fn step_examples() {
        let m = build_default_map(0);
        let mut w = spawn_s1(&m, &s1_cfg(5.0, 1.0, 4), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let latest = w
            .dynamic_agents()
            .map(|e| e.route.as_ref().unwrap().start_time)
            .fold(f64::MIN, f64::max);
        w.step_to(latest + 0.1);
        let same = step_world(&w, 0.0);
        assert_eq!(same, w);
        let one = step_world(&w, 0.01);
        let p0 = pedestrians(&w)[0];
        let p1 = pedestrians(&one)[0];
        assert!(((p1.obb.center.y - p0.obb.center.y) - p0.speed * 0.01).abs() < 1e-12);
        let two = step_world(&step_world(&w, 0.01), 0.01);
        let double = step_world(&w, 0.02);
        for (a, b) in two.entities.iter().zip(&double.entities) {
            assert!(a.obb.center.distance(b.obb.center) < 1e-12);
        }
    }

    #[test]
    fn turning_path_hits_conflict_point() {
        let m = build_default_map(0);
        let tp = turn_path(&m);
        assert!((tp.conflict_point.y - m.ego_lane_y()).abs() < 1e-12);
        assert!((tp.conflict_point.distance(tp.arc_center) - tp.radius).abs() < 1e-12);
        // Arc endpoints: leaves the side-road lane heading +y, ends heading -x.
        let arc = Segment::Arc {
            center: tp.arc_center,
            radius: tp.radius,
            start_angle: 0.0,
            sweep: FRAC_PI_2,
        };
        let (p0, h0) = arc.pose_at(0.0);
        let (p1, h1) = arc.pose_at(arc.length());
        assert!((p0.x - tp.lane_x).abs() < 1e-12 && (h0 - FRAC_PI_2).abs() < 1e-12);
        assert!((p1.y - m.lane_width / 2.0).abs() < 1e-12 && (h1 - PI).abs() < 1e-12);
    }

    #[test]
    fn zero_offset_meets_at_conflict_point() {
        let m = build_default_map(0);
        let v = 5.0;
        let cfg = s2_cfg(v);
        let w = spawn_s2_with_offset(&m, &cfg, &mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
        let cp = w.conflict_point.unwrap();
        let half = EntityKind::Ego.dims().0 / 2.0;
        let t = unbraked_arrival(&cfg, cp.x);
        let mut at = w.clone();
        at.step(t);
        at.set_ego(v * t, v);
        let other = at.entities.last().unwrap();
        assert!(other.obb.center.distance(cp) < 1e-9);
        assert!((at.ego().obb.center.x + half - cp.x).abs() < 1e-9);
        assert!(unbraked_crash(w, v, 30.0));
    }

    #[test]
    fn unbraked_outcome_depends_on_lead() {
        let m = build_default_map(0);
        let crash = |v: f64, off: f64| {
            let w = spawn_s2_with_offset(&m, &s2_cfg(v), &mut ChaCha8Rng::seed_from_u64(0), off).unwrap();
            unbraked_crash(w, v, 30.0)
        };
        // Zero lead meets at the conflict point; a full second clears it.
        assert!(crash(5.0, 0.0) && crash(5.0, 0.5));
        assert!(!crash(5.0, 1.0));
        assert!(crash(8.0, 0.3) && !crash(8.0, 0.7));
    }

    #[test]
    fn collision_examples() {
        let m = build_default_map(0);
        let mut w = spawn_s2_with_offset(&m, &s2_cfg(5.0), &mut ChaCha8Rng::seed_from_u64(0), 0.0).unwrap();
        w.entities.truncate(1);
        let (l, wd, _) = EntityKind::Car.dims();
        let far = Entity::fixed(99, EntityKind::Car, w.ego().obb.center + Vec2::new(10.0, 0.0), 0.0, l, wd);
        w.entities.push(far);
        assert!(!check_collision(&w));
        let mut same = w.ego().clone();
        same.id = 100;
        w.entities.push(same);
        assert!(check_collision(&w));
        w.entities.pop();
        let touching = Entity::fixed(101, EntityKind::Car, w.ego().obb.center + Vec2::new(l, 0.0), 0.0, l, wd);
        w.entities.push(touching);
        assert!(check_collision(&w));
    }
}
