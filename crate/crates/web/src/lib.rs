//! Browser bindings for three small interactive views of the core library.
//! Every export returns plain numbers or a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use avp_cp::bev::RigidTransform2D;
use avp_cp::codec::{predicted_encoded_bytes, Quantization};
use avp_cp::control::{speed_factor, ObjectGap};
use avp_cp::geometry::{Obb, Vec2};
use avp_cp::link::{budget_check, BudgetReport, LinkConfig};
use avp_cp::garage::InfraSite;
use avp_cp::perception::{visible_vertices, Difficulty, SensorSpec};

/// Input map the roadside unit would have to send without the codec.
const INPUT_SHAPE: [usize; 3] = [376, 280, 64];

/// Target speed over a `cols` x `rows` grid of (longitudinal, lateral) gaps,
/// row-major with lateral gap increasing by row.
#[wasm_bindgen]
pub fn speed_field(cruise_speed: f64, max_longitudinal: f64, max_lateral: f64, cols: usize, rows: usize) -> Vec<f64> {
    let step = |max: f64, n: usize| if n > 1 { max / (n - 1) as f64 } else { 0.0 };
    let (sl, sh) = (step(max_longitudinal, cols), step(max_lateral, rows));
    let mut out = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            out.push(cruise_speed * speed_factor(&ObjectGap { longitudinal: c as f64 * sl, lateral: r as f64 * sh }));
        }
    }
    out
}

#[derive(Serialize)]
struct FrameBudget {
    dense_bytes: usize,
    encoded_bytes: usize,
    transmitted_shape: [usize; 3],
    compression_ratio: f64,
    dense: BudgetReport,
    encoded: BudgetReport,
}

fn to_js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Encoded frame size at a given transmitted-grid sparsity and the link
/// budget for both the dense map and the encoded frame.
#[wasm_bindgen]
pub fn frame_budget(
    sparsity: f64,
    half_precision: bool,
    channel_factor: usize,
    downsample: bool,
    rate_hz: f64,
    rate_mbps: f64,
) -> Result<String, JsError> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(JsError::new("sparsity must be in [0, 1]"));
    }
    if channel_factor == 0 || INPUT_SHAPE[2] % channel_factor != 0 {
        return Err(JsError::new("channel factor must divide 64"));
    }
    let pool = if downsample { 2 } else { 1 };
    let shape = [INPUT_SHAPE[0] / pool, INPUT_SHAPE[1] / pool, INPUT_SHAPE[2] / channel_factor];
    let quant = if half_precision { Quantization::Float16 } else { Quantization::Float32 };
    let encoded_bytes = predicted_encoded_bytes(shape[0], shape[1], shape[2], sparsity, quant);
    let dense_bytes = INPUT_SHAPE.iter().product::<usize>() * 4;
    let link = LinkConfig::with_rate_mbps(rate_mbps);
    link.validate().map_err(to_js_err)?;
    let report = FrameBudget {
        dense_bytes,
        encoded_bytes,
        transmitted_shape: shape,
        compression_ratio: dense_bytes as f64 / encoded_bytes as f64,
        dense: budget_check(dense_bytes, rate_hz, &link).map_err(to_js_err)?,
        encoded: budget_check(encoded_bytes, rate_hz, &link).map_err(to_js_err)?,
    };
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

#[derive(Serialize)]
struct SensorView {
    height: f64,
    visible_corners: u8,
    difficulty: Difficulty,
    /// Height of the ray to the pedestrian's mid-height above the van's center.
    ray_height_at_van: f64,
}

#[derive(Serialize)]
struct Visibility {
    onboard: SensorView,
    roadside: SensorView,
}

/// A pedestrian `pedestrian_distance` m ahead of two sensors standing at the
/// origin, with a 6 m wide van of `van_height` centred `van_distance` m out.
#[wasm_bindgen]
pub fn occlusion(
    onboard_height: f64,
    roadside_height: f64,
    van_distance: f64,
    van_height: f64,
    pedestrian_distance: f64,
    pedestrian_height: f64,
) -> Result<String, JsError> {
    let all_positive = [onboard_height, roadside_height, van_height, pedestrian_height].iter().all(|v| *v > 0.0);
    if !all_positive || !(van_distance > 1.0 && pedestrian_distance > van_distance + 1.25) {
        return Err(JsError::new("heights must be positive and the van must stand between sensor and pedestrian"));
    }
    let ped = Obb::new(Vec2::new(pedestrian_distance, 0.0), 0.0, 0.5, 0.5, pedestrian_height);
    let van = Obb::new(Vec2::new(van_distance, 0.0), 0.0, 2.0, 6.0, van_height);
    let view = |sensor: SensorSpec| {
        let r = visible_vertices(&sensor, &ped, &[van]);
        let t = van_distance / pedestrian_distance;
        SensorView {
            height: sensor.z,
            visible_corners: r.visible_vertex_count,
            difficulty: r.difficulty,
            ray_height_at_van: sensor.z + (0.5 * pedestrian_height - sensor.z) * t,
        }
    };
    let onboard = SensorSpec { z: onboard_height, ..SensorSpec::vehicle_camera() }.placed(&RigidTransform2D::translation(-1.5, 0.0));
    let site = InfraSite { position: Vec2::ZERO, height: roadside_height, yaw: 0.0, pitch: 30f64.to_radians() };
    let out = Visibility { onboard: view(onboard), roadside: view(SensorSpec::infra_camera(&site)) };
    Ok(serde_json::to_string(&out).expect("report serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speed_field_stops_next_to_an_object() {
        let f = speed_field(5.0, 15.0, 8.0, 16, 9);
        assert_eq!(f.len(), 16 * 9);
        assert_eq!(f[0], 0.0);
        assert_eq!(f[15], 5.0);
        assert!(f.iter().all(|v| (0.0..=5.0).contains(v)));
    }

    #[test]
    fn default_codec_fits_the_link() {
        let r: serde_json::Value = serde_json::from_str(&frame_budget(0.85, true, 8, true, 20.0, 19.1).unwrap()).unwrap();
        assert_eq!(r["dense_bytes"], 26_951_680);
        assert_eq!(r["encoded"]["feasible"], true);
        assert_eq!(r["dense"]["feasible"], false);
    }

    #[test]
    fn only_the_tall_sensor_sees_over_the_van() {
        let r: serde_json::Value = serde_json::from_str(&occlusion(1.8, 7.0, 5.0, 2.0, 10.25, 1.75).unwrap()).unwrap();
        assert_eq!(r["onboard"]["difficulty"], "invisible");
        assert_eq!(r["roadside"]["difficulty"], "easy");
    }
}
