//! JSON artifacts written by the CLI.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapStats {
    pub file: String,
    /// Magnitude mapped to byte 0.
    pub min: f64,
    /// Magnitude mapped to byte 255.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageErrors {
    pub b_lidar: f64,
    pub b_camera: f64,
    pub fused: f64,
    pub temporal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageMaps {
    pub b_lidar: MapStats,
    pub b_camera: MapStats,
    pub fused: MapStats,
    pub temporal: MapStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub scene_seed: u64,
    pub seed: u64,
    pub frames: usize,
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    pub heights: Vec<f64>,
    /// Temporal output against ground truth, in cells; `null` when it
    /// cannot be computed.
    pub peak_error: Option<f64>,
    pub stage_peak_errors: Option<StageErrors>,
    /// Why `peak_error` is missing.
    pub peak_error_status: Option<String>,
    pub maps: StageMaps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdaReport {
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub frames: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean over the evaluation scenes, in cells.
    pub naive_peak_error: f64,
    pub untrained_peak_error: f64,
    pub tda_peak_error: f64,
    pub tda_beats_naive: bool,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(name: &str) -> MapStats {
        MapStats {
            file: format!("{name}.pgm"),
            min: 0.0,
            max: 1.5,
        }
    }

    #[test]
    fn metrics_round_trip_and_reject_extra_keys() {
        let m = Metrics {
            scene_seed: 3,
            seed: 7,
            frames: 5,
            layers: 3,
            heads: 4,
            points: 4,
            heights: vec![0.5, 1.0],
            peak_error: None,
            stage_peak_errors: None,
            peak_error_status: Some("ground truth is empty".into()),
            maps: StageMaps {
                b_lidar: stats("b_lidar"),
                b_camera: stats("b_camera"),
                fused: stats("fused"),
                temporal: stats("temporal"),
            },
        };
        let text = to_json(&m);
        assert_eq!(serde_json::from_str::<Metrics>(&text).unwrap(), m);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["extra"] = serde_json::json!(0);
        assert!(serde_json::from_value::<Metrics>(v).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = TdaReport {
            seed: 7,
            steps: 1,
            lr: 0.01,
            frames: 5,
            train_scenes: 4,
            eval_scenes: 40,
            initial_loss: 0.1,
            final_loss: 0.09,
            naive_peak_error: 1.2,
            untrained_peak_error: 0.3,
            tda_peak_error: 0.1,
            tda_beats_naive: true,
        };
        assert_eq!(serde_json::from_str::<TdaReport>(&to_json(&r)).unwrap(), r);
    }
}
