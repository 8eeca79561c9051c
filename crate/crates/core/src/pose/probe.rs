//! Gate-weight and norm-ratio tables from decoder forward passes.
//!
//! Flattens the per-layer probe records of a forward pass into one row per
//! (layer, instance, keypoint) and renders them as CSV with columns
//! `layer, instance, keypoint, w_pose, w_image, norm_ratio`. An undefined
//! norm ratio (pose-prior norm below 1e-9) renders as `nan`.

use super::model::{PoseConfig, ProbeLayer};
use super::KEYPOINT_NAMES;
use std::fmt::Write as _;

/// One keypoint-token row of the probe table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub layer: usize,
    pub instance: usize,
    pub keypoint: &'static str,
    pub w_pose: f64,
    pub w_image: f64,
    pub norm_ratio: Option<f64>,
}

/// Flatten forward-pass probe records into keypoint rows.
pub fn probe_rows(probe: &[ProbeLayer], cfg: &PoseConfig) -> Vec<ProbeRow> {
    let tpg = cfg.tokens_per_group();
    let mut rows = Vec::with_capacity(probe.len() * cfg.num_groups * KEYPOINT_NAMES.len());
    for layer in probe {
        for g in 0..cfg.num_groups {
            for (k, name) in KEYPOINT_NAMES.iter().enumerate() {
                let t = g * tpg + 1 + k;
                rows.push(ProbeRow {
                    layer: layer.layer,
                    instance: g,
                    keypoint: name,
                    w_pose: layer.w_pose[t],
                    w_image: layer.w_image[t],
                    norm_ratio: layer.norm_ratio(t),
                });
            }
        }
    }
    rows
}

/// Render rows as CSV (with header).
pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from("layer,instance,keypoint,w_pose,w_image,norm_ratio\n");
    for r in rows {
        let ratio = match r.norm_ratio {
            Some(v) => format!("{v}"),
            None => "nan".to_string(),
        };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.layer, r.instance, r.keypoint, r.w_pose, r.w_image, ratio
        )
        .expect("writing to a String cannot fail");
    }
    out
}
