//! Multi-person pose estimation: decoder model, set-based losses,
//! bipartite matching, and the attention-gate probe.

pub mod hungarian;
pub mod losses;
pub mod model;
pub mod probe;

/// Keypoints per person (14-point skeleton).
pub const NUM_KEYPOINTS: usize = 14;

/// Canonical keypoint order used everywhere annotations or probe tables
/// name keypoints.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "head_top",
    "neck",
];

/// One person, predicted or ground truth. Coordinates are normalized to
/// `[0, 1]` relative to the image; boxes are (cx, cy, w, h). Visibility
/// uses the 3-state convention: 0 = absent, 1 = occluded, 2 = visible;
/// losses supervise any keypoint with visibility > 0. Predictions carry
/// `visibility` all-2 and a confidence `score`; ground truth scores are 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseInstance {
    pub score: f64,
    pub box_cxcywh: [f64; 4],
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<u8>,
}

impl PoseInstance {
    pub fn new(score: f64, box_cxcywh: [f64; 4], keypoints: Vec<[f64; 2]>) -> PoseInstance {
        let visibility = vec![2; keypoints.len()];
        PoseInstance {
            score,
            box_cxcywh,
            keypoints,
            visibility,
        }
    }

    /// Keypoints with visibility > 0.
    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v > 0).count()
    }

    /// Object scale: sqrt of box area in normalized units.
    pub fn scale(&self) -> f64 {
        (self.box_cxcywh[2] * self.box_cxcywh[3]).max(0.0).sqrt()
    }
}
