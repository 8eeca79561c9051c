//! Keypoint annotation wire format (JSON).
//!
//! Top level: `{"images": [{"id","file","width","height"}], "annotations":
//! [{"image_id","bbox","keypoints","num_keypoints"}], "meta": {"format":
//! "crowdpose-14","seed"}}`. Boxes are absolute-pixel `[x, y, w, h]`
//! (top-left origin); keypoints are a flat `x1,y1,v1,...` list of length 42
//! in absolute pixels with visibility in {0,1,2}; `num_keypoints` counts
//! supervised (v > 0) keypoints. Serialization order is fixed, so the same
//! samples always produce the same bytes.

use crate::error::{Error, Result};
use crate::pose::{PoseInstance, NUM_KEYPOINTS};
use crate::synthesis::AnnotatedSample;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const WIRE_FORMAT: &str = "crowdpose-14";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImage {
    pub id: u64,
    pub file: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireAnnotation {
    pub image_id: u64,
    /// Absolute-pixel [x, y, w, h], top-left origin.
    pub bbox: [f64; 4],
    /// Flat x1, y1, v1, ... in absolute pixels, length 3 * 14.
    pub keypoints: Vec<f64>,
    pub num_keypoints: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMeta {
    pub format: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<WireImage>,
    pub annotations: Vec<WireAnnotation>,
    pub meta: WireMeta,
}

/// Normalized instance -> absolute-pixel wire record.
pub fn instance_to_wire(
    inst: &PoseInstance,
    image_id: u64,
    width: usize,
    height: usize,
) -> WireAnnotation {
    let (w, h) = (width as f64, height as f64);
    let [cx, cy, bw, bh] = inst.box_cxcywh;
    let mut keypoints = Vec::with_capacity(3 * inst.keypoints.len());
    for (kp, &v) in inst.keypoints.iter().zip(inst.visibility.iter()) {
        keypoints.push(kp[0] * w);
        keypoints.push(kp[1] * h);
        keypoints.push(v as f64);
    }
    WireAnnotation {
        image_id,
        bbox: [(cx - bw / 2.0) * w, (cy - bh / 2.0) * h, bw * w, bh * h],
        keypoints,
        num_keypoints: inst.visible_count() as u32,
    }
}

/// Wire record -> normalized instance (score 1.0).
pub fn wire_to_instance(
    ann: &WireAnnotation,
    width: usize,
    height: usize,
) -> Result<PoseInstance> {
    if ann.keypoints.len() != 3 * NUM_KEYPOINTS {
        return Err(Error::Format {
            what: "annotation keypoints",
            reason: format!(
                "length {} is not {}",
                ann.keypoints.len(),
                3 * NUM_KEYPOINTS
            ),
        });
    }
    let (w, h) = (width as f64, height as f64);
    let mut keypoints = Vec::with_capacity(NUM_KEYPOINTS);
    let mut visibility = Vec::with_capacity(NUM_KEYPOINTS);
    for triple in ann.keypoints.chunks_exact(3) {
        keypoints.push([triple[0] / w, triple[1] / h]);
        let v = triple[2];
        if v != 0.0 && v != 1.0 && v != 2.0 {
            return Err(Error::Format {
                what: "annotation visibility",
                reason: format!("{v} is not in {{0, 1, 2}}"),
            });
        }
        visibility.push(v as u8);
    }
    let [x, y, bw, bh] = ann.bbox;
    let mut inst = PoseInstance::new(
        1.0,
        [(x + bw / 2.0) / w, (y + bh / 2.0) / h, bw / w, bh / h],
        keypoints,
    );
    inst.visibility = visibility;
    Ok(inst)
}

/// Build the wire file for named samples; image ids are list positions.
pub fn annotation_file(samples: &[(String, &AnnotatedSample)], seed: u64) -> AnnotationFile {
    let mut images = Vec::with_capacity(samples.len());
    let mut annotations = Vec::new();
    for (id, (file, sample)) in samples.iter().enumerate() {
        images.push(WireImage {
            id: id as u64,
            file: file.clone(),
            width: sample.image.width as u32,
            height: sample.image.height as u32,
        });
        for inst in &sample.instances {
            annotations.push(instance_to_wire(
                inst,
                id as u64,
                sample.image.width,
                sample.image.height,
            ));
        }
    }
    AnnotationFile {
        images,
        annotations,
        meta: WireMeta {
            format: WIRE_FORMAT.to_string(),
            seed,
        },
    }
}

/// Instances of one image, converted back to normalized coordinates.
pub fn instances_of(file: &AnnotationFile, image_id: u64) -> Result<Vec<PoseInstance>> {
    let img = file
        .images
        .iter()
        .find(|i| i.id == image_id)
        .ok_or(Error::Format {
            what: "annotation image id",
            reason: format!("{image_id} not present"),
        })?;
    file.annotations
        .iter()
        .filter(|a| a.image_id == image_id)
        .map(|a| wire_to_instance(a, img.width as usize, img.height as usize))
        .collect()
}

pub fn to_json(file: &AnnotationFile) -> Result<String> {
    serde_json::to_string(file).map_err(|e| Error::Codec(e.to_string()))
}

pub fn from_json(json: &str) -> Result<AnnotationFile> {
    let file: AnnotationFile =
        serde_json::from_str(json).map_err(|e| Error::Codec(e.to_string()))?;
    if file.meta.format != WIRE_FORMAT {
        return Err(Error::Format {
            what: "annotation meta format",
            reason: format!("`{}` is not `{WIRE_FORMAT}`", file.meta.format),
        });
    }
    Ok(file)
}

pub fn save(path: &Path, file: &AnnotationFile) -> Result<()> {
    std::fs::write(path, to_json(file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AnnotationFile> {
    from_json(&std::fs::read_to_string(path)?)
}
