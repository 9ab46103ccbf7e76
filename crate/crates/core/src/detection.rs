//! Detection value types and axis-aligned box geometry.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// How a box is encoded on the wire. Internally everything is corner form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    #[default]
    Xyxy,
    Xywh,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BoxError {
    #[error("box coordinates must be finite: {0:?}")]
    NonFinite([f64; 4]),
    #[error("box corners out of order: {0:?}")]
    Inverted([f64; 4]),
    #[error("negative width or height: {0:?}")]
    NegativeExtent([f64; 4]),
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        let raw = [x_min, y_min, x_max, y_max];
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(BoxError::NonFinite(raw));
        }
        if x_min > x_max || y_min > y_max {
            return Err(BoxError::Inverted(raw));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    /// Decode four wire coordinates in the given format.
    pub fn from_format(raw: [f64; 4], format: BoxFormat) -> Result<Self, BoxError> {
        match format {
            BoxFormat::Xyxy => Self::new(raw[0], raw[1], raw[2], raw[3]),
            BoxFormat::Xywh => {
                if raw[2] < 0.0 || raw[3] < 0.0 {
                    return Err(BoxError::NegativeExtent(raw));
                }
                Self::new(raw[0], raw[1], raw[0] + raw[2], raw[1] + raw[3])
            }
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }
}

pub fn box_area(b: &BBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A detection after label grouping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub group: usize,
    pub score: f64,
    pub bbox: BBox,
}

impl Detection {
    pub fn new(group: usize, score: f64, bbox: BBox) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score out of range: {score}");
        Self { group, score, bbox }
    }
}

/// A detection as emitted by a provider, before label grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub label: String,
    pub score: f64,
    pub bbox: BBox,
}

/// Detections for one image. Order carries no meaning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub detections: Vec<Detection>,
}

impl ImagePrediction {
    pub fn new(detections: Vec<Detection>) -> Self {
        Self { detections }
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }
}

impl From<Vec<Detection>> for ImagePrediction {
    fn from(detections: Vec<Detection>) -> Self {
        Self { detections }
    }
}
