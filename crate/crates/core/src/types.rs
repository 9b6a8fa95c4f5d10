//! Boxes, candidates and image references shared by every stage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvalidInput {
    #[error("invalid box [{0}, {1}, {2}, {3}]: need 0 <= min < max <= 1 on both axes")]
    Box(f64, f64, f64, f64),
    #[error("detector confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("image dimensions must be positive, got {0}x{1}")]
    ImageSize(u32, u32),
}

/// Axis-aligned box normalized to the unit square, origin at the top-left.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, InvalidInput> {
        let ok = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite())
            && 0.0 <= x_min
            && x_min < x_max
            && x_max <= 1.0
            && 0.0 <= y_min
            && y_min < y_max
            && y_max <= 1.0;
        if ok {
            Ok(Self { x_min, y_min, x_max, y_max })
        } else {
            Err(InvalidInput::Box(x_min, y_min, x_max, y_max))
        }
    }

    /// Converts a pixel-space box by dividing through the image dimensions.
    pub fn from_pixels(x_min: f64, y_min: f64, x_max: f64, y_max: f64, image: &ImageRef) -> Result<Self, InvalidInput> {
        let w = f64::from(image.width_px);
        let h = f64::from(image.height_px);
        Self::new(x_min / w, y_min / h, x_max / w, y_max / h)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Intersection over union; 0 for disjoint boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let ih = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = iw * ih;
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = InvalidInput;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// One detected object: the hypothesis unit every factor is computed for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCandidate")]
pub struct Candidate {
    pub id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub detector_confidence: f64,
}

#[derive(Deserialize)]
struct RawCandidate {
    id: u32,
    #[serde(rename = "box")]
    bbox: BBox,
    detector_confidence: f64,
}

impl TryFrom<RawCandidate> for Candidate {
    type Error = InvalidInput;

    fn try_from(raw: RawCandidate) -> Result<Self, Self::Error> {
        Candidate::new(raw.id, raw.bbox, raw.detector_confidence)
    }
}

impl Candidate {
    pub fn new(id: u32, bbox: BBox, detector_confidence: f64) -> Result<Self, InvalidInput> {
        if !(0.0..=1.0).contains(&detector_confidence) {
            return Err(InvalidInput::Confidence(detector_confidence));
        }
        Ok(Self { id, bbox, detector_confidence })
    }
}

/// Reference to an image by path or URL. Pixels are never read by the engine;
/// backends resolve the URI.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawImageRef")]
pub struct ImageRef {
    pub uri: String,
    pub width_px: u32,
    pub height_px: u32,
}

#[derive(Deserialize)]
struct RawImageRef {
    uri: String,
    width_px: u32,
    height_px: u32,
}

impl TryFrom<RawImageRef> for ImageRef {
    type Error = InvalidInput;

    fn try_from(raw: RawImageRef) -> Result<Self, Self::Error> {
        ImageRef::new(raw.uri, raw.width_px, raw.height_px)
    }
}

impl ImageRef {
    pub fn new(uri: impl Into<String>, width_px: u32, height_px: u32) -> Result<Self, InvalidInput> {
        if width_px == 0 || height_px == 0 {
            return Err(InvalidInput::ImageSize(width_px, height_px));
        }
        Ok(Self { uri: uri.into(), width_px, height_px })
    }
}
