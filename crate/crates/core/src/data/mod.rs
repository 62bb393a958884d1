//! Synthetic traffic scenes and their on-disk formats.

pub(crate) mod io;
mod scene;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geom::BBox;
use crate::tensor::Tensor;

pub use io::{
    decode_ppm, encode_ppm, load_dataset, read_annotations, read_image_ppm, write_annotations, write_dataset,
    write_image_ppm, AnnotationRow, Dataset, ANNOTATIONS_FILE, IMAGES_DIR, MANIFEST_FILE,
};
pub use scene::generate_scene;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path} line {line}: {detail}")]
    Parse { path: String, line: u64, detail: String },
}

/// Weather/lighting variation, mirroring the four benchmark subsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Sunny,
    Cloudy,
    Rainy,
    Night,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Sunny, Condition::Cloudy, Condition::Rainy, Condition::Night];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Sunny => "sunny",
            Condition::Cloudy => "cloudy",
            Condition::Rainy => "rainy",
            Condition::Night => "night",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("expected one of sunny, cloudy, rainy, night; got {s:?}"))
    }
}

/// A labeled box; `ignore` marks a non-detection region rather than a vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub ignore: bool,
}

impl Annotation {
    pub fn vehicle(bbox: BBox) -> Self {
        Self { bbox, ignore: false }
    }

    pub fn ignore_region(bbox: BBox) -> Self {
        Self { bbox, ignore: true }
    }
}

/// True when the point lies inside any ignore region.
pub fn in_ignore_region(annotations: &[Annotation], x: f64, y: f64) -> bool {
    annotations.iter().any(|a| a.ignore && a.bbox.contains_point(x, y))
}

/// One image with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotations: Vec<Annotation>,
    pub condition: Condition,
}

impl Sample {
    pub fn vehicles(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| !a.ignore)
    }
}

/// Parameters of the scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_w: u32,
    pub image_h: u32,
    /// Labeled vehicles per scene, inclusive range.
    pub vehicle_count: (usize, usize),
    /// Vehicle box width in pixels, inclusive range.
    pub vehicle_size: (f64, f64),
    /// Vehicle width / height, inclusive range.
    pub vehicle_aspect: (f64, f64),
    pub occlusion_probability: f64,
    pub ignore_count: (usize, usize),
    /// Conditions drawn uniformly per scene.
    pub conditions: Vec<Condition>,
    pub data_seed: u64,
}

impl SceneSpec {
    pub fn desk() -> Self {
        Self {
            image_w: 128,
            image_h: 96,
            vehicle_count: (5, 12),
            vehicle_size: (16.0, 40.0),
            vehicle_aspect: (1.0, 2.0),
            occlusion_probability: 0.3,
            ignore_count: (0, 1),
            conditions: Condition::ALL.to_vec(),
            data_seed: 7,
        }
    }

    pub fn paper() -> Self {
        Self {
            image_w: 960,
            image_h: 540,
            vehicle_size: (40.0, 240.0),
            ignore_count: (0, 2),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.image_w < 8 || self.image_h < 8 {
            return Err("scene must be at least 8x8 pixels".into());
        }
        if !(self.vehicle_size.0 >= 2.0) || !(self.vehicle_aspect.0 > 0.0) {
            return Err("vehicle size must be at least 2 px and aspect positive".into());
        }
        let max_h = self.vehicle_size.1 / self.vehicle_aspect.0;
        if self.vehicle_size.1 > self.image_w as f64 || max_h > self.image_h as f64 {
            return Err("largest vehicle does not fit the image".into());
        }
        if !(0.0..=1.0).contains(&self.occlusion_probability) {
            return Err("occlusion_probability must lie in [0, 1]".into());
        }
        if self.conditions.is_empty() {
            return Err("at least one condition is required".into());
        }
        Ok(())
    }
}

/// Deterministic shuffle then split; the first part holds
/// `round(n * train_fraction)` items.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    assert!(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0, 1)");
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * train_fraction).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

#[cfg(test)]
mod tests;
