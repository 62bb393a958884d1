use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Annotation, Condition, DataError, Sample, SceneSpec};
use crate::config::{apply_section, parse_lines, render_section, SCENE_KEYS};
use crate::geom::BBox;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const IMAGES_DIR: &str = "images";

const HEADER: [&str; 7] = ["id", "x_min", "y_min", "width", "height", "ignore", "condition"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, detail: impl Into<String>) -> DataError {
    DataError::Format { path: path.display().to_string(), detail: detail.into() }
}

/// Binary P6 PPM with maxval 255.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Parses a P6 PPM (maxval 1..=255, `#` comments allowed in the header).
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if fields[0] != "P6" {
        return Err(format!("expected magic P6, found {:?}", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("invalid {what} {s:?}"));
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if w == 0 || h == 0 || !(1..=255).contains(&maxval) {
        return Err(format!("unsupported dimensions {w}x{h} or maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let plane = w * h;
    let raster = bytes.get(pos..pos + 3 * plane).ok_or("truncated pixel data")?;
    let scale = maxval as f32;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / scale;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| e.to_string())
}

pub fn write_image_ppm(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(format_err(path, format!("expected a [3, H, W] image, got {:?}", image.shape())));
    }
    fs::write(path, encode_ppm(image)).map_err(io_err(path))
}

pub fn read_image_ppm(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|d| format_err(path, d))
}

/// One annotation CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRow {
    pub id: String,
    pub annotation: Annotation,
    pub condition: Condition,
}

/// Writes one row per box, corner form with two decimals; header always.
pub fn write_annotations(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(HEADER).map_err(|e| csv_error(path, e))?;
    for s in samples {
        for a in &s.annotations {
            let b = &a.bbox;
            w.write_record([
                s.id.clone(),
                format!("{:.2}", b.x_min()),
                format!("{:.2}", b.y_min()),
                format!("{:.2}", b.w),
                format!("{:.2}", b.h),
                if a.ignore { "1" } else { "0" }.to_string(),
                s.condition.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io { path: path.display().to_string(), source },
        other => DataError::Parse { path: path.display().to_string(), line, detail: format!("{other:?}") },
    }
}

/// Locates the named columns in a header row.
pub(crate) fn column_index(path: &Path, headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>, DataError> {
    names
        .iter()
        .map(|n| {
            headers.iter().position(|h| h.trim() == *n).ok_or_else(|| DataError::Parse {
                path: path.display().to_string(),
                line: 1,
                detail: format!("missing column {n:?}"),
            })
        })
        .collect()
}

pub(crate) fn parse_field<T: std::str::FromStr>(path: &Path, record: &csv::StringRecord, col: usize, name: &str) -> Result<T, DataError> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record.get(col).unwrap_or("").trim();
    raw.parse().map_err(|_| DataError::Parse {
        path: path.display().to_string(),
        line,
        detail: format!("invalid {name} {raw:?}"),
    })
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRow>, DataError> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let cols = column_index(path, &headers, &HEADER)?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let x: f64 = parse_field(path, &record, cols[1], "x_min")?;
        let y: f64 = parse_field(path, &record, cols[2], "y_min")?;
        let w: f64 = parse_field(path, &record, cols[3], "width")?;
        let h: f64 = parse_field(path, &record, cols[4], "height")?;
        let ignore: u8 = parse_field(path, &record, cols[5], "ignore")?;
        let condition: Condition = parse_field(path, &record, cols[6], "condition")?;
        if ignore > 1 || !(w > 0.0 && h > 0.0) {
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line,
                detail: "ignore must be 0 or 1 and box sides positive".into(),
            });
        }
        rows.push(AnnotationRow {
            id: record.get(cols[0]).unwrap_or("").trim().to_string(),
            annotation: Annotation { bbox: BBox::from_xywh(x, y, w, h), ignore: ignore == 1 },
            condition,
        });
    }
    Ok(rows)
}

/// A dataset directory loaded into memory, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{id}.ppm"))
}

/// Writes `manifest.txt`, `annotations.csv` and `images/<id>.ppm`.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, samples: &[Sample]) -> Result<(), DataError> {
    fs::create_dir_all(dir.join(IMAGES_DIR)).map_err(io_err(dir))?;
    let mut manifest = format!("image_w = {}\nimage_h = {}\ncount = {}\n", spec.image_w, spec.image_h, samples.len());
    manifest.push_str(&render_section(SCENE_KEYS, spec));
    for s in samples {
        manifest.push_str(&format!("image.{} = {}\n", s.id, s.condition));
        write_image_ppm(&image_path(dir, &s.id), &s.image)?;
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    write_annotations(&dir.join(ANNOTATIONS_FILE), samples)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let pairs = parse_lines(&text).map_err(|e| format_err(&mpath, e.to_string()))?;
    let mut spec = SceneSpec::desk();
    let rest = apply_section(SCENE_KEYS, &mut spec, &pairs).map_err(|e| format_err(&mpath, e.to_string()))?;
    let mut images: Vec<(String, Condition)> = Vec::new();
    for (k, v) in &rest {
        match k.as_str() {
            "image_w" => spec.image_w = v.parse().map_err(|_| format_err(&mpath, "invalid image_w"))?,
            "image_h" => spec.image_h = v.parse().map_err(|_| format_err(&mpath, "invalid image_h"))?,
            "count" => {}
            _ => {
                let id = k.strip_prefix("image.").ok_or_else(|| format_err(&mpath, format!("unknown key {k:?}")))?;
                let condition = v.parse().map_err(|e: String| format_err(&mpath, e))?;
                images.push((id.to_string(), condition));
            }
        }
    }
    let mut by_id: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    let apath = dir.join(ANNOTATIONS_FILE);
    for row in read_annotations(&apath)? {
        if !images.iter().any(|(id, _)| *id == row.id) {
            return Err(format_err(&apath, format!("annotation for unknown image {:?}", row.id)));
        }
        by_id.entry(row.id).or_default().push(row.annotation);
    }
    let mut samples = Vec::with_capacity(images.len());
    for (id, condition) in images {
        let image = read_image_ppm(&image_path(dir, &id))?;
        if image.shape() != [3, spec.image_h as usize, spec.image_w as usize] {
            return Err(format_err(&image_path(dir, &id), "image size disagrees with the manifest"));
        }
        let annotations = by_id.remove(&id).unwrap_or_default();
        samples.push(Sample { id, image, annotations, condition });
    }
    Ok(Dataset { spec, samples })
}
