use std::path::Path;

use super::{DetectionSet, PrPoint};
use crate::data::io::{column_index, csv_error, parse_field};
use crate::data::DataError;
use crate::geom::{score_order, BBox, Detection};

const DET_HEADER: [&str; 6] = ["id", "x_min", "y_min", "width", "height", "score"];
const PR_HEADER: [&str; 3] = ["threshold", "precision", "recall"];

/// Rows sorted by image id, then descending score. Coordinates carry two
/// decimals; scores are written at full precision so rankings survive.
pub fn write_detections(path: &Path, dets: &DetectionSet) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(DET_HEADER).map_err(|e| csv_error(path, e))?;
    for (id, list) in dets {
        for i in score_order(list) {
            let d = &list[i];
            w.write_record([
                id.clone(),
                format!("{:.2}", d.bbox.x_min()),
                format!("{:.2}", d.bbox.y_min()),
                format!("{:.2}", d.bbox.w),
                format!("{:.2}", d.bbox.h),
                d.score.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub fn read_detections(path: &Path) -> Result<DetectionSet, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let cols = column_index(path, &r.headers().map_err(|e| csv_error(path, e))?.clone(), &DET_HEADER)?;
    let mut out = DetectionSet::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let x: f64 = parse_field(path, &record, cols[1], "x_min")?;
        let y: f64 = parse_field(path, &record, cols[2], "y_min")?;
        let w: f64 = parse_field(path, &record, cols[3], "width")?;
        let h: f64 = parse_field(path, &record, cols[4], "height")?;
        let score: f64 = parse_field(path, &record, cols[5], "score")?;
        let id = record.get(cols[0]).unwrap_or("").trim().to_string();
        out.entry(id).or_default().push(Detection::new(BBox::from_xywh(x, y, w, h), score));
    }
    Ok(out)
}

pub fn write_pr_curve(path: &Path, points: &[PrPoint]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(PR_HEADER).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub fn read_pr_curve(path: &Path) -> Result<Vec<PrPoint>, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let cols = column_index(path, &r.headers().map_err(|e| csv_error(path, e))?.clone(), &PR_HEADER)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        out.push(PrPoint {
            threshold: parse_field(path, &record, cols[0], "threshold")?,
            precision: parse_field(path, &record, cols[1], "precision")?,
            recall: parse_field(path, &record, cols[2], "recall")?,
        });
    }
    Ok(out)
}
