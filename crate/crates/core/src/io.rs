//! File formats.
//!
//! * detections / pseudo labels: JSON array of
//!   `{"image_id", "category_id", "bbox": [x, y, w, h], "score"}`
//! * ground truth: COCO-style `{"images", "annotations", "categories"}`
//! * RoI features: JSON Lines of
//!   `{"roi_id", "image_id", "bbox": [x, y, w, h], "is_positive", "feature"}`
//! * weight sidecar: CSV `roi_id,image_id,iou_max,D,weight`, 9 significant digits
//! * embedding: `"rows cols"` header then one whitespace-separated row per line
//!
//! Every writer goes through [`write_atomic`].

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{CuratorError, Result};
use crate::geometry::BoundingBox;
use crate::model::{Detection, GroundTruthAnnotation};
use crate::reweight::{RoiFeatureRecord, RoiWeightRow, RoiWeightTable};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> CuratorError {
    CuratorError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn json_err(path: &Path, e: serde_json::Error) -> CuratorError {
    parse_err(path, e.line(), format!("column {}: {e}", e.column()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CuratorError::io(path, e))
}

/// Writes to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CuratorError::io(dir, e))?;
    }
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CuratorError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CuratorError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CuratorError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CuratorError::io(path, e))
}

fn xywh(path: &Path, line: usize, b: [f64; 4]) -> Result<BoundingBox> {
    BoundingBox::from_xywh(b[0], b[1], b[2], b[3]).map_err(|e| parse_err(path, line, format!("bbox: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        }
    }
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    let mut s = String::from("[");
    for (i, d) in dets.iter().enumerate() {
        s.push_str(if i == 0 { "\n" } else { ",\n" });
        s.push_str(&serde_json::to_string(&DetectionRecord::from(d)).expect("plain record"));
    }
    s.push_str("\n]\n");
    s
}

/// Parses a detection array. The reported line is the line of the offending
/// record.
pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<Detection>> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| json_err(path, e))?;
    let lines = record_lines(text, values.len());
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let line = lines.get(i).copied().unwrap_or(1);
            let r: DetectionRecord =
                serde_json::from_value(v).map_err(|e| parse_err(path, line, format!("record {i}: {e}")))?;
            let d = Detection::new(r.image_id, r.category_id, r.score, xywh(path, line, r.bbox)?);
            d.validate()
                .map_err(|e| parse_err(path, line, format!("record {i}: {e}")))?;
            Ok(d)
        })
        .collect()
}

/// Best-effort line numbers of the top-level array elements.
fn record_lines(text: &str, count: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(count);
    let (mut depth, mut line, mut in_str, mut escape) = (0i32, 1usize, false, false);
    for ch in text.chars() {
        if ch == '\n' {
            line += 1;
        }
        if in_str {
            match (escape, ch) {
                (true, _) => escape = false,
                (false, '\\') => escape = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' | '[' => {
                if depth == 1 {
                    out.push(line);
                }
                depth += 1;
            }
            '}' | ']' => depth -= 1,
            c if depth == 1 && !c.is_whitespace() && c != ',' => out.push(line),
            _ => {}
        }
    }
    out
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    parse_detections(path, &read_text(path)?)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_atomic(path, detections_to_json(dets).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
    /// Confidence of a pseudo annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

impl CocoDataset {
    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }

    /// Ground-truth annotations in corner form, excluding pseudo annotations.
    pub fn ground_truth(&self) -> Vec<GroundTruthAnnotation> {
        self.annotations
            .iter()
            .filter(|a| a.pseudo != Some(true))
            .map(|a| GroundTruthAnnotation {
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: BoundingBox::new(a.bbox[0], a.bbox[1], a.bbox[0] + a.bbox[2], a.bbox[1] + a.bbox[3]),
            })
            .collect()
    }

    /// Builds a dataset from corner-form annotations, numbering annotations
    /// from 1 and naming categories `category_<id>`.
    pub fn from_ground_truth(image_ids: &[u64], gt: &[GroundTruthAnnotation]) -> Self {
        let mut categories: Vec<u32> = gt.iter().map(|g| g.category_id).collect();
        categories.sort_unstable();
        categories.dedup();
        Self {
            images: image_ids
                .iter()
                .map(|&id| CocoImage {
                    id,
                    file_name: None,
                    width: None,
                    height: None,
                })
                .collect(),
            annotations: gt
                .iter()
                .enumerate()
                .map(|(i, g)| CocoAnnotation {
                    id: i as u64 + 1,
                    image_id: g.image_id,
                    category_id: g.category_id,
                    bbox: g.bbox.to_xywh(),
                    area: Some(g.bbox.area()),
                    iscrowd: Some(0),
                    score: None,
                    pseudo: None,
                })
                .collect(),
            categories: categories
                .into_iter()
                .map(|id| CocoCategory {
                    id,
                    name: format!("category_{id}"),
                    supercategory: None,
                })
                .collect(),
        }
    }
}

pub fn parse_coco(path: &Path, text: &str) -> Result<CocoDataset> {
    let ds: CocoDataset = serde_json::from_str(text).map_err(|e| json_err(path, e))?;
    for (i, a) in ds.annotations.iter().enumerate() {
        BoundingBox::from_xywh(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3])
            .map_err(|e| parse_err(path, 1, format!("annotation {i} (id {}): {e}", a.id)))?;
    }
    Ok(ds)
}

pub fn read_coco(path: &Path) -> Result<CocoDataset> {
    parse_coco(path, &read_text(path)?)
}

pub fn write_coco(path: &Path, ds: &CocoDataset) -> Result<()> {
    let mut s = serde_json::to_string_pretty(ds).expect("plain dataset");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RoiRecord {
    roi_id: u64,
    image_id: u64,
    bbox: [f64; 4],
    is_positive: bool,
    feature: Vec<f64>,
}

pub fn parse_roi_features(path: &Path, text: &str) -> Result<Vec<RoiFeatureRecord>> {
    let mut out: Vec<RoiFeatureRecord> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: RoiRecord = serde_json::from_str(line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        if let Some(first) = out.first() {
            if first.feature.len() != r.feature.len() {
                return Err(parse_err(
                    path,
                    line_no,
                    format!(
                        "feature length {} differs from {} on the first record",
                        r.feature.len(),
                        first.feature.len()
                    ),
                ));
            }
        }
        if r.feature.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, line_no, "non-finite feature value"));
        }
        out.push(RoiFeatureRecord {
            roi_id: r.roi_id,
            image_id: r.image_id,
            bbox: xywh(path, line_no, r.bbox)?,
            is_positive: r.is_positive,
            feature: r.feature,
        });
    }
    Ok(out)
}

pub fn read_roi_features(path: &Path) -> Result<Vec<RoiFeatureRecord>> {
    let f = fs::File::open(path).map_err(|e| CuratorError::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| CuratorError::io(path, e))?);
        text.push('\n');
    }
    parse_roi_features(path, &text)
}

pub fn roi_features_to_jsonl(rois: &[RoiFeatureRecord]) -> String {
    let mut s = String::new();
    for r in rois {
        let rec = RoiRecord {
            roi_id: r.roi_id,
            image_id: r.image_id,
            bbox: r.bbox.to_xywh(),
            is_positive: r.is_positive,
            feature: r.feature.clone(),
        };
        s.push_str(&serde_json::to_string(&rec).expect("plain record"));
        s.push('\n');
    }
    s
}

pub fn write_roi_features(path: &Path, rois: &[RoiFeatureRecord]) -> Result<()> {
    write_atomic(path, roi_features_to_jsonl(rois).as_bytes())
}

/// `printf("%.9g")`: 9 significant digits, trailing zeros removed, exponent
/// form outside `[1e-4, 1e9)`.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const WEIGHT_HEADER: [&str; 5] = ["roi_id", "image_id", "iou_max", "D", "weight"];

pub fn weight_table_to_csv(table: &RoiWeightTable) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| CuratorError::InvalidInput(format!("csv: {e}"));
    w.write_record(WEIGHT_HEADER).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            r.roi_id.to_string(),
            r.image_id.to_string(),
            format_sig9(r.iou_max),
            format_sig9(r.similarity_uncertainty),
            format_sig9(r.weight),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CuratorError::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("ascii csv"))
}

pub fn write_weight_table(path: &Path, table: &RoiWeightTable) -> Result<()> {
    write_atomic(path, weight_table_to_csv(table)?.as_bytes())
}

pub fn parse_weight_table(path: &Path, text: &str) -> Result<RoiWeightTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != WEIGHT_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header {}", WEIGHT_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(path, line, e.to_string()))?;
        let field = |k: usize| {
            rec.get(k)
                .ok_or_else(|| parse_err(path, line, format!("missing column {}", WEIGHT_HEADER[k])))
        };
        let num = |k: usize| -> Result<f64> {
            field(k)?
                .parse::<f64>()
                .map_err(|e| parse_err(path, line, format!("{}: {e}", WEIGHT_HEADER[k])))
        };
        let int = |k: usize| -> Result<u64> {
            field(k)?
                .parse::<u64>()
                .map_err(|e| parse_err(path, line, format!("{}: {e}", WEIGHT_HEADER[k])))
        };
        rows.push(RoiWeightRow {
            roi_id: int(0)?,
            image_id: int(1)?,
            iou_max: num(2)?,
            similarity_uncertainty: num(3)?,
            weight: num(4)?,
        });
    }
    Ok(RoiWeightTable { rows })
}

pub fn read_weight_table(path: &Path) -> Result<RoiWeightTable> {
    parse_weight_table(path, &read_text(path)?)
}

pub fn embedding_to_text(w: &EmbeddingMatrix) -> String {
    let mut s = format!("{} {}\n", w.rows(), w.cols());
    for r in 0..w.rows() {
        let row: Vec<String> = w.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_embedding(path: &Path, text: &str) -> Result<EmbeddingMatrix> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty embedding file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, 1, format!("header: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(path, 1, "header must be \"dim_out dim_in\""));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, idx + 1, e.to_string()))?;
        if vals.len() != cols {
            return Err(parse_err(
                path,
                idx + 1,
                format!("expected {cols} values, found {}", vals.len()),
            ));
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(parse_err(
            path,
            seen + 1,
            format!("expected {rows} rows, found {seen}"),
        ));
    }
    EmbeddingMatrix::from_row_major(rows, cols, data).map_err(|e| parse_err(path, 1, e.to_string()))
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingMatrix> {
    parse_embedding(path, &read_text(path)?)
}

pub fn write_embedding(path: &Path, w: &EmbeddingMatrix) -> Result<()> {
    write_atomic(path, embedding_to_text(w).as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CuratorError::InvalidInput(e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| json_err(path, e))
}
