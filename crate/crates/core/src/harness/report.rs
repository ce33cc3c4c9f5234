//! Report emission: a JSON document with a hash-stable canonical section
//! plus portable-pixmap overlays.
//!
//! The clean image gets green ground-truth outlines; a falsified run also
//! gets the witness image with the decoded detections outlined in red.
//! Timing lives in a separate `runtime` section so the canonical bytes (and
//! their sha256) are identical across reruns with the same seeds.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detection::{BoundingBox, GroundTruthSet};
use crate::harness::sweep::SweepResult;
use crate::tensor::Tensor;
use crate::verifier::{Verdict, VerificationOutcome};

const GREEN: [u8; 3] = [0, 255, 0];
const RED: [u8; 3] = [255, 0, 0];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("report input: {0}")]
    Malformed(String),
}

/// Everything a report is rendered from.
pub struct ReportContext<'a> {
    /// File-name stem for the emitted artifacts.
    pub label: &'a str,
    /// Clean image, shape `[1, H, W]`.
    pub image: &'a Tensor,
    pub gts: &'a GroundTruthSet,
    /// The verifier's JSON document for this run.
    pub query_doc: Value,
    pub outcome: &'a VerificationOutcome,
    pub sweep: Option<&'a SweepResult>,
}

/// Where the artifacts landed.
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub json: PathBuf,
    pub clean_image: PathBuf,
    pub witness_image: Option<PathBuf>,
    pub canonical_sha256: String,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize), ReportError> {
    match image.shape() {
        [1, h, w] => Ok((*h, *w)),
        other => Err(ReportError::Malformed(format!(
            "expected a [1, H, W] image, got {other:?}"
        ))),
    }
}

fn gray_to_rgb(pixels: &[f64]) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(pixels.len() * 3);
    for &v in pixels {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb.extend_from_slice(&[byte, byte, byte]);
    }
    rgb
}

/// Map a normalized coordinate to a pixel index on an axis of `n` pixels.
fn to_pixel(coord: f64, n: usize) -> i64 {
    (coord * n as f64).round() as i64
}

/// Draw a one-pixel rectangle outline; boxes partially outside the image are
/// clipped.
fn draw_box(rgb: &mut [u8], width: usize, height: usize, box_: &BoundingBox, color: [u8; 3]) {
    let x0 = to_pixel(box_.x, width);
    let y0 = to_pixel(box_.y, height);
    let x1 = to_pixel(box_.x + box_.w, width) - 1;
    let y1 = to_pixel(box_.y + box_.h, height) - 1;
    let mut put = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return;
        }
        let at = 3 * (y as usize * width + x as usize);
        rgb[at..at + 3].copy_from_slice(&color);
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), ReportError> {
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Emit the report JSON and overlays into `dir`, returning the paths and the
/// canonical section's sha256.
pub fn emit_report(dir: &Path, ctx: &ReportContext<'_>) -> Result<ReportPaths, ReportError> {
    let (height, width) = image_dims(ctx.image)?;
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;

    let clean_path = dir.join(format!("{}.clean.ppm", ctx.label));
    let mut clean = gray_to_rgb(ctx.image.data());
    for gt in ctx.gts.items() {
        draw_box(&mut clean, width, height, &gt.box_, GREEN);
    }
    write_ppm(&clean_path, width, height, &clean)?;

    let witness_image = match &ctx.outcome.verdict {
        Verdict::Falsified {
            witness,
            detections,
            ..
        } => {
            if witness.numel() != height * width {
                return Err(ReportError::Malformed(format!(
                    "witness has {} values for a {height}x{width} image",
                    witness.numel()
                )));
            }
            let path = dir.join(format!("{}.witness.ppm", ctx.label));
            let mut rgb = gray_to_rgb(witness.data());
            for det in detections {
                draw_box(&mut rgb, width, height, &det.box_, RED);
            }
            write_ppm(&path, width, height, &rgb)?;
            Some(path)
        }
        _ => None,
    };

    let mut query_doc = ctx.query_doc.clone();
    let runtime_stats = query_doc
        .as_object_mut()
        .and_then(|m| m.remove("stats"))
        .unwrap_or(Value::Null);
    let canonical = json!({
        "label": ctx.label,
        "image": { "height": height, "width": width },
        "ground_truth": ctx.gts,
        "query": query_doc,
        "sweep": ctx.sweep,
    });
    let canonical_bytes = serde_json::to_vec(&canonical)?;
    let canonical_sha256 = hex_digest(&canonical_bytes);

    let report = json!({
        "schema_version": 1,
        "canonical": canonical,
        "canonical_sha256": canonical_sha256,
        "runtime": { "stats": runtime_stats },
    });
    let json_path = dir.join(format!("{}.report.json", ctx.label));
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|source| ReportError::Io {
        path: json_path.clone(),
        source,
    })?;

    Ok(ReportPaths {
        json: json_path,
        clean_image: clean_path,
        witness_image,
        canonical_sha256,
    })
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
