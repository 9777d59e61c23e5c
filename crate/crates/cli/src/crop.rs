//! Proposal CSV (`path,x0,y0,x1,y1,label`) to letterboxed PNG crops plus a
//! line-delimited manifest. Relative image paths resolve against the CSV's
//! directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rar_core::regions::{preprocess_region, BBox, RasterImage, RegionParams};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context};

#[derive(Debug, Deserialize)]
struct ProposalRow {
    path: PathBuf,
    x0: i64,
    y0: i64,
    x1: i64,
    y1: i64,
    #[serde(default)]
    label: Option<String>,
}

#[derive(Debug, Serialize)]
struct ManifestLine {
    row: usize,
    source: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    proposal: BBox,
    #[serde(skip_serializing_if = "Option::is_none")]
    crop_box: Option<BBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn load_rgb(path: &Path) -> Result<RasterImage, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = img.dimensions();
    RasterImage::from_rgb(w, h, img.into_raw()).map_err(|e| e.to_string())
}

fn process(row: &ProposalRow, image: &RasterImage, params: &RegionParams, out: &Path) -> Result<BBox, String> {
    let bbox = BBox::new(row.x0, row.y0, row.x1, row.y1);
    let region = preprocess_region(image, bbox, params).map_err(|e| e.to_string())?;
    let (w, h) = (region.image.width(), region.image.height());
    let buf = image::RgbImage::from_raw(w, h, region.image.into_data()).ok_or("pixel buffer size")?;
    buf.save(out).map_err(|e| e.to_string())?;
    Ok(region.crop_box)
}

/// Returns the number of rows that failed; failures are recorded in the manifest.
pub fn crop_regions(proposals: &Path, out_dir: &Path, params: &RegionParams) -> Result<usize, CliError> {
    let base = proposals.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(proposals).context(proposals.display())?;
    fs::create_dir_all(out_dir).context(out_dir.display())?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = BufWriter::new(File::create(&manifest_path).context(manifest_path.display())?);
    // consecutive rows of the same file reuse the decoded image
    let mut cached: Option<(PathBuf, Result<RasterImage, String>)> = None;
    let mut failed = 0;
    for (i, row) in reader.deserialize::<ProposalRow>().enumerate() {
        let row = row.context(format!("{} row {}", proposals.display(), i + 1))?;
        let source = if row.path.is_absolute() { row.path.clone() } else { base.join(&row.path) };
        if cached.as_ref().map_or(true, |(p, _)| *p != source) {
            cached = Some((source.clone(), load_rgb(&source)));
        }
        let decoded = &cached.as_ref().expect("just filled").1;
        let output = out_dir.join(format!("{i:06}.png"));
        let result = decoded
            .as_ref()
            .map_err(Clone::clone)
            .and_then(|img| process(&row, img, params, &output));
        let line = ManifestLine {
            row: i,
            source: row.path.clone(),
            label: row.label.clone(),
            proposal: BBox::new(row.x0, row.y0, row.x1, row.y1),
            crop_box: result.as_ref().ok().copied(),
            output: result.as_ref().ok().map(|_| output.clone()),
            error: result.as_ref().err().cloned(),
        };
        if line.error.is_some() {
            failed += 1;
        }
        serde_json::to_writer(&mut manifest, &line).map_err(CliError::data)?;
        manifest.write_all(b"\n").map_err(CliError::data)?;
    }
    manifest.flush().map_err(CliError::data)?;
    Ok(failed)
}
