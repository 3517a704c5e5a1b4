//! Recipe1M-format JSON: a top-level array of
//! `{"id", "title", "ingredients": [..], "instructions": [..], "image": str|null}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::ImageTensor;
use crate::error::{MalmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecipe {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    pub image: Option<String>,
}

impl RawRecipe {
    /// Validates one JSON record, naming the record and field on failure.
    pub fn from_value(v: &Value, index: usize) -> Result<Self> {
        let obj = v.as_object().ok_or_else(|| MalmError::Schema {
            field: format!("[{index}]"),
            reason: "record is not an object".into(),
        })?;
        let id = match obj.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                return Err(MalmError::Schema {
                    field: "id".into(),
                    reason: format!("record #{index}: expected a string"),
                })
            }
            None => {
                return Err(MalmError::MissingField {
                    id: format!("#{index}"),
                    field: "id".into(),
                })
            }
        };
        let missing = |field: &str| MalmError::MissingField {
            id: id.clone(),
            field: field.into(),
        };
        let wrong = |field: &str, what: &str| MalmError::Schema {
            field: field.into(),
            reason: format!("record `{id}`: expected {what}"),
        };
        let title = obj
            .get("title")
            .ok_or_else(|| missing("title"))?
            .as_str()
            .ok_or_else(|| wrong("title", "a string"))?
            .to_string();
        let lines = |field: &str| -> Result<Vec<String>> {
            obj.get(field)
                .ok_or_else(|| missing(field))?
                .as_array()
                .ok_or_else(|| wrong(field, "an array of strings"))?
                .iter()
                .map(|l| {
                    l.as_str()
                        .map(String::from)
                        .ok_or_else(|| wrong(field, "an array of strings"))
                })
                .collect()
        };
        let ingredients = lines("ingredients")?;
        let instructions = lines("instructions")?;
        let image = match obj.get("image") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(wrong("image", "a string or null")),
        };
        Ok(Self {
            id,
            title,
            ingredients,
            instructions,
            image,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub records: Vec<(RawRecipe, ImageTensor)>,
    /// Records without an image.
    pub unpaired: usize,
    /// Records whose image could not be read.
    pub unreadable: usize,
}

/// Loads an image, resized to `size × size` RGB.
pub fn load_image(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(
            &img,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let pixels = img
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 255.0)
        .collect();
    ImageTensor::new(size, 3, pixels)
}

/// Parses the records of a Recipe1M-format file without touching images.
pub fn parse_records(text: &str) -> Result<Vec<RawRecipe>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let root: Value = serde_json::from_str(text)?;
    let arr = root.as_array().ok_or_else(|| MalmError::Schema {
        field: "<root>".into(),
        reason: "expected a top-level array".into(),
    })?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| RawRecipe::from_value(v, i))
        .collect()
}

/// Loads paired records. Entries without an image are dropped; entries
/// whose image cannot be read are skipped and counted.
pub fn load_recipe1m_subset(
    path: &Path,
    image_root: &Path,
    image_size: usize,
) -> Result<LoadReport> {
    let records = parse_records(&fs::read_to_string(path)?)?;
    let mut report = LoadReport::default();
    for rec in records {
        let Some(rel) = rec.image.clone() else {
            report.unpaired += 1;
            continue;
        };
        match load_image(&image_root.join(&rel), image_size) {
            Ok(img) => report.records.push((rec, img)),
            Err(e) => {
                log::warn!("skipping `{}`: unreadable image {rel}: {e}", rec.id);
                report.unreadable += 1;
            }
        }
    }
    if report.unreadable > 0 {
        log::warn!(
            "{} records skipped for unreadable images",
            report.unreadable
        );
    }
    Ok(report)
}

fn to_rgb8(img: &ImageTensor) -> Result<image::RgbImage> {
    if img.channels() != 3 {
        return Err(MalmError::Invalid(
            "only 3-channel images can be written".into(),
        ));
    }
    let raw: Vec<u8> = img
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(img.size() as u32, img.size() as u32, raw)
        .ok_or_else(|| MalmError::Shape("pixel buffer does not match image size".into()))
}

/// Materializes a dataset: `dataset.json`, one PNG per record at its
/// `image` path, and optionally `groundtruth.json`.
pub fn write_dataset(
    dir: &Path,
    records: &[RawRecipe],
    images: &[&ImageTensor],
    groundtruth: Option<&BTreeMap<String, BTreeMap<usize, usize>>>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (rec, img) in records.iter().zip(images) {
        if let Some(rel) = &rec.image {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            to_rgb8(img)?.save(&path)?;
        }
    }
    fs::write(
        dir.join("dataset.json"),
        serde_json::to_string_pretty(records)?,
    )?;
    if let Some(gt) = groundtruth {
        fs::write(
            dir.join("groundtruth.json"),
            serde_json::to_string_pretty(gt)?,
        )?;
    }
    Ok(())
}

/// Reads a `groundtruth.json` sidecar: sample id → {patch index → class}.
pub fn load_groundtruth(path: &Path) -> Result<BTreeMap<String, BTreeMap<usize, usize>>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
