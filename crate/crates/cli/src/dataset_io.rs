//! Dataset directories.
//!
//! ```text
//! images/<id>.png           8-bit gray or RGB
//! masks_pos/<id>.png        positive annotation, pixels >= 128 are set
//! masks_neg/<id>.png        optional negative annotation
//! masks_pos_clean/<id>.png  optional clean positive annotation
//! masks_neg_clean/<id>.png  optional clean negative annotation
//! labels.csv                header `id,label`
//! ```
//!
//! Samples load in lexicographic id order.

use std::fs;
use std::path::Path;

use res_core::data::{AnnotationMask, BinaryMask, Dataset, Sample};
use res_core::Tensor;

use crate::error::{Error, Result};
use crate::raster::{read_png, to_byte, write_png, Raster};

pub const IMAGES: &str = "images";
pub const MASKS_POS: &str = "masks_pos";
pub const MASKS_NEG: &str = "masks_neg";
pub const MASKS_POS_CLEAN: &str = "masks_pos_clean";
pub const MASKS_NEG_CLEAN: &str = "masks_neg_clean";
pub const LABELS: &str = "labels.csv";

/// Mask pixels at or above this gray level are set.
pub const MASK_LEVEL: u8 = 128;

fn mask_raster(mask: &BinaryMask) -> Raster {
    Raster::gray(
        mask.width(),
        mask.height(),
        mask.bits().iter().map(|&b| if b != 0 { 255 } else { 0 }).collect(),
    )
}

fn image_raster(image: &Tensor) -> Raster {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let data = (0..plane)
        .flat_map(|p| (0..c).map(move |ch| ch * plane + p))
        .map(|i| to_byte(image.data()[i]))
        .collect();
    Raster {
        width: w,
        height: h,
        channels: c,
        data,
    }
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Usage(format!("sample id {id:?} is not a portable file name")))
    }
}

/// Writes `dataset` in the directory layout above. Images must have 1 or 3
/// channels; values are stored as `round(255·v)`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let has_clean = dataset.samples.iter().any(|s| s.mask.clean.is_some());
    let mut subdirs = vec![IMAGES, MASKS_POS, MASKS_NEG];
    if has_clean {
        subdirs.extend([MASKS_POS_CLEAN, MASKS_NEG_CLEAN]);
    }
    for sub in &subdirs {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(Error::io(&p))?;
    }
    let labels_path = dir.join(LABELS);
    let mut labels = csv::Writer::from_path(&labels_path).map_err(|e| Error::format(&labels_path, e))?;
    labels.write_record(["id", "label"]).map_err(|e| Error::format(&labels_path, e))?;
    for s in &dataset.samples {
        check_id(&s.id)?;
        let file = format!("{}.png", s.id);
        write_png(&dir.join(IMAGES).join(&file), &image_raster(&s.image))?;
        write_png(&dir.join(MASKS_POS).join(&file), &mask_raster(&s.mask.positive))?;
        write_png(&dir.join(MASKS_NEG).join(&file), &mask_raster(&s.mask.negative))?;
        if has_clean {
            let clean = s.mask.clean_or_current();
            write_png(&dir.join(MASKS_POS_CLEAN).join(&file), &mask_raster(&clean.positive))?;
            write_png(&dir.join(MASKS_NEG_CLEAN).join(&file), &mask_raster(&clean.negative))?;
        }
        labels
            .write_record([s.id.as_str(), &s.label.to_string()])
            .map_err(|e| Error::format(&labels_path, e))?;
    }
    labels.flush().map_err(Error::io(&labels_path))
}

fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::format(path, format!("{other:?}")),
    })?;
    let headers = reader.headers().map_err(|e| Error::format(path, e))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "label"] {
        return Err(Error::format(path, "header must be `id,label`"));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e))?;
        let id = record[0].trim().to_string();
        check_id(&id).map_err(|e| Error::format(path, e))?;
        let label = record[1]
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("row {}: bad label {:?}", line + 2, &record[1])))?;
        rows.push((id, label));
    }
    rows.sort();
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::format(path, format!("duplicate id {}", w[0].0)));
    }
    Ok(rows)
}

fn read_mask(path: &Path, size: (usize, usize)) -> Result<BinaryMask> {
    let r = read_png(path)?;
    if (r.height, r.width) != size {
        return Err(Error::format(
            path,
            format!("mask is {}×{}, image is {}×{}", r.height, r.width, size.0, size.1),
        ));
    }
    let bits = r.luma().iter().map(|&v| (v >= MASK_LEVEL) as u8).collect();
    BinaryMask::from_bits(size.0, size.1, bits).map_err(|e| Error::format(path, e))
}

/// Reads a mask from `sub` when that directory exists, or an empty mask.
fn optional_mask(dir: &Path, sub: &str, file: &str, size: (usize, usize)) -> Result<Option<BinaryMask>> {
    let d = dir.join(sub);
    if d.is_dir() {
        read_mask(&d.join(file), size).map(Some)
    } else {
        Ok(None)
    }
}

/// Loads a dataset directory. Images become `C×H×W` tensors in `[0, 1]`;
/// a missing `masks_neg/` directory means no negative annotation.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let labels = read_labels(&dir.join(LABELS))?;
    let mut samples = Vec::with_capacity(labels.len());
    let mut shape = None;
    for (id, label) in labels {
        let file = format!("{id}.png");
        let image_path = dir.join(IMAGES).join(&file);
        let r = read_png(&image_path)?;
        let (c, h, w) = (r.channels, r.height, r.width);
        if *shape.get_or_insert((c, h, w)) != (c, h, w) {
            return Err(Error::format(
                &image_path,
                format!("image is {c}×{h}×{w}, earlier images are {:?}", shape.unwrap()),
            ));
        }
        let plane = h * w;
        let data = (0..c * plane)
            .map(|i| r.data[(i % plane) * c + i / plane] as f64 / 255.0)
            .collect();
        let image = Tensor::new(vec![c, h, w], data)?;
        let positive = read_mask(&dir.join(MASKS_POS).join(&file), (h, w))?;
        let negative = optional_mask(dir, MASKS_NEG, &file, (h, w))?.unwrap_or(BinaryMask::empty(h, w));
        let neg_path = dir.join(MASKS_NEG).join(&file);
        let mut mask = AnnotationMask::new(positive, negative).map_err(|e| Error::format(&neg_path, e))?;
        let clean_pos = optional_mask(dir, MASKS_POS_CLEAN, &file, (h, w))?;
        let clean_neg = optional_mask(dir, MASKS_NEG_CLEAN, &file, (h, w))?;
        if clean_pos.is_some() || clean_neg.is_some() {
            let p = clean_pos.unwrap_or(BinaryMask::empty(h, w));
            let n = clean_neg.unwrap_or(BinaryMask::empty(h, w));
            let clean_path = dir.join(MASKS_NEG_CLEAN).join(&file);
            mask = mask.with_clean(p, n).map_err(|e| Error::format(&clean_path, e))?;
        }
        samples.push(Sample {
            id,
            image,
            label,
            mask,
        });
    }
    Ok(Dataset::new(samples))
}
