//! Side-by-side grayscale panels: input | annotation | saliency.
//!
//! The annotation panel shows positive pixels as 255, negative pixels as 0
//! and unlabeled pixels as 128. The saliency panel stores `round(255·M)` for
//! the map of the predicted class.

use std::path::{Path, PathBuf};

use res_core::data::{AnnotationMask, Sample};
use res_core::model::{BackboneConfig, ModelParams};
use res_core::train::{explain, Batch};

use crate::error::{Error, Result};
use crate::raster::{to_byte, write_png, Raster};

pub const PANELS: usize = 3;
pub const UNLABELED_LEVEL: u8 = 128;

fn annotation_levels(mask: &AnnotationMask) -> impl Iterator<Item = u8> + '_ {
    mask.positive.bits().iter().zip(mask.negative.bits()).map(|(&f, &c)| match (f, c) {
        (0, 0) => UNLABELED_LEVEL,
        (0, _) => 0,
        _ => 255,
    })
}

/// One `3W×H` panel strip for `sample` and its `H×W` saliency map.
pub fn render(sample: &Sample, saliency: &[f64]) -> Raster {
    let (c, h, w) = (sample.channels(), sample.height(), sample.width());
    let plane = h * w;
    let image = sample.image.data();
    let input: Vec<u8> = (0..plane)
        .map(|p| to_byte((0..c).map(|ch| image[ch * plane + p]).sum::<f64>() / c as f64))
        .collect();
    let annotation: Vec<u8> = annotation_levels(&sample.mask).collect();
    let panels = [input, annotation, saliency.iter().map(|&v| to_byte(v)).collect()];
    let mut data = Vec::with_capacity(PANELS * plane);
    for y in 0..h {
        for panel in &panels {
            data.extend_from_slice(&panel[y * w..(y + 1) * w]);
        }
    }
    Raster::gray(PANELS * w, h, data)
}

/// Renders `samples` and writes `<out>/<id>.png` for each; returns the paths.
pub fn write_heatmaps(
    backbone: &BackboneConfig,
    params: &ModelParams,
    samples: &[&Sample],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut paths = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let batch = Batch::from_samples(chunk)?;
        let (_, maps) = explain(backbone, params, batch.images)?;
        let plane = backbone.height * backbone.width;
        for (s, map) in chunk.iter().zip(maps.data().chunks_exact(plane)) {
            let path = out.join(format!("{}.png", s.id));
            write_png(&path, &render(s, map))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use res_core::data::BinaryMask;
    use res_core::Tensor;

    #[test]
    fn panels_encode_input_annotation_and_saliency() {
        let image = Tensor::new(vec![1, 2, 2], vec![0.0, 0.2, 0.6, 1.0]).unwrap();
        let mask = AnnotationMask::new(
            BinaryMask::from_fn(2, 2, |y, x| y == 0 && x == 0),
            BinaryMask::from_fn(2, 2, |y, x| y == 1 && x == 1),
        )
        .unwrap();
        let sample = Sample {
            id: "a".into(),
            image,
            label: 0,
            mask,
        };
        let r = render(&sample, &[0.5, 0.0, 0.25, 1.0]);
        assert_eq!((r.width, r.height, r.channels), (6, 2, 1));
        assert_eq!(r.data, vec![0, 51, 255, 128, 128, 0, 153, 255, 128, 0, 64, 255]);
    }
}
