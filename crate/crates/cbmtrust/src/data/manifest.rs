//! On-disk dataset layout: `manifest.json` plus one lossless PNG per sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::schema::{ConceptSchema, Dataset, ImageSample, PartAnnotation, Split};
use super::GeneratorSpec;

const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    num_categories: usize,
    schema: ConceptSchema,
    generator: Option<GeneratorSpec>,
    samples: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    file: String,
    category: usize,
    split: Split,
    concept_labels: Vec<u8>,
    parts: Vec<PartAnnotation>,
}

/// `[3, h, w]` unit-interval tensor -> 8-bit RGB rows.
pub(super) fn tensor_to_rgb8(image: &Tensor) -> (u32, u32, Vec<u8>) {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for pix in 0..h * w {
        for ch in 0..3 {
            bytes.push((data[ch * h * w + pix].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    (w as u32, h as u32, bytes)
}

pub(super) fn rgb8_to_tensor(w: u32, h: u32, bytes: &[u8]) -> Tensor {
    let (h, w) = (h as usize, w as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let data = t.data_mut();
    for pix in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + pix] = bytes[pix * 3 + ch] as f64 / 255.0;
        }
    }
    t
}

/// Write `manifest.json` and `images/img_<id>.png` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut records = Vec::with_capacity(dataset.samples.len());
    for sample in &dataset.samples {
        let file = format!("images/img_{:06}.png", sample.id);
        let path = dir.join(&file);
        let (w, h, bytes) = tensor_to_rgb8(&sample.image);
        image::save_buffer(&path, &bytes, w, h, image::ColorType::Rgb8)
            .map_err(|e| Error::Image { path: path.clone(), source: e })?;
        records.push(SampleRecord {
            id: sample.id,
            file,
            category: sample.category,
            split: sample.split,
            concept_labels: sample.concept_labels.clone(),
            parts: sample.parts.clone(),
        });
    }
    let manifest = ManifestFile {
        version: MANIFEST_VERSION,
        num_categories: dataset.num_categories,
        schema: dataset.schema.clone(),
        generator: dataset.generator.clone(),
        samples: records,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let json = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ManifestFile =
        serde_json::from_str(&json).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Serde(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for record in manifest.samples {
        let img_path = dir.join(&record.file);
        let img = image::open(&img_path)
            .map_err(|e| Error::Image { path: img_path.clone(), source: e })?
            .into_rgb8();
        let (w, h) = (img.width(), img.height());
        samples.push(ImageSample {
            id: record.id,
            image: rgb8_to_tensor(w, h, img.as_raw()),
            concept_labels: record.concept_labels,
            category: record.category,
            parts: record.parts,
            split: record.split,
        });
    }
    let dataset = Dataset {
        schema: manifest.schema,
        num_categories: manifest.num_categories,
        samples,
        generator: manifest.generator,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::super::synthetic::{generate_synthetic_dataset, GeneratorSpec};
    use super::*;

    #[test]
    fn save_load_round_trip_is_identical() {
        let spec = GeneratorSpec {
            image_size: 64,
            train_per_category: 1,
            test_per_category: 1,
            glyph_half: 8,
            jitter: 4,
            ..GeneratorSpec::default()
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn saving_twice_is_bitwise_identical() {
        let spec = GeneratorSpec {
            image_size: 64,
            train_per_category: 1,
            test_per_category: 0,
            glyph_half: 8,
            jitter: 4,
            ..GeneratorSpec::default()
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(&ds, a.path()).unwrap();
        save_dataset(&ds, b.path()).unwrap();
        let bytes = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
        assert_eq!(bytes(a.path(), "manifest.json"), bytes(b.path(), "manifest.json"));
        assert_eq!(
            bytes(a.path(), "images/img_000000.png"),
            bytes(b.path(), "images/img_000000.png")
        );
    }
}
