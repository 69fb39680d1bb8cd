//! CUB-format annotation ingestion.
//!
//! Expected layout under `root`:
//!
//! ```text
//! images.txt                              image_id rel/path.jpg
//! bounding_boxes.txt                      image_id x y w h
//! train_test_split.txt                    image_id is_train
//! parts/part_locs.txt                     image_id part_id x y visible
//! attributes/image_attribute_labels.txt   image_id attr_id is_present certainty time
//! attributes/attribute_part_map.txt       attr_id part_id
//! images/<rel/path>                       image files
//! ```
//!
//! All files are whitespace-separated, one record per line. `x` is the
//! column and `y` the row. `attribute_part_map.txt` is not part of the
//! original corpus; it selects the part-related attributes and names the
//! owning part of each, and must be supplied alongside the annotations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::manifest::rgb8_to_tensor;
use super::schema::{
    ConceptDef, ConceptSchema, Dataset, ImageSample, PartAnnotation, PartDef, Rect, Split,
};

struct Line<'a> {
    path: &'a Path,
    number: usize,
    fields: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::IngestLine {
            path: self.path.to_path_buf(),
            line: self.number,
            msg: msg.into(),
        }
    }

    fn expect_fields(&self, n: usize) -> Result<()> {
        if self.fields.len() != n {
            return Err(self.err(format!("expected {n} fields, found {}", self.fields.len())));
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, idx: usize, what: &str) -> Result<T> {
        self.fields[idx]
            .parse()
            .map_err(|_| self.err(format!("cannot parse {what} from '{}'", self.fields[idx])))
    }
}

fn read_lines(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            msg: "missing file".into(),
        });
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn for_each_line(path: &Path, text: &str, mut f: impl FnMut(Line) -> Result<()>) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        f(Line {
            path,
            number: i + 1,
            fields,
        })?;
    }
    Ok(())
}

#[derive(Clone, Copy)]
struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

/// Ingest a CUB-format directory into a [`Dataset`].
///
/// Images are resized to `target_size` x `target_size` (bilinear); when
/// `crop_to_bbox` is set they are first cropped to the annotated bounding
/// box, and part coordinates are transformed accordingly. Parts landing
/// outside the crop are marked invisible and their concepts cleared.
/// Categories are derived from the directory component of each image path.
pub fn load_cub_annotations(root: &Path, crop_to_bbox: bool, target_size: usize) -> Result<Dataset> {
    if target_size == 0 {
        return Err(Error::Config("target_size must be positive".into()));
    }
    let attributes_dir = root.join("attributes");
    if !attributes_dir.exists() {
        return Err(Error::Ingest {
            path: attributes_dir,
            msg: "missing directory".into(),
        });
    }

    // images.txt
    let images_path = root.join("images.txt");
    let text = read_lines(&images_path)?;
    let mut image_paths: BTreeMap<u64, String> = BTreeMap::new();
    for_each_line(&images_path, &text, |l| {
        l.expect_fields(2)?;
        let id: u64 = l.parse(0, "image id")?;
        if image_paths.insert(id, l.fields[1].to_string()).is_some() {
            return Err(l.err(format!("duplicate image id {id}")));
        }
        Ok(())
    })?;

    let known = |l: &Line, id: u64| -> Result<()> {
        if !image_paths.contains_key(&id) {
            return Err(l.err(format!("unknown image id {id}")));
        }
        Ok(())
    };

    // bounding_boxes.txt
    let bbox_path = root.join("bounding_boxes.txt");
    let text = read_lines(&bbox_path)?;
    let mut bboxes: BTreeMap<u64, BBox> = BTreeMap::new();
    for_each_line(&bbox_path, &text, |l| {
        l.expect_fields(5)?;
        let id: u64 = l.parse(0, "image id")?;
        known(&l, id)?;
        bboxes.insert(
            id,
            BBox {
                x: l.parse(1, "x")?,
                y: l.parse(2, "y")?,
                w: l.parse(3, "w")?,
                h: l.parse(4, "h")?,
            },
        );
        Ok(())
    })?;

    // parts/part_locs.txt — x is the column, y the row
    let locs_path = root.join("parts").join("part_locs.txt");
    let text = read_lines(&locs_path)?;
    let mut part_ids: Vec<usize> = Vec::new();
    let mut part_locs: BTreeMap<u64, Vec<(usize, f64, f64, bool)>> = BTreeMap::new();
    for_each_line(&locs_path, &text, |l| {
        l.expect_fields(5)?;
        let id: u64 = l.parse(0, "image id")?;
        known(&l, id)?;
        let part: usize = l.parse(1, "part id")?;
        let col: f64 = l.parse(2, "x")?;
        let row: f64 = l.parse(3, "y")?;
        let visible: u8 = l.parse(4, "visible flag")?;
        if visible > 1 {
            return Err(l.err(format!("visible flag must be 0/1, got {visible}")));
        }
        if !part_ids.contains(&part) {
            part_ids.push(part);
        }
        part_locs
            .entry(id)
            .or_default()
            .push((part, row, col, visible == 1));
        Ok(())
    })?;
    part_ids.sort_unstable();

    // attributes/attribute_part_map.txt
    let map_path = attributes_dir.join("attribute_part_map.txt");
    let text = read_lines(&map_path)?;
    let mut attr_part: BTreeMap<usize, usize> = BTreeMap::new();
    for_each_line(&map_path, &text, |l| {
        l.expect_fields(2)?;
        let attr: usize = l.parse(0, "attribute id")?;
        let part: usize = l.parse(1, "part id")?;
        if !part_ids.contains(&part) {
            return Err(l.err(format!("attribute {attr} maps to unknown part {part}")));
        }
        attr_part.insert(attr, part);
        Ok(())
    })?;
    let concept_ids: Vec<usize> = attr_part.keys().copied().collect();

    // attributes/image_attribute_labels.txt
    let labels_path = attributes_dir.join("image_attribute_labels.txt");
    let text = read_lines(&labels_path)?;
    let mut attr_present: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    for_each_line(&labels_path, &text, |l| {
        l.expect_fields(5)?;
        let id: u64 = l.parse(0, "image id")?;
        known(&l, id)?;
        let attr: usize = l.parse(1, "attribute id")?;
        let present: u8 = l.parse(2, "is_present flag")?;
        if present > 1 {
            return Err(l.err(format!("is_present must be 0/1, got {present}")));
        }
        // certainty and time fields are validated by count only
        if let Some(pos) = concept_ids.iter().position(|&c| c == attr) {
            let labels = attr_present
                .entry(id)
                .or_insert_with(|| vec![0; concept_ids.len()]);
            labels[pos] = present;
        }
        Ok(())
    })?;

    // train_test_split.txt
    let split_path = root.join("train_test_split.txt");
    let text = read_lines(&split_path)?;
    let mut splits: BTreeMap<u64, Split> = BTreeMap::new();
    for_each_line(&split_path, &text, |l| {
        l.expect_fields(2)?;
        let id: u64 = l.parse(0, "image id")?;
        known(&l, id)?;
        let is_train: u8 = l.parse(1, "is_train flag")?;
        splits.insert(id, if is_train == 1 { Split::Train } else { Split::Test });
        Ok(())
    })?;

    // categories from the directory component of image paths
    let mut category_names: Vec<String> = image_paths
        .values()
        .map(|p| {
            Path::new(p)
                .parent()
                .and_then(|d| d.to_str())
                .unwrap_or("")
                .to_string()
        })
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    category_names.sort();

    let schema = ConceptSchema {
        concepts: concept_ids
            .iter()
            .map(|&id| ConceptDef {
                id,
                part_id: attr_part[&id],
                label: format!("attr_{id}"),
            })
            .collect(),
        parts: part_ids
            .iter()
            .map(|&id| PartDef {
                id,
                name: format!("part_{id}"),
            })
            .collect(),
    };
    schema.validate()?;

    let mut samples = Vec::with_capacity(image_paths.len());
    for (&id, rel) in &image_paths {
        let img_path = root.join("images").join(rel);
        let (image, transform) = load_image(&img_path, bboxes.get(&id).copied(), crop_to_bbox, target_size)?;

        let mut parts = Vec::with_capacity(part_ids.len());
        for &pid in &part_ids {
            let loc = part_locs
                .get(&id)
                .and_then(|v| v.iter().find(|&&(p, ..)| p == pid))
                .copied();
            let (row, col, mut visible) = match loc {
                Some((_, r, c, vis)) => (r, c, vis),
                None => (0.0, 0.0, false),
            };
            let (row, col) = transform.apply(row, col);
            let inside = row >= 0.0
                && row <= (target_size - 1) as f64
                && col >= 0.0
                && col <= (target_size - 1) as f64;
            if !inside {
                visible = false;
            }
            let region = if visible {
                Rect {
                    top: row.round().clamp(0.0, (target_size - 1) as f64) as usize,
                    left: col.round().clamp(0.0, (target_size - 1) as f64) as usize,
                    height: 1,
                    width: 1,
                }
            } else {
                Rect { top: 0, left: 0, height: 0, width: 0 }
            };
            parts.push(PartAnnotation {
                part_id: pid,
                center: (row, col),
                region,
                visible,
            });
        }

        let mut labels = attr_present
            .get(&id)
            .cloned()
            .unwrap_or_else(|| vec![0; concept_ids.len()]);
        // a concept with an invisible part has no ground-truth region
        for (i, label) in labels.iter_mut().enumerate() {
            if *label == 1 {
                let pid = schema.concepts[i].part_id;
                if !parts.iter().any(|p| p.part_id == pid && p.visible) {
                    *label = 0;
                }
            }
        }

        let dir = Path::new(rel)
            .parent()
            .and_then(|d| d.to_str())
            .unwrap_or("")
            .to_string();
        let category = category_names.binary_search(&dir).unwrap_or(0);

        samples.push(ImageSample {
            id,
            image,
            concept_labels: labels,
            category,
            parts,
            split: *splits.get(&id).unwrap_or(&Split::Train),
        });
    }

    let dataset = Dataset {
        schema,
        num_categories: category_names.len().max(1),
        samples,
        generator: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Affine map from original pixel coordinates to output coordinates.
struct CoordTransform {
    origin: (f64, f64), // (row, col) subtracted before scaling
    scale: (f64, f64),  // (row, col) factors
}

impl CoordTransform {
    fn apply(&self, row: f64, col: f64) -> (f64, f64) {
        (
            (row - self.origin.0) * self.scale.0,
            (col - self.origin.1) * self.scale.1,
        )
    }
}

fn load_image(
    path: &PathBuf,
    bbox: Option<BBox>,
    crop_to_bbox: bool,
    target_size: usize,
) -> Result<(Tensor, CoordTransform)> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.clone(), source: e })?
        .into_rgb8();
    let (w, h) = (img.width(), img.height());
    let (img, origin, src_size) = if crop_to_bbox {
        let bbox = bbox.ok_or_else(|| Error::Ingest {
            path: path.clone(),
            msg: "crop requested but no bounding box annotated".into(),
        })?;
        let left = bbox.x.round().clamp(0.0, (w - 1) as f64) as u32;
        let top = bbox.y.round().clamp(0.0, (h - 1) as f64) as u32;
        let bw = (bbox.w.round() as u32).clamp(1, w - left);
        let bh = (bbox.h.round() as u32).clamp(1, h - top);
        let cropped = image::imageops::crop_imm(&img, left, top, bw, bh).to_image();
        (cropped, (top as f64, left as f64), (bh as f64, bw as f64))
    } else {
        (img, (0.0, 0.0), (h as f64, w as f64))
    };
    let resized = image::imageops::resize(
        &img,
        target_size as u32,
        target_size as u32,
        image::imageops::FilterType::Triangle,
    );
    let tensor = rgb8_to_tensor(resized.width(), resized.height(), resized.as_raw());
    Ok((
        tensor,
        CoordTransform {
            origin,
            scale: (
                target_size as f64 / src_size.0,
                target_size as f64 / src_size.1,
            ),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Build a minimal CUB-style directory with two 20x30 images.
    fn write_fixture(dir: &Path) {
        use std::fs;
        fs::create_dir_all(dir.join("images/100.Alpha")).unwrap();
        fs::create_dir_all(dir.join("images/101.Beta")).unwrap();
        fs::create_dir_all(dir.join("parts")).unwrap();
        fs::create_dir_all(dir.join("attributes")).unwrap();
        for (name, shade) in [("100.Alpha/a.png", 40u8), ("101.Beta/b.png", 200u8)] {
            let img = image::RgbImage::from_pixel(30, 20, image::Rgb([shade, shade, shade]));
            img.save(dir.join("images").join(name)).unwrap();
        }
        fs::write(
            dir.join("images.txt"),
            "1 100.Alpha/a.png\n2 101.Beta/b.png\n",
        )
        .unwrap();
        fs::write(
            dir.join("bounding_boxes.txt"),
            "1 5 2 20 16\n2 0 0 30 20\n",
        )
        .unwrap();
        fs::write(dir.join("train_test_split.txt"), "1 1\n2 0\n").unwrap();
        fs::write(
            dir.join("parts/part_locs.txt"),
            "1 2 60.5 90.0 1\n1 7 10.0 8.0 1\n2 2 15.0 10.0 1\n2 7 0.0 0.0 0\n",
        )
        .unwrap();
        fs::write(
            dir.join("attributes/image_attribute_labels.txt"),
            "1 5 1 3 10.2\n1 9 0 4 1.0\n2 5 1 4 2.0\n2 9 1 4 2.0\n",
        )
        .unwrap();
        fs::write(dir.join("attributes/attribute_part_map.txt"), "5 2\n9 7\n").unwrap();
    }

    #[test]
    fn ingests_fixture_without_crop() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let ds = load_cub_annotations(dir.path(), false, 32).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.schema.num_concepts(), 2);
        assert_eq!(ds.num_categories, 2);
        let s1 = &ds.samples[0];
        assert_eq!(s1.split, Split::Train);
        // "1 2 60.5 90.0 1" -> part 2 at (row 90, col 60.5), clipped by the
        // image bounds it lands outside, so it is marked invisible and the
        // attribute on part 2 is cleared.
        let p2 = s1.part(2).unwrap();
        assert!(!p2.visible);
        assert_eq!(s1.concept_labels, vec![0, 0]);
        // part 7 at (row 8, col 10) scales by 32/20 rows, 32/30 cols
        let p7 = s1.part(7).unwrap();
        assert!(p7.visible);
        assert!((p7.center.0 - 8.0 * 32.0 / 20.0).abs() < 1e-9);
        assert!((p7.center.1 - 10.0 * 32.0 / 30.0).abs() < 1e-9);
    }

    #[test]
    fn row_col_convention_matches_format() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        // without resize distortion: target equals height so rows scale by 1
        let ds = load_cub_annotations(dir.path(), false, 20).unwrap();
        let s2 = &ds.samples[1];
        let p2 = s2.part(2).unwrap();
        // "2 2 15.0 10.0 1" -> (row 10, col 15) scaled by (1, 20/30)
        assert!((p2.center.0 - 10.0).abs() < 1e-9);
        assert!((p2.center.1 - 10.0).abs() < 1e-9);
        assert_eq!(s2.concept_labels, vec![1, 0]);
    }

    #[test]
    fn crop_transform_matches_affine_formula() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let ds = load_cub_annotations(dir.path(), true, 32).unwrap();
        let s2 = &ds.samples[1]; // bbox (0,0,30,20): crop is the whole image
        let p2 = s2.part(2).unwrap();
        assert!((p2.center.0 - 10.0 * 32.0 / 20.0).abs() < 0.5);
        assert!((p2.center.1 - 15.0 * 32.0 / 30.0).abs() < 0.5);
        let s1 = &ds.samples[0]; // bbox (5,2,20,16)
        let p7 = s1.part(7).unwrap();
        assert!((p7.center.0 - (8.0 - 2.0) * 32.0 / 16.0).abs() < 0.5);
        assert!((p7.center.1 - (10.0 - 5.0) * 32.0 / 20.0).abs() < 0.5);
    }

    #[test]
    fn missing_attributes_dir_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::rename(dir.path().join("attributes"), dir.path().join("attrs_x")).unwrap();
        let err = load_cub_annotations(dir.path(), false, 32).unwrap_err();
        assert!(err.to_string().contains("attributes"), "{err}");
    }

    #[test]
    fn malformed_line_is_reported_with_context() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::write(dir.path().join("train_test_split.txt"), "1 1\n2\n").unwrap();
        let err = load_cub_annotations(dir.path(), false, 32).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train_test_split.txt:2"), "{msg}");
    }

    #[test]
    fn unknown_part_in_map_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        std::fs::write(dir.path().join("attributes/attribute_part_map.txt"), "5 99\n").unwrap();
        let err = load_cub_annotations(dir.path(), false, 32).unwrap_err();
        assert!(err.to_string().contains("unknown part"), "{err}");
    }

    #[test]
    fn round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path());
        let ds = load_cub_annotations(dir.path(), false, 32).unwrap();
        let out = tempfile::tempdir().unwrap();
        super::super::save_dataset(&ds, out.path()).unwrap();
        let loaded = super::super::load_dataset(out.path()).unwrap();
        assert_eq!(ds, loaded);
    }
}
