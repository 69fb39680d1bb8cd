//! Concept trustworthiness score.
//!
//! For every (image, present concept) pair: upsample the concept's
//! localization map to image resolution, center a fixed-size box on the
//! map's maximum (clamped inside the image), and test whether the
//! ground-truth part location falls inside the box. Rates are averaged per
//! concept, then over concepts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ConceptSchema, ImageSample, Rect};
use crate::models::LocalizationMap;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Box side as a fraction of the image side, or absolute pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BoxSpec {
    Fraction { value: f64 },
    Absolute { height: usize, width: usize },
}

/// The benchmark default: a 90-pixel box on 224-pixel images, scaled.
pub const DEFAULT_BOX_FRACTION: f64 = 90.0 / 224.0;

impl Default for BoxSpec {
    fn default() -> Self {
        BoxSpec::Fraction { value: DEFAULT_BOX_FRACTION }
    }
}

impl BoxSpec {
    pub fn resolve(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (bh, bw) = match *self {
            BoxSpec::Fraction { value } => {
                if !(0.0..=1.0).contains(&value) || value <= 0.0 {
                    return Err(Error::Config(format!("box fraction {value} not in (0, 1]")));
                }
                (
                    ((h as f64 * value).round() as usize).max(1),
                    ((w as f64 * value).round() as usize).max(1),
                )
            }
            BoxSpec::Absolute { height, width } => (height, width),
        };
        if bh == 0 || bw == 0 || bh > h || bw > w {
            return Err(Error::Config(format!(
                "box {bh}x{bw} does not fit inside {h}x{w}"
            )));
        }
        Ok((bh, bw))
    }
}

/// Bilinear, corner-aligned upsampling: output pixel `(i, j)` samples the
/// input at `(i * (hl - 1) / (h - 1), j * (wl - 1) / (w - 1))`.
pub fn upsample_map(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("expected [h, w] map, got {shape:?}")));
    }
    let (hl, wl) = (shape[0], shape[1]);
    if h < hl || w < wl {
        return Err(Error::Shape(format!(
            "upsample target {h}x{w} smaller than source {hl}x{wl}"
        )));
    }
    let src = map.data();
    let mut out = Tensor::zeros(&[h, w]);
    let dst = out.data_mut();
    let scale_r = if h > 1 { (hl - 1) as f64 / (h - 1) as f64 } else { 0.0 };
    let scale_c = if w > 1 { (wl - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    for i in 0..h {
        let sr = i as f64 * scale_r;
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(hl - 1);
        let fr = sr - r0 as f64;
        for j in 0..w {
            let sc = j as f64 * scale_c;
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(wl - 1);
            let fc = sc - c0 as f64;
            let top = src[r0 * wl + c0] * (1.0 - fc) + src[r0 * wl + c1] * fc;
            let bot = src[r1 * wl + c0] * (1.0 - fc) + src[r1 * wl + c1] * fc;
            dst[i * w + j] = top * (1.0 - fr) + bot * fr;
        }
    }
    Ok(out)
}

/// Row-major-first argmax of a 2-d map.
pub fn argmax_cell(map: &Tensor) -> (usize, usize) {
    let w = map.shape()[1];
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, &v) in map.data().iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0 / w, best.0 % w)
}

/// Fixed-size box centered on the argmax, translated to stay fully inside
/// the map; ties resolve to the first maximum in row-major order.
pub fn corresponding_region(upsampled: &Tensor, box_hw: (usize, usize)) -> Rect {
    let (h, w) = (upsampled.shape()[0], upsampled.shape()[1]);
    let (bh, bw) = box_hw;
    let (r, c) = argmax_cell(upsampled);
    let top = r.saturating_sub((bh - 1) / 2).min(h - bh);
    let left = c.saturating_sub((bw - 1) / 2).min(w - bw);
    Rect { top, left, height: bh, width: bw }
}

/// Ground-truth containment target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainmentTarget {
    /// The part's annotated center point must lie in the box (closed).
    CenterPoint,
    /// The part's whole annotated rectangle must lie in the box.
    FullRegion,
}

pub fn region_contains_point(outer: &Rect, point: (f64, f64)) -> bool {
    outer.contains_point(point)
}

pub fn region_contains_rect(outer: &Rect, inner: &Rect) -> bool {
    if inner.is_empty() || outer.is_empty() {
        return false;
    }
    region_contains_point(outer, (inner.top as f64, inner.left as f64))
        && region_contains_point(outer, (inner.bottom() as f64, inner.right() as f64))
}

/// Anything that can produce a concept localization map for an image.
/// The trust score drives prototype maps and CAM maps through exactly the
/// same aggregation path.
pub trait ConceptLocalizer: Sync {
    fn localize(&self, sample: &ImageSample, concept_index: usize) -> Result<LocalizationMap>;
    fn name(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: u64,
    pub concept_id: usize,
    pub argmax: (usize, usize),
    pub region: Rect,
    pub contained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTrust {
    pub concept_id: usize,
    pub label: String,
    pub images: usize,
    pub contained: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub per_concept: Vec<ConceptTrust>,
    /// Concepts present in no evaluated image.
    pub excluded_concepts: Vec<usize>,
    /// Mean of per-concept rates.
    pub score: f64,
    pub box_height: usize,
    pub box_width: usize,
    pub localizer: String,
    pub target: ContainmentTarget,
    pub boxes: Vec<BoxRecord>,
}

impl TrustReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,concept_id,argmax_row,argmax_col,top,left,height,width,contained\n");
        for b in &self.boxes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                b.image_id,
                b.concept_id,
                b.argmax.0,
                b.argmax.1,
                b.region.top,
                b.region.left,
                b.region.height,
                b.region.width,
                b.contained as u8
            ));
        }
        out
    }
}

/// Evaluate the concept trustworthiness score over `samples`.
///
/// A concept participates on every image whose label marks it present; its
/// rate is the fraction of those images where the ground truth lies inside
/// the corresponding region. Concepts with no images are excluded from the
/// mean and listed. Parallel over images with a deterministic reduction.
pub fn trust_score(
    localizer: &dyn ConceptLocalizer,
    samples: &[&ImageSample],
    schema: &ConceptSchema,
    box_spec: &BoxSpec,
    target: ContainmentTarget,
) -> Result<TrustReport> {
    let c = schema.num_concepts();
    let per_image: Vec<Result<Vec<BoxRecord>>> = samples
        .par_iter()
        .map(|sample| {
            let (h, w) = (sample.height(), sample.width());
            let (bh, bw) = box_spec.resolve(h, w)?;
            let mut records = Vec::new();
            for ci in 0..c {
                if sample.concept_labels[ci] != 1 {
                    continue;
                }
                let part_id = schema.concepts[ci].part_id;
                let part = sample.part(part_id).ok_or_else(|| {
                    Error::Eval(format!(
                        "image {}: no annotation for part {part_id}",
                        sample.id
                    ))
                })?;
                let map = localizer.localize(sample, ci)?;
                if !map.values.all_finite() {
                    return Err(Error::Eval(format!(
                        "image {}: non-finite localization map for concept {ci}",
                        sample.id
                    )));
                }
                let upsampled = upsample_map(&map.values, h, w)?;
                let region = corresponding_region(&upsampled, (bh, bw));
                let contained = match target {
                    ContainmentTarget::CenterPoint => region_contains_point(&region, part.center),
                    ContainmentTarget::FullRegion => region_contains_rect(&region, &part.region),
                };
                records.push(BoxRecord {
                    image_id: sample.id,
                    concept_id: schema.concepts[ci].id,
                    argmax: argmax_cell(&upsampled),
                    region,
                    contained,
                });
            }
            Ok(records)
        })
        .collect();

    let mut boxes = Vec::new();
    for r in per_image {
        boxes.extend(r?);
    }

    let mut images = vec![0usize; c];
    let mut contained = vec![0usize; c];
    for b in &boxes {
        let ci = schema.concept_index(b.concept_id).expect("known concept");
        images[ci] += 1;
        if b.contained {
            contained[ci] += 1;
        }
    }
    let mut per_concept = Vec::new();
    let mut excluded = Vec::new();
    for ci in 0..c {
        if images[ci] == 0 {
            excluded.push(schema.concepts[ci].id);
            continue;
        }
        per_concept.push(ConceptTrust {
            concept_id: schema.concepts[ci].id,
            label: schema.concepts[ci].label.clone(),
            images: images[ci],
            contained: contained[ci],
            rate: contained[ci] as f64 / images[ci] as f64,
        });
    }
    if per_concept.is_empty() {
        return Err(Error::Eval("no concept has any evaluated image".into()));
    }
    let score = per_concept.iter().map(|t| t.rate).sum::<f64>() / per_concept.len() as f64;
    let (box_height, box_width) = match samples.first() {
        Some(s) => box_spec.resolve(s.height(), s.width())?,
        None => return Err(Error::Eval("empty sample set".into())),
    };
    Ok(TrustReport {
        per_concept,
        excluded_concepts: excluded,
        score,
        box_height,
        box_width,
        localizer: localizer.name(),
        target,
        boxes,
    })
}
