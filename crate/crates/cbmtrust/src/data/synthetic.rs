//! Procedural part-annotated dataset: one glyph per part on a textured
//! background, attribute = fill color, exact bounding rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::schema::{
    ConceptDef, ConceptSchema, Dataset, ImageSample, PartAnnotation, PartDef, Rect, Split,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Number of parts (each rendered as a distinct glyph).
    pub parts: usize,
    /// Colors per part; concepts = parts * attributes_per_part.
    pub attributes_per_part: usize,
    pub num_categories: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    /// Max per-axis placement offset from the part's anchor, in pixels.
    pub jitter: usize,
    /// Glyph half-extent; the ground-truth region is `center ± glyph_half`.
    pub glyph_half: usize,
    /// Amplitude of the grayscale background noise.
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            image_size: 96,
            parts: 4,
            attributes_per_part: 3,
            num_categories: 8,
            train_per_category: 50,
            test_per_category: 25,
            jitter: 6,
            glyph_half: 10,
            background_noise: 0.08,
            seed: 7,
        }
    }
}

const GLYPH_NAMES: [&str; 6] = ["disc", "triangle", "square", "diamond", "cross", "ring"];

fn part_name(i: usize) -> String {
    let base = GLYPH_NAMES[i % GLYPH_NAMES.len()];
    if i < GLYPH_NAMES.len() {
        base.to_string()
    } else {
        format!("{base}{}", i / GLYPH_NAMES.len())
    }
}

/// Saturated color wheel: hue step of `360 / n` degrees.
fn palette(n: usize) -> Vec<(String, [f64; 3])> {
    (0..n)
        .map(|i| {
            let hue = 360.0 * i as f64 / n as f64;
            (format!("hue{:03}", hue.round() as usize), hsv_to_rgb(hue, 0.85, 0.9))
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Quantize to the 8-bit grid used by the PNG manifest so an in-memory
/// dataset equals its own save/load round trip bit for bit.
pub(super) fn quantize_unit(v: f64) -> f64 {
    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    byte as f64 / 255.0
}

pub fn schema_for(spec: &GeneratorSpec) -> ConceptSchema {
    let colors = palette(spec.attributes_per_part);
    let mut concepts = Vec::new();
    for part in 0..spec.parts {
        for (attr, (color_name, _)) in colors.iter().enumerate() {
            concepts.push(ConceptDef {
                id: part * spec.attributes_per_part + attr,
                part_id: part,
                label: format!("{}::{}", part_name(part), color_name),
            });
        }
    }
    ConceptSchema {
        concepts,
        parts: (0..spec.parts)
            .map(|id| PartDef {
                id,
                name: part_name(id),
            })
            .collect(),
    }
}

/// Part anchors on a near-square grid of cells.
fn anchors(spec: &GeneratorSpec) -> Vec<(usize, usize)> {
    let grid = (spec.parts as f64).sqrt().ceil() as usize;
    let cell = spec.image_size / grid;
    (0..spec.parts)
        .map(|i| {
            let gr = i / grid;
            let gc = i % grid;
            (gr * cell + cell / 2, gc * cell + cell / 2)
        })
        .collect()
}

fn check_feasible(spec: &GeneratorSpec) -> Result<()> {
    if spec.parts == 0 || spec.attributes_per_part == 0 || spec.num_categories == 0 {
        return Err(Error::Generation(
            "parts, attributes_per_part and num_categories must be positive".into(),
        ));
    }
    if spec.attributes_per_part > spec.num_categories {
        return Err(Error::Generation(format!(
            "cannot cover {} attributes per part with only {} categories",
            spec.attributes_per_part, spec.num_categories
        )));
    }
    let grid = (spec.parts as f64).sqrt().ceil() as usize;
    let cell = spec.image_size / grid;
    let extent = spec.glyph_half + spec.jitter;
    if cell < 2 * extent + 1 {
        return Err(Error::Generation(format!(
            "parts cannot fit without overlap: grid cell {cell}px must exceed \
             2*(glyph_half + jitter) = {}px",
            2 * extent
        )));
    }
    Ok(())
}

/// Draw one K-combo table (one attribute per part per category), retrying
/// until every (part, attribute) pair occurs in some category.
fn category_table(spec: &GeneratorSpec, rng: &mut ChaCha12Rng) -> Result<Vec<Vec<usize>>> {
    for _ in 0..1000 {
        let mut combos: Vec<Vec<usize>> = Vec::with_capacity(spec.num_categories);
        while combos.len() < spec.num_categories {
            let combo: Vec<usize> = (0..spec.parts)
                .map(|_| rng.gen_range(0..spec.attributes_per_part))
                .collect();
            if !combos.contains(&combo) {
                combos.push(combo);
            }
        }
        let covered = (0..spec.parts).all(|p| {
            (0..spec.attributes_per_part).all(|a| combos.iter().any(|c| c[p] == a))
        });
        if covered {
            return Ok(combos);
        }
    }
    Err(Error::Generation(
        "could not cover every (part, attribute) pair across categories after 1000 draws".into(),
    ))
}

fn glyph_covers(kind: usize, dr: i64, dc: i64, half: i64) -> bool {
    if dr.abs() > half || dc.abs() > half {
        return false;
    }
    match kind % GLYPH_NAMES.len() {
        0 => dr * dr + dc * dc <= half * half,
        1 => 2 * dc.abs() <= dr + half, // upward triangle, apex at top
        2 => true,                      // filled square = its bounding box
        3 => dr.abs() + dc.abs() <= half,
        4 => 3 * dr.abs() <= half || 3 * dc.abs() <= half,
        _ => {
            let d2 = dr * dr + dc * dc;
            d2 <= half * half && 4 * d2 >= half * half
        }
    }
}

fn render_sample(
    spec: &GeneratorSpec,
    id: u64,
    category: usize,
    combo: &[usize],
    split: Split,
    rng: &mut ChaCha12Rng,
) -> ImageSample {
    let s = spec.image_size;
    let colors = palette(spec.attributes_per_part);
    let mut image = Tensor::zeros(&[3, s, s]);

    // grayscale textured background
    let base = rng.gen_range(0.35..0.65);
    {
        let data = image.data_mut();
        for pix in 0..s * s {
            let v = quantize_unit(base + rng.gen_range(-spec.background_noise..=spec.background_noise));
            data[pix] = v;
            data[s * s + pix] = v;
            data[2 * s * s + pix] = v;
        }
    }

    let mut parts = Vec::with_capacity(spec.parts);
    let mut labels = vec![0u8; spec.parts * spec.attributes_per_part];
    let half = spec.glyph_half as i64;
    for (part, (ar, ac)) in anchors(spec).into_iter().enumerate() {
        let jr = if spec.jitter > 0 {
            rng.gen_range(-(spec.jitter as i64)..=spec.jitter as i64)
        } else {
            0
        };
        let jc = if spec.jitter > 0 {
            rng.gen_range(-(spec.jitter as i64)..=spec.jitter as i64)
        } else {
            0
        };
        let (r0, c0) = (ar as i64 + jr, ac as i64 + jc);
        let attr = combo[part];
        let rgb = colors[attr].1;
        {
            let data = image.data_mut();
            for dr in -half..=half {
                for dc in -half..=half {
                    if glyph_covers(part, dr, dc, half) {
                        let (r, c) = ((r0 + dr) as usize, (c0 + dc) as usize);
                        for ch in 0..3 {
                            data[(ch * s + r) * s + c] = quantize_unit(rgb[ch]);
                        }
                    }
                }
            }
        }
        parts.push(PartAnnotation {
            part_id: part,
            center: (r0 as f64, c0 as f64),
            region: Rect {
                top: (r0 - half) as usize,
                left: (c0 - half) as usize,
                height: (2 * half + 1) as usize,
                width: (2 * half + 1) as usize,
            },
            visible: true,
        });
        labels[part * spec.attributes_per_part + attr] = 1;
    }

    ImageSample {
        id,
        image,
        concept_labels: labels,
        category,
        parts,
        split,
    }
}

/// Deterministic function of the spec (seed included). Every sample's part
/// regions are exact glyph bounding rectangles and concept labels follow
/// the rendered attributes.
pub fn generate_synthetic_dataset(spec: &GeneratorSpec) -> Result<Dataset> {
    check_feasible(spec)?;
    let schema = schema_for(spec);
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let combos = category_table(spec, &mut rng)?;

    let mut samples = Vec::new();
    let mut next_id = 0u64;
    for (split, per_cat) in [
        (Split::Train, spec.train_per_category),
        (Split::Test, spec.test_per_category),
    ] {
        for (category, combo) in combos.iter().enumerate() {
            for _ in 0..per_cat {
                samples.push(render_sample(spec, next_id, category, combo, split, &mut rng));
                next_id += 1;
            }
        }
    }

    let dataset = Dataset {
        schema,
        num_categories: spec.num_categories,
        samples,
        generator: Some(spec.clone()),
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec {
            image_size: 64,
            train_per_category: 2,
            test_per_category: 0,
            glyph_half: 8,
            jitter: 4,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn counts_match_spec() {
        let spec = small_spec();
        let ds = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(ds.samples.len(), 16);
        assert_eq!(ds.schema.num_concepts(), 12);
        for s in &ds.samples {
            assert_eq!(s.parts.len(), 4);
            assert_eq!(s.concept_labels.iter().map(|&b| b as usize).sum::<usize>(), 4);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_synthetic_dataset(&spec).unwrap();
        let b = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_samples_is_a_valid_empty_split() {
        let spec = GeneratorSpec {
            train_per_category: 0,
            test_per_category: 0,
            ..small_spec()
        };
        let ds = generate_synthetic_dataset(&spec).unwrap();
        assert!(ds.samples.is_empty());
    }

    #[test]
    fn infeasible_placement_is_an_error() {
        let spec = GeneratorSpec {
            image_size: 40,
            glyph_half: 12,
            jitter: 6,
            ..small_spec()
        };
        let err = generate_synthetic_dataset(&spec).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }

    #[test]
    fn regions_contain_centers_and_stay_inside() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        for s in &ds.samples {
            for p in &s.parts {
                assert!(p.region.contains_point(p.center));
                assert!(p.region.bottom() < s.height());
                assert!(p.region.right() < s.width());
            }
            // part regions are pairwise disjoint
            for (i, a) in s.parts.iter().enumerate() {
                for b in &s.parts[i + 1..] {
                    let overlap_rows =
                        a.region.top <= b.region.bottom() && b.region.top <= a.region.bottom();
                    let overlap_cols =
                        a.region.left <= b.region.right() && b.region.left <= a.region.right();
                    assert!(!(overlap_rows && overlap_cols));
                }
            }
        }
    }

    #[test]
    fn present_concept_part_is_visible() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        for s in &ds.samples {
            for (i, &label) in s.concept_labels.iter().enumerate() {
                if label == 1 {
                    let part_id = ds.schema.concepts[i].part_id;
                    assert!(s.part(part_id).unwrap().visible);
                }
            }
        }
    }

    #[test]
    fn attribute_coverage_across_categories() {
        let ds = generate_synthetic_dataset(&small_spec()).unwrap();
        for concept in 0..ds.schema.num_concepts() {
            assert!(
                ds.samples.iter().any(|s| s.concept_labels[concept] == 1),
                "concept {concept} appears in no sample"
            );
        }
    }
}
