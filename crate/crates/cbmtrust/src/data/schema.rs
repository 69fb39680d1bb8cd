//! Core dataset types: concept schema, part annotations, samples, splits.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

use super::GeneratorSpec;

/// One concept: an attribute tied to exactly one object part.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptDef {
    pub id: usize,
    pub part_id: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartDef {
    pub id: usize,
    pub name: String,
}

/// Ordered concepts and parts. Concepts are kept sorted by id, so a
/// concept's position in `concepts` is its index everywhere else in the
/// crate (label vectors, predictor rows).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSchema {
    pub concepts: Vec<ConceptDef>,
    pub parts: Vec<PartDef>,
}

impl ConceptSchema {
    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut last_id = None;
        for c in &self.concepts {
            if let Some(prev) = last_id {
                if c.id <= prev {
                    return Err(Error::Config(format!(
                        "schema concepts must have strictly ascending ids (saw {prev} then {})",
                        c.id
                    )));
                }
            }
            last_id = Some(c.id);
            if !self.parts.iter().any(|p| p.id == c.part_id) {
                return Err(Error::Config(format!(
                    "concept {} references unknown part {}",
                    c.id, c.part_id
                )));
            }
        }
        let mut part_ids: Vec<usize> = self.parts.iter().map(|p| p.id).collect();
        part_ids.sort_unstable();
        part_ids.dedup();
        if part_ids.len() != self.parts.len() {
            return Err(Error::Config("duplicate part ids in schema".into()));
        }
        Ok(())
    }

    /// Index of a concept id within `concepts`.
    pub fn concept_index(&self, concept_id: usize) -> Option<usize> {
        self.concepts.iter().position(|c| c.id == concept_id)
    }

    /// Concept groups as indices into `concepts` (same ordering rule as
    /// [`concept_part_groups`]).
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        concept_part_groups(self)
            .into_iter()
            .map(|group| {
                group
                    .into_iter()
                    .map(|id| self.concept_index(id).expect("group id in schema"))
                    .collect()
            })
            .collect()
    }

    /// Stable content hash used to guard checkpoints against schema drift.
    pub fn hash_hex(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        format!("{:016x}", fnv1a64(&bytes))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1_0000_01b3);
    }
    hash
}

/// Partition concept ids by owning part: groups ordered by ascending
/// part id, concept ids ascending within each group. Parts with no
/// concepts contribute no group.
pub fn concept_part_groups(schema: &ConceptSchema) -> Vec<Vec<usize>> {
    let mut part_ids: Vec<usize> = schema
        .concepts
        .iter()
        .map(|c| c.part_id)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    part_ids.sort_unstable();
    part_ids
        .into_iter()
        .map(|pid| {
            let mut ids: Vec<usize> = schema
                .concepts
                .iter()
                .filter(|c| c.part_id == pid)
                .map(|c| c.id)
                .collect();
            ids.sort_unstable();
            ids
        })
        .collect()
}

/// Closed integer pixel rectangle `[top, top + height - 1] x [left, left +
/// width - 1]`. A zero height or width denotes an empty rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height.saturating_sub(1)
    }

    pub fn right(&self) -> usize {
        self.left + self.width.saturating_sub(1)
    }

    pub fn contains_point(&self, point: (f64, f64)) -> bool {
        !self.is_empty()
            && point.0 >= self.top as f64
            && point.0 <= self.bottom() as f64
            && point.1 >= self.left as f64
            && point.1 <= self.right() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub part_id: usize,
    /// `(row, col)` in image pixels.
    pub center: (f64, f64),
    pub region: Rect,
    pub visible: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: u64,
    /// `[3, h, w]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Length-C 0/1 vector aligned with the schema's concept order.
    pub concept_labels: Vec<u8>,
    pub category: usize,
    pub parts: Vec<PartAnnotation>,
    pub split: Split,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn part(&self, part_id: usize) -> Option<&PartAnnotation> {
        self.parts.iter().find(|p| p.part_id == part_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: ConceptSchema,
    pub num_categories: usize,
    pub samples: Vec<ImageSample>,
    /// Echo of the generator spec for synthetic datasets.
    pub generator: Option<GeneratorSpec>,
}

impl Dataset {
    pub fn train(&self) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&ImageSample> {
        self.samples.iter().filter(|s| s.split == Split::Test).collect()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.height(), s.width()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        let c = self.schema.num_concepts();
        let size = self.image_size();
        for s in &self.samples {
            if s.concept_labels.len() != c {
                return Err(Error::Config(format!(
                    "sample {} has {} concept labels, schema has {c}",
                    s.id,
                    s.concept_labels.len()
                )));
            }
            if s.category >= self.num_categories {
                return Err(Error::Config(format!(
                    "sample {} category {} out of range",
                    s.id, s.category
                )));
            }
            if Some((s.height(), s.width())) != size {
                return Err(Error::Config("samples disagree on image size".into()));
            }
            if s.image.shape()[0] != 3 {
                return Err(Error::Config("images must have 3 channels".into()));
            }
            for (i, &label) in s.concept_labels.iter().enumerate() {
                if label > 1 {
                    return Err(Error::Config(format!(
                        "sample {} concept {i} label must be 0/1",
                        s.id
                    )));
                }
                if label == 1 {
                    let part_id = self.schema.concepts[i].part_id;
                    match s.part(part_id) {
                        Some(p) if p.visible => {}
                        _ => {
                            return Err(Error::Config(format!(
                                "sample {}: concept {i} present but part {part_id} not visible",
                                s.id
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_from(pairs: &[(usize, usize)]) -> ConceptSchema {
        ConceptSchema {
            concepts: pairs
                .iter()
                .map(|&(id, part_id)| ConceptDef {
                    id,
                    part_id,
                    label: format!("c{id}"),
                })
                .collect(),
            parts: {
                let mut ids: Vec<usize> = pairs.iter().map(|&(_, p)| p).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.into_iter()
                    .map(|id| PartDef {
                        id,
                        name: format!("part{id}"),
                    })
                    .collect()
            },
        }
    }

    #[test]
    fn groups_partition_by_part() {
        // c1, c2 on "head" (part 0); c3 on "wing" (part 1)
        let schema = schema_from(&[(1, 0), (2, 0), (3, 1)]);
        let groups = concept_part_groups(&schema);
        assert_eq!(groups, vec![vec![1, 2], vec![3]]);
    }

    #[test]
    fn single_part_gives_one_group() {
        let schema = schema_from(&[(0, 5), (1, 5), (2, 5)]);
        assert_eq!(concept_part_groups(&schema), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn cub_style_schema_gives_ten_groups() {
        // ten parts, a few attributes each, ids interleaved like CUB's
        let pairs: Vec<(usize, usize)> = (0..30).map(|i| (i * 3 + 1, i % 10)).collect();
        let schema = schema_from(&pairs);
        assert_eq!(concept_part_groups(&schema).len(), 10);
    }

    #[test]
    fn schema_hash_changes_with_content() {
        let a = schema_from(&[(0, 0)]);
        let b = schema_from(&[(0, 1), (1, 1)]);
        assert_ne!(a.hash_hex(), b.hash_hex());
        assert_eq!(a.hash_hex(), a.hash_hex());
    }

    #[test]
    fn rect_containment_is_closed() {
        let r = Rect {
            top: 0,
            left: 0,
            height: 10,
            width: 10,
        };
        assert!(r.contains_point((0.0, 9.0)));
        assert!(r.contains_point((5.0, 5.0)));
        assert!(!r.contains_point((9.5, 10.2)));
    }
}
