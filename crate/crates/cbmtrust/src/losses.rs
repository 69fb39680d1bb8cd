//! Training objectives: concept and task losses plus the three alignment
//! objectives.
//!
//! Cross-layer alignment (CLA) matches the pairwise-similarity structure of
//! the deep map against a space-to-depth resized shallow map over several
//! window scales, with the shallow side detached. Cross-image alignment
//! (CIA) makes the deep map equivariant to exact grid augmentations of the
//! input, with the original-image branch detached. Prediction alignment
//! (PA) pulls localization centers of same-part concepts together and
//! pushes different-part concepts apart (hinged).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_backbone, BackboneNodes, FeatureExtractorConfig};
use crate::grad::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;

/// How the localization-center weights are formed from a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KcWeighting {
    /// `relu(values) / sum(relu(values))`, uniform when all values <= 0.
    ReluNorm,
    /// Softmax over all map values.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub concept: f64,
    pub task: f64,
    pub cla: f64,
    pub cia: f64,
    pub pa: f64,
    /// Margin delta^2 for the hinged division loss; `None` selects
    /// `(h^2 + w^2) / 4` of the map grid.
    pub div_margin_sq: Option<f64>,
    /// When false the division loss uses the raw (unhinged) form.
    pub div_hinged: bool,
    pub kc_weighting: KcWeighting,
    /// Divide each CLA term by the number of similarity-matrix entries.
    pub cla_mean_normalized: bool,
    /// Divide each group's pull term by its pair count.
    pub grp_pair_normalized: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            concept: 1.0,
            task: 1.0,
            cla: 1.0,
            cia: 1.0,
            pa: 1.0,
            div_margin_sq: None,
            div_hinged: true,
            kc_weighting: KcWeighting::ReluNorm,
            cla_mean_normalized: false,
            grp_pair_normalized: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.concept, self.task, self.cla, self.cia, self.pa];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if let Some(m) = self.div_margin_sq {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::Config("div margin must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn margin_sq_for(&self, h: usize, w: usize) -> f64 {
        self.div_margin_sq
            .unwrap_or(((h * h + w * w) as f64) / 4.0)
    }
}

/// Mean binary cross-entropy of concept probabilities against 0/1 labels.
pub fn concept_loss(g: &mut Graph, concept_probs: NodeId, labels: &[u8]) -> Result<NodeId> {
    let values: Vec<f64> = labels.iter().map(|&b| b as f64).collect();
    g.bce_mean(concept_probs, Arc::new(values), BCE_EPS)
}

/// Softmax cross-entropy of class logits against the category label.
pub fn task_loss(g: &mut Graph, class_logits: NodeId, label: usize) -> Result<NodeId> {
    if label >= g.value(class_logits).len() {
        return Err(Error::Shape(format!(
            "label {label} out of range for {} classes",
            g.value(class_logits).len()
        )));
    }
    let lse = g.logsumexp(class_logits);
    let picked = g.pick(class_logits, label)?;
    g.sub(lse, picked)
}

/// Index map realizing space-to-depth on a `[d, h, w]` tensor: each output
/// cell of the `[d * r * r, h/r, w/r]` result concatenates its `r x r`
/// source block in row-major block order (block position varies first, the
/// source channel within each position second).
pub fn space_to_depth_indices(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "space-to-depth ratio {r} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / r, w / r);
    let dout = d * r * r;
    let mut index = Vec::with_capacity(dout * ho * wo);
    for co in 0..dout {
        let block = co / d; // row-major position inside the r x r block
        let ci = co % d;
        let (br, bc) = (block / r, block % r);
        for y in 0..ho {
            for x in 0..wo {
                index.push((ci * h + y * r + br) * w + x * r + bc);
            }
        }
    }
    Ok((index, vec![dout, ho, wo]))
}

/// Resize a shallow map onto the deep grid by stacking each `r x r` block
/// into channels.
pub fn space_to_depth_match(g: &mut Graph, shallow: NodeId, r: usize) -> Result<NodeId> {
    let (index, out_shape) = space_to_depth_indices(g.value(shallow).shape(), r)?;
    g.gather(shallow, Arc::new(index), &out_shape)
}

/// Value-level space-to-depth for tests and tooling.
pub fn space_to_depth_tensor(t: &Tensor, r: usize) -> Result<Tensor> {
    let (index, out_shape) = space_to_depth_indices(t.shape(), r)?;
    let data = t.data();
    Tensor::from_vec(&out_shape, index.iter().map(|&i| data[i]).collect())
}

/// Index map for multi-scale window enrichment: sliding `e x e` windows with
/// stride 1 over `[d, h, w]`, each output feature the row-major
/// concatenation of the window's `e*e` cell vectors.
pub fn enrich_indices(shape: &[usize], e: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if e == 0 || e > h || e > w {
        return Err(Error::Shape(format!(
            "enrichment window {e} too large for {h}x{w} grid"
        )));
    }
    let (ho, wo) = (h - e + 1, w - e + 1);
    let dout = d * e * e;
    let mut index = Vec::with_capacity(dout * ho * wo);
    for co in 0..dout {
        let window = co / d; // row-major position inside the e x e window
        let ci = co % d;
        let (wr, wc) = (window / e, window % e);
        for y in 0..ho {
            for x in 0..wo {
                index.push((ci * h + y + wr) * w + x + wc);
            }
        }
    }
    Ok((index, vec![dout, ho, wo]))
}

pub fn enrich_multiscale(g: &mut Graph, grid: NodeId, e: usize) -> Result<NodeId> {
    if e == 1 {
        return Ok(grid);
    }
    let (index, out_shape) = enrich_indices(g.value(grid).shape(), e)?;
    g.gather(grid, Arc::new(index), &out_shape)
}

pub fn enrich_multiscale_tensor(t: &Tensor, e: usize) -> Result<Tensor> {
    let (index, out_shape) = enrich_indices(t.shape(), e)?;
    let data = t.data();
    Tensor::from_vec(&out_shape, index.iter().map(|&i| data[i]).collect())
}

/// Transpose `[d, h, w]` cells into `[h*w, d]` rows for pairwise similarity.
fn cells_to_rows(g: &mut Graph, grid: NodeId) -> Result<NodeId> {
    let shape = g.value(grid).shape().to_vec();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let mut index = Vec::with_capacity(hw * d);
    for cell in 0..hw {
        for c in 0..d {
            index.push(c * hw + cell);
        }
    }
    g.gather(grid, Arc::new(index), &[hw, d])
}

/// Pairwise cosine similarities of row vectors.
pub fn pairwise_similarity(g: &mut Graph, rows: NodeId) -> Result<NodeId> {
    g.pairwise_cosine(rows)
}

pub fn pairwise_similarity_tensor(rows: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let r = g.constant(rows.clone());
    let phi = g.pairwise_cosine(r)?;
    Ok(g.value(phi).clone())
}

/// Cross-layer alignment over `E` window scales. The shallow branch is
/// detached: no gradient flows into `shallow`.
pub fn cla_loss(
    g: &mut Graph,
    deep: NodeId,
    shallow: NodeId,
    levels: usize,
    mean_normalized: bool,
) -> Result<NodeId> {
    if levels == 0 {
        return Err(Error::Config("cla levels must be >= 1".into()));
    }
    let dshape = g.value(deep).shape().to_vec();
    let sshape = g.value(shallow).shape().to_vec();
    if dshape.len() != 3 || sshape.len() != 3 {
        return Err(Error::Shape("cla expects [d, h, w] grids".into()));
    }
    if sshape[1] % dshape[1] != 0 || sshape[2] % dshape[2] != 0 {
        return Err(Error::Shape(format!(
            "shallow {}x{} not an integer multiple of deep {}x{}",
            sshape[1], sshape[2], dshape[1], dshape[2]
        )));
    }
    let r = sshape[1] / dshape[1];
    if sshape[2] / dshape[2] != r {
        return Err(Error::Shape("anisotropic shallow/deep ratio".into()));
    }
    let detached = g.detach(shallow);
    let matched = if r == 1 { detached } else { space_to_depth_match(g, detached, r)? };

    let mut acc: Option<NodeId> = None;
    for e in 1..=levels {
        let de = enrich_multiscale(g, deep, e)?;
        let se = enrich_multiscale(g, matched, e)?;
        let drows = cells_to_rows(g, de)?;
        let srows = cells_to_rows(g, se)?;
        let phi_d = g.pairwise_cosine(drows)?;
        let phi_s = g.pairwise_cosine(srows)?;
        let diff = g.sub(phi_d, phi_s)?;
        let sq = g.mul(diff, diff)?;
        let mut term = g.sum(sq);
        if mean_normalized {
            let n = g.value(phi_d).len() as f64;
            term = g.scale(term, 1.0 / n);
        }
        acc = Some(match acc {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(g.scale(acc.unwrap(), 1.0 / levels as f64))
}

/// Grid-exact spatial augmentations: their action on any `h x w` grid is a
/// pure permutation of cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationTransform {
    Identity,
    HorizontalFlip,
    VerticalFlip,
    /// Clockwise rotation by `quarter_turns * 90` degrees (1..=3).
    Rotate90 { quarter_turns: u8 },
}

impl AugmentationTransform {
    /// The draw set used during training (identity excluded).
    pub const TRAINING_SET: [AugmentationTransform; 5] = [
        AugmentationTransform::HorizontalFlip,
        AugmentationTransform::VerticalFlip,
        AugmentationTransform::Rotate90 { quarter_turns: 1 },
        AugmentationTransform::Rotate90 { quarter_turns: 2 },
        AugmentationTransform::Rotate90 { quarter_turns: 3 },
    ];

    pub fn validate(&self) -> Result<()> {
        if let AugmentationTransform::Rotate90 { quarter_turns } = self {
            if !(1..=3).contains(quarter_turns) {
                return Err(Error::Config("quarter_turns must be 1..=3".into()));
            }
        }
        Ok(())
    }

    /// Output grid shape for an `(h, w)` input.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match self {
            AugmentationTransform::Rotate90 { quarter_turns } if quarter_turns % 2 == 1 => (w, h),
            _ => (h, w),
        }
    }

    /// Source cell (row, col) for each output cell of a clockwise-oriented
    /// transform.
    fn source_cell(&self, h: usize, w: usize, or: usize, oc: usize) -> (usize, usize) {
        match self {
            AugmentationTransform::Identity => (or, oc),
            AugmentationTransform::HorizontalFlip => (or, w - 1 - oc),
            AugmentationTransform::VerticalFlip => (h - 1 - or, oc),
            AugmentationTransform::Rotate90 { quarter_turns: 1 } => (h - 1 - oc, or),
            AugmentationTransform::Rotate90 { quarter_turns: 2 } => (h - 1 - or, w - 1 - oc),
            AugmentationTransform::Rotate90 { quarter_turns: 3 } => (oc, w - 1 - or),
            AugmentationTransform::Rotate90 { .. } => (or, oc),
        }
    }

    /// Index map applying the transform per channel of a `[c, h, w]` tensor.
    pub fn chw_indices(&self, shape: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = self.out_hw(h, w);
        let mut index = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for or in 0..ho {
                for oc in 0..wo {
                    let (sr, sc) = self.source_cell(h, w, or, oc);
                    index.push((ch * h + sr) * w + sc);
                }
            }
        }
        Ok((index, vec![c, ho, wo]))
    }

    pub fn apply_chw(&self, t: &Tensor) -> Result<Tensor> {
        let (index, out_shape) = self.chw_indices(t.shape())?;
        let data = t.data();
        Tensor::from_vec(&out_shape, index.iter().map(|&i| data[i]).collect())
    }
}

/// Core cross-image alignment: `|| deep_aug - Detach(Aug(deep_orig)) ||^2`.
/// No gradient flows into `deep_orig`.
pub fn cia_core(
    g: &mut Graph,
    deep_aug: NodeId,
    deep_orig: NodeId,
    aug: AugmentationTransform,
) -> Result<NodeId> {
    let (index, out_shape) = aug.chw_indices(g.value(deep_orig).shape())?;
    let permuted = g.gather(deep_orig, Arc::new(index), &out_shape)?;
    let target = g.detach(permuted);
    if g.value(deep_aug).shape() != g.value(target).shape() {
        return Err(Error::Shape(format!(
            "augmented deep map {:?} vs permuted original {:?}",
            g.value(deep_aug).shape(),
            g.value(target).shape()
        )));
    }
    let diff = g.sub(deep_aug, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum(sq))
}

/// Cross-image alignment through the real feature extractor: runs the
/// backbone on both the original and the augmented image with shared
/// parameter nodes and freezes the original branch.
pub fn cia_loss(
    g: &mut Graph,
    config: &FeatureExtractorConfig,
    nodes: &BackboneNodes,
    image: &Tensor,
    aug: AugmentationTransform,
) -> Result<NodeId> {
    let orig = g.constant(image.clone());
    let (_, deep_orig) = forward_backbone(g, config, nodes, orig)?;
    let augmented = g.constant(aug.apply_chw(image)?);
    let (_, deep_aug) = forward_backbone(g, config, nodes, augmented)?;
    cia_core(g, deep_aug, deep_orig, aug)
}

/// Weighted-average coordinates of a localization map. Returns `(row, col)`
/// scalar nodes; differentiable wherever the positive mass is nonzero.
pub fn localization_center(
    g: &mut Graph,
    map: NodeId,
    weighting: KcWeighting,
) -> Result<(NodeId, NodeId)> {
    let shape = g.value(map).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("localization map must be [h, w], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let rows = Tensor::from_vec(
        &[h, w],
        (0..h * w).map(|i| (i / w) as f64).collect(),
    )?;
    let cols = Tensor::from_vec(
        &[h, w],
        (0..h * w).map(|i| (i % w) as f64).collect(),
    )?;
    let weights = match weighting {
        KcWeighting::ReluNorm => {
            let r = g.relu(map);
            let total = g.sum(r);
            if g.value(total).item() == 0.0 {
                // all values <= 0: uniform weights (constant, zero gradient)
                let uniform = Tensor::filled(&[h, w], 1.0 / (h * w) as f64);
                g.constant(uniform)
            } else {
                g.div_by_scalar(r, total)?
            }
        }
        KcWeighting::Softmax => g.softmax_all(map),
    };
    let rc = g.constant(rows);
    let cc = g.constant(cols);
    let wr = g.mul(weights, rc)?;
    let wc = g.mul(weights, cc)?;
    Ok((g.sum(wr), g.sum(wc)))
}

/// Squared distance between two centers.
fn center_dist_sq(
    g: &mut Graph,
    a: (NodeId, NodeId),
    b: (NodeId, NodeId),
) -> Result<NodeId> {
    let dr = g.sub(a.0, b.0)?;
    let dc = g.sub(a.1, b.1)?;
    let dr2 = g.mul(dr, dr)?;
    let dc2 = g.mul(dc, dc)?;
    g.add(dr2, dc2)
}

/// Prediction alignment: grouping pull plus hinged division push.
///
/// `concept_maps` holds `(concept_id, map node)` for the concepts present in
/// the image; `groups` partitions concept ids (all T groups of the schema).
pub fn pa_loss(
    g: &mut Graph,
    concept_maps: &[(usize, NodeId)],
    groups: &[Vec<usize>],
    weights: &LossWeights,
) -> Result<NodeId> {
    let t = groups.len();
    if t == 0 {
        return Err(Error::Config("pa_loss needs at least one group".into()));
    }
    for &(cid, _) in concept_maps {
        let owners = groups.iter().filter(|g| g.contains(&cid)).count();
        if owners != 1 {
            return Err(Error::Config(format!(
                "concept {cid} appears in {owners} groups (must be exactly one)"
            )));
        }
    }

    let mut centers: Vec<(usize, (NodeId, NodeId))> = Vec::with_capacity(concept_maps.len());
    let mut grid_hw = (0usize, 0usize);
    for &(cid, map) in concept_maps {
        let shape = g.value(map).shape();
        grid_hw = (shape[0], shape[1]);
        centers.push((cid, localization_center(g, map, weights.kc_weighting)?));
    }
    let margin_sq = weights.margin_sq_for(grid_hw.0, grid_hw.1);

    let per_group: Vec<Vec<(NodeId, NodeId)>> = groups
        .iter()
        .map(|group| {
            centers
                .iter()
                .filter(|(cid, _)| group.contains(cid))
                .map(|&(_, c)| c)
                .collect()
        })
        .collect();

    let zero = g.constant(Tensor::scalar(0.0));

    // grouping loss: ordered within-group pairs
    let mut grp = zero;
    for members in &per_group {
        let mut group_sum: Option<NodeId> = None;
        let mut pairs = 0usize;
        for (i, &a) in members.iter().enumerate() {
            for (j, &b) in members.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = center_dist_sq(g, a, b)?;
                pairs += 1;
                group_sum = Some(match group_sum {
                    None => d2,
                    Some(acc) => g.add(acc, d2)?,
                });
            }
        }
        if let Some(sum) = group_sum {
            let sum = if weights.grp_pair_normalized {
                g.scale(sum, 1.0 / pairs as f64)
            } else {
                sum
            };
            grp = g.add(grp, sum)?;
        }
    }
    let grp = g.scale(grp, 1.0 / t as f64);

    // division loss: ordered cross-group pairs, each distance hinged at the
    // margin so the push incentive saturates
    let mut div = g.constant(Tensor::scalar(0.0));
    for (i, members_i) in per_group.iter().enumerate() {
        for (j, members_j) in per_group.iter().enumerate() {
            if i == j {
                continue;
            }
            for &a in members_i {
                for &b in members_j {
                    let d2 = center_dist_sq(g, a, b)?;
                    let d2 = if weights.div_hinged {
                        g.min_const(d2, margin_sq)
                    } else {
                        d2
                    };
                    div = g.add(div, d2)?;
                }
            }
        }
    }
    let div = g.scale(div, -1.0 / (t * t) as f64);

    g.add(grp, div)
}

/// Scalar loss component nodes; absent components contribute nothing.
#[derive(Clone, Copy, Default)]
pub struct LossTerms {
    pub concept: Option<NodeId>,
    pub task: Option<NodeId>,
    pub cla: Option<NodeId>,
    pub cia: Option<NodeId>,
    pub pa: Option<NodeId>,
}

/// Weighted sum of the present components. Errors when any present
/// component is non-finite, naming it.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, weights: &LossWeights) -> Result<NodeId> {
    weights.validate()?;
    let named = [
        ("concept", terms.concept, weights.concept),
        ("task", terms.task, weights.task),
        ("cla", terms.cla, weights.cla),
        ("cia", terms.cia, weights.cia),
        ("pa", terms.pa, weights.pa),
    ];
    let mut acc = g.constant(Tensor::scalar(0.0));
    for (name, term, weight) in named {
        if let Some(node) = term {
            let v = g.value(node);
            if v.len() != 1 || !v.all_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
            let scaled = g.scale(node, weight);
            acc = g.add(acc, scaled)?;
        }
    }
    Ok(acc)
}
