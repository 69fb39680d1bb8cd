//! CBM heads.
//!
//! The vanilla head average-pools the deep map, predicts concept
//! probabilities with a linear layer + sigmoid, and predicts the category
//! from the probabilities. The prototype head replaces pooling with
//! per-prototype similarity maps whose spatial maxima are the prototype
//! activations; concepts are predicted from those activations and localized
//! by averaging the maps of their top-N prototypes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward_backbone, insert_backbone, BackboneParams};
use crate::grad::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use crate::grad::SimilarityKind;

/// Prototype bank plus the concept and category predictors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// `[m, d]`, unit-norm rows at init.
    pub prototypes: Tensor,
    /// `[c, m]`
    pub concept_w: Tensor,
    /// `[c]`
    pub concept_b: Tensor,
    /// `[k, c]`
    pub class_w: Tensor,
    /// `[k]`
    pub class_b: Tensor,
    pub similarity: SimilarityKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VanillaHead {
    /// `[c, d]`
    pub concept_w: Tensor,
    pub concept_b: Tensor,
    /// `[k, c]`
    pub class_w: Tensor,
    pub class_b: Tensor,
}

/// Class-only head for the non-interpretable baseline row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHead {
    /// `[k, d]`
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Baseline(ClassHead),
    Vanilla(VanillaHead),
    Proto(PrototypeBank),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: BackboneParams,
    pub head: Head,
}

fn fanin_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::from_vec(
        &[rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .unwrap()
}

impl PrototypeBank {
    /// Unit-norm random prototypes, fan-in scaled predictors, zero biases.
    pub fn init(m: usize, d: usize, c: usize, k: usize, similarity: SimilarityKind, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 || c == 0 || k == 0 {
            return Err(Error::Config("prototype bank dimensions must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut protos = vec![0.0; m * d];
        for row in protos.chunks_mut(d) {
            loop {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    for v in row.iter_mut() {
                        *v /= norm;
                    }
                    break;
                }
            }
        }
        Ok(PrototypeBank {
            prototypes: Tensor::from_vec(&[m, d], protos)?,
            concept_w: fanin_matrix(&mut rng, c, m),
            concept_b: Tensor::zeros(&[c]),
            class_w: fanin_matrix(&mut rng, k, c),
            class_b: Tensor::zeros(&[k]),
            similarity,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn num_concepts(&self) -> usize {
        self.concept_w.shape()[0]
    }

    /// Row of the concept predictor for one concept.
    pub fn concept_row(&self, concept: usize) -> &[f64] {
        let m = self.num_prototypes();
        &self.concept_w.data()[concept * m..(concept + 1) * m]
    }
}

impl VanillaHead {
    pub fn init(d: usize, c: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || c == 0 || k == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(VanillaHead {
            concept_w: fanin_matrix(&mut rng, c, d),
            concept_b: Tensor::zeros(&[c]),
            class_w: fanin_matrix(&mut rng, k, c),
            class_b: Tensor::zeros(&[k]),
        })
    }
}

impl ClassHead {
    pub fn init(d: usize, k: usize, seed: u64) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok(ClassHead {
            w: fanin_matrix(&mut rng, k, d),
            b: Tensor::zeros(&[k]),
        })
    }
}

impl Head {
    pub fn num_concepts(&self) -> Option<usize> {
        match self {
            Head::Baseline(_) => None,
            Head::Vanilla(h) => Some(h.concept_w.shape()[0]),
            Head::Proto(b) => Some(b.num_concepts()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Head::Baseline(h) => h.w.shape()[1],
            Head::Vanilla(h) => h.concept_w.shape()[1],
            Head::Proto(b) => b.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Head::Baseline(_) => "baseline",
            Head::Vanilla(_) => "vanilla",
            Head::Proto(_) => "proto",
        }
    }
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.backbone.config.validate()?;
        if self.head.feature_dim() != self.backbone.config.deep_dim() {
            return Err(Error::Config(format!(
                "head feature dim {} != backbone deep dim {}",
                self.head.feature_dim(),
                self.backbone.config.deep_dim()
            )));
        }
        Ok(())
    }
}

/// Head parameter leaves, in a fixed documented order.
pub enum HeadNodes {
    Baseline { w: NodeId, b: NodeId },
    Vanilla { cw: NodeId, cb: NodeId, kw: NodeId, kb: NodeId },
    Proto { protos: NodeId, cw: NodeId, cb: NodeId, kw: NodeId, kb: NodeId },
}

impl HeadNodes {
    pub fn param_ids(&self) -> Vec<NodeId> {
        match self {
            HeadNodes::Baseline { w, b } => vec![*w, *b],
            HeadNodes::Vanilla { cw, cb, kw, kb } => vec![*cw, *cb, *kw, *kb],
            HeadNodes::Proto { protos, cw, cb, kw, kb } => vec![*protos, *cw, *cb, *kw, *kb],
        }
    }
}

pub fn insert_head(g: &mut Graph, head: &Head, trainable: bool) -> HeadNodes {
    let mut leaf = |t: &Tensor| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    match head {
        Head::Baseline(h) => {
            let w = leaf(&h.w);
            let b = leaf(&h.b);
            HeadNodes::Baseline { w, b }
        }
        Head::Vanilla(h) => {
            let cw = leaf(&h.concept_w);
            let cb = leaf(&h.concept_b);
            let kw = leaf(&h.class_w);
            let kb = leaf(&h.class_b);
            HeadNodes::Vanilla { cw, cb, kw, kb }
        }
        Head::Proto(bank) => {
            let protos = leaf(&bank.prototypes);
            let cw = leaf(&bank.concept_w);
            let cb = leaf(&bank.concept_b);
            let kw = leaf(&bank.class_w);
            let kb = leaf(&bank.class_b);
            HeadNodes::Proto { protos, cw, cb, kw, kb }
        }
    }
}

/// Outputs of a head forward pass (nodes on the graph).
pub struct HeadOut {
    /// Pre-sigmoid concept logits (`None` for the baseline head).
    pub concept_logits: Option<NodeId>,
    /// Concept probabilities in (0, 1).
    pub concept_probs: Option<NodeId>,
    pub class_logits: NodeId,
    /// `[m, h, w]` similarity maps (prototype head only).
    pub maps: Option<NodeId>,
    /// `[m]` prototype activations (prototype head only).
    pub activations: Option<NodeId>,
}

fn linear(g: &mut Graph, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
    let wx = g.matvec(w, x)?;
    g.add(wx, b)
}

/// Average pool -> concept predictor -> category predictor.
pub fn forward_vanilla_head(g: &mut Graph, nodes: &HeadNodes, deep: NodeId) -> Result<HeadOut> {
    let HeadNodes::Vanilla { cw, cb, kw, kb } = nodes else {
        return Err(Error::Config("vanilla forward needs a vanilla head".into()));
    };
    let pooled = g.mean_spatial(deep)?;
    let concept_logits = linear(g, *cw, *cb, pooled)?;
    let concept_probs = g.sigmoid(concept_logits);
    let class_logits = linear(g, *kw, *kb, concept_probs)?;
    Ok(HeadOut {
        concept_logits: Some(concept_logits),
        concept_probs: Some(concept_probs),
        class_logits,
        maps: None,
        activations: None,
    })
}

/// Similarity maps -> max activations -> concept predictor -> category
/// predictor.
pub fn forward_proto_head(
    g: &mut Graph,
    nodes: &HeadNodes,
    deep: NodeId,
    similarity: SimilarityKind,
) -> Result<HeadOut> {
    let HeadNodes::Proto { protos, cw, cb, kw, kb } = nodes else {
        return Err(Error::Config("proto forward needs a prototype head".into()));
    };
    let maps = g.similarity_maps(deep, *protos, similarity)?;
    let activations = g.max_spatial(maps)?;
    let concept_logits = linear(g, *cw, *cb, activations)?;
    let concept_probs = g.sigmoid(concept_logits);
    let class_logits = linear(g, *kw, *kb, concept_probs)?;
    Ok(HeadOut {
        concept_logits: Some(concept_logits),
        concept_probs: Some(concept_probs),
        class_logits,
        maps: Some(maps),
        activations: Some(activations),
    })
}

pub fn forward_baseline_head(g: &mut Graph, nodes: &HeadNodes, deep: NodeId) -> Result<HeadOut> {
    let HeadNodes::Baseline { w, b } = nodes else {
        return Err(Error::Config("baseline forward needs a baseline head".into()));
    };
    let pooled = g.mean_spatial(deep)?;
    let class_logits = linear(g, *w, *b, pooled)?;
    Ok(HeadOut {
        concept_logits: None,
        concept_probs: None,
        class_logits,
        maps: None,
        activations: None,
    })
}

pub fn forward_head(g: &mut Graph, head: &Head, nodes: &HeadNodes, deep: NodeId) -> Result<HeadOut> {
    match head {
        Head::Baseline(_) => forward_baseline_head(g, nodes, deep),
        Head::Vanilla(_) => forward_vanilla_head(g, nodes, deep),
        Head::Proto(bank) => forward_proto_head(g, nodes, deep, bank.similarity),
    }
}

/// Value-level model outputs for one image.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    pub concept_probs: Option<Vec<f64>>,
    pub class_logits: Vec<f64>,
    /// `[m, h, w]` similarity maps for the prototype head.
    pub maps: Option<Tensor>,
    pub activations: Option<Vec<f64>>,
}

/// Run the full model on one `[3, h, w]` image without tracking gradients.
pub fn forward_model(model: &Model, image: &Tensor) -> Result<ForwardOut> {
    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let bb = insert_backbone(&mut g, &model.backbone, false);
    let (_, deep) = forward_backbone(&mut g, &model.backbone.config, &bb, img)?;
    let head_nodes = insert_head(&mut g, &model.head, false);
    let out = forward_head(&mut g, &model.head, &head_nodes, deep)?;
    Ok(ForwardOut {
        concept_probs: out.concept_probs.map(|id| g.value(id).data().to_vec()),
        class_logits: g.value(out.class_logits).data().to_vec(),
        maps: out.maps.map(|id| g.value(id).clone()),
        activations: out.activations.map(|id| g.value(id).data().to_vec()),
    })
}

/// Vanilla CBM forward: `(concept_probs, class_logits)`.
pub fn vanilla_forward(
    backbone: &BackboneParams,
    head: &VanillaHead,
    image: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let model = Model {
        backbone: backbone.clone(),
        head: Head::Vanilla(head.clone()),
    };
    let out = forward_model(&model, image)?;
    Ok((out.concept_probs.unwrap(), out.class_logits))
}

/// Prototype CBM forward: probabilities, logits, maps and activations.
pub fn proto_forward(
    backbone: &BackboneParams,
    bank: &PrototypeBank,
    image: &Tensor,
) -> Result<ForwardOut> {
    let model = Model {
        backbone: backbone.clone(),
        head: Head::Proto(bank.clone()),
    };
    forward_model(&model, image)
}

/// Similarity maps of every prototype against every cell of a deep map.
pub fn prototype_similarity_maps(deep: &Tensor, bank: &PrototypeBank) -> Result<Tensor> {
    let mut g = Graph::new();
    let d = g.constant(deep.clone());
    let p = g.constant(bank.prototypes.clone());
    let maps = g.similarity_maps(d, p, bank.similarity)?;
    Ok(g.value(maps).clone())
}

/// Activation of each prototype: the maximum of its map.
pub fn prototype_activations(maps: &Tensor) -> Result<Vec<f64>> {
    let shape = maps.shape();
    if shape.len() != 3 || shape[1] * shape[2] == 0 {
        return Err(Error::Shape(format!("expected non-empty [m, h, w] maps, got {shape:?}")));
    }
    let hw = shape[1] * shape[2];
    Ok((0..shape[0])
        .map(|m| {
            maps.data()[m * hw..(m + 1) * hw]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Indices of the `n` largest weights, descending by weight, ties broken by
/// ascending index. Emits a one-time warning when a selected weight is not
/// positive.
pub fn top_n_prototypes(concept_row: &[f64], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > concept_row.len() {
        return Err(Error::Config(format!(
            "top-n {n} out of range for {} prototypes",
            concept_row.len()
        )));
    }
    let mut order: Vec<usize> = (0..concept_row.len()).collect();
    order.sort_by(|&a, &b| {
        concept_row[b]
            .partial_cmp(&concept_row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(n);
    if order.iter().any(|&i| concept_row[i] <= 0.0) {
        warn_nonpositive_selection();
    }
    Ok(order)
}

fn warn_nonpositive_selection() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        eprintln!(
            "warning: top-n prototype selection includes non-positive weights \
             (fewer positively contributing prototypes than requested)"
        );
    });
}

/// Eq-style concept localization: elementwise mean of the top-N prototype
/// maps for the concept.
pub fn concept_localization_map(maps: &Tensor, concept_row: &[f64], n: usize) -> Result<Tensor> {
    let shape = maps.shape();
    if shape.len() != 3 || shape[0] != concept_row.len() {
        return Err(Error::Shape(format!(
            "maps {shape:?} vs concept row of {}",
            concept_row.len()
        )));
    }
    let selected = top_n_prototypes(concept_row, n)?;
    let mut g = Graph::new();
    let m = g.constant(maps.clone());
    let avg = g.mean_rows(m, Arc::new(selected))?;
    Ok(g.value(avg).clone())
}

/// Graph-level variant used by the prediction-alignment loss: the top-N
/// selection is made from the current weights and treated as constant.
pub fn concept_localization_node(
    g: &mut Graph,
    maps: NodeId,
    concept_row: &[f64],
    n: usize,
) -> Result<NodeId> {
    let selected = top_n_prototypes(concept_row, n)?;
    g.mean_rows(maps, Arc::new(selected))
}

/// A spatial importance map for a prototype or a concept on one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMap {
    /// `[h, w]` grid, deep-feature-map resolution for model-native maps.
    pub values: Tensor,
    pub subject: MapSubject,
    pub image_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSubject {
    Prototype(usize),
    Concept(usize),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, FeatureExtractorConfig};
    use rand::Rng;

    fn small_backbone() -> BackboneParams {
        init_params(&FeatureExtractorConfig {
            stage_widths: vec![4, 6, 5],
            init_seed: 11,
            ..FeatureExtractorConfig::default()
        })
        .unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        Tensor::from_vec(
            shape,
            (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn vanilla_pool_of_constant_map_is_exact() {
        let mut g = Graph::new();
        let mut map = Tensor::zeros(&[3, 2, 2]);
        for c in 0..3 {
            for cell in 0..4 {
                map.data_mut()[c * 4 + cell] = (c as f64) * 0.5 - 0.3;
            }
        }
        let m = g.constant(map);
        let pooled = g.mean_spatial(m).unwrap();
        assert_eq!(g.value(pooled).data(), &[-0.3, 0.2, 0.7]);
    }

    #[test]
    fn zero_weights_give_half_probabilities() {
        let backbone = small_backbone();
        let head = VanillaHead {
            concept_w: Tensor::zeros(&[4, 5]),
            concept_b: Tensor::zeros(&[4]),
            class_w: Tensor::zeros(&[3, 4]),
            class_b: Tensor::zeros(&[3]),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let img = rand_tensor(&mut rng, &[3, 16, 16]);
        let (probs, logits) = vanilla_forward(&backbone, &head, &img).unwrap();
        assert!(probs.iter().all(|&p| p == 0.5));
        // class head consumes probabilities: 0-weights give 0 logits
        assert!(logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn vanilla_forward_matches_straight_line_oracle() {
        let backbone = small_backbone();
        let head = VanillaHead::init(5, 4, 3, 21).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let img = rand_tensor(&mut rng, &[3, 16, 16]);
        let (probs, logits) = vanilla_forward(&backbone, &head, &img).unwrap();

        // oracle: recompute the head from the extracted deep map
        let deep = &crate::backbone::extract_features(&backbone, std::slice::from_ref(&img))
            .unwrap()[0]
            .deep;
        let hw = deep.shape()[1] * deep.shape()[2];
        let pooled: Vec<f64> = (0..5)
            .map(|c| deep.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        for c in 0..4 {
            let z: f64 = (0..5).map(|j| head.concept_w.at2(c, j) * pooled[j]).sum::<f64>()
                + head.concept_b.data()[c];
            let p = 1.0 / (1.0 + (-z).exp());
            assert!((p - probs[c]).abs() < 1e-10);
        }
        for k in 0..3 {
            let z: f64 = (0..4).map(|c| head.class_w.at2(k, c) * probs[c]).sum::<f64>()
                + head.class_b.data()[k];
            assert!((z - logits[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn similarity_map_of_matching_prototype_is_one() {
        // every cell equals the (nonzero) prototype -> cosine 1 everywhere
        let d = 4;
        let proto = vec![0.3, -0.2, 0.9, 0.1];
        let mut deep = Tensor::zeros(&[d, 2, 3]);
        for c in 0..d {
            for cell in 0..6 {
                deep.data_mut()[c * 6 + cell] = proto[c];
            }
        }
        let bank = PrototypeBank {
            prototypes: Tensor::from_vec(&[1, d], proto).unwrap(),
            concept_w: Tensor::zeros(&[1, 1]),
            concept_b: Tensor::zeros(&[1]),
            class_w: Tensor::zeros(&[1, 1]),
            class_b: Tensor::zeros(&[1]),
            similarity: SimilarityKind::Cosine,
        };
        let maps = prototype_similarity_maps(&deep, &bank).unwrap();
        assert!(maps.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn orthogonal_prototype_gives_zero_map() {
        let mut deep = Tensor::zeros(&[2, 2, 2]);
        for cell in 0..4 {
            deep.data_mut()[cell] = 1.0; // only channel 0
        }
        let bank = PrototypeBank {
            prototypes: Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap(),
            concept_w: Tensor::zeros(&[1, 1]),
            concept_b: Tensor::zeros(&[1]),
            class_w: Tensor::zeros(&[1, 1]),
            class_b: Tensor::zeros(&[1]),
            similarity: SimilarityKind::Cosine,
        };
        let maps = prototype_similarity_maps(&deep, &bank).unwrap();
        assert!(maps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_maps_match_per_cell_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let deep = rand_tensor(&mut rng, &[5, 3, 3]);
        let bank = PrototypeBank::init(4, 5, 3, 2, SimilarityKind::Cosine, 3).unwrap();
        let maps = prototype_similarity_maps(&deep, &bank).unwrap();
        for j in 0..4 {
            let pj: Vec<f64> = (0..5).map(|c| bank.prototypes.at2(j, c)).collect();
            let pn = pj.iter().map(|v| v * v).sum::<f64>().sqrt();
            for r in 0..3 {
                for co in 0..3 {
                    let cell: Vec<f64> = (0..5).map(|c| deep.at3(c, r, co)).collect();
                    let cn = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = cell.iter().zip(&pj).map(|(a, b)| a * b).sum();
                    let expect = if cn == 0.0 || pn == 0.0 { 0.0 } else { dot / (cn * pn) };
                    assert!((maps.at3(j, r, co) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn similarity_is_scale_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let deep = rand_tensor(&mut rng, &[4, 2, 2]);
        let mut scaled = deep.clone();
        for v in scaled.data_mut() {
            *v *= 17.5;
        }
        let bank = PrototypeBank::init(3, 4, 2, 2, SimilarityKind::Cosine, 4).unwrap();
        let a = prototype_similarity_maps(&deep, &bank).unwrap();
        let b = prototype_similarity_maps(&scaled, &bank).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn activations_are_map_maxima() {
        let maps = Tensor::from_vec(&[2, 2, 2], vec![0.1, 0.9, 0.3, 0.2, 0.5, 0.5, 0.5, 0.5])
            .unwrap();
        assert_eq!(prototype_activations(&maps).unwrap(), vec![0.9, 0.5]);
    }

    #[test]
    fn activations_match_brute_force_and_ignore_nonmax_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let maps = rand_tensor(&mut rng, &[6, 3, 4]);
        let acts = prototype_activations(&maps).unwrap();
        for m in 0..6 {
            let brute = (0..12)
                .map(|i| maps.data()[m * 12 + i])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(acts[m], brute);
        }
        // permuting non-maximal cells leaves activations unchanged
        let mut permuted = maps.clone();
        for m in 0..6 {
            let row = &mut permuted.data_mut()[m * 12..(m + 1) * 12];
            let argmax = (0..12)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            let others: Vec<usize> = (0..12).filter(|&i| i != argmax).collect();
            let vals: Vec<f64> = others.iter().rev().map(|&i| row[i]).collect();
            for (&i, &v) in others.iter().zip(vals.iter()) {
                row[i] = v;
            }
        }
        assert_eq!(prototype_activations(&permuted).unwrap(), acts);
    }

    #[test]
    fn proto_forward_matches_straight_line_oracle() {
        let backbone = small_backbone();
        let bank = PrototypeBank::init(6, 5, 4, 3, SimilarityKind::Cosine, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let img = rand_tensor(&mut rng, &[3, 16, 16]);
        let out = proto_forward(&backbone, &bank, &img).unwrap();
        let deep = &crate::backbone::extract_features(&backbone, std::slice::from_ref(&img))
            .unwrap()[0]
            .deep;
        let maps = prototype_similarity_maps(deep, &bank).unwrap();
        let acts = prototype_activations(&maps).unwrap();
        let probs = out.concept_probs.as_ref().unwrap();
        for c in 0..4 {
            let z: f64 = (0..6).map(|j| bank.concept_w.at2(c, j) * acts[j]).sum::<f64>()
                + bank.concept_b.data()[c];
            let p = 1.0 / (1.0 + (-z).exp());
            assert!((p - probs[c]).abs() < 1e-10);
        }
        for k in 0..3 {
            let z: f64 = (0..4).map(|c| bank.class_w.at2(k, c) * probs[c]).sum::<f64>()
                + bank.class_b.data()[k];
            assert!((z - out.class_logits[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn proto_zero_weights_give_half_probs() {
        let backbone = small_backbone();
        let mut bank = PrototypeBank::init(6, 5, 4, 3, SimilarityKind::Cosine, 7).unwrap();
        bank.concept_w = Tensor::zeros(&[4, 6]);
        bank.concept_b = Tensor::zeros(&[4]);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let img = rand_tensor(&mut rng, &[3, 16, 16]);
        let out = proto_forward(&backbone, &bank, &img).unwrap();
        assert!(out.concept_probs.unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn top_n_selects_largest_with_tie_break() {
        assert_eq!(top_n_prototypes(&[0.5, -1.0, 2.0], 2).unwrap(), vec![2, 0]);
        assert_eq!(top_n_prototypes(&[1.0, 1.0, 0.0], 1).unwrap(), vec![0]);
        assert_eq!(top_n_prototypes(&[0.1, 0.7, 0.3], 3).unwrap(), vec![1, 2, 0]);
        assert!(top_n_prototypes(&[1.0], 2).is_err());
        assert!(top_n_prototypes(&[1.0], 0).is_err());
    }

    #[test]
    fn concept_map_is_top_n_average() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let maps = rand_tensor(&mut rng, &[5, 3, 3]);
        let row = [0.2, 0.9, -0.4, 0.9, 0.0];
        // n = 1: identical to the single top prototype's map
        let top1 = concept_localization_map(&maps, &row, 1).unwrap();
        for i in 0..9 {
            assert_eq!(top1.data()[i], maps.data()[9 + i]);
        }
        // brute-force oracle for n = 3 (indices 1, 3 by tie-break, then 0)
        let top3 = concept_localization_map(&maps, &row, 3).unwrap();
        for i in 0..9 {
            let expect = (maps.data()[9 + i] + maps.data()[27 + i] + maps.data()[i]) / 3.0;
            assert!((top3.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn proto_activation_gradient_hits_only_argmax_cell() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let deep = rand_tensor(&mut rng, &[4, 3, 3]);
        let bank = PrototypeBank::init(3, 4, 2, 2, SimilarityKind::Cosine, 11).unwrap();
        let mut g = Graph::new();
        let d = g.constant(deep.clone());
        let p = g.constant(bank.prototypes.clone());
        let maps = g.similarity_maps(d, p, SimilarityKind::Cosine).unwrap();
        g.watch(maps);
        let acts = g.max_spatial(maps).unwrap();
        let a1 = g.pick(acts, 1).unwrap();
        let grads = g.backward(a1).unwrap();
        let gmap = grads.get(maps).unwrap();
        let vals = g.value(maps);
        let hw = 9;
        let row = &vals.data()[hw..2 * hw];
        let argmax = (0..hw)
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
            .unwrap();
        for (i, &gv) in gmap.data().iter().enumerate() {
            if i == hw + argmax {
                assert_eq!(gv, 1.0);
            } else {
                assert_eq!(gv, 0.0);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let backbone = small_backbone();
        let bank = PrototypeBank::init(6, 5, 4, 3, SimilarityKind::Cosine, 12).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let img = rand_tensor(&mut rng, &[3, 16, 16]);
        let a = proto_forward(&backbone, &bank, &img).unwrap();
        let b = proto_forward(&backbone, &bank, &img).unwrap();
        assert_eq!(a.class_logits, b.class_logits);
        assert_eq!(a.concept_probs, b.concept_probs);
    }

    #[test]
    fn log_distance_similarity_is_positive_and_peaks_at_match() {
        let d = 3;
        let proto = vec![0.5, 0.5, 0.5];
        let mut deep = Tensor::zeros(&[d, 1, 2]);
        // cell 0 equals the prototype, cell 1 is far away
        for c in 0..d {
            deep.set3(c, 0, 0, proto[c]);
            deep.set3(c, 0, 1, proto[c] + 3.0);
        }
        let bank = PrototypeBank {
            prototypes: Tensor::from_vec(&[1, d], proto).unwrap(),
            concept_w: Tensor::zeros(&[1, 1]),
            concept_b: Tensor::zeros(&[1]),
            class_w: Tensor::zeros(&[1, 1]),
            class_b: Tensor::zeros(&[1]),
            similarity: SimilarityKind::LogDistance,
        };
        let maps = prototype_similarity_maps(&deep, &bank).unwrap();
        assert!(maps.at3(0, 0, 0) > maps.at3(0, 0, 1));
        assert!(maps.data().iter().all(|&v| v > 0.0));
    }
}
