//! Gradient-based class-activation maps for the vanilla CBM baseline.
//!
//! Both methods target the pre-sigmoid concept logit: sigmoid saturation
//! would otherwise shrink gradients for confidently predicted concepts and
//! degrade the maps for reasons unrelated to the model.

use std::path::Path;

use crate::backbone::{forward_backbone, insert_backbone};
use crate::grad::Graph;
use crate::metric::upsample_map;
use crate::models::{
    forward_vanilla_head, insert_head, Head, LocalizationMap, MapSubject, Model,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamMethod {
    GradCam,
    GradCamPp,
}

impl CamMethod {
    pub fn name(self) -> &'static str {
        match self {
            CamMethod::GradCam => "grad-cam",
            CamMethod::GradCamPp => "grad-cam++",
        }
    }
}

pub struct AttributionRequest<'a> {
    pub model: &'a Model,
    /// `[3, h, w]` image.
    pub image: &'a Tensor,
    pub concept_index: usize,
    pub method: CamMethod,
}

/// Deep map `A`, the gradient `dS_c/dA`, and the concept logit value.
fn concept_logit_gradient(model: &Model, image: &Tensor, concept: usize) -> Result<(Tensor, Tensor, f64)> {
    let Head::Vanilla(_) = &model.head else {
        return Err(Error::Config(
            "attribution maps are defined for the vanilla CBM head".into(),
        ));
    };
    let mut g = Graph::new();
    let img = g.constant(image.clone());
    let bb = insert_backbone(&mut g, &model.backbone, false);
    let (_, deep) = forward_backbone(&mut g, &model.backbone.config, &bb, img)?;
    g.watch(deep);
    let head = insert_head(&mut g, &model.head, false);
    let out = forward_vanilla_head(&mut g, &head, deep)?;
    let logits = out.concept_logits.expect("vanilla head has concept logits");
    if concept >= g.value(logits).len() {
        return Err(Error::Config(format!(
            "concept index {concept} out of range for {} concepts",
            g.value(logits).len()
        )));
    }
    let s_c = g.pick(logits, concept)?;
    let grads = g.backward(s_c)?;
    let grad = grads
        .get(deep)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(g.value(deep).shape()));
    if !grad.all_finite() {
        return Err(Error::Eval("non-finite attribution gradients".into()));
    }
    Ok((g.value(deep).clone(), grad, g.value(s_c).item()))
}

/// Grad-CAM from a fixed gradient: channel weights are the spatial means of
/// the gradient; the map is `relu(sum_k alpha_k A_k)`.
pub fn grad_cam_from_grad(a: &Tensor, grad: &Tensor) -> Tensor {
    let shape = a.shape();
    let (d, hw) = (shape[0], shape[1] * shape[2]);
    let mut out = vec![0.0; hw];
    for k in 0..d {
        let alpha = grad.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64;
        for (o, &v) in out.iter_mut().zip(&a.data()[k * hw..(k + 1) * hw]) {
            *o += alpha * v;
        }
    }
    for o in out.iter_mut() {
        *o = o.max(0.0);
    }
    Tensor::from_vec(&[shape[1], shape[2]], out).unwrap()
}

/// Grad-CAM++ from a fixed first-order gradient, using the exponential
/// closed form: with `g = exp(S) * dS/dA`,
/// `alpha_uv = g_uv^2 / (2 g_uv^2 + sum(A_k) * g_uv^3)` (0 on zero
/// denominators), `w_k = sum_uv alpha_uv * relu(g_uv)`, map
/// `relu(sum_k w_k A_k)`.
pub fn grad_cam_pp_from_grad(a: &Tensor, grad: &Tensor, s_value: f64) -> Tensor {
    let shape = a.shape();
    let (d, hw) = (shape[0], shape[1] * shape[2]);
    let es = s_value.exp();
    let mut out = vec![0.0; hw];
    for k in 0..d {
        let ak = &a.data()[k * hw..(k + 1) * hw];
        let a_sum: f64 = ak.iter().sum();
        let mut w_k = 0.0;
        for &gv in &grad.data()[k * hw..(k + 1) * hw] {
            let g1 = es * gv;
            let g2 = g1 * g1;
            let g3 = g2 * g1;
            let denom = 2.0 * g2 + a_sum * g3;
            let alpha = if denom == 0.0 { 0.0 } else { g2 / denom };
            w_k += alpha * g1.max(0.0);
        }
        for (o, &v) in out.iter_mut().zip(ak) {
            *o += w_k * v;
        }
    }
    for o in out.iter_mut() {
        *o = o.max(0.0);
    }
    Tensor::from_vec(&[shape[1], shape[2]], out).unwrap()
}

/// Concept localization map for a vanilla CBM via Grad-CAM or Grad-CAM++.
pub fn concept_cam(request: &AttributionRequest) -> Result<LocalizationMap> {
    let (a, grad, s) = concept_logit_gradient(request.model, request.image, request.concept_index)?;
    let values = match request.method {
        CamMethod::GradCam => grad_cam_from_grad(&a, &grad),
        CamMethod::GradCamPp => grad_cam_pp_from_grad(&a, &grad, s),
    };
    Ok(LocalizationMap {
        values,
        subject: MapSubject::Concept(request.concept_index),
        image_id: 0,
    })
}

/// Upsample a map to the image size, color-map it, and overlay it on the
/// image at a fixed alpha. Written as an 8-bit PNG.
pub fn export_heatmap(map: &Tensor, image: &Tensor, path: &Path, alpha: f64) -> Result<()> {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let up = upsample_map(map, h, w)?;
    let max = up.data().iter().copied().fold(0.0f64, f64::max);
    let mut bytes = Vec::with_capacity(h * w * 3);
    for pix in 0..h * w {
        let v = if max > 0.0 { up.data()[pix] / max } else { 0.0 };
        let heat = colormap(v);
        for ch in 0..3 {
            let base = image.data()[ch * h * w + pix];
            let blended = (1.0 - alpha) * base + alpha * heat[ch];
            bytes.push((blended.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Blue -> cyan -> yellow -> red ramp on [0, 1].
fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [
        (1.5 * v - 0.25).clamp(0.0, 1.0),
        (1.5 - (2.0 * v - 1.0).abs() * 1.5).clamp(0.0, 1.0),
        (1.25 - 1.5 * v).clamp(0.0, 1.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_params, FeatureExtractorConfig};
    use crate::grad::check::finite_diff_gradient;
    use crate::models::VanillaHead;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn grad_cam_with_unit_gradient_returns_relu_of_map() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grad = Tensor::filled(&[1, 2, 2], 1.0);
        let map = grad_cam_from_grad(&a, &grad);
        assert_eq!(map.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_gradient_gives_zero_map_for_both_methods() {
        let a = Tensor::from_vec(&[2, 2, 2], vec![1.0, -2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5])
            .unwrap();
        let grad = Tensor::zeros(&[2, 2, 2]);
        assert!(grad_cam_from_grad(&a, &grad).data().iter().all(|&v| v == 0.0));
        assert!(grad_cam_pp_from_grad(&a, &grad, 0.3)
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn maps_are_nonnegative_and_gradcam_is_linear_in_a() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = Tensor::from_vec(&[3, 2, 2], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let grad =
            Tensor::from_vec(&[3, 2, 2], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let m1 = grad_cam_from_grad(&a, &grad);
        let mpp = grad_cam_pp_from_grad(&a, &grad, 0.2);
        assert!(m1.data().iter().all(|&v| v >= 0.0));
        assert!(mpp.data().iter().all(|&v| v >= 0.0));
        // scaling A by beta > 0 with gradients held scales the map by beta
        let mut a2 = a.clone();
        for v in a2.data_mut() {
            *v *= 2.5;
        }
        let m2 = grad_cam_from_grad(&a2, &grad);
        for (x, y) in m1.data().iter().zip(m2.data()) {
            assert!((x * 2.5 - y).abs() < 1e-12);
        }
    }

    fn tiny_model(seed: u64) -> Model {
        let backbone = init_params(&FeatureExtractorConfig {
            stage_widths: vec![3, 2],
            stage_strides: vec![2, 2],
            kernel_size: 3,
            shallow_stage: 0,
            init_seed: seed,
            ..FeatureExtractorConfig::default()
        })
        .unwrap();
        let head = VanillaHead::init(2, 3, 2, seed + 1).unwrap();
        Model { backbone, head: Head::Vanilla(head) }
    }

    #[test]
    fn cam_matches_finite_difference_oracle_on_tiny_model() {
        let model = tiny_model(5);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let img = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let concept = 1;

        // independent gradient of S_c w.r.t. the deep map A, via finite
        // differences through a straight-line head recomputation
        let deep = crate::backbone::extract_features(&model.backbone, std::slice::from_ref(&img))
            .unwrap()[0]
            .deep
            .clone();
        let Head::Vanilla(head) = &model.head else { unreachable!() };
        let logit = |a: &[f64]| {
            let hw = 4;
            let pooled: Vec<f64> = (0..2)
                .map(|c| a[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
                .collect();
            (0..2).map(|j| head.concept_w.at2(concept, j) * pooled[j]).sum::<f64>()
                + head.concept_b.data()[concept]
        };
        let fd_grad = finite_diff_gradient(logit, deep.data(), 1e-6);
        let fd_grad_t = Tensor::from_vec(deep.shape(), fd_grad).unwrap();
        let s_val = logit(deep.data());

        let oracle_cam = grad_cam_from_grad(&deep, &fd_grad_t);
        let oracle_pp = grad_cam_pp_from_grad(&deep, &fd_grad_t, s_val);

        let got_cam = concept_cam(&AttributionRequest {
            model: &model,
            image: &img,
            concept_index: concept,
            method: CamMethod::GradCam,
        })
        .unwrap();
        let got_pp = concept_cam(&AttributionRequest {
            model: &model,
            image: &img,
            concept_index: concept,
            method: CamMethod::GradCamPp,
        })
        .unwrap();
        for (a, b) in got_cam.values.data().iter().zip(oracle_cam.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in got_pp.values.data().iter().zip(oracle_pp.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn cam_is_deterministic() {
        let model = tiny_model(7);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let img = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let req = AttributionRequest {
            model: &model,
            image: &img,
            concept_index: 0,
            method: CamMethod::GradCamPp,
        };
        assert_eq!(concept_cam(&req).unwrap(), concept_cam(&req).unwrap());
    }

    #[test]
    fn baseline_head_is_rejected() {
        let backbone = init_params(&FeatureExtractorConfig {
            stage_widths: vec![3, 2],
            stage_strides: vec![2, 2],
            init_seed: 9,
            ..FeatureExtractorConfig::default()
        })
        .unwrap();
        let model = Model {
            backbone,
            head: Head::Baseline(crate::models::ClassHead::init(2, 2, 1).unwrap()),
        };
        let img = Tensor::zeros(&[3, 8, 8]);
        let req = AttributionRequest {
            model: &model,
            image: &img,
            concept_index: 0,
            method: CamMethod::GradCam,
        };
        assert!(concept_cam(&req).is_err());
    }

    #[test]
    fn heatmap_export_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let map = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 0.5, 0.2]).unwrap();
        let img = Tensor::filled(&[3, 8, 8], 0.5);
        let path = dir.path().join("maps/heat.png");
        export_heatmap(&map, &img, &path, 0.5).unwrap();
        let loaded = image::open(&path).unwrap().into_rgb8();
        assert_eq!((loaded.width(), loaded.height()), (8, 8));
    }
}
