//! Training loop with warm-up staging and deterministic execution.
//!
//! During the warm-up epochs only head parameters (prototypes and
//! predictors) update; backbone leaves enter the graph as constants, so the
//! reverse sweep never touches the convolution stack. Everything is seeded:
//! data order, augmentation draws, and initialization all derive from the
//! config seed.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::CamMethod;
use crate::backbone::{forward_backbone, insert_backbone, init_params};
use crate::data::{Dataset, ImageSample};
use crate::grad::Graph;
use crate::losses::{
    cia_core, cla_loss, concept_loss, pa_loss, task_loss, total_loss, AugmentationTransform,
    LossTerms,
};
use crate::metric::{trust_score, TrustReport};
use crate::models::{
    concept_localization_node, forward_head, insert_head, ClassHead, Head, Model, PrototypeBank,
    VanillaHead,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{ModelKind, TrainConfig};
use super::localizers::{CamLocalizer, ProtoLocalizer};
use super::{derive_seed, Adam};

/// Per-step loss components (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub concept: f64,
    pub task: f64,
    pub cla: f64,
    pub cia: f64,
    pub pa: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub concept: f64,
    pub task: f64,
    pub cla: f64,
    pub cia: f64,
    pub pa: f64,
    pub total: f64,
}

/// The deterministic outcome of a run; reproduced exactly by re-running
/// with the same config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub epoch_stats: Vec<EpochStats>,
    pub concept_accuracy: Option<f64>,
    pub class_accuracy: f64,
    pub trust: Option<TrustReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub results: RunResults,
    pub wall_clock_secs: f64,
    pub checkpoint: PathBuf,
}

/// Assemble an untrained model for a config and dataset schema.
pub fn build_model(config: &TrainConfig, dataset: &Dataset) -> Result<Model> {
    config.validate()?;
    let c = dataset.schema.num_concepts();
    let k = dataset.num_categories;
    if c == 0 || k == 0 {
        return Err(Error::Config("dataset must have concepts and categories".into()));
    }
    let mut backbone_config = config.backbone.clone();
    backbone_config.init_seed = derive_seed(config.seed, 1);
    let backbone = init_params(&backbone_config)?;
    let d = config.feature_dim;
    let head_seed = derive_seed(config.seed, 2);
    let head = match config.model {
        ModelKind::Baseline => Head::Baseline(ClassHead::init(d, k, head_seed)?),
        ModelKind::Vanilla => Head::Vanilla(VanillaHead::init(d, c, k, head_seed)?),
        ModelKind::Proto { .. } => Head::Proto(PrototypeBank::init(
            config.num_prototypes,
            d,
            c,
            k,
            config.similarity,
            head_seed,
        )?),
    };
    let model = Model { backbone, head };
    model.validate()?;
    Ok(model)
}

/// Parameter tensors in the canonical slot order shared with the graph
/// insertion order (backbone stages first, then the head).
fn param_slots_mut(model: &mut Model) -> Vec<&mut Tensor> {
    let mut slots: Vec<&mut Tensor> = Vec::new();
    for stage in &mut model.backbone.stages {
        slots.push(&mut stage.weight);
        slots.push(&mut stage.bias);
    }
    match &mut model.head {
        Head::Baseline(h) => {
            slots.push(&mut h.w);
            slots.push(&mut h.b);
        }
        Head::Vanilla(h) => {
            slots.push(&mut h.concept_w);
            slots.push(&mut h.concept_b);
            slots.push(&mut h.class_w);
            slots.push(&mut h.class_b);
        }
        Head::Proto(b) => {
            slots.push(&mut b.prototypes);
            slots.push(&mut b.concept_w);
            slots.push(&mut b.concept_b);
            slots.push(&mut b.class_w);
            slots.push(&mut b.class_b);
        }
    }
    slots
}

fn backbone_slot_count(model: &Model) -> usize {
    model.backbone.stages.len() * 2
}

#[derive(Clone, Copy, Default)]
struct LossValues {
    concept: f64,
    task: f64,
    cla: f64,
    cia: f64,
    pa: f64,
    total: f64,
}

/// Forward + backward for one sample; returns loss values and per-slot
/// gradients (None for frozen or unused slots).
fn sample_pass(
    model: &Model,
    config: &TrainConfig,
    groups: &[Vec<usize>],
    sample: &ImageSample,
    aug: Option<AugmentationTransform>,
    warmup: bool,
) -> Result<(LossValues, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let bb = insert_backbone(&mut g, &model.backbone, !warmup);
    let head_nodes = insert_head(&mut g, &model.head, true);
    let image = g.constant(sample.image.clone());
    let (shallow, deep) = forward_backbone(&mut g, &model.backbone.config, &bb, image)?;
    let out = forward_head(&mut g, &model.head, &head_nodes, deep)?;

    let mut terms = LossTerms::default();
    if let Some(probs) = out.concept_probs {
        terms.concept = Some(concept_loss(&mut g, probs, &sample.concept_labels)?);
    }
    terms.task = Some(task_loss(&mut g, out.class_logits, sample.category)?);

    if let ModelKind::Proto { cla, cia, pa } = config.model {
        if cla {
            terms.cla = Some(cla_loss(
                &mut g,
                deep,
                shallow,
                config.cla_levels,
                config.weights.cla_mean_normalized,
            )?);
        }
        if cia {
            let aug = aug.ok_or_else(|| Error::Train("missing augmentation draw".into()))?;
            let aug_image = g.constant(aug.apply_chw(&sample.image)?);
            let (_, deep_aug) = forward_backbone(&mut g, &model.backbone.config, &bb, aug_image)?;
            terms.cia = Some(cia_core(&mut g, deep_aug, deep, aug)?);
        }
        if pa {
            let Head::Proto(bank) = &model.head else { unreachable!() };
            let maps = out.maps.expect("proto forward returns maps");
            let mut concept_maps = Vec::new();
            for (ci, &label) in sample.concept_labels.iter().enumerate() {
                if label == 1 {
                    let node =
                        concept_localization_node(&mut g, maps, bank.concept_row(ci), config.top_n)?;
                    concept_maps.push((ci, node));
                }
            }
            if !concept_maps.is_empty() {
                terms.pa = Some(pa_loss(&mut g, &concept_maps, groups, &config.weights)?);
            }
        }
    }

    let total = total_loss(&mut g, &terms, &config.weights)?;
    let mut grads = g.backward(total)?;

    let slot_ids: Vec<_> = bb
        .param_ids()
        .into_iter()
        .chain(head_nodes.param_ids())
        .collect();
    let slot_grads = slot_ids.iter().map(|&id| grads.take(id)).collect();

    let value = |t: Option<crate::grad::NodeId>| t.map(|id| g.value(id).item()).unwrap_or(0.0);
    Ok((
        LossValues {
            concept: value(terms.concept),
            task: value(terms.task),
            cla: value(terms.cla),
            cia: value(terms.cia),
            pa: value(terms.pa),
            total: g.value(total).item(),
        },
        slot_grads,
    ))
}

/// Mean concept accuracy (threshold 0.5) and top-1 class accuracy over a
/// sample set. Concept accuracy is None for concept-free models.
pub fn evaluate(model: &Model, samples: &[&ImageSample]) -> Result<(Option<f64>, f64)> {
    if samples.is_empty() {
        return Err(Error::Eval("cannot evaluate on an empty sample set".into()));
    }
    let per: Vec<Result<(usize, usize, usize)>> = samples
        .par_iter()
        .map(|s| {
            let out = crate::models::forward_model(model, &s.image)?;
            let class_pred = out
                .class_logits
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                })
                .0;
            let class_hit = (class_pred == s.category) as usize;
            match out.concept_probs {
                Some(probs) => {
                    let hits = probs
                        .iter()
                        .zip(&s.concept_labels)
                        .filter(|(&p, &&l)| (p > 0.5) == (l == 1))
                        .count();
                    Ok((hits, probs.len(), class_hit))
                }
                None => Ok((0, 0, class_hit)),
            }
        })
        .collect();
    let mut concept_hits = 0usize;
    let mut concept_total = 0usize;
    let mut class_hits = 0usize;
    for r in per {
        let (ch, ct, kh) = r?;
        concept_hits += ch;
        concept_total += ct;
        class_hits += kh;
    }
    let concept_acc = if concept_total > 0 {
        Some(concept_hits as f64 / concept_total as f64)
    } else {
        None
    };
    Ok((concept_acc, class_hits as f64 / samples.len() as f64))
}

/// Trust report for a trained model on a sample set, using the model's
/// native localization (prototype maps) or Grad-CAM++ for the vanilla CBM.
pub fn trust_for_model(
    model: &Model,
    config: &TrainConfig,
    samples: &[&ImageSample],
    dataset: &Dataset,
) -> Result<Option<TrustReport>> {
    match &model.head {
        Head::Baseline(_) => Ok(None),
        Head::Vanilla(_) => {
            let localizer = CamLocalizer { model, method: CamMethod::GradCamPp };
            Ok(Some(trust_score(
                &localizer,
                samples,
                &dataset.schema,
                &config.box_spec,
                config.target,
            )?))
        }
        Head::Proto(_) => {
            let localizer = ProtoLocalizer::new(model, config.top_n)?;
            Ok(Some(trust_score(
                &localizer,
                samples,
                &dataset.schema,
                &config.box_spec,
                config.target,
            )?))
        }
    }
}

/// Train a model, evaluate it, compute its trust report, and persist
/// everything under `out_dir` (checkpoint, JSONL step log, run record).
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunRecord> {
    let started = Instant::now();
    config.validate()?;
    dataset.validate()?;
    let train_samples: Vec<&ImageSample> = dataset.train();
    let test_samples: Vec<&ImageSample> = dataset.test();
    if config.epochs > 0 && train_samples.is_empty() {
        return Err(Error::Train("no training samples".into()));
    }

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );

    let mut model = build_model(config, dataset)?;
    // groups as concept indices, aligned with label vectors
    let groups = dataset.schema.group_indices();
    let slot_count = backbone_slot_count(&model) + match &model.head {
        Head::Baseline(_) => 2,
        Head::Vanilla(_) => 4,
        Head::Proto(_) => 5,
    };
    let mut adam = Adam::new(
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        slot_count,
    );
    let backbone_slots = backbone_slot_count(&model);

    let mut order_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 3));
    let mut aug_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 4));
    let needs_aug = matches!(config.model, ModelKind::Proto { cia: true, .. });

    let mut epoch_stats = Vec::with_capacity(config.epochs);
    let mut last_good = model.clone();

    for epoch in 0..config.epochs {
        let warmup = epoch < config.warmup_epochs;
        let mut indices: Vec<usize> = (0..train_samples.len()).collect();
        indices.shuffle(&mut order_rng);

        let mut sums = LossValues::default();
        let mut steps = 0usize;
        for (step, batch) in indices.chunks(config.batch_size).enumerate() {
            // one augmentation draw per batch
            let aug = if needs_aug {
                let set = AugmentationTransform::TRAINING_SET;
                Some(set[aug_rng.gen_range(0..set.len())])
            } else {
                None
            };

            let passes: Vec<Result<(LossValues, Vec<Option<Tensor>>)>> = batch
                .par_iter()
                .map(|&i| sample_pass(&model, config, &groups, train_samples[i], aug, warmup))
                .collect();

            let mut batch_vals = LossValues::default();
            let mut batch_grads: Vec<Option<Tensor>> = vec![None; slot_count];
            let mut n = 0.0;
            for pass in passes {
                let (vals, grads) = pass?;
                batch_vals.concept += vals.concept;
                batch_vals.task += vals.task;
                batch_vals.cla += vals.cla;
                batch_vals.cia += vals.cia;
                batch_vals.pa += vals.pa;
                batch_vals.total += vals.total;
                n += 1.0;
                for (acc, g) in batch_grads.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        match acc {
                            None => *acc = Some(g),
                            Some(acc) => {
                                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
            }
            batch_vals.concept /= n;
            batch_vals.task /= n;
            batch_vals.cla /= n;
            batch_vals.cia /= n;
            batch_vals.pa /= n;
            batch_vals.total /= n;

            if !batch_vals.total.is_finite() {
                let ckpt = out_dir.join("checkpoint.json");
                save_checkpoint(
                    &Checkpoint::new(&last_good, &dataset.schema, Some(config.clone())),
                    &ckpt,
                )?;
                return Err(Error::Train(format!(
                    "non-finite loss at epoch {epoch} step {step}; last-good checkpoint written to {}",
                    ckpt.display()
                )));
            }

            {
                let slots = param_slots_mut(&mut model);
                for (slot, (param, grad)) in slots.into_iter().zip(&batch_grads).enumerate() {
                    if warmup && slot < backbone_slots {
                        continue;
                    }
                    if let Some(grad) = grad {
                        let mut mean = grad.clone();
                        for v in mean.data_mut() {
                            *v /= n;
                        }
                        adam.step(slot, param, &mean);
                    }
                }
            }
            last_good = model.clone();

            let record = StepRecord {
                epoch,
                step,
                concept: batch_vals.concept,
                task: batch_vals.task,
                cla: batch_vals.cla,
                cia: batch_vals.cia,
                pa: batch_vals.pa,
                total: batch_vals.total,
            };
            serde_json::to_writer(&mut log, &record).map_err(|e| Error::Serde(e.to_string()))?;
            log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;

            sums.concept += batch_vals.concept;
            sums.task += batch_vals.task;
            sums.cla += batch_vals.cla;
            sums.cia += batch_vals.cia;
            sums.pa += batch_vals.pa;
            sums.total += batch_vals.total;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;
        epoch_stats.push(EpochStats {
            epoch,
            concept: sums.concept * inv,
            task: sums.task * inv,
            cla: sums.cla * inv,
            cia: sums.cia * inv,
            pa: sums.pa * inv,
            total: sums.total * inv,
        });
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let eval_samples: &[&ImageSample] = if test_samples.is_empty() {
        &train_samples
    } else {
        &test_samples
    };
    let (concept_accuracy, class_accuracy) = evaluate(&model, eval_samples)?;
    let trust = trust_for_model(&model, config, eval_samples, dataset)?;

    let ckpt_path = out_dir.join("checkpoint.json");
    save_checkpoint(
        &Checkpoint::new(&model, &dataset.schema, Some(config.clone())),
        &ckpt_path,
    )?;

    let record = RunRecord {
        config: config.clone(),
        results: RunResults {
            epoch_stats,
            concept_accuracy,
            class_accuracy,
            trust,
        },
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: ckpt_path,
    };
    let record_path = out_dir.join("run_record.json");
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&record_path, json).map_err(|e| Error::io(&record_path, e))?;
    Ok(record)
}
