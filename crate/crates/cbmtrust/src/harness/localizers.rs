//! Concept localizers plugging models into the trust metric.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::attribution::{concept_cam, AttributionRequest, CamMethod};
use crate::data::ImageSample;
use crate::metric::ConceptLocalizer;
use crate::models::{
    concept_localization_map, forward_model, Head, LocalizationMap, MapSubject, Model,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Native localization of the prototype CBM: mean of the top-N prototype
/// maps for the concept. Per-image similarity maps are cached so evaluating
/// several concepts on one image costs one forward pass.
pub struct ProtoLocalizer<'a> {
    pub model: &'a Model,
    pub top_n: usize,
    cache: Mutex<HashMap<u64, Tensor>>,
}

impl<'a> ProtoLocalizer<'a> {
    pub fn new(model: &'a Model, top_n: usize) -> Result<Self> {
        if !matches!(model.head, Head::Proto(_)) {
            return Err(Error::Config("ProtoLocalizer needs a prototype head".into()));
        }
        Ok(ProtoLocalizer { model, top_n, cache: Mutex::new(HashMap::new()) })
    }

    fn maps_for(&self, sample: &ImageSample) -> Result<Tensor> {
        if let Some(maps) = self.cache.lock().unwrap().get(&sample.id) {
            return Ok(maps.clone());
        }
        let out = forward_model(self.model, &sample.image)?;
        let maps = out
            .maps
            .ok_or_else(|| Error::Eval("prototype forward produced no maps".into()))?;
        self.cache.lock().unwrap().insert(sample.id, maps.clone());
        Ok(maps)
    }
}

impl ConceptLocalizer for ProtoLocalizer<'_> {
    fn localize(&self, sample: &ImageSample, concept_index: usize) -> Result<LocalizationMap> {
        let Head::Proto(bank) = &self.model.head else {
            return Err(Error::Config("ProtoLocalizer needs a prototype head".into()));
        };
        let maps = self.maps_for(sample)?;
        let values = concept_localization_map(&maps, bank.concept_row(concept_index), self.top_n)?;
        Ok(LocalizationMap {
            values,
            subject: MapSubject::Concept(concept_index),
            image_id: sample.id,
        })
    }

    fn name(&self) -> String {
        format!("proto-top{}", self.top_n)
    }
}

/// Attribution-based localization for the vanilla CBM.
pub struct CamLocalizer<'a> {
    pub model: &'a Model,
    pub method: CamMethod,
}

impl ConceptLocalizer for CamLocalizer<'_> {
    fn localize(&self, sample: &ImageSample, concept_index: usize) -> Result<LocalizationMap> {
        let mut map = concept_cam(&AttributionRequest {
            model: self.model,
            image: &sample.image,
            concept_index,
            method: self.method,
        })?;
        map.image_id = sample.id;
        Ok(map)
    }

    fn name(&self) -> String {
        self.method.name().to_string()
    }
}
