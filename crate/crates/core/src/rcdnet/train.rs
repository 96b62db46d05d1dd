//! Referring training objective: pick one category present in the semantic
//! map, binarize the map for it, and fit the logits with binary
//! cross-entropy.

use rand::Rng;

use super::RcdNet;
use crate::autograd::Graph;
use crate::domain::{ClassVocabulary, RasterPair, SemanticLabelMap};
use crate::error::{RcdError, Result};
use crate::nn::AdamW;
use crate::scalar::Scalar;
use crate::textcond::{build_prompt, TextEmbedder};

/// Uniform over the nonzero classes present in `map`; when nothing changed,
/// uniform over the whole vocabulary (the target is then all zero).
pub fn sample_target_class<R: Rng + ?Sized>(
    map: &SemanticLabelMap,
    vocab: &ClassVocabulary,
    rng: &mut R,
) -> Result<usize> {
    if vocab.is_empty() {
        return Err(crate::error::validation("cannot sample from an empty vocabulary"));
    }
    let present = map.present_classes();
    if present.is_empty() {
        Ok(rng.random_range(1..=vocab.len()))
    } else {
        Ok(present[rng.random_range(0..present.len())])
    }
}

/// One supervised sample.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub pair: &'a RasterPair,
    pub label: &'a SemanticLabelMap,
}

/// One optimizer update on a batch; returns the mean BCE before the update.
pub fn training_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut RcdNet<T>,
    optimizer: &mut AdamW<T>,
    batch: &[TrainItem<'_>],
    vocab: &ClassVocabulary,
    embedder: &dyn TextEmbedder<T>,
    rng: &mut R,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(crate::error::validation("training batch is empty"));
    }
    let g = Graph::new();
    let mut total = None;
    for item in batch {
        let class = sample_target_class(item.label, vocab, rng)?;
        let target = item.label.binarize_for_class(class)?;
        let name = vocab.name(class).expect("sampled class in vocabulary");
        let text = embedder.embed(&build_prompt(name)?)?;
        let logits = model.forward_graph(&g, item.pair, &text)?;
        let y: Vec<T> = target.mask().iter().map(|&m| T::of(f64::from(m))).collect();
        let loss = logits.bce_with_logits_mean(&y);
        total = Some(match total {
            Some(t) => loss.add(t),
            None => loss,
        });
    }
    let loss = total.expect("nonempty batch").scale(T::one() / T::of(batch.len() as f64));
    let value = loss.item().to_f64_lossy();
    if !value.is_finite() {
        return Err(RcdError::Numeric(format!(
            "training loss is {value} at step {}",
            optimizer.steps_taken()
        )));
    }
    let grads = g.backward(loss).for_store(&model.params);
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(RcdError::Numeric(format!(
            "non-finite gradient at step {}",
            optimizer.steps_taken()
        )));
    }
    optimizer.step(&mut model.params, &grads);
    Ok(value)
}
