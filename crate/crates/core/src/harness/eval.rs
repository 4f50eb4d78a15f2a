use rayon::prelude::*;

use crate::backbone::{argmax, BackboneModel, Batch, Example};
use crate::error::Result;
use crate::lora::AdapterWeights;
use crate::numerics::Tensor;
use crate::selection::{argmin_by_id, perplexity_from_logits};

/// Perplexity and predicted class of each example under one adapter.
pub(crate) fn score_examples(model: &BackboneModel, adapter: Option<&AdapterWeights>, examples: &[Example]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut ppl = Vec::with_capacity(examples.len());
    let mut pred = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(256) {
        let batch = Batch::new(chunk)?;
        let logits = model.forward_batch(adapter, &batch)?;
        let (t, vocab) = (batch.seq_len, logits.lm.cols());
        for (row, ex) in chunk.iter().enumerate() {
            let start = row * t * vocab;
            let block = Tensor::new(vec![t, vocab], logits.lm.data()[start..start + t * vocab].to_vec())?;
            ppl.push(perplexity_from_logits(&block, &ex.tokens)?);
            pred.push(argmax(logits.class.row_slice(row)));
        }
    }
    Ok((ppl, pred))
}

/// Accuracy and routing accuracy per test set when every input is routed
/// to the lowest-perplexity candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedEval {
    pub accuracy: Vec<f64>,
    pub routing: Vec<f64>,
}

/// `tests[j] = (task id, examples)`; no task label reaches the model.
pub fn evaluate_routed(model: &BackboneModel, candidates: &[(String, AdapterWeights)], tests: &[(&str, &[Example])]) -> Result<RoutedEval> {
    let scored: Vec<Vec<(Vec<f64>, Vec<usize>)>> = candidates
        .par_iter()
        .map(|(_, a)| tests.iter().map(|(_, ex)| score_examples(model, Some(a), ex)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let ids: Vec<String> = candidates.iter().map(|(id, _)| id.clone()).collect();
    let mut accuracy = Vec::with_capacity(tests.len());
    let mut routing = Vec::with_capacity(tests.len());
    for (j, (task, examples)) in tests.iter().enumerate() {
        let (mut correct, mut routed) = (0usize, 0usize);
        for (i, ex) in examples.iter().enumerate() {
            let col: Vec<f64> = scored.iter().map(|s| s[j].0[i]).collect();
            let best = argmin_by_id(&ids, &col).expect("at least one candidate");
            correct += (scored[best][j].1[i] == ex.label) as usize;
            routed += (ids[best] == *task) as usize;
        }
        let n = examples.len().max(1) as f64;
        accuracy.push(correct as f64 / n);
        routing.push(routed as f64 / n);
    }
    Ok(RoutedEval { accuracy, routing })
}
