//! Perplexity-based adapter selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, Batch, Example};
use crate::error::{Error, Result};
use crate::store::LatentStore;
use crate::lora::AdapterWeights;
use crate::numerics::{log_softmax_rows, Tensor};

/// Perplexity of `tokens[1..]` given next-token logits `[len × vocab]`
/// computed over `tokens`.
pub fn perplexity_from_logits(lm: &Tensor, tokens: &[usize]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort(tokens.len()));
    }
    let logp = log_softmax_rows(lm);
    let (rows, vocab) = logp.dims();
    if rows < tokens.len() {
        return Err(Error::shape("perplexity", format!("{rows} logit rows for {} tokens", tokens.len())));
    }
    let mut nll = 0.0;
    for (i, &t) in tokens[1..].iter().enumerate() {
        if t >= vocab {
            return Err(Error::TokenOutOfVocab { token: t, vocab });
        }
        nll -= logp.at(i, t);
    }
    Ok((nll / (tokens.len() - 1) as f64).exp())
}

/// Perplexity of `tokens` under the backbone with `adapter` applied.
pub fn perplexity(model: &BackboneModel, adapter: Option<&AdapterWeights>, tokens: &[usize]) -> Result<f64> {
    let logits = model.forward(adapter, tokens)?;
    perplexity_from_logits(&logits.lm, tokens)
}

/// Per-sequence perplexities of equal-or-mixed-length sequences, batched by
/// length.
pub fn perplexities(model: &BackboneModel, adapter: Option<&AdapterWeights>, seqs: &[&[usize]]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; seqs.len()];
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::SequenceTooShort(s.len()));
        }
        by_len.entry(s.len()).or_default().push(i);
    }
    for (len, idx) in by_len {
        for chunk in idx.chunks(256) {
            let examples: Vec<Example> = chunk.iter().map(|&i| Example { tokens: seqs[i].to_vec(), label: 0 }).collect();
            let logits = model.forward_batch(adapter, &Batch::new(&examples)?)?;
            let vocab = logits.lm.cols();
            for (row, &i) in chunk.iter().enumerate() {
                let start = row * len * vocab;
                let block = Tensor::new(vec![len, vocab], logits.lm.data()[start..start + len * vocab].to_vec())?;
                out[i] = perplexity_from_logits(&block, seqs[i])?;
            }
        }
    }
    Ok(out)
}

/// Index of the smallest value; ties go to the lexicographically smallest
/// id.
pub fn argmin_by_id(ids: &[String], values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for i in 0..values.len() {
        best = match best {
            None => Some(i),
            Some(b) if values[i] < values[b] || (values[i] == values[b] && ids[i] < ids[b]) => Some(i),
            keep => keep,
        };
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen: String,
    pub perplexities: BTreeMap<String, f64>,
    /// Number of predicted positions, `len − 1`.
    pub input_len: usize,
    /// The chosen adapter, the only one kept after scoring.
    #[serde(skip)]
    pub adapter: Option<AdapterWeights>,
}

/// Perplexity of `tokens` under each candidate.
pub fn score_candidates(
    model: &BackboneModel,
    candidates: &[(String, AdapterWeights)],
    tokens: &[usize],
    parallel: bool,
) -> Result<Vec<f64>> {
    if parallel {
        candidates.par_iter().map(|(_, a)| perplexity(model, Some(a), tokens)).collect()
    } else {
        candidates.iter().map(|(_, a)| perplexity(model, Some(a), tokens)).collect()
    }
}

/// Routes `tokens` to the stored adapter with the lowest perplexity, or to
/// `task_id` when one is given.
pub fn select_adapter(store: &LatentStore, model: &BackboneModel, tokens: &[usize], task_id: Option<&str>) -> Result<SelectionResult> {
    select_adapter_with(store, model, tokens, task_id, true)
}

/// [`select_adapter`] with explicit control over parallel scoring.
pub fn select_adapter_with(
    store: &LatentStore,
    model: &BackboneModel,
    tokens: &[usize],
    task_id: Option<&str>,
    parallel: bool,
) -> Result<SelectionResult> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort(tokens.len()));
    }
    let scale = store_scale(store)?;
    let candidates: Vec<(String, AdapterWeights)> = match task_id {
        Some(id) => vec![(id.to_string(), store.fetch_adapter(id)?.to_weights(scale)?)],
        None => {
            if store.is_empty() {
                return Err(Error::Empty("latent store"));
            }
            store
                .fetch_all()?
                .into_iter()
                .map(|s| Ok((s.task_id.clone(), s.to_weights(scale)?)))
                .collect::<Result<_>>()?
        }
    };
    let ppl = score_candidates(model, &candidates, tokens, parallel)?;
    let ids: Vec<String> = candidates.iter().map(|(id, _)| id.clone()).collect();
    let best = argmin_by_id(&ids, &ppl).expect("at least one candidate");
    let adapter = candidates.into_iter().nth(best).map(|(_, a)| a);
    Ok(SelectionResult {
        chosen: ids[best].clone(),
        perplexities: ids.into_iter().zip(ppl).collect(),
        input_len: tokens.len() - 1,
        adapter,
    })
}

fn store_scale(store: &LatentStore) -> Result<f64> {
    if store.cae().is_none() {
        return Err(Error::Empty("latent store"));
    }
    Ok(store.adapter_scale())
}

/// For each input, the index of the lowest-perplexity candidate.
pub fn route(model: &BackboneModel, candidates: &[(String, AdapterWeights)], inputs: &[&[usize]]) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate adapters"));
    }
    let table: Vec<Vec<f64>> = candidates.par_iter().map(|(_, a)| perplexities(model, Some(a), inputs)).collect::<Result<_>>()?;
    let ids: Vec<String> = candidates.iter().map(|(id, _)| id.clone()).collect();
    Ok((0..inputs.len())
        .map(|i| {
            let col: Vec<f64> = table.iter().map(|row| row[i]).collect();
            argmin_by_id(&ids, &col).expect("nonempty")
        })
        .collect())
}

/// Candidate with the lowest mean perplexity over `sample`.
pub fn pick_warm_start_from(model: &BackboneModel, candidates: &[(String, AdapterWeights)], sample: &[&[usize]]) -> Result<String> {
    if sample.is_empty() {
        return Err(Error::Empty("warm-start sample"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate adapters"));
    }
    let means: Vec<f64> = candidates
        .par_iter()
        .map(|(_, a)| Ok(perplexities(model, Some(a), sample)?.iter().sum::<f64>() / sample.len() as f64))
        .collect::<Result<_>>()?;
    let ids: Vec<String> = candidates.iter().map(|(id, _)| id.clone()).collect();
    Ok(ids[argmin_by_id(&ids, &means).expect("nonempty")].clone())
}

/// Stored task whose adapter gives the lowest mean perplexity on `sample`.
pub fn pick_warm_start(store: &LatentStore, model: &BackboneModel, sample: &[&[usize]]) -> Result<String> {
    let scale = store_scale(store)?;
    let candidates: Vec<(String, AdapterWeights)> = store
        .fetch_all()?
        .into_iter()
        .map(|s| Ok((s.task_id.clone(), s.to_weights(scale)?)))
        .collect::<Result<_>>()?;
    pick_warm_start_from(model, &candidates, sample)
}
