//! Contrastive slide-text alignment of the ABMIL head.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::SlideGrid;
use crate::model::{contextualize_slide, slide_token_sets, Network, ABMIL_PREFIX};
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::Tensor;
use crate::text::{abmil_aggregate, symmetric_contrastive, text_encoder_from_name, TextEncoder};
use crate::train::checkpoint::{Checkpoint, RngState, Stage};
use crate::train::config::AstraConfig;
use crate::train::optim::{clip_global_norm, collect_grads, Adam, Decay};
use crate::train::schedule::WarmupCosine;

/// Parameter-name prefixes of the slide encoder (unfrozen on request).
const ENCODER_PREFIXES: [&str; 3] = ["input_proj.", "pos_embed", "enc."];

/// Contextualized tiles of one slide with its prompt.
#[derive(Clone, Debug)]
pub struct SlideBag<T> {
    pub slide_id: String,
    pub cells: Vec<usize>,
    pub tiles: Tensor<T>,
    pub prompt: String,
}

pub fn slide_prompt(grid: &SlideGrid) -> Result<String> {
    grid.record
        .as_ref()
        .map(|r| r.prompt.clone())
        .ok_or_else(|| AstraError::Missing(format!("slide record for {}", grid.slide_id)))
}

/// Runs the encoder over every slide once.
pub fn slide_bags<T: Real>(
    store: &ParamStore<T>,
    net: &Network,
    slides: &[SlideGrid],
    input_model: usize,
) -> Result<Vec<SlideBag<T>>> {
    slides
        .iter()
        .map(|grid| {
            let ctx = contextualize_slide(net, store, grid, input_model)?;
            Ok(SlideBag { slide_id: grid.slide_id.clone(), cells: ctx.cells, tiles: ctx.embeddings, prompt: slide_prompt(grid)? })
        })
        .collect()
}

/// Optimization steps per epoch with the incomplete final batch dropped.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    if batch < 2 {
        0
    } else {
        n / batch
    }
}

/// Encodes each distinct prompt once.
pub fn encode_prompts(encoder: &dyn TextEncoder, prompts: impl IntoIterator<Item = String>) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for p in prompts {
        if let std::collections::btree_map::Entry::Vacant(slot) = out.entry(p) {
            let v = encoder.encode(slot.key());
            slot.insert(v);
        }
    }
    out
}

pub struct AlignRun<T> {
    pub store: ParamStore<T>,
    pub net: Network,
    /// Loss of every optimization step.
    pub losses: Vec<f64>,
    pub warnings: Vec<String>,
    pub checkpoint: Checkpoint<T>,
}

/// Trains the slide head (and the encoder when unfrozen) under the
/// symmetric contrastive loss.
pub fn align<T: Real>(
    slides: &[SlideGrid],
    mut store: ParamStore<T>,
    mut net: Network,
    cfg: &AstraConfig,
    seed: u64,
    mut trace_sink: Option<&mut dyn Write>,
) -> Result<AlignRun<T>> {
    let a = &cfg.align;
    let input_model = cfg.input_model();
    let text = text_encoder_from_name(&a.text_encoder, a.text_seed)?;
    let prompts = slides.iter().map(slide_prompt).collect::<Result<Vec<_>>>()?;
    let text_vecs = encode_prompts(text.as_ref(), prompts.iter().cloned());

    let mut rng = seed::rng(seed, &[seed::hash_str("align")]);
    if net.abmil.is_none() {
        net.add_slide_head(&mut store, a.dropout, &mut rng);
    }
    let head = net.slide_head()?.clone();
    store.set_frozen_prefix("", true);
    store.set_frozen_prefix(ABMIL_PREFIX, false);
    if !a.freeze_encoder {
        for p in ENCODER_PREFIXES {
            store.set_frozen_prefix(p, false);
        }
    }

    let bags = if a.freeze_encoder { Some(slide_bags(&store, &net, slides, input_model)?) } else { None };
    let spe = steps_per_epoch(slides.len(), a.batch_size);
    let total = spe * a.epochs;
    let mut warnings = Vec::new();
    if spe == 0 {
        warnings.push(format!(
            "every epoch skipped: {} slides cannot fill a batch of {} (B >= 2 required)",
            slides.len(),
            a.batch_size
        ));
    }
    let schedule = if total > 0 { Some(WarmupCosine::cosine(a.lr, total)?) } else { None };
    let mut opt = Adam::new(a.weight_decay, Decay::Decoupled, (0.9, 0.999));
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..slides.len()).collect();
    let mut step = 0;
    for epoch in 0..a.epochs {
        if spe == 0 {
            break;
        }
        order.shuffle(&mut rng);
        for batch in order.chunks_exact(a.batch_size) {
            step += 1;
            let mut g = Graph::new();
            let mut rows = Vec::with_capacity(batch.len());
            for &i in batch {
                let bag = match &bags {
                    Some(bags) => g.constant(bags[i].tiles.clone()),
                    None => {
                        let (sets, _) = slide_token_sets(&slides[i], input_model)?;
                        net.encoder.encode(&mut g, &store, &sets)?.normed
                    }
                };
                let (slide, _) = head.forward(&mut g, &store, bag, Some(&mut rng))?;
                rows.push(slide);
            }
            let s = g.concat_rows(rows);
            let s = g.l2_normalize_rows(s, T::zero());
            let t = Tensor::from_fn(batch.len(), text.dim(), |r, c| T::c(text_vecs[&prompts[batch[r]]][c]));
            let t = g.constant(t);
            let loss = symmetric_contrastive(&mut g, s, t, a.tau)?;
            let value = g.value(loss).scalar().f64();
            if !value.is_finite() {
                return Err(AstraError::Divergence { step });
            }
            let grads = g.backward(loss);
            let mut grads = collect_grads(&store, &grads);
            drop(g);
            clip_global_norm(&mut grads, a.grad_clip);
            let lr = schedule.as_ref().map_or(0.0, |s| s.lr(step));
            opt.step(&mut store, &grads, lr);
            if let Some(sink) = trace_sink.as_deref_mut() {
                writeln!(sink, "{}", serde_json::json!({ "step": step, "epoch": epoch + 1, "loss": value, "lr": lr }))?;
                sink.flush()?;
            }
            losses.push(value);
        }
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        stage: Stage::Align,
        step: step as u64,
        rng: RngState::capture(&rng),
        params: store.clone(),
    };
    Ok(AlignRun { store, net, losses, warnings, checkpoint })
}

/// Unit slide embeddings of every bag (evaluation mode).
pub fn slide_embeddings<T: Real>(store: &ParamStore<T>, net: &Network, bags: &[SlideBag<T>]) -> Result<Vec<Vec<f64>>> {
    let head = net.slide_head()?;
    bags.iter()
        .map(|b| Ok(abmil_aggregate(head, store, &b.tiles)?.0.iter().map(|x| x.f64()).collect()))
        .collect()
}

/// Fraction of slides whose most similar prompt, among the distinct prompts
/// of the cohort, is their own. Ties go to the lexicographically first prompt.
pub fn retrieval_top1<T: Real>(
    store: &ParamStore<T>,
    net: &Network,
    bags: &[SlideBag<T>],
    text: &dyn TextEncoder,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(AstraError::invalid("retrieval needs at least one slide"));
    }
    let prompts = encode_prompts(text, bags.iter().map(|b| b.prompt.clone()));
    let embs = slide_embeddings(store, net, bags)?;
    let mut hits = 0;
    for (bag, s) in bags.iter().zip(&embs) {
        let mut best: Option<(&String, f64)> = None;
        for (p, t) in &prompts {
            let sim = crate::text::dot(s, t);
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((p, sim));
            }
        }
        if best.map(|(p, _)| p) == Some(&bag.prompt) {
            hits += 1;
        }
    }
    Ok(hits as f64 / bags.len() as f64)
}
