//! The assembled network: encoder, decoder and (after alignment) the ABMIL
//! slide head, plus whole-slide contextualization.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::decoder::{recon_loss_graph, Decoder, DecoderConfig, ReconStats};
use crate::encoder::{Encoder, EncoderConfig, TokenSet};
use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::{ModelRegistry, SlideGrid};
use crate::params::ParamStore;
use crate::sampling::{CropBatch, WINDOW, WINDOW_CELLS};
use crate::tensor::Tensor;
use crate::text::{AbmilHead, TEXT_DIM};

pub const ABMIL_PREFIX: &str = "align.abmil";
pub const ABMIL_HIDDEN: usize = 256;

#[derive(Clone, Debug)]
pub struct Network {
    pub registry: ModelRegistry,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub abmil: Option<AbmilHead>,
}

impl Network {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        enc: &EncoderConfig,
        dec: &DecoderConfig,
        registry: &ModelRegistry,
        rng: &mut impl Rng,
    ) -> Result<Network> {
        let encoder = Encoder::init(store, enc, registry, rng)?;
        let decoder = Decoder::init(store, dec, enc.latent_dim, registry, rng)?;
        Ok(Network { registry: registry.clone(), encoder, decoder, abmil: None })
    }

    /// Rebinds handles to a loaded store; the slide head is bound when present.
    pub fn bind<T: Real>(
        store: &ParamStore<T>,
        enc: &EncoderConfig,
        dec: &DecoderConfig,
        registry: &ModelRegistry,
        dropout: f64,
    ) -> Result<Network> {
        let abmil = match store.id(&format!("{ABMIL_PREFIX}.v.w")) {
            Some(_) => Some(AbmilHead::bind(store, ABMIL_PREFIX, dropout)?),
            None => None,
        };
        Ok(Network {
            registry: registry.clone(),
            encoder: Encoder::bind(store, enc, registry)?,
            decoder: Decoder::bind(store, dec, registry)?,
            abmil,
        })
    }

    /// Adds a freshly initialized slide head (latent -> 512).
    pub fn add_slide_head<T: Real>(&mut self, store: &mut ParamStore<T>, dropout: f64, rng: &mut impl Rng) {
        let d = self.encoder.config.latent_dim;
        self.abmil = Some(AbmilHead::new(store, ABMIL_PREFIX, d, ABMIL_HIDDEN, TEXT_DIM, dropout, rng));
    }

    pub fn slide_head(&self) -> Result<&AbmilHead> {
        self.abmil.as_ref().ok_or_else(|| AstraError::Missing("slide projection head (run alignment first)".into()))
    }
}

pub fn crop_token_set(batch: &CropBatch) -> TokenSet {
    TokenSet {
        model_id: batch.input_model,
        dim: batch.input_dim,
        vectors: batch.visible_embeddings.clone(),
        positions: batch.visible_idx.clone(),
        filler: batch.filler.clone(),
    }
}

pub struct PretrainTerms {
    pub loss: Var,
    pub recon: Var,
    pub aux: Var,
    pub stats: ReconStats,
}

/// `L_recon + lambda * L_moe` over a batch of crops.
pub fn pretrain_objective<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &Network,
    crops: &[CropBatch],
    lambda: f64,
) -> Result<PretrainTerms> {
    let sets: Vec<TokenSet> = crops.iter().map(crop_token_set).collect();
    let masked: Vec<Vec<usize>> = crops.iter().map(|c| c.masked_idx.clone()).collect();
    let targets: Vec<_> = crops.iter().map(|c| c.targets.clone()).collect();
    let enc = net.encoder.encode(g, store, &sets)?;
    let dec = net.decoder.decode(g, store, &enc.taps, &sets, &masked)?;
    let (recon, stats) = recon_loss_graph(g, store, &net.decoder, &dec, &masked, &targets)?;
    let weighted = g.scale(enc.aux, T::c(lambda));
    let loss = g.add(recon, weighted);
    Ok(PretrainTerms { loss, recon, aux: enc.aux, stats })
}

/// Contextualized tissue-cell embeddings of one slide.
#[derive(Clone, Debug)]
pub struct SlideContext<T> {
    /// Grid cell of each row, ascending within each window.
    pub cells: Vec<usize>,
    /// `n x latent_dim`, after the encoder output norm.
    pub embeddings: Tensor<T>,
    /// `n x E` router probabilities of the final block.
    pub final_probs: Tensor<T>,
}

/// Tiles the slide into 16x16 windows (stride 16, empty windows skipped),
/// one unmasked token set per window. Tissue cells lacking the input model's
/// embedding enter as filler tokens. Returns the sets and each row's grid cell.
pub fn slide_token_sets(grid: &SlideGrid, input_model: usize) -> Result<(Vec<TokenSet>, Vec<usize>)> {
    if input_model >= grid.num_models() {
        return Err(AstraError::invalid(format!("input model {input_model} not present in slide {}", grid.slide_id)));
    }
    let dim = grid.planes[input_model].dim;
    let mut sets = Vec::new();
    let mut cells = Vec::new();
    for wr in (0..grid.height).step_by(WINDOW) {
        for wc in (0..grid.width).step_by(WINDOW) {
            let mut set = TokenSet { model_id: input_model, dim, vectors: Vec::new(), positions: Vec::new(), filler: Vec::new() };
            for local in 0..WINDOW_CELLS {
                let (c, r) = (wc + local % WINDOW, wr + local / WINDOW);
                if c >= grid.width || r >= grid.height || !grid.is_tissue(c, r) {
                    continue;
                }
                let cell = grid.cell(c, r);
                match grid.embedding(input_model, cell) {
                    Some(v) => {
                        set.vectors.extend_from_slice(v);
                        set.filler.push(false);
                    }
                    None => {
                        set.vectors.extend(std::iter::repeat_n(0.0, dim));
                        set.filler.push(true);
                    }
                }
                set.positions.push(local);
                cells.push(cell);
            }
            if !set.is_empty() {
                sets.push(set);
            }
        }
    }
    if sets.is_empty() {
        return Err(AstraError::invalid(format!("slide {} has no tissue cells", grid.slide_id)));
    }
    Ok((sets, cells))
}

/// Encodes every tissue cell of the slide without masking.
pub fn contextualize_slide<T: Real>(
    net: &Network,
    store: &ParamStore<T>,
    grid: &SlideGrid,
    input_model: usize,
) -> Result<SlideContext<T>> {
    let (sets, cells) = slide_token_sets(grid, input_model)?;
    let mut g = Graph::inference();
    let out = net.encoder.encode(&mut g, store, &sets)?;
    let final_probs = out.routing.last().map(|r| r.probs.clone()).unwrap_or_else(|| Tensor::zeros(cells.len(), 0));
    Ok(SlideContext { cells, embeddings: g.value(out.normed).clone(), final_probs })
}
