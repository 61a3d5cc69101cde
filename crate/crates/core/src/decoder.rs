//! Three-block cross-attention decoder over encoder taps and the masked
//! multi-target reconstruction objective.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSegment, AttnSpec, Graph, Var};
use crate::encoder::TokenSet;
use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::ModelRegistry;
use crate::layers::{Attention, Linear, Mlp, Norm};
use crate::params::{sincos_2d, ParamId, ParamStore};
use crate::sampling::{ModelTargets, WINDOW_CELLS};
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 3;
pub const COSINE_EPS: f64 = 1e-8;
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub decoder_dim: usize,
    pub num_heads: usize,
    /// Feed-forward width; 2 x decoder_dim when unset.
    pub ffn_hidden: Option<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { decoder_dim: 512, num_heads: 4, ffn_hidden: None }
    }
}

impl DecoderConfig {
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(2 * self.decoder_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder_dim == 0 || self.num_heads == 0 || !self.decoder_dim.is_multiple_of(self.num_heads) {
            return Err(AstraError::Config(format!(
                "decoder_dim {} must be a positive multiple of num_heads {}",
                self.decoder_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    tap_norm: Norm,
    tap_proj: Linear,
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ffn_norm: Norm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub dims: Vec<usize>,
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm_out: Norm,
    heads: Vec<Linear>,
}

pub struct DecoderOutput {
    /// `Q x decoder_dim` final query states (after the output norm).
    pub states: Var,
    pub query_segments: Vec<Range<usize>>,
    /// Per block: the projected key/value input.
    pub kv: Vec<Var>,
    /// Per block: query states after the block.
    pub block_out: Vec<Var>,
}

fn head_prefix(registry: &ModelRegistry, k: usize) -> String {
    format!("out_head.{}", registry.models[k].name)
}

impl Decoder {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        config: &DecoderConfig,
        latent_dim: usize,
        registry: &ModelRegistry,
        rng: &mut impl Rng,
    ) -> Result<Decoder> {
        config.validate()?;
        let d = config.decoder_dim;
        store.normal("mask_token", 1, d, 0.02, rng);
        store.insert("dec.pos_embed", sincos_2d(16, d));
        for b in 1..=NUM_BLOCKS {
            let p = format!("dec.{b}");
            Norm::init(store, &format!("{p}.tap_proj.norm"), latent_dim);
            Linear::init(store, format!("{p}.tap_proj.w"), Some(format!("{p}.tap_proj.b")), latent_dim, d, rng);
            Norm::init(store, &format!("{p}.q_self.norm"), d);
            Attention::init(store, &format!("{p}.q_self"), d, rng);
            Norm::init(store, &format!("{p}.xattn.norm"), d);
            Attention::init(store, &format!("{p}.xattn"), d, rng);
            Norm::init(store, &format!("{p}.ffn.norm"), d);
            Mlp::init(store, &format!("{p}.ffn"), (d, config.ffn_hidden(), d), rng);
        }
        Norm::init(store, "dec.norm_out", d);
        for spec in &registry.models {
            let p = head_prefix(registry, spec.model_id);
            Linear::init(store, format!("{p}.w"), Some(format!("{p}.b")), d, spec.embed_dim, rng);
        }
        Decoder::bind(store, config, registry)
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, config: &DecoderConfig, registry: &ModelRegistry) -> Result<Decoder> {
        config.validate()?;
        let blocks = (1..=NUM_BLOCKS)
            .map(|b| {
                let p = format!("dec.{b}");
                Ok(Block {
                    tap_norm: Norm::bind(store, &format!("{p}.tap_proj.norm"))?,
                    tap_proj: Linear::bind(store, &format!("{p}.tap_proj.w"), Some(&format!("{p}.tap_proj.b")))?,
                    self_norm: Norm::bind(store, &format!("{p}.q_self.norm"))?,
                    self_attn: Attention::bind(store, &format!("{p}.q_self"))?,
                    cross_norm: Norm::bind(store, &format!("{p}.xattn.norm"))?,
                    cross_attn: Attention::bind(store, &format!("{p}.xattn"))?,
                    ffn_norm: Norm::bind(store, &format!("{p}.ffn.norm"))?,
                    ffn: Mlp::bind(store, &format!("{p}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        let heads = (0..registry.len())
            .map(|k| {
                let p = head_prefix(registry, k);
                Linear::bind(store, &format!("{p}.w"), Some(&format!("{p}.b")))
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            config: config.clone(),
            dims: registry.dims(),
            mask_token: store.require("mask_token")?,
            pos: store.require("dec.pos_embed")?,
            blocks,
            norm_out: Norm::bind(store, "dec.norm_out")?,
            heads,
        })
    }

    /// Decodes mask queries for every set. `taps` hold the encoder states of
    /// the stacked visible tokens of `sets`; `masked[i]` lists set `i`'s
    /// masked positions.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        taps: &[Var],
        sets: &[TokenSet],
        masked: &[Vec<usize>],
    ) -> Result<DecoderOutput> {
        if taps.len() != NUM_BLOCKS {
            return Err(AstraError::Shape(format!("expected {NUM_BLOCKS} tap states, got {}", taps.len())));
        }
        if masked.len() != sets.len() {
            return Err(AstraError::Shape(format!("{} masked sets for {} token sets", masked.len(), sets.len())));
        }
        let n_keys: usize = sets.iter().map(TokenSet::len).sum();
        for &t in taps {
            if g.shape(t).0 != n_keys {
                return Err(AstraError::Shape(format!("tap has {} rows, token sets hold {n_keys}", g.shape(t).0)));
            }
        }
        let mut query_segments = Vec::with_capacity(sets.len());
        let mut key_segments = Vec::with_capacity(sets.len());
        let (mut q_acc, mut k_acc) = (0, 0);
        for (i, (s, m)) in sets.iter().zip(masked).enumerate() {
            let mut seen = [false; WINDOW_CELLS];
            for &p in m {
                if p >= WINDOW_CELLS {
                    return Err(AstraError::invalid(format!("masked position {p} outside the window")));
                }
                if std::mem::replace(&mut seen[p], true) {
                    return Err(AstraError::invalid(format!("masked position {p} repeated in set {i}")));
                }
            }
            query_segments.push(q_acc..q_acc + m.len());
            key_segments.push(k_acc..k_acc + s.len());
            q_acc += m.len();
            k_acc += s.len();
        }
        if q_acc == 0 {
            return Err(AstraError::invalid("no masked positions to decode"));
        }
        let key_valid: Vec<bool> = sets.iter().flat_map(|s| s.filler.iter().map(|f| !f)).collect();
        let heads = self.config.num_heads;
        let self_spec = AttnSpec {
            segments: query_segments.iter().map(|r| AttnSegment { q: r.clone(), k: r.clone() }).collect(),
            heads,
            key_valid: None,
        };
        let cross_spec = AttnSpec {
            segments: query_segments
                .iter()
                .zip(&key_segments)
                .map(|(q, k)| AttnSegment { q: q.clone(), k: k.clone() })
                .collect(),
            heads,
            key_valid: Some(key_valid),
        };

        let pos = g.param(store, self.pos);
        let q_pos = g.gather_rows(pos, masked.iter().flatten().copied().collect());
        let k_pos = g.gather_rows(pos, sets.iter().flat_map(|s| s.positions.iter().copied()).collect());
        let mask = g.param(store, self.mask_token);
        let mask = g.gather_rows(mask, vec![0; q_acc]);
        let mut x = g.add(mask, q_pos);

        let mut kv = Vec::with_capacity(NUM_BLOCKS);
        let mut block_out = Vec::with_capacity(NUM_BLOCKS);
        for (block, &tap) in self.blocks.iter().zip(taps) {
            let t = block.tap_norm.forward(g, store, tap);
            let t = block.tap_proj.forward(g, store, t);
            let keys = g.add(t, k_pos);
            kv.push(keys);

            let h = block.self_norm.forward(g, store, x);
            let a = block.self_attn.forward(g, store, h, h, self_spec.clone());
            x = g.add(x, a);
            let h = block.cross_norm.forward(g, store, x);
            let a = block.cross_attn.forward(g, store, h, keys, cross_spec.clone());
            x = g.add(x, a);
            let h = block.ffn_norm.forward(g, store, x);
            let f = block.ffn.forward(g, store, h);
            x = g.add(x, f);
            block_out.push(x);
        }
        let states = self.norm_out.forward(g, store, x);
        Ok(DecoderOutput { states, query_segments, kv, block_out })
    }

    /// Model `k`'s predictions for the given query rows.
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, states: Var, k: usize, rows: Vec<usize>) -> Result<Var> {
        let Some(head) = self.heads.get(k) else {
            return Err(AstraError::invalid(format!("unknown model id {k}")));
        };
        let x = g.gather_rows(states, rows);
        Ok(head.forward(g, store, x))
    }

    pub fn head(&self, k: usize) -> &Linear {
        &self.heads[k]
    }
}

/// Per-model masked cosine statistics from one objective evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconStats {
    /// Mean cosine similarity over all supervised rows, per model.
    pub mean_cosine: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Graph form of the reconstruction loss, averaged over sets with at least one
/// supervised position. `targets[i]` holds set `i`'s per-model targets.
pub fn recon_loss_graph<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    decoder: &Decoder,
    out: &DecoderOutput,
    masked: &[Vec<usize>],
    targets: &[Vec<ModelTargets>],
) -> Result<(Var, ReconStats)> {
    let m = decoder.dims.len();
    if targets.len() != masked.len() {
        return Err(AstraError::Shape("targets and masked sets differ in length".into()));
    }
    let contributing: Vec<usize> = targets.iter().map(|t| t.iter().filter(|mt| !mt.positions.is_empty()).count()).collect();
    let live_sets = contributing.iter().filter(|&&c| c > 0).count();
    if live_sets == 0 {
        return Err(AstraError::invalid("no supervisable masked positions"));
    }
    let mut total: Option<Var> = None;
    let mut stats = ReconStats { mean_cosine: vec![None; m], counts: vec![0; m] };
    for k in 0..m {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        let mut data: Vec<T> = Vec::new();
        for (i, set_targets) in targets.iter().enumerate() {
            let Some(t) = set_targets.iter().find(|t| t.model_id == k) else { continue };
            if t.positions.is_empty() {
                continue;
            }
            if t.dim != decoder.dims[k] || t.vectors.len() != t.positions.len() * t.dim {
                return Err(AstraError::DimensionMismatch { model_id: k, expected: decoder.dims[k], found: t.dim });
            }
            let w = 1.0 / (live_sets * contributing[i] * t.positions.len()) as f64;
            for &p in &t.positions {
                let Some(j) = masked[i].iter().position(|&q| q == p) else {
                    return Err(AstraError::invalid(format!("target position {p} is not masked in set {i}")));
                };
                rows.push(out.query_segments[i].start + j);
                weights.push(T::c(w));
            }
            data.extend(t.vectors.iter().map(|&x| T::c(x as f64)));
        }
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        let pred = decoder.predict(g, store, out.states, k, rows)?;
        let tgt = g.constant(Tensor::from_vec(n, decoder.dims[k], data));
        let cos = g.row_cosine(pred, tgt, T::c(COSINE_EPS));
        let cv = g.value(cos);
        stats.mean_cosine[k] = Some(cv.data().iter().map(|x| x.f64()).sum::<f64>() / n as f64);
        stats.counts[k] = n;
        let w = g.constant(Tensor::from_vec(n, 1, weights));
        let wc = g.mul(cos, w);
        let s = g.sum(wc);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    let one = g.constant(Tensor::full(1, 1, T::one()));
    let loss = g.sub(one, total.expect("at least one live set"));
    Ok((loss, stats))
}

/// Cosine similarity with the norm product floored at `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(eps)
}

/// Mean cosine distance per model over its supervised rows, averaged over the
/// models that have any. `predictions[k]` and `targets[k]` are row lists.
pub fn recon_loss(predictions: &[Vec<Vec<f64>>], targets: &[Vec<Vec<f64>>]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(AstraError::Shape("prediction and target model counts differ".into()));
    }
    let mut sum = 0.0;
    let mut models = 0;
    for (k, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.len() != t.len() {
            return Err(AstraError::Shape(format!("model {k}: {} predictions for {} targets", p.len(), t.len())));
        }
        if p.is_empty() {
            continue;
        }
        sum += p.iter().zip(t).map(|(a, b)| 1.0 - cosine(a, b, COSINE_EPS)).sum::<f64>() / p.len() as f64;
        models += 1;
    }
    if models == 0 {
        return Err(AstraError::invalid("no supervisable masked positions"));
    }
    Ok(sum / models as f64)
}

/// `L_recon + lambda * L_moe`.
pub fn total_pretrain_loss(l_recon: f64, l_moe: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(AstraError::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(l_recon + lambda * l_moe)
}
