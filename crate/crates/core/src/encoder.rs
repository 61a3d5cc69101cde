//! Input projection and the sparse mixture-of-experts transformer encoder.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnSegment, AttnSpec, Graph, Var};
use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::ModelRegistry;
use crate::layers::{Attention, Linear, Mlp, Norm};
use crate::params::{sincos_2d, ParamId, ParamStore};
use crate::sampling::WINDOW_CELLS;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Expert FFN width; 4 x latent_dim when unset.
    pub expert_hidden: Option<usize>,
    /// Input projector hidden width; latent_dim when unset.
    pub proj_hidden: Option<usize>,
    /// 1-indexed layers whose outputs feed the decoder.
    pub tap_layers: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            latent_dim: 1536,
            num_layers: 6,
            num_heads: 8,
            num_experts: 4,
            top_k: 2,
            expert_hidden: None,
            proj_hidden: None,
            tap_layers: vec![2, 4, 6],
        }
    }
}

impl EncoderConfig {
    pub fn expert_hidden(&self) -> usize {
        self.expert_hidden.unwrap_or(4 * self.latent_dim)
    }

    pub fn proj_hidden(&self) -> usize {
        self.proj_hidden.unwrap_or(self.latent_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AstraError::Config(m));
        if self.latent_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.num_experts == 0 {
            return bad("encoder widths and counts must be positive".into());
        }
        if !self.latent_dim.is_multiple_of(self.num_heads) {
            return bad(format!("latent_dim {} not divisible by {} heads", self.latent_dim, self.num_heads));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return bad(format!("top_k {} must lie in [1, {}]", self.top_k, self.num_experts));
        }
        if self.tap_layers.len() != 3 {
            return bad(format!("expected 3 tap layers, got {}", self.tap_layers.len()));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers[0] == 0
            || *self.tap_layers.last().unwrap() > self.num_layers
        {
            return bad(format!("tap layers {:?} must increase within [1, {}]", self.tap_layers, self.num_layers));
        }
        Ok(())
    }
}

/// One crop's (or one tiling window's) tokens, all from the same model.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub model_id: usize,
    pub dim: usize,
    /// Row-major `n x dim`; filler rows are ignored.
    pub vectors: Vec<f32>,
    /// Local window positions in `[0, 256)`, distinct.
    pub positions: Vec<usize>,
    pub filler: Vec<bool>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Router output for one block, in token order.
#[derive(Clone, Debug)]
pub struct LayerRouting<T> {
    /// `n x E` router probabilities.
    pub probs: Tensor<T>,
    /// `n x top_k` selected experts, most probable first.
    pub selected: Vec<usize>,
    /// `n x top_k` renormalized gate weights.
    pub gates: Tensor<T>,
}

impl<T: Real> LayerRouting<T> {
    pub fn top1(&self, row: usize) -> usize {
        self.selected[row * self.gates.cols()]
    }
}

pub struct EncoderOutput<T> {
    /// Outputs of the tap layers, in order.
    pub taps: Vec<Var>,
    /// Final block output passed through the output norm.
    pub normed: Var,
    pub routing: Vec<LayerRouting<T>>,
    /// Load-balance loss averaged over blocks.
    pub aux: Var,
    pub segments: Vec<Range<usize>>,
    pub token_valid: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    router: Linear,
    experts: Vec<Mlp>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub dims: Vec<usize>,
    proj: Vec<Mlp>,
    filler: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm_out: Norm,
}

fn proj_prefix(registry: &ModelRegistry, k: usize) -> String {
    format!("input_proj.{}", registry.models[k].name)
}

impl Encoder {
    /// Registers fresh parameters and returns bound handles.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        registry: &ModelRegistry,
        rng: &mut impl Rng,
    ) -> Result<Encoder> {
        config.validate()?;
        let d = config.latent_dim;
        for spec in &registry.models {
            Mlp::init(store, &proj_prefix(registry, spec.model_id), (spec.embed_dim, config.proj_hidden(), d), rng);
        }
        store.normal("input_proj.filler", 1, d, 0.02, rng);
        store.insert("pos_embed", sincos_2d(16, d));
        for l in 1..=config.num_layers {
            let p = format!("enc.{l}");
            Norm::init(store, &format!("{p}.norm1"), d);
            Attention::init(store, &format!("{p}.attn"), d, rng);
            Norm::init(store, &format!("{p}.norm2"), d);
            Linear::init(store, format!("{p}.router.w"), None, d, config.num_experts, rng);
            for e in 0..config.num_experts {
                Mlp::init(store, &format!("{p}.expert{e}"), (d, config.expert_hidden(), d), rng);
            }
        }
        Norm::init(store, "enc.norm_out", d);
        Encoder::bind(store, config, registry)
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, config: &EncoderConfig, registry: &ModelRegistry) -> Result<Encoder> {
        config.validate()?;
        let proj = (0..registry.len()).map(|k| Mlp::bind(store, &proj_prefix(registry, k))).collect::<Result<_>>()?;
        let blocks = (1..=config.num_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                Ok(Block {
                    norm1: Norm::bind(store, &format!("{p}.norm1"))?,
                    attn: Attention::bind(store, &format!("{p}.attn"))?,
                    norm2: Norm::bind(store, &format!("{p}.norm2"))?,
                    router: Linear::bind(store, &format!("{p}.router.w"), None)?,
                    experts: (0..config.num_experts)
                        .map(|e| Mlp::bind(store, &format!("{p}.expert{e}")))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let enc = Encoder {
            config: config.clone(),
            dims: registry.dims(),
            proj,
            filler: store.require("input_proj.filler")?,
            pos: store.require("pos_embed")?,
            blocks,
            norm_out: Norm::bind(store, "enc.norm_out")?,
        };
        let (pr, pc) = store.value(enc.pos).shape();
        if (pr, pc) != (WINDOW_CELLS, config.latent_dim) {
            return Err(AstraError::Shape(format!("pos_embed is {pr}x{pc}")));
        }
        Ok(enc)
    }

    /// Projects one model's vectors into latent tokens (no positions, no fillers).
    pub fn project_input<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        model_id: usize,
        vectors: &Tensor<T>,
    ) -> Result<Var> {
        let Some(mlp) = self.proj.get(model_id) else {
            return Err(AstraError::invalid(format!("unknown model id {model_id}")));
        };
        if vectors.cols() != self.dims[model_id] {
            return Err(AstraError::DimensionMismatch {
                model_id,
                expected: self.dims[model_id],
                found: vectors.cols(),
            });
        }
        let x = g.constant(vectors.clone());
        Ok(mlp.forward(g, store, x))
    }

    fn check(&self, sets: &[TokenSet]) -> Result<()> {
        if sets.is_empty() {
            return Err(AstraError::invalid("no token sets"));
        }
        for (i, s) in sets.iter().enumerate() {
            if s.model_id >= self.dims.len() {
                return Err(AstraError::invalid(format!("unknown model id {}", s.model_id)));
            }
            if s.dim != self.dims[s.model_id] {
                return Err(AstraError::DimensionMismatch { model_id: s.model_id, expected: self.dims[s.model_id], found: s.dim });
            }
            let n = s.len();
            if n == 0 || n > WINDOW_CELLS || s.filler.len() != n || s.vectors.len() != n * s.dim {
                return Err(AstraError::Shape(format!("token set {i} is inconsistent ({n} positions)")));
            }
            let mut seen = [false; WINDOW_CELLS];
            for &p in &s.positions {
                if p >= WINDOW_CELLS {
                    return Err(AstraError::invalid(format!("position {p} outside the 16x16 window")));
                }
                if std::mem::replace(&mut seen[p], true) {
                    return Err(AstraError::invalid(format!("position {p} repeated in token set {i}")));
                }
            }
        }
        Ok(())
    }

    /// Builds the positioned token matrix for all sets, stacked in order.
    fn embed_tokens<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, sets: &[TokenSet]) -> Result<Var> {
        let n: usize = sets.iter().map(TokenSet::len).sum();
        let mut starts = Vec::with_capacity(sets.len());
        let mut acc = 0;
        for s in sets {
            starts.push(acc);
            acc += s.len();
        }
        let mut parts: Vec<Var> = Vec::new();
        for k in 0..self.dims.len() {
            let mut rows = Vec::new();
            let mut data = Vec::new();
            for (s, &start) in sets.iter().zip(&starts) {
                if s.model_id != k {
                    continue;
                }
                for i in 0..s.len() {
                    if !s.filler[i] {
                        rows.push(start + i);
                        data.extend(s.vectors[i * s.dim..(i + 1) * s.dim].iter().map(|&x| T::c(x as f64)));
                    }
                }
            }
            if rows.is_empty() {
                continue;
            }
            let input = Tensor::from_vec(rows.len(), self.dims[k], data);
            let y = self.project_input(g, store, k, &input)?;
            parts.push(g.scatter_rows(y, rows, n));
        }
        let filler_rows: Vec<usize> = sets
            .iter()
            .zip(&starts)
            .flat_map(|(s, &start)| (0..s.len()).filter(|&i| s.filler[i]).map(move |i| start + i))
            .collect();
        if !filler_rows.is_empty() {
            let f = g.param(store, self.filler);
            let f = g.gather_rows(f, vec![0; filler_rows.len()]);
            parts.push(g.scatter_rows(f, filler_rows, n));
        }
        let mut x = parts[0];
        for &p in &parts[1..] {
            x = g.add(x, p);
        }
        let pos = g.param(store, self.pos);
        let positions: Vec<usize> = sets.iter().flat_map(|s| s.positions.iter().copied()).collect();
        let pos = g.gather_rows(pos, positions);
        Ok(g.add(x, pos))
    }

    /// Runs the encoder over independent token sets; attention never crosses sets.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, sets: &[TokenSet]) -> Result<EncoderOutput<T>> {
        self.forward(g, store, sets, false)
    }

    /// Same network with every MoE layer replaced by expert 0 applied densely.
    pub fn encode_dense_reference<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        sets: &[TokenSet],
    ) -> Result<EncoderOutput<T>> {
        self.forward(g, store, sets, true)
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, sets: &[TokenSet], dense: bool) -> Result<EncoderOutput<T>> {
        self.check(sets)?;
        let mut segments = Vec::with_capacity(sets.len());
        let mut acc = 0;
        for s in sets {
            segments.push(acc..acc + s.len());
            acc += s.len();
        }
        let token_valid: Vec<bool> = sets.iter().flat_map(|s| s.filler.iter().map(|f| !f)).collect();
        let spec = AttnSpec {
            segments: segments.iter().map(|r| AttnSegment { q: r.clone(), k: r.clone() }).collect(),
            heads: self.config.num_heads,
            key_valid: Some(token_valid.clone()),
        };
        let mut x = self.embed_tokens(g, store, sets)?;
        let mut taps = Vec::with_capacity(3);
        let mut routing = Vec::with_capacity(self.blocks.len());
        let mut aux_terms = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let h = block.norm1.forward(g, store, x);
            let a = block.attn.forward(g, store, h, h, spec.clone());
            x = g.add(x, a);
            let h = block.norm2.forward(g, store, x);
            let ffn = if dense {
                block.experts[0].forward(g, store, h)
            } else {
                let (y, rec, aux) = self.moe(g, store, block, h, &token_valid);
                routing.push(rec);
                aux_terms.push(aux);
                y
            };
            x = g.add(x, ffn);
            if self.config.tap_layers.contains(&(l + 1)) {
                taps.push(x);
            }
        }
        let normed = self.norm_out.forward(g, store, x);
        let aux = if aux_terms.is_empty() {
            g.constant(Tensor::zeros(1, 1))
        } else {
            let mut s = aux_terms[0];
            for &t in &aux_terms[1..] {
                s = g.add(s, t);
            }
            g.scale(s, T::c(1.0 / aux_terms.len() as f64))
        };
        Ok(EncoderOutput { taps, normed, routing, aux, segments, token_valid })
    }

    fn moe<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &Block,
        h: Var,
        token_valid: &[bool],
    ) -> (Var, LayerRouting<T>, Var) {
        let (n, _) = g.shape(h);
        let (e_count, k) = (self.config.num_experts, self.config.top_k);
        let logits = block.router.forward(g, store, h);
        let probs = g.softmax_rows(logits);
        let pv = g.value(probs).clone();
        let mut selected = Vec::with_capacity(n * k);
        for r in 0..n {
            selected.extend(top_k(pv.row(r), k));
        }
        let flat: Vec<usize> = (0..n * k).map(|i| (i / k) * e_count + selected[i]).collect();
        let sel_logits = g.select(logits, flat, n, k);
        let gates = g.softmax_rows(sel_logits);

        let mut out: Option<Var> = None;
        for e in 0..e_count {
            let slots: Vec<usize> = (0..n * k).filter(|&i| selected[i] == e).collect();
            if slots.is_empty() {
                continue;
            }
            let rows: Vec<usize> = slots.iter().map(|&i| i / k).collect();
            let xe = g.gather_rows(h, rows.clone());
            let ye = block.experts[e].forward(g, store, xe);
            let ge = g.select(gates, slots, rows.len(), 1);
            let ye = g.scale_rows(ye, ge);
            let contrib = g.scatter_rows(ye, rows, n);
            out = Some(match out {
                None => contrib,
                Some(o) => g.add(o, contrib),
            });
        }
        let out = out.expect("every token selects at least one expert");

        let valid_n = token_valid.iter().filter(|&&v| v).count().max(1);
        let mut frac = vec![0.0f64; e_count];
        for r in (0..n).filter(|&r| token_valid[r]) {
            frac[selected[r * k]] += 1.0 / valid_n as f64;
        }
        let weights = Tensor::from_fn(n, e_count, |r, e| {
            if token_valid[r] {
                T::c(e_count as f64 * frac[e] / valid_n as f64)
            } else {
                T::zero()
            }
        });
        let w = g.constant(weights);
        let wp = g.mul(probs, w);
        let aux = g.sum(wp);

        let record = LayerRouting { probs: pv, selected, gates: g.value(gates).clone() };
        (out, record, aux)
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn top_k<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `E * sum_e f_e * P_e` over routed tokens, where `f_e` is the top-1 share of
/// expert `e` and `P_e` its mean router probability.
pub fn load_balance_loss(probs: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = probs.first() else {
        return Err(AstraError::invalid("no routed tokens"));
    };
    let e = first.len();
    let n = probs.len() as f64;
    let mut f = vec![0.0; e];
    let mut p = vec![0.0; e];
    for row in probs {
        if row.len() != e {
            return Err(AstraError::Shape("ragged router probabilities".into()));
        }
        f[top_k(row, 1)[0]] += 1.0;
        for (acc, &x) in p.iter_mut().zip(row) {
            *acc += x;
        }
    }
    Ok(e as f64 * f.iter().zip(&p).map(|(fi, pi)| (fi / n) * (pi / n)).sum::<f64>())
}
