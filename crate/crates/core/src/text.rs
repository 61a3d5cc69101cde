//! Structured prompts, text encoding, gated attention pooling and the
//! symmetric contrastive objective.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::{Category, SlideRecord};
use crate::params::{ParamId, ParamStore};
use crate::seed;
use crate::tensor::Tensor;

pub const TEXT_DIM: usize = 512;
const PREFIX: &str = "A histopathology whole-slide image";

/// Renders the fixed template for the record's classification category.
pub fn build_prompt(record: &SlideRecord) -> Result<String> {
    let site = record.anatomic_site.as_str();
    if site.is_empty() {
        return Err(AstraError::invalid("anatomic site is empty"));
    }
    let cancer = record.cancer_type.as_deref().filter(|s| !s.is_empty());
    let category = record.classification_category;
    match (category.needs_cancer_type(), cancer) {
        (true, None) => return Err(AstraError::invalid(format!("{category} record requires a cancer type"))),
        (false, Some(t)) => {
            return Err(AstraError::invalid(format!("{category} record must not carry a cancer type (got {t:?})")))
        }
        _ => {}
    }
    Ok(match category {
        Category::Malignant => format!("{PREFIX} of malignant {} from the {site}.", cancer.unwrap_or_default()),
        Category::NormalAdjacent => format!("{PREFIX} showing normal adjacent tissue from the {site}."),
        Category::Benign => format!("{PREFIX} of benign {} from the {site}.", cancer.unwrap_or_default()),
        Category::Normal => format!("{PREFIX} of normal tissue from the {site}."),
    })
}

/// A frozen text encoder producing unit-norm vectors.
pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Deterministic stand-in text encoder: signed token hashing followed by a
/// fixed Gaussian projection and unit normalization.
#[derive(Clone, Debug)]
pub struct MockTextEncoder {
    pub seed: u64,
    pub dim: usize,
    pub buckets: u64,
}

impl MockTextEncoder {
    pub fn new(seed: u64) -> Self {
        MockTextEncoder { seed, dim: TEXT_DIM, buckets: 1 << 16 }
    }

    fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !(c.is_alphanumeric() || c == '-')).filter(|t| !t.is_empty()).map(str::to_lowercase)
    }
}

impl TextEncoder for MockTextEncoder {
    fn name(&self) -> &str {
        "mock"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0f64; self.dim];
        for tok in Self::tokens(text) {
            let h = seed::derive(self.seed, &[seed::hash_str(&tok)]);
            let bucket = h % self.buckets;
            let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
            let mut rng = seed::rng(self.seed, &[0x7E47, bucket]);
            for x in v.iter_mut() {
                let g: f64 = StandardNormal.sample(&mut rng);
                *x += sign * g;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v[0] = 1.0;
        }
        v
    }
}

pub fn mock_text_encode(s: &str, seed: u64) -> Vec<f64> {
    MockTextEncoder::new(seed).encode(s)
}

/// Resolves the encoder named in config.
pub fn text_encoder_from_name(name: &str, seed: u64) -> Result<Box<dyn TextEncoder>> {
    match name {
        "mock" => Ok(Box::new(MockTextEncoder::new(seed))),
        other => Err(AstraError::Config(format!("unknown text encoder {other:?}"))),
    }
}

/// Gated attention MIL pooling followed by a linear slide projection.
#[derive(Clone, Debug)]
pub struct AbmilHead {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub dropout: f64,
    v_w: ParamId,
    v_b: ParamId,
    u_w: ParamId,
    u_b: ParamId,
    w_w: ParamId,
    w_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl AbmilHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        AbmilHead {
            in_dim,
            hidden,
            out_dim,
            dropout,
            v_w: store.linear_weight(format!("{prefix}.v.w"), in_dim, hidden, rng),
            v_b: store.zeros(format!("{prefix}.v.b"), 1, hidden),
            u_w: store.linear_weight(format!("{prefix}.u.w"), in_dim, hidden, rng),
            u_b: store.zeros(format!("{prefix}.u.b"), 1, hidden),
            w_w: store.linear_weight(format!("{prefix}.w.w"), hidden, 1, rng),
            w_b: store.zeros(format!("{prefix}.w.b"), 1, 1),
            proj_w: store.linear_weight(format!("{prefix}.proj.w"), in_dim, out_dim, rng),
            proj_b: store.zeros(format!("{prefix}.proj.b"), 1, out_dim),
        }
    }

    /// Re-binds handles to an existing store (e.g. after loading a checkpoint).
    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, dropout: f64) -> Result<Self> {
        let id = |s: &str| store.require(&format!("{prefix}.{s}"));
        let v_w = id("v.w")?;
        let proj_w = id("proj.w")?;
        let (in_dim, hidden) = store.value(v_w).shape();
        Ok(AbmilHead {
            in_dim,
            hidden,
            out_dim: store.value(proj_w).cols(),
            dropout,
            v_w,
            v_b: id("v.b")?,
            u_w: id("u.w")?,
            u_b: id("u.b")?,
            w_w: id("w.w")?,
            w_b: id("w.b")?,
            proj_w,
            proj_b: id("proj.b")?,
        })
    }

    /// Pools an `N x in_dim` bag; returns the unnormalized `1 x out_dim`
    /// projection and the `1 x N` attention weights. `dropout_rng` enables
    /// training-mode dropout on the gated hidden units.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bag: Var,
        dropout_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Var, Var)> {
        let (n, d) = g.shape(bag);
        if n == 0 {
            return Err(AstraError::invalid("cannot pool an empty bag"));
        }
        if d != self.in_dim {
            return Err(AstraError::Shape(format!("bag width {d}, head expects {}", self.in_dim)));
        }
        let lin = |g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId| {
            let (w, b) = (g.param(store, w), g.param(store, b));
            let y = g.matmul(x, w);
            g.add_bias(y, b)
        };
        let v = lin(g, bag, self.v_w, self.v_b);
        let v = g.tanh(v);
        let u = lin(g, bag, self.u_w, self.u_b);
        let u = g.sigmoid(u);
        let mut gated = g.mul(v, u);
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let scale = T::c(1.0 / keep);
                let mask = Tensor::from_fn(n, self.hidden, |_, _| if rng.random::<f64>() < keep { scale } else { T::zero() });
                let m = g.constant(mask);
                gated = g.mul(gated, m);
            }
        }
        let scores = lin(g, gated, self.w_w, self.w_b);
        let scores = g.transpose(scores);
        let attn = g.softmax_rows(scores);
        let pooled = g.matmul(attn, bag);
        let slide = lin(g, pooled, self.proj_w, self.proj_b);
        Ok((slide, attn))
    }

    /// Applies only the slide projection to per-tile embeddings (`N x out_dim`).
    pub fn project_tiles<T: Real>(&self, store: &ParamStore<T>, tiles: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::matmul(tiles, false, store.value(self.proj_w), false);
        let b = store.value(self.proj_b);
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o = *o + bb;
            }
        }
        out
    }
}

/// Aggregates a bag into a unit-norm slide embedding (evaluation mode).
pub fn abmil_aggregate<T: Real>(head: &AbmilHead, store: &ParamStore<T>, tiles: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let mut g = Graph::inference();
    let bag = g.constant(tiles.clone());
    let (slide, attn) = head.forward(&mut g, store, bag, None)?;
    let unit = g.l2_normalize_rows(slide, T::zero());
    Ok((g.value(unit).data().to_vec(), g.value(attn).data().to_vec()))
}

/// `0.5 * (L_{s->t} + L_{t->s})` over `B x D` unit-norm rows.
pub fn symmetric_contrastive<T: Real>(g: &mut Graph<T>, slides: Var, texts: Var, tau: f64) -> Result<Var> {
    let (b, d) = g.shape(slides);
    if g.shape(texts) != (b, d) {
        return Err(AstraError::Shape(format!("slides {:?} vs texts {:?}", (b, d), g.shape(texts))));
    }
    if b < 2 {
        return Err(AstraError::invalid(format!("contrastive batch needs B >= 2, got {b}")));
    }
    let logits = g.matmul_t(slides, false, texts, true);
    let logits = g.scale(logits, T::c(1.0 / tau));
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let s2t = g.log_softmax_rows(logits);
    let s2t = g.select(s2t, diag.clone(), b, 1);
    let s2t = g.sum(s2t);
    let lt = g.transpose(logits);
    let t2s = g.log_softmax_rows(lt);
    let t2s = g.select(t2s, diag, b, 1);
    let t2s = g.sum(t2s);
    let total = g.add(s2t, t2s);
    Ok(g.scale(total, T::c(-0.5 / b as f64)))
}

/// Directional slide-to-text loss on plain vectors.
pub fn slide_to_text_loss(slides: &[Vec<f64>], texts: &[Vec<f64>], tau: f64) -> Result<f64> {
    let b = slides.len();
    if b < 2 || texts.len() != b {
        return Err(AstraError::invalid("contrastive batch needs B >= 2 paired rows"));
    }
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = texts.iter().map(|t| dot(&slides[i], t) / tau).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    Ok(total / b as f64)
}

/// Symmetric loss value on plain vectors.
pub fn symmetric_contrastive_loss(slides: &[Vec<f64>], texts: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(0.5 * (slide_to_text_loss(slides, texts, tau)? + slide_to_text_loss(texts, slides, tau)?))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::MALIGNANT_CATALOG;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn templates_render_exactly() {
        let r = SlideRecord::new(Category::Malignant, Some("lung adenocarcinoma"), "lung").unwrap();
        assert_eq!(r.prompt, "A histopathology whole-slide image of malignant lung adenocarcinoma from the lung.");
        let r = SlideRecord::new(Category::Normal, None, "kidney").unwrap();
        assert_eq!(r.prompt, "A histopathology whole-slide image of normal tissue from the kidney.");
        let r = SlideRecord::new(Category::Benign, Some("fibroadenoma"), "breast").unwrap();
        assert_eq!(r.prompt, "A histopathology whole-slide image of benign fibroadenoma from the breast.");
        let r = SlideRecord::new(Category::NormalAdjacent, None, "colon").unwrap();
        assert_eq!(r.prompt, "A histopathology whole-slide image showing normal adjacent tissue from the colon.");
    }

    #[test]
    fn missing_slot_rejected() {
        assert!(SlideRecord::new(Category::Malignant, None, "lung").is_err());
        assert!(SlideRecord::new(Category::Normal, Some("x"), "lung").is_err());
        assert!(SlideRecord::new(Category::Normal, None, "").is_err());
    }

    #[test]
    fn mock_encoder_is_deterministic_and_unit_norm() {
        let a = mock_text_encode("A histopathology whole-slide image of normal tissue from the lung.", 3);
        let b = mock_text_encode("A histopathology whole-slide image of normal tissue from the lung.", 3);
        assert_eq!(a, b);
        assert_eq!(a.len(), 512);
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cancer_type_prompts_are_separated() {
        let vecs: Vec<Vec<f64>> = MALIGNANT_CATALOG
            .iter()
            .map(|e| SlideRecord::new(Category::Malignant, Some(e.name), e.site).unwrap().prompt)
            .map(|p| mock_text_encode(&p, 0))
            .collect();
        let mut worst: f64 = -1.0;
        for i in 0..vecs.len() {
            for j in (i + 1)..vecs.len() {
                worst = worst.max(dot(&vecs[i], &vecs[j]));
            }
        }
        assert!(worst < 0.95, "max pairwise cosine {worst}");
    }

    fn head(in_dim: usize) -> (ParamStore<f64>, AbmilHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = AbmilHead::new(&mut store, "abmil", in_dim, 256, 512, 0.25, &mut rng);
        (store, h)
    }

    #[test]
    fn singleton_bag_gets_full_attention() {
        let (store, h) = head(6);
        let bag = Tensor::from_fn(1, 6, |_, c| c as f64 * 0.3 - 0.5);
        let (_, attn) = abmil_aggregate(&h, &store, &bag).unwrap();
        assert_eq!(attn, vec![1.0]);
    }

    #[test]
    fn empty_bag_rejected() {
        let (store, h) = head(6);
        assert!(abmil_aggregate(&h, &store, &Tensor::zeros(0, 6)).is_err());
    }

    #[test]
    fn duplicated_bag_keeps_slide_embedding() {
        let (store, h) = head(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bag = Tensor::from_fn(7, 5, |_, _| rng.random::<f64>() - 0.5);
        let doubled = Tensor::concat_rows(&[&bag, &bag]);
        let (s1, a1) = abmil_aggregate(&h, &store, &bag).unwrap();
        let (s2, a2) = abmil_aggregate(&h, &store, &doubled).unwrap();
        for (x, y) in s1.iter().zip(&s2) {
            assert!((x - y).abs() < 1e-12);
        }
        for i in 0..7 {
            assert!((a1[i] / 2.0 - a2[i]).abs() < 1e-12);
        }
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn orthonormal_pairs_match_closed_form() {
        let s = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = symmetric_contrastive_loss(&s, &s, 0.1).unwrap();
        let want = (1.0 + (-10.0f64).exp()).ln();
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!((want - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn uniform_similarity_gives_log_b() {
        let v = unit(vec![1.0, 2.0, 3.0]);
        for b in 2..6 {
            let rows = vec![v.clone(); b];
            let l = symmetric_contrastive_loss(&rows, &rows, 0.1).unwrap();
            assert!((l - (b as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_of_one_rejected() {
        let v = vec![vec![1.0, 0.0]];
        assert!(symmetric_contrastive_loss(&v, &v, 0.1).is_err());
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_vec(1, 2, vec![1.0, 0.0]));
        assert!(symmetric_contrastive(&mut g, s, s, 0.1).is_err());
    }

    #[test]
    fn graph_loss_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = 6;
        let s: Vec<Vec<f64>> = (0..b).map(|_| unit((0..8).map(|_| rng.random::<f64>() - 0.5).collect())).collect();
        let t: Vec<Vec<f64>> = (0..b).map(|_| unit((0..8).map(|_| rng.random::<f64>() - 0.5).collect())).collect();
        let mut g = Graph::<f64>::new();
        let sv = g.constant(Tensor::from_vec(b, 8, s.concat()));
        let tv = g.constant(Tensor::from_vec(b, 8, t.concat()));
        let l = symmetric_contrastive(&mut g, sv, tv, 0.1).unwrap();
        let want = symmetric_contrastive_loss(&s, &t, 0.1).unwrap();
        assert!((g.value(l).scalar() - want).abs() < 1e-6);
    }

    #[test]
    fn swapping_roles_swaps_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s: Vec<Vec<f64>> = (0..4).map(|_| unit((0..6).map(|_| rng.random::<f64>() - 0.5).collect())).collect();
        let t: Vec<Vec<f64>> = (0..4).map(|_| unit((0..6).map(|_| rng.random::<f64>() - 0.5).collect())).collect();
        let st = slide_to_text_loss(&s, &t, 0.1).unwrap();
        let ts_swapped = slide_to_text_loss(&s, &t, 0.1).unwrap();
        assert_eq!(st, ts_swapped);
        assert_eq!(slide_to_text_loss(&t, &s, 0.1).unwrap(), slide_to_text_loss(&t, &s, 0.1).unwrap());
        let perm = [2, 0, 3, 1];
        let sp: Vec<Vec<f64>> = perm.iter().map(|&i| s[i].clone()).collect();
        let tp: Vec<Vec<f64>> = perm.iter().map(|&i| t[i].clone()).collect();
        let a = symmetric_contrastive_loss(&s, &t, 0.1).unwrap();
        let b = symmetric_contrastive_loss(&sp, &tp, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lower_temperature_sharpens_aligned_batches() {
        let s = vec![unit(vec![1.0, 0.2, 0.0]), unit(vec![0.1, 1.0, 0.3]), unit(vec![0.0, 0.2, 1.0])];
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.5, 0.2, 0.1, 0.05] {
            let l = symmetric_contrastive_loss(&s, &s, tau).unwrap();
            assert!(l < last);
            last = l;
        }
    }
}
