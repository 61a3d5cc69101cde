#![allow(dead_code)]

use astra_core::autodiff::{Gradients, Graph};
use astra_core::decoder::{DecoderConfig, DEFAULT_LAMBDA};
use astra_core::encoder::EncoderConfig;
use astra_core::grid::{ModelRegistry, ModelSpec};
use astra_core::model::{crop_token_set, pretrain_objective, Network};
use astra_core::params::{ParamId, ParamStore};
use astra_core::sampling::{CropBatch, CropWindow, ModelTargets};
use astra_core::tensor::Tensor;
use astra_core::text::{symmetric_contrastive, AbmilHead};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small f64 configuration used by the determinism checks.
pub const TINY: &str = r#"
precision = "f64"

[data]
num_slides = 8
cohort = "categories"
num_cancer_types = 2

[data.synth]
width = 20
height = 20

[encoder]
latent_dim = 16
num_layers = 3
num_heads = 2
num_experts = 2
top_k = 1
expert_hidden = 16
proj_hidden = 16
tap_layers = [1, 2, 3]

[decoder]
decoder_dim = 16
num_heads = 2
ffn_hidden = 16

[pretrain]
steps = 4
warmup_steps = 1
batch_size = 2

[align]
epochs = 2
batch_size = 4

[downstream]
max_epochs = 3
"#;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so near-zero derivatives are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const TAU: f64 = 0.1;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Coordinates whose two probes selected different experts.
    pub kinks: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, rel: f64, what: impl FnOnce() -> String) {
        self.checked += 1;
        if self.checked == 1 || rel > self.max_rel {
            self.max_rel = rel;
            self.worst = what();
        }
    }
}

/// Central differences of `loss` over every scalar of the listed parameters.
/// `loss` returns the objective and a routing signature; coordinates whose
/// probes disagree on the signature straddle a top-k boundary and are skipped.
pub fn check_params(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    grads: &Gradients<f64>,
    loss: impl Fn(&ParamStore<f64>) -> (f64, Vec<usize>),
) -> GradReport {
    let mut report = GradReport::default();
    for &id in ids {
        let n = store.value(id).len();
        let zero = Tensor::zeros(store.value(id).rows(), store.value(id).cols());
        let analytic = grads.param(id).unwrap_or(&zero).clone();
        for i in 0..n {
            let x = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = x + FD_STEP;
            let (up, sig_up) = loss(store);
            store.value_mut(id).data_mut()[i] = x - FD_STEP;
            let (down, sig_down) = loss(store);
            store.value_mut(id).data_mut()[i] = x;
            if sig_up != sig_down {
                report.kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            report.record(rel_err(a, numeric), || format!("{}[{i}] analytic {a:e} numeric {numeric:e}", store.name(id)));
        }
    }
    report
}

pub fn tiny_registry() -> ModelRegistry {
    let spec = |model_id, embed_dim| ModelSpec { model_id, name: format!("m{model_id}"), native_tile_px: 512, embed_dim };
    ModelRegistry { models: vec![spec(0, 6), spec(1, 6), spec(2, 4), spec(3, 10)] }
}

pub fn gradcheck_encoder() -> EncoderConfig {
    EncoderConfig {
        latent_dim: 8,
        num_layers: 3,
        num_heads: 2,
        num_experts: 4,
        top_k: 2,
        expert_hidden: Some(12),
        proj_hidden: Some(8),
        tap_layers: vec![1, 2, 3],
    }
}

pub fn gradcheck_decoder() -> DecoderConfig {
    DecoderConfig { decoder_dim: 8, num_heads: 2, ffn_hidden: Some(12) }
}

/// One crop with 8 visible tokens (one zero-filled), 8 masked queries and
/// targets of uneven size per model, including a model with none.
pub fn eight_token_crop(registry: &ModelRegistry, rng: &mut impl Rng) -> CropBatch {
    let mut cells: Vec<usize> = (0..256).collect();
    cells.shuffle(rng);
    let visible_idx = cells[..8].to_vec();
    let masked_idx = cells[8..16].to_vec();
    let input_model = 1;
    let input_dim = registry.models[input_model].embed_dim;
    let mut filler = vec![false; 8];
    filler[5] = true;
    let visible_embeddings = (0..8 * input_dim)
        .map(|i| if filler[i / input_dim] { 0.0 } else { rng.random::<f32>() * 2.0 - 1.0 })
        .collect();
    let keep = [8, 5, 0, 8];
    let targets = registry
        .models
        .iter()
        .map(|m| {
            let positions = masked_idx[..keep[m.model_id]].to_vec();
            let vectors = (0..positions.len() * m.embed_dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
            ModelTargets { model_id: m.model_id, dim: m.embed_dim, positions, vectors }
        })
        .collect();
    CropBatch {
        window: CropWindow {
            slide_id: "gradcheck".into(),
            origin: (0, 0),
            valid_positions: (0..256).collect(),
            coverage: 1.0,
            fallback: false,
            draws: 1,
        },
        input_model,
        input_dim,
        visible_idx,
        masked_idx,
        filler,
        visible_embeddings,
        targets,
    }
}

pub struct PretrainInstance {
    pub store: ParamStore<f64>,
    pub net: Network,
    pub crops: Vec<CropBatch>,
    pub lambda: f64,
}

pub fn pretrain_instance(seed: u64) -> PretrainInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = tiny_registry();
    let mut store = ParamStore::new();
    let net = Network::init(&mut store, &gradcheck_encoder(), &gradcheck_decoder(), &registry, &mut rng).unwrap();
    perturb(&mut store, &mut rng);
    let crops = vec![eight_token_crop(&registry, &mut rng)];
    PretrainInstance { store, net, crops, lambda: DEFAULT_LAMBDA }
}

/// Moves every parameter off its initial value so zero-initialized biases,
/// unit gains and zero mask tokens get generic derivatives.
fn perturb(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += 0.1 * (rng.random::<f64>() - 0.5);
        }
    }
}

impl PretrainInstance {
    pub fn loss(&self, store: &ParamStore<f64>) -> (f64, Vec<usize>) {
        let mut g = Graph::inference();
        let terms = pretrain_objective(&mut g, store, &self.net, &self.crops, self.lambda).unwrap();
        let value = g.value(terms.loss).scalar();
        let sets: Vec<_> = self.crops.iter().map(crop_token_set).collect();
        let mut g = Graph::inference();
        let out = self.net.encoder.encode(&mut g, store, &sets).unwrap();
        (value, out.routing.iter().flat_map(|r| r.selected.iter().copied()).collect())
    }

    pub fn check(&mut self) -> GradReport {
        let mut g = Graph::new();
        let terms = pretrain_objective(&mut g, &self.store, &self.net, &self.crops, self.lambda).unwrap();
        let grads = g.backward(terms.loss);
        let ids: Vec<ParamId> = self.store.ids().collect();
        let mut store = std::mem::take(&mut self.store);
        let report = check_params(&mut store, &ids, &grads, |s| self.loss(s));
        self.store = store;
        report
    }
}

pub struct AlignInstance {
    pub store: ParamStore<f64>,
    pub head: AbmilHead,
    pub bags: Vec<Tensor<f64>>,
    pub texts: Tensor<f64>,
}

fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut t = Tensor::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    for r in 0..rows {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    t
}

/// Four bags of 3 to 6 tiles under a small gated-attention head, paired with
/// four unit text vectors.
pub fn align_instance(seed: u64) -> AlignInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (in_dim, hidden, out_dim) = (5, 4, 6);
    let mut store = ParamStore::new();
    let head = AbmilHead::new(&mut store, "abmil", in_dim, hidden, out_dim, 0.0, &mut rng);
    perturb(&mut store, &mut rng);
    let bags = (0..4)
        .map(|_| {
            let n = rng.random_range(3..=6);
            Tensor::from_fn(n, in_dim, |_, _| rng.random::<f64>() * 2.0 - 1.0)
        })
        .collect();
    let texts = unit_rows(4, out_dim, &mut rng);
    AlignInstance { store, head, bags, texts }
}

impl AlignInstance {
    fn build(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, bags: &[Tensor<f64>]) -> (astra_core::autodiff::Var, Vec<astra_core::autodiff::Var>) {
        let inputs: Vec<_> = bags.iter().map(|b| g.input(b.clone())).collect();
        let rows: Vec<_> = inputs.iter().map(|&b| self.head.forward(g, store, b, None).unwrap().0).collect();
        let s = g.concat_rows(rows);
        let s = g.l2_normalize_rows(s, 0.0);
        let t = g.constant(self.texts.clone());
        (symmetric_contrastive(g, s, t, TAU).unwrap(), inputs)
    }

    pub fn loss_with(&self, store: &ParamStore<f64>, bags: &[Tensor<f64>]) -> f64 {
        let mut g = Graph::inference();
        let (loss, _) = self.build(&mut g, store, bags);
        g.value(loss).scalar()
    }

    /// Checks every head parameter and every tile coordinate.
    pub fn check(&mut self) -> GradReport {
        let mut g = Graph::new();
        let (loss, inputs) = self.build(&mut g, &self.store, &self.bags);
        let grads = g.backward(loss);
        let ids: Vec<ParamId> = self.store.ids().collect();
        let mut store = std::mem::take(&mut self.store);
        let mut report = check_params(&mut store, &ids, &grads, |s| (self.loss_with(s, &self.bags), Vec::new()));
        self.store = store;
        let mut bags = self.bags.clone();
        for (b, &var) in inputs.iter().enumerate() {
            let analytic = grads.wrt(var).expect("tiles receive gradient").clone();
            for i in 0..bags[b].len() {
                let x = bags[b].data()[i];
                bags[b].data_mut()[i] = x + FD_STEP;
                let up = self.loss_with(&self.store, &bags);
                bags[b].data_mut()[i] = x - FD_STEP;
                let down = self.loss_with(&self.store, &bags);
                bags[b].data_mut()[i] = x;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic.data()[i];
                report.record(rel_err(a, numeric), || format!("bag {b}[{i}] analytic {a:e} numeric {numeric:e}"));
            }
        }
        report
    }
}
