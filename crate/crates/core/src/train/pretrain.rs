//! Masked multi-target pretraining.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::SlideGrid;
use crate::model::{pretrain_objective, Network};
use crate::params::ParamStore;
use crate::sampling::{make_crop_batch, CropBatch};
use crate::seed;
use crate::train::checkpoint::{Checkpoint, RngState, Stage};
use crate::train::config::AstraConfig;
use crate::train::optim::{clip_global_norm, collect_grads, Adam, Decay};
use crate::train::schedule::WarmupCosine;

/// One loss-trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f64,
    pub l_recon: f64,
    pub l_moe: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct PretrainRun<T> {
    pub store: ParamStore<T>,
    pub net: Network,
    pub trace: Vec<TraceRecord>,
    pub checkpoint: Checkpoint<T>,
}

/// Fresh parameters for the configured architecture.
pub fn init_model<T: Real>(cfg: &AstraConfig, seed: u64) -> Result<(ParamStore<T>, Network)> {
    let mut store = ParamStore::new();
    let mut rng = seed::rng(seed, &[seed::hash_str("init")]);
    let net = Network::init(&mut store, &cfg.encoder, &cfg.decoder, &cfg.registry(), &mut rng)?;
    Ok((store, net))
}

/// Endless stream of crops: each epoch visits every slide
/// `crops_per_slide_per_epoch` times in shuffled order.
struct CropStream<'a> {
    slides: &'a [SlideGrid],
    per_slide: usize,
    max_tries: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: seed::AstraRng,
}

impl<'a> CropStream<'a> {
    fn next(&mut self) -> Result<CropBatch> {
        if self.cursor == self.order.len() {
            self.order = (0..self.slides.len()).flat_map(|i| std::iter::repeat_n(i, self.per_slide)).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        make_crop_batch(&self.slides[i], &mut self.rng, self.max_tries)
    }
}

pub fn pretrain<T: Real>(
    slides: &[SlideGrid],
    cfg: &AstraConfig,
    seed: u64,
    mut trace_sink: Option<&mut dyn Write>,
) -> Result<PretrainRun<T>> {
    if slides.is_empty() {
        return Err(AstraError::invalid("pretraining needs at least one slide"));
    }
    let (mut store, net) = init_model::<T>(cfg, seed)?;
    let p = &cfg.pretrain;
    let total = p.total_steps(slides.len());
    let schedule = WarmupCosine::new(p.lr, p.warmup_steps, total)?;
    let mut opt = Adam::new(p.weight_decay, Decay::Decoupled, (p.beta1, p.beta2));
    let mut stream = CropStream {
        slides,
        per_slide: p.crops_per_slide_per_epoch,
        max_tries: p.max_tries,
        order: Vec::new(),
        cursor: 0,
        rng: seed::rng(seed, &[seed::hash_str("pretrain-data")]),
    };
    let mut trace = Vec::with_capacity(total);
    for step in 1..=total {
        let crops = (0..p.batch_size).map(|_| stream.next()).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let terms = pretrain_objective(&mut g, &store, &net, &crops, p.lambda)?;
        let loss = g.value(terms.loss).scalar().f64();
        let l_recon = g.value(terms.recon).scalar().f64();
        let l_moe = g.value(terms.aux).scalar().f64();
        if !loss.is_finite() {
            return Err(AstraError::Divergence { step });
        }
        let grads = g.backward(terms.loss);
        let mut grads = collect_grads(&store, &grads);
        drop(g);
        let grad_norm = clip_global_norm(&mut grads, p.grad_clip);
        if !grad_norm.is_finite() {
            return Err(AstraError::Divergence { step });
        }
        let lr = schedule.lr(step);
        opt.step(&mut store, &grads, lr);
        let rec = TraceRecord { step, loss, l_recon, l_moe, lr, grad_norm };
        if let Some(sink) = trace_sink.as_deref_mut() {
            writeln!(sink, "{}", serde_json::to_string(&rec).expect("trace serializes"))?;
            sink.flush()?;
        }
        trace.push(rec);
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        stage: Stage::Pretrain,
        step: total as u64,
        rng: RngState::capture(&stream.rng),
        params: store.clone(),
    };
    Ok(PretrainRun { store, net, trace, checkpoint })
}

/// Mean masked-position cosine per target space over `n_crops` fixed crops.
pub fn reconstruction_cosine<T: Real>(
    store: &ParamStore<T>,
    net: &Network,
    slides: &[SlideGrid],
    n_crops: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = seed::rng(seed, &[seed::hash_str("recon-eval")]);
    let m = net.registry.len();
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    let chunk = 16;
    let mut done = 0;
    while done < n_crops {
        let take = chunk.min(n_crops - done);
        let crops = (0..take)
            .map(|j| make_crop_batch(&slides[(done + j) % slides.len()], &mut rng, 10))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::inference();
        let terms = pretrain_objective(&mut g, store, net, &crops, 0.0)?;
        for k in 0..m {
            if let Some(c) = terms.stats.mean_cosine[k] {
                sums[k] += c * terms.stats.counts[k] as f64;
                counts[k] += terms.stats.counts[k];
            }
        }
        done += take;
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect())
}
