//! Linear-probe slide classification with stratified splits and early stopping.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{AstraError, Result};
use crate::eval::{argmax, classify, macro_recall, metrics, ClassificationReport, LinearHead, Metrics};
use crate::grid::{Category, SlideGrid, SlideRecord};
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::Tensor;
use crate::train::config::DownstreamConfig;
use crate::train::optim::{collect_grads, Adam, Decay};
use crate::train::schedule::WarmupCosine;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per class: `round(n * test_fraction)` to test, then `round(rest * val_fraction)`
/// of the remainder to validation, the rest to training. Every class named in
/// `class_names` must keep at least one training sample.
pub fn stratified_split(
    labels: &[usize],
    class_names: &[String],
    test_fraction: f64,
    val_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Split> {
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (c, name) in class_names.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        let rest = idx.len() - n_test;
        let n_val = (rest as f64 * val_fraction).round() as usize;
        if rest - n_val == 0 {
            return Err(AstraError::invalid(format!("class {name:?} is absent from the training split")));
        }
        split.test.extend_from_slice(&idx[..n_test]);
        split.val.extend_from_slice(&idx[n_test..n_test + n_val]);
        split.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(AstraError::invalid(format!("label {bad} has no class name")));
    }
    Ok(split)
}

/// Stops once the monitored value has failed to improve on its best for
/// `patience` consecutive epochs.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::NEG_INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Records the value for `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= self.patience
        }
    }
}

/// Epoch (1-based) at which a replayed metric sequence stops training, or
/// `None` if it runs to the end.
pub fn stopping_epoch(values: &[f64], patience: usize) -> Option<usize> {
    let mut s = EarlyStopper::new(patience);
    values.iter().enumerate().find(|&(i, &v)| s.observe(i + 1, v)).map(|(i, _)| i + 1)
}

#[derive(Clone, Debug)]
pub struct HeadFit {
    pub head: LinearHead,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_recall: Vec<f64>,
}

fn head_from_store(store: &ParamStore<f64>, in_dim: usize, classes: usize) -> LinearHead {
    LinearHead {
        in_dim,
        classes,
        w: store.value(store.id("cls.w").expect("head weight")).data().to_vec(),
        b: store.value(store.id("cls.b").expect("head bias")).data().to_vec(),
    }
}

fn predict(x: &[Vec<f64>], idx: &[usize], head: &LinearHead) -> Result<Vec<usize>> {
    idx.iter().map(|&i| Ok(argmax(&classify(&x[i], head)?))).collect()
}

/// Fits a linear head with cross-entropy under Adam (coupled L2 decay) and
/// a cosine schedule; keeps the weights of the best validation epoch.
pub fn fit_linear_head(
    x: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    split: &Split,
    cfg: &DownstreamConfig,
    rng: &mut impl Rng,
) -> Result<HeadFit> {
    let in_dim = x.first().map(Vec::len).ok_or_else(|| AstraError::invalid("no samples to train on"))?;
    let mut store = ParamStore::<f64>::new();
    let w = store.linear_weight("cls.w", in_dim, classes, rng);
    let b = store.zeros("cls.b", 1, classes);
    let spe = split.train.len().div_ceil(cfg.batch_size.max(1));
    let schedule = WarmupCosine::cosine(cfg.lr, (spe * cfg.max_epochs).max(1))?;
    let mut opt = Adam::new(cfg.weight_decay, Decay::Coupled, (0.9, 0.999));
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = head_from_store(&store, in_dim, classes);
    let mut val_recall = Vec::new();
    let mut order = split.train.clone();
    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            step += 1;
            let mut g = Graph::new();
            let xb = g.constant(Tensor::from_fn(batch.len(), in_dim, |r, c| x[batch[r]][c]));
            let (wv, bv) = (g.param(&store, w), g.param(&store, b));
            let logits = g.matmul(xb, wv);
            let logits = g.add_bias(logits, bv);
            let logp = g.log_softmax_rows(logits);
            let picks: Vec<usize> = batch.iter().enumerate().map(|(r, &i)| r * classes + labels[i]).collect();
            let picked = g.select(logp, picks, batch.len(), 1);
            let nll = g.mean(picked);
            let loss = g.scale(nll, -1.0);
            if !g.value(loss).scalar().is_finite() {
                return Err(AstraError::Divergence { step });
            }
            let grads = collect_grads(&store, &g.backward(loss));
            opt.step(&mut store, &grads, schedule.lr(step));
        }
        let head = head_from_store(&store, in_dim, classes);
        if split.val.is_empty() {
            best = head;
            continue;
        }
        let truth: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();
        let recall = macro_recall(&truth, &predict(x, &split.val, &head)?);
        val_recall.push(recall);
        let improved = recall > stopper.best;
        let stop = stopper.observe(epoch, recall);
        if improved {
            best = head;
        }
        if stop {
            break;
        }
    }
    let best_epoch = if split.val.is_empty() { epochs_run } else { stopper.best_epoch };
    Ok(HeadFit { head: best, epochs_run, best_epoch, val_recall })
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub split: Split,
    pub fit: HeadFit,
    pub metrics: Metrics,
}

/// One stratified split, fit and held-out evaluation per seed.
pub fn train_classifier(
    x: &[Vec<f64>],
    labels: &[usize],
    class_names: &[String],
    cfg: &DownstreamConfig,
    task: &str,
    config_name: &str,
) -> Result<(ClassificationReport, Vec<SeedOutcome>)> {
    if x.len() != labels.len() || x.is_empty() {
        return Err(AstraError::invalid(format!("{} embeddings for {} labels", x.len(), labels.len())));
    }
    let classes = class_names.len();
    let mut outcomes = Vec::new();
    for &s in &cfg.seeds {
        let mut rng = seed::rng(s, &[seed::hash_str("downstream")]);
        let split = stratified_split(labels, class_names, cfg.test_fraction, cfg.val_fraction, &mut rng)?;
        if split.test.is_empty() {
            return Err(AstraError::invalid("test split is empty; raise test_fraction or add slides"));
        }
        let fit = fit_linear_head(x, labels, classes, &split, cfg, &mut rng)?;
        let truth: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
        let scores = split.test.iter().map(|&i| classify(&x[i], &fit.head)).collect::<Result<Vec<_>>>()?;
        let metrics = metrics(&truth, &scores, classes)?;
        outcomes.push(SeedOutcome { seed: s, split, fit, metrics });
    }
    let report = ClassificationReport {
        task: task.to_string(),
        config: config_name.to_string(),
        seeds: cfg.seeds.clone(),
        rows: outcomes.iter().map(|o| o.metrics.clone()).collect(),
    };
    Ok((report, outcomes))
}

/// Mean of a model's raw tile embeddings over the slide's tissue cells.
pub fn raw_mean_embedding(grid: &SlideGrid, model_id: usize) -> Result<Vec<f64>> {
    let plane = grid.planes.get(model_id).ok_or_else(|| AstraError::invalid(format!("model {model_id} not in slide")))?;
    let mut acc = vec![0.0; plane.dim];
    let mut n = 0;
    for cell in grid.tissue_cells() {
        if let Some(v) = grid.embedding(model_id, cell) {
            acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
            n += 1;
        }
    }
    if n == 0 {
        return Err(AstraError::invalid(format!("slide {} has no embeddings from model {model_id}", grid.slide_id)));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Slide-level classification task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Four classification categories, in category order.
    Category,
    /// Cancer types of malignant slides, in sorted order.
    CancerType,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "category" => Ok(Task::Category),
            "cancer-type" => Ok(Task::CancerType),
            _ => Err(AstraError::invalid(format!("unknown task {s:?} (expected category or cancer-type)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Category => "category",
            Task::CancerType => "cancer-type",
        }
    }

    /// Class of a slide under this task, or `None` when the slide is outside it.
    pub fn class_of(self, record: &SlideRecord) -> Option<String> {
        match self {
            Task::Category => Some(record.classification_category.as_str().to_string()),
            Task::CancerType => match record.classification_category {
                Category::Malignant => record.cancer_type.clone(),
                _ => None,
            },
        }
    }

    /// Integer labels for `classes` (one per in-task slide) and the class names.
    pub fn encode(self, classes: &[String]) -> (Vec<usize>, Vec<String>) {
        let names: Vec<String> = match self {
            Task::Category => Category::ALL.iter().map(|c| c.as_str().to_string()).collect(),
            Task::CancerType => {
                let mut n = classes.to_vec();
                n.sort();
                n.dedup();
                n
            }
        };
        let labels = classes.iter().map(|c| names.iter().position(|n| n == c).expect("class listed")).collect();
        (labels, names)
    }
}

/// Classification-category labels and the class names in category order.
pub fn category_labels(slides: &[SlideGrid]) -> Result<(Vec<usize>, Vec<String>)> {
    let classes = slides
        .iter()
        .map(|g| {
            g.record
                .as_ref()
                .and_then(|r| Task::Category.class_of(r))
                .ok_or_else(|| AstraError::Missing(format!("slide record for {}", g.slide_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Task::Category.encode(&classes))
}
