//! The twelve acceptance criteria, run in order with one PASS/FAIL line each.
//! Planted-signal experiments share trained models through `State`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use astra_core::archive::write_cohort;
use astra_core::autodiff::Graph;
use astra_core::decoder::{recon_loss, total_pretrain_loss};
use astra_core::encoder::{load_balance_loss, Encoder, EncoderConfig, TokenSet};
use astra_core::eval::{dice, localize, metrics, stratified_summary, threshold_mask, LocalizationResult};
use astra_core::grid::{Archetype, ModelRegistry, SlideGrid};
use astra_core::model::{contextualize_slide, Network};
use astra_core::params::ParamStore;
use astra_core::routing::{adjusted_rand_index, expert_map};
use astra_core::sampling::{make_crop_batch, DEFAULT_MAX_TRIES, MASKED, VISIBLE, WINDOW_CELLS};
use astra_core::synth::{cohort_iter, generate_cohort, generate_synthetic_slide, CohortPlan, SlideKind, SynthConfig};
use astra_core::tensor::Tensor;
use astra_core::text::{abmil_aggregate, symmetric_contrastive_loss, text_encoder_from_name, AbmilHead};
use astra_core::train::align::{align, retrieval_top1, slide_bags, slide_embeddings};
use astra_core::train::checkpoint::Checkpoint;
use astra_core::train::classify::{category_labels, raw_mean_embedding, train_classifier};
use astra_core::train::config::AstraConfig;
use astra_core::train::pretrain::{init_model, pretrain, reconstruction_cosine};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Crop batches allocate several megabytes each; glibc returns them to the
/// kernel on every free, so sampling speed is dominated by page faults.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const PRETRAIN_COHORT_SEED: u64 = 7;
const ALIGN_COHORT_SEED: u64 = 11;
const CLASSIFY_COHORT_SEED: u64 = 31;
const LOCALIZE_COHORT_SEED: u64 = 23;
const TRAIN_SEED: u64 = 1;
const RECON_EVAL_CROPS: usize = 64;
const RECON_EVAL_SEED: u64 = 99;

type Model = (ParamStore<f32>, Network);

#[derive(Default)]
struct State {
    pretrained: Option<Model>,
    aligned: Option<Model>,
}

fn config(name: &str) -> AstraConfig {
    AstraConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

fn panic_text(e: &(dyn std::any::Any + Send)) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())
}

fn run(label: &str, f: impl FnOnce() -> String) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {label}: {detail} ({secs:.1} s)");
            true
        }
        Err(e) => {
            println!("FAIL  {label}: {} ({secs:.1} s)", panic_text(e.as_ref()));
            false
        }
    }
}

fn c1_mask_arithmetic() -> String {
    let slides = generate_cohort(&SynthConfig::default(), &CohortPlan::mixed(8, 8), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Instant::now();
    let mut violations = 0;
    for i in 0..10_000 {
        let c = make_crop_batch(&slides[i % slides.len()], &mut rng, DEFAULT_MAX_TRIES).unwrap();
        let mut seen = [0u8; WINDOW_CELLS];
        for &p in c.visible_idx.iter().chain(&c.masked_idx) {
            seen[p] += 1;
        }
        let ok = c.visible_idx.len() == VISIBLE
            && c.masked_idx.len() == MASKED
            && seen.iter().all(|&s| s == 1)
            && c.filler.len() == VISIBLE
            && c.visible_embeddings.len() == VISIBLE * c.input_dim;
        if !ok {
            violations += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(violations, 0, "{violations} batches violate the 64/192 split");
    assert!(secs < 30.0, "10^4 crops took {secs:.1} s");
    format!("10^4 batches, 0 violations, masking ratio {}, sampling {secs:.1} s", MASKED as f64 / WINDOW_CELLS as f64)
}

fn c2_loss_bounds() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for case in 0..1000 {
        let models = rng.random_range(1..=4);
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..models {
            let rows = rng.random_range(if models == 1 { 1 } else { 0 }..6);
            let dim = rng.random_range(1..9);
            let mut p = Vec::new();
            let mut t = Vec::new();
            for _ in 0..rows {
                let a: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                let b: Vec<f64> = match case % 3 {
                    0 => a.iter().map(|x| -x).collect(),
                    _ => (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
                };
                p.push(a);
                t.push(b);
            }
            preds.push(p);
            targets.push(t);
        }
        if targets.iter().all(|t| t.is_empty()) {
            continue;
        }
        let l = recon_loss(&preds, &targets).unwrap();
        assert!((0.0..=2.0).contains(&l), "case {case}: loss {l}");
        lo = lo.min(l);
        hi = hi.max(l);
        let same = recon_loss(&preds, &preds).unwrap();
        assert!(same.abs() < 1e-7, "identical predictions give {same}");
    }
    let total = total_pretrain_loss(1.0, 1.0, 0.01).unwrap();
    assert_eq!(total, 1.01);
    format!("10^3 random cases in [{lo:.4}, {hi:.4}], identical case 0, 1.0 + 0.01 * 1.0 = {total}")
}

fn c3_gradients() -> String {
    let t = Instant::now();
    let pre = common::pretrain_instance(3).check();
    let con = common::align_instance(5).check();
    let secs = t.elapsed().as_secs_f64();
    assert!(pre.max_rel < 1e-4, "pretrain objective: {}", pre.worst);
    assert!(con.max_rel < 1e-4, "contrastive objective: {}", con.worst);
    assert!(pre.kinks * 100 < pre.checked, "{} routing kinks", pre.kinks);
    assert!(secs < 300.0, "took {secs:.1} s");
    format!(
        "reconstruction objective {} coords max rel {:.2e} ({} kinks skipped); contrastive {} coords max rel {:.2e}",
        pre.checked, pre.max_rel, pre.kinks, con.checked, con.max_rel
    )
}

fn c4_moe_degeneracy() -> String {
    let registry = common::tiny_registry();
    let cfg = EncoderConfig { num_experts: 1, top_k: 1, ..common::gradcheck_encoder() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(&mut store, &cfg, &registry, &mut rng).unwrap();
    let mut compared = 0;
    for _ in 0..20 {
        let sets: Vec<TokenSet> = (0..rng.random_range(1..4))
            .map(|_| {
                let model_id = rng.random_range(0..registry.len());
                let dim = registry.models[model_id].embed_dim;
                let n = rng.random_range(1..40);
                let mut positions: Vec<usize> = (0..WINDOW_CELLS).collect();
                positions.shuffle(&mut rng);
                positions.truncate(n);
                let filler: Vec<bool> = (0..n).map(|i| i > 0 && rng.random::<f64>() < 0.2).collect();
                TokenSet { model_id, dim, vectors: (0..n * dim).map(|_| rng.random::<f32>() - 0.5).collect(), positions, filler }
            })
            .collect();
        let mut g = Graph::inference();
        let moe = enc.encode(&mut g, &store, &sets).unwrap();
        let mut h = Graph::inference();
        let dense = enc.encode_dense_reference(&mut h, &store, &sets).unwrap();
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(moe.normed)), bits(h.value(dense.normed)), "normed outputs differ");
        for (a, b) in moe.taps.iter().zip(&dense.taps) {
            assert_eq!(bits(g.value(*a)), bits(h.value(*b)), "tap outputs differ");
        }
        compared += g.value(moe.normed).len();
    }
    format!("E = 1, top_k = 1: 20 token-set batches, {compared} output scalars bit-identical to the dense reference")
}

fn c5_load_balance() -> String {
    let uniform = load_balance_loss(&vec![vec![0.25; 4]; 16]).unwrap();
    let collapsed = load_balance_loss(&vec![vec![0.0, 0.0, 1.0, 0.0]; 16]).unwrap();
    assert_eq!(uniform, 1.0);
    assert_eq!(collapsed, 4.0);
    format!("uniform {uniform}, one-hot collapse {collapsed}")
}

fn c6_pretraining(state: &mut State) -> String {
    let cfg = config("desk.toml");
    let slides = generate_cohort(&cfg.data.synth, &cfg.data.plan().unwrap(), PRETRAIN_COHORT_SEED).unwrap();
    assert_eq!(slides.len(), 32);
    let (s0, n0) = init_model::<f32>(&cfg, TRAIN_SEED).unwrap();
    let before = reconstruction_cosine(&s0, &n0, &slides, RECON_EVAL_CROPS, RECON_EVAL_SEED).unwrap();
    let t = Instant::now();
    let run = pretrain::<f32>(&slides, &cfg, TRAIN_SEED, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let after = reconstruction_cosine(&run.store, &run.net, &slides, RECON_EVAL_CROPS, RECON_EVAL_SEED).unwrap();
    state.pretrained = Some((run.store, run.net));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    assert!(before.iter().all(|&c| c < 0.2), "initial cosine {}", fmt(&before));
    assert!(after.iter().all(|&c| c >= 0.8), "final cosine {}", fmt(&after));
    assert!(secs < 600.0, "training took {secs:.0} s");
    format!("{} steps, masked cosine {} -> {}, training {secs:.0} s", run.trace.len(), fmt(&before), fmt(&after))
}

fn c7_alignment(state: &mut State) -> String {
    let b = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let v: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let v: Vec<f64> = v.iter().map(|x| x / n).collect();
    let uniform = symmetric_contrastive_loss(&vec![v.clone(); b], &vec![v; b], 0.1).unwrap();
    assert!((uniform - (b as f64).ln()).abs() < 1e-6, "uniform case {uniform} vs log B {}", (b as f64).ln());

    let cfg = config("desk.toml");
    let (store, net) = state.pretrained.clone().expect("pretrained model from criterion 6");
    let slides = generate_cohort(&cfg.data.synth, &CohortPlan::malignant(8, 8), ALIGN_COHORT_SEED).unwrap();
    let run = align(&slides, store, net, &cfg, TRAIN_SEED, None).unwrap();
    let bags = slide_bags(&run.store, &run.net, &slides, cfg.input_model()).unwrap();
    drop(slides);
    let text = text_encoder_from_name(&cfg.align.text_encoder, cfg.align.text_seed).unwrap();
    let top1 = retrieval_top1(&run.store, &run.net, &bags, text.as_ref()).unwrap();
    let epochs = cfg.align.epochs;
    let (first, last) = (run.losses[0], *run.losses.last().unwrap());
    state.aligned = Some((run.store, run.net));
    assert!(top1 >= 0.9, "retrieval top-1 {top1}");
    format!("uniform case {uniform:.9} = log {b}; {epochs} epochs, loss {first:.3} -> {last:.3}, 64 slides over 8 prompts, top-1 {top1:.3}")
}

fn c8_classification() -> String {
    let cfg = config("desk-categories.toml");
    let pre = {
        let slides = generate_cohort(&cfg.data.synth, &cfg.data.plan().unwrap(), PRETRAIN_COHORT_SEED).unwrap();
        let run = pretrain::<f32>(&slides, &cfg, TRAIN_SEED, None).unwrap();
        (run.store, run.net)
    };
    let aligned = {
        let slides = generate_cohort(&cfg.data.synth, &CohortPlan::categories(16, 8), ALIGN_COHORT_SEED).unwrap();
        let run = align(&slides, pre.0, pre.1, &cfg, TRAIN_SEED, None).unwrap();
        (run.store, run.net)
    };
    let plan = CohortPlan::categories(40, 8);
    let (mut bags, mut raw, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for g in cohort_iter(&cfg.data.synth, &plan, CLASSIFY_COHORT_SEED) {
        let g = g.unwrap();
        bags.extend(slide_bags(&aligned.0, &aligned.1, std::slice::from_ref(&g), cfg.input_model()).unwrap());
        raw.push(raw_mean_embedding(&g, cfg.input_model()).unwrap());
        labels.extend(category_labels(std::slice::from_ref(&g)).unwrap().0);
    }
    let names = category_labels(&[]).unwrap().1;
    let x = slide_embeddings(&aligned.0, &aligned.1, &bags).unwrap();
    let (report, _) = train_classifier(&x, &labels, &names, &cfg.downstream, "category", "astra").unwrap();
    let (baseline, _) = train_classifier(&raw, &labels, &names, &cfg.downstream, "category", "raw").unwrap();
    let text = report.to_text();
    print!("{text}");
    let seed_rows = text.lines().filter(|l| l.split('\t').next().is_some_and(|s| s.parse::<u64>().is_ok())).count();
    let summary_rows = text.lines().filter(|l| l.starts_with("mean±std")).count();
    let (bacc, sd) = report.mean_std()[1];
    assert_eq!(names.len(), 4);
    assert_eq!((seed_rows, summary_rows), (5, 1), "report layout:\n{text}");
    assert!(bacc >= 0.95, "B-Acc {bacc:.4} ± {sd:.4}");
    format!(
        "{} slides, 4 categories, 5 seeds: B-Acc {bacc:.4} ± {sd:.4} (raw-embedding baseline {:.4})",
        labels.len(),
        baseline.mean_std()[1].0
    )
}

/// Relabels tissue so exactly `fraction` of it is planted tumor.
fn with_reference_coverage(grid: &SlideGrid, fraction: f64) -> SlideGrid {
    let mut g = grid.clone();
    let tissue: Vec<usize> = g.tissue_cells().collect();
    let k = (fraction * tissue.len() as f64).round() as usize;
    let labels = g.planted_labels.as_mut().unwrap();
    for (i, &c) in tissue.iter().enumerate() {
        labels[c] = Some(if i < k { Archetype::TumorGlandular } else { Archetype::Stroma });
    }
    g.slide_id = format!("{}-sparse", grid.slide_id);
    g
}

fn c9_localization(state: &mut State) -> String {
    let cfg = config("desk.toml");
    let (store, net) = state.aligned.as_ref().expect("aligned model from criterion 7");
    let clean = SynthConfig { noise_sigma: 0.0, ..cfg.data.synth.clone() };
    let slides = generate_cohort(&clean, &CohortPlan::malignant(8, 2), LOCALIZE_COHORT_SEED).unwrap();
    let text = text_encoder_from_name(&cfg.align.text_encoder, cfg.align.text_seed).unwrap();
    let (tau, floor) = (cfg.localize.tau_loc, cfg.localize.exclusion_floor);
    assert_eq!(tau, 0.15);
    let mut results: Vec<LocalizationResult> = Vec::new();
    let mut strata = Vec::new();
    for g in &slides {
        let prompt = text.encode(&g.record.as_ref().unwrap().prompt);
        let r = localize(g, net, store, cfg.input_model(), &prompt, tau, floor).unwrap();
        let masks: Vec<Vec<bool>> =
            [0.05, 0.15, 0.30].iter().map(|&t| threshold_mask(g.num_cells(), &r.cells, &r.similarity, t)).collect();
        for w in masks.windows(2) {
            assert!(w[1].iter().zip(&w[0]).all(|(hi, lo)| !hi || *lo), "raising the threshold enlarged the mask of {}", g.slide_id);
        }
        assert_eq!(masks[1], r.mask);
        strata.push(g.record.as_ref().unwrap().cancer_type.clone().unwrap());
        results.push(r);
    }
    let sparse = with_reference_coverage(&slides[0], 0.10);
    let prompt = text.encode(&sparse.record.as_ref().unwrap().prompt);
    let r = localize(&sparse, net, store, cfg.input_model(), &prompt, tau, floor).unwrap();
    assert!((r.reference_coverage - 0.10).abs() < 0.005, "constructed coverage {}", r.reference_coverage);
    assert!(r.dice.is_none() && r.excluded.is_some());
    results.push(r);
    strata.push("constructed".into());
    let report = stratified_summary(&results, &strata, floor).unwrap();
    assert_eq!(report.excluded.len(), 1, "{:?}", report.excluded);
    assert_eq!(report.excluded[0].0, sparse.slide_id);
    let overall = report.overall.clone().unwrap();
    print!("{}", report.to_text());
    assert_eq!(overall.n, slides.len());
    assert!(overall.mean >= 0.95, "mean Dice {:.4}", overall.mean);
    format!(
        "{} slides at tau 0.15: mean Dice {:.4} (min {:.4}); masks nested over 0.05/0.15/0.30; 10%-coverage slide excluded ({})",
        overall.n,
        overall.mean,
        results.iter().filter_map(|r| r.dice).fold(1.0, f64::min),
        report.excluded[0].1
    )
}

fn auc_oracle(labels: &[usize], scores: &[Vec<f64>], classes: usize) -> f64 {
    let (mut sum, mut k) = (0.0, 0);
    for c in 0..classes {
        let pos: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l == c).map(|(_, s)| s[c]).collect();
        let neg: Vec<f64> = labels.iter().zip(scores).filter(|(l, _)| **l != c).map(|(_, s)| s[c]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut twice_wins = 0u64;
        for p in &pos {
            for n in &neg {
                twice_wins += if p > n { 2 } else if p == n { 1 } else { 0 };
            }
        }
        sum += twice_wins as f64 / (2 * pos.len() * neg.len()) as f64;
        k += 1;
    }
    sum / k as f64
}

fn summary_oracle(values: &[f64]) -> (usize, f64, f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt() };
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    (n, mean, sd, median)
}

fn c10_metric_oracles() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..50 {
        let classes = rng.random_range(2..5);
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..classes)).collect();
        let scores: Vec<Vec<f64>> =
            (0..20).map(|_| (0..classes).map(|_| (rng.random::<f64>() * 10.0).round() / 10.0).collect()).collect();
        let m = metrics(&labels, &scores, classes).unwrap();
        assert_eq!(m.auc, auc_oracle(&labels, &scores, classes), "case {case}");
    }

    let mask = |on: std::ops::Range<usize>| (0..200).map(|i| on.contains(&i)).collect::<Vec<bool>>();
    assert_eq!(dice(&mask(0..100), &mask(0..100)).unwrap(), 1.0);
    assert_eq!(dice(&mask(0..100), &mask(100..200)).unwrap(), 0.0);
    assert_eq!(dice(&mask(0..100), &mask(50..150)).unwrap(), 0.5);

    let names = ["breast", "colon", "lung", "ovary"];
    let floor = 0.2;
    let mut results = Vec::new();
    let mut strata = Vec::new();
    for i in 0..50 {
        let coverage = rng.random::<f64>() * 0.6;
        let excluded = coverage < floor;
        results.push(LocalizationResult {
            slide_id: format!("s{i}"),
            cells: Vec::new(),
            similarity: Vec::new(),
            mask: Vec::new(),
            reference_coverage: coverage,
            dice: if excluded { None } else { Some(rng.random::<f64>()) },
            excluded: if excluded { Some("low coverage".into()) } else { None },
        });
        strata.push(names[rng.random_range(0..names.len())].to_string());
    }
    let report = stratified_summary(&results, &strata, floor).unwrap();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for (r, s) in results.iter().zip(&strata) {
        if r.reference_coverage >= floor {
            groups.entry(s).or_default().push(r.dice.unwrap());
            all.push(r.dice.unwrap());
        }
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    assert_eq!(report.strata.len(), groups.len());
    for (row, (name, values)) in report.strata.iter().zip(&groups) {
        let (n, mean, sd, median) = summary_oracle(values);
        assert_eq!((row.name.as_str(), row.n), (*name, n));
        assert!(close(row.mean, mean) && close(row.sd, sd) && close(row.median, median), "stratum {name}");
    }
    let macro_mean = groups.values().map(|v| summary_oracle(v).1).sum::<f64>() / groups.len() as f64;
    assert!(close(report.macro_mean.unwrap(), macro_mean));
    let o = report.overall.as_ref().unwrap();
    let (n, mean, sd, median) = summary_oracle(&all);
    assert!(o.n == n && close(o.mean, mean) && close(o.sd, sd) && close(o.median, median));
    assert_eq!(report.excluded.len(), 50 - n);
    format!("50 AUC cases exact; Dice 1/0/0.5; {} strata + macro + overall over {n} slides ({} excluded) match", groups.len(), 50 - n)
}

fn c11_abmil() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let head = AbmilHead::new(&mut store, "abmil", 8, 6, 5, 0.25, &mut rng);
    let (mut worst_sum, mut worst_perm) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(1..30);
        let tiles = Tensor::from_fn(n, 8, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let (slide, attn) = abmil_aggregate(&head, &store, &tiles).unwrap();
        assert!(attn.iter().all(|&a| a >= 0.0));
        worst_sum = worst_sum.max((attn.iter().sum::<f64>() - 1.0).abs());
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (slide_p, attn_p) = abmil_aggregate(&head, &store, &tiles.gather_rows(&order)).unwrap();
        for (a, b) in slide.iter().zip(&slide_p) {
            worst_perm = worst_perm.max((a - b).abs());
        }
        for (j, &i) in order.iter().enumerate() {
            assert!((attn_p[j] - attn[i]).abs() < 1e-12);
        }
    }
    assert!(worst_sum <= 1e-6, "attention sum off by {worst_sum}");
    assert!(worst_perm < 1e-12, "permutation moved the embedding by {worst_perm}");
    format!("100 bags: max |sum - 1| {worst_sum:.1e}, max permutation drift {worst_perm:.1e}")
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c12_determinism() -> String {
    let cfg = AstraConfig::from_toml_str(common::TINY).unwrap();
    let plan = cfg.data.plan().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let archive = |name: &str| {
        let root = dir.path().join(name);
        write_cohort(&root, &generate_cohort(&cfg.data.synth, &plan, 42).unwrap(), &ModelRegistry::default()).unwrap();
        files(&root)
    };
    let (a, b) = (archive("a"), archive("b"));
    assert_eq!(a, b, "archives differ");

    let slides = generate_cohort(&cfg.data.synth, &plan, 42).unwrap();
    let train = || {
        let mut pre_trace = Vec::new();
        let pre = pretrain::<f64>(&slides, &cfg, 5, Some(&mut pre_trace)).unwrap();
        let mut align_trace = Vec::new();
        let run = align(&slides, pre.store, pre.net, &cfg, 5, Some(&mut align_trace)).unwrap();
        (pre_trace, pre.checkpoint.to_bytes(), align_trace, run)
    };
    let (pt1, pc1, at1, run1) = train();
    let (pt2, pc2, at2, run2) = train();
    assert!(!pt1.is_empty() && !at1.is_empty());
    assert_eq!(pt1, pt2, "pretrain traces differ");
    assert_eq!(at1, at2, "align traces differ");
    assert_eq!(pc1, pc2, "pretrain checkpoints differ");
    assert_eq!(run1.checkpoint.to_bytes(), run2.checkpoint.to_bytes(), "align checkpoints differ");

    let path = dir.path().join("align.ckpt");
    run1.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    let net = Network::bind(&loaded.params, &cfg.encoder, &cfg.decoder, &cfg.registry(), cfg.align.dropout).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for g in &slides {
        let x = contextualize_slide(&run1.net, &run1.store, g, cfg.input_model()).unwrap();
        let y = contextualize_slide(&net, &loaded.params, g, cfg.input_model()).unwrap();
        assert_eq!(bits(x.embeddings.data()), bits(y.embeddings.data()));
        assert_eq!(bits(x.final_probs.data()), bits(y.final_probs.data()));
        let sx = abmil_aggregate(run1.net.slide_head().unwrap(), &run1.store, &x.embeddings).unwrap().0;
        let sy = abmil_aggregate(net.slide_head().unwrap(), &loaded.params, &y.embeddings).unwrap().0;
        assert_eq!(bits(&sx), bits(&sy));
    }
    format!(
        "{} archive files, {} + {} trace bytes and both checkpoints identical; reloaded checkpoint reproduces {} slides bit-exactly",
        a.len(),
        pt1.len(),
        at1.len(),
        slides.len()
    )
}

/// Smoothed expert maps of two-archetype slides against the planted labels.
fn routing_example(state: &State) -> String {
    let cfg = config("desk.toml");
    let (store, net) = state.pretrained.as_ref().expect("pretrained model from criterion 6");
    let mut aris = Vec::new();
    for t in 0..8 {
        let sc = SynthConfig { noise_sigma: 0.0, num_archetypes: 2, kind: SlideKind::malignant(t), ..cfg.data.synth.clone() };
        let g = generate_synthetic_slide(&sc, 100).unwrap();
        let map = expert_map(&g, net, store, cfg.input_model()).unwrap();
        let planted: Vec<usize> = map.cells.iter().map(|&c| g.label(c).unwrap() as usize).collect();
        aris.push(adjusted_rand_index(&map.smoothed, &planted).unwrap());
    }
    let mean = aris.iter().sum::<f64>() / aris.len() as f64;
    assert!(mean >= 0.3, "mean ARI {mean:.3}");
    format!("mean ARI {mean:.3} over 8 types ({})", aris.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" "))
}

/// Runs without the libtest harness so the report is never captured.
fn main() -> ExitCode {
    let mut state = State::default();
    let passed = [
        run("criterion 1 mask arithmetic", c1_mask_arithmetic),
        run("criterion 2 loss bounds", c2_loss_bounds),
        run("criterion 3 gradient checks", c3_gradients),
        run("criterion 4 MoE degeneracy", c4_moe_degeneracy),
        run("criterion 5 load balance", c5_load_balance),
        run("criterion 6 planted pretraining", || c6_pretraining(&mut state)),
        run("criterion 7 planted alignment", || c7_alignment(&mut state)),
        run("criterion 8 planted classification", c8_classification),
        run("criterion 9 planted localization", || c9_localization(&mut state)),
        run("criterion 10 metric oracles", c10_metric_oracles),
        run("criterion 11 ABMIL properties", c11_abmil),
        run("criterion 12 determinism", c12_determinism),
    ];
    let example = run("example routing ARI", || routing_example(&state));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, &p)| !p).map(|(i, _)| i + 1).collect();
    println!("{} of 12 criteria passed", 12 - failed.len());
    if failed.is_empty() && example {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}; routing example {}", if example { "passed" } else { "failed" });
        ExitCode::FAILURE
    }
}
