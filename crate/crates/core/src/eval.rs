//! Classification metrics, Dice scoring and text-guided localization.

use std::fmt::Write as _;

use crate::error::{AstraError, Result};
use crate::float::Real;
use crate::grid::SlideGrid;
use crate::model::{contextualize_slide, Network};
use crate::params::ParamStore;

/// Affine slide classifier, `w` row-major `in_dim x classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub in_dim: usize,
    pub classes: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(in_dim: usize, classes: usize) -> Self {
        LinearHead { in_dim, classes, w: vec![0.0; in_dim * classes], b: vec![0.0; classes] }
    }
}

/// Class scores `x W + b`.
pub fn classify(x: &[f64], head: &LinearHead) -> Result<Vec<f64>> {
    if x.len() != head.in_dim {
        return Err(AstraError::Shape(format!("embedding has {} dims, head expects {}", x.len(), head.in_dim)));
    }
    let mut out = head.b.clone();
    for (i, &xi) in x.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += xi * head.w[i * head.classes + c];
        }
    }
    Ok(out)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub bacc: f64,
    pub specificity: f64,
    pub auc: f64,
    /// Classes left out of the macro AUC for lacking positives or negatives.
    pub auc_skipped: Vec<usize>,
}

/// One-vs-rest rank AUC of `scores` for `positive` labels; ties earn half credit.
/// `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of positives, doubled to stay integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let np = n_pos as u64;
    let twice_u = twice_rank_sum - np * (np + 1);
    Some(twice_u as f64 / (2 * np * n_neg as u64) as f64)
}

/// Acc, B-Acc, macro one-vs-rest specificity (argmax confusion counts) and
/// macro one-vs-rest AUC.
pub fn metrics(labels: &[usize], scores: &[Vec<f64>], classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(AstraError::invalid("metrics need at least one sample"));
    }
    if scores.len() != labels.len() {
        return Err(AstraError::Shape(format!("{} labels vs {} score rows", labels.len(), scores.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(AstraError::invalid(format!("label {bad} outside {classes} classes")));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes) {
        return Err(AstraError::Shape(format!("score row of length {}, expected {classes}", row.len())));
    }
    let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let n = labels.len();
    let correct = labels.iter().zip(&preds).filter(|(l, p)| l == p).count();
    let (mut recall_sum, mut recall_n) = (0.0, 0);
    let (mut spec_sum, mut spec_n) = (0.0, 0);
    let (mut auc_sum, mut auc_n) = (0.0, 0);
    let mut auc_skipped = Vec::new();
    for c in 0..classes {
        let pos = labels.iter().filter(|&&l| l == c).count();
        let tp = labels.iter().zip(&preds).filter(|&(&l, &p)| l == c && p == c).count();
        let fp = labels.iter().zip(&preds).filter(|&(&l, &p)| l != c && p == c).count();
        if pos > 0 {
            recall_sum += tp as f64 / pos as f64;
            recall_n += 1;
        }
        let neg = n - pos;
        if neg > 0 {
            spec_sum += (neg - fp) as f64 / neg as f64;
            spec_n += 1;
        }
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match binary_auc(&col, &is_pos) {
            Some(a) => {
                auc_sum += a;
                auc_n += 1;
            }
            None => auc_skipped.push(c),
        }
    }
    let mean = |s: f64, k: usize| if k > 0 { s / k as f64 } else { f64::NAN };
    Ok(Metrics {
        acc: correct as f64 / n as f64,
        bacc: mean(recall_sum, recall_n),
        specificity: mean(spec_sum, spec_n),
        auc: mean(auc_sum, auc_n),
        auc_skipped,
    })
}

/// Macro recall over the classes present in `labels`.
pub fn macro_recall(labels: &[usize], preds: &[usize]) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return f64::NAN;
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| {
            let pos = labels.iter().filter(|&&l| l == c).count();
            let tp = labels.iter().zip(preds).filter(|&(&l, &p)| l == c && p == c).count();
            tp as f64 / pos as f64
        })
        .sum();
    sum / classes.len() as f64
}

/// `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(AstraError::Shape(format!("mask lengths {} and {}", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[derive(Clone, Debug)]
pub struct LocalizationResult {
    pub slide_id: String,
    /// Tissue cells, in the order of `similarity`.
    pub cells: Vec<usize>,
    /// `f_i . t` per tissue cell.
    pub similarity: Vec<f64>,
    /// Predicted tumor mask over every grid cell.
    pub mask: Vec<bool>,
    /// Fraction of tissue cells in the reference tumor mask.
    pub reference_coverage: f64,
    pub dice: Option<f64>,
    pub excluded: Option<String>,
}

/// Thresholds similarities onto the grid; background cells are never set.
pub fn threshold_mask(num_cells: usize, cells: &[usize], similarity: &[f64], tau: f64) -> Vec<bool> {
    let mut mask = vec![false; num_cells];
    for (&c, &s) in cells.iter().zip(similarity) {
        mask[c] = s >= tau;
    }
    mask
}

/// Cosine of each row with a unit prompt vector, after the slide projection.
pub fn tile_similarity<T: Real>(projected: &crate::tensor::Tensor<T>, prompt: &[f64]) -> Vec<f64> {
    (0..projected.rows())
        .map(|r| {
            let row = projected.row(r);
            let norm = row.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            row.iter().zip(prompt).map(|(x, t)| x.f64() * t).sum::<f64>() / norm
        })
        .collect()
}

/// Per-tile prompt similarity and Dice against the planted tumor set.
/// Slides whose reference covers less than `exclusion_floor` of tissue are
/// excluded and get no Dice.
pub fn localize<T: Real>(
    grid: &SlideGrid,
    net: &Network,
    store: &ParamStore<T>,
    input_model: usize,
    prompt: &[f64],
    tau_loc: f64,
    exclusion_floor: f64,
) -> Result<LocalizationResult> {
    let head = net.slide_head()?;
    let norm = prompt.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(AstraError::invalid(format!("prompt vector must be unit norm, got {norm}")));
    }
    let ctx = contextualize_slide(net, store, grid, input_model)?;
    let similarity = tile_similarity(&head.project_tiles(store, &ctx.embeddings), prompt);
    let mask = threshold_mask(grid.num_cells(), &ctx.cells, &similarity, tau_loc);
    let reference = grid.tumor_mask();
    let tissue = grid.tissue_count();
    let ref_count = reference.iter().filter(|&&r| r).count();
    let reference_coverage = if tissue > 0 { ref_count as f64 / tissue as f64 } else { 0.0 };
    let (dice, excluded) = if reference_coverage < exclusion_floor {
        let reason = format!("reference tumor covers {:.1}% of tissue, below {:.1}%", 100.0 * reference_coverage, 100.0 * exclusion_floor);
        (None, Some(reason))
    } else {
        (Some(self::dice(&mask, &reference)?), None)
    };
    Ok(LocalizationResult { slide_id: grid.slide_id.clone(), cells: ctx.cells, similarity, mask, reference_coverage, dice, excluded })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 for a single value.
    pub sd: f64,
    pub median: f64,
}

impl SummaryRow {
    pub fn from_values(name: impl Into<String>, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
        SummaryRow { name: name.into(), n, mean, sd, median }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceReport {
    /// One row per stratum, sorted by name.
    pub strata: Vec<SummaryRow>,
    /// Unweighted mean of the stratum means.
    pub macro_mean: Option<f64>,
    pub overall: Option<SummaryRow>,
    pub excluded: Vec<(String, String)>,
    pub no_evaluable_slides: bool,
}

/// Per-stratum Dice summary with the coverage exclusion rule applied.
pub fn stratified_summary(results: &[LocalizationResult], strata: &[String], exclusion_floor: f64) -> Result<DiceReport> {
    if results.len() != strata.len() {
        return Err(AstraError::Shape(format!("{} results vs {} strata labels", results.len(), strata.len())));
    }
    let mut groups: std::collections::BTreeMap<&str, Vec<f64>> = std::collections::BTreeMap::new();
    let mut excluded = Vec::new();
    let mut all = Vec::new();
    for (r, s) in results.iter().zip(strata) {
        let reason = match (&r.excluded, r.dice) {
            (Some(reason), _) => Some(reason.clone()),
            _ if r.reference_coverage < exclusion_floor => Some(format!(
                "reference tumor covers {:.1}% of tissue, below {:.1}%",
                100.0 * r.reference_coverage,
                100.0 * exclusion_floor
            )),
            (None, None) => Some("no dice computed".to_string()),
            (None, Some(_)) => None,
        };
        match reason {
            Some(reason) => excluded.push((r.slide_id.clone(), reason)),
            None => {
                let d = r.dice.expect("checked above");
                groups.entry(s.as_str()).or_default().push(d);
                all.push(d);
            }
        }
    }
    let rows: Vec<SummaryRow> = groups.iter().map(|(k, v)| SummaryRow::from_values(*k, v)).collect();
    let macro_mean = if rows.is_empty() { None } else { Some(rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64) };
    let overall = if all.is_empty() { None } else { Some(SummaryRow::from_values("overall", &all)) };
    Ok(DiceReport { strata: rows, macro_mean, overall, excluded, no_evaluable_slides: all.is_empty() })
}

impl DiceReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("stratum\tn\tmean\tsd\tmedian\n");
        for r in &self.strata {
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}\t{:.4}", r.name, r.n, r.mean, r.sd, r.median);
        }
        match (&self.overall, self.macro_mean) {
            (Some(o), Some(m)) => {
                let _ = writeln!(s, "macro\t{}\t{:.4}\t\t", self.strata.len(), m);
                let _ = writeln!(s, "overall\t{}\t{:.4}\t{:.4}\t{:.4}", o.n, o.mean, o.sd, o.median);
            }
            _ => s.push_str("no evaluable slides\n"),
        }
        for (id, why) in &self.excluded {
            let _ = writeln!(s, "excluded\t{id}\t{why}");
        }
        s
    }

    /// `key=value` lines: `dice.<stratum>.{n,mean,sd,median}`, `dice.macro`,
    /// `dice.overall.*`, `dice.excluded`, `dice.no_evaluable`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for r in self.strata.iter().chain(self.overall.iter()) {
            let key = r.name.replace(char::is_whitespace, "_");
            let _ = writeln!(s, "dice.{key}.n={}\ndice.{key}.mean={}\ndice.{key}.sd={}\ndice.{key}.median={}", r.n, r.mean, r.sd, r.median);
        }
        if let Some(m) = self.macro_mean {
            let _ = writeln!(s, "dice.macro={m}");
        }
        let _ = writeln!(s, "dice.excluded={}\ndice.no_evaluable={}", self.excluded.len(), self.no_evaluable_slides);
        s
    }
}

/// Metric rows of a multi-seed classification run.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    pub task: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<Metrics>,
}

impl ClassificationReport {
    fn columns(&self) -> [Vec<f64>; 4] {
        [
            self.rows.iter().map(|m| m.acc).collect(),
            self.rows.iter().map(|m| m.bacc).collect(),
            self.rows.iter().map(|m| m.specificity).collect(),
            self.rows.iter().map(|m| m.auc).collect(),
        ]
    }

    /// `(mean, sample sd)` of Acc, B-Acc, Sp*, AUC across seeds.
    pub fn mean_std(&self) -> [(f64, f64); 4] {
        self.columns().map(|v| {
            let r = SummaryRow::from_values("", &v);
            (r.mean, r.sd)
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} ({})\nseed\tAcc\tB-Acc\tSp*\tAUC\n", self.task, self.config);
        for (seed, m) in self.seeds.iter().zip(&self.rows) {
            let _ = writeln!(s, "{seed}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", m.acc, m.bacc, m.specificity, m.auc);
        }
        let ms = self.mean_std();
        let _ = writeln!(
            s,
            "mean±std\t{:.4}±{:.4}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{:.4}±{:.4}",
            ms[0].0, ms[0].1, ms[1].0, ms[1].1, ms[2].0, ms[2].1, ms[3].0, ms[3].1
        );
        s
    }

    /// `key=value` lines: `<config>.seed<k>.<metric>` and `<config>.{mean,std}.<metric>`.
    pub fn to_kv(&self) -> String {
        let names = ["acc", "bacc", "sp", "auc"];
        let mut s = String::new();
        for (seed, m) in self.seeds.iter().zip(&self.rows) {
            for (n, v) in names.iter().zip([m.acc, m.bacc, m.specificity, m.auc]) {
                let _ = writeln!(s, "{}.seed{seed}.{n}={v}", self.config);
            }
        }
        for (n, (mean, sd)) in names.iter().zip(self.mean_std()) {
            let _ = writeln!(s, "{}.mean.{n}={mean}\n{}.std.{n}={sd}", self.config, self.config);
        }
        s
    }
}
