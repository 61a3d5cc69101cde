//! Synthetic slides with planted region geometry.
//!
//! Every region archetype owns a latent code drawn once per [`Universe`]; model
//! `k` observes a cell labelled `a` as `W_k z_a + noise`, with `W_k` a fixed
//! random linear map into that model's embedding width. Tumor codes carry a
//! cancer-type offset and epithelium codes carry an anatomic-site offset so
//! structured prompts are separable from tissue content alone.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AstraError, Result};
use crate::grid::{Archetype, Category, EmbeddingPlane, ModelRegistry, SlideGrid, SlideRecord};
use crate::seed;

/// A slide-level diagnosis in the synthetic vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub site: &'static str,
    pub archetype: Archetype,
}

const fn entry(name: &'static str, site: &'static str, archetype: Archetype) -> CatalogEntry {
    CatalogEntry { name, site, archetype }
}

pub const MALIGNANT_CATALOG: [CatalogEntry; 16] = [
    entry("squamous cell carcinoma", "skin", Archetype::TumorSolid),
    entry("renal cell carcinoma", "kidney", Archetype::TumorSolid),
    entry("colorectal carcinoma", "colon", Archetype::TumorGlandular),
    entry("endometrial carcinoma", "uterus", Archetype::TumorGlandular),
    entry("breast carcinoma", "breast", Archetype::TumorGlandular),
    entry("lung adenocarcinoma", "lung", Archetype::TumorGlandular),
    entry("ovarian carcinoma", "ovary", Archetype::TumorGlandular),
    entry("sarcoma", "soft tissue", Archetype::TumorSolid),
    entry("thyroid carcinoma", "thyroid", Archetype::TumorGlandular),
    entry("neuroendocrine neoplasm", "small intestine", Archetype::TumorSolid),
    entry("urothelial carcinoma", "bladder", Archetype::TumorSolid),
    entry("prostate carcinoma", "prostate", Archetype::TumorGlandular),
    entry("melanoma", "skin", Archetype::TumorSolid),
    entry("pancreatic carcinoma", "pancreas", Archetype::TumorGlandular),
    entry("hepatocellular carcinoma", "liver", Archetype::TumorSolid),
    entry("cholangiocarcinoma", "bile duct", Archetype::TumorGlandular),
];

pub const BENIGN_CATALOG: [CatalogEntry; 4] = [
    entry("fibroadenoma", "breast", Archetype::BenignEpithelium),
    entry("tubular adenoma", "colon", Archetype::BenignEpithelium),
    entry("leiomyoma", "uterus", Archetype::BenignEpithelium),
    entry("oncocytoma", "kidney", Archetype::BenignEpithelium),
];

pub const NORMAL_SITES: [&str; 8] = ["lung", "kidney", "colon", "breast", "liver", "thyroid", "prostate", "uterus"];

/// Every anatomic site in the synthetic vocabulary, in first-seen order.
pub fn all_sites() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    let names = MALIGNANT_CATALOG.iter().chain(&BENIGN_CATALOG).map(|e| e.site).chain(NORMAL_SITES);
    for s in names {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Coarse grouping of malignant types (carcinoma / sarcoma / melanoma).
pub fn major_group(cancer_type: &str) -> usize {
    match cancer_type {
        "sarcoma" => 1,
        "melanoma" => 2,
        _ => 0,
    }
}

/// Structured fields of the slide to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideKind {
    pub category: Category,
    /// Index into the category's catalog (malignant/benign) or into the normal site list.
    pub index: usize,
}

impl SlideKind {
    pub fn malignant(index: usize) -> Self {
        SlideKind { category: Category::Malignant, index }
    }

    pub fn entry(&self) -> Result<(Option<&'static str>, &'static str)> {
        let oob = || AstraError::invalid(format!("catalog index {} out of range for {}", self.index, self.category));
        Ok(match self.category {
            Category::Malignant => {
                let e = MALIGNANT_CATALOG.get(self.index).ok_or_else(oob)?;
                (Some(e.name), e.site)
            }
            Category::Benign => {
                let e = BENIGN_CATALOG.get(self.index).ok_or_else(oob)?;
                (Some(e.name), e.site)
            }
            Category::NormalAdjacent | Category::Normal => (None, *NORMAL_SITES.get(self.index).ok_or_else(oob)?),
        })
    }

    pub fn record(&self) -> Result<SlideRecord> {
        let (cancer_type, site) = self.entry()?;
        SlideRecord::new(self.category, cancer_type, site)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Distinct region archetypes a slide may contain (2..=6).
    pub num_archetypes: usize,
    pub tumor_blobs_min: usize,
    pub tumor_blobs_max: usize,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    pub tumor_fraction: f64,
    pub tumor_fraction_jitter: f64,
    pub benign_lesion_fraction: f64,
    pub normal_gland_fraction: f64,
    pub noise_sigma: f64,
    /// Probability that a non-anchor model lacks a tissue cell.
    pub missing_fraction: f64,
    pub latent_code_dim: usize,
    /// Fraction of code variance shared by all archetypes.
    pub shared_code_fraction: f64,
    pub type_offset_scale: f64,
    pub site_offset_scale: f64,
    pub universe_seed: u64,
    pub kind: SlideKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 48,
            height: 48,
            num_archetypes: 6,
            tumor_blobs_min: 1,
            tumor_blobs_max: 3,
            blob_radius_min: 4.0,
            blob_radius_max: 10.0,
            tumor_fraction: 0.4,
            tumor_fraction_jitter: 0.1,
            benign_lesion_fraction: 0.35,
            normal_gland_fraction: 0.15,
            noise_sigma: 0.05,
            missing_fraction: 0.0,
            latent_code_dim: 32,
            shared_code_fraction: 0.3,
            type_offset_scale: 2.0,
            site_offset_scale: 0.5,
            universe_seed: 0x00A5_7EA0,
            kind: SlideKind::malignant(0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(AstraError::invalid(format!(
                "lattice {}x{} cannot host a 16x16 crop window",
                self.width, self.height
            )));
        }
        if !(2..=6).contains(&self.num_archetypes) {
            return Err(AstraError::invalid("num_archetypes must lie in 2..=6"));
        }
        if self.tumor_blobs_min == 0 || self.tumor_blobs_min > self.tumor_blobs_max {
            return Err(AstraError::invalid("tumor blob count range is empty"));
        }
        if !(self.blob_radius_min > 0.0 && self.blob_radius_min <= self.blob_radius_max) {
            return Err(AstraError::invalid("blob radius range is empty"));
        }
        for (name, v) in [
            ("tumor_fraction", self.tumor_fraction),
            ("benign_lesion_fraction", self.benign_lesion_fraction),
            ("normal_gland_fraction", self.normal_gland_fraction),
            ("missing_fraction", self.missing_fraction),
            ("shared_code_fraction", self.shared_code_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AstraError::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.noise_sigma < 0.0 || self.latent_code_dim == 0 {
            return Err(AstraError::invalid("noise_sigma must be >= 0 and latent_code_dim > 0"));
        }
        self.kind.entry()?;
        Ok(())
    }
}

/// Fixed latent codes and per-model linear maps shared by a whole cohort.
#[derive(Clone, Debug)]
pub struct Universe {
    pub latent_dim: usize,
    archetype_codes: Vec<Vec<f64>>,
    tumor_offsets: Vec<Vec<f64>>,
    benign_offsets: Vec<Vec<f64>>,
    site_offsets: Vec<Vec<f64>>,
    sites: Vec<&'static str>,
    /// Row-major `embed_dim x latent_dim` map per model.
    maps: Vec<Vec<f64>>,
    dims: Vec<usize>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl Universe {
    pub fn new(config: &SynthConfig, registry: &ModelRegistry) -> Universe {
        let d = config.latent_code_dim;
        let mut rng = seed::rng(config.universe_seed, &[0x0C0DE]);
        let shared = gaussian_vec(&mut rng, d);
        let (a, b) = (config.shared_code_fraction.sqrt(), (1.0 - config.shared_code_fraction).sqrt());
        let archetype_codes = Archetype::ALL
            .iter()
            .map(|_| gaussian_vec(&mut rng, d).iter().zip(&shared).map(|(g, s)| a * s + b * g).collect())
            .collect();
        let mut offsets = |n: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| gaussian_vec(&mut rng, d).into_iter().map(|x| x * scale).collect()).collect()
        };
        let tumor_offsets = offsets(MALIGNANT_CATALOG.len(), config.type_offset_scale);
        let benign_offsets = offsets(BENIGN_CATALOG.len(), config.type_offset_scale);
        let sites = all_sites();
        let site_offsets = offsets(sites.len(), config.site_offset_scale);
        let std = (1.0 / d as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite");
        let maps = registry
            .models
            .iter()
            .map(|m| {
                let mut r = seed::rng(config.universe_seed, &[0x3A9, m.model_id as u64]);
                (0..m.embed_dim * d).map(|_| normal.sample(&mut r)).collect()
            })
            .collect();
        Universe {
            latent_dim: d,
            archetype_codes,
            tumor_offsets,
            benign_offsets,
            site_offsets,
            sites,
            maps,
            dims: registry.dims(),
        }
    }

    /// Latent code of a cell labelled `label` on a slide of the given kind.
    pub fn code(&self, label: Archetype, kind: &SlideKind) -> Vec<f64> {
        let mut z = self.archetype_codes[label as usize].clone();
        let add = |z: &mut Vec<f64>, off: &[f64]| z.iter_mut().zip(off).for_each(|(a, b)| *a += b);
        if label.is_tumor() && kind.category == Category::Malignant {
            add(&mut z, &self.tumor_offsets[kind.index]);
        }
        if label == Archetype::BenignEpithelium {
            if kind.category == Category::Benign {
                add(&mut z, &self.benign_offsets[kind.index]);
            }
            if let Ok((_, site)) = kind.entry() {
                let s = self.sites.iter().position(|&x| x == site).expect("site in vocabulary");
                add(&mut z, &self.site_offsets[s]);
            }
        }
        z
    }

    /// Noise-free embedding `W_k z` in `f32`.
    pub fn embed(&self, model_id: usize, code: &[f64]) -> Vec<f32> {
        let d = self.latent_dim;
        let w = &self.maps[model_id];
        (0..self.dims[model_id])
            .map(|r| w[r * d..(r + 1) * d].iter().zip(code).map(|(a, b)| a * b).sum::<f64>() as f32)
            .collect()
    }
}

/// Lesion placement plan: target fraction of tissue covered by `archetype`.
struct LesionPlan {
    archetype: Archetype,
    fraction: f64,
    blobs: (usize, usize),
    radius_scale: f64,
}

/// Generates one synthetic slide; deterministic in `(config, seed)`.
pub fn generate_synthetic_slide(config: &SynthConfig, seed: u64) -> Result<SlideGrid> {
    let registry = ModelRegistry::default();
    let universe = Universe::new(config, &registry);
    generate_with_universe(config, &universe, &registry, seed, &format!("syn-{seed:016x}"))
}

pub fn generate_with_universe(
    config: &SynthConfig,
    universe: &Universe,
    registry: &ModelRegistry,
    seed: u64,
    slide_id: &str,
) -> Result<SlideGrid> {
    config.validate()?;
    let record = config.kind.record()?;
    let (w, h) = (config.width, config.height);
    let mut rng = seed::rng(seed, &[0x511DE]);
    let tissue = tissue_mask(w, h, &mut rng);
    let kind = config.kind;

    let (palette, lesion): (Vec<(Archetype, f64)>, Option<LesionPlan>) = match kind.category {
        Category::Malignant => {
            let entry = MALIGNANT_CATALOG[kind.index];
            let jitter = config.tumor_fraction_jitter;
            let f = (config.tumor_fraction + rng.random_range(-jitter..=jitter)).clamp(0.02, 0.95);
            (
                vec![(Archetype::Stroma, 0.5), (Archetype::Immune, 0.3), (Archetype::Necrosis, 0.2)],
                Some(LesionPlan {
                    archetype: entry.archetype,
                    fraction: f,
                    blobs: (config.tumor_blobs_min, config.tumor_blobs_max),
                    radius_scale: 1.0,
                }),
            )
        }
        Category::Benign => (
            vec![(Archetype::Stroma, 1.0)],
            Some(LesionPlan {
                archetype: Archetype::BenignEpithelium,
                fraction: config.benign_lesion_fraction,
                blobs: (config.tumor_blobs_min, config.tumor_blobs_max),
                radius_scale: 1.0,
            }),
        ),
        Category::NormalAdjacent => (vec![(Archetype::Stroma, 0.5), (Archetype::Immune, 0.5)], None),
        Category::Normal => (
            vec![(Archetype::Stroma, 1.0)],
            Some(LesionPlan {
                archetype: Archetype::BenignEpithelium,
                fraction: config.normal_gland_fraction,
                blobs: (4, 7),
                radius_scale: 0.4,
            }),
        ),
    };
    let lesion_count = lesion.is_some() as usize;
    let keep = config.num_archetypes.saturating_sub(lesion_count).max(1).min(palette.len());
    let palette = &palette[..keep];

    let mut labels: Vec<Option<Archetype>> = background_partition(w, h, &tissue, palette, &mut rng);
    if let Some(plan) = lesion {
        let blob = place_lesions(w, h, &tissue, &plan, config, &mut rng);
        for (c, inside) in blob.iter().enumerate() {
            if *inside {
                labels[c] = Some(plan.archetype);
            }
        }
    }

    let cells = w * h;
    let mut codes: Vec<(Archetype, Vec<Vec<f32>>)> = Vec::new();
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).expect("finite sigma");
    let mut planes: Vec<EmbeddingPlane> = registry.models.iter().map(|m| EmbeddingPlane::empty(m.embed_dim, cells)).collect();
    let anchor = ModelRegistry::DEFAULT_ANCHOR;
    let mut buf = Vec::new();
    for c in 0..cells {
        let Some(label) = labels[c] else { continue };
        let pos = match codes.iter().position(|(a, _)| *a == label) {
            Some(p) => p,
            None => {
                let z = universe.code(label, &kind);
                codes.push((label, (0..registry.len()).map(|k| universe.embed(k, &z)).collect()));
                codes.len() - 1
            }
        };
        for (k, plane) in planes.iter_mut().enumerate() {
            if k != anchor && config.missing_fraction > 0.0 && rng.random::<f64>() < config.missing_fraction {
                continue;
            }
            let clean = &codes[pos].1[k];
            buf.clear();
            if config.noise_sigma > 0.0 {
                buf.extend(clean.iter().map(|&x| x + noise.sample(&mut rng) as f32));
            } else {
                buf.extend_from_slice(clean);
            }
            plane.insert(c, &buf);
        }
    }
    let grid = SlideGrid {
        slide_id: slide_id.to_string(),
        width: w,
        height: h,
        anchor_model: anchor,
        tissue_valid: tissue,
        planes,
        planted_labels: Some(labels),
        record: Some(record),
    };
    grid.validate()?;
    Ok(grid)
}

/// Irregular elliptical tissue foreground.
fn tissue_mask(w: usize, h: usize, rng: &mut impl Rng) -> Vec<bool> {
    let cx = w as f64 / 2.0 + rng.random_range(-2.0..2.0);
    let cy = h as f64 / 2.0 + rng.random_range(-2.0..2.0);
    let rx = w as f64 * rng.random_range(0.40..0.47);
    let ry = h as f64 * rng.random_range(0.40..0.47);
    let wobble: Vec<(f64, f64, f64)> =
        (2..=4).map(|j| (j as f64, rng.random_range(0.0..0.06), rng.random_range(0.0..std::f64::consts::TAU))).collect();
    let mut mask = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let (dx, dy) = ((c as f64 + 0.5 - cx) / rx, (r as f64 + 0.5 - cy) / ry);
            let theta = dy.atan2(dx);
            let limit = 1.0 + wobble.iter().map(|(j, a, p)| a * (j * theta + p).sin()).sum::<f64>();
            mask[r * w + c] = (dx * dx + dy * dy).sqrt() <= limit;
        }
    }
    mask
}

/// Voronoi partition of the tissue among the palette archetypes.
fn background_partition(
    w: usize,
    h: usize,
    tissue: &[bool],
    palette: &[(Archetype, f64)],
    rng: &mut impl Rng,
) -> Vec<Option<Archetype>> {
    let n_seeds = rng.random_range(6..=10);
    let total: f64 = palette.iter().map(|p| p.1).sum();
    let seeds: Vec<(f64, f64, Archetype)> = (0..n_seeds)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let mut u = rng.random_range(0.0..total);
            let mut pick = palette[0].0;
            for &(a, wt) in palette {
                if u < wt {
                    pick = a;
                    break;
                }
                u -= wt;
            }
            (x, y, pick)
        })
        .collect();
    (0..w * h)
        .map(|cell| {
            if !tissue[cell] {
                return None;
            }
            let (x, y) = ((cell % w) as f64 + 0.5, (cell / w) as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - x).powi(2) + (a.1 - y).powi(2);
                    let db = (b.0 - x).powi(2) + (b.1 - y).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one seed");
            Some(nearest.2)
        })
        .collect()
}

/// Rasterizes random ellipses, scaled jointly so they cover `plan.fraction` of tissue.
fn place_lesions(w: usize, h: usize, tissue: &[bool], plan: &LesionPlan, config: &SynthConfig, rng: &mut impl Rng) -> Vec<bool> {
    let tissue_cells: Vec<usize> = (0..w * h).filter(|&c| tissue[c]).collect();
    let n_blobs = rng.random_range(plan.blobs.0..=plan.blobs.1);
    let blobs: Vec<(f64, f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let c = tissue_cells[rng.random_range(0..tissue_cells.len())];
            let (x, y) = ((c % w) as f64 + 0.5, (c / w) as f64 + 0.5);
            let a = rng.random_range(config.blob_radius_min..=config.blob_radius_max) * plan.radius_scale;
            let b = rng.random_range(config.blob_radius_min..=config.blob_radius_max) * plan.radius_scale;
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            (x, y, a, b, angle)
        })
        .collect();
    let raster = |s: f64| -> Vec<bool> {
        (0..w * h)
            .map(|cell| {
                if !tissue[cell] {
                    return false;
                }
                let (x, y) = ((cell % w) as f64 + 0.5, (cell / w) as f64 + 0.5);
                blobs.iter().any(|&(bx, by, a, b, t)| {
                    let (dx, dy) = (x - bx, y - by);
                    let u = (dx * t.cos() + dy * t.sin()) / (s * a);
                    let v = (-dx * t.sin() + dy * t.cos()) / (s * b);
                    u * u + v * v <= 1.0
                })
            })
            .collect()
    };
    let frac = |m: &[bool]| m.iter().filter(|&&x| x).count() as f64 / tissue_cells.len().max(1) as f64;
    let (mut lo, mut hi) = (0.0f64, 4.0 * (w.max(h) as f64) / config.blob_radius_min.max(1e-3));
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if frac(&raster(mid)) >= plan.fraction {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    raster(hi)
}

/// Composition of a generated cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortPlan {
    pub kinds: Vec<SlideKind>,
}

impl CohortPlan {
    /// `per_type` slides for each of the first `n_types` malignant catalog entries.
    pub fn malignant(n_types: usize, per_type: usize) -> Self {
        let kinds = (0..per_type).flat_map(|_| (0..n_types).map(SlideKind::malignant)).collect();
        CohortPlan { kinds }
    }

    /// `per_category` slides of each classification category, cycling catalog entries.
    pub fn categories(per_category: usize, n_malignant_types: usize) -> Self {
        let mut kinds = Vec::new();
        for i in 0..per_category {
            for cat in Category::ALL {
                let index = match cat {
                    Category::Malignant => i % n_malignant_types.max(1),
                    Category::Benign => i % BENIGN_CATALOG.len(),
                    _ => i % NORMAL_SITES.len(),
                };
                kinds.push(SlideKind { category: cat, index });
            }
        }
        CohortPlan { kinds }
    }

    /// Half malignant over `n_types`, the rest spread over the other categories.
    pub fn mixed(n: usize, n_types: usize) -> Self {
        let mut kinds = Vec::with_capacity(n);
        for i in 0..n {
            let kind = if i % 2 == 0 {
                SlideKind::malignant((i / 2) % n_types.max(1))
            } else {
                let j = i / 2;
                match j % 3 {
                    0 => SlideKind { category: Category::Benign, index: j % BENIGN_CATALOG.len() },
                    1 => SlideKind { category: Category::NormalAdjacent, index: j % NORMAL_SITES.len() },
                    _ => SlideKind { category: Category::Normal, index: j % NORMAL_SITES.len() },
                }
            };
            kinds.push(kind);
        }
        CohortPlan { kinds }
    }
}

/// Generates every slide of `plan`; slide `i` uses a seed derived from `(seed, i)`.
pub fn generate_cohort(base: &SynthConfig, plan: &CohortPlan, seed: u64) -> Result<Vec<SlideGrid>> {
    cohort_iter(base, plan, seed).collect()
}

/// Lazy form of [`generate_cohort`], yielding identical slides one at a time.
pub fn cohort_iter<'a>(base: &'a SynthConfig, plan: &'a CohortPlan, seed: u64) -> impl Iterator<Item = Result<SlideGrid>> + 'a {
    let registry = ModelRegistry::default();
    let universe = Universe::new(base, &registry);
    plan.kinds.iter().enumerate().map(move |(i, kind)| {
        let config = SynthConfig { kind: *kind, ..base.clone() };
        let slide_seed = seed::derive(seed, &[i as u64]);
        generate_with_universe(&config, &universe, &registry, slide_seed, &format!("syn-{i:04}"))
    })
}
