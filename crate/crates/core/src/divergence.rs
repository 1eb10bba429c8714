//! Classifier-based estimates of the H-divergence between a source and a
//! target feature sample, per class and per mixed-class subset.
//!
//! A small MLP domain classifier is trained on half of each domain and scored
//! on the other half; `d̂ = 2·[1 − min(err_S + err_T)]` over a few seeded
//! restarts, clipped to `[0, 2]`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::DomainTag;
use crate::params::{Bound, ParamStore, Sgd, SgdConfig};

/// A class subset, kept sorted and deduplicated.
pub type Subset = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub vector: Vec<f64>,
    #[serde(default)]
    pub subset: Subset,
    pub domain: DomainTag,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainFeatureSet {
    pub samples: Vec<FeatureSample>,
}

impl DomainFeatureSet {
    pub fn new(mut samples: Vec<FeatureSample>) -> Result<Self> {
        for s in &mut samples {
            s.subset.sort_unstable();
            s.subset.dedup();
        }
        let set = Self { samples };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.samples.first() else {
            return Ok(());
        };
        let d = first.vector.len();
        for s in &self.samples {
            if s.vector.len() != d {
                return Err(Error::shape("feature set", &[d], &[s.vector.len()]));
            }
            if s.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "feature vector" });
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.vector.len())
    }

    fn split(&self) -> (Vec<&[f64]>, Vec<&[f64]>) {
        let mut s = Vec::new();
        let mut t = Vec::new();
        for x in &self.samples {
            match x.domain {
                DomainTag::Source => s.push(x.vector.as_slice()),
                DomainTag::Target => t.push(x.vector.as_slice()),
            }
        }
        (s, t)
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(std::io::BufReader::new(file))
    }

    /// One `{vector, subset, domain}` object per line.
    pub fn parse_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut samples = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io("<features>", e))?;
            if !line.trim().is_empty() {
                samples.push(serde_json::from_str(&line)?);
            }
        }
        Self::new(samples)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io("<features>", e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub restarts: usize,
    /// Minimum number of samples per domain for an estimate.
    pub min_per_domain: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            steps: 300,
            learning_rate: 0.3,
            momentum: 0.9,
            weight_decay: 1e-4,
            restarts: 3,
            min_per_domain: 4,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig("hidden and restarts must be >= 1".into()));
        }
        if self.min_per_domain < 2 {
            return Err(Error::InvalidConfig("min_per_domain must be >= 2 to split".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

fn fnv(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes
        .into_iter()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn subset_seed(base: u64, subset: &[usize]) -> u64 {
    base ^ fnv(subset.iter().flat_map(|c| (*c as u64).to_le_bytes()))
}

fn cmp_vec(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(a.len().cmp(&b.len()))
}

/// Canonical order then a seeded shuffle, so the split does not depend on
/// the order samples arrived in.
fn shuffled<'a>(mut xs: Vec<&'a [f64]>, rng: &mut ChaCha8Rng) -> Vec<&'a [f64]> {
    xs.sort_by(|a, b| cmp_vec(a, b));
    xs.shuffle(rng);
    xs
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Self { mean, inv_std }
    }

    fn matrix(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            data.extend(r.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s));
        }
        Tensor::new(&[rows.len(), d], data)
    }
}

struct Mlp<'c> {
    cfg: &'c TrainerConfig,
    params: ParamStore,
}

impl<'c> Mlp<'c> {
    fn new(cfg: &'c TrainerConfig, dim: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        params.init_normal("w1", &[cfg.hidden, dim], (2.0 / dim as f64).sqrt(), seed);
        params.init_zeros("b1", &[cfg.hidden]);
        params.init_normal("w2", &[1, cfg.hidden], (1.0 / cfg.hidden as f64).sqrt(), seed);
        params.init_zeros("b2", &[1]);
        Self { cfg, params }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: &Tensor) -> Result<crate::autodiff::Var> {
        let xv = tape.constant(x.clone());
        let h = tape.linear(xv, p.var("w1")?, Some(p.var("b1")?))?;
        let h = tape.relu(h)?;
        let o = tape.linear(h, p.var("w2")?, Some(p.var("b2")?))?;
        tape.sigmoid(o)
    }

    /// Full-batch training on a domain-balanced BCE.
    fn fit(&mut self, x: &Tensor, labels: &Tensor, weights: &Tensor) -> Result<()> {
        let mut opt = Sgd::new(SgdConfig {
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
            clip_norm: None,
        });
        for _ in 0..self.cfg.steps {
            let mut tape = Tape::new();
            let p = Bound::all(&mut tape, &self.params);
            let out = self.forward(&mut tape, &p, x)?;
            let y = tape.constant(labels.clone());
            let w = tape.constant(weights.clone());
            let l = tape.bce(out, y, 1e-7)?;
            let l = tape.mul(l, w)?;
            let l = tape.sum(l)?;
            if !tape.value(l).item().is_finite() {
                return Err(Error::NonFinite { op: "domain classifier loss" });
            }
            tape.backward(l)?;
            opt.step(&mut self.params, &p.grads(&tape), self.cfg.learning_rate, |_| true)?;
        }
        Ok(())
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = Bound::all(&mut tape, &self.params);
        let o = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(o).data().to_vec())
    }
}

/// Detail of one H-divergence estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HEstimate {
    pub d_h: f64,
    /// `err_S + err_T` of each restart on the held-out halves.
    pub restart_errors: Vec<f64>,
    pub n_source: usize,
    pub n_target: usize,
}

fn stack_rows<'a>(a: &[&'a [f64]], b: &[&'a [f64]]) -> Vec<&'a [f64]> {
    a.iter().chain(b).copied().collect()
}

fn estimate_seeded(source: Vec<&[f64]>, target: Vec<&[f64]>, cfg: &TrainerConfig, seed: u64) -> Result<HEstimate> {
    cfg.validate()?;
    let (ns, nt) = (source.len(), target.len());
    for (what, got) in [("source samples", ns), ("target samples", nt)] {
        if got < cfg.min_per_domain {
            return Err(Error::InsufficientSamples {
                what: what.to_string(),
                got,
                need: cfg.min_per_domain,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = shuffled(source, &mut rng);
    let t = shuffled(target, &mut rng);
    let (s_train, s_eval) = s.split_at(ns / 2);
    let (t_train, t_eval) = t.split_at(nt / 2);

    let train_rows = stack_rows(s_train, t_train);
    let scaler = Standardizer::fit(&train_rows);
    let x_train = scaler.matrix(&train_rows)?;
    let labels = Tensor::new(
        &[train_rows.len(), 1],
        (0..train_rows.len()).map(|i| if i < s_train.len() { 0.0 } else { 1.0 }).collect(),
    )?;
    let weights = Tensor::new(
        &[train_rows.len(), 1],
        (0..train_rows.len())
            .map(|i| if i < s_train.len() { 0.5 / s_train.len() as f64 } else { 0.5 / t_train.len() as f64 })
            .collect(),
    )?;
    let x_s = scaler.matrix(s_eval)?;
    let x_t = scaler.matrix(t_eval)?;

    let dim = train_rows[0].len();
    let mut restart_errors = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let mut mlp = Mlp::new(cfg, dim, seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(r as u64 + 1)));
        mlp.fit(&x_train, &labels, &weights)?;
        let err_s = mlp.predict(&x_s)?.iter().filter(|&&p| p >= 0.5).count() as f64 / s_eval.len() as f64;
        let err_t = mlp.predict(&x_t)?.iter().filter(|&&p| p < 0.5).count() as f64 / t_eval.len() as f64;
        restart_errors.push(err_s + err_t);
    }
    let best = restart_errors.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(HEstimate {
        d_h: (2.0 * (1.0 - best)).clamp(0.0, 2.0),
        restart_errors,
        n_source: ns,
        n_target: nt,
    })
}

/// H-divergence between two unlabeled feature samples.
pub fn estimate_h_divergence(source: &[Vec<f64>], target: &[Vec<f64>], cfg: &TrainerConfig) -> Result<HEstimate> {
    let d = source.first().or(target.first()).map_or(0, Vec::len);
    if source.iter().chain(target).any(|v| v.len() != d) {
        return Err(Error::InvalidConfig("feature vectors must share one dimension".into()));
    }
    estimate_seeded(
        source.iter().map(Vec::as_slice).collect(),
        target.iter().map(Vec::as_slice).collect(),
        cfg,
        cfg.seed,
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedClass {
    pub subset: Subset,
    pub n_source: usize,
    pub n_target: usize,
    /// Seen in both domains with enough samples to estimate.
    pub estimable: bool,
}

/// Subsets actually present in the data, ordered by size then
/// lexicographically. Empty subsets are ignored.
pub fn enumerate_mixed_classes(set: &DomainFeatureSet, min_per_domain: usize) -> Vec<MixedClass> {
    let mut counts: BTreeMap<(usize, Subset), (usize, usize)> = BTreeMap::new();
    for s in &set.samples {
        if s.subset.is_empty() {
            continue;
        }
        let e = counts.entry((s.subset.len(), s.subset.clone())).or_default();
        match s.domain {
            DomainTag::Source => e.0 += 1,
            DomainTag::Target => e.1 += 1,
        }
    }
    counts
        .into_iter()
        .map(|((_, subset), (n_source, n_target))| MixedClass {
            subset,
            n_source,
            n_target,
            estimable: n_source >= min_per_domain && n_target >= min_per_domain,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetTerm {
    pub subset: Subset,
    pub d_h: f64,
    pub n_source: usize,
    pub n_target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub per_subset: Vec<SubsetTerm>,
    pub unestimable: Vec<MixedClass>,
    pub total: f64,
}

impl DivergenceReport {
    pub fn get(&self, subset: &[usize]) -> Option<f64> {
        self.per_subset.iter().find(|t| t.subset == subset).map(|t| t.d_h)
    }

    /// `subset,d_h,n_source,n_target,status`; subsets are written `1+2`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["subset", "d_h", "n_source", "n_target", "status"])?;
        let name = |s: &Subset| s.iter().map(usize::to_string).collect::<Vec<_>>().join("+");
        for t in &self.per_subset {
            wr.write_record([name(&t.subset), format!("{}", t.d_h), t.n_source.to_string(), t.n_target.to_string(), "ok".into()])?;
        }
        for u in &self.unestimable {
            wr.write_record([name(&u.subset), String::new(), u.n_source.to_string(), u.n_target.to_string(), "unestimable".into()])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn vectors_for<'a>(set: &'a DomainFeatureSet, subset: &[usize]) -> (Vec<&'a [f64]>, Vec<&'a [f64]>) {
    let mut s = Vec::new();
    let mut t = Vec::new();
    for x in set.samples.iter().filter(|x| x.subset == subset) {
        match x.domain {
            DomainTag::Source => s.push(x.vector.as_slice()),
            DomainTag::Target => t.push(x.vector.as_slice()),
        }
    }
    (s, t)
}

/// Mixed-class divergence: one H-divergence per observed subset, summed.
/// Subsets run on separate threads; each has its own seed, so the result
/// does not depend on scheduling.
pub fn estimate_mch(set: &DomainFeatureSet, cfg: &TrainerConfig) -> Result<DivergenceReport> {
    set.validate()?;
    cfg.validate()?;
    let classes = enumerate_mixed_classes(set, cfg.min_per_domain);
    let (estimable, unestimable): (Vec<_>, Vec<_>) = classes.into_iter().partition(|c| c.estimable);
    if estimable.is_empty() {
        return Err(Error::NoEstimableSubset);
    }
    let results: Vec<Result<HEstimate>> = std::thread::scope(|scope| {
        let handles: Vec<_> = estimable
            .iter()
            .map(|mc| {
                scope.spawn(move || {
                    let (s, t) = vectors_for(set, &mc.subset);
                    estimate_seeded(s, t, cfg, subset_seed(cfg.seed, &mc.subset))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("estimator thread panicked")).collect()
    });
    let mut per_subset = Vec::with_capacity(estimable.len());
    for (mc, r) in estimable.iter().zip(results) {
        let est = r?;
        per_subset.push(SubsetTerm {
            subset: mc.subset.clone(),
            d_h: est.d_h,
            n_source: est.n_source,
            n_target: est.n_target,
        });
    }
    let total = per_subset.iter().map(|t| t.d_h).sum();
    Ok(DivergenceReport {
        per_subset,
        unestimable,
        total,
    })
}

/// Class-wise divergence: the mixed-class estimator over single-class
/// samples only.
pub fn estimate_classwise(set: &DomainFeatureSet, cfg: &TrainerConfig) -> Result<DivergenceReport> {
    let singles = DomainFeatureSet {
        samples: set.samples.iter().filter(|s| s.subset.len() == 1).cloned().collect(),
    };
    estimate_mch(&singles, cfg)
}

/// H-divergence over the whole set, ignoring subsets.
pub fn estimate_set(set: &DomainFeatureSet, cfg: &TrainerConfig) -> Result<HEstimate> {
    set.validate()?;
    let (s, t) = set.split();
    estimate_seeded(s, t, cfg, cfg.seed)
}

/// Distinct subsets as a set, for callers that only need membership.
pub fn subsets_of(set: &DomainFeatureSet) -> BTreeSet<Subset> {
    set.samples.iter().filter(|s| !s.subset.is_empty()).map(|s| s.subset.clone()).collect()
}
