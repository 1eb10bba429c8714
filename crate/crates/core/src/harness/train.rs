//! Adversarial training and evaluation on two-domain scenes.

use std::path::Path;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, Toggles};
use super::metrics::MetricsRecord;
use crate::autodiff::{Tape, Tensor, Var};
use crate::detect::{average_precision, build_targets, loss_det, roc_auc};
use crate::divergence::estimate_h_divergence;
use crate::error::{Error, Result};
use crate::labels::{label_scene, SemanticLabelMaps};
use crate::losses::{
    attention_weight_local, attention_weight_mid, effective_pool, loss_consistency, loss_da_global, loss_da_pixel,
    loss_da_pixel_attended, loss_spm_global, loss_spm_local, loss_spm_mid, total_loss, DomainTag, LossTerms,
};
use crate::net::{BackboneTaps, Scfam, SpmOutputs};
use crate::params::{Bound, ParamStore, Sgd, SgdConfig};
use crate::scene::{AnnotatedScene, Image};
use crate::synth::{generate_dataset, read_dataset};

/// Target-domain training images with their annotations removed, so the
/// training loop cannot read them.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledImages(Vec<Image>);

impl UnlabeledImages {
    pub fn strip(scenes: &[AnnotatedScene]) -> Self {
        Self(scenes.iter().map(|s| s.image.clone()).collect())
    }

    pub fn images(&self) -> &[Image] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<AnnotatedScene>,
    pub target: UnlabeledImages,
}

#[derive(Clone, Debug)]
pub struct EvalData {
    pub source_val: UnlabeledImages,
    pub target_val: Vec<AnnotatedScene>,
}

/// Loads the dataset directory named in the config, or generates the
/// synthetic dataset in memory.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(TrainData, EvalData)> {
    let ds = match &cfg.data.dir {
        Some(dir) => read_dataset(dir)?,
        None => generate_dataset(&cfg.data.synth)?,
    };
    Ok((
        TrainData {
            source: ds.source_train,
            target: UnlabeledImages::strip(&ds.target_train),
        },
        EvalData {
            source_val: UnlabeledImages::strip(&ds.source_val),
            target_val: ds.target_val,
        },
    ))
}

/// Whether parameter `name` belongs to a component switched on by `t`.
pub fn is_active(name: &str, t: &Toggles) -> bool {
    if name.starts_with("spm.") {
        t.spm
    } else if name.starts_with("disc.local.") || name.starts_with("disc.global.") {
        t.base_da
    } else if name.starts_with("disc.mid.") {
        t.mda
    } else {
        true
    }
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Where to write `diverged.json` if the loss stops being finite.
    pub snapshot_dir: Option<&'a Path>,
    /// Called after every iteration with `(done, total)`.
    pub progress: Option<&'a (dyn Fn(usize, usize) + Sync)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<MetricsRecord>,
    /// `(iteration, wall-clock seconds since start)` at each record.
    pub timing: Vec<(usize, f64)>,
}

/// Outcome of [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    /// Per-cell objectness average precision on target validation scenes.
    pub score: f64,
    /// ROC AUC of the same per-cell objectness scores.
    pub objectness_auc: Option<f64>,
    /// Accuracy of the thresholded image-level class predictions on target
    /// validation scenes (SPM runs).
    pub spm_accuracy: Option<f64>,
    /// Proxy H-divergence between source and target F2 features.
    pub dh_f2: f64,
}

impl Evaluation {
    pub fn record(&self, iter: usize) -> MetricsRecord {
        MetricsRecord {
            iter,
            dh_f2: Some(self.dh_f2),
            score: Some(self.score),
            ..Default::default()
        }
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    model: Scfam,
    image_size: (usize, usize),
    pool: (usize, usize),
    det_grid: (usize, usize),
}

struct DomainPass {
    taps: BackboneTaps,
    spm: Option<SpmOutputs>,
    local: Option<Var>,
    mid: Option<Var>,
    global: Option<Var>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig, image_size: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let model = Scfam::new(cfg.net_config())?;
        let stack = cfg.backbone.stack()?;
        let taps = cfg.backbone.taps;
        let mid_grid = stack.grid_size(taps.f2, image_size)?;
        let det_grid = stack.grid_size(taps.f3, image_size)?;
        let pool = effective_pool((cfg.consistency.pool[0], cfg.consistency.pool[1]), mid_grid);
        Ok(Self {
            cfg,
            model,
            image_size,
            pool,
            det_grid,
        })
    }

    fn eps(&self) -> f64 {
        self.cfg.loss.eps_clamp
    }

    fn images(&self, tape: &mut Tape, imgs: &[&Image]) -> Result<Var> {
        for img in imgs {
            if (img.height, img.width) != self.image_size {
                return Err(Error::shape("images", &[self.image_size.0, self.image_size.1], &[img.height, img.width]));
            }
        }
        self.model.images_to_tape(tape, imgs)
    }

    /// Backbone, SPM (when needed) and the domain losses for one batch.
    fn domain_pass(&self, tape: &mut Tape, p: &Bound, x: Var, d: DomainTag, spm_needed: bool) -> Result<DomainPass> {
        let t = self.cfg.toggles;
        let eps = self.eps();
        let taps = self.model.forward_backbone(tape, p, x)?;
        let spm = if spm_needed {
            Some(self.model.forward_spm(tape, p, &taps)?)
        } else {
            None
        };
        let need = |o: Option<SpmOutputs>| o.ok_or_else(|| Error::InvalidConfig("semantic heads required".into()));
        let mut local = None;
        let mut mid = None;
        let mut global = None;
        if t.base_da {
            let input = if t.sbc {
                Scfam::semantic_bridge(tape, taps.f1, need(spm)?.local_feat)?
            } else {
                taps.f1
            };
            let dl = self.model.forward_disc_local(tape, p, input)?;
            local = Some(if t.asm {
                let pl = tape.detach(need(spm)?.local);
                let w = attention_weight_local(tape, pl)?;
                loss_da_pixel_attended(tape, dl, d, w, eps)?
            } else {
                loss_da_pixel(tape, dl, d, eps)?
            });
            let dg = self.model.forward_disc_global(tape, p, taps.f3)?;
            global = Some(loss_da_global(tape, dg, d, self.cfg.loss.gamma, eps)?);
        }
        if t.mda {
            let input = if t.sbc {
                Scfam::semantic_bridge(tape, taps.f2, need(spm)?.mid_feat)?
            } else {
                taps.f2
            };
            let dm = self.model.forward_disc_mid(tape, p, input)?;
            mid = Some(if t.asm {
                let pm = tape.detach(need(spm)?.mid);
                let w = attention_weight_mid(tape, pm)?;
                loss_da_pixel_attended(tape, dm, d, w, eps)?
            } else {
                loss_da_pixel(tape, dm, d, eps)?
            });
        }
        Ok(DomainPass {
            taps,
            spm,
            local,
            mid,
            global,
        })
    }

    fn label_tensors(&self, labels: &[&SemanticLabelMaps]) -> Result<(Tensor, Tensor, Tensor)> {
        let n = labels.len();
        let k = self.cfg.num_classes();
        let l0 = &labels[0];
        let (h1, w1) = (l0.local.rows, l0.local.cols);
        let (h2, w2) = (l0.mid.rows, l0.mid.cols);
        let to_f = |v: &[u8]| v.iter().map(|&b| b as f64).collect::<Vec<_>>();
        let local = Tensor::new(&[n, 1, h1, w1], labels.iter().flat_map(|l| to_f(&l.local.data)).collect())?;
        let mid = Tensor::new(&[n, k, h2, w2], labels.iter().flat_map(|l| to_f(&l.mid.data)).collect())?;
        let global = Tensor::new(&[n, k], labels.iter().flat_map(|l| to_f(&l.global_vec)).collect())?;
        Ok((local, mid, global))
    }

    /// One forward pass over a source and a target batch; returns the total
    /// loss and its components (domain terms summed over both batches).
    fn step_graph(
        &self,
        tape: &mut Tape,
        p: &Bound,
        src: &[&AnnotatedScene],
        src_labels: &[&SemanticLabelMaps],
        tgt: &[&Image],
    ) -> Result<(Var, LossTerms<Var>)> {
        let t = self.cfg.toggles;
        let eps = self.eps();
        let k = self.cfg.num_classes();

        let xs = self.images(tape, &src.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let s = self.domain_pass(tape, p, xs, DomainTag::Source, t.spm)?;
        let det = self.model.forward_det_head(tape, p, s.taps.f3)?;
        let boxes: Vec<&[_]> = src.iter().map(|s| s.boxes.as_slice()).collect();
        let targets = build_targets(&boxes, self.image_size, self.det_grid, k)?;
        let mut terms = LossTerms {
            det: Some(loss_det(tape, &det, &targets, eps)?),
            ..Default::default()
        };
        if let Some(spm) = s.spm {
            let (yl, ym, yg) = self.label_tensors(src_labels)?;
            let (yl, ym, yg) = (tape.constant(yl), tape.constant(ym), tape.constant(yg));
            terms.s_local = Some(loss_spm_local(tape, spm.local, yl, eps)?);
            terms.s_mid = Some(loss_spm_mid(tape, spm.mid, ym, eps)?);
            terms.s_global = Some(loss_spm_global(tape, spm.global, yg, eps)?);
            if t.scr {
                terms.cr = Some(loss_consistency(tape, spm.mid, spm.global, self.pool, eps)?);
            }
        }

        if t.any_da() {
            let xt = self.images(tape, tgt)?;
            let tp = self.domain_pass(tape, p, xt, DomainTag::Target, t.spm && (t.sbc || t.asm))?;
            let mut both = |a: Option<Var>, b: Option<Var>| -> Result<Option<Var>> {
                Ok(match (a, b) {
                    (Some(a), Some(b)) => Some(tape.add(a, b)?),
                    _ => None,
                })
            };
            terms.local = both(s.local, tp.local)?;
            terms.mid = both(s.mid, tp.mid)?;
            terms.global = both(s.global, tp.global)?;
        }
        let total = total_loss(tape, &terms, &self.cfg.loss)?;
        Ok((total, terms))
    }

    /// F2 feature vectors at fixed sampled positions.
    fn probe_features(&self, params: &ParamStore, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let pc = &self.cfg.probe;
        let imgs: Vec<&Image> = images.iter().take(pc.images_per_domain).collect();
        let mut out = Vec::new();
        for (chunk_idx, chunk) in imgs.chunks(16).enumerate() {
            let mut tape = Tape::new();
            let p = Bound::all(&mut tape, params);
            let x = self.images(&mut tape, chunk)?;
            let taps = self.model.forward_backbone(&mut tape, &p, x)?;
            let f2 = tape.value(taps.f2);
            let (_, c, h, w) = f2.dims4().expect("4-d tap");
            let plane = h * w;
            for i in 0..chunk.len() {
                let global_idx = chunk_idx * 16 + i;
                let mut rng = ChaCha8Rng::seed_from_u64(pc.seed ^ (global_idx as u64).wrapping_mul(0x9e3779b97f4a7c15));
                let take = pc.positions_per_image.min(plane);
                let mut picks = index::sample(&mut rng, plane, take).into_vec();
                picks.sort_unstable();
                for pos in picks {
                    out.push((0..c).map(|ch| f2.data()[(i * c + ch) * plane + pos]).collect());
                }
            }
        }
        Ok(out)
    }

    fn evaluate(&self, params: &ParamStore, data: &EvalData) -> Result<Evaluation> {
        if data.target_val.is_empty() || data.source_val.is_empty() {
            return Err(Error::EmptyDataset("evaluation scenes".into()));
        }
        let k = self.cfg.num_classes();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut correct = 0usize;
        let mut total = 0usize;
        for chunk in data.target_val.chunks(16) {
            let mut tape = Tape::new();
            let p = Bound::all(&mut tape, params);
            let x = self.images(&mut tape, &chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let taps = self.model.forward_backbone(&mut tape, &p, x)?;
            let det = self.model.forward_det_head(&mut tape, &p, taps.f3)?;
            let boxes: Vec<&[_]> = chunk.iter().map(|s| s.boxes.as_slice()).collect();
            let targets = build_targets(&boxes, self.image_size, self.det_grid, k)?;
            scores.extend_from_slice(tape.value(det.objectness).data());
            labels.extend(targets.objectness.data().iter().map(|&v| v > 0.5));
            if self.cfg.toggles.spm {
                let spm = self.model.forward_spm(&mut tape, &p, &taps)?;
                let g = tape.value(spm.global).data();
                for (i, s) in chunk.iter().enumerate() {
                    let truth = crate::labels::label_global(&s.boxes, k);
                    for c in 0..k {
                        correct += ((g[i * k + c] >= 0.5) == (truth[c] == 1)) as usize;
                        total += 1;
                    }
                }
            }
        }
        let score = average_precision(&scores, &labels).unwrap_or(0.0);
        let fs = self.probe_features(params, data.source_val.images())?;
        let ft = self.probe_features(params, &data.target_val.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let dh = estimate_h_divergence(&fs, &ft, &self.cfg.probe.trainer)?;
        Ok(Evaluation {
            score,
            objectness_auc: roc_auc(&scores, &labels),
            spm_accuracy: (total > 0).then(|| correct as f64 / total as f64),
            dh_f2: dh.d_h,
        })
    }
}

/// Scores weights on the evaluation scenes.
pub fn evaluate(params: &ParamStore, data: &EvalData, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let first = data
        .target_val
        .first()
        .ok_or_else(|| Error::EmptyDataset("target validation scenes".into()))?;
    Runner::new(cfg, first.size())?.evaluate(params, data)
}

#[derive(Default)]
struct Accum {
    sums: [f64; 8],
    all: f64,
    n: usize,
}

fn slots<T: Copy>(t: &LossTerms<T>) -> [Option<T>; 8] {
    [t.det, t.s_local, t.s_mid, t.s_global, t.local, t.mid, t.global, t.cr]
}

impl Accum {
    fn add(&mut self, terms: &LossTerms<f64>, all: f64) {
        for (s, v) in self.sums.iter_mut().zip(slots(terms)) {
            *s += v.unwrap_or(0.0);
        }
        self.all += all;
        self.n += 1;
    }

    fn take(&mut self, template: &LossTerms<f64>) -> (LossTerms<f64>, f64) {
        let n = self.n.max(1) as f64;
        let m: Vec<Option<f64>> = slots(template)
            .iter()
            .zip(self.sums)
            .map(|(present, s)| present.map(|_| s / n))
            .collect();
        let out = LossTerms {
            det: m[0],
            s_local: m[1],
            s_mid: m[2],
            s_global: m[3],
            local: m[4],
            mid: m[5],
            global: m[6],
            cr: m[7],
        };
        let all = self.all / n;
        *self = Self::default();
        (out, all)
    }
}

#[derive(Serialize)]
struct DivergenceSnapshot<'a> {
    iteration: usize,
    learning_rate: f64,
    components: LossTerms<f64>,
    total: f64,
    param_max_abs: Vec<(&'a str, f64)>,
}

/// Runs the configured schedule. Each iteration draws one source and one
/// target batch, sums their losses and takes one SGD step on the parameters
/// of the active components.
pub fn train_with(cfg: &ExperimentConfig, data: &TrainData, eval: &EvalData, hooks: &TrainHooks) -> Result<TrainOutcome> {
    let first = data.source.first().ok_or_else(|| Error::EmptyDataset("source training scenes".into()))?;
    let runner = Runner::new(cfg, first.size())?;
    let mut params = runner.model.init_params(cfg.seed);
    let total_iters = cfg.optimizer.total_iterations();
    if total_iters == 0 {
        return Ok(TrainOutcome {
            params,
            history: Vec::new(),
            timing: Vec::new(),
        });
    }
    if cfg.toggles.any_da() && data.target.is_empty() {
        return Err(Error::EmptyDataset("target training images".into()));
    }

    let stack = cfg.backbone.stack()?;
    let lcfg = cfg.labeling_config()?;
    let labels: Vec<SemanticLabelMaps> = data
        .source
        .iter()
        .map(|s| label_scene(&s.boxes, s.size(), &stack, &cfg.backbone.taps, &lcfg))
        .collect::<Result<_>>()?;

    let start = Instant::now();
    let mut history = Vec::new();
    let mut timing = Vec::new();
    let push = |rec: MetricsRecord, history: &mut Vec<MetricsRecord>, timing: &mut Vec<(usize, f64)>| {
        let secs = start.elapsed().as_secs_f64();
        timing.push((rec.iter, secs));
        history.push(MetricsRecord {
            seconds: cfg.train.record_wall_clock.then_some(secs),
            ..rec
        });
    };
    push(runner.evaluate(&params, eval)?.record(0), &mut history, &mut timing);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5bd1e995);
    let mut src_order: Vec<usize> = Vec::new();
    let mut tgt_order: Vec<usize> = Vec::new();
    let draw = |order: &mut Vec<usize>, n: usize, k: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..k)
            .map(|_| {
                if order.is_empty() {
                    *order = (0..n).collect();
                    order.shuffle(rng);
                }
                order.pop().expect("refilled")
            })
            .collect()
    };

    let mut opt = Sgd::new(SgdConfig {
        momentum: cfg.optimizer.momentum,
        weight_decay: cfg.optimizer.weight_decay,
        clip_norm: (cfg.optimizer.clip_grad_norm > 0.0).then_some(cfg.optimizer.clip_grad_norm),
    });
    let mut acc = Accum::default();
    for it in 0..total_iters {
        let si = draw(&mut src_order, data.source.len(), cfg.train.batch_source, &mut order_rng);
        let ti = if cfg.toggles.any_da() {
            draw(&mut tgt_order, data.target.len(), cfg.train.batch_target, &mut order_rng)
        } else {
            Vec::new()
        };
        let src: Vec<&AnnotatedScene> = si.iter().map(|&i| &data.source[i]).collect();
        let src_labels: Vec<&SemanticLabelMaps> = si.iter().map(|&i| &labels[i]).collect();
        let tgt: Vec<&Image> = ti.iter().map(|&i| &data.target.images()[i]).collect();

        let mut tape = Tape::new();
        let p = Bound::all(&mut tape, &params);
        let (total, terms) = runner.step_graph(&mut tape, &p, &src, &src_labels, &tgt)?;
        let vals = LossTerms {
            det: terms.det.map(|v| tape.value(v).item()),
            local: terms.local.map(|v| tape.value(v).item()),
            mid: terms.mid.map(|v| tape.value(v).item()),
            global: terms.global.map(|v| tape.value(v).item()),
            s_local: terms.s_local.map(|v| tape.value(v).item()),
            s_mid: terms.s_mid.map(|v| tape.value(v).item()),
            s_global: terms.s_global.map(|v| tape.value(v).item()),
            cr: terms.cr.map(|v| tape.value(v).item()),
        };
        let total_v = tape.value(total).item();
        let lr = cfg.optimizer.learning_rate_at(it);
        if !total_v.is_finite() {
            let snap = DivergenceSnapshot {
                iteration: it,
                learning_rate: lr,
                components: vals,
                total: total_v,
                param_max_abs: params
                    .iter()
                    .map(|(n, t)| (n, t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))))
                    .collect(),
            };
            let detail = serde_json::to_string(&snap)?;
            if let Some(dir) = hooks.snapshot_dir {
                let path = dir.join("diverged.json");
                std::fs::write(&path, &detail).map_err(|e| Error::io(&path, e))?;
            }
            return Err(Error::Diverged { iteration: it, detail });
        }
        tape.backward(total)?;
        let grads = p.grads(&tape);
        let gnorm = opt.step(&mut params, &grads, lr, |n| is_active(n, &cfg.toggles))?;
        tracing::debug!(iter = it, gnorm, total = total_v, "step");
        acc.add(&vals, total_v);

        let done = it + 1;
        if let Some(cb) = hooks.progress {
            cb(done, total_iters);
        }
        if done % cfg.train.log_every == 0 || done == total_iters {
            let (losses, l_all) = acc.take(&vals);
            let ev = runner.evaluate(&params, eval)?;
            push(
                MetricsRecord {
                    iter: done,
                    losses,
                    l_all: Some(l_all),
                    dh_f2: Some(ev.dh_f2),
                    score: Some(ev.score),
                    seconds: None,
                },
                &mut history,
                &mut timing,
            );
            tracing::info!(iter = done, l_all, dh_f2 = ev.dh_f2, score = ev.score, "logged");
        }
    }
    Ok(TrainOutcome { params, history, timing })
}

/// Loads (or generates) the configured data and trains.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (data, eval) = load_data(cfg)?;
    train_with(cfg, &data, &eval, &TrainHooks::default())
}
