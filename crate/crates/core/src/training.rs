//! Losses, ray batching, the optimization loop and held-out evaluation.

use std::io::Write;
use std::path::Path;

use lidarfield_autodiff::{adam_step, AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset_io::Scene;
use crate::error::{io_err, Error, Result};
use crate::lidar_model::{unproject, RangeImage};
use crate::metrics::{self, MetricsReport, Point};
use crate::neural_field::{rotate, sample_distances, LidarField, RayBundle, RenderVars, SampleMode};

/// Data range used to normalize depth images for PSNR and SSIM.
pub const DEPTH_PEAK: f64 = 80.0;
pub const INTENSITY_PEAK: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub depth: f64,
    pub semantic: f64,
    pub intensity: f64,
    pub raydrop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            depth: 1.0,
            semantic: 0.1,
            intensity: 1.0,
            raydrop: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub rays_per_batch: usize,
    pub lr_fields: f64,
    pub lr_mlp: f64,
    pub lr_encoder: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Held-out evaluation every this many iterations; 0 disables it.
    pub eval_every: usize,
    /// Jitter sample distances inside their bins while training.
    pub stratified: bool,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            rays_per_batch: 256,
            lr_fields: 1e-2,
            lr_mlp: 5e-4,
            lr_encoder: 5e-4,
            schedule: Schedule::Constant,
            seed: 0,
            eval_every: 0,
            stratified: true,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_batch == 0 {
            return Err(Error::Config("train.rays_per_batch must be positive".into()));
        }
        for (k, v) in [("lr_fields", self.lr_fields), ("lr_mlp", self.lr_mlp), ("lr_encoder", self.lr_encoder)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{k} must be a non-negative number")));
            }
        }
        let w = &self.weights;
        for (k, v) in [("depth", w.depth), ("semantic", w.semantic), ("intensity", w.intensity), ("raydrop", w.raydrop)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.weights.{k} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Per-group optimizer settings at `iteration` of `total`.
    pub fn adam_configs(&self, iteration: usize, total: usize) -> [AdamConfig; 3] {
        let f = match self.schedule {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * iteration as f64 / total.max(1) as f64).cos()),
        };
        [self.lr_fields, self.lr_mlp, self.lr_encoder].map(|lr| AdamConfig::with_lr(lr * f))
    }
}

/// Rays with their ground truth and sample distances.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rays: RayBundle,
    /// `rays.len() * samples` distances, ray-major.
    pub dists: Vec<f64>,
    pub samples: usize,
    pub depth: Vec<f32>,
    pub intensity: Vec<f32>,
    pub label: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Appends the ray through pixel `(row, col)` of frame `f`.
    pub fn push_pixel(&mut self, scene: &Scene, f: usize, row: usize, col: usize) {
        let frame = &scene.frames[f];
        let pose = &frame.scan.pose;
        let d = rotate(pose, scene.intrinsics.pixel_direction(row, col));
        self.rays.push(frame.origin(), d, frame.scan.timestamp, (row, col), f);
        let img = &frame.image;
        let i = img.index(row, col);
        self.depth.push(img.depth[i]);
        self.intensity.push(img.intensity[i]);
        self.label.push(img.label[i]);
        self.mask.push(img.mask[i]);
    }

    fn empty(samples: usize) -> Self {
        Self {
            rays: RayBundle::default(),
            dists: Vec::new(),
            samples,
            depth: Vec::new(),
            intensity: Vec::new(),
            label: Vec::new(),
            mask: Vec::new(),
        }
    }
}

/// Uniform draw of (training frame, pixel) pairs, deterministic in
/// `(seed, iteration)`. Rays come out grouped by frame so the local encoder
/// runs once per frame.
pub fn make_batch(scene: &Scene, model: &LidarField, rays: usize, seed: u64, iteration: u64, stratified: bool) -> Result<Batch> {
    if scene.train.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let intr = &scene.intrinsics;
    let mut picks: Vec<(usize, usize, usize)> = (0..rays)
        .map(|_| {
            let f = scene.train[rng.gen_range(0..scene.train.len())];
            (f, rng.gen_range(0..intr.height), rng.gen_range(0..intr.width))
        })
        .collect();
    picks.sort_by_key(|p| p.0);
    let rc = &model.config().render;
    let mut batch = Batch::empty(rc.samples);
    let mode = if stratified { SampleMode::Stratified } else { SampleMode::Uniform };
    for (f, r, c) in picks {
        batch.push_pixel(scene, f, r, c);
        batch.dists.extend(sample_distances(rc.near, rc.far, rc.samples, mode, &mut rng)?);
    }
    Ok(batch)
}

/// Component values; `[depth, semantic, intensity, raydrop]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub depth: f64,
    pub semantic: f64,
    pub intensity: f64,
    pub raydrop: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 4] = ["depth", "semantic", "intensity", "raydrop"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.depth, self.semantic, self.intensity, self.raydrop]
    }
}

pub struct Losses<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub components: LossComponents,
}

fn column<'g, T: Scalar>(g: &'g Graph<T>, v: impl Iterator<Item = f64>) -> Result<Var<'g, T>> {
    let data: Vec<T> = v.map(T::lit).collect();
    let n = data.len();
    Ok(g.constant(Tensor::new(vec![n, 1], data)?))
}

/// Weighted loss over a rendered batch. Depth, intensity and semantics are
/// supervised on returned rays only (semantics also skipping `ignore`);
/// ray drop on every ray. Each term is a mean over its rays and is zero when
/// it has none.
pub fn compute_losses<'g, T: Scalar>(
    g: &'g Graph<T>,
    rv: &RenderVars<'g, T>,
    batch: &Batch,
    weights: &LossWeights,
    ignore: u32,
) -> Result<Losses<'g, T>> {
    let r = batch.len();
    if rv.depth.shape() != [r, 1] || batch.mask.len() != r || batch.depth.len() != r || batch.label.len() != r || batch.intensity.len() != r {
        return Err(Error::MisalignedBatch(format!("{r} rays against render of shape {:?}", rv.depth.shape())));
    }
    let valid: Vec<usize> = (0..r).filter(|&i| batch.mask[i]).collect();
    let labeled: Vec<usize> = valid.iter().copied().filter(|&i| batch.label[i] != ignore).collect();
    let mut terms: Vec<(f64, Var<'g, T>)> = Vec::new();
    let value = |v: &Var<'g, T>| v.item().to_f64().unwrap_or(f64::NAN);
    let mut c = LossComponents::default();

    if !valid.is_empty() {
        let gt = column(g, valid.iter().map(|&i| batch.depth[i] as f64))?;
        let l = rv.depth.select_rows(&valid)?.sub(gt)?.abs().mean();
        c.depth = value(&l);
        terms.push((weights.depth, l));

        let gt = column(g, valid.iter().map(|&i| batch.intensity[i] as f64))?;
        let l = rv.intensity.select_rows(&valid)?.sub(gt)?.square().mean();
        c.intensity = value(&l);
        terms.push((weights.intensity, l));
    }
    if !labeled.is_empty() {
        let cls: Vec<usize> = labeled.iter().map(|&i| batch.label[i] as usize).collect();
        let l = rv.logits.select_rows(&labeled)?.log_softmax().pick_cols(&cls)?.mean().neg();
        c.semantic = value(&l);
        terms.push((weights.semantic, l));
    }
    let target = column(g, batch.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }))?;
    let l = rv.raydrop.sub(target)?.square().mean();
    c.raydrop = value(&l);
    terms.push((weights.raydrop, l));

    let mut total: Option<Var<'g, T>> = None;
    for (w, t) in terms {
        if w == 0.0 {
            continue;
        }
        let s = t.scale(T::lit(w));
        total = Some(match total {
            Some(acc) => acc.add(s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(Losses { total, components: c })
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub components: LossComponents,
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "iteration,total,depth,semantic,intensity,raydrop")?;
        for r in trace {
            let c = r.components;
            writeln!(f, "{},{},{},{},{},{}", r.iteration, r.total, c.depth, c.semantic, c.intensity, c.raydrop)?;
        }
        f.flush()
    };
    write().map_err(io_err(path))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub trace: Vec<LossRecord>,
    /// `(iteration, held-out aggregate)` every `eval_every` iterations.
    pub snapshots: Vec<(usize, MetricsReport)>,
}

/// Runs `cfg.iterations` optimization steps numbered from `start` (non-zero
/// when resuming, so batches continue the same random streams).
pub fn fit(scene: &Scene, model: &LidarField, store: &mut ParamStore<f32>, cfg: &TrainConfig, start: usize) -> Result<TrainOutcome> {
    fit_with(scene, model, store, cfg, start, |_| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with(
    scene: &Scene,
    model: &LidarField,
    store: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    start: usize,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let images = scene.images();
    let end = start + cfg.iterations;
    let mut out = TrainOutcome::default();
    for it in start..end {
        let batch = make_batch(scene, model, cfg.rays_per_batch, cfg.seed, it as u64, cfg.stratified)?;
        let g = Graph::<f32>::new();
        let local = model.local_features(&g, store, &batch.rays, &images)?;
        let rv = model.render(&g, store, &batch.rays, &batch.dists, batch.samples, local)?;
        let losses = compute_losses(&g, &rv, &batch, &cfg.weights, scene.ignore)?;
        let total = losses.total.item() as f64;
        let comps = losses.components.as_array();
        let max_grad = || store.max_abs_grad().0;
        if let Some(k) = (0..4).find(|&k| !comps[k].is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                component: LossComponents::NAMES[k].into(),
                max_grad: max_grad(),
                param: String::new(),
            });
        }
        g.backward(losses.total)?;
        g.accumulate_param_grads(store);
        let (mg, pid) = store.max_abs_grad();
        if !mg.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                component: "gradient".into(),
                max_grad: mg,
                param: pid.map(|p| store.param(p).name().to_string()).unwrap_or_default(),
            });
        }
        adam_step(store, &cfg.adam_configs(it, end))?;
        let rec = LossRecord {
            iteration: it,
            total,
            components: losses.components,
        };
        on_step(&rec);
        out.trace.push(rec);
        if cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 {
            out.snapshots.push((it + 1, evaluate(scene, model, store, true)?.aggregate));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FrameEval {
    pub frame: usize,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub frames: Vec<FrameEval>,
    pub aggregate: MetricsReport,
}

fn points_of(img: &RangeImage, scene: &Scene) -> Vec<Point> {
    unproject(img, &scene.intrinsics).into_iter().map(|p| p.xyz).collect()
}

/// Metrics of a predicted frame against ground truth.
///
/// RMSE/MedAE and segmentation use the raw per-pixel predictions on pixels
/// with a true return, so geometry and semantics are scored apart from ray
/// drop. PSNR, SSIM and the point-cloud metrics use the masked render.
pub fn frame_metrics(
    scene: &Scene,
    predicted: &RangeImage,
    raw_depth: &[f32],
    raw_intensity: &[f32],
    raw_labels: &[u32],
    drop_prob: &[f32],
    gt: &RangeImage,
    threshold: f64,
) -> Result<MetricsReport> {
    let (h, w) = (gt.height, gt.width);
    let mut r = MetricsReport::default();
    let pred_pts = points_of(predicted, scene);
    let gt_pts = points_of(gt, scene);
    match (metrics::chamfer(&pred_pts, &gt_pts), metrics::f_score(&pred_pts, &gt_pts, metrics::DEFAULT_FSCORE_THRESHOLD)) {
        (Ok(cd), Ok(f)) => {
            r.insert("cd", cd.mean);
            r.insert("cd_sum", cd.sum);
            r.insert("fscore", f);
        }
        _ => {
            r.insert("cd", f64::NAN);
            r.insert("cd_sum", f64::NAN);
            r.insert("fscore", 0.0);
        }
    }
    for (name, raw, full, gt_v, peak) in [
        ("depth", raw_depth, &predicted.depth, &gt.depth, DEPTH_PEAK),
        ("intensity", raw_intensity, &predicted.intensity, &gt.intensity, INTENSITY_PEAK),
    ] {
        let masked = metrics::image_metrics(raw, gt_v, &gt.mask, h, w, peak)?;
        let whole = metrics::image_metrics(full, gt_v, &gt.mask, h, w, peak)?;
        r.insert(format!("{name}_rmse"), masked.rmse);
        r.insert(format!("{name}_medae"), masked.medae);
        r.insert(format!("{name}_psnr"), whole.psnr);
        r.insert(format!("{name}_ssim"), whole.ssim);
    }
    let rd = metrics::raydrop_metrics(drop_prob, &gt.mask, threshold)?;
    r.insert("raydrop_rmse", rd.rmse);
    r.insert("raydrop_acc", rd.accuracy);
    r.insert("raydrop_f1", rd.f1);
    let idx: Vec<usize> = (0..h * w).filter(|&i| gt.mask[i]).collect();
    let p: Vec<u32> = idx.iter().map(|&i| raw_labels[i]).collect();
    let g: Vec<u32> = idx.iter().map(|&i| gt.label[i]).collect();
    let seg = metrics::segmentation_metrics(&p, &g, scene.num_classes, scene.ignore)?;
    r.insert("pa", seg.pixel_accuracy);
    r.insert("miou", seg.mean_iou);
    Ok(r)
}

/// Renders held-out frame `f` at its pose and time and scores it. Local
/// features come from the training frame nearest in time, never from the
/// held-out scan itself.
pub fn evaluate_frame(scene: &Scene, model: &LidarField, store: &ParamStore<f32>, f: usize, mask_raydrop: bool) -> Result<FrameEval> {
    let frame = scene.frames.get(f).ok_or_else(|| Error::OutOfBounds {
        what: "frame index",
        detail: format!("{f} of {}", scene.frames.len()),
    })?;
    let t = frame.scan.timestamp;
    let local = match model.encoder() {
        Some(_) => {
            let src = scene.nearest_train_frame(t).ok_or(Error::EmptyScene)?;
            model.dense_local_map(store, &scene.frames[src].image)?
        }
        None => None,
    };
    let out = model.render_image(store, &frame.scan.pose, t, local.as_ref(), mask_raydrop)?;
    let labels: Vec<u32> = (0..out.raw.depth.len()).map(|i| out.raw.class_of(i) as u32).collect();
    let report = frame_metrics(
        scene,
        &out.image,
        &out.raw.depth,
        &out.raw.intensity,
        &labels,
        &out.raw.raydrop,
        &frame.image,
        model.config().render.raydrop_threshold,
    )?;
    Ok(FrameEval { frame: f, report })
}

/// Scores the ground truth of frame `f` against itself; every metric is at
/// its best value. Useful as a check on the evaluation path.
pub fn ground_truth_frame(scene: &Scene, f: usize, raydrop_threshold: f64) -> Result<FrameEval> {
    let gt = &scene.frames.get(f).ok_or_else(|| Error::OutOfBounds {
        what: "frame index",
        detail: format!("{f} of {}", scene.frames.len()),
    })?.image;
    let drop: Vec<f32> = gt.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let report = frame_metrics(scene, gt, &gt.depth, &gt.intensity, &gt.label, &drop, gt, raydrop_threshold)?;
    Ok(FrameEval { frame: f, report })
}

/// Aggregates per-frame results in the given order.
pub fn aggregate(frames: Vec<FrameEval>) -> Evaluation {
    let reports: Vec<MetricsReport> = frames.iter().map(|f| f.report.clone()).collect();
    Evaluation {
        aggregate: MetricsReport::average(&reports),
        frames,
    }
}

/// [`evaluate_frame`] over every held-out frame.
pub fn evaluate(scene: &Scene, model: &LidarField, store: &ParamStore<f32>, mask_raydrop: bool) -> Result<Evaluation> {
    let frames = scene.test.iter().map(|&f| evaluate_frame(scene, model, store, f, mask_raydrop)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate(frames))
}
