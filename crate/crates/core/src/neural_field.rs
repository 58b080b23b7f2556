//! Decoder heads and volume rendering.
//!
//! Samples are laid out ray-major: sample `n` of ray `r` is row `r * N + n`.
//! Per-ray inputs (local features, view embedding) enter the first layer of a
//! head through their own weight block, evaluated once per ray and repeated
//! over the ray's samples; this equals concatenating them to every sample.

use lidarfield_autodiff::{CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_fields::{HashGridConfig, HashGridField, PlanarConfig, PlanarField, SceneBounds};
use crate::lidar_model::{RangeImage, SensorIntrinsics};
use crate::semantic_encoder::{EncoderConfig, SemanticEncoder};

/// Parameter groups, one learning rate each.
pub const GROUP_FIELDS: usize = 0;
pub const GROUP_MLP: usize = 1;
pub const GROUP_ENCODER: usize = 2;

/// Interleaved `sin, cos` per component at frequencies `2^0 .. 2^(L-1)`.
pub fn positional_encode(v: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * 2 * levels);
    for &x in v {
        for l in 0..levels {
            let (s, c) = (x * (1u64 << l) as f64).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Bin midpoints.
    Uniform,
    /// One uniform draw per bin.
    Stratified,
}

/// `n` strictly increasing distances in `[near, far]`, one per equal bin.
pub fn sample_distances(near: f64, far: f64, n: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(near > 0.0 && far > near && far.is_finite()) || n == 0 {
        return Err(Error::BadBounds { near, far });
    }
    let step = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| {
            let u = match mode {
                SampleMode::Uniform => 0.5,
                // Keep draws off the bin edges so distances stay strictly increasing.
                SampleMode::Stratified => rng.gen_range(1e-6..1.0 - 1e-6),
            };
            near + (i as f64 + u) * step
        })
        .collect())
}

/// [`sample_distances`] driven by a fresh generator seeded with `seed`.
pub fn sample_ray(near: f64, far: f64, n: usize, mode: SampleMode, seed: u64) -> Result<Vec<f64>> {
    sample_distances(near, far, n, mode, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Opacity {
    /// `1 - exp(-sigma * delta)`.
    Standard,
    /// `1 - exp(-sigma)`, spacing omitted.
    Printed,
}

/// Spacing to the next sample; the last sample reuses the previous spacing
/// and a single sample gets spacing 1.
pub fn sample_spacing(dists: &[f64]) -> Vec<f64> {
    let n = dists.len();
    (0..n)
        .map(|i| {
            if i + 1 < n {
                dists[i + 1] - dists[i]
            } else if n > 1 {
                dists[n - 1] - dists[n - 2]
            } else {
                1.0
            }
        })
        .collect()
}

/// Per-sample compositing weights `w_n = T_n * alpha_n` with
/// `T_n = exp(-sum_{i<n} sigma_i delta_i)`.
pub fn composite_weights(sigma: &[f64], dists: &[f64], opacity: Opacity) -> Vec<f64> {
    let deltas = sample_spacing(dists);
    let mut acc = 0.0f64;
    sigma
        .iter()
        .zip(&deltas)
        .map(|(&s, &d)| {
            let t = (-acc).exp();
            let od = if opacity == Opacity::Standard { d } else { 1.0 };
            acc += s * d;
            t * (1.0 - (-s * od).exp())
        })
        .collect()
}

struct VolumeWeightsOp<T> {
    samples: usize,
    deltas: Vec<T>,
    opacity_deltas: Vec<T>,
}

impl<T: Scalar> VolumeWeightsOp<T> {
    fn forward(&self, sigma: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); sigma.len()];
        for (r, row) in sigma.chunks(self.samples).enumerate() {
            let base = r * self.samples;
            let mut acc = T::zero();
            for (n, &s) in row.iter().enumerate() {
                let t = (-acc).exp();
                out[base + n] = t * (T::one() - (-s * self.opacity_deltas[base + n]).exp());
                acc = acc + s * self.deltas[base + n];
            }
        }
        out
    }
}

impl<T: Scalar> CustomOp<T> for VolumeWeightsOp<T> {
    fn name(&self) -> &'static str {
        "volume_weights"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let sigma = inputs[0].data();
        let w = output.data();
        let mut grad = vec![T::zero(); sigma.len()];
        for r in 0..sigma.len() / self.samples {
            let base = r * self.samples;
            // d w_n / d sigma_k = -delta_k w_n for n > k, and
            // od_k T_k exp(-sigma_k od_k) for n = k.
            let mut suffix = T::zero();
            let mut acc = T::zero();
            let mut trans = Vec::with_capacity(self.samples);
            for n in 0..self.samples {
                trans.push((-acc).exp());
                acc = acc + sigma[base + n] * self.deltas[base + n];
            }
            for k in (0..self.samples).rev() {
                let i = base + k;
                let od = self.opacity_deltas[i];
                grad[i] = od * trans[k] * (-sigma[i] * od).exp() * grad_out[i] - self.deltas[i] * suffix;
                suffix = suffix + grad_out[i] * w[i];
            }
        }
        vec![Some(grad)]
    }
}

/// Differentiable compositing weights for `sigma` (`R x N`) at distances
/// `dists` (`R * N`, strictly increasing per ray).
pub fn volume_weights<'g, T: Scalar>(sigma: Var<'g, T>, dists: &[f64], opacity: Opacity) -> Result<Var<'g, T>> {
    let shape = sigma.shape();
    let (rows, n) = (sigma.value().rows(), sigma.value().cols());
    if dists.len() != rows * n || shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!("density {shape:?} vs {} distances", dists.len())));
    }
    let mut deltas = Vec::with_capacity(dists.len());
    for (r, d) in dists.chunks(n).enumerate() {
        if d.windows(2).any(|p| !(p[1] > p[0])) {
            return Err(Error::NonMonotoneSamples { ray: r });
        }
        deltas.extend(sample_spacing(d));
    }
    let op = VolumeWeightsOp {
        samples: n,
        opacity_deltas: match opacity {
            Opacity::Standard => deltas.iter().map(|&d| T::lit(d)).collect(),
            Opacity::Printed => vec![T::one(); deltas.len()],
        },
        deltas: deltas.iter().map(|&d| T::lit(d)).collect(),
    };
    let out = op.forward(sigma.value().data());
    Ok(sigma.graph().custom(&[sigma], Tensor::new(shape, out)?, Box::new(op)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Global planar-grid features only; the geometry head also emits class
    /// logits, composited with the depth weights.
    GridOnly,
    /// Adds the separate semantic head and density.
    SemanticField,
    /// Adds the local CNN features.
    Full,
}

impl Variant {
    pub fn uses_encoder(self) -> bool {
        self == Variant::Full
    }

    pub fn has_semantic_head(self) -> bool {
        self != Variant::GridOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub hidden: usize,
    /// Channels of `f_geo`.
    pub geo_features: usize,
    /// Frequency levels of the view embedding.
    pub view_levels: usize,
    /// Initial bias of the density outputs (before softplus).
    pub density_bias: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            geo_features: 16,
            view_levels: 4,
            density_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub opacity: Opacity,
    /// Pixels with predicted drop probability above this are masked.
    pub raydrop_threshold: f64,
    /// Rays per inference chunk when rendering whole images.
    pub chunk_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 0.5,
            far: 80.0,
            samples: 768,
            opacity: Opacity::Standard,
            raydrop_threshold: 0.5,
            chunk_rays: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub planar: PlanarConfig,
    pub grid: HashGridConfig,
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    pub render: RenderConfig,
    /// Per-side growth of the fitted scene box, as a fraction of its extent.
    pub bounds_expansion: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            num_classes: 20,
            planar: PlanarConfig::default(),
            grid: HashGridConfig::default(),
            encoder: EncoderConfig::default(),
            heads: HeadsConfig::default(),
            render: RenderConfig::default(),
            bounds_expansion: 0.05,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.planar.validate()?;
        self.grid.validate()?;
        if self.variant.uses_encoder() {
            self.encoder.validate()?;
        }
        let h = &self.heads;
        if h.hidden == 0 || h.geo_features == 0 || self.num_classes < 2 {
            return Err(Error::Config("heads need positive widths and at least two classes".into()));
        }
        let r = &self.render;
        if !(r.near > 0.0 && r.far > r.near) || r.samples == 0 || r.chunk_rays == 0 {
            return Err(Error::Config(format!("bad render bounds/samples: near {} far {} samples {}", r.near, r.far, r.samples)));
        }
        if !(0.0..=1.0).contains(&r.raydrop_threshold) {
            return Err(Error::Config("raydrop_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Three-layer perceptron whose first layer takes several input blocks.
#[derive(Debug, Clone)]
pub struct Mlp {
    first: Vec<ParamId>,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Input block of an [`Mlp`]: per sample, or per ray repeated over `n` samples.
pub enum MlpInput<'g, T: Scalar> {
    Sample(Var<'g, T>),
    Ray(Var<'g, T>, usize),
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore<f32>,
        name: &str,
        inputs: &[usize],
        hidden: usize,
        out: usize,
        out_bias: &[f32],
        group: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in: usize = inputs.iter().sum();
        let b = (6.0 / fan_in as f64).sqrt();
        let mut first = Vec::with_capacity(inputs.len());
        for (i, &n) in inputs.iter().enumerate() {
            first.push(store.add(format!("{name}.l0.w{i}"), uniform(rng, n, hidden, b), group)?);
        }
        let b0 = store.add(format!("{name}.l0.b"), Tensor::zeros(vec![hidden]), group)?;
        let bh = (6.0 / hidden as f64).sqrt();
        let w1 = store.add(format!("{name}.l1.w"), uniform(rng, hidden, hidden, bh), group)?;
        let b1 = store.add(format!("{name}.l1.b"), Tensor::zeros(vec![hidden]), group)?;
        let bo = (1.0 / hidden as f64).sqrt();
        let w2 = store.add(format!("{name}.l2.w"), uniform(rng, hidden, out, bo), group)?;
        let mut bias = vec![0f32; out];
        bias[..out_bias.len()].copy_from_slice(out_bias);
        let b2 = store.add(format!("{name}.l2.b"), Tensor::new(vec![out], bias)?, group)?;
        Ok(Self { first, b0, w1, b1, w2, b2 })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.first.clone();
        ids.extend([self.b0, self.w1, self.b1, self.w2, self.b2]);
        ids
    }

    /// Id of the output-layer weight matrix.
    pub fn output_weight(&self) -> ParamId {
        self.w2
    }

    pub fn output_bias(&self) -> ParamId {
        self.b2
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, inputs: &[MlpInput<'g, T>]) -> Result<Var<'g, T>> {
        if inputs.len() != self.first.len() {
            return Err(Error::ShapeMismatch(format!("mlp expects {} input blocks, got {}", self.first.len(), inputs.len())));
        }
        let mut acc: Option<Var<'g, T>> = None;
        for (inp, &w) in inputs.iter().zip(&self.first) {
            let term = match *inp {
                MlpInput::Sample(x) => x.matmul(g.param(store, w))?,
                MlpInput::Ray(x, n) => x.matmul(g.param(store, w))?.repeat_rows(n),
            };
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        let h = acc.expect("at least one block").add_row(g.param(store, self.b0))?.relu();
        let h = h.matmul(g.param(store, self.w1))?.add_row(g.param(store, self.b1))?.relu();
        Ok(h.matmul(g.param(store, self.w2))?.add_row(g.param(store, self.b2))?)
    }
}

/// Rays to render. `local_frame[r]` names the frame whose range image feeds
/// the local encoder for ray `r`.
#[derive(Debug, Clone, Default)]
pub struct RayBundle {
    pub origins: Vec<[f64; 3]>,
    pub dirs: Vec<[f64; 3]>,
    pub times: Vec<f64>,
    pub pixels: Vec<(usize, usize)>,
    pub local_frame: Vec<usize>,
}

impl RayBundle {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn push(&mut self, origin: [f64; 3], dir: [f64; 3], time: f64, pixel: (usize, usize), local_frame: usize) {
        self.origins.push(origin);
        self.dirs.push(dir);
        self.times.push(time);
        self.pixels.push(pixel);
        self.local_frame.push(local_frame);
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> RayBundle {
        RayBundle {
            origins: self.origins[range.clone()].to_vec(),
            dirs: self.dirs[range.clone()].to_vec(),
            times: self.times[range.clone()].to_vec(),
            pixels: self.pixels[range.clone()].to_vec(),
            local_frame: self.local_frame[range].to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.origins.len();
        if [self.dirs.len(), self.times.len(), self.pixels.len(), self.local_frame.len()] != [n; 4] {
            return Err(Error::MisalignedBatch("ray bundle fields differ in length".into()));
        }
        Ok(())
    }
}

/// Per-sample head outputs; `S` rows each.
pub struct HeadOutputs<'g, T: Scalar> {
    pub sigma_geo: Var<'g, T>,
    pub f_geo: Var<'g, T>,
    /// Absent for [`Variant::GridOnly`].
    pub sigma_sem: Option<Var<'g, T>>,
    pub logits: Var<'g, T>,
    pub intensity: Var<'g, T>,
    pub raydrop: Var<'g, T>,
}

/// Per-ray rendered quantities (`R x 1` except `logits`, `R x K`).
pub struct RenderVars<'g, T: Scalar> {
    pub depth: Var<'g, T>,
    pub intensity: Var<'g, T>,
    pub raydrop: Var<'g, T>,
    /// Composited, unnormalized class logits.
    pub logits: Var<'g, T>,
    pub weights_geo: Var<'g, T>,
    pub weights_sem: Var<'g, T>,
}

impl<T: Scalar> RenderVars<'_, T> {
    /// Per-ray `sum_n w_d` and `sum_n w_s`.
    pub fn weight_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let sum = |v: &Var<'_, T>| -> Vec<f64> {
            let t = v.value();
            t.data().chunks(t.cols()).map(|r| r.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum()).collect()
        };
        (sum(&self.weights_geo), sum(&self.weights_sem))
    }
}

/// Plain per-ray render results.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub depth: Vec<f32>,
    pub intensity: Vec<f32>,
    pub raydrop: Vec<f32>,
    /// `R x K` class distribution (softmax of composited logits).
    pub semantics: Vec<f32>,
    pub num_classes: usize,
    pub weight_sum_geo: Vec<f32>,
    pub weight_sum_sem: Vec<f32>,
}

impl RenderOutput {
    pub fn class_of(&self, ray: usize) -> usize {
        let row = &self.semantics[ray * self.num_classes..(ray + 1) * self.num_classes];
        // First maximum, for deterministic ties.
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone)]
pub struct LidarField {
    cfg: ModelConfig,
    intrinsics: SensorIntrinsics,
    bounds: SceneBounds,
    planar: PlanarField,
    grid: HashGridField,
    encoder: Option<SemanticEncoder>,
    geo: Mlp,
    sem: Option<Mlp>,
    intensity: Mlp,
    raydrop: Mlp,
}

impl LidarField {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, intrinsics: SensorIntrinsics, bounds: SceneBounds) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate()?;
        intrinsics.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let planar = PlanarField::register(&mut store, &cfg.planar, "planar", GROUP_FIELDS, &mut rng)?;
        let grid = HashGridField::register(&mut store, &cfg.grid, "grid", GROUP_FIELDS, &mut rng)?;
        let encoder = if cfg.variant.uses_encoder() {
            Some(SemanticEncoder::register(&mut store, &cfg.encoder, "encoder", GROUP_ENCODER, &mut rng)?)
        } else {
            None
        };
        let global = planar.output_dim() + grid.output_dim();
        let mut inputs = vec![global];
        if let Some(e) = &encoder {
            inputs.push(e.out_channels());
        }
        let h = &cfg.heads;
        let k = cfg.num_classes;
        let db = h.density_bias as f32;
        let geo_out = 1 + h.geo_features + if cfg.variant.has_semantic_head() { 0 } else { k };
        let geo = Mlp::register(&mut store, "geo", &inputs, h.hidden, geo_out, &[db], GROUP_MLP, &mut rng)?;
        let sem = if cfg.variant.has_semantic_head() {
            Some(Mlp::register(&mut store, "sem", &inputs, h.hidden, 1 + k, &[db], GROUP_MLP, &mut rng)?)
        } else {
            None
        };
        let view = 6 * h.view_levels;
        let tail = [h.geo_features, view];
        let intensity = Mlp::register(&mut store, "intensity", &tail, h.hidden, 1, &[], GROUP_MLP, &mut rng)?;
        let raydrop = Mlp::register(&mut store, "raydrop", &tail, h.hidden, 1, &[], GROUP_MLP, &mut rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                intrinsics,
                bounds,
                planar,
                grid,
                encoder,
                geo,
                sem,
                intensity,
                raydrop,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn intrinsics(&self) -> &SensorIntrinsics {
        &self.intrinsics
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.bounds
    }

    pub fn planar(&self) -> &PlanarField {
        &self.planar
    }

    pub fn grid(&self) -> &HashGridField {
        &self.grid
    }

    pub fn encoder(&self) -> Option<&SemanticEncoder> {
        self.encoder.as_ref()
    }

    pub fn geometry_head(&self) -> &Mlp {
        &self.geo
    }

    pub fn semantic_head(&self) -> Option<&Mlp> {
        self.sem.as_ref()
    }

    pub fn intensity_head(&self) -> &Mlp {
        &self.intensity
    }

    pub fn raydrop_head(&self) -> &Mlp {
        &self.raydrop
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Local features (`R x C_local`) for rays whose `local_frame` indexes
    /// `images`. Rays sharing a frame should be contiguous; each contiguous
    /// run encodes its frame once.
    pub fn local_features<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        rays: &RayBundle,
        images: &[&RangeImage],
    ) -> Result<Option<Var<'g, T>>> {
        let Some(enc) = &self.encoder else {
            return Ok(None);
        };
        let mut parts = Vec::new();
        let mut start = 0;
        while start < rays.len() {
            let f = rays.local_frame[start];
            let mut end = start;
            while end < rays.len() && rays.local_frame[end] == f {
                end += 1;
            }
            let img = images.get(f).ok_or_else(|| Error::MisalignedBatch(format!("no range image for frame {f}")))?;
            let frame = enc.forward(g, store, &img.depth, img.height, img.width)?;
            let px: Vec<(f64, f64)> = rays.pixels[start..end].iter().map(|&(r, c)| (r as f64 + 0.5, c as f64 + 0.5)).collect();
            parts.push(enc.query(g, store, &frame, &px)?);
            start = end;
        }
        if parts.is_empty() {
            return Ok(None);
        }
        Ok(Some(g.concat_rows(&parts)?))
    }

    /// Dense local feature map of one range image, `(H * W) x C_local`.
    pub fn dense_local_map(&self, store: &ParamStore<f32>, image: &RangeImage) -> Result<Option<Tensor<f32>>> {
        let Some(enc) = &self.encoder else {
            return Ok(None);
        };
        let g = Graph::inference();
        let map = enc.encode(&g, store, &image.depth, image.height, image.width)?;
        let t = map.value().clone();
        Ok(Some(t))
    }

    /// Normalized, clamped 4D sample coordinates for every ray sample.
    pub fn sample_coords(&self, rays: &RayBundle, dists: &[f64], n: usize) -> Vec<[f64; 4]> {
        let mut q = Vec::with_capacity(dists.len());
        for r in 0..rays.len() {
            let (o, d, t) = (rays.origins[r], rays.dirs[r], rays.times[r]);
            for &s in &dists[r * n..(r + 1) * n] {
                let p = [o[0] + s * d[0], o[1] + s * d[1], o[2] + s * d[2]];
                q.push(self.bounds.normalize_clamped(p, t));
            }
        }
        q
    }

    /// Evaluates all heads at normalized points `q`. `view` holds one
    /// embedding row per ray and `local` one feature row per ray; both are
    /// repeated over `per_ray` consecutive samples.
    pub fn query_heads<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        q: &[[f64; 4]],
        view: Var<'g, T>,
        local: Option<Var<'g, T>>,
        per_ray: usize,
    ) -> Result<HeadOutputs<'g, T>> {
        let planar = self.planar.sample(g, store, q)?;
        let grid = self.grid.sample(g, store, q)?;
        let global = g.concat_cols(&[planar, grid])?;
        let mut inputs = vec![MlpInput::Sample(global)];
        match (&self.encoder, local) {
            (Some(_), Some(l)) => inputs.push(MlpInput::Ray(l, per_ray)),
            (Some(_), None) => return Err(Error::MisalignedBatch("model needs local features".into())),
            (None, _) => {}
        }
        let fg = self.cfg.heads.geo_features;
        let k = self.cfg.num_classes;
        let geo = self.geo.forward(g, store, &inputs)?;
        let sigma_geo = geo.slice_cols(0, 1)?.softplus();
        let f_geo = geo.slice_cols(1, fg)?;
        let (sigma_sem, logits) = match &self.sem {
            Some(sem) => {
                let s = sem.forward(g, store, &inputs)?;
                (Some(s.slice_cols(0, 1)?.softplus()), s.slice_cols(1, k)?)
            }
            None => (None, geo.slice_cols(1 + fg, k)?),
        };
        let tail = [MlpInput::Sample(f_geo), MlpInput::Ray(view, per_ray)];
        let intensity = self.intensity.forward(g, store, &tail)?.sigmoid();
        let raydrop = self.raydrop.forward(g, store, &tail)?.sigmoid();
        Ok(HeadOutputs {
            sigma_geo,
            f_geo,
            sigma_sem,
            logits,
            intensity,
            raydrop,
        })
    }

    /// View embeddings of ray directions, `R x 6L`.
    pub fn view_embedding<T: Scalar>(&self, dirs: &[[f64; 3]]) -> Tensor<T> {
        let l = self.cfg.heads.view_levels;
        let data = dirs.iter().flat_map(|d| positional_encode(d, l)).map(T::lit).collect();
        Tensor::new(vec![dirs.len(), 6 * l], data).expect("shape")
    }

    /// Renders `rays` with per-ray sample distances `dists` (`R * n`).
    pub fn render<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        rays: &RayBundle,
        dists: &[f64],
        n: usize,
        local: Option<Var<'g, T>>,
    ) -> Result<RenderVars<'g, T>> {
        rays.validate()?;
        let r = rays.len();
        if r == 0 || dists.len() != r * n {
            return Err(Error::MisalignedBatch(format!("{r} rays with {} distances for {n} samples", dists.len())));
        }
        let q = self.sample_coords(rays, dists, n);
        let view = g.constant(self.view_embedding(&rays.dirs));
        let heads = self.query_heads(g, store, &q, view, local, n)?;
        let opacity = self.cfg.render.opacity;
        let w_geo = volume_weights(heads.sigma_geo.reshape(vec![r, n])?, dists, opacity)?;
        let w_sem = match heads.sigma_sem {
            Some(s) => volume_weights(s.reshape(vec![r, n])?, dists, opacity)?,
            None => w_geo,
        };
        let dist_col = g.constant(Tensor::new(vec![r * n, 1], dists.iter().map(|&d| T::lit(d)).collect())?);
        Ok(RenderVars {
            depth: dist_col.segment_weighted_sum(w_geo)?,
            intensity: heads.intensity.segment_weighted_sum(w_geo)?,
            raydrop: heads.raydrop.segment_weighted_sum(w_geo)?,
            logits: heads.logits.segment_weighted_sum(w_sem)?,
            weights_geo: w_geo,
            weights_sem: w_sem,
        })
    }

    /// Uniform sample distances for `rays` rays.
    pub fn eval_distances(&self, rays: usize) -> Result<Vec<f64>> {
        let rc = &self.cfg.render;
        let one = sample_ray(rc.near, rc.far, rc.samples, SampleMode::Uniform, 0)?;
        Ok(one.iter().copied().cycle().take(one.len() * rays).collect())
    }

    /// Inference over many rays in chunks. `local_maps[f]` is the dense local
    /// map of frame `f` (ignored when the model has no encoder).
    pub fn render_plain(&self, store: &ParamStore<f32>, rays: &RayBundle, local_maps: &[Option<Tensor<f32>>]) -> Result<RenderOutput> {
        rays.validate()?;
        let k = self.cfg.num_classes;
        let n = self.cfg.render.samples;
        let w = self.intrinsics.width;
        let mut out = RenderOutput {
            depth: Vec::with_capacity(rays.len()),
            intensity: Vec::with_capacity(rays.len()),
            raydrop: Vec::with_capacity(rays.len()),
            semantics: Vec::with_capacity(rays.len() * k),
            num_classes: k,
            weight_sum_geo: Vec::with_capacity(rays.len()),
            weight_sum_sem: Vec::with_capacity(rays.len()),
        };
        let chunk = self.cfg.render.chunk_rays;
        let mut start = 0;
        while start < rays.len() {
            let end = (start + chunk).min(rays.len());
            let sub = rays.slice(start..end);
            let dists = self.eval_distances(sub.len())?;
            let g = Graph::<f32>::inference();
            let local = match &self.encoder {
                Some(enc) => {
                    let c = enc.out_channels();
                    let mut data = Vec::with_capacity(sub.len() * c);
                    for (i, &(row, col)) in sub.pixels.iter().enumerate() {
                        let f = sub.local_frame[i];
                        let map = local_maps
                            .get(f)
                            .and_then(|m| m.as_ref())
                            .ok_or_else(|| Error::MisalignedBatch(format!("no local map for frame {f}")))?;
                        let p = row * w + col;
                        data.extend_from_slice(&map.data()[p * c..(p + 1) * c]);
                    }
                    Some(g.constant(Tensor::new(vec![sub.len(), c], data)?))
                }
                None => None,
            };
            let rv = self.render(&g, store, &sub, &dists, n, local)?;
            let (sg, ss) = rv.weight_sums();
            out.depth.extend(rv.depth.to_vec());
            out.intensity.extend(rv.intensity.to_vec());
            out.raydrop.extend(rv.raydrop.to_vec());
            out.semantics.extend(rv.logits.softmax().to_vec());
            out.weight_sum_geo.extend(sg.iter().map(|&v| v as f32));
            out.weight_sum_sem.extend(ss.iter().map(|&v| v as f32));
            start = end;
        }
        Ok(out)
    }

    /// One ray per pixel center of a sensor at `pose` (row-major 4x4,
    /// sensor to world) and time `t`.
    pub fn image_rays(&self, pose: &[[f64; 4]; 4], t: f64, local_frame: usize) -> RayBundle {
        let mut rays = RayBundle::default();
        let o = [pose[0][3], pose[1][3], pose[2][3]];
        for r in 0..self.intrinsics.height {
            for c in 0..self.intrinsics.width {
                let d = self.intrinsics.pixel_direction(r, c);
                rays.push(o, rotate(pose, d), t, (r, c), local_frame);
            }
        }
        rays
    }

    /// Renders a full range image. Pixels whose drop probability exceeds the
    /// threshold are masked unless `mask_raydrop` is false.
    pub fn render_image(
        &self,
        store: &ParamStore<f32>,
        pose: &[[f64; 4]; 4],
        t: f64,
        local_map: Option<&Tensor<f32>>,
        mask_raydrop: bool,
    ) -> Result<RenderedImage> {
        let rays = self.image_rays(pose, t, 0);
        let out = self.render_plain(store, &rays, &[local_map.cloned()])?;
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        let mut img = RangeImage::empty(h, w);
        let thr = self.cfg.render.raydrop_threshold as f32;
        for i in 0..h * w {
            let keep = !mask_raydrop || out.raydrop[i] <= thr;
            let d = out.depth[i];
            if keep && d > 0.0 && d.is_finite() {
                img.depth[i] = d;
                img.intensity[i] = out.intensity[i];
                img.label[i] = out.class_of(i) as u32;
                img.mask[i] = true;
            }
        }
        Ok(RenderedImage { image: img, raw: out })
    }
}

/// A rendered frame: masked range image plus raw per-pixel predictions.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: RangeImage,
    pub raw: RenderOutput,
}

pub fn rotate(pose: &[[f64; 4]; 4], d: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| pose[i][0] * d[0] + pose[i][1] * d[1] + pose[i][2] * d[2])
}

pub fn transform(pose: &[[f64; 4]; 4], p: [f64; 3]) -> [f64; 3] {
    let r = rotate(pose, p);
    [r[0] + pose[0][3], r[1] + pose[1][3], r[2] + pose[2][3]]
}
