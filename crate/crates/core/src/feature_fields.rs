//! Global 4D feature fields: factored planes and multi-level hash grids.
//!
//! Both fields are sampled at normalized coordinates `q in [0,1]^4`
//! (`x, y, z, t`). An axis with `n` nodes maps `q` to `q * (n - 1)`.

use lidarfield_autodiff::{Graph, LatticeCoords, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `q` before a sample is rejected as out of bounds.
pub const Q_TOLERANCE: f64 = 1e-6;
const DEGENERATE_TIME_PAD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub t_min: f64,
    pub t_max: f64,
}

impl SceneBounds {
    pub fn new(min: [f64; 3], max: [f64; 3], t_min: f64, t_max: f64) -> Result<Self> {
        for (a, name) in ["x", "y", "z"].into_iter().enumerate() {
            if !(max[a] - min[a] > 0.0) {
                return Err(Error::DegenerateBounds { axis: name });
            }
        }
        if !(t_max - t_min > 0.0) {
            return Err(Error::DegenerateBounds { axis: "t" });
        }
        Ok(Self { min, max, t_min, t_max })
    }

    /// Box around `points`, grown by `expansion` times the extent on every
    /// side. A single timestamp is padded by 50 ms each way.
    pub fn fit(
        points: impl IntoIterator<Item = [f64; 3]>,
        times: impl IntoIterator<Item = f64>,
        expansion: f64,
    ) -> Result<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let (mut t_min, mut t_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in times {
            t_min = t_min.min(t);
            t_max = t_max.max(t);
        }
        if !any || !t_min.is_finite() {
            return Err(Error::EmptyScene);
        }
        for a in 0..3 {
            let pad = (max[a] - min[a]) * expansion;
            min[a] -= pad;
            max[a] += pad;
        }
        if t_max == t_min {
            t_min -= DEGENERATE_TIME_PAD;
            t_max += DEGENERATE_TIME_PAD;
        }
        Self::new(min, max, t_min, t_max)
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a])
    }

    pub fn normalize(&self, p: [f64; 3], t: f64) -> [f64; 4] {
        let s = [0, 1, 2].map(|a| (p[a] - self.min[a]) / (self.max[a] - self.min[a]));
        [s[0], s[1], s[2], (t - self.t_min) / (self.t_max - self.t_min)]
    }

    /// Like [`normalize`](Self::normalize) with every coordinate clamped to `[0, 1]`.
    pub fn normalize_clamped(&self, p: [f64; 3], t: f64) -> [f64; 4] {
        self.normalize(p, t).map(|v| v.clamp(0.0, 1.0))
    }

    pub fn contains_time(&self, t: f64) -> bool {
        t >= self.t_min && t <= self.t_max
    }
}

fn check_q(q: &[[f64; 4]]) -> Result<()> {
    for (i, p) in q.iter().enumerate() {
        if p.iter().any(|&v| !(v >= -Q_TOLERANCE && v <= 1.0 + Q_TOLERANCE)) {
            return Err(Error::OutOfBounds {
                what: "field query",
                detail: format!("sample {i} at {p:?}"),
            });
        }
    }
    Ok(())
}

/// Cell index and in-cell fraction along an axis with `nodes` lattice nodes.
#[inline]
fn locate(q: f64, nodes: usize) -> (usize, f64) {
    let x = q.clamp(0.0, 1.0) * (nodes - 1) as f64;
    let base = (x.floor() as usize).min(nodes - 2);
    (base, x - base as f64)
}

fn uniform_tensor(rng: &mut impl Rng, shape: Vec<usize>, range: [f64; 2]) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = if range[0] == range[1] {
        vec![range[0] as f32; n]
    } else {
        (0..n).map(|_| rng.gen_range(range[0]..range[1]) as f32).collect()
    };
    Tensor::new(shape, data).expect("shape matches data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanarConfig {
    /// Spatial node count `M` per level, coarse to fine.
    pub resolutions: Vec<usize>,
    /// Temporal node count `H_t`.
    pub time_resolution: usize,
    pub channels: usize,
    /// Uniform init range of the xy/xz/yz planes.
    pub spatial_init: [f64; 2],
    /// Uniform init range of the xt/yt/zt planes.
    pub temporal_init: [f64; 2],
}

impl Default for PlanarConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![64, 128],
            time_resolution: 50,
            channels: 8,
            spatial_init: [0.1, 0.5],
            temporal_init: [1.0, 1.0],
        }
    }
}

impl PlanarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() || self.resolutions.iter().any(|&r| r < 2) || self.time_resolution < 2 {
            return Err(Error::Config("planar resolutions must be >= 2 with at least one level".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("planar channels must be positive".into()));
        }
        Ok(())
    }

    /// Parameter count of one level: `(3M^2 + 3M H_t) C`.
    pub fn level_params(&self, m: usize) -> usize {
        (3 * m * m + 3 * m * self.time_resolution) * self.channels
    }
}

/// Axis pairs of the six planes; the first three are static.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
pub const PLANE_NAMES: [&str; 6] = ["xy", "xz", "yz", "xt", "yt", "zt"];

#[derive(Debug, Clone)]
pub struct PlanarField {
    cfg: PlanarConfig,
    levels: Vec<[ParamId; 6]>,
}

impl PlanarField {
    pub fn register(store: &mut ParamStore<f32>, cfg: &PlanarConfig, prefix: &str, group: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut levels = Vec::with_capacity(cfg.resolutions.len());
        for (l, &m) in cfg.resolutions.iter().enumerate() {
            let mut ids = Vec::with_capacity(6);
            for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let (ra, rb) = (Self::axis_nodes(cfg, m, a), Self::axis_nodes(cfg, m, b));
                let range = if b == 3 { cfg.temporal_init } else { cfg.spatial_init };
                let t = uniform_tensor(rng, vec![ra * rb, cfg.channels], range);
                ids.push(store.add(format!("{prefix}.l{l}.{}", PLANE_NAMES[p]), t, group)?);
            }
            levels.push(ids.try_into().expect("six planes"));
        }
        Ok(Self { cfg: cfg.clone(), levels })
    }

    fn axis_nodes(cfg: &PlanarConfig, m: usize, axis: usize) -> usize {
        if axis == 3 {
            cfg.time_resolution
        } else {
            m
        }
    }

    pub fn config(&self) -> &PlanarConfig {
        &self.cfg
    }

    /// `levels * 2C`: static and dynamic products per level.
    pub fn output_dim(&self) -> usize {
        self.levels.len() * 2 * self.cfg.channels
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.levels.iter().flatten().copied().collect()
    }

    /// Static planes first, then dynamic, per level.
    pub fn level_params(&self, level: usize) -> [ParamId; 6] {
        self.levels[level]
    }

    /// Samples all planes at `q` (`S` points) and returns `S x output_dim`.
    pub fn sample<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, q: &[[f64; 4]]) -> Result<Var<'g, T>> {
        check_q(q)?;
        self.sample_impl(g, store, q, None)
    }

    /// As [`sample`](Self::sample), differentiable with respect to the `S x 4`
    /// coordinate variable as well.
    pub fn sample_var<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, q: Var<'g, T>) -> Result<Var<'g, T>> {
        let qs = coords_of(q)?;
        check_q(&qs)?;
        self.sample_impl(g, store, &qs, Some(q))
    }

    fn sample_impl<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        q: &[[f64; 4]],
        qvar: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let mut parts = Vec::with_capacity(self.levels.len() * 2);
        for (l, ids) in self.levels.iter().enumerate() {
            let m = self.cfg.resolutions[l];
            let mut planes = Vec::with_capacity(6);
            for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let (ra, rb) = (Self::axis_nodes(&self.cfg, m, a), Self::axis_nodes(&self.cfg, m, b));
                let mut corners = Vec::with_capacity(q.len() * 4);
                let mut fracs = Vec::with_capacity(q.len() * 2);
                for pt in q {
                    let (ia, fa) = locate(pt[a], ra);
                    let (ib, fb) = locate(pt[b], rb);
                    fracs.push(T::lit(fa));
                    fracs.push(T::lit(fb));
                    for k in 0..4usize {
                        let na = ia + (k & 1);
                        let nb = ib + (k >> 1);
                        corners.push((na * rb + nb) as u32);
                    }
                }
                let coords = qvar.map(|qv| LatticeCoords {
                    q: qv,
                    columns: vec![a, b],
                    scales: vec![T::lit((ra - 1) as f64), T::lit((rb - 1) as f64)],
                });
                planes.push(g.param(store, ids[p]).lattice_gather(corners, fracs, 2, coords)?);
            }
            parts.push(planes[0].mul(planes[1])?.mul(planes[2])?);
            parts.push(planes[3].mul(planes[4])?.mul(planes[5])?);
        }
        Ok(g.concat_cols(&parts)?)
    }
}

fn coords_of<T: Scalar>(q: Var<'_, T>) -> Result<Vec<[f64; 4]>> {
    let v = q.value();
    if v.cols() != 4 {
        return Err(Error::ShapeMismatch(format!("query coordinates must be S x 4, got {:?}", v.shape())));
    }
    Ok(v.data()
        .chunks_exact(4)
        .map(|c| [0, 1, 2, 3].map(|k| c[k].to_f64().unwrap_or(f64::NAN)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Node count per spatial axis of the coarsest level.
    pub min_resolution: usize,
    /// Node count per spatial axis of the finest level.
    pub max_resolution: usize,
    pub channels: usize,
    /// Rows per hash table, as a power of two.
    pub log2_table_size: u32,
    /// Temporal node count of the dynamic volumes.
    pub time_resolution: usize,
    pub init_range: [f64; 2],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            min_resolution: 16,
            max_resolution: 512,
            channels: 2,
            log2_table_size: 19,
            time_resolution: 50,
            init_range: [-1e-4, 1e-4],
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels == 0 {
            return Err(Error::Config("hash grid needs at least one level and channel".into()));
        }
        if self.min_resolution < 2 || self.max_resolution < self.min_resolution || self.time_resolution < 2 {
            return Err(Error::Config("hash grid resolutions must be >= 2 and min <= max".into()));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 30 {
            return Err(Error::Config("log2_table_size must be in 1..=30".into()));
        }
        Ok(())
    }

    /// Geometric progression from `min_resolution` to `max_resolution`.
    pub fn level_resolutions(&self) -> Vec<usize> {
        if self.levels == 1 {
            return vec![self.min_resolution];
        }
        let growth = ((self.max_resolution as f64).ln() - (self.min_resolution as f64).ln()) / (self.levels - 1) as f64;
        (0..self.levels)
            .map(|l| ((self.min_resolution as f64) * (growth * l as f64).exp() + 1e-9).floor() as usize)
            .collect()
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }
}

/// Per-axis primes of the spatial hash, indexed by axis (x, y, z, t).
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// XOR of coordinate-times-prime over the given axes, modulo `table_size`.
pub fn hash_index(coords: &[u32], axes: &[usize], table_size: u32) -> u32 {
    let mut h = 0u32;
    for (&c, &a) in coords.iter().zip(axes) {
        h ^= c.wrapping_mul(HASH_PRIMES[a]);
    }
    h % table_size
}

/// Axes of the static xyz volume and the dynamic xyt/xzt/yzt volumes.
pub const VOLUME_AXES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
pub const VOLUME_NAMES: [&str; 4] = ["xyz", "xyt", "xzt", "yzt"];

#[derive(Debug, Clone)]
pub struct GridVolume {
    pub axes: [usize; 3],
    pub nodes: [usize; 3],
    /// Dense (identity) indexing when the lattice fits the table.
    pub dense: bool,
    pub rows: usize,
    pub param: ParamId,
}

impl GridVolume {
    pub fn row_of(&self, node: [usize; 3], table_size: usize) -> u32 {
        if self.dense {
            ((node[0] * self.nodes[1] + node[1]) * self.nodes[2] + node[2]) as u32
        } else {
            hash_index(&node.map(|v| v as u32), &self.axes, table_size as u32)
        }
    }
}

#[derive(Debug, Clone)]
pub struct HashGridField {
    cfg: HashGridConfig,
    levels: Vec<Vec<GridVolume>>,
}

impl HashGridField {
    pub fn register(store: &mut ParamStore<f32>, cfg: &HashGridConfig, prefix: &str, group: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let table = cfg.table_size();
        let mut levels = Vec::with_capacity(cfg.levels);
        for (l, res) in cfg.level_resolutions().into_iter().enumerate() {
            let mut vols = Vec::with_capacity(4);
            for (v, axes) in VOLUME_AXES.iter().enumerate() {
                let nodes = axes.map(|a| if a == 3 { cfg.time_resolution } else { res });
                let count: usize = nodes.iter().product();
                let dense = count <= table;
                let rows = count.min(table);
                let t = uniform_tensor(rng, vec![rows, cfg.channels], cfg.init_range);
                let param = store.add(format!("{prefix}.l{l}.{}", VOLUME_NAMES[v]), t, group)?;
                vols.push(GridVolume {
                    axes: *axes,
                    nodes,
                    dense,
                    rows,
                    param,
                });
            }
            levels.push(vols);
        }
        Ok(Self { cfg: cfg.clone(), levels })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.cfg
    }

    pub fn volumes(&self, level: usize) -> &[GridVolume] {
        &self.levels[level]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// `levels * 4C`.
    pub fn output_dim(&self) -> usize {
        self.levels.len() * 4 * self.cfg.channels
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.levels.iter().flatten().map(|v| v.param).collect()
    }

    /// Trilinear samples of every volume at `q`; `S x output_dim`, ordered
    /// per level as `[xyz, xyt, xzt, yzt]`.
    pub fn sample<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, q: &[[f64; 4]]) -> Result<Var<'g, T>> {
        check_q(q)?;
        self.sample_impl(g, store, q, None)
    }

    pub fn sample_var<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, q: Var<'g, T>) -> Result<Var<'g, T>> {
        let qs = coords_of(q)?;
        check_q(&qs)?;
        self.sample_impl(g, store, &qs, Some(q))
    }

    fn sample_impl<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        q: &[[f64; 4]],
        qvar: Option<Var<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let table = self.cfg.table_size();
        let mut parts = Vec::with_capacity(self.levels.len() * 4);
        for vols in &self.levels {
            for vol in vols {
                let mut corners = Vec::with_capacity(q.len() * 8);
                let mut fracs = Vec::with_capacity(q.len() * 3);
                for pt in q {
                    let mut base = [0usize; 3];
                    for k in 0..3 {
                        let (b, f) = locate(pt[vol.axes[k]], vol.nodes[k]);
                        base[k] = b;
                        fracs.push(T::lit(f));
                    }
                    for c in 0..8usize {
                        let node = [base[0] + (c & 1), base[1] + ((c >> 1) & 1), base[2] + ((c >> 2) & 1)];
                        corners.push(vol.row_of(node, table));
                    }
                }
                let coords = qvar.map(|qv| LatticeCoords {
                    q: qv,
                    columns: vol.axes.to_vec(),
                    scales: vol.nodes.iter().map(|&n| T::lit((n - 1) as f64)).collect(),
                });
                parts.push(g.param(store, vol.param).lattice_gather(corners, fracs, 3, coords)?);
            }
        }
        Ok(g.concat_cols(&parts)?)
    }
}
