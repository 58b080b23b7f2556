//! SemanticKITTI-style dataset IO, scene assembly and an analytic synthetic
//! street scene.
//!
//! Layout: `velodyne/NNNNNN.bin` (little-endian `f32` x, y, z, intensity),
//! `labels/NNNNNN.label` (little-endian `u32`, semantic id in the low 16 bits),
//! `poses.txt` (12 numbers per line, row-major 3x4), optional `times.txt` and
//! optional `calib.txt` with a `Tr:` velodyne-to-camera line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::feature_fields::SceneBounds;
use crate::lidar_model::{project_cloud, LidarPoint, ProjectionStats, RangeImage, SensorIntrinsics};
use crate::neural_field::transform;

pub type Pose = [[f64; 4]; 4];

pub const IDENTITY: Pose = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

/// Frame period used when no `times.txt` exists.
pub const DEFAULT_FRAME_INTERVAL: f64 = 0.1;
/// Every frame whose window-relative index is a multiple of this is held out.
pub const TEST_STRIDE: usize = 10;

pub fn pose_mul(a: &Pose, b: &Pose) -> Pose {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse of a rigid transform.
pub fn pose_inverse(p: &Pose) -> Pose {
    let mut out = IDENTITY;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = p[j][i];
        }
    }
    for i in 0..3 {
        out[i][3] = -(0..3).map(|k| p[k][i] * p[k][3]).sum::<f64>();
    }
    out
}

/// Frobenius norm of `R^T R - I`.
pub fn orthonormality_error(p: &Pose) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let v: f64 = (0..3).map(|k| p[k][i] * p[k][j]).sum::<f64>() - if i == j { 1.0 } else { 0.0 };
            s += v * v;
        }
    }
    s.sqrt()
}

pub fn translation(p: &Pose) -> [f64; 3] {
    [p[0][3], p[1][3], p[2][3]]
}

pub fn pose_from_row_major(v: &[f64]) -> Result<Pose> {
    if v.len() != 12 {
        return Err(Error::Format(format!("pose needs 12 numbers, got {}", v.len())));
    }
    let mut p = IDENTITY;
    for r in 0..3 {
        p[r].copy_from_slice(&v[r * 4..r * 4 + 4]);
    }
    Ok(p)
}

pub fn pose_to_row_major(p: &Pose) -> [f64; 12] {
    let mut v = [0.0; 12];
    for r in 0..3 {
        v[r * 4..r * 4 + 4].copy_from_slice(&p[r]);
    }
    v
}

#[derive(Debug, Clone, Deserialize)]
struct ClassEntry {
    name: String,
    color: [u8; 3],
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct LearningMapFile {
    num_classes: usize,
    ignore: u32,
    map: BTreeMap<String, u32>,
    classes: BTreeMap<String, ClassEntry>,
}

/// Raw label id to training id remap, with class names and colors.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningMap {
    pub num_classes: usize,
    pub ignore: u32,
    map: BTreeMap<u32, u32>,
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
}

const SEMANTIC_KITTI_MAP: &str = include_str!("../data/semantic_kitti_learning_map.toml");

impl LearningMap {
    pub fn semantic_kitti() -> Self {
        Self::parse(SEMANTIC_KITTI_MAP).expect("shipped learning map parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: LearningMapFile = toml::from_str(text).map_err(|e| Error::Config(format!("learning map: {e}")))?;
        let mut map = BTreeMap::new();
        for (k, &v) in &f.map {
            let raw: u32 = k.parse().map_err(|_| Error::Config(format!("learning map key `{k}` is not an integer")))?;
            if v as usize >= f.num_classes {
                return Err(Error::Config(format!("learning map sends {raw} to {v} >= num_classes {}", f.num_classes)));
            }
            map.insert(raw, v);
        }
        let mut names = vec![String::new(); f.num_classes];
        let mut colors = vec![[0u8; 3]; f.num_classes];
        for (k, c) in f.classes {
            let id: usize = k.parse().map_err(|_| Error::Config(format!("class key `{k}` is not an integer")))?;
            if id >= f.num_classes {
                return Err(Error::Config(format!("class {id} >= num_classes {}", f.num_classes)));
            }
            names[id] = c.name;
            colors[id] = c.color;
        }
        if f.ignore as usize >= f.num_classes {
            return Err(Error::Config("ignore class out of range".into()));
        }
        Ok(Self {
            num_classes: f.num_classes,
            ignore: f.ignore,
            map,
            names,
            colors,
        })
    }

    /// Training id of a raw `.label` entry (instance bits are dropped).
    /// Unknown raw ids map to the ignore class.
    pub fn remap(&self, raw: u32) -> u32 {
        self.map.get(&(raw & 0xffff)).copied().unwrap_or(self.ignore)
    }

    pub fn contains(&self, raw: u32) -> bool {
        self.map.contains_key(&(raw & 0xffff))
    }

    /// Smallest raw id that maps to training id `class`, for writing
    /// predicted labels back in the raw id space.
    pub fn raw_id(&self, class: u32) -> Option<u32> {
        self.map.iter().find(|(_, &v)| v == class).map(|(&k, _)| k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    /// Sensor-frame `x, y, z, intensity`.
    pub points: Vec<[f32; 4]>,
    /// `.label` entries as stored (instance id in the high 16 bits).
    pub raw_labels: Vec<u32>,
    /// Training ids.
    pub labels: Vec<u32>,
    pub timestamp: f64,
    /// Sensor to world.
    pub pose: Pose,
}

impl LidarScan {
    pub fn lidar_points(&self) -> Vec<LidarPoint> {
        self.points
            .iter()
            .zip(&self.labels)
            .map(|(p, &l)| LidarPoint::new([p[0] as f64, p[1] as f64, p[2] as f64], p[3], l))
            .collect()
    }

    pub fn world_points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.points.iter().map(|p| transform(&self.pose, [p[0] as f64, p[1] as f64, p[2] as f64]))
    }
}

fn read_exact_records(path: &Path, record: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % record != 0 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record,
        });
    }
    Ok(bytes)
}

pub fn load_scan(bin: &Path, label: &Path, pose: Pose, timestamp: f64, lm: &LearningMap) -> Result<LidarScan> {
    let err = orthonormality_error(&pose);
    if !(err < 1e-5) {
        return Err(Error::Format(format!("pose rotation is not orthonormal (error {err:e})")));
    }
    let b = read_exact_records(bin, 16)?;
    let l = read_exact_records(label, 4)?;
    let points: Vec<[f32; 4]> = b
        .chunks_exact(16)
        .map(|c| [0, 1, 2, 3].map(|k| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap())))
        .collect();
    let raw_labels: Vec<u32> = l.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    if points.len() != raw_labels.len() {
        return Err(Error::SizeMismatch {
            path: label.to_path_buf(),
            points: points.len(),
            labels: raw_labels.len(),
        });
    }
    let labels = raw_labels.iter().map(|&r| lm.remap(r)).collect();
    Ok(LidarScan {
        points,
        raw_labels,
        labels,
        timestamp,
        pose,
    })
}

pub fn write_scan(bin: &Path, label: &Path, scan: &LidarScan) -> Result<()> {
    let mut b = Vec::with_capacity(scan.points.len() * 16);
    for p in &scan.points {
        for v in p {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let l: Vec<u8> = scan.raw_labels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(bin, b).map_err(io_err(bin))?;
    fs::write(label, l).map_err(io_err(label))?;
    Ok(())
}

pub fn frame_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join("velodyne").join(format!("{index:06}.bin")),
        dir.join("labels").join(format!("{index:06}.label")),
    )
}

fn parse_numbers(line: &str, path: &Path) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("{}: bad number `{t}`", path.display()))))
        .collect()
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| pose_from_row_major(&parse_numbers(l, path)?))
        .collect()
}

pub fn read_times(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("{}: bad timestamp `{l}`", path.display())))
        })
        .collect()
}

/// `Tr` (velodyne to camera) from a KITTI `calib.txt`.
pub fn read_calib_tr(path: &Path) -> Result<Pose> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("Tr:") {
            return pose_from_row_major(&parse_numbers(rest, path)?);
        }
    }
    Err(Error::Format(format!("{}: no `Tr:` line", path.display())))
}

/// Formats numbers with Rust's shortest round-trip representation.
fn join_numbers(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

/// Writes scans in the dataset layout (identity calibration, explicit times).
pub fn write_dataset(dir: &Path, scans: &[LidarScan]) -> Result<()> {
    for sub in ["velodyne", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut poses = String::new();
    let mut times = String::new();
    for (i, s) in scans.iter().enumerate() {
        let (b, l) = frame_paths(dir, i);
        write_scan(&b, &l, s)?;
        poses.push_str(&join_numbers(&pose_to_row_major(&s.pose)));
        poses.push('\n');
        times.push_str(&format!("{:e}\n", s.timestamp));
    }
    let p = dir.join("poses.txt");
    fs::write(&p, poses).map_err(io_err(&p))?;
    let t = dir.join("times.txt");
    fs::write(&t, times).map_err(io_err(&t))?;
    Ok(())
}

/// Window-relative train/test split: indices that are multiples of ten are
/// held out.
pub fn split_indices(count: usize) -> (Vec<usize>, Vec<usize>) {
    (0..count).partition(|i| i % TEST_STRIDE != 0)
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub scan: LidarScan,
    pub image: RangeImage,
    pub projection: ProjectionStats,
}

impl Frame {
    pub fn origin(&self) -> [f64; 3] {
        translation(&self.scan.pose)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub intrinsics: SensorIntrinsics,
    pub frames: Vec<Frame>,
    pub bounds: SceneBounds,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub num_classes: usize,
    pub ignore: u32,
}

impl Scene {
    pub fn from_scans(scans: Vec<LidarScan>, intrinsics: SensorIntrinsics, lm: &LearningMap, expansion: f64) -> Result<Self> {
        intrinsics.validate()?;
        if scans.is_empty() {
            return Err(Error::EmptyScene);
        }
        let points = scans
            .iter()
            .flat_map(|s| s.world_points().chain(std::iter::once(translation(&s.pose))))
            .collect::<Vec<_>>();
        let bounds = SceneBounds::fit(points, scans.iter().map(|s| s.timestamp), expansion)?;
        let frames: Vec<Frame> = scans
            .into_iter()
            .map(|scan| {
                let (image, projection) = project_cloud(&scan.lidar_points(), &intrinsics);
                Frame { scan, image, projection }
            })
            .collect();
        let (train, test) = split_indices(frames.len());
        Ok(Self {
            intrinsics,
            frames,
            bounds,
            train,
            test,
            num_classes: lm.num_classes,
            ignore: lm.ignore,
        })
    }

    /// Training frame closest in time to `t` (earliest on ties).
    pub fn nearest_train_frame(&self, t: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for &i in &self.train {
            let d = (self.frames[i].scan.timestamp - t).abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn images(&self) -> Vec<&RangeImage> {
        self.frames.iter().map(|f| &f.image).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SceneOptions {
    pub intrinsics: SensorIntrinsics,
    pub learning_map: LearningMap,
    pub bounds_expansion: f64,
}

/// Loads `count` consecutive frames starting at `start`.
pub fn assemble_scene(dir: &Path, start: usize, count: usize, opts: &SceneOptions) -> Result<Scene> {
    if count == 0 {
        return Err(Error::EmptyScene);
    }
    let poses = read_poses(&dir.join("poses.txt"))?;
    let times_path = dir.join("times.txt");
    let times = if times_path.exists() { Some(read_times(&times_path)?) } else { None };
    let calib_path = dir.join("calib.txt");
    let tr = if calib_path.exists() { Some(read_calib_tr(&calib_path)?) } else { None };
    let mut scans = Vec::with_capacity(count);
    for index in start..start + count {
        let (bin, label) = frame_paths(dir, index);
        for p in [&bin, &label] {
            if !p.exists() {
                return Err(Error::MissingFrame { index, path: p.clone() });
            }
        }
        let pose = poses.get(index).ok_or_else(|| Error::MissingFrame {
            index,
            path: dir.join("poses.txt"),
        })?;
        let pose = match &tr {
            Some(tr) => pose_mul(&pose_inverse(tr), &pose_mul(pose, tr)),
            None => *pose,
        };
        let t = match &times {
            Some(ts) => *ts.get(index).ok_or_else(|| Error::MissingFrame { index, path: times_path.clone() })?,
            None => index as f64 * DEFAULT_FRAME_INTERVAL,
        };
        scans.push(load_scan(&bin, &label, pose, t, &opts.learning_map)?);
    }
    Scene::from_scans(scans, opts.intrinsics, &opts.learning_map, opts.bounds_expansion)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// Horizontal plane `z = height`.
    Ground { height: f64 },
    /// Axis-aligned box at time zero.
    Box { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub name: String,
    pub shape: Shape,
    /// Raw SemanticKITTI label id.
    pub label: u32,
    pub reflectivity: f64,
    #[serde(default)]
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSceneConfig {
    pub frames: usize,
    pub frame_interval: f64,
    pub intrinsics: SensorIntrinsics,
    /// Sensor position at time zero (world frame, identity rotation).
    pub sensor_start: [f64; 3],
    pub sensor_velocity: [f64; 3],
    /// Returns beyond this distance are dropped.
    pub max_range: f64,
    /// Standard deviation of additive intensity noise.
    pub intensity_noise: f64,
    pub seed: u64,
    pub primitives: Vec<Primitive>,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        let prim = |name: &str, shape, label, reflectivity, velocity| Primitive {
            name: name.into(),
            shape,
            label,
            reflectivity,
            velocity,
        };
        Self {
            frames: 5,
            frame_interval: DEFAULT_FRAME_INTERVAL,
            intrinsics: SensorIntrinsics {
                height: 32,
                width: 256,
                fov_up_deg: 3.0,
                fov_down_deg: -25.0,
            },
            sensor_start: [0.0, 0.0, 1.8],
            sensor_velocity: [3.0, 0.0, 0.0],
            max_range: 40.0,
            intensity_noise: 0.0,
            seed: 0,
            primitives: vec![
                prim("road", Shape::Ground { height: 0.0 }, 40, 0.3, [0.0; 3]),
                prim(
                    "building",
                    Shape::Box {
                        min: [-25.0, 8.0, 0.0],
                        max: [25.0, 14.0, 12.0],
                    },
                    50,
                    0.6,
                    [0.0; 3],
                ),
                prim(
                    "hedge",
                    Shape::Box {
                        min: [-25.0, -12.0, 0.0],
                        max: [25.0, -7.0, 3.0],
                    },
                    70,
                    0.45,
                    [0.0; 3],
                ),
                prim(
                    "car",
                    Shape::Box {
                        min: [6.0, -4.0, 0.0],
                        max: [10.5, -2.2, 1.6],
                    },
                    252,
                    0.9,
                    [2.0, 0.0, 0.0],
                ),
            ],
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self, lm: &LearningMap) -> Result<()> {
        self.intrinsics.validate()?;
        if self.frames == 0 {
            return Err(Error::Config("synth.frames must be positive".into()));
        }
        if !(self.frame_interval > 0.0) || !(self.max_range > 0.0) || !(self.intensity_noise >= 0.0) {
            return Err(Error::Config("synth.frame_interval, max_range must be positive and intensity_noise non-negative".into()));
        }
        if self.primitives.is_empty() {
            return Err(Error::Config("synth.primitives must not be empty".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for (i, p) in self.primitives.iter().enumerate() {
            if !lm.contains(p.label) || lm.remap(p.label) == lm.ignore {
                return Err(Error::Config(format!(
                    "synth.primitives[{i}].label: raw id {} is not a trainable class of the learning map",
                    p.label
                )));
            }
            if !(0.0..=1.0).contains(&p.reflectivity) {
                return Err(Error::Config(format!("synth.primitives[{i}].reflectivity must lie in [0, 1]")));
            }
            if let Shape::Box { min, max } = p.shape {
                if (0..3).any(|a| !(max[a] > min[a])) {
                    return Err(Error::Config(format!("synth.primitives[{i}].shape: box max must exceed min")));
                }
            }
            ids.insert(lm.remap(p.label));
        }
        if ids.len() > lm.num_classes {
            return Err(Error::Config("more distinct classes than the learning map provides".into()));
        }
        Ok(())
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        i as f64 * self.frame_interval
    }

    pub fn frame_pose(&self, i: usize) -> Pose {
        let t = self.frame_time(i);
        let mut p = IDENTITY;
        for a in 0..3 {
            p[a][3] = self.sensor_start[a] + self.sensor_velocity[a] * t;
        }
        p
    }
}

/// Nearest positive hit distance and |cos incidence| of a ray with a primitive
/// at time `t`.
pub fn intersect(p: &Primitive, t: f64, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    match p.shape {
        Shape::Ground { height } => {
            if d[2] == 0.0 {
                return None;
            }
            let s = (height - o[2]) / d[2];
            (s > 0.0).then(|| (s, d[2].abs()))
        }
        Shape::Box { min, max } => {
            let shift = p.velocity.map(|v| v * t);
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for a in 0..3 {
                let (lo, hi) = (min[a] + shift[a], max[a] + shift[a]);
                if d[a] == 0.0 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut e, mut x) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                if e > x {
                    std::mem::swap(&mut e, &mut x);
                }
                if e > t0 {
                    t0 = e;
                    axis = a;
                }
                t1 = t1.min(x);
            }
            (t0 <= t1 && t0 > 0.0).then(|| (t0, d[axis].abs()))
        }
    }
}

/// Renders every frame by analytic ray casting through the pixel centers.
pub fn synth_scene(cfg: &SynthSceneConfig, lm: &LearningMap) -> Result<Vec<LidarScan>> {
    cfg.validate(lm)?;
    let intr = &cfg.intrinsics;
    let dirs = intr.pixel_directions();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scans = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let t = cfg.frame_time(f);
        let pose = cfg.frame_pose(f);
        let o = translation(&pose);
        let mut scan = LidarScan {
            points: Vec::new(),
            raw_labels: Vec::new(),
            labels: Vec::new(),
            timestamp: t,
            pose,
        };
        for d in &dirs {
            let mut best: Option<(f64, f64, &Primitive)> = None;
            for p in &cfg.primitives {
                if let Some((s, c)) = intersect(p, t, o, *d) {
                    if best.map_or(true, |b| s < b.0) {
                        best = Some((s, c, p));
                    }
                }
            }
            let Some((s, cos, prim)) = best else { continue };
            if s > cfg.max_range {
                continue;
            }
            let mut intensity = prim.reflectivity * cos;
            if cfg.intensity_noise > 0.0 {
                intensity += cfg.intensity_noise * (rng.gen::<f64>() - 0.5) * 12f64.sqrt();
            }
            scan.points.push([(d[0] * s) as f32, (d[1] * s) as f32, (d[2] * s) as f32, intensity.clamp(0.0, 1.0) as f32]);
            scan.raw_labels.push(prim.label);
            scan.labels.push(lm.remap(prim.label));
        }
        scans.push(scan);
    }
    Ok(scans)
}
