//! Local per-frame features from a one-channel range image.
//!
//! A small residual CNN (hardswish activations) produces feature maps at full,
//! half and quarter resolution. A query bilinearly samples every map at a
//! continuous pixel coordinate, concatenates the samples and projects them to
//! `out_channels`. Querying all pixel centers yields the dense `H x W` map.

use lidarfield_autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Number of 3x3 stem convolutions.
    pub stem_convs: usize,
    /// Widths of the residual stages; every stage after the first halves the
    /// resolution.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// `C_local`.
    pub out_channels: usize,
    /// Depth (m) that maps to 1.0 at the input.
    pub depth_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stem_convs: 2,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            out_channels: 128,
            depth_scale: 80.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_convs == 0 || self.stage_widths.is_empty() || self.stage_widths.contains(&0) || self.out_channels == 0 {
            return Err(Error::Config("encoder needs a stem, non-empty stages and positive widths".into()));
        }
        if !(self.depth_scale > 0.0) {
            return Err(Error::Config("encoder depth_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    fn register(
        store: &mut ParamStore<f32>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
        group: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = gain * (6.0 / (cin * 9) as f64).sqrt();
        let data = (0..cout * cin * 9).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        let w = store.add(format!("{name}.w"), Tensor::new(vec![cout, cin, 3, 3], data)?, group)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![cout]), group)?;
        Ok(Self { w, b, stride })
    }

    fn apply<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv2d(g.param(store, self.w), g.param(store, self.b), self.stride, 1)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    transition: Option<Conv>,
    blocks: Vec<(Conv, Conv)>,
}

#[derive(Debug, Clone)]
pub struct SemanticEncoder {
    cfg: EncoderConfig,
    stem: Vec<Conv>,
    stages: Vec<Stage>,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Stage outputs of one frame, stored as `(H_s * W_s) x C_s` row tables.
pub struct EncodedFrame<'g, T: Scalar> {
    pub height: usize,
    pub width: usize,
    maps: Vec<(Var<'g, T>, usize, usize)>,
}

impl<T: Scalar> EncodedFrame<'_, T> {
    pub fn stage_dims(&self) -> Vec<(usize, usize)> {
        self.maps.iter().map(|&(_, h, w)| (h, w)).collect()
    }
}

/// Lower node, upper node and fraction for a continuous index on `n` nodes.
fn locate_px(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 2);
    (i, i + 1, u - i as f64)
}

impl SemanticEncoder {
    pub fn register(store: &mut ParamStore<f32>, cfg: &EncoderConfig, prefix: &str, group: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let w0 = cfg.stage_widths[0];
        let mut stem = Vec::with_capacity(cfg.stem_convs);
        for i in 0..cfg.stem_convs {
            let cin = if i == 0 { 1 } else { w0 };
            stem.push(Conv::register(store, &format!("{prefix}.stem{i}"), cin, w0, 1, 1.0, group, rng)?);
        }
        let mut stages = Vec::with_capacity(cfg.stage_widths.len());
        for (s, &w) in cfg.stage_widths.iter().enumerate() {
            let transition = if s == 0 {
                None
            } else {
                let cin = cfg.stage_widths[s - 1];
                Some(Conv::register(store, &format!("{prefix}.s{s}.down"), cin, w, 2, 1.0, group, rng)?)
            };
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let c1 = Conv::register(store, &format!("{prefix}.s{s}.b{b}.c1"), w, w, 1, 1.0, group, rng)?;
                // Residual branches start small so the identity path dominates.
                let c2 = Conv::register(store, &format!("{prefix}.s{s}.b{b}.c2"), w, w, 1, 0.1, group, rng)?;
                blocks.push((c1, c2));
            }
            stages.push(Stage { transition, blocks });
        }
        let fused: usize = cfg.stage_widths.iter().sum();
        let bound = (6.0 / fused as f64).sqrt();
        let data = (0..fused * cfg.out_channels).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        let proj_w = store.add(format!("{prefix}.proj.w"), Tensor::new(vec![fused, cfg.out_channels], data)?, group)?;
        let proj_b = store.add(format!("{prefix}.proj.b"), Tensor::zeros(vec![cfg.out_channels]), group)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            proj_w,
            proj_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels
    }

    /// Parameter ids grouped by stage (stem and projection excluded).
    pub fn stage_param_ids(&self) -> Vec<Vec<ParamId>> {
        self.stages
            .iter()
            .map(|s| {
                let mut ids = Vec::new();
                if let Some(t) = s.transition {
                    ids.extend([t.w, t.b]);
                }
                for (a, b) in &s.blocks {
                    ids.extend([a.w, a.b, b.w, b.b]);
                }
                ids
            })
            .collect()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.stem.iter().flat_map(|c| [c.w, c.b]).collect();
        ids.extend(self.stage_param_ids().into_iter().flatten());
        ids.extend([self.proj_w, self.proj_b]);
        ids
    }

    /// Runs the CNN on a row-major `height x width` depth image (meters,
    /// zeros where there is no return).
    pub fn forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        depth: &[f32],
        height: usize,
        width: usize,
    ) -> Result<EncodedFrame<'g, T>> {
        if depth.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "encoder input has {} values, expected {height} x {width}",
                depth.len()
            )));
        }
        if depth.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("encoder input contains non-finite depth".into()));
        }
        let scale = 1.0 / self.cfg.depth_scale;
        let input = Tensor::new(vec![1, height, width], depth.iter().map(|&d| T::lit(d as f64 * scale)).collect())?;
        let mut x = g.constant(input);
        for c in &self.stem {
            x = c.apply(g, store, x)?.hardswish();
        }
        let mut maps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(t) = stage.transition {
                x = t.apply(g, store, x)?.hardswish();
            }
            for (c1, c2) in &stage.blocks {
                let branch = c2.apply(g, store, c1.apply(g, store, x)?.hardswish())?;
                x = x.add(branch)?.hardswish();
            }
            let shape = x.shape();
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            maps.push((x.reshape(vec![c, h * w])?.transpose(), h, w));
        }
        Ok(EncodedFrame { height, width, maps })
    }

    /// Features at continuous full-resolution pixel coordinates `(row, col)`
    /// where pixel `(r, c)` has its center at `(r + 0.5, c + 0.5)`.
    pub fn query<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        frame: &EncodedFrame<'g, T>,
        pixels: &[(f64, f64)],
    ) -> Result<Var<'g, T>> {
        for (i, &(r, c)) in pixels.iter().enumerate() {
            if !(r >= 0.0 && r <= frame.height as f64 && c >= 0.0 && c <= frame.width as f64) {
                return Err(Error::OutOfBounds {
                    what: "encoder query",
                    detail: format!("pixel {i} at ({r}, {c}) outside {}x{}", frame.height, frame.width),
                });
            }
        }
        let mut parts = Vec::with_capacity(frame.maps.len());
        for &(map, mh, mw) in &frame.maps {
            let sy = frame.height as f64 / mh as f64;
            let sx = frame.width as f64 / mw as f64;
            let mut corners = Vec::with_capacity(pixels.len() * 4);
            let mut fracs = Vec::with_capacity(pixels.len() * 2);
            for &(r, c) in pixels {
                let (r0, r1, fr) = locate_px(r / sy - 0.5, mh);
                let (c0, c1, fc) = locate_px(c / sx - 0.5, mw);
                fracs.push(T::lit(fr));
                fracs.push(T::lit(fc));
                for (rr, cc) in [(r0, c0), (r1, c0), (r0, c1), (r1, c1)] {
                    corners.push((rr * mw + cc) as u32);
                }
            }
            parts.push(map.lattice_gather(corners, fracs, 2, None)?);
        }
        let fused = g.concat_cols(&parts)?;
        Ok(fused.matmul(g.param(store, self.proj_w))?.add_row(g.param(store, self.proj_b))?)
    }

    /// Dense `(H * W) x out_channels` map, row-major over pixels.
    pub fn encode<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        depth: &[f32],
        height: usize,
        width: usize,
    ) -> Result<Var<'g, T>> {
        let frame = self.forward(g, store, depth, height, width)?;
        let centers: Vec<(f64, f64)> = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r as f64 + 0.5, c as f64 + 0.5)))
            .collect();
        self.query(g, store, &frame, &centers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore<f32>, SemanticEncoder) {
        let cfg = EncoderConfig {
            stage_widths: vec![4, 6, 8],
            blocks_per_stage: 1,
            out_channels: 5,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let enc = SemanticEncoder::register(&mut store, &cfg, "enc", 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, enc)
    }

    fn ramp(h: usize, w: usize) -> Vec<f32> {
        (0..h * w).map(|i| if i % 7 == 0 { 0.0 } else { (i % 23) as f32 * 2.5 }).collect()
    }

    #[test]
    fn dense_map_keeps_spatial_size() {
        let (store, enc) = tiny();
        let g = Graph::inference();
        let map = enc.encode(&g, &store, &ramp(8, 16), 8, 16).unwrap();
        assert_eq!(map.shape(), vec![128, 5]);
        let frame = enc.forward(&g, &store, &ramp(8, 16), 8, 16).unwrap();
        assert_eq!(frame.stage_dims(), vec![(8, 16), (4, 8), (2, 4)]);
    }

    #[test]
    fn pixel_center_query_equals_map_row_and_midpoint_averages() {
        let (store, enc) = tiny();
        let g = Graph::inference();
        let img = ramp(8, 16);
        let dense = enc.encode(&g, &store, &img, 8, 16).unwrap().to_vec();
        let frame = enc.forward(&g, &store, &img, 8, 16).unwrap();
        let at = enc.query(&g, &store, &frame, &[(3.5, 9.5)]).unwrap().to_vec();
        assert_eq!(at, dense[(3 * 16 + 9) * 5..(3 * 16 + 10) * 5].to_vec());
        // Column 8 sits between centers 7.5 and 8.5; neither stage map has a
        // node strictly between them, so the blend is linear there.
        let mid = enc.query(&g, &store, &frame, &[(2.5, 8.0)]).unwrap().to_vec();
        for k in 0..5 {
            let avg = 0.5 * (dense[(2 * 16 + 7) * 5 + k] + dense[(2 * 16 + 8) * 5 + k]);
            assert!((mid[k] - avg).abs() < 1e-5, "{} vs {avg}", mid[k]);
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let (store, enc) = tiny();
        let g = Graph::inference();
        let a = enc.encode(&g, &store, &ramp(8, 16), 8, 16).unwrap().to_vec();
        let b = enc.encode(&g, &store, &ramp(8, 16), 8, 16).unwrap().to_vec();
        assert_eq!(a, b);
        assert!(matches!(enc.encode(&g, &store, &ramp(8, 16), 8, 15), Err(Error::ShapeMismatch(_))));
        let frame = enc.forward(&g, &store, &ramp(8, 16), 8, 16).unwrap();
        assert!(enc.query(&g, &store, &frame, &[(9.0, 1.0)]).is_err());
    }
}
