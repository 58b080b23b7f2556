#![allow(dead_code)]

use lidarfield::dataset_io::{synth_scene, LearningMap, Scene, SynthSceneConfig};
use lidarfield::feature_fields::{HashGridConfig, PlanarConfig, SceneBounds};
use lidarfield::lidar_model::SensorIntrinsics;
use lidarfield::metrics::{squared_distance, Chamfer, Point};
use lidarfield::neural_field::{HeadsConfig, ModelConfig, RenderConfig, Variant};
use lidarfield::semantic_encoder::EncoderConfig;

/// A model small enough for exhaustive tests.
pub fn tiny_model(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        num_classes: 20,
        planar: PlanarConfig {
            resolutions: vec![4, 6],
            time_resolution: 3,
            channels: 2,
            ..PlanarConfig::default()
        },
        grid: HashGridConfig {
            levels: 2,
            min_resolution: 4,
            max_resolution: 8,
            channels: 2,
            log2_table_size: 8,
            time_resolution: 3,
            init_range: [-0.1, 0.1],
        },
        encoder: EncoderConfig {
            stem_convs: 1,
            stage_widths: vec![2, 3],
            blocks_per_stage: 1,
            out_channels: 3,
            depth_scale: 80.0,
        },
        heads: HeadsConfig {
            hidden: 8,
            geo_features: 4,
            view_levels: 2,
            density_bias: 0.0,
        },
        render: RenderConfig {
            near: 0.5,
            far: 20.0,
            samples: 16,
            chunk_rays: 64,
            ..RenderConfig::default()
        },
        bounds_expansion: 0.05,
        seed: 3,
    }
}

pub fn unit_bounds() -> SceneBounds {
    SceneBounds::new([-10.0; 3], [10.0; 3], 0.0, 1.0).unwrap()
}

pub fn tiny_intrinsics() -> SensorIntrinsics {
    SensorIntrinsics::new(8, 16, 3.0, -25.0).unwrap()
}

/// The default synthetic street, optionally at a reduced resolution.
pub fn street(height: usize, width: usize) -> Scene {
    let lm = LearningMap::semantic_kitti();
    let mut cfg = SynthSceneConfig::default();
    cfg.intrinsics.height = height;
    cfg.intrinsics.width = width;
    let scans = synth_scene(&cfg, &lm).unwrap();
    Scene::from_scans(scans, cfg.intrinsics, &lm, 0.05).unwrap()
}

// Independent metric oracles.

pub fn brute_nearest(from: &[Point], to: &[Point]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| squared_distance(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn brute_chamfer(a: &[Point], b: &[Point]) -> Chamfer {
    let ab: f64 = brute_nearest(a, b).iter().sum();
    let ba: f64 = brute_nearest(b, a).iter().sum();
    Chamfer {
        sum: ab + ba,
        mean: ab / a.len() as f64 + ba / b.len() as f64,
    }
}

pub fn brute_fscore(a: &[Point], b: &[Point], tau: f64) -> f64 {
    let p = brute_nearest(a, b).iter().filter(|&&d| d < tau * tau).count() as f64 / a.len() as f64;
    let r = brute_nearest(b, a).iter().filter(|&&d| d < tau * tau).count() as f64 / b.len() as f64;
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Direct windowed SSIM: explicit 2-d Gaussian weights, one window at a time.
pub fn reference_ssim(x: &[f64], y: &[f64], h: usize, w: usize, win: usize) -> f64 {
    let c = (win as f64 - 1.0) / 2.0;
    let mut wts = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            wts[i * win + j] = (-r2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - win {
        for q in 0..=w - win {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = (r + i) * w + q + j;
                    mx += wts[i * win + j] * x[k];
                    my += wts[i * win + j] * y[k];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = (r + i) * w + q + j;
                    let wt = wts[i * win + j];
                    vx += wt * (x[k] - mx).powi(2);
                    vy += wt * (y[k] - my).powi(2);
                    cov += wt * (x[k] - mx) * (y[k] - my);
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

