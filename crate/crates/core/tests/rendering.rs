mod common;

use common::{tiny_intrinsics, tiny_model, unit_bounds};
use lidarfield::neural_field::*;
use lidarfield_autodiff::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rays(n: usize, seed: u64) -> RayBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays = RayBundle::default();
    for i in 0..n {
        let o = [0, 1, 2].map(|_| rng.gen_range(-3.0..3.0));
        let v = [0, 1, 2].map(|_| rng.gen_range(-1.0f64..1.0));
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
        rays.push(o, v.map(|x| x / len), rng.gen(), (i % 8, i % 16), 0);
    }
    rays
}

#[test]
fn weight_sums_stay_in_unit_interval_on_random_rays() {
    for variant in [Variant::GridOnly, Variant::SemanticField] {
        let mut cfg = tiny_model(variant);
        // Strong density so many rays saturate.
        cfg.heads.density_bias = 1.0;
        let (model, store) = LidarField::new(&cfg, tiny_intrinsics(), unit_bounds()).unwrap();
        let rays = random_rays(2000, 1);
        let out = model.render_plain(&store, &rays, &[]).unwrap();
        for r in 0..rays.len() {
            for s in [out.weight_sum_geo[r], out.weight_sum_sem[r]] {
                assert!((0.0..=1.0 + 1e-6).contains(&(s as f64)), "ray {r}: {s}");
            }
            assert!(out.depth[r] >= 0.0 && out.depth[r] <= cfg.render.far as f32 + 1e-3);
            let p: f32 = out.semantics[r * 20..(r + 1) * 20].iter().sum();
            assert!((p - 1.0).abs() < 1e-5);
        }
    }
}

proptest! {
    #[test]
    fn transmittance_never_increases(
        sigma in prop::collection::vec(0.0f64..50.0, 1..40),
        gaps in prop::collection::vec(0.01f64..3.0, 40),
    ) {
        let n = sigma.len();
        let mut d = Vec::with_capacity(n);
        let mut acc = 0.5;
        for g in &gaps[..n] {
            acc += g;
            d.push(acc);
        }
        let w = composite_weights(&sigma, &d, Opacity::Standard);
        let mut transmittance = 1.0f64;
        for &wi in &w {
            prop_assert!(wi >= 0.0);
            let next = transmittance - wi;
            prop_assert!(next <= transmittance);
            prop_assert!(next >= -1e-12);
            transmittance = next;
        }
    }

    #[test]
    fn denser_first_sample_never_lowers_its_weight(
        sigma in prop::collection::vec(0.0f64..10.0, 2..20),
        bump in 0.0f64..10.0,
    ) {
        let d: Vec<f64> = (0..sigma.len()).map(|i| 1.0 + 0.5 * i as f64).collect();
        for op in [Opacity::Standard, Opacity::Printed] {
            let a = composite_weights(&sigma, &d, op)[0];
            let mut s2 = sigma.clone();
            s2[0] += bump;
            prop_assert!(composite_weights(&s2, &d, op)[0] >= a);
        }
    }
}

#[test]
fn class_logits_ignore_the_view_direction() {
    for variant in [Variant::GridOnly, Variant::SemanticField, Variant::Full] {
        let cfg = tiny_model(variant);
        let (model, store) = LidarField::new(&cfg, tiny_intrinsics(), unit_bounds()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = vec![[0.3, 0.6, 0.2, 0.4]];
        let local = Tensor::new(vec![1, 3], vec![0.2f32, -0.4, 0.9]).unwrap();
        let mut seen: Option<(Vec<f32>, Vec<f32>)> = None;
        for _ in 0..10 {
            let v = [0, 1, 2].map(|_| rng.gen_range(-1.0f64..1.0));
            let g = Graph::<f32>::inference();
            let view = g.constant(model.view_embedding(&[v]));
            let l = cfg.variant.uses_encoder().then(|| g.constant(local.clone()));
            let h = model.query_heads(&g, &store, &q, view, l, 1).unwrap();
            let sem_sigma = h.sigma_sem.map(|s| s.to_vec()).unwrap_or_default();
            let logits = h.logits.to_vec();
            let cur = (logits, sem_sigma);
            if let Some(prev) = &seen {
                assert_eq!(prev.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), cur.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
                assert_eq!(prev.1, cur.1);
            }
            seen = Some(cur);
        }
    }
}

#[test]
fn intensity_and_raydrop_do_depend_on_view() {
    let cfg = tiny_model(Variant::SemanticField);
    let (model, store) = LidarField::new(&cfg, tiny_intrinsics(), unit_bounds()).unwrap();
    let q = vec![[0.3, 0.6, 0.2, 0.4]];
    let eval = |v: [f64; 3]| {
        let g = Graph::<f32>::inference();
        let view = g.constant(model.view_embedding(&[v]));
        let h = model.query_heads(&g, &store, &q, view, None, 1).unwrap();
        (h.intensity.to_vec(), h.raydrop.to_vec())
    };
    assert_ne!(eval([1.0, 0.0, 0.0]), eval([0.0, 0.0, 1.0]));
}

#[test]
fn full_model_requires_local_features() {
    let cfg = tiny_model(Variant::Full);
    let (model, store) = LidarField::new(&cfg, tiny_intrinsics(), unit_bounds()).unwrap();
    let rays = random_rays(3, 2);
    assert!(matches!(model.render_plain(&store, &rays, &[]), Err(lidarfield::Error::MisalignedBatch(_))));
}

#[test]
fn unmasked_render_fills_every_pixel() {
    let cfg = tiny_model(Variant::SemanticField);
    let intr = tiny_intrinsics();
    let (model, store) = LidarField::new(&cfg, intr, unit_bounds()).unwrap();
    let pose = lidarfield::dataset_io::IDENTITY;
    let full = model.render_image(&store, &pose, 0.5, None, false).unwrap();
    assert_eq!(full.image.returns(), intr.num_pixels());
    let masked = model.render_image(&store, &pose, 0.5, None, true).unwrap();
    for i in 0..intr.num_pixels() {
        let dropped = full.raw.raydrop[i] > cfg.render.raydrop_threshold as f32;
        assert_eq!(masked.image.mask[i], !dropped);
    }
}
