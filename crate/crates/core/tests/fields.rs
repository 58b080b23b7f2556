use lidarfield::feature_fields::*;
use lidarfield_autodiff::{Graph, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn planar_cfg() -> PlanarConfig {
    PlanarConfig {
        resolutions: vec![4, 7],
        time_resolution: 5,
        channels: 3,
        spatial_init: [-1.0, 1.0],
        temporal_init: [-1.0, 1.0],
    }
}

fn grid_cfg(log2_table_size: u32) -> HashGridConfig {
    HashGridConfig {
        levels: 3,
        min_resolution: 3,
        max_resolution: 9,
        channels: 2,
        log2_table_size,
        time_resolution: 4,
        init_range: [-1.0, 1.0],
    }
}

fn planar() -> (PlanarField, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let f = PlanarField::register(&mut store, &planar_cfg(), "p", 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (f, store.cast())
}

fn grid(log2: u32) -> (HashGridField, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let f = HashGridField::register(&mut store, &grid_cfg(log2), "g", 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    (f, store.cast())
}

fn sample_planar(f: &PlanarField, s: &ParamStore<f64>, q: &[[f64; 4]]) -> Vec<f64> {
    f.sample(&Graph::inference(), s, q).unwrap().to_vec()
}

fn sample_grid(f: &HashGridField, s: &ParamStore<f64>, q: &[[f64; 4]]) -> Vec<f64> {
    f.sample(&Graph::inference(), s, q).unwrap().to_vec()
}

/// Linear weights of the lattice nodes along one axis, computed from scratch.
fn axis_weights(q: f64, n: usize) -> Vec<(usize, f64)> {
    let x = q * (n - 1) as f64;
    let mut out = Vec::new();
    for i in 0..n {
        let w = 1.0 - (x - i as f64).abs();
        if w > 0.0 {
            out.push((i, w));
        }
    }
    out
}

#[test]
fn planar_matches_bilinear_product_oracle() {
    let (f, s) = planar();
    let cfg = planar_cfg();
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q: Vec<[f64; 4]> = (0..50).map(|_| [0, 1, 2, 3].map(|_| rng.gen::<f64>())).collect();
    let got = sample_planar(&f, &s, &q);
    let dim = f.output_dim();
    for (n, p) in q.iter().enumerate() {
        for (l, &m) in cfg.resolutions.iter().enumerate() {
            let ids = f.level_params(l);
            let mut prods = [vec![1.0; c], vec![1.0; c]];
            for (k, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let (na, nb) = (if a == 3 { 5 } else { m }, if b == 3 { 5 } else { m });
                let table = s.value(ids[k]).data();
                let mut v = vec![0.0; c];
                for (ia, wa) in axis_weights(p[a], na) {
                    for (ib, wb) in axis_weights(p[b], nb) {
                        for ch in 0..c {
                            v[ch] += wa * wb * table[(ia * nb + ib) * c + ch];
                        }
                    }
                }
                for ch in 0..c {
                    prods[k / 3][ch] *= v[ch];
                }
            }
            for half in 0..2 {
                for ch in 0..c {
                    let g = got[n * dim + l * 2 * c + half * c + ch];
                    assert!((g - prods[half][ch]).abs() < 1e-12, "{g} vs {}", prods[half][ch]);
                }
            }
        }
    }
}

#[test]
fn dense_grid_matches_trilinear_oracle() {
    let (f, s) = grid(16);
    let cfg = grid_cfg(16);
    let res = cfg.level_resolutions();
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q: Vec<[f64; 4]> = (0..50).map(|_| [0, 1, 2, 3].map(|_| rng.gen::<f64>())).collect();
    let got = sample_grid(&f, &s, &q);
    let dim = f.output_dim();
    for (n, p) in q.iter().enumerate() {
        for l in 0..cfg.levels {
            for (v, vol) in f.volumes(l).iter().enumerate() {
                assert!(vol.dense);
                let nodes = VOLUME_AXES[v].map(|a| if a == 3 { cfg.time_resolution } else { res[l] });
                let table = s.value(vol.param).data();
                let mut want = vec![0.0; c];
                for (i, wi) in axis_weights(p[VOLUME_AXES[v][0]], nodes[0]) {
                    for (j, wj) in axis_weights(p[VOLUME_AXES[v][1]], nodes[1]) {
                        for (k, wk) in axis_weights(p[VOLUME_AXES[v][2]], nodes[2]) {
                            let row = (i * nodes[1] + j) * nodes[2] + k;
                            for ch in 0..c {
                                want[ch] += wi * wj * wk * table[row * c + ch];
                            }
                        }
                    }
                }
                for ch in 0..c {
                    let g = got[n * dim + (l * 4 + v) * c + ch];
                    assert!((g - want[ch]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn hash_collisions_match_uniform_hashing() {
    // 64^3 nodes into 2^12 rows: an ideal uniform hash occupies
    // T (1 - (1 - 1/T)^n) distinct rows.
    let table = 1u32 << 12;
    let n = 64usize;
    let mut used = vec![false; table as usize];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                used[hash_index(&[i as u32, j as u32, k as u32], &[0, 1, 2], table) as usize] = true;
            }
        }
    }
    let distinct = used.iter().filter(|&&u| u).count() as f64;
    let expect = table as f64 * (1.0 - (1.0 - 1.0 / table as f64).powf((n * n * n) as f64));
    assert!(distinct >= 0.95 * expect, "{distinct} of expected {expect}");

    // Few nodes, big table: rare collisions.
    let mut rows: Vec<u32> = (0..1000u32).map(|i| hash_index(&[i % 10, (i / 10) % 10, i / 100], &[0, 1, 3], 1 << 19)).collect();
    rows.sort();
    rows.dedup();
    assert!(rows.len() >= 990, "{} distinct rows", rows.len());
}

#[test]
fn zero_dynamic_parameters_make_features_time_independent() {
    let (pf, mut ps) = planar();
    for l in 0..2 {
        for &id in &pf.level_params(l)[3..] {
            ps.value_mut(id).data_mut().fill(0.0);
        }
    }
    let (gf, mut gs) = grid(10);
    for l in 0..gf.num_levels() {
        for vol in &gf.volumes(l)[1..] {
            gs.value_mut(vol.param).data_mut().fill(0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let xyz = [0, 1, 2].map(|_| rng.gen::<f64>());
        let q: Vec<[f64; 4]> = (0..10).map(|_| [xyz[0], xyz[1], xyz[2], rng.gen()]).collect();
        let a = sample_planar(&pf, &ps, &q);
        let b = sample_grid(&gf, &gs, &q);
        let (da, db) = (pf.output_dim(), gf.output_dim());
        for r in 1..10 {
            assert_eq!(a[r * da..(r + 1) * da], a[..da]);
            assert_eq!(b[r * db..(r + 1) * db], b[..db]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn planar_perturbation_is_local(
        level in 0usize..2, plane in 0usize..6, pick in any::<prop::sample::Index>(),
        q in prop::collection::vec(prop::array::uniform4(0.0f64..=1.0), 1..30),
    ) {
        let (f, s) = planar();
        let cfg = planar_cfg();
        let id = f.level_params(level)[plane];
        let (a, b) = PLANE_AXES[plane];
        let m = cfg.resolutions[level];
        let (na, nb) = (if a == 3 { 5 } else { m }, if b == 3 { 5 } else { m });
        let node = pick.index(na * nb);
        let (ia, ib) = (node / nb, node % nb);
        let mut s2 = s.clone();
        for ch in 0..cfg.channels {
            s2.value_mut(id).data_mut()[node * cfg.channels + ch] += 0.5;
        }
        let before = sample_planar(&f, &s, &q);
        let after = sample_planar(&f, &s2, &q);
        let dim = f.output_dim();
        for (n, p) in q.iter().enumerate() {
            let touches = axis_weights(p[a], na).iter().any(|&(i, _)| i == ia)
                && axis_weights(p[b], nb).iter().any(|&(j, _)| j == ib);
            if !touches {
                prop_assert_eq!(&before[n * dim..(n + 1) * dim], &after[n * dim..(n + 1) * dim]);
            }
        }
    }

    #[test]
    fn grid_perturbation_is_local(
        level in 0usize..3, vol in 0usize..4, pick in any::<prop::sample::Index>(),
        q in prop::collection::vec(prop::array::uniform4(0.0f64..=1.0), 1..30),
    ) {
        let (f, s) = grid(16);
        let v = &f.volumes(level)[vol];
        let row = pick.index(v.rows);
        let node = [row / (v.nodes[1] * v.nodes[2]), (row / v.nodes[2]) % v.nodes[1], row % v.nodes[2]];
        let mut s2 = s.clone();
        s2.value_mut(v.param).data_mut()[row * 2] += 0.5;
        let before = sample_grid(&f, &s, &q);
        let after = sample_grid(&f, &s2, &q);
        let dim = f.output_dim();
        for (n, p) in q.iter().enumerate() {
            let touches = (0..3).all(|k| axis_weights(p[v.axes[k]], v.nodes[k]).iter().any(|&(i, _)| i == node[k]));
            if !touches {
                prop_assert_eq!(&before[n * dim..(n + 1) * dim], &after[n * dim..(n + 1) * dim]);
            }
        }
    }

    #[test]
    fn sampling_is_continuous_across_cells(
        axis in 0usize..4, cell in 1usize..4, rest in prop::array::uniform4(0.0f64..=1.0),
    ) {
        let (pf, ps) = planar();
        let (gf, gs) = grid(16);
        // Multiples of 1/6 are cell boundaries of the 7-node planar level.
        let x = cell as f64 / 6.0;
        let mut lo = rest;
        let mut hi = rest;
        lo[axis] = x - 0.5e-7;
        hi[axis] = x + 0.5e-7;
        let jump = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(jump(sample_planar(&pf, &ps, &[lo]), sample_planar(&pf, &ps, &[hi])) < 1e-5);
        prop_assert!(jump(sample_grid(&gf, &gs, &[lo]), sample_grid(&gf, &gs, &[hi])) < 1e-5);
    }
}
