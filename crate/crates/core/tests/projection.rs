use lidarfield::lidar_model::*;
use proptest::prelude::*;

fn sensor() -> SensorIntrinsics {
    SensorIntrinsics::new(32, 256, 3.0, -25.0).unwrap()
}

/// Point at depth `d` along pitch/yaw given in degrees.
fn point(pitch: f64, yaw: f64, d: f64) -> [f64; 3] {
    let v = angles_to_direction(pitch.to_radians(), yaw.to_radians());
    [v[0] * d, v[1] * d, v[2] * d]
}

fn cloud_strategy() -> impl Strategy<Value = Vec<LidarPoint>> {
    prop::collection::vec((-25.0f64..3.0, -180.0f64..180.0, 1.0f64..80.0, 0.0f32..1.0, 0u32..20), 1..300)
        .prop_map(|v| v.into_iter().map(|(p, y, d, i, l)| LidarPoint::new(point(p, y, d), i, l)).collect())
}

proptest! {
    #[test]
    fn continuous_round_trip(pitch in -24.99f64..2.99, yaw in -179.9f64..179.9, d in 1.0f64..80.0) {
        let i = sensor();
        let p = point(pitch, yaw, d);
        let (h, w, depth) = i.point_to_pixel(p).unwrap();
        let (a, b) = i.pixel_to_angles(h, w);
        let q = angles_to_direction(a, b).map(|v| v * depth);
        for k in 0..3 {
            prop_assert!((p[k] - q[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn projection_ignores_input_order(cloud in cloud_strategy(), seed in any::<u64>()) {
        let i = sensor();
        let (a, sa) = project_cloud(&cloud, &i);
        let mut shuffled = cloud.clone();
        // Deterministic Fisher-Yates from the seed.
        let mut s = seed | 1;
        for k in (1..shuffled.len()).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            shuffled.swap(k, (s % (k as u64 + 1)) as usize);
        }
        let (b, sb) = project_cloud(&shuffled, &i);
        prop_assert_eq!(a, b);
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn unprojected_points_stay_within_one_pixel(cloud in cloud_strategy()) {
        let i = sensor();
        let (img, stats) = project_cloud(&cloud, &i);
        prop_assert_eq!(stats.kept + stats.occluded + stats.out_of_fov, cloud.len());
        let step = (i.row_step_rad().powi(2) + (2.0 * std::f64::consts::PI / i.width as f64).powi(2)).sqrt();
        for u in unproject(&img, &i) {
            let d = u.depth();
            let near = cloud.iter().any(|p| {
                let dd = (0..3).map(|k| (p.xyz[k] - u.xyz[k]).powi(2)).sum::<f64>().sqrt();
                dd <= d * step + 1e-4
            });
            prop_assert!(near, "{:?} has no input point within one pixel", u.xyz);
        }
    }

    #[test]
    fn range_image_container_round_trip(cloud in cloud_strategy()) {
        let (img, _) = project_cloud(&cloud, &sensor());
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        prop_assert_eq!(RangeImage::read_from(buf.as_slice()).unwrap(), img);
    }
}

#[test]
fn points_outside_the_vertical_fov_are_counted_not_clamped() {
    let i = sensor();
    let pts = [
        LidarPoint::new(point(10.0, 0.0, 5.0), 0.0, 1),
        LidarPoint::new(point(-40.0, 0.0, 5.0), 0.0, 1),
        LidarPoint::new([0.0; 3], 0.0, 1),
        LidarPoint::new(point(0.0, 0.0, 5.0), 0.0, 1),
    ];
    let (img, stats) = project_cloud(&pts, &i);
    assert_eq!(stats, ProjectionStats { kept: 1, occluded: 0, out_of_fov: 3 });
    assert_eq!(img.returns(), 1);
}

#[test]
fn pixel_centers_project_back_to_their_pixel() {
    let i = sensor();
    for r in 0..i.height {
        for c in 0..i.width {
            let d = i.pixel_direction(r, c);
            let (h, w, _) = i.point_to_pixel(d).unwrap();
            assert!((h - (r as f64 + 0.5)).abs() < 1e-9 && (w - (c as f64 + 0.5)).abs() < 1e-9);
        }
    }
}
