mod common;

use std::f64::consts::PI;

use common::*;
use lgkd::bev_masks::*;
use lgkd::geometry::{CameraRig, LidarMount, Sector};
use proptest::prelude::*;
use rand::Rng;

fn point(x: f64, y: f64, z: f64) -> LidarPoint {
    LidarPoint {
        position: [x, y, z],
        intensity: 0.0,
    }
}

fn flat_rig() -> CameraRig {
    let mut rig = CameraRig::desk_default(176, 64);
    rig.lidar = LidarMount::identity();
    rig
}

fn no_ground() -> HeightFilter {
    HeightFilter {
        remove_ground: false,
        ..HeightFilter::default()
    }
}

#[test]
fn single_point_sets_one_cell() {
    let g = GridSpec::square(4.0, 8).unwrap();
    let cloud = PointCloud {
        points: vec![point(0.5, 0.5, 0.0)],
    };
    let m = voxelize_occupancy(&cloud, &flat_rig(), &g, &no_ground()).unwrap();
    assert_eq!(m.values.iter().sum::<f64>(), 1.0);
    assert_eq!(m.get(4, 4), 1.0);
}

#[test]
fn out_of_range_point_leaves_grid_empty() {
    let g = GridSpec::square(51.2, 128).unwrap();
    let cloud = PointCloud {
        points: vec![point(100.0, 0.0, 0.0)],
    };
    let m = voxelize_occupancy(&cloud, &flat_rig(), &g, &no_ground()).unwrap();
    assert!(m.values.iter().all(|&v| v == 0.0));
}

#[test]
fn voxelization_matches_floor_index_oracle() {
    let mut r = rng(21);
    for trial in 0..100 {
        let rig = random_rig(&mut r, 1);
        let g = GridSpec::new(-20.0, 25.0, -18.0, 22.0, 1 + trial % 23, 1 + trial % 31).unwrap();
        let cloud = random_cloud(&mut r, if trial == 0 { 10_000 } else { 500 }, 30.0);
        let f = no_ground();
        let m = voxelize_occupancy(&cloud, &rig, &g, &f).unwrap();
        assert_eq!(m.values, voxel_oracle(&cloud, &rig, &g, f.z_min, f.z_max));
    }
}

#[test]
fn ground_removal_drops_low_returns() {
    let g = GridSpec::square(4.0, 8).unwrap();
    let cloud = PointCloud {
        points: vec![point(0.5, 0.5, 0.0), point(-2.5, -2.5, 1.0)],
    };
    let f = HeightFilter {
        remove_ground: true,
        ..HeightFilter::default()
    };
    let m = voxelize_occupancy(&cloud, &flat_rig(), &g, &f).unwrap();
    assert_eq!(m.get(4, 4), 0.0);
    assert_eq!(m.get(1, 1), 1.0);
}

#[test]
fn smoothing_zero_mask_stays_zero() {
    let g = GridSpec::square(8.0, 16).unwrap();
    let s = gaussian_smooth(&BevGrid::zeros(g), 1.7).unwrap();
    assert!(s.values.iter().all(|&v| v == 0.0));
}

#[test]
fn single_cell_smoothing_peaks_and_decays() {
    let g = GridSpec::square(8.0, 17).unwrap();
    let mut m = BevGrid::zeros(g);
    m.values[8 * 17 + 8] = 1.0;
    let s = gaussian_smooth(&m, 1.0).unwrap();
    assert_eq!(s.get(8, 8), 1.0);
    for d in 1..=3 {
        assert!(s.get(8, 8 + d) < s.get(8, 8 + d - 1));
        assert!(s.get(8 + d, 8) < s.get(8 + d - 1, 8));
    }
    assert_eq!(s.get(8, 12), 0.0);
}

#[test]
fn two_cells_match_dense_convolution() {
    let g = GridSpec::square(8.0, 12).unwrap();
    let mut m = BevGrid::zeros(g);
    m.values[5 * 12 + 3] = 1.0;
    m.values[5 * 12 + 6] = 1.0;
    let s = gaussian_smooth(&m, 1.0).unwrap();
    let o = smooth_oracle(&m.values, 12, 12, 1.0);
    for (a, b) in s.values.iter().zip(&o) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn random_masks_match_dense_convolution() {
    let mut r = rng(22);
    for _ in 0..100 {
        let (rows, cols) = (r.gen_range(1..20), r.gen_range(1..20));
        let g = GridSpec::new(-1.0, 1.0, -1.0, 1.0, rows, cols).unwrap();
        let mut m = BevGrid::zeros(g);
        for v in &mut m.values {
            *v = if r.gen_bool(0.15) { 1.0 } else { 0.0 };
        }
        let sigma = r.gen_range(0.3..3.0);
        let s = gaussian_smooth(&m, sigma).unwrap();
        let o = smooth_oracle(&m.values, rows, cols, sigma);
        for (a, b) in s.values.iter().zip(&o) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn invalid_sigma_is_rejected() {
    let g = GridSpec::square(8.0, 4).unwrap();
    assert!(gaussian_smooth(&BevGrid::zeros(g), 0.0).is_err());
    assert!(gaussian_smooth(&BevGrid::zeros(g), f64::NAN).is_err());
}

#[test]
fn full_sector_keeps_input() {
    let g = GridSpec::square(8.0, 9).unwrap();
    let mut r = rng(23);
    let mut m = BevGrid::zeros(g);
    m.values = uniform(&mut r, 81, 0.0, 1.0);
    let out = split_by_sectors(&m, &[Sector::full()]);
    assert_eq!(out.len(), 1);
    assert_eq!(out[0], m);
}

#[test]
fn half_plane_sectors_give_indicators() {
    let g = GridSpec::square(8.0, 8).unwrap();
    let m = BevGrid::filled(g, 1.0);
    let out = split_by_sectors(
        &m,
        &[
            Sector {
                min: -PI / 2.0,
                max: PI / 2.0,
            },
            Sector {
                min: PI / 2.0,
                max: 1.5 * PI,
            },
        ],
    );
    for i in 0..8 {
        for j in 0..8 {
            let (x, _) = g.cell_center(i, j);
            assert_eq!(out[0].get(i, j), if x > 0.0 { 1.0 } else { 0.0 });
            assert_eq!(out[1].get(i, j), if x < 0.0 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn desk_view_masks_match_azimuth_oracle() {
    let rig = CameraRig::desk_default(176, 64);
    let g = GridSpec::square(32.0, 64).unwrap();
    let mut r = rng(24);
    for _ in 0..100 {
        let mut m = BevGrid::zeros(g);
        m.values = uniform(&mut r, g.num_cells(), 0.0, 1.0);
        let views = split_view_masks(&m, &rig).unwrap();
        assert_eq!(views.len(), 6);
        for (k, v) in views.iter().enumerate() {
            let s = lgkd::geometry::camera_fov_sector(&rig, k).unwrap();
            for i in 0..64 {
                for j in 0..64 {
                    let (x, y) = g.cell_center(i, j);
                    let want = if in_interval(y.atan2(x), s.min, s.max) {
                        m.get(i, j)
                    } else {
                        0.0
                    };
                    assert_eq!(v.get(i, j), want);
                }
            }
        }
        for idx in 0..g.num_cells() {
            let max = views.iter().map(|v| v.values[idx]).fold(0.0, f64::max);
            assert_eq!(max, m.values[idx]);
        }
    }
}

#[test]
fn pcbv_round_trip_and_corruption() {
    let mut r = rng(25);
    let mut cloud = random_cloud(&mut r, 50, 10.0);
    for p in &mut cloud.points {
        p.position = p.position.map(|v| v as f32 as f64);
        p.intensity = p.intensity as f32 as f64;
    }
    let bytes = cloud.to_pcbv_bytes();
    let back = PointCloud::from_pcbv_bytes(&bytes, std::path::Path::new("x")).unwrap();
    assert_eq!(back, cloud);
    assert!(PointCloud::from_pcbv_bytes(&bytes[..bytes.len() - 3], std::path::Path::new("x")).is_err());
}

proptest! {
    #[test]
    fn voxelization_ignores_order_and_duplicates(seed in 0u64..1000) {
        let mut r = rng(seed);
        let g = GridSpec::square(10.0, 16).unwrap();
        let cloud = random_cloud(&mut r, 60, 12.0);
        let rig = flat_rig();
        let a = voxelize_occupancy(&cloud, &rig, &g, &no_ground()).unwrap();
        let mut shuffled = cloud.clone();
        shuffled.points.reverse();
        shuffled.points.extend(cloud.points.iter().take(20).cloned());
        let b = voxelize_occupancy(&shuffled, &rig, &g, &no_ground()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn isolated_cell_keeps_argmax(row in 0usize..12, col in 0usize..12, sigma in 0.3f64..4.0) {
        let g = GridSpec::square(6.0, 12).unwrap();
        let mut m = BevGrid::zeros(g);
        m.values[row * 12 + col] = 1.0;
        let s = gaussian_smooth(&m, sigma).unwrap();
        prop_assert_eq!(s.get(row, col), 1.0);
        prop_assert!(s.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn view_masks_are_bounded_by_smoothed_mask(seed in 0u64..1000) {
        let mut r = rng(seed);
        let rig = CameraRig::desk_default(176, 64);
        let g = GridSpec::square(16.0, 20).unwrap();
        let cloud = random_cloud(&mut r, 40, 16.0);
        let occ = voxelize_occupancy(&cloud, &rig, &g, &no_ground()).unwrap();
        let s = gaussian_smooth(&occ, 1.5).unwrap();
        for v in split_view_masks(&s, &rig).unwrap() {
            for (a, b) in v.values.iter().zip(&s.values) {
                prop_assert!(0.0 <= *a && a <= b && *b <= 1.0);
            }
        }
    }
}
