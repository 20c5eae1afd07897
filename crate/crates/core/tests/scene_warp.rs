use nalgebra::{Point3, Vector3};
use ndarray::Array2;
use proptest::prelude::*;

use trajforge::camera::{CameraPose, Intrinsics};
use trajforge::scene::{plane_scene, render, render_at, Animation, DepthMap, Pattern, Primitive, SceneSpec, Shape};
use trajforge::trajectory::{make_trajectory, TrajectoryKind, TrajectorySpec};
use trajforge::warp::{warp, warp_detailed, warp_sequence, WarpResult};

const N: usize = 32;

fn cam_at(eye: Point3<f64>) -> CameraPose {
    CameraPose::at(Intrinsics::from_fov(60.0, N, N).unwrap(), eye)
}

// Where the ray through source pixel (col, row) meets the plane z = depth,
// projected into `tar`. Independent of the renderer's depth map.
fn plane_reprojection(src: &CameraPose, tar: &CameraPose, depth: f64, col: usize, row: usize) -> Option<(f64, f64)> {
    let o = src.center();
    let d = src.ray(col as f64, row as f64);
    let s = (depth - o.z) / d.z;
    tar.project(&(o + d * s)).map(|(u, v, _)| (u, v))
}

fn worst_offset(r: &WarpResult, src: &CameraPose, tar: &CameraPose, depth: f64) -> f64 {
    let w = r.source.ncols();
    let mut worst: f64 = 0.0;
    for ((tr, tc), s) in r.source.indexed_iter() {
        if let Some(s) = s {
            let (u, v) = plane_reprojection(src, tar, depth, s % w, s / w).unwrap();
            worst = worst.max((u - tc as f64).abs()).max((v - tr as f64).abs());
        }
    }
    worst
}

#[test]
fn planar_translation_shifts_by_parallax() {
    let depth = 5.0;
    let scene = plane_scene(depth, 2);
    let src = cam_at(Point3::origin());
    let (img, dm) = render(&scene, &src, (N, N)).unwrap();
    let fx = Intrinsics::from_fov(60.0, N, N).unwrap().fx;
    for b in [0.05, 0.1, 0.37] {
        let tar = cam_at(Point3::new(b, 0.0, 0.0));
        let r = warp_detailed(&img, &dm, &src, &tar).unwrap();
        let shift = fx * b / depth;
        let mut checked = 0;
        for ((tr, tc), s) in r.source.indexed_iter() {
            if let Some(s) = s {
                let (sr, sc) = (s / N, s % N);
                assert_eq!(tr, sr);
                assert!((tc as f64 - (sc as f64 - shift)).abs() <= 0.51, "b = {b}");
                checked += 1;
            }
        }
        assert!(checked > N * N / 2);
    }
}

#[test]
fn one_degree_orbit_matches_analytic_rotation_flow() {
    let depth = 5.0;
    let spec = TrajectorySpec {
        path: TrajectoryKind::Orbit {
            target: [0.0, 0.0, depth],
            radius: depth,
            start_deg: 0.0,
            // frame i sits at sweep * i / frame_count
            sweep_deg: 2.0,
            height: 0.0,
        },
        frame_count: 2,
        resolution: [N, N],
        fov_deg: 60.0,
        max_rotation_step_deg: None,
        max_translation_step: None,
    };
    let poses = make_trajectory(&spec).unwrap();
    let step = trajforge::trajectory::rotation_step_deg(&poses[0], &poses[1]);
    assert!((step - 1.0).abs() < 1e-9, "step {step}");
    let (img, dm) = render(&plane_scene(depth, 1), &poses[0], (N, N)).unwrap();
    let r = warp_detailed(&img, &dm, &poses[0], &poses[1]).unwrap();
    assert!(r.mask.count() > N * N * 3 / 4);
    let worst = worst_offset(&r, &poses[0], &poses[1], depth);
    assert!(worst <= 0.51, "worst offset {worst}");
}

#[test]
fn static_camera_sees_only_object_motion() {
    let mut scene = plane_scene(8.0, 1);
    scene.primitives.push(Primitive {
        shape: Shape::Sphere { center: [0.0, 0.0, 5.0], radius: 0.6 },
        texture: vec![Pattern::Constant { value: 3.0 }],
        animation: Some(Animation {
            velocity: [0.4, 0.0, 0.0],
            angular_velocity: [0.0; 3],
        }),
    });
    let cam = cam_at(Point3::origin());
    let sphere_at = |t: f64| {
        let (_, d) = render_at(&scene, &cam, (N, N), t).unwrap();
        d.values().mapv(|z| z < 7.0)
    };
    let frames: Vec<_> = (0..3).map(|t| render_at(&scene, &cam, (N, N), t as f64).unwrap()).collect();
    let video = trajforge::LatentTensor::stack_frames(&frames.iter().map(|f| f.0.clone()).collect::<Vec<_>>()).unwrap();
    let depths: Vec<DepthMap> = frames.iter().map(|f| f.1.clone()).collect();
    let poses = vec![cam; 3];
    let (warped, mask) = warp_sequence(&video, &depths, &poses, &poses).unwrap();
    assert_eq!(warped, video);
    assert!(mask.is_all(true));

    // Between frames, only pixels the sphere covers at either time change.
    for t in 0..2 {
        let (a, b) = (sphere_at(t as f64), sphere_at(t as f64 + 1.0));
        assert_ne!(a, b, "the sphere should move");
        for y in 0..N {
            for x in 0..N {
                if !a[[y, x]] && !b[[y, x]] {
                    assert_eq!(video.get([0, t, y, x]), video.get([0, t + 1, y, x]));
                }
            }
        }
    }
}

fn depth_from(r: &WarpResult) -> DepthMap {
    let valid = r.mask.as_array().slice(ndarray::s![0, 0, .., ..]).to_owned();
    DepthMap::new(r.depth.clone(), valid).unwrap()
}

fn sphere_scene() -> SceneSpec {
    let mut scene = plane_scene(9.0, 1);
    scene.primitives.push(Primitive {
        shape: Shape::Sphere { center: [0.3, -0.2, 5.0], radius: 1.3 },
        texture: vec![Pattern::Checker { period: 0.2, low: -1.0, high: 1.0 }],
        animation: None,
    });
    scene
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn depth_round_trip(ex in -1.0..1.0f64, ey in -1.0..1.0f64, ez in -1.0..1.0f64, tx in -0.5..0.5f64, ty in -0.5..0.5f64) {
        let k = Intrinsics::from_fov(55.0, N, N).unwrap();
        let eye = Point3::new(ex, ey, ez);
        let cam = CameraPose::look_at(k, eye, Point3::new(tx, ty, 5.0), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let (_, dm) = render(&sphere_scene(), &cam, (N, N)).unwrap();
        for row in 0..N {
            for col in 0..N {
                let d = dm.get(row, col).unwrap();
                let (u, v, z) = cam.project(&cam.unproject(col as f64, row as f64, d)).unwrap();
                prop_assert!((u - col as f64).abs() < 1e-9 && (v - row as f64).abs() < 1e-9);
                prop_assert!((z - d).abs() < 1e-9 * d);
            }
        }
    }

    #[test]
    fn warp_composition_agrees_with_direct(
        bx in -0.15..0.15f64, by in -0.15..0.15f64, bz in -0.15..0.15f64,
        cx in -0.15..0.15f64, cy in -0.15..0.15f64, cz in -0.15..0.15f64,
    ) {
        let depth = 5.0;
        let scene = plane_scene(depth, 1);
        let a = cam_at(Point3::origin());
        let b = cam_at(Point3::new(bx, by, bz));
        let c = cam_at(Point3::new(bx + cx, by + cy, bz + cz));
        let (img, dm) = render(&scene, &a, (N, N)).unwrap();
        let ab = warp_detailed(&img, &dm, &a, &b).unwrap();
        let bc = warp_detailed(&ab.image, &depth_from(&ab), &b, &c).unwrap();
        let ac = warp_detailed(&img, &dm, &a, &c).unwrap();
        let mut both = 0;
        for ((tr, tc), s) in bc.source.indexed_iter() {
            let (Some(q), Some(_)) = (s, ac.source[[tr, tc]]) else { continue };
            both += 1;
            // the A pixel that reached C through B
            let s1 = ab.source[[q / N, q % N]].unwrap();
            let (u, v) = plane_reprojection(&a, &c, depth, s1 % N, s1 / N).unwrap();
            // half a pixel of rounding in B, magnified into C, plus half in C
            let tol = 0.5 + 0.5 * (depth - bz) / (depth - bz - cz) + 1e-9;
            prop_assert!((u - tc as f64).abs() <= tol && (v - tr as f64).abs() <= tol, "offset ({}, {}) > {tol}", u - tc as f64, v - tr as f64);
        }
        prop_assert!(both > N * N / 2);
    }

    #[test]
    fn backing_away_never_grows_coverage(dx in -0.6..0.6f64, dy in -0.6..0.6f64) {
        let scene = plane_scene(5.0, 1);
        let src = cam_at(Point3::origin());
        let (img, dm) = render(&scene, &src, (N, N)).unwrap();
        let dir = Vector3::new(dx, dy, -1.0).normalize();
        let mut last = usize::MAX;
        for k in 0..6 {
            let tar = cam_at(Point3::from(dir * (0.5 * k as f64)));
            let (_, mask) = warp(&img, &dm, &src, &tar).unwrap();
            prop_assert!(mask.count() <= last, "coverage grew at step {k}");
            last = mask.count();
        }
    }
}

#[test]
fn depth_map_rejects_bad_values() {
    let v = Array2::from_elem((2, 2), 1.0);
    let mut bad = v.clone();
    bad[[0, 1]] = -1.0;
    assert!(DepthMap::new(bad.clone(), Array2::from_elem((2, 2), true)).is_err());
    let mut valid = Array2::from_elem((2, 2), true);
    valid[[0, 1]] = false;
    let d = DepthMap::new(bad, valid).unwrap();
    assert_eq!(d.get(0, 1), None);
}
