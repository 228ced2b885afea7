//! Straight-line reference computations checked against the library.

use graphlift::keypoints::{finger_joint, KeypointSubset, JointType, NUM_NODES};
use graphlift::metrics::{auc, pcp, pcp_curve, per_joint_errors, sample_errors, PcpCurve};
use graphlift::pipeline::{FeatureProvider, Pipeline, PipelineConfig, FEATURE_DIM};
use graphlift::synth::{
    forward_kinematics, generate_dataset, obb_from_points, project, Camera, FingerPose, GraspSpec,
    HandPoseParams, DEFAULT_BONE_LENGTHS, FINGER_BASE_SPREAD, FINGER_BASE_TILT,
};
use graphlift::unet::{build_unet, UNetConfig};
use graphlift::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| (0..t.cols()).map(|j| t.get(i, j)).collect()).collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            out[i][j] = (0..k).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

fn relu(a: Mat) -> Mat {
    a.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()
}

fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

fn param(store: &ParamStore, name: &str) -> Mat {
    to_mat(store.get(store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))))
}

fn conv(store: &ParamStore, name: &str, x: &Mat, relu_out: bool) -> Mat {
    let a = param(store, &format!("{name}.adj"));
    let w = param(store, &format!("{name}.weight"));
    let y = mul(&mul(&a, x), &w);
    if relu_out {
        relu(y)
    } else {
        y
    }
}

fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - t.get(i, j)).abs());
        }
    }
    m
}

fn random_coords(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::uniform(NUM_NODES, 2, 250.0, &mut rng);
    t.data_mut().iter_mut().for_each(|v| *v += 320.0);
    t
}

#[test]
fn unet_forward_matches_layer_composition() {
    let cfg = UNetConfig {
        feature_schedule: vec![5, 6, 7, 8],
        ..UNetConfig::default()
    };
    let mut model = build_unet(&cfg, 21).unwrap();
    // Perturb every kernel so off-diagonal terms take part.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for id in model.store.ids().collect::<Vec<_>>() {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let x = random_coords(23);
    let got = model.predict(&x).unwrap();

    let s = &model.store;
    let mut h: Mat = to_mat(&x)
        .into_iter()
        .map(|r| vec![r[0] * cfg.input_scale, r[1] * cfg.input_scale, 1.0])
        .collect();
    let mut skips = Vec::new();
    for i in 0..3 {
        h = conv(s, &format!("unet.enc{i}"), &h, true);
        skips.push(h.clone());
        h = mul(&param(s, &format!("unet.pool{i}.matrix")), &h);
    }
    h = conv(s, "unet.bottleneck", &h, true);
    for i in (0..3).rev() {
        h = mul(&param(s, &format!("unet.unpool{i}.matrix")), &h);
        h = hcat(&h, &skips[i]);
        h = conv(s, &format!("unet.dec{i}"), &h, true);
    }
    let out: Mat = conv(s, "unet.head", &h, false)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * cfg.output_scale).collect())
        .collect();
    assert!(max_diff(&out, &got) < 1e-10, "{}", max_diff(&out, &got));
}

fn small_pipeline() -> Pipeline {
    Pipeline::new(
        PipelineConfig {
            unet: UNetConfig {
                feature_schedule: vec![4, 5, 6, 7],
                ..UNetConfig::default()
            },
            raster: 8,
            refine_widths: [6, 4],
            ..PipelineConfig::default()
        },
        31,
    )
    .unwrap()
}

#[test]
fn refinement_and_prediction_match_composition() {
    let mut p = small_pipeline();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for id in p.store.with_prefix("refine") {
        for v in p.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let rec = generate_dataset(1, 33, &GraspSpec::default()).unwrap().remove(0);
    let (refined, pred3d) = p.predict(&rec).unwrap();

    let (features, init2d) = {
        let mut t = Tape::new(&p.store);
        let (f, i) = p.encoder.encode(&mut t, &[&rec]).unwrap();
        (t.value(f).clone(), t.value(i).clone())
    };
    assert_eq!(features.cols(), FEATURE_DIM);
    let scale = p.config.coord_scale;
    let nodes: Mat = (0..NUM_NODES)
        .map(|k| {
            let mut row = features.data().to_vec();
            row.extend([init2d.get(k, 0) / scale, init2d.get(k, 1) / scale]);
            row
        })
        .collect();
    assert_eq!(nodes[0].len(), 2050);
    let h = conv(&p.store, "refine.gc0", &nodes, true);
    let h = conv(&p.store, "refine.gc1", &h, true);
    let out: Mat = conv(&p.store, "refine.gc2", &h, false)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * scale).collect())
        .collect();
    assert!(max_diff(&out, &refined) < 1e-10);

    let lifted = graphlift::unet::Model {
        store: p.store.clone(),
        net: p.unet.clone(),
    }
    .predict(&refined)
    .unwrap();
    assert_eq!(lifted.data(), pred3d.data());
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, dim: usize, spread: f64) -> (Vec<Tensor>, Vec<Tensor>) {
    let gts: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(NUM_NODES, dim, 100.0, rng)).collect();
    let preds = gts
        .iter()
        .map(|g| {
            let s = rng.random_range(0.0..spread);
            let noise = Tensor::uniform(NUM_NODES, dim, s, rng);
            let mut p = g.clone();
            p.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
            p
        })
        .collect();
    (preds, gts)
}

fn mean_distance(p: &Tensor, g: &Tensor, nodes: std::ops::Range<usize>) -> f64 {
    let n = nodes.len() as f64;
    nodes
        .map(|k| {
            (0..p.cols())
                .map(|c| (p.get(k, c) - g.get(k, c)).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n
}

#[test]
fn pcp_matches_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..20 {
        let dim = 2 + trial % 2;
        let (preds, gts) = random_pairs(&mut rng, 1 + trial * 3, dim, 60.0);
        for subset in [KeypointSubset::All, KeypointSubset::Hand, KeypointSubset::Object] {
            for th in [0.5, 5.0, 17.3, 40.0] {
                let count = preds
                    .iter()
                    .zip(&gts)
                    .filter(|(p, g)| mean_distance(p, g, subset.nodes()) < th)
                    .count();
                let expect = count as f64 / preds.len() as f64;
                let got = pcp(&preds, &gts, th, subset).unwrap();
                assert!((got - expect).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn auc_matches_fine_rectangle_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20 {
        let n = rng.random_range(2..12);
        let mut thresholds: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        if thresholds.len() < 2 {
            continue;
        }
        let mut fractions: Vec<f64> = (0..thresholds.len()).map(|_| rng.random::<f64>()).collect();
        fractions.sort_by(f64::total_cmp);
        let curve = PcpCurve {
            thresholds: thresholds.clone(),
            fractions: fractions.clone(),
        };
        // Midpoint sum of the piecewise-linear curve on a fine grid.
        let (lo, hi) = (thresholds[0], *thresholds.last().unwrap());
        let steps = 200_000;
        let dx = (hi - lo) / steps as f64;
        let interp = |x: f64| {
            let k = thresholds.partition_point(|&t| t <= x).clamp(1, thresholds.len() - 1);
            let (x0, x1) = (thresholds[k - 1], thresholds[k]);
            let (y0, y1) = (fractions[k - 1], fractions[k]);
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        };
        let area: f64 = (0..steps).map(|i| interp(lo + (i as f64 + 0.5) * dx) * dx).sum();
        let got = auc(&curve).unwrap();
        assert!((got - area / (hi - lo)).abs() < 1e-9, "{got} vs {}", area / (hi - lo));
    }
}

#[test]
fn per_joint_groups_match_hand_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (preds, gts) = random_pairs(&mut rng, 7, 3, 30.0);
    let e = per_joint_errors(&preds, &gts).unwrap();
    for k in 0..NUM_NODES {
        let direct: f64 = preds.iter().zip(&gts).map(|(p, g)| mean_distance(p, g, k..k + 1)).sum::<f64>() / 7.0;
        assert!((e.per_node[k] - direct).abs() < 1e-12);
    }
    let global = sample_errors(&preds, &gts, KeypointSubset::All).unwrap().iter().sum::<f64>() / 7.0;
    assert!((e.mean() - global).abs() < 1e-12);

    let tip = (0..5).map(|f| e.per_node[finger_joint(f, 3)]).sum::<f64>() / 5.0;
    let by_type = e.by_joint_type();
    let got_tip = by_type.iter().find(|(jt, _)| *jt == JointType::Tip).unwrap().1;
    assert!((got_tip - tip).abs() < 1e-12);
    let wrist = by_type.iter().find(|(jt, _)| *jt == JointType::Wrist).unwrap().1;
    assert_eq!(wrist, e.per_node[0]);
    let ring = (0..4).map(|j| e.per_node[finger_joint(3, j)]).sum::<f64>() / 4.0;
    assert!((e.by_finger()[3].1 - ring).abs() < 1e-12);
    assert_eq!(e.by_finger()[3].0, "ring");

    let curve = pcp_curve(&preds, &gts, &[1.0, 10.0, 100.0], KeypointSubset::All).unwrap();
    assert_eq!(curve.fractions.last(), Some(&1.0));
}

// Homogeneous 4x4 transforms, built entry by entry.
type H = [[f64; 4]; 4];

fn hmul(a: &H, b: &H) -> H {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rot_x(t: f64) -> H {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0, 0.0], [0.0, c, -s, 0.0], [0.0, s, c, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn rot_y(t: f64) -> H {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s, 0.0], [0.0, 1.0, 0.0, 0.0], [-s, 0.0, c, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn rot_z(t: f64) -> H {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0, 0.0], [s, c, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
}

fn trans(x: f64, y: f64, z: f64) -> H {
    [[1.0, 0.0, 0.0, x], [0.0, 1.0, 0.0, y], [0.0, 0.0, 1.0, z], [0.0, 0.0, 0.0, 1.0]]
}

fn origin(m: &H) -> [f64; 3] {
    [m[0][3], m[1][3], m[2][3]]
}

#[test]
fn kinematics_match_homogeneous_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut params = HandPoseParams::neutral();
    params.wrist_position = [12.0, -30.0, 480.0];
    params.wrist_rotation = [0.3, -0.7, 1.1];
    for f in 0..5 {
        params.fingers[f] = FingerPose {
            abduction: rng.random_range(-0.3..0.3),
            flexion: [rng.random_range(0.0..1.5), rng.random_range(0.0..1.8), rng.random_range(0.0..1.5)],
        };
    }
    let joints = forward_kinematics(&params).unwrap();

    let [roll, pitch, yaw] = params.wrist_rotation;
    let [wx, wy, wz] = params.wrist_position;
    let wrist = hmul(&trans(wx, wy, wz), &hmul(&rot_z(yaw), &hmul(&rot_y(pitch), &rot_x(roll))));
    let mut max_err: f64 = 0.0;
    let mut check = |got: [f64; 3], m: &H| {
        let o = origin(m);
        for k in 0..3 {
            max_err = max_err.max((got[k] - o[k]).abs());
        }
    };
    check(joints[0], &wrist);
    for f in 0..5 {
        let l = DEFAULT_BONE_LENGTHS[f];
        let p = params.fingers[f];
        let mut m = hmul(&wrist, &hmul(&rot_z(FINGER_BASE_SPREAD[f]), &rot_x(-FINGER_BASE_TILT[f])));
        m = hmul(&m, &trans(0.0, l[0], 0.0));
        check(joints[finger_joint(f, 0)], &m);
        m = hmul(&m, &rot_z(p.abduction));
        for seg in 0..3 {
            m = hmul(&m, &hmul(&rot_x(-p.flexion[seg]), &trans(0.0, l[seg + 1], 0.0)));
            check(joints[finger_joint(f, seg + 1)], &m);
        }
    }
    assert!(max_err < 1e-9, "{max_err}");
}

#[test]
fn rotated_box_volume_recovered() {
    let r = hmul(&rot_z(0.7), &hmul(&rot_y(-0.4), &rot_x(1.2)));
    let half = [40.0, 25.0, 10.0];
    // A regular lattice has an exactly diagonal covariance in the box frame.
    let mut pts = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            for k in 0..5 {
                let t = |n: usize, h: f64| -h + 2.0 * h * n as f64 / 4.0;
                pts.push(vec![t(i, half[0]), t(j, half[1]), t(k, half[2])]);
            }
        }
    }
    let world: Vec<[f64; 3]> = pts
        .iter()
        .map(|p| std::array::from_fn(|i| (0..3).map(|k| r[i][k] * p[k]).sum::<f64>() + [5.0, -3.0, 600.0][i]))
        .collect();
    let obb = obb_from_points(&world).unwrap();
    assert!((obb.volume() - 8.0 * 40.0 * 25.0 * 10.0).abs() < 1e-6, "{}", obb.volume());
}

#[test]
fn projection_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let cam = Camera {
        fx: 610.5,
        fy: 598.25,
        cx: 317.0,
        cy: 243.5,
    };
    let pts: Vec<[f64; 3]> = (0..100)
        .map(|_| [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), rng.random_range(300.0..800.0)])
        .collect();
    let uv = project(&pts, &cam).unwrap();
    for (p, q) in pts.iter().zip(&uv) {
        assert!((q[0] - (cam.fx * p[0] / p[2] + cam.cx)).abs() < 1e-12);
        assert!((q[1] - (cam.fy * p[1] / p[2] + cam.cy)).abs() < 1e-12);
    }
}
