use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rg_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use rg_core::eval::precision_recall_at;
use rg_core::infer::{coord_update_scalar, nms_group_update};
use rg_core::model::flatten_states;
use rg_core::train::{heatmap_loss, sgd_update, TrainState};
use rg_core::{
    convolve_transposed, correlate, dense_coordinate_descent, dense_expand, eval_pck,
    eval_visibility_pr, generate_dataset, interlace_zeros, qp_k, score, subsample, Architecture,
    Checkpoint, DatasetSpec, DenseQp, Dims, FilterBank, GroupShape, LayerConfig, RgNetwork, Score,
    SquareMatrix, Tensor,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, d: Dims, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(d, (0..d.len()).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn filter_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize)> {
    (1..4usize, 1..4usize, 1..5usize, 1..5usize, 1..=2usize, 0..4usize, 0..4usize)
}

fn random_filter(
    r: &mut ChaCha8Rng,
    (o, i, kh, kw, s, ph, pw): (usize, usize, usize, usize, usize, usize, usize),
) -> FilterBank {
    let data = (0..o * i * kh * kw).map(|_| r.random_range(-1.0..1.0)).collect();
    FilterBank::new(o, i, (kh, kw), s, (ph % kh, pw % kw), data).unwrap()
}

/// NMS-optional stack with random weights, retried until the shapes work.
fn random_net(r: &mut ChaCha8Rng, nms: bool, scale: f64) -> RgNetwork {
    loop {
        let input = Dims::new(r.random_range(1..=2), r.random_range(1..=8), r.random_range(2..=9));
        let mut layers = Vec::new();
        let mut c = input.channels;
        for _ in 0..r.random_range(1..=3) {
            let (kh, kw) = (r.random_range(1..=3), r.random_range(1..=3));
            let out = r.random_range(1..=3);
            layers.push(LayerConfig {
                in_channels: c,
                out_channels: out,
                kernel: (kh, kw),
                stride: r.random_range(1..=2),
                pad: (r.random_range(0..kh), r.random_range(0..kw)),
                nms: (nms && r.random_bool(0.5)).then(|| GroupShape {
                    h: r.random_range(1..=2),
                    w: r.random_range(1..=2),
                }),
            });
            c = out;
        }
        if let Ok(mut net) = RgNetwork::new(input, layers) {
            if net.latent_count() > 200 {
                continue;
            }
            for i in 1..=net.num_layers() {
                for v in net.filter_mut(i).data_mut() {
                    *v = r.random_range(-scale..scale);
                }
                for v in net.bias_mut(i) {
                    *v = r.random_range(-0.5..1.0);
                }
            }
            return net;
        }
    }
}

fn random_qp(r: &mut ChaCha8Rng, n: usize, groups: bool) -> DenseQp {
    let mut w = SquareMatrix::zeros(n);
    for i in 0..n {
        w.set(i, i, -1.0);
        for j in 0..i {
            // Diagonally dominant, so the maximiser is unique and finite.
            let v = r.random_range(-0.9..0.9) / n as f64;
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    let b = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut gs = Vec::new();
    if groups {
        let mut i = 0;
        while i + 1 < n {
            let size = r.random_range(1..=3).min(n - i);
            if size > 1 {
                gs.push((i..i + size).collect());
            }
            i += size;
        }
    }
    DenseQp::new(w, b, gs).unwrap()
}

fn drive(qp: &DenseQp, z: &[f64], j: usize, skip: &[usize]) -> f64 {
    qp.b()[j]
        + (0..qp.n())
            .filter(|k| !skip.contains(k))
            .map(|k| qp.w().get(j, k) * z[k])
            .sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlate_and_transpose_are_adjoint(shape in filter_strategy(), h in 1..10usize, w in 1..10usize, seed: u64) {
        let mut r = rng(seed);
        let f = random_filter(&mut r, shape);
        let xd = Dims::new(f.in_channels(), h, w);
        prop_assume!(f.output_dims(xd).is_ok());
        let x = random_tensor(&mut r, xd, -1.0, 1.0);
        let y = random_tensor(&mut r, f.output_dims(xd).unwrap(), -1.0, 1.0);
        let lhs = correlate(&f, &x).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&convolve_transposed(&f, &y, xd).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn correlate_is_linear(shape in filter_strategy(), h in 1..10usize, w in 1..10usize, a in -3.0..3.0f64, b in -3.0..3.0f64, seed: u64) {
        let mut r = rng(seed);
        let f = random_filter(&mut r, shape);
        let xd = Dims::new(f.in_channels(), h, w);
        prop_assume!(f.output_dims(xd).is_ok());
        let x = random_tensor(&mut r, xd, -1.0, 1.0);
        let y = random_tensor(&mut r, xd, -1.0, 1.0);
        let mut mix = x.clone();
        mix.scale(a);
        let mut by = y.clone();
        by.scale(b);
        mix.add_assign(&by).unwrap();
        let lhs = correlate(&f, &mix).unwrap();
        let mut rhs = correlate(&f, &x).unwrap();
        rhs.scale(a);
        let mut fy = correlate(&f, &y).unwrap();
        fy.scale(b);
        rhs.add_assign(&fy).unwrap();
        let size = lhs.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * size);
        prop_assert_eq!(correlate(&f, &mix).unwrap(), lhs);
    }

    #[test]
    fn subsample_undoes_interlace(c in 1..3usize, h in 1..7usize, w in 1..7usize, seed: u64) {
        let mut r = rng(seed);
        let z = random_tensor(&mut r, Dims::new(c, h, w), -1.0, 1.0);
        let target = (2 * h - r.random_range(0..=1), 2 * w - r.random_range(0..=1));
        let up = interlace_zeros(&z, 2, target).unwrap();
        prop_assert_eq!(up.data().iter().filter(|v| **v != 0.0).count(),
                        z.data().iter().filter(|v| **v != 0.0).count());
        prop_assert_eq!(subsample(&up, 2).unwrap(), z);
    }

    #[test]
    fn nms_keeps_one_rectified_max_per_group(c in 1..3usize, gh in 1..3usize, gw in 1..3usize, ny in 1..4usize, nx in 1..4usize, seed: u64) {
        let mut r = rng(seed);
        let d = Dims::new(c, gh * ny, gw * nx);
        let t = random_tensor(&mut r, d, -1.0, 1.0);
        let g = GroupShape { h: gh, w: gw };
        let out = nms_group_update(&t, g).unwrap();
        for ch in 0..c {
            for y0 in (0..d.height).step_by(gh) {
                for x0 in (0..d.width).step_by(gw) {
                    let cells: Vec<(usize, usize)> = (y0..y0 + gh)
                        .flat_map(|y| (x0..x0 + gw).map(move |x| (y, x)))
                        .collect();
                    let max = cells.iter().map(|&(y, x)| t.get(ch, y, x)).fold(f64::NEG_INFINITY, f64::max);
                    let kept: Vec<f64> = cells.iter().map(|&(y, x)| out.get(ch, y, x)).filter(|v| *v != 0.0).collect();
                    if max > 0.0 {
                        prop_assert_eq!(kept, vec![max]);
                    } else {
                        prop_assert!(kept.is_empty());
                    }
                }
            }
        }
    }

    #[test]
    fn unrolled_states_are_feasible_and_finite(seed: u64, k in 1..=8usize) {
        let mut r = rng(seed);
        let net = random_net(&mut r, true, 2.0);
        let x = random_tensor(&mut r, net.input_dims(), 0.0, 1.0);
        let trace = qp_k(&net, &x, k).unwrap();
        prop_assert!(trace.is_finite());
        for (i, z) in trace.states.iter().enumerate() {
            prop_assert!(z.data().iter().all(|&v| v >= 0.0));
            if let Some(g) = net.layer(i + 1).nms {
                let single = nms_group_update(z, g).unwrap();
                prop_assert_eq!(&single, z, "layer {} has a group with two winners", i + 1);
            }
        }
        prop_assert!(net.layered_score(&x, &trace.states).unwrap().is_some());
    }

    #[test]
    fn dense_and_layered_scores_agree(seed: u64) {
        let mut r = rng(seed);
        let net = random_net(&mut r, false, 1.0);
        let x = random_tensor(&mut r, net.input_dims(), 0.0, 1.0);
        let states: Vec<Tensor> = (1..=net.num_layers())
            .map(|i| random_tensor(&mut r, net.dims(i), 0.0, 2.0))
            .collect();
        let qp = dense_expand(&net, &x).unwrap();
        let dense = score(&qp, &flatten_states(&states)).unwrap().value().unwrap();
        let layered = net.layered_score(&x, &states).unwrap().unwrap();
        prop_assert!((dense - layered).abs() <= 1e-9 * dense.abs().max(1.0), "{dense} vs {layered}");
        prop_assert!(qp.w().is_symmetric(1e-12));
        prop_assert!((0..qp.n()).all(|i| qp.w().get(i, i) == -1.0));
    }

    #[test]
    fn coordinate_descent_reaches_a_stationary_point(n in 1..12usize, groups: bool, seed: u64) {
        let mut r = rng(seed);
        let qp = random_qp(&mut r, n, groups);
        let sol = dense_coordinate_descent(&qp, 10_000, 1e-12).unwrap();
        prop_assert!(sol.converged);
        let z = &sol.z;
        let grouped: Vec<usize> = qp.groups().iter().flatten().copied().collect();
        for j in (0..n).filter(|j| !grouped.contains(j)) {
            prop_assert!((z[j] - coord_update_scalar(drive(&qp, z, j, &[j]))).abs() < 1e-9);
        }
        // Brute force over "which member is active" for every group.
        for g in qp.groups() {
            let current = score(&qp, z).unwrap().value().unwrap();
            for &j in g {
                let mut alt = z.clone();
                for &m in g {
                    alt[m] = 0.0;
                }
                alt[j] = coord_update_scalar(drive(&qp, &alt, j, g));
                let s = score(&qp, &alt).unwrap().value().unwrap();
                prop_assert!(s <= current + 1e-9, "member {j} of {g:?} improves {current} to {s}");
            }
        }
    }

    #[test]
    fn two_active_members_are_infeasible(n in 2..8usize, seed: u64) {
        let mut r = rng(seed);
        let qp = random_qp(&mut r, n, true);
        prop_assume!(!qp.groups().is_empty());
        let mut z = vec![0.0; n];
        let g = &qp.groups()[0];
        z[g[0]] = 0.5;
        z[g[1]] = 0.25;
        prop_assert_eq!(score(&qp, &z).unwrap(), Score::Infeasible);
    }

    #[test]
    fn pck_ignores_keypoint_order(seed: u64, m in 1..6usize, n in 1..6usize) {
        let mut r = rng(seed);
        let pt = |r: &mut ChaCha8Rng| (r.random_range(0.0..56.0), r.random_range(0.0..56.0));
        let preds: Vec<Vec<(f64, f64)>> = (0..n).map(|_| (0..m).map(|_| pt(&mut r)).collect()).collect();
        let gts: Vec<Vec<(f64, f64)>> = (0..n).map(|_| (0..m).map(|_| pt(&mut r)).collect()).collect();
        let vis: Vec<Vec<bool>> = (0..n).map(|_| (0..m).map(|_| r.random_bool(0.7)).collect()).collect();
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let apply = |v: &Vec<Vec<(f64, f64)>>| -> Vec<Vec<(f64, f64)>> {
            v.iter().map(|row| perm.iter().map(|&p| row[p]).collect()).collect()
        };
        let vis_p: Vec<Vec<bool>> = vis.iter().map(|row| perm.iter().map(|&p| row[p]).collect()).collect();
        for alpha in [0.05, 0.1, 0.3] {
            let a = eval_pck(&preds, &gts, &vis, alpha, 56.0).unwrap();
            let b = eval_pck(&apply(&preds), &apply(&gts), &vis_p, alpha, 56.0).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.correct <= a.total);
        }
    }

    #[test]
    fn recall_never_rises_with_the_threshold(seed: u64, n in 1..40usize) {
        let mut r = rng(seed);
        // Coarse confidences so ties occur.
        let conf: Vec<f64> = (0..n).map(|_| r.random_range(0..10) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        let curve = eval_visibility_pr(&conf, &labels).unwrap();
        for pair in curve.points.windows(2) {
            prop_assert!(pair[0].threshold < pair[1].threshold);
            prop_assert!(pair[1].recall <= pair[0].recall);
        }
        let positives = labels.iter().filter(|&&l| l).count();
        for p in &curve.points {
            let predicted = p.true_positives + p.false_positives;
            prop_assert!(predicted > 0);
            prop_assert_eq!(p.precision, p.true_positives as f64 / predicted as f64);
            prop_assert_eq!(p.recall, p.true_positives as f64 / positives as f64);
            prop_assert_eq!(*p, precision_recall_at(&conf, &labels, p.threshold).unwrap());
        }
    }

    #[test]
    fn loss_is_nonnegative(seed: u64, m in 1..4usize, h in 1..6usize, w in 1..6usize) {
        let mut r = rng(seed);
        let d = Dims::new(m, h, w);
        let logits = random_tensor(&mut r, d, -20.0, 20.0);
        let target = Tensor::from_vec(d, (0..d.len()).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect()).unwrap();
        let vis: Vec<bool> = (0..m).map(|_| r.random_bool(0.7)).collect();
        prop_assert!(heatmap_loss(&logits, &target, &vis).unwrap() >= 0.0);
    }

    #[test]
    fn plain_sgd_without_momentum(seed: u64, n in 1..20usize, lr in 1e-4..1.0f64) {
        let mut r = rng(seed);
        let theta: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let grad: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut t = theta.clone();
        let mut v = vec![0.0; n];
        sgd_update(&mut t, &grad, &mut v, lr, 0.0, 0.0);
        for j in 0..n {
            prop_assert_eq!(t[j], theta[j] + (0.0 - lr * grad[j]));
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed: u64, with_state: bool) {
        let mut r = rng(seed);
        let arch = Architecture {
            input: Dims::new(1, 16, 16),
            layers: vec![
                LayerConfig::same(1, r.random_range(1..=4), 3, 2).with_nms(GroupShape::square(2)),
            ],
            keypoints: r.random_range(1..=3),
            grid: (2, 2),
            taps: vec![1],
        };
        let mut arch = arch;
        let c = arch.layers[0].out_channels;
        arch.layers.push(LayerConfig::same(c, r.random_range(1..=4), 3, 2));
        let mut model = arch.build().unwrap();
        model.init(seed);
        let state = with_state.then(|| {
            let mut velocity = rg_core::train::Gradients::zeros_like(&model);
            for b in &mut velocity.blocks {
                for v in b.iter_mut() {
                    *v = r.random_range(-1.0..1.0);
                }
            }
            TrainState { velocity, epoch: r.random_range(0..100) }
        });
        let ck = Checkpoint { model, state };
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.model.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits())).collect()
        };
        prop_assert_eq!(bits(&back), bits(&ck));
        prop_assert_eq!(back, ck);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn datasets_are_pure_functions_of_the_spec(seed: u64, n in 1..6usize, m in 1..=10usize, occ in 0.0..=1.0f64) {
        let spec = DatasetSpec {
            n_samples: n,
            image_size: 48,
            n_keypoints: m,
            occlusion_rate: occ,
            seed,
            ..DatasetSpec::default()
        };
        let a = generate_dataset(&spec).unwrap();
        prop_assert_eq!(&a, &generate_dataset(&spec).unwrap());
        for s in &a.samples {
            prop_assert_eq!(s.keypoints.len(), m);
            for &(x, y) in &s.keypoints {
                prop_assert!((0.0..48.0).contains(&x) && (0.0..48.0).contains(&y));
            }
        }
    }
}
