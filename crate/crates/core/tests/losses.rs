mod common;

use common::*;
use lgkd::bev_masks::{BevGrid, GridSpec};
use lgkd::distill::*;
use lgkd::tensor::{grad_check, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(r, n, lo, hi)).unwrap()
}

fn value(f: impl FnOnce(&mut Graph) -> lgkd::Result<lgkd::tensor::Var>) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).item().unwrap()
}

fn masks(r: &mut ChaCha8Rng, k: usize, rows: usize, cols: usize) -> Vec<BevGrid> {
    let spec = GridSpec::new(-1.0, 1.0, -1.0, 1.0, rows, cols).unwrap();
    (0..k)
        .map(|_| {
            let mut m = BevGrid::zeros(spec);
            m.values = uniform(r, rows * cols, 0.0, 1.0);
            m
        })
        .collect()
}

#[test]
fn bev_loss_examples() {
    let spec = GridSpec::new(0.0, 1.0, 0.0, 1.0, 1, 1).unwrap();
    let t = Tensor::full(&[1, 1, 1], 2.0);
    let l = value(|g| {
        let s = g.variable(Tensor::zeros(&[1, 1, 1]));
        bev_distill_loss(g, s, &t, &[BevGrid::filled(spec, 1.0)])
    });
    assert!((l - 4.0).abs() < 1e-6);

    let mut r = rng(1);
    let t = rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0);
    let ms = masks(&mut r, 2, 4, 5);
    assert_eq!(
        value(|g| {
            let s = g.variable(t.clone());
            bev_distill_loss(g, s, &t, &ms)
        }),
        0.0
    );
    let zero = vec![BevGrid::zeros(ms[0].spec); 2];
    let s = rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0);
    assert_eq!(
        value(|g| {
            let v = g.variable(s.clone());
            bev_distill_loss(g, v, &t, &zero)
        }),
        0.0
    );
}

#[test]
fn bev_loss_matches_oracle_and_gradients() {
    let mut r = rng(2);
    for _ in 0..100 {
        let (c, rows, cols, k) = (
            r.gen_range(1..4),
            r.gen_range(1..6),
            r.gen_range(1..6),
            r.gen_range(1..4),
        );
        let s = rand_tensor(&mut r, &[c, rows, cols], -2.0, 2.0);
        let t = rand_tensor(&mut r, &[c, rows, cols], -2.0, 2.0);
        let ms = masks(&mut r, k, rows, cols);
        let l = value(|g| {
            let v = g.variable(s.clone());
            bev_distill_loss(g, v, &t, &ms)
        });
        let mv: Vec<Vec<f64>> = ms.iter().map(|m| m.values.clone()).collect();
        let o = bev_oracle(s.data(), t.data(), &mv, c, rows * cols);
        assert!((l - o).abs() < 1e-12 * (1.0 + o.abs()));
    }
    for _ in 0..10 {
        let s = rand_tensor(&mut r, &[4, 8, 8], -1.0, 1.0);
        let t = rand_tensor(&mut r, &[4, 8, 8], -1.0, 1.0);
        let ms = masks(&mut r, 3, 8, 8);
        let err = grad_check(|g, v| bev_distill_loss(g, v, &t, &ms), &s, 1e-6).unwrap();
        assert!(err < 1e-5);
    }
}

#[test]
fn bev_loss_with_unit_mask_is_mean_squared_error() {
    let mut r = rng(3);
    let s = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    let t = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
    let ones = BevGrid::filled(GridSpec::new(0.0, 1.0, 0.0, 1.0, 3, 3).unwrap(), 1.0);
    let l = value(|g| {
        let v = g.variable(s.clone());
        bev_distill_loss(g, v, &t, &[ones])
    });
    let mse = s
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / 18.0;
    assert!((l - mse).abs() < 1e-8);
}

#[test]
fn coarse_loss_examples() {
    let z = Tensor::zeros(&[1, 2, 1, 1]);
    let l1 = value(|g| {
        let v = g.variable(z.clone());
        coarse_depth_loss(g, v, &z, 1.0)
    });
    assert!((l1 - 2f64.ln()).abs() < 1e-12);
    let l4 = value(|g| {
        let v = g.variable(z.clone());
        coarse_depth_loss(g, v, &z, 4.0)
    });
    assert!((l4 - 16.0 * 2f64.ln()).abs() < 1e-12);
    let mut g = Graph::new();
    let v = g.variable(z.clone());
    assert!(coarse_depth_loss(&mut g, v, &z, 0.0).is_err());
}

#[test]
fn coarse_loss_matches_oracle_and_gradients() {
    let mut r = rng(4);
    for trial in 0..100 {
        let (k, d, h, w) = (
            r.gen_range(1..3),
            r.gen_range(2..6),
            r.gen_range(1..4),
            r.gen_range(1..4),
        );
        let s = rand_tensor(&mut r, &[k, d, h, w], -3.0, 3.0);
        let t = rand_tensor(&mut r, &[k, d, h, w], -3.0, 3.0);
        let temp = [1.0, 2.0, 4.0][trial % 3];
        let l = value(|g| {
            let v = g.variable(s.clone());
            coarse_depth_loss(g, v, &t, temp)
        });
        let o = coarse_oracle(s.data(), t.data(), k, d, h * w, temp);
        assert!((l - o).abs() < 1e-12 * (1.0 + o.abs()), "{l} vs {o}");
        if trial < 10 {
            let err = grad_check(|g, v| coarse_depth_loss(g, v, &t, 2.0), &s, 1e-6).unwrap();
            assert!(err < 1e-5);
        }
    }
}

#[test]
fn coarse_loss_at_unit_temperature_is_cross_entropy() {
    let mut r = rng(5);
    let s = rand_tensor(&mut r, &[1, 5, 1, 1], -2.0, 2.0);
    let t = rand_tensor(&mut r, &[1, 5, 1, 1], -2.0, 2.0);
    let l = value(|g| {
        let v = g.variable(s.clone());
        coarse_depth_loss(g, v, &t, 1.0)
    });
    let (p, q) = (softmax(t.data()), softmax(s.data()));
    let ce: f64 = -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
    assert!((l - ce).abs() < 1e-12);
}

#[test]
fn fine_loss_examples_and_oracle() {
    let mut r = rng(6);
    let t = rand_tensor(&mut r, &[2, 3, 4], 1.0, 50.0);
    assert_eq!(
        value(|g| {
            let v = g.variable(t.clone());
            fine_depth_loss(g, v, &t)
        }),
        0.0
    );
    let shifted = t.map(|v| v + 1.5);
    let l = value(|g| {
        let v = g.variable(shifted.clone());
        fine_depth_loss(g, v, &t)
    });
    assert!((l - 2.25).abs() < 1e-12);
    for _ in 0..100 {
        let s = rand_tensor(&mut r, &[2, 3, 4], 1.0, 50.0);
        let l = value(|g| {
            let v = g.variable(s.clone());
            fine_depth_loss(g, v, &t)
        });
        let o = s
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 24.0;
        assert!((l - o).abs() < 1e-12 * (1.0 + o));
    }
    let s = rand_tensor(&mut r, &[2, 3, 4], 1.0, 50.0);
    assert!(grad_check(|g, v| fine_depth_loss(g, v, &t), &s, 1e-6).unwrap() < 1e-5);
}

#[test]
fn combination_arithmetic() {
    let l = value(|g| {
        let (c, f) = (g.variable(Tensor::scalar(1.0)), g.variable(Tensor::scalar(0.5)));
        depth_distill_loss(g, c, f, 2.0)
    });
    assert_eq!(l, 2.0);
    let l = value(|g| {
        let (c, f) = (g.variable(Tensor::scalar(1.5)), g.variable(Tensor::scalar(0.5)));
        depth_distill_loss(g, c, f, 0.0)
    });
    assert_eq!(l, 1.5);
    let w = LossWeights::default();
    let l = value(|g| {
        let (a, b, c) = (
            g.variable(Tensor::scalar(1.0)),
            g.variable(Tensor::scalar(2.0)),
            g.variable(Tensor::scalar(3.0)),
        );
        total_distill_loss(g, a, b, c, &w)
    });
    assert_eq!(l, 6.0);
    let w0 = LossWeights {
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let l = value(|g| {
        let (a, b, c) = (
            g.variable(Tensor::scalar(1.0)),
            g.variable(Tensor::scalar(2.0)),
            g.variable(Tensor::scalar(3.0)),
        );
        total_distill_loss(g, a, b, c, &w0)
    });
    assert_eq!(l, 1.0);
}

#[test]
fn soft_label_examples_and_oracle() {
    let half = Tensor::full(&[2, 3, 3], 0.5);
    let l = value(|g| {
        let v = g.variable(half.clone());
        soft_label_loss(g, v, &half, SoftLabelDistance::Bce)
    });
    assert!((l - 2f64.ln()).abs() < 1e-12);
    let one = Tensor::ones(&[1, 2, 2]);
    let l = value(|g| {
        let v = g.variable(one.clone());
        soft_label_loss(g, v, &one, SoftLabelDistance::Bce)
    });
    assert!(l < 1e-6);
    let mut r = rng(7);
    for trial in 0..100 {
        let s = rand_tensor(&mut r, &[2, 3, 4], 0.0, 1.0);
        let t = rand_tensor(&mut r, &[2, 3, 4], 0.0, 1.0);
        let l = value(|g| {
            let v = g.variable(s.clone());
            soft_label_loss(g, v, &t, SoftLabelDistance::Bce)
        });
        assert!((l - bce_oracle(s.data(), t.data())).abs() < 1e-12);
        let l2 = value(|g| {
            let v = g.variable(s.clone());
            soft_label_loss(g, v, &t, SoftLabelDistance::L2)
        });
        let o2 = s
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 24.0;
        assert!((l2 - o2).abs() < 1e-12);
        if trial < 10 {
            let s = rand_tensor(&mut r, &[2, 3, 4], 0.05, 0.95);
            let err = grad_check(|g, v| soft_label_loss(g, v, &t, SoftLabelDistance::Bce), &s, 1e-6).unwrap();
            assert!(err < 1e-5);
        }
    }
    let mut g = Graph::new();
    let v = g.variable(half.clone());
    assert!(soft_label_loss(&mut g, v, &Tensor::ones(&[1, 1, 1]), SoftLabelDistance::Bce).is_err());
    let v = g.variable(Tensor::full(&[2, 3, 3], 1.5));
    assert!(matches!(
        soft_label_loss(&mut g, v, &half, SoftLabelDistance::Bce),
        Err(lgkd::Error::Domain(_))
    ));
}

#[test]
fn focal_examples_and_oracle() {
    let mut p = Tensor::full(&[1, 3, 3], 1e-9);
    let mut y = Tensor::zeros(&[1, 3, 3]);
    p.data_mut()[4] = 1.0;
    y.data_mut()[4] = 1.0;
    let l = value(|g| {
        let v = g.variable(p.clone());
        center_focal_loss(g, v, &y, 2.0, 4.0)
    });
    assert!(l.abs() < 1e-12);

    let single_p = Tensor::full(&[1, 1, 1], 0.5);
    let single_y = Tensor::ones(&[1, 1, 1]);
    let l = value(|g| {
        let v = g.variable(single_p.clone());
        center_focal_loss(g, v, &single_y, 2.0, 4.0)
    });
    assert!((l - 0.25 * 2f64.ln()).abs() < 1e-12);

    let mut r = rng(8);
    for trial in 0..100 {
        let p = rand_tensor(&mut r, &[2, 4, 4], 0.01, 0.99);
        let mut y = rand_tensor(&mut r, &[2, 4, 4], 0.0, 0.99);
        for v in y.data_mut().iter_mut() {
            if r.gen_bool(0.1) {
                *v = 1.0;
            }
        }
        let l = value(|g| {
            let v = g.variable(p.clone());
            center_focal_loss(g, v, &y, 2.0, 4.0)
        });
        let o = focal_oracle(p.data(), y.data(), 2.0, 4.0);
        assert!((l - o).abs() < 1e-12 * (1.0 + o.abs()));
        assert!(l >= 0.0);
        if trial < 10 {
            let err = grad_check(|g, v| center_focal_loss(g, v, &y, 2.0, 4.0), &p, 1e-6).unwrap();
            assert!(err < 1e-5);
        }
    }
}

#[test]
fn sil_examples_and_oracle() {
    let mut r = rng(9);
    let gt = rand_tensor(&mut r, &[2, 3, 4], 1.0, 60.0).map(|v| if v < 10.0 { 0.0 } else { v });
    let same = gt.map(|v| if v > 0.0 { v } else { 3.0 });
    assert!(
        value(|g| {
            let v = g.variable(same.clone());
            scale_invariant_depth_loss(g, v, &gt)
        })
        .abs()
            < 1e-15
    );
    let scaled = same.map(|v| 2.7 * v);
    assert!(
        value(|g| {
            let v = g.variable(scaled.clone());
            scale_invariant_depth_loss(g, v, &gt)
        })
        .abs()
            < 1e-12
    );
    for trial in 0..100 {
        let pred = rand_tensor(&mut r, &[2, 3, 4], 0.5, 70.0);
        let l = value(|g| {
            let v = g.variable(pred.clone());
            scale_invariant_depth_loss(g, v, &gt)
        });
        let o = sil_oracle(pred.data(), gt.data());
        assert!((l - o).abs() < 1e-12 * (1.0 + o));
        if trial < 10 {
            let err = grad_check(|g, v| scale_invariant_depth_loss(g, v, &gt), &pred, 1e-6).unwrap();
            assert!(err < 1e-5);
        }
    }
    let mut g = Graph::new();
    let v = g.variable(same.clone());
    assert!(scale_invariant_depth_loss(&mut g, v, &Tensor::zeros(&[2, 3, 4])).is_err());
}

#[test]
fn depth_bin_bce_matches_oracle() {
    let mut r = rng(10);
    for trial in 0..100 {
        let (k, d, plane) = (2, 4, 6);
        let logits = rand_tensor(&mut r, &[k, d, 2, 3], -2.0, 2.0);
        let mut prob = logits.clone();
        for kk in 0..k {
            for p in 0..plane {
                let col: Vec<f64> = (0..d).map(|dd| logits.data()[(kk * d + dd) * plane + p]).collect();
                for (dd, v) in softmax(&col).into_iter().enumerate() {
                    prob.data_mut()[(kk * d + dd) * plane + p] = v;
                }
            }
        }
        let bins: Vec<Option<usize>> = (0..k * plane)
            .map(|i| if i % 3 == 0 { None } else { Some(r.gen_range(0..d)) })
            .collect();
        let l = value(|g| {
            let v = g.variable(prob.clone());
            depth_bin_bce_loss(g, v, &bins)
        });
        let mut o = 0.0;
        let mut n = 0.0;
        for (pix, b) in bins.iter().enumerate() {
            let Some(b) = b else { continue };
            n += 1.0;
            let (kk, p) = (pix / plane, pix % plane);
            for dd in 0..d {
                let q = prob.data()[(kk * d + dd) * plane + p].clamp(1e-7, 1.0 - 1e-7);
                o -= if dd == *b { q.ln() } else { (1.0 - q).ln() };
            }
        }
        assert!((l - o / n).abs() < 1e-12 * (1.0 + o.abs()));
        if trial < 10 {
            let err = grad_check(
                |g, v| {
                    let s = g.softmax(v, 1)?;
                    depth_bin_bce_loss(g, s, &bins)
                },
                &logits,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5);
        }
    }
}

#[test]
fn loss_weights_reject_unknown_keys_and_bad_values() {
    assert!(toml::from_str::<LossWeights>("alpha = 1.0\nbogus = 2").is_err());
    assert!(LossWeights {
        temperature: 0.0,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
    assert!(LossWeights {
        beta: -1.0,
        ..LossWeights::default()
    }
    .validate()
    .is_err());
    LossWeights::default().validate().unwrap();
}

#[test]
fn teacher_inputs_receive_no_gradient() {
    let mut r = rng(11);
    let s = rand_tensor(&mut r, &[1, 4, 2, 2], -1.0, 1.0);
    let t = rand_tensor(&mut r, &[1, 4, 2, 2], -1.0, 1.0);
    let mut g = Graph::new();
    let sv = g.variable(s);
    let tv = g.constant(t.clone());
    let tval = g.value(tv).clone();
    let l = coarse_depth_loss(&mut g, sv, &tval, 4.0).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(sv).is_some());
    assert!(grads.get(tv).is_none());
}

#[test]
fn loss_report_csv_row() {
    let r = LossReport {
        task: 1.0,
        soft: 0.5,
        total: 1.5,
        ..LossReport::default()
    };
    let row = r.csv_row(3);
    assert_eq!(row.split(',').count(), LossReport::CSV_HEADER.split(',').count());
    assert!(row.starts_with("3,"));
}

proptest! {
    #[test]
    fn losses_are_non_negative(seed in 0u64..500) {
        let mut r = rng(seed);
        let s = rand_tensor(&mut r, &[1, 3, 2, 2], -3.0, 3.0);
        let t = rand_tensor(&mut r, &[1, 3, 2, 2], -3.0, 3.0);
        let p = t.map(|v| 1.0 / (1.0 + (-v).exp()));
        let q = s.map(|v| 1.0 / (1.0 + (-v).exp()));
        let losses = [
            value(|g| { let v = g.variable(s.clone()); coarse_depth_loss(g, v, &t, 2.0) }),
            value(|g| { let v = g.variable(q.clone()); soft_label_loss(g, v, &p, SoftLabelDistance::Bce) }),
            value(|g| { let v = g.variable(q.clone()); center_focal_loss(g, v, &p, 2.0, 4.0) }),
            value(|g| { let v = g.variable(q.clone()); scale_invariant_depth_loss(g, v, &p) }),
        ];
        prop_assert!(losses.iter().all(|&l| l >= 0.0), "{:?}", losses);
    }
}
