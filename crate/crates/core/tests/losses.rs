mod oracles;

use acevc_core::losses::*;
use acevc_nn::{grad_check, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_logits(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Tensor<f64> {
    Tensor::from_vec(t, v, (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect())
}

fn admissible_target(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Vec<usize> {
    loop {
        let len = rng.gen_range(0..=t);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        if oracles::ctc_needed(&target) <= t {
            return target;
        }
    }
}

fn store_with(params: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let grp = s.group("inputs", 1.0);
    for (name, value) in params {
        s.add(*name, grp, value.clone());
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ctc_matches_path_enumeration(seed in any::<u64>(), t in 1usize..=6, v in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = oracles::log_softmax_rows(&random_logits(&mut rng, t, v));
        let target = admissible_target(&mut rng, t, v);
        let dp = ctc_loss(&lp, &target).unwrap();
        let brute = oracles::ctc_by_enumeration(&lp, &target);
        prop_assert!((dp - brute).abs() <= 1e-9, "dp {} brute {}", dp, brute);
    }

    #[test]
    fn ctc_gradient_matches_central_differences(seed in any::<u64>(), t in 1usize..=6, v in 2usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = oracles::log_softmax_rows(&random_logits(&mut rng, t, v));
        let target = admissible_target(&mut rng, t, v);
        let (_, grad) = ctc_loss_and_grad(&lp, &target).unwrap();
        // Five-point stencil: truncation and round-off both near 1e-12.
        let h = 1e-3;
        let at = |i: usize, dx: f64| {
            let mut x = lp.clone();
            x.data_mut()[i] += dx;
            ctc_loss(&x, &target).unwrap()
        };
        for i in 0..lp.len() {
            let numeric = (-at(i, 2.0 * h) + 8.0 * at(i, h) - 8.0 * at(i, -h) + at(i, -2.0 * h)) / (12.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            prop_assert!(rel <= 1e-5, "entry {} analytic {} numeric {}", i, a, numeric);
        }
    }

    #[test]
    fn cosine_loss_is_bounded_and_scale_invariant(seed in any::<u64>(), t in 1usize..8, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_logits(&mut rng, t, d);
        let b = random_logits(&mut rng, t, d);
        let l = cosine_disentangle_loss(&a, &b).unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&l));
        let mut scaled = a.clone();
        for r in 0..t {
            let s: f64 = rng.gen_range(0.01..100.0);
            scaled.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        prop_assert!((cosine_disentangle_loss(&scaled, &b).unwrap() - l).abs() < 1e-9);
    }

    #[test]
    fn unit_margin_asoftmax_is_cross_entropy(seed in any::<u64>(), n in 1usize..6, c in 2usize..5, s in 0.5f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_logits(&mut rng, n, 4);
        let w = random_logits(&mut rng, c, 4);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let got = angular_softmax_loss(&e, &w, &labels, 1, s).unwrap();
        let norm = |m: &Tensor<f64>, r: usize| -> Vec<f64> {
            let n = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            m.row(r).iter().map(|x| x / n).collect()
        };
        let mut ce = 0.0;
        for i in 0..n {
            let ei = norm(&e, i);
            let logits: Vec<f64> = (0..c)
                .map(|j| s * ei.iter().zip(norm(&w, j)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            ce += lse - logits[labels[i]];
        }
        prop_assert!((got - ce / n as f64).abs() < 1e-9);
    }

    #[test]
    fn batch_losses_are_permutation_invariant(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random_logits(&mut rng, n, 3);
        let w = random_logits(&mut rng, 3, 3);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(rng.gen_range(0..n));
        let pe = Tensor::from_rows(&order.iter().map(|&i| e.row(i).to_vec()).collect::<Vec<_>>());
        let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = angular_softmax_loss(&e, &w, &labels, 2, 30.0).unwrap();
        let b = angular_softmax_loss(&pe, &w, &pl, 2, 30.0).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));

        let z = random_logits(&mut rng, n, 3);
        let pz = Tensor::from_rows(&order.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>());
        let a = cosine_disentangle_loss(&e, &z).unwrap();
        let b = cosine_disentangle_loss(&pe, &pz).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ctc_three_symbol_uniform_reference() {
    let lp = Tensor::full(2, 3, -(3f64).ln());
    assert!((ctc_loss(&lp, &[1]).unwrap() - 3f64.ln()).abs() < 1e-12);
    assert!((oracles::ctc_by_enumeration(&lp, &[1]) - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn loss_nodes_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random_logits(&mut rng, 6, 4);
    let store = store_with(&[("logits", logits)]);
    let report = grad_check(
        &store,
        |g, p| {
            let x = p.node(store.find("logits").unwrap());
            let lp = g.log_softmax(x);
            ctc_node(g, lp, &[1, 3, 3], true).unwrap()
        },
        1e-4,
        usize::MAX,
    );
    assert!(report.passed(), "ctc {:?}", report.worst());

    let store = store_with(&[
        ("emb", random_logits(&mut rng, 4, 5)),
        ("classes", random_logits(&mut rng, 3, 5)),
    ]);
    for margin in [1, 2, 3] {
        let report = grad_check(
            &store,
            |g, p| {
                let e = p.node(store.find("emb").unwrap());
                let w = p.node(store.find("classes").unwrap());
                angular_softmax_node(g, e, w, &[0, 2, 1, 2], margin, 30.0).unwrap()
            },
            1e-4,
            usize::MAX,
        );
        assert!(report.passed(), "asoftmax m={margin} {:?}", report.worst());
    }

    let store = store_with(&[
        ("a", random_logits(&mut rng, 5, 3)),
        ("b", random_logits(&mut rng, 5, 3)),
    ]);
    let report = grad_check(
        &store,
        |g, p| {
            let a = p.node(store.find("a").unwrap());
            let b = p.node(store.find("b").unwrap());
            cosine_disentangle_node(g, a, b).unwrap()
        },
        1e-4,
        usize::MAX,
    );
    assert!(report.passed(), "cosine {:?}", report.worst());

    let store = store_with(&[
        ("mel", random_logits(&mut rng, 8, 4)),
        ("pitch", random_logits(&mut rng, 3, 1)),
        ("dur", random_logits(&mut rng, 3, 1)),
        ("sv", random_logits(&mut rng, 1, 1)),
    ]);
    let target = random_logits(&mut rng, 8, 4);
    let report = grad_check(
        &store,
        |g, p| {
            let y = g.constant(target.clone());
            let t = synth_loss_node(
                g,
                p.node(store.find("mel").unwrap()),
                y,
                p.node(store.find("pitch").unwrap()),
                &[0.5, -1.0, 0.0],
                p.node(store.find("dur").unwrap()),
                &[2, 1, 5],
                SynthLossWeights {
                    lambda1: 0.3,
                    lambda2: 0.7,
                },
            )
            .unwrap();
            let sv = p.node(store.find("sv").unwrap());
            let sv = g.square(sv);
            let content = g.mean_all(t.total);
            sre_loss_node(
                g,
                content,
                Some(sv),
                Some(t.pitch),
                SreLossWeights {
                    alpha: 0.5,
                    beta: 2.0,
                },
            )
        },
        1e-4,
        usize::MAX,
    );
    assert!(
        report.passed(),
        "synth/sre combination {:?}",
        report.worst()
    );
}

#[test]
fn synth_loss_reference_points() {
    let y = Tensor::from_vec(4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
    let w = SynthLossWeights {
        lambda1: 0.1,
        lambda2: 0.1,
    };
    let logd: Vec<f64> = [1usize, 3].iter().map(|&d| log_duration(d)).collect();
    assert_eq!(
        synth_loss(&y, &y, &[0.5, 1.0], &[0.5, 1.0], &logd, &[1, 3], w).unwrap(),
        0.0
    );
    let off = y.map(|v| v + 0.25);
    let l = synth_loss(&off, &y, &[0.5, 1.0], &[0.5, 1.0], &logd, &[1, 3], w).unwrap();
    assert!((l - 0.0625).abs() < 1e-12);
    let zero = SynthLossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
    };
    let l = synth_loss(
        &off,
        &y,
        &[9.0, 9.0],
        &[0.5, 1.0],
        &[7.0, 7.0],
        &[1, 3],
        zero,
    )
    .unwrap();
    assert!((l - 0.0625).abs() < 1e-12);
    assert!(synth_loss(&y, &off.transpose(), &[0.0], &[0.0], &[0.0], &[1], w).is_err());
}

#[test]
fn sre_loss_arithmetic() {
    let w = SreLossWeights {
        alpha: 0.5,
        beta: 1.0,
    };
    assert_eq!(sre_loss(1.0, 2.0, 0.0, w), 2.0);
    assert_eq!(sre_loss(0.0, 0.0, 0.0, w), 0.0);
    assert_eq!(
        sre_loss(
            1.5,
            2.0,
            9.0,
            SreLossWeights {
                alpha: 1.0,
                beta: 0.0
            }
        ),
        3.5
    );
}
