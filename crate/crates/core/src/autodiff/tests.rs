use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // magnitudes kept away from 0 so finite differences never straddle a relu kink
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Central differences of a scalar function of one tensor.
fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64, h: f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

/// Checks every input's reverse-mode gradient of `build` against finite differences.
fn check_op(inputs: Vec<Tensor<f64>>, build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let scalar = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let v = g.value(out).unwrap().item().unwrap();
        (g, vars, out, v)
    };
    let (g, vars, out, _) = scalar(&inputs);
    let grads = g.gradient(out, &vars).unwrap();
    let mut worst: f64 = 0.0;
    for (k, grad) in grads.iter().enumerate() {
        let f = |t: &Tensor<f64>| {
            let mut ts = inputs.clone();
            ts[k] = t.clone();
            scalar(&ts).3
        };
        let num = numeric_grad(&inputs[k], &f, 1e-4);
        worst = worst.max(max_rel_err(grad.data(), &num));
    }
    worst
}

/// Random weights for reducing a tensor to a scalar, so every output element
/// receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let shape = g.shape(v).unwrap().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn add_example() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.leaf(Tensor::from_vec(vec![3.0, 4.0]));
    let z = g.add(x, y).unwrap();
    assert_eq!(g.value(z).unwrap().data(), &[4.0, 6.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let mut g = Graph::new();
    let (i, av) = (g.leaf(eye), g.leaf(a.clone()));
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out).unwrap(), &a);
}

#[test]
fn evaluate_reports_unbound_and_shape_errors() {
    let mut b = Bindings::new();
    b.insert("x".to_string(), Tensor::from_vec(vec![1.0f64, 2.0]));
    let err = evaluate(&b, false, |g, inp| {
        let x = inp.get("x")?;
        let y = inp.get("y")?;
        Ok(vec![("z".into(), g.add(x, y)?)])
    })
    .err()
    .unwrap();
    assert!(matches!(err, Error::UnboundInput(ref n) if n == "y"));

    b.insert("y".to_string(), Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let err = evaluate(&b, false, |g, inp| Ok(vec![("z".into(), g.add(inp.get("x")?, inp.get("y")?)?)]))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn strict_mode_rejects_non_finite() {
    let mut b = Bindings::new();
    b.insert("x".to_string(), Tensor::from_vec(vec![1e300f64]));
    let build = |g: &mut Graph<f64>, inp: &Inputs| Ok(vec![("y".into(), g.square(inp.get("x")?)?)]);
    assert!(evaluate(&b, false, build).is_ok());
    assert!(matches!(evaluate(&b, true, build).err().unwrap(), Error::NonFinite("square")));
}

#[test]
fn evaluate_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut b = Bindings::new();
    b.insert("x".into(), rand_tensor(&mut rng, &[4, 3]));
    b.insert("w".into(), rand_tensor(&mut rng, &[3, 5]));
    let build = |g: &mut Graph<f64>, inp: &Inputs| {
        let h = g.matmul(inp.get("x")?, inp.get("w")?)?;
        let l = g.logsumexp(h, 1)?;
        Ok(vec![("out".into(), l)])
    };
    let a = evaluate(&b, false, build).unwrap();
    let c = evaluate(&b, false, build).unwrap();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.output("out").unwrap()), bits(c.output("out").unwrap()));
}

#[test]
fn three_layer_forward_matches_straight_line() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[5, 4]);
        let ws = [rand_tensor(&mut rng, &[4, 6]), rand_tensor(&mut rng, &[6, 6]), rand_tensor(&mut rng, &[6, 3])];
        let bs = [rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[3])];

        let mut g = Graph::new();
        let mut h = g.leaf(x.clone());
        for l in 0..3 {
            let w = g.leaf(ws[l].clone());
            let b = g.leaf(bs[l].clone());
            h = g.matmul(h, w).unwrap();
            h = g.bias_add(h, b, 1).unwrap();
            if l < 2 {
                h = g.relu(h).unwrap();
            }
        }
        let got = g.value(h).unwrap();

        // straight-line evaluation
        let mut act: Vec<Vec<f64>> = (0..5).map(|i| x.row(i).to_vec()).collect();
        for l in 0..3 {
            let (din, dout) = (ws[l].shape()[0], ws[l].shape()[1]);
            act = act
                .iter()
                .map(|row| {
                    (0..dout)
                        .map(|j| {
                            let mut s = bs[l].data()[j];
                            for i in 0..din {
                                s += row[i] * ws[l].data()[i * dout + j];
                            }
                            if l < 2 { s.max(0.0) } else { s }
                        })
                        .collect()
                })
                .collect();
        }
        for (i, row) in act.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let o = got.data()[i * 3 + j];
                assert!((o - v).abs() <= 1e-12 * v.abs().max(1.0), "seed {seed}: {o} vs {v}");
            }
        }
    }
}

#[test]
fn square_gradient_example() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0f64));
    let y = g.square(x).unwrap();
    assert_eq!(g.gradient(y, &[x]).unwrap()[0].data(), &[6.0]);
}

#[test]
fn logsumexp_gradient_is_softmax() {
    let v = vec![0.3f64, -1.2, 2.0, 0.0];
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(v.clone()));
    let l = g.logsumexp(x, 0).unwrap();
    let grad = g.gradient(l, &[x]).unwrap().remove(0);
    let z: f64 = v.iter().map(|a| a.exp()).sum();
    for (gi, a) in grad.data().iter().zip(&v) {
        assert!((gi - a.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn logsumexp_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(Tensor::zeros(&[10]));
    let l = g.logsumexp(z, 0).unwrap();
    assert!((g.value(l).unwrap().item().unwrap() - 10f64.ln()).abs() < 1e-15);

    let big = g.leaf(Tensor::from_vec(vec![100.0f64, 0.0]));
    let l = g.logsumexp(big, 0).unwrap();
    let v = g.value(l).unwrap().item().unwrap();
    assert!(v.is_finite() && (v - 100.0).abs() < 1e-12);

    let f32big = {
        let mut g32 = Graph::<f32>::new();
        let x = g32.leaf(Tensor::from_vec(vec![100.0f32, 0.0]));
        let l = g32.logsumexp(x, 0).unwrap();
        g32.value(l).unwrap().item().unwrap()
    };
    assert_eq!(f32big, 100.0);

    let empty = g.leaf(Tensor::zeros(&[2, 0]));
    assert!(g.logsumexp(empty, 1).is_err());
}

#[test]
fn logsumexp_matches_naive() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-19.9..19.9)).collect();
        let naive = v.iter().map(|a| a.exp()).sum::<f64>().ln();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(v));
        let l = g.logsumexp(x, 0).unwrap();
        let got = g.value(l).unwrap().item().unwrap();
        assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0));
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::zeros(&[3, 10]));
    let l = g.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
    assert!((g.value(l).unwrap().item().unwrap() - 10f64.ln()).abs() < 1e-14);

    let mut confident = Tensor::zeros(&[1, 3]);
    confident.data_mut()[1] = 1e3;
    let c = g.leaf(confident);
    let l = g.softmax_cross_entropy(c, &[1]).unwrap();
    assert!(g.value(l).unwrap().item().unwrap() < 1e-12);

    let bad = g.leaf(Tensor::zeros(&[1, 3]));
    assert!(matches!(g.softmax_cross_entropy(bad, &[3]), Err(Error::InvalidArgument(_))));
}

#[test]
fn cross_entropy_matches_two_step() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[6, 4]).map(|v| v * 4.0);
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let mut nll = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row(i);
            let z: f64 = row.iter().map(|a| a.exp()).sum();
            let p = row[y].exp() / z;
            nll -= p.ln();
        }
        nll /= 6.0;
        let mut g = Graph::new();
        let l = g.leaf(x);
        let out = g.softmax_cross_entropy(l, &labels).unwrap();
        assert!((g.value(out).unwrap().item().unwrap() - nll).abs() < 1e-10);
    }
}

#[test]
fn gradient_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0f64, 2.0]));
    let y = g.square(x).unwrap();
    assert!(matches!(g.gradient(y, &[x]), Err(Error::NotScalar(_))));

    let other = Graph::<f64>::new();
    let s = g.sum(y).unwrap();
    assert!(matches!(other.gradient(s, &[x]), Err(Error::ForeignVar)));

    // unrelated and constant inputs get zero gradients
    let c = g.constant(Tensor::from_vec(vec![5.0, 5.0]));
    let unused = g.leaf(Tensor::from_vec(vec![1.0, 1.0, 1.0]));
    let grads = g.gradient(s, &[c, unused]).unwrap();
    assert_eq!(grads[0].data(), &[0.0, 0.0]);
    assert_eq!(grads[1].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gradient_is_linear_over_independent_subgraphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4]));
    let f1 = |g: &mut Graph<f64>, x: Var| {
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    };
    let f2 = |g: &mut Graph<f64>, y: Var| g.logsumexp(y, 0).unwrap();

    let mut g = Graph::new();
    let (x, y) = (g.leaf(a.clone()), g.leaf(b.clone()));
    let (s1, s2) = (f1(&mut g, x), f2(&mut g, y));
    let total = g.add(s1, s2).unwrap();
    let joint = g.gradient(total, &[x, y]).unwrap();

    let mut g1 = Graph::new();
    let x1 = g1.leaf(a);
    let o1 = f1(&mut g1, x1);
    let mut g2 = Graph::new();
    let y2 = g2.leaf(b);
    let o2 = f2(&mut g2, y2);
    assert_eq!(joint[0], g1.gradient(o1, &[x1]).unwrap()[0]);
    assert_eq!(joint[1], g2.gradient(o2, &[y2]).unwrap()[0]);
}

/// Every differentiable op against central differences, 100+ seeds each.
#[test]
fn every_op_matches_finite_differences() {
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var], u64) -> Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v, s| { let o = g.add(v[0], v[1]).unwrap(); weighted_sum(g, o, s) })),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v, s| { let o = g.sub(v[0], v[1]).unwrap(); weighted_sum(g, o, s) })),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v, s| { let o = g.mul(v[0], v[1]).unwrap(); weighted_sum(g, o, s) })),
        ("neg", vec![vec![5]], Box::new(|g, v, s| { let o = g.neg(v[0]).unwrap(); weighted_sum(g, o, s) })),
        ("square", vec![vec![5]], Box::new(|g, v, s| { let o = g.square(v[0]).unwrap(); weighted_sum(g, o, s) })),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|g, v, s| { let o = g.matmul(v[0], v[1]).unwrap(); weighted_sum(g, o, s) })),
        ("bias_add", vec![vec![2, 3, 2], vec![3]], Box::new(|g, v, s| { let o = g.bias_add(v[0], v[1], 1).unwrap(); weighted_sum(g, o, s) })),
        ("conv2d", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3]], Box::new(|g, v, s| { let o = g.conv2d(v[0], v[1], 1).unwrap(); weighted_sum(g, o, s) })),
        ("conv2d_nopad", vec![vec![1, 2, 4, 4], vec![2, 2, 3, 3]], Box::new(|g, v, s| { let o = g.conv2d(v[0], v[1], 0).unwrap(); weighted_sum(g, o, s) })),
        ("avg_pool2", vec![vec![2, 2, 4, 6]], Box::new(|g, v, s| { let o = g.avg_pool2(v[0]).unwrap(); weighted_sum(g, o, s) })),
        ("relu", vec![vec![4, 3]], Box::new(|g, v, s| { let o = g.relu(v[0]).unwrap(); weighted_sum(g, o, s) })),
        ("leaky_relu", vec![vec![4, 3]], Box::new(|g, v, s| { let o = g.leaky_relu(v[0], 0.2).unwrap(); weighted_sum(g, o, s) })),
        ("batch_norm_train_2d", vec![vec![5, 3], vec![3], vec![3]], Box::new(|g, v, s| { let (o, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap(); weighted_sum(g, o, s) })),
        ("batch_norm_train_4d", vec![vec![2, 2, 3, 3], vec![2], vec![2]], Box::new(|g, v, s| { let (o, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap(); weighted_sum(g, o, s) })),
        ("batch_norm_eval", vec![vec![4, 3], vec![3], vec![3]], Box::new(|g, v, s| { let o = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5).unwrap(); weighted_sum(g, o, s) })),
        ("reshape", vec![vec![2, 6]], Box::new(|g, v, s| { let o = g.reshape(v[0], &[3, 4]).unwrap(); weighted_sum(g, o, s) })),
        ("sum_axis", vec![vec![2, 3, 4]], Box::new(|g, v, s| { let o = g.sum_axis(v[0], 1).unwrap(); weighted_sum(g, o, s) })),
        ("mean", vec![vec![3, 4]], Box::new(|g, v, _| g.mean(v[0]).unwrap())),
        ("sum", vec![vec![3, 4]], Box::new(|g, v, _| { let o = g.square(v[0]).unwrap(); g.sum(o).unwrap() })),
        ("logsumexp_axis0", vec![vec![4, 3]], Box::new(|g, v, s| { let o = g.logsumexp(v[0], 0).unwrap(); weighted_sum(g, o, s) })),
        ("logsumexp_axis1", vec![vec![4, 3]], Box::new(|g, v, s| { let o = g.logsumexp(v[0], 1).unwrap(); weighted_sum(g, o, s) })),
        ("softmax_cross_entropy", vec![vec![4, 5]], Box::new(|g, v, _| g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap())),
        ("gather", vec![vec![3, 4]], Box::new(|g, v, s| { let o = g.gather(v[0], &[3, 0, 1]).unwrap(); weighted_sum(g, o, s) })),
        ("l2_norm", vec![vec![2, 3]], Box::new(|g, v, _| g.l2_norm(v[0]).unwrap())),
    ];
    for (name, shapes, build) in &cases {
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
            worst = worst.max(check_op(inputs, &|g, v| build(g, v, seed)));
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
    }
}
