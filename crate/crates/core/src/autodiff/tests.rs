use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

fn eval1(dims: &[usize], data: &[f64], f: impl FnOnce(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.constant(t(dims, data));
    let y = f(&mut g, x);
    g.run().unwrap();
    g.value(y).unwrap().data().to_vec()
}

fn grad1(data: &[f64], f: impl FnOnce(&mut Graph<f64>, Var) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.input("x", &[data.len()], true).unwrap();
    let y = f(&mut g, x);
    let mut b = BTreeMap::new();
    b.insert("x".to_string(), t(&[data.len()], data));
    g.forward(&b).unwrap();
    g.backward_scalar(y).unwrap()["x"].data().to_vec()
}

#[test]
fn matmul_hand_case() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = g.matmul(a, b).unwrap();
    g.run().unwrap();
    assert_eq!(g.value(c).unwrap().data(), &[3.0, 7.0]);
    assert_eq!(g.dims(c), &[2, 1]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    assert_eq!(eval1(&[2], &[0.0, 0.0], |g, x| g.softmax(x)), vec![0.5, 0.5]);
}

#[test]
fn l2_normalize_three_four_five() {
    let y = eval1(&[2], &[3.0, 4.0], |g, x| g.l2_normalize(x, 1e-12));
    assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
}

#[test]
fn l2_normalize_zero_row_stays_zero() {
    assert_eq!(eval1(&[1, 3], &[0.0; 3], |g, x| g.l2_normalize(x, 1e-12)), vec![0.0; 3]);
}

#[test]
fn max_gradient_unique_and_tied() {
    assert_eq!(grad1(&[1.0, 2.0], |g, x| g.max_last(x)), vec![0.0, 1.0]);
    assert_eq!(grad1(&[1.0, 1.0], |g, x| g.max_last(x)), vec![1.0, 0.0]);
}

#[test]
fn mean_gradient() {
    assert_eq!(grad1(&[1.0, 2.0, 3.0, 4.0], |g, x| g.mean_last(x)), vec![0.25; 4]);
}

#[test]
fn fan_out_accumulates() {
    // d/dx (x*x + x) = 2x + 1
    let gr = grad1(&[3.0], |g, x| {
        let sq = g.mul(x, x).unwrap();
        g.add(sq, x).unwrap()
    });
    assert_eq!(gr, vec![7.0]);
}

#[test]
fn backward_before_forward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2], true).unwrap();
    let y = g.sum_all(x);
    assert_eq!(g.backward_scalar(y).unwrap_err(), GraphError::NotEvaluated);
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::<f64>::new();
    let a = g.input("a", &[2, 3], false).unwrap();
    let b = g.input("b", &[2, 3], false).unwrap();
    match g.matmul(a, b).unwrap_err() {
        GraphError::ShapeMismatch { node, op, expected, actual } => {
            assert_eq!(node, 2);
            assert_eq!(op, "matmul");
            assert_eq!(expected, vec![2, 3]);
            assert_eq!(actual, vec![2, 3]);
        }
        e => panic!("unexpected {e:?}"),
    }
    let err = g.bind("a", Tensor::zeros(&[3, 2])).unwrap_err();
    assert!(matches!(err, GraphError::ShapeMismatch { node: 0, .. }));
    g.bind("a", Tensor::zeros(&[2, 3])).unwrap();
    assert_eq!(g.run().unwrap_err(), GraphError::Unbound("b".into()));
}

#[test]
fn topological_order_holds() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x", &[2, 2], true).unwrap();
    let y = g.softmax(x);
    let z = g.matmul(y, x).unwrap();
    let w = g.sum_all(z);
    for v in [x, y, z, w] {
        assert!(g.node_inputs(v).iter().all(|i| i.index() < v.index()));
    }
}

#[test]
fn broadcasting_gradients_reduce() {
    // y = sum(a (2x3) + b (3)) -> db = 2 per entry
    let mut g = Graph::new();
    let a = g.input("a", &[2, 3], true).unwrap();
    let b = g.input("b", &[3], true).unwrap();
    let s = g.mul(a, b).unwrap();
    let y = g.sum_all(s);
    let mut m = BTreeMap::new();
    m.insert("a".into(), t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    m.insert("b".into(), t(&[3], &[1., 1., 2.]));
    g.forward(&m).unwrap();
    let gr = g.backward_scalar(y).unwrap();
    assert_eq!(gr["b"].data(), &[5.0, 7.0, 9.0]);
    assert_eq!(gr["a"].data(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    // The true gradient is exactly zero, so the relative measure degenerates:
    // the central difference is pure roundoff, bounded by one ulp of 1.0 / 2eps.
    let point = t(&[5], &[0.3, -1.2, 2.0, 0.1, 0.0]);
    let eps = 1e-4;
    let gr = grad1(point.data(), |g, x| {
        let s = g.softmax(x);
        g.sum_all(s)
    });
    assert!(gr.iter().all(|v| v.abs() < 1e-15), "{gr:?}");
    let mut g = Graph::new();
    let x = g.input("x", &[5], false).unwrap();
    let s = g.softmax(x);
    let y = g.sum_all(s);
    for i in 0..5 {
        let mut f = |d: f64| {
            let mut p = point.clone();
            p.data_mut()[i] += d;
            g.bind("x", p).unwrap();
            g.run().unwrap();
            g.scalar_value(y).unwrap()
        };
        let central = (f(eps) - f(-eps)) / (2.0 * eps);
        assert!(central.abs() <= 2.0 * f64::EPSILON / (2.0 * eps), "{central}");
    }
}

#[test]
fn tie_adjacent_coordinates_are_reported() {
    let point = t(&[1, 3], &[1.0, 1.0 + 1e-6, 0.0]);
    let rep = finite_difference_check(
        |g, x| {
            let m = g.max_last(x);
            Ok(g.sum_all(m))
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert_eq!(rep.tie_adjacent.len(), 2);
    assert!(rep.max_rel_error <= 1e-12);
}

/// Builds `sum(op(x) * w)` so every output coordinate carries a distinct weight.
fn weighted<F>(
    dims: &[usize],
    rng: &mut ChaCha8Rng,
    op: F,
) -> impl FnOnce(&mut Graph<f64>, Var) -> std::result::Result<Var, GraphError>
where
    F: FnOnce(&mut Graph<f64>, Var) -> std::result::Result<Var, GraphError>,
{
    let _ = dims;
    let seed: u64 = rand::Rng::random(rng);
    move |g, x| {
        let y = op(g, x)?;
        let yd = g.dims(y).to_vec();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(Tensor::randn(&yd, 1.0, &mut r));
        let p = g.mul(y, w)?;
        Ok(g.sum_all(p))
    }
}

fn check_primitive<F>(name: &str, dims: &[usize], positive: bool, op: F)
where
    F: Fn(&mut Graph<f64>, Var) -> std::result::Result<Var, GraphError> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut p = Tensor::<f64>::randn(dims, 1.0, &mut rng);
        if positive {
            for v in p.data_mut() {
                *v = v.abs() + 0.5;
            }
        }
        let rep = finite_difference_check(weighted(dims, &mut rng, op), &p, 1e-4).unwrap();
        worst = worst.max(rep.max_rel_error);
    }
    assert!(worst <= 1e-5, "{name}: max relative error {worst}");
}

#[test]
fn every_primitive_passes_finite_differences() {
    check_primitive("exp", &[3, 4], false, |g, x| Ok(g.exp(x)));
    check_primitive("log", &[3, 4], true, |g, x| Ok(g.log(x)));
    check_primitive("gelu", &[3, 4], false, |g, x| Ok(g.gelu(x)));
    check_primitive("scale", &[3, 4], false, |g, x| Ok(g.scale(x, -2.5)));
    check_primitive("mul", &[3, 4], false, |g, x| g.mul(x, x));
    check_primitive("sub", &[3, 4], false, |g, x| {
        let e = g.exp(x);
        g.sub(e, x)
    });
    check_primitive("sum_last", &[3, 4], false, |g, x| Ok(g.sum_last(x)));
    check_primitive("mean_last", &[3, 4], false, |g, x| Ok(g.mean_last(x)));
    check_primitive("max_last", &[3, 4], false, |g, x| Ok(g.max_last(x)));
    check_primitive("softmax", &[3, 4], false, |g, x| Ok(g.softmax(x)));
    check_primitive("l2_normalize", &[3, 4], false, |g, x| Ok(g.l2_normalize(x, 1e-12)));
    check_primitive("clamp", &[3, 4], false, |g, x| Ok(g.clamp(x, -10.0, 10.0)));
    check_primitive("transpose", &[2, 3, 4], false, |g, x| g.transpose(x));
    check_primitive("reshape", &[3, 4], false, |g, x| g.reshape(x, &[2, 6]));
    check_primitive("matmul", &[3, 3], false, |g, x| {
        let xt = g.transpose(x)?;
        g.matmul(x, xt)
    });
    check_primitive("bmm", &[2, 3, 3], false, |g, x| {
        let xt = g.transpose(x)?;
        g.matmul(xt, x)
    });
    check_primitive("concat", &[2, 3, 4], false, |g, x| {
        let e = g.exp(x);
        g.concat(&[x, e], 1)
    });
    check_primitive("slice", &[2, 5, 3], false, |g, x| g.slice(x, 1, 1, 4));
    check_primitive("broadcast", &[3, 4], false, |g, x| {
        let row = g.slice(x, 0, 0, 1)?;
        g.mul(x, row)
    });
    check_primitive("layer_norm", &[3, 4], false, |g, x| {
        let gain = g.slice(x, 0, 0, 1)?;
        let bias = g.slice(x, 0, 2, 3)?;
        g.layer_norm(x, gain, bias, 1e-5)
    });
    check_primitive("attention", &[2, 3, 4], false, |g, x| {
        let xt = g.transpose(x)?;
        let s = g.matmul(x, xt)?;
        let s = g.scale(s, 0.5);
        let p = g.softmax(s);
        g.matmul(p, x)
    });
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let (a, b) = (1.7, -0.3);
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let xv = g.input("x", &[3, 4], true).unwrap();
            let sm = g.softmax(xv);
            let f = g.sum_all(sm);
            let f = {
                let e = g.exp(xv);
                let m = g.mul(e, sm).unwrap();
                let s = g.sum_all(m);
                g.add(f, s).unwrap()
            };
            let gg = {
                let n = g.l2_normalize(xv, 1e-12);
                let mx = g.max_last(n);
                g.sum_all(mx)
            };
            let fa = g.scale(f, ca);
            let gb = g.scale(gg, cb);
            let y = g.add(fa, gb).unwrap();
            let mut m = BTreeMap::new();
            m.insert("x".to_string(), x.clone());
            g.forward(&m).unwrap();
            g.backward_scalar(y).unwrap()["x"].data().to_vec()
        };
        let combined = grad_of(a, b);
        let f_only = grad_of(1.0, 0.0);
        let g_only = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            let expect = a * f_only[i] + b * g_only[i];
            let rel = (combined[i] - expect).abs() / expect.abs().max(1e-300);
            assert!(rel <= 1e-12 || (combined[i] - expect).abs() < 1e-15, "{rel}");
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.input("x", &[4, 6], true).unwrap();
        let xt = g.transpose(xv).unwrap();
        let s = g.matmul(xv, xt).unwrap();
        let p = g.softmax(s);
        let y = g.sum_all(p);
        let l = g.log(y);
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), x.clone());
        g.forward(&m).unwrap();
        let v = g.scalar_value(l).unwrap();
        let gr = g.backward_scalar(l).unwrap();
        (v.to_bits(), gr["x"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
