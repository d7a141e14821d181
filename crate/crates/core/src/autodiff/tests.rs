use super::*;
use crate::gradcheck::check_input;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Checks d(Σ w·op(inputs))/d(input k) against central differences for every k.
fn check_op(name: &str, inputs: &[Tensor], build: &Build) {
    let mut r = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };
    let shape = eval(inputs).unwrap().shape().to_vec();
    let w = Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0));

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward_with(out, w.clone()).unwrap();

    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let f = |probe: &Tensor| -> Result<f64> {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            Ok(eval(&xs)?.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
        };
        let report = check_input(f, x, &analytic, 1e-5).unwrap();
        assert!(report.passes(1e-4), "{name} input {k}: {report:?}");
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

#[test]
fn elementwise_ops() {
    let (a, b) = (rand_t(&[3, 4], 1), rand_t(&[3, 4], 2));
    check_op("add", &[a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]));
    check_op("mul", &[a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]));
    check_op("mul_self", &[a.clone()], &|g, v| g.mul(v[0], v[0]));
    check_op("add_bias", &[a.clone(), rand_t(&[4], 3)], &|g, v| g.add_bias(v[0], v[1]));
    for f in [Unary::Sigmoid, Unary::Silu, Unary::Softplus, Unary::NegExp] {
        check_op("unary", &[a.clone()], &move |g, v| Ok(g.unary(v[0], f)));
    }
    check_op("sum", &[a.clone()], &|g, v| Ok(g.sum(v[0])));
    check_op("reshape", &[a], &|g, v| g.reshape(v[0], &[2, 6]));
}

#[test]
fn affine_and_layer_norm() {
    let x = rand_t(&[2, 3, 4], 4);
    check_op("affine", &[x.clone(), rand_t(&[4, 5], 5), rand_t(&[5], 6)], &|g, v| g.affine(v[0], v[1], Some(v[2])));
    check_op("affine_nobias", &[x.clone(), rand_t(&[4, 5], 7)], &|g, v| g.affine(v[0], v[1], None));
    let gamma = rand_t(&[4], 8).map(|v| 1.0 + 0.5 * v);
    check_op("layer_norm", &[x, gamma, rand_t(&[4], 9)], &|g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn layer_norm_of_constant_rows_is_beta() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 5], 2.5));
    let gamma = g.constant(Tensor::full(&[5], 3.0));
    let beta = g.constant(Tensor::from_fn(&[5], |i| i[0] as f64));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    for (k, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, (k % 5) as f64);
    }
}

#[test]
fn structural_ops() {
    let x = rand_t(&[2, 3, 4], 10);
    let index = vec![0, 5, GATHER_ZERO, 5, 23, 11];
    check_op("gather", &[x.clone()], &move |g, v| g.gather(v[0], index.clone(), &[2, 3]));
    check_op("weighted_sum_mid", &[x.clone()], &|g, v| g.weighted_sum_mid(v[0], vec![0.5, -1.0, 0.25], 2, 4, &[2, 4]));
    check_op("mask_rows", &[x.clone()], &|g, v| g.mask_rows(v[0], vec![1.0, 0.0, 1.0, 0.0, 2.0, 1.0]));
    let z = rand_t(&[2, 3, 3, 4, 2], 11);
    let yc = rand_t(&[2, 3, 3, 2], 12);
    let yt = rand_t(&[2, 4, 2], 13);
    check_op("gated_residual", &[z, yc, yt], &|g, v| g.gated_residual(v[0], v[1], v[2]));
}

#[test]
fn conv_and_scan() {
    check_op("causal_conv", &[rand_t(&[2, 6, 3], 14), rand_t(&[3, 4], 15), rand_t(&[3], 16)], &|g, v| {
        g.causal_conv(v[0], v[1], v[2])
    });
    let (q, l, e, n) = (2, 5, 3, 4);
    let inputs = [
        rand_t(&[q, l, e], 17),
        rand_t(&[q, l, e], 18),
        rand_t(&[e, n], 19),
        rand_t(&[q, l, n], 20),
        rand_t(&[q, l, n], 21),
        rand_t(&[e], 22),
    ];
    // delta and a go through the same transforms the encoder uses
    check_op("scan", &inputs, &|g, v| {
        let delta = g.unary(v[1], Unary::Softplus);
        let a = g.unary(v[2], Unary::NegExp);
        g.scan(v[0], delta, a, v[3], v[4], v[5])
    });
}

#[test]
fn causal_conv_is_causal() {
    let mut g = Graph::new();
    let mut xv = Tensor::zeros(&[1, 6, 1]);
    xv.set(&[0, 2, 0], 1.0);
    let x = g.constant(xv);
    let w = g.constant(Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.causal_conv(x, w, b).unwrap();
    // the newest tap multiplies the current sample
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.3, 0.2, 0.1, 0.0]);
}

#[test]
fn losses() {
    let logits = rand_t(&[4, 2], 23).map(|v| 3.0 * v);
    check_op("softmax_ce", &[logits.clone()], &|g, v| g.softmax_ce(v[0], vec![0, 1, 1, 0]));
    check_op("mse", &[rand_t(&[4, 1], 24)], &|g, v| g.mse(v[0], vec![0.5, -1.0, 2.0, 0.0]));

    let mut g = Graph::new();
    let l = g.constant(Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap());
    let ce = g.softmax_ce(l, vec![1]).unwrap();
    assert!((g.value(ce)[0] - 1000.0).abs() < 1e-9);
}

#[derive(Debug)]
struct Swap;

impl OrthogonalMap for Swap {
    fn apply(&self, x: &Tensor, _transpose: bool) -> Result<Tensor> {
        let mut y = x.clone();
        y.data_mut().reverse();
        Ok(y)
    }
}

#[test]
fn orthogonal_backward_uses_transpose() {
    check_op("orthogonal", &[rand_t(&[5], 25)], &|g, v| g.orthogonal(v[0], Box::new(Swap), false));
}

#[test]
fn params_are_deduplicated() {
    let w = Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap();
    let mut g = Graph::new();
    let a = g.param(&w);
    let b = g.param(&w);
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(g.param_grad(&grads, &w).data(), &[3.0, -4.0]);
    let other = Tensor::zeros(&[3]);
    assert!(!g.is_bound(&other));
    assert_eq!(g.param_grad(&grads, &other), Tensor::zeros(&[3]));
}

#[test]
fn shape_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    assert!(g.affine(a, a, None).is_err());
    assert!(g.gather(a, vec![0, 99], &[2]).is_err());
    assert!(g.softmax_ce(a, vec![0, 5]).is_err());
}
