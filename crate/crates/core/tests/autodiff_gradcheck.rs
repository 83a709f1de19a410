//! Central finite-difference checks for every primitive on random inputs.

use mfc_core::autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: usize = 100;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn scalarize(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.leaf(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars);
    let root = scalarize(&mut tape, out, weights);
    tape.value(root).data()[0]
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check(name: &str, build: &Build, shapes: &[&[usize]], lo: f64, hi: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
            })
            .collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars);
        let out_shape = tape.value(out).shape().to_vec();
        let n_out = out_shape.iter().product();
        let weights = Tensor::new(out_shape, (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let root = scalarize(&mut tape, out, &weights);
        let grads = tape.backward(root).unwrap();

        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            let mut fd = vec![0.0; inputs[k].len()];
            for (e, slot) in fd.iter_mut().enumerate() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += H;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= H;
                *slot = (eval(build, &plus, &weights) - eval(build, &minus, &weights)) / (2.0 * H);
            }
            worst = worst.max(rel_err(analytic.data(), &fd));
        }
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise_binary() {
    check("add", &|t, v| t.add(v[0], v[1]).unwrap(), &[&[3, 2], &[3, 2]], -2.0, 2.0, 1);
    check("sub", &|t, v| t.sub(v[0], v[1]).unwrap(), &[&[3, 2], &[3, 2]], -2.0, 2.0, 2);
    check("mul", &|t, v| t.mul(v[0], v[1]).unwrap(), &[&[3, 2], &[3, 2]], -2.0, 2.0, 3);
    check("add_row", &|t, v| t.add_row(v[0], v[1]).unwrap(), &[&[4, 3], &[1, 3]], -2.0, 2.0, 4);
}

#[test]
fn scalar_ops_and_pointwise() {
    check("scale", &|t, v| t.scale(v[0], -1.7).unwrap(), &[&[5]], -2.0, 2.0, 5);
    check("shift", &|t, v| t.shift(v[0], 0.3).unwrap(), &[&[5]], -2.0, 2.0, 6);
    check("sigmoid", &|t, v| t.sigmoid(v[0]).unwrap(), &[&[2, 3]], -2.0, 2.0, 7);
    check("exp", &|t, v| t.exp(v[0]).unwrap(), &[&[2, 3]], -2.0, 2.0, 8);
    check("square", &|t, v| t.square(v[0]).unwrap(), &[&[2, 3]], -2.0, 2.0, 9);
    check("sqrt", &|t, v| t.sqrt(v[0]).unwrap(), &[&[2, 3]], 0.1, 2.0, 10);
    check("powi3", &|t, v| t.powi(v[0], 3).unwrap(), &[&[2, 3]], -2.0, 2.0, 11);
    check("clamp", &|t, v| t.clamp(v[0], -1.0, 1.0).unwrap(), &[&[2, 3]], -2.0, 2.0, 12);
}

#[test]
fn linear_algebra() {
    check("matmul", &|t, v| t.matmul(v[0], v[1]).unwrap(), &[&[3, 4], &[4, 2]], -2.0, 2.0, 13);
    check(
        "affine",
        &|t, v| t.affine(v[0], v[1], v[2]).unwrap(),
        &[&[5, 3], &[3, 4], &[1, 4]],
        -2.0,
        2.0,
        14,
    );
}

#[test]
fn reductions_and_layout() {
    check("sum", &|t, v| t.sum(v[0]).unwrap(), &[&[3, 2]], -2.0, 2.0, 15);
    check("sum_rows", &|t, v| t.sum_rows(v[0]).unwrap(), &[&[4, 3]], -2.0, 2.0, 16);
    check("mean_rows", &|t, v| t.mean_rows(v[0]).unwrap(), &[&[4, 3]], -2.0, 2.0, 17);
    check("sum_cols", &|t, v| t.sum_cols(v[0]).unwrap(), &[&[4, 3]], -2.0, 2.0, 18);
    check("broadcast_rows", &|t, v| t.broadcast_rows(v[0], 5).unwrap(), &[&[1, 3]], -2.0, 2.0, 19);
    check("slice_cols", &|t, v| t.slice_cols(v[0], 1, 2).unwrap(), &[&[3, 4]], -2.0, 2.0, 20);
    check(
        "concat_cols",
        &|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap(),
        &[&[3, 1], &[3, 2]],
        -2.0,
        2.0,
        21,
    );
    check("reshape", &|t, v| t.reshape(v[0], vec![1, 6]).unwrap(), &[&[3, 2]], -2.0, 2.0, 22);
}

#[test]
fn convolutions() {
    check(
        "conv1d",
        &|t, v| t.conv1d(v[0], v[1], v[2]).unwrap(),
        &[&[2, 9], &[3, 2, 4], &[3]],
        -2.0,
        2.0,
        23,
    );
    check(
        "conv2d",
        &|t, v| t.conv2d(v[0], v[1], v[2]).unwrap(),
        &[&[2, 5, 6], &[3, 2, 2, 3], &[3]],
        -2.0,
        2.0,
        24,
    );
}

#[test]
fn gaussian_kernel_mean() {
    check(
        "gaussian_kernel_mean",
        &|t, v| t.gaussian_kernel_mean(v[0], 0.7).unwrap(),
        &[&[5, 2]],
        -2.0,
        2.0,
        25,
    );
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = |tape: &mut Tape| {
        let x = tape.leaf(Tensor::matrix(3, 2, vec![0.3, -1.2, 0.8, 0.1, -0.4, 1.9]).unwrap()).unwrap();
        let w = tape.leaf(Tensor::matrix(2, 4, (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap()).unwrap();
        let b = tape.leaf(Tensor::row(vec![0.1, 0.2, -0.1, 0.0])).unwrap();
        let h = tape.affine(x, w, b).unwrap();
        let s = tape.sigmoid(h).unwrap();
        let m = tape.mean_rows(s).unwrap();
        let k = tape.gaussian_kernel_mean(x, 0.5).unwrap();
        let ks = tape.sum(k).unwrap();
        let ms = tape.sum(m).unwrap();
        let root = tape.add(ms, ks).unwrap();
        (x, w, root)
    };
    let mut t1 = Tape::new();
    let (x1, w1, r1) = build(&mut t1);
    let mut t2 = Tape::new();
    let (x2, w2, r2) = build(&mut t2);
    let g1 = t1.backward(r1).unwrap();
    let g2 = t2.backward(r2).unwrap();
    let bits = |t: Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(g1.wrt(x1)), bits(g2.wrt(x2)));
    assert_eq!(bits(g1.wrt(w1)), bits(g2.wrt(w2)));
}
