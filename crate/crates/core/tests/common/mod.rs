//! Shared test oracles: central finite differences and a brute-force DFT.
#![allow(dead_code)]

use std::f64::consts::TAU;

use ndarray::{Array2, Array3, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mptsnet::model::{Model, ModelConfig};
use mptsnet::numerics::{Tape, Tensor, Var};
use mptsnet::spectral::{compute_amplitude_spectrum, identify_main_periods, PeriodSet};
use mptsnet::Result;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]`.
pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Largest absolute difference divided by the largest absolute numeric
/// gradient entry.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric
        .iter()
        .map(|n| n.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    diff / scale
}

/// Central differences of a scalar function with respect to every entry of
/// `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Compares tape gradients with central differences for an op built by
/// `build`. The op output is reduced to a scalar with fixed random weights
/// so every output entry matters. Returns the worst relative error over the
/// inputs.
pub fn check_op<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        uniform(tape.shape(out), &mut rng(seed))
    };
    let scalar = |tape: &mut Tape<f64>, vars: &[Var]| -> Var {
        let out = build(tape, vars).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = scalar(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("input reaches the loss").to_f64_vec())
        .collect();

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = numeric_grad(&inputs[i], |probe| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| tape.constant(if i == j { probe.clone() } else { t.clone() }))
                .collect();
            let loss = scalar(&mut tape, &vars);
            tape.value(loss).item()
        });
        worst = worst.max(rel_err(a, &numeric));
    }
    worst
}

/// `|DFT|` of one real series at bins `0..=l/2` by direct summation.
pub fn naive_dft_amplitude(x: &[f64]) -> Vec<f64> {
    let l = x.len();
    (0..=l / 2)
        .map(|b| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = TAU * (b * t) as f64 / l as f64;
                re += v * ang.cos();
                im -= v * ang.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Mean over variables of the per-variable DFT amplitude of `x[d, l]`.
pub fn naive_spectrum(x: ArrayView2<f64>) -> Vec<f64> {
    let d = x.nrows() as f64;
    let mut acc = vec![0.0; x.ncols() / 2 + 1];
    for row in x.rows() {
        for (a, v) in acc.iter_mut().zip(naive_dft_amplitude(&row.to_vec())) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / d).collect()
}

/// The `k` largest non-DC bins, ties toward lower frequency.
pub fn naive_top_k(amp: &[f64], k: usize) -> Vec<usize> {
    let mut bins: Vec<usize> = (1..amp.len()).collect();
    bins.sort_by(|&a, &b| amp[b].total_cmp(&amp[a]).then(a.cmp(&b)));
    bins.truncate(k);
    bins
}

/// Worst finite-difference error of every differentiable tape op on random
/// inputs in `[-1, 1]`.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(100);
    let mut u = |shape: &[usize]| uniform(shape, &mut r);
    let pair = [u(&[3, 4]), u(&[3, 4])];
    let bcast = [u(&[2, 3, 4]), u(&[4])];
    let mm = [u(&[4, 3]), u(&[3, 2])];
    let bmm = [u(&[2, 4, 3]), u(&[3, 5])];
    let conv = [u(&[2, 8]), u(&[3, 2, 5]), u(&[3])];
    let x3 = [u(&[2, 3, 4])];
    let col = [u(&[2, 3, 1])];
    let cat = [u(&[2, 3, 4]), u(&[2, 1, 4]), u(&[2, 2, 4])];
    let vec6 = [u(&[6])];
    let logits = [u(&[3, 4])];
    let gelu_pts = [Tensor::from_f64(vec![3], &[-2.0, 0.0, 2.0]).unwrap()];
    vec![
        ("add", check_op(&pair, 1, |t, v| t.add(v[0], v[1]))),
        ("sub", check_op(&pair, 2, |t, v| t.sub(v[0], v[1]))),
        ("mul", check_op(&pair, 3, |t, v| t.mul(v[0], v[1]))),
        (
            "add (broadcast)",
            check_op(&bcast, 4, |t, v| t.add(v[0], v[1])),
        ),
        (
            "mul (broadcast)",
            check_op(&bcast, 5, |t, v| t.mul(v[0], v[1])),
        ),
        ("matmul", check_op(&mm, 6, |t, v| t.matmul(v[0], v[1]))),
        (
            "matmul (batched)",
            check_op(&bmm, 7, |t, v| t.matmul(v[0], v[1])),
        ),
        (
            "conv1d",
            check_op(&conv, 8, |t, v| t.conv1d(v[0], v[1], v[2])),
        ),
        ("softmax", check_op(&vec6, 9, |t, v| t.softmax(v[0], 0))),
        ("mean", check_op(&x3, 10, |t, v| t.mean(v[0], 1))),
        ("sum", check_op(&x3, 11, |t, v| Ok(t.sum(v[0])))),
        ("scale", check_op(&x3, 12, |t, v| Ok(t.scale(v[0], -0.7)))),
        (
            "reshape",
            check_op(&x3, 13, |t, v| t.reshape(v[0], &[6, 4])),
        ),
        (
            "permute",
            check_op(&x3, 14, |t, v| t.permute(v[0], &[2, 0, 1])),
        ),
        ("transpose", check_op(&x3, 15, |t, v| t.transpose(v[0]))),
        ("concat", check_op(&cat, 16, |t, v| t.concat(v, 1))),
        ("narrow", check_op(&x3, 17, |t, v| t.narrow(v[0], 2, 1, 2))),
        ("pad", check_op(&x3, 18, |t, v| t.pad(v[0], 2, 1, 3))),
        (
            "broadcast_to",
            check_op(&col, 19, |t, v| t.broadcast_to(v[0], &[2, 3, 4])),
        ),
        ("gelu", check_op(&gelu_pts, 20, |t, v| Ok(t.gelu(v[0])))),
        (
            "cross_entropy",
            check_op(&logits, 21, |t, v| t.cross_entropy(v[0], &[2, 0, 3])),
        ),
    ]
}

/// The tiny end-to-end configuration; returns the worst relative error over
/// parameter tensors.
pub fn tiny_model_gradient_error() -> f64 {
    let mut cfg = ModelConfig::new(2, 12, 2);
    cfg.k = 2;
    cfg.d_embed = 4;
    cfg.heads = 2;
    let periods = PeriodSet::from_frequencies(12, &[3, 2]).unwrap();
    let model = Model::<f64>::init(cfg, periods, 5).unwrap();
    let mut r = rng(15);
    let x = uniform(&[3, 2, 12], &mut r);
    let batch = Array3::from_shape_vec((3, 2, 12), x.data().to_vec()).unwrap();
    let labels = [0usize, 1, 1];
    let analytic = model.loss_and_grads(batch.view(), &labels).unwrap().grads;

    let names: Vec<String> = model.params.entries().into_iter().map(|(n, _)| n).collect();
    let mut worst: f64 = 0.0;
    for (slot, name) in names.iter().enumerate() {
        let base = model.params.entries()[slot].1.clone();
        let numeric = numeric_grad(&base, |probe| {
            let mut m = model.clone();
            *m.params.slots_mut()[slot] = probe.clone();
            m.loss_and_grads(batch.view(), &labels).unwrap().loss
        });
        let a = analytic.entries()[slot].1.to_f64_vec();
        let e = rel_err(&a, &numeric);
        assert!(e.is_finite(), "{name}");
        worst = worst.max(e);
    }
    worst
}

/// Compares the FFT path with the direct DFT on random series; returns the
/// largest absolute amplitude difference and whether every top-k set matched.
pub fn random_series_agreement(cases: usize, seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut sets_match = true;
    for _ in 0..cases {
        let l = r.random_range(4..=128);
        let d = r.random_range(1..=4);
        let x = Array2::from_shape_fn((d, l), |_| r.random_range(-1.0..1.0));
        let got = compute_amplitude_spectrum(x.view()).unwrap();
        let want = naive_spectrum(x.view());
        assert_eq!(got.amp.len(), want.len());
        for (a, b) in got.amp.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let k = r.random_range(1..=(l / 2).min(5));
        let chosen = identify_main_periods(&got, k).unwrap().frequencies();
        sets_match &= chosen == naive_top_k(&want, k);
    }
    (worst, sets_match)
}

pub const VALID_TS: &str = "\
# two samples, two variables, length three
@problemName Fixture
@timeStamps false
@missing false
@univariate false
@dimensions 2
@equalLength true
@seriesLength 3
@classLabel true up down
@data
1.0,2.0,3.0:4.0,5.0,6.0:up
-1.5,0,2.25:7,8,9e-1:down
";

/// Header says length 5, the first record's second variable has 4 values.
pub const RAGGED_TS: &str = "\
@problemName Ragged
@dimensions 2
@equalLength true
@seriesLength 5
@classLabel true a b
@data
1,2,3,4,5:1,2,3,4:a
";

/// The second record has no class field.
pub const MISSING_LABEL_TS: &str = "\
@problemName MissingLabel
@dimensions 1
@equalLength true
@seriesLength 3
@classLabel true a b
@data
1,2,3:a
4,5,6
";

pub const BAD_NUMERIC_TS: &str = "\
@problemName BadNumeric
@dimensions 1
@equalLength true
@seriesLength 3
@classLabel true a b
@data
1,2,3:a
4,five,6:b
";
