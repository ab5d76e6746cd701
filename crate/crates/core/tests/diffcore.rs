use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use taml::diffcore::{finite_diff_check, softplus, FdConfig, ParamSet, Tape, Tensor, Var};
use taml::rng::{stream, Purpose};
use taml::{Error, Result};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(seed, Purpose::Diagnostic, 11);
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an op's output with a fixed random tensor so the check covers
/// the full Jacobian rather than its column sums.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let r = t.constant(randn(t.shape(y), seed));
    let z = t.mul(y, r)?;
    t.sum(z)
}

fn check(params: &ParamSet, f: impl FnMut(&mut Tape, &ParamSet) -> Result<Var>) -> f64 {
    let rep = finite_diff_check(f, params, &FdConfig::default()).unwrap();
    assert!(rep.checked > 0);
    rep.max_rel_err
}

fn params(entries: &[(&str, Tensor)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(*k, v.clone()).unwrap();
    }
    p
}

#[test]
fn affine_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let w = t.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = t.affine(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0]);

    let x = t.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
    let w = t.constant(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
    let b = t.constant(Tensor::vector(vec![1.0]));
    let y = t.affine(x, w, b).unwrap();
    assert_eq!(t.value(y).data(), &[6.0]);
}

#[test]
fn affine_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[2, 3]));
    let w = t.constant(Tensor::zeros(&[4, 2]));
    let b = t.constant(Tensor::zeros(&[2]));
    let err = t.affine(x, w, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("4, 2"), "{msg}");
}

#[test]
fn affine_weight_grad_is_replicated_column_sums() {
    let x = randn(&[3, 4], 1);
    let p = params(&[("w", randn(&[4, 2], 2)), ("b", randn(&[2], 3))]);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let w = t.param(&p, "w").unwrap();
    let b = t.param(&p, "b").unwrap();
    let y = t.affine(xv, w, b).unwrap();
    let loss = t.sum(y).unwrap();
    let mut g = p.clone();
    t.backward(loss, &mut g).unwrap();
    let gw = g.get("w").unwrap().grad().unwrap();
    for k in 0..4 {
        let colsum: f64 = (0..3).map(|i| x.data()[i * 4 + k]).sum();
        for j in 0..2 {
            assert!((gw[k * 2 + j] - colsum).abs() < 1e-12);
        }
    }
    assert_eq!(g.get("b").unwrap().grad().unwrap(), &[3.0, 3.0]);

    let err = check(&p, |t, p| {
        let xv = t.constant(x.clone());
        let w = t.param(p, "w")?;
        let b = t.param(p, "b")?;
        let y = t.affine(xv, w, b)?;
        t.sum(y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn relu_examples_and_gradient() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    let pos = Tensor::vector(vec![0.5, 1.0, 3.0]);
    let x = t.constant(pos.clone());
    let y = t.relu(x).unwrap();
    assert_eq!(t.value(y), &pos);

    // Away from zero the gradient is the indicator mask.
    let p = params(&[("x", Tensor::vector(vec![-1.3, 0.4, 2.0, -0.2, 0.9]))]);
    let mut t = Tape::new();
    let x = t.param(&p, "x").unwrap();
    let y = t.relu(x).unwrap();
    let loss = t.sum(y).unwrap();
    let g = t.gradients(loss).unwrap();
    assert_eq!(g.of(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 1.0]);
    let err = check(&p, |t, p| {
        let x = t.param(p, "x")?;
        let y = t.relu(x)?;
        project(t, y, 5)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softplus_asymptotes() {
    assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    let lo = softplus(-40.0);
    assert!(lo > 0.0 && lo < 1e-17);
    assert!((softplus(40.0) - 40.0).abs() < 1e-12);
    let p = params(&[("x", randn(&[6], 7))]);
    let err = check(&p, |t, p| {
        let x = t.param(p, "x")?;
        let y = t.softplus(x)?;
        project(t, y, 8)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn moments_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap());
    let (m, v) = t.moments(x).unwrap();
    assert_eq!(t.value(m).data(), &[2.0, 4.0]);
    assert_eq!(t.value(v).data(), &[1.0, 1.0]);

    let x = t.constant(Tensor::from_rows(&[vec![1.5, -2.0, 7.0]]).unwrap());
    let (_, v) = t.moments(x).unwrap();
    assert_eq!(t.value(v).data(), &[0.0, 0.0, 0.0]);

    let x = t.constant(Tensor::zeros(&[0, 3]));
    assert!(matches!(t.moments(x), Err(Error::EmptyReduction(_))));
}

#[test]
fn moments_gradient_matches_finite_differences() {
    let p = params(&[("x", randn(&[6, 3], 9))]);
    let err = check(&p, |t, p| {
        let x = t.param(p, "x")?;
        let (_, v) = t.moments(x)?;
        t.sum(v)
    });
    assert!(err < 1e-6, "{err}");
    let err = check(&p, |t, p| {
        let x = t.param(p, "x")?;
        let (m, v) = t.moments(x)?;
        let a = project(t, m, 10)?;
        let b = project(t, v, 11)?;
        t.add(a, b)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_examples() {
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(&[3, 5]));
    let l = t.cross_entropy(z, &[0, 2, 4]).unwrap();
    assert!((t.value(l).item().unwrap() - 5f64.ln()).abs() < 1e-12);

    let mut logits = Tensor::zeros(&[2, 3]);
    logits.data_mut()[1] = 20.0;
    logits.data_mut()[3 + 2] = 20.0;
    let z = t.constant(logits);
    let l = t.cross_entropy(z, &[1, 2]).unwrap();
    assert!(t.value(l).item().unwrap() < 1e-8);

    let z = t.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(t.cross_entropy(z, &[3]), Err(Error::Index(_))));

    let p = params(&[("z", randn(&[4, 3], 12))]);
    let err = check(&p, |t, p| {
        let z = t.param(p, "z")?;
        t.cross_entropy(z, &[0, 2, 1, 2])
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_basics() {
    let p = params(&[("x", Tensor::vector(vec![0.1, -2.0, 3.0]))]);
    let mut t = Tape::new();
    let x = t.param(&p, "x").unwrap();
    let s = t.sum(x).unwrap();
    let mut g = p.clone();
    t.backward(s, &mut g).unwrap();
    assert_eq!(g.get("x").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);

    let p = params(&[("x", Tensor::vector(vec![2.0]))]);
    let mut t = Tape::new();
    let x = t.param(&p, "x").unwrap();
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq).unwrap();
    let mut g = p.clone();
    t.backward(s, &mut g).unwrap();
    assert_eq!(g.get("x").unwrap().grad().unwrap(), &[4.0]);

    let mut t = Tape::new();
    let v = t.variable(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.gradients(v), Err(Error::Contract(_))));
}

#[test]
fn grads_accumulate_across_uses_and_calls() {
    let p = params(&[("x", Tensor::vector(vec![1.5]))]);
    let mut g = p.clone();
    for _ in 0..2 {
        let mut t = Tape::new();
        let x = t.param(&p, "x").unwrap();
        let again = t.param(&p, "x").unwrap();
        assert_eq!(x, again);
        let y = t.add(x, again).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s, &mut g).unwrap();
    }
    assert_eq!(g.get("x").unwrap().grad().unwrap(), &[4.0]);
}

#[test]
fn every_remaining_op_matches_finite_differences() {
    let p = params(&[
        ("a", randn(&[4, 3], 20)),
        ("b", randn(&[3, 5], 21)),
        ("c", randn(&[5, 3], 22)),
        ("v", randn(&[3], 23)),
        ("pos", Tensor::vector(vec![0.7, 1.3, 2.1])),
        ("s", Tensor::vector(vec![0.8])),
    ]);
    type Body = fn(&mut Tape, &ParamSet) -> Result<Var>;
    let cases: Vec<(&str, Body)> = vec![
        ("matmul", |t, p| {
            let (a, b) = (t.param(p, "a")?, t.param(p, "b")?);
            let y = t.matmul(a, b)?;
            project(t, y, 30)
        }),
        ("matmul_bt", |t, p| {
            let (a, c) = (t.param(p, "a")?, t.param(p, "c")?);
            let y = t.matmul_bt(a, c)?;
            project(t, y, 31)
        }),
        ("exp_sqrt_div", |t, p| {
            let pos = t.param(p, "pos")?;
            let e = t.exp(pos)?;
            let r = t.sqrt(pos)?;
            let y = t.div(e, r)?;
            project(t, y, 32)
        }),
        ("row_ops", |t, p| {
            let (a, v, pos) = (t.param(p, "a")?, t.param(p, "v")?, t.param(p, "pos")?);
            let y = t.sub_row(a, v)?;
            let y = t.mul_row(y, pos)?;
            let y = t.add_row(y, v)?;
            project(t, y, 33)
        }),
        ("scalar_ops", |t, p| {
            let (a, s) = (t.param(p, "a")?, t.param(p, "s")?);
            let y = t.mul_by_scalar(a, s)?;
            let y = t.scale(y, -1.7)?;
            let y = t.add_scalar(y, 0.3)?;
            let y = t.mul(y, a)?;
            t.mean(y)
        }),
        ("normalize_rows", |t, p| {
            let a = t.param(p, "a")?;
            let y = t.normalize_rows(a, 1e-12)?;
            project(t, y, 34)
        }),
        ("sq_dist", |t, p| {
            let (a, c) = (t.param(p, "a")?, t.param(p, "c")?);
            let y = t.sq_dist(a, c)?;
            project(t, y, 35)
        }),
        ("slice_concat_weighted", |t, p| {
            let (a, c) = (t.param(p, "a")?, t.param(p, "c")?);
            let top = t.slice_rows(c, 1, 4)?;
            let mixed = t.weighted_sum(&[a, top], &[0.25, 0.75])?;
            let y = t.concat_rows(&[mixed, a])?;
            project(t, y, 36)
        }),
    ];
    for (name, body) in cases {
        let err = check(&p, body);
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![800.0]));
    assert!(matches!(t.exp(x), Err(Error::Numeric(_))));
    let x = t.constant(Tensor::vector(vec![-1.0]));
    assert!(matches!(t.sqrt(x), Err(Error::Numeric(_))));
}

fn grad_of(body: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let v = t.variable(x.clone());
    let loss = body(&mut t, v).unwrap();
    t.gradients(loss).unwrap().of(v).unwrap().to_vec()
}

proptest! {
    #[test]
    fn backward_is_linear(
        xs in prop::collection::vec(-3.0f64..3.0, 6),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let x = Tensor::new(vec![2, 3], xs).unwrap();
        let f = |t: &mut Tape, v: Var| -> Result<Var> {
            let y = t.softplus(v)?;
            let (_, var) = t.moments(y)?;
            t.sum(var)
        };
        let g = |t: &mut Tape, v: Var| -> Result<Var> {
            let y = t.normalize_rows(v, 1e-9)?;
            let y = t.mul(y, v)?;
            t.sum(y)
        };
        let combined = grad_of(|t, v| {
            let fa = f(t, v)?;
            let fa = t.scale(fa, a)?;
            let gb = g(t, v)?;
            let gb = t.scale(gb, b)?;
            t.add(fa, gb)
        }, &x);
        let gf = grad_of(f, &x);
        let gg = grad_of(g, &x);
        for i in 0..6 {
            let expect = a * gf[i] + b * gg[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn moments_translation(
        xs in prop::collection::vec(-5.0f64..5.0, 12),
        c in -10.0f64..10.0,
    ) {
        let x = Tensor::new(vec![4, 3], xs.clone()).unwrap();
        let shifted = Tensor::new(vec![4, 3], xs.iter().map(|v| v + c).collect()).unwrap();
        let mut t = Tape::new();
        let (xv, sv) = (t.constant(x), t.constant(shifted));
        let (m0, v0) = t.moments(xv).unwrap();
        let (m1, v1) = t.moments(sv).unwrap();
        for k in 0..3 {
            prop_assert!(t.value(v0).data()[k] >= 0.0);
            prop_assert!((t.value(m1).data()[k] - t.value(m0).data()[k] - c).abs() < 1e-12);
            prop_assert!((t.value(v1).data()[k] - t.value(v0).data()[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn softplus_is_strictly_positive(x in -700.0f64..700.0) {
        prop_assert!(softplus(x) > 0.0);
    }
}
