//! Small dense-tensor reverse-mode differentiation substrate.

pub mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{adam_update, clip_global_norm, Adam, AdamConfig};
pub use params::{ParamId, ParameterSet};
pub use tape::{Binary, Tape, Unary, Var};
pub use tensor::{log_softmax, matmul, matvec, sigmoid, softmax, softplus, transpose, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_grad, rel_error, rng};
    use rand::Rng;

    fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Runs `build` on a fresh tape, back-propagates, and compares with
    /// central differences of the forward value.
    fn check<F>(params: &mut ParameterSet, build: F) -> f64
    where
        F: Fn(&mut Tape, &ParameterSet) -> Var,
    {
        params.zero_grad();
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        tape.backward(loss, params).unwrap();
        let analytic = params.flat_grads();
        let numeric = fd_grad(params, 1e-5, |p| {
            let mut t = Tape::new();
            let l = build(&mut t, p);
            t.scalar(l)
        });
        rel_error(&analytic, &numeric)
    }

    #[test]
    fn square_gradient() {
        let mut p = ParameterSet::new();
        let x = p.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&p, x);
        let y = tape.square(xv);
        assert_eq!(tape.scalar(y), 9.0);
        tape.backward(y, &mut p).unwrap();
        assert_eq!(p.grad(x).data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_grads() {
        let mut p = ParameterSet::new();
        let w = p.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let _unused = tape.param(&p, w);
        let c = tape.constant_scalar(4.0);
        tape.backward(c, &mut p).unwrap();
        assert_eq!(p.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut p = ParameterSet::new();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v, &mut p), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let zero = tape.constant_scalar(0.0);
        let one = tape.constant_scalar(1.0);
        let t = tape.tanh(zero);
        let s = tape.sigmoid(zero);
        let e = tape.exp(one);
        assert_eq!(tape.scalar(t), 0.0);
        assert_eq!(tape.scalar(s), 0.5);
        // e as the limit of the exponential series
        let series: f64 = (0..30).map(|k| 1.0 / (1..=k).map(f64::from).product::<f64>()).sum();
        assert!((tape.scalar(e) - series).abs() < 1e-12);
        assert!((tape.scalar(e) - std::f64::consts::E).abs() < 1e-12);

        let m1 = tape.constant_scalar(-1.0);
        assert!(matches!(tape.log1p(m1), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn backward_touches_every_node_once() {
        let mut p = ParameterSet::new();
        let w = p.insert("w", Tensor::vector(vec![0.3, -0.2])).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&p, w);
        let t = tape.tanh(wv);
        let s = tape.sum(t);
        assert_eq!(tape.backward(s, &mut p).unwrap(), tape.len());
    }

    #[test]
    fn softmax_weighted_sum_matches_fd() {
        let mut r = rng(11);
        let mut p = ParameterSet::new();
        p.insert("z", random_tensor(&mut r, &[5])).unwrap();
        let c = Tensor::vector((0..5).map(|_| r.random_range(-2.0..2.0)).collect());
        let err = check(&mut p, |t, p| {
            let z = t.param(p, p.id("z").unwrap());
            let s = t.softmax(z).unwrap();
            let cv = t.constant(c.clone());
            t.dot(s, cv).unwrap()
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut r = rng(5);
        for trial in 0..20 {
            let mut p = ParameterSet::new();
            p.insert("w", random_tensor(&mut r, &[3, 4])).unwrap();
            p.insert("x", random_tensor(&mut r, &[4])).unwrap();
            p.insert("b", random_tensor(&mut r, &[4, 2])).unwrap();
            p.insert("u", random_tensor(&mut r, &[3])).unwrap();
            p.insert("s", random_tensor(&mut r, &[1])).unwrap();
            let mask = Tensor::vector(vec![0.0, f64::NEG_INFINITY, 0.0]);
            let err = check(&mut p, |t, p| {
                let w = t.param(p, p.id("w").unwrap());
                let x = t.param(p, p.id("x").unwrap());
                let b = t.param(p, p.id("b").unwrap());
                let u = t.param(p, p.id("u").unwrap());
                let s = t.param(p, p.id("s").unwrap());
                let y = t.matvec(w, x).unwrap(); // [3]
                let m = t.matmul(w, b).unwrap(); // [3 x 2]
                let m = t.add_col(m, u).unwrap();
                let mt = t.transpose(m).unwrap(); // [2 x 3]
                let col = t.column(m, 1).unwrap(); // [3]
                let a = t.mul(y, col).unwrap();
                let a = t.sub(a, u).unwrap();
                let a = t.mul(a, s).unwrap(); // scalar broadcast
                let th = t.tanh(a);
                let sg = t.sigmoid(y);
                let ex = t.exp(sg);
                let lp = t.log1p(ex).unwrap();
                let sp = t.softplus(th);
                let sq = t.square(sp);
                let z = t.add(sq, lp).unwrap();
                let cv = t.constant(mask.clone());
                let zm = t.add(z, cv).unwrap();
                let ls = t.log_softmax(zm).unwrap();
                let pick = t.index(ls, 2).unwrap();
                let ent = t.entropy(zm).unwrap();
                let sm = t.softmax(zm).unwrap();
                let sm0 = t.index(sm, 0).unwrap();
                let v2 = t.matvec(mt, u).unwrap();
                let cat = t.concat(&[v2, th]);
                let relu = t.relu(cat);
                let mean = t.mean(relu);
                let scaled = t.scale(mean, 0.7);
                let cl = t.clamp(sm0, 0.2, 0.8);
                let mn = t.minimum(cl, pick).unwrap();
                let total = t.add_all(&[pick, ent, scaled, mn, sm0]).unwrap();
                let sum = t.sum(total);
                sum
            });
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn batched_ops_match_finite_differences() {
        let mut r = rng(8);
        for trial in 0..20 {
            let mut p = ParameterSet::new();
            p.insert("a", random_tensor(&mut r, &[3, 2])).unwrap();
            p.insert("b", random_tensor(&mut r, &[3, 4])).unwrap();
            p.insert("v", random_tensor(&mut r, &[1, 3])).unwrap();
            let mut mask = vec![0.0; 8];
            mask[1] = f64::NEG_INFINITY;
            mask[6] = f64::NEG_INFINITY;
            let mask = Tensor::matrix(2, 4, mask).unwrap();
            let err = check(&mut p, |t, p| {
                let a = t.param(p, p.id("a").unwrap());
                let b = t.param(p, p.id("b").unwrap());
                let v = t.param(p, p.id("v").unwrap());
                let o = t.outer_add(a, b).unwrap(); // [3 x 8]
                let o = t.tanh(o);
                let z = t.matmul(v, o).unwrap(); // [1 x 8]
                let z = t.reshape(z, &[2, 4]).unwrap();
                let m = t.constant(mask.clone());
                let z = t.add(z, m).unwrap();
                let lp = t.log_softmax_rows(z).unwrap();
                let picked = t.gather_rows(lp, &[2, 3]).unwrap();
                let ent = t.entropy_rows(z).unwrap();
                let sel = t.select_cols(b, &[3, 0, 3, 1]).unwrap(); // [3 x 4]
                let w = t.softmax_rows(z).unwrap(); // [2 x 4]
                // two groups of two columns
                let w2 = t.select_cols(w, &[0, 2]).unwrap();
                let g = t.group_combine(sel, w2).unwrap(); // [3 x 2]
                let gs = t.sum(g);
                let s1 = t.sum(picked);
                let s2 = t.sum(ent);
                t.add_all(&[gs, s1, s2]).unwrap()
            });
            assert!(err < 1e-4, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn row_ops_agree_with_vector_ops() {
        let mut r = rng(9);
        let z = random_tensor(&mut r, &[3, 5]);
        let mut t = Tape::new();
        let zm = t.constant(z.clone());
        let ent = t.entropy_rows(zm).unwrap();
        let lp = t.log_softmax_rows(zm).unwrap();
        for row in 0..3 {
            let zr = t.constant(Tensor::vector(z.data()[row * 5..row * 5 + 5].to_vec()));
            let e = t.entropy(zr).unwrap();
            assert_eq!(t.scalar(e), t.value(ent).data()[row]);
            let l = t.log_softmax(zr).unwrap();
            assert_eq!(t.value(l).data(), &t.value(lp).data()[row * 5..row * 5 + 5]);
        }
    }

    #[test]
    fn constant_operands_get_no_adjoint_work() {
        let mut p = ParameterSet::new();
        let w = p.insert("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let c = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let wv = t.param(&p, w);
        let y = t.matmul(wv, c).unwrap();
        let s = t.sum(y);
        t.backward(s, &mut p).unwrap();
        assert_eq!(p.grad(w).data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut r = rng(2);
        let mut p = ParameterSet::new();
        p.insert("w", random_tensor(&mut r, &[4, 4])).unwrap();
        p.insert("x", random_tensor(&mut r, &[4])).unwrap();
        let run = |p: &mut ParameterSet| {
            p.zero_grad();
            let mut t = Tape::new();
            let w = t.param(p, p.id("w").unwrap());
            let x = t.param(p, p.id("x").unwrap());
            let y = t.matvec(w, x).unwrap();
            let y = t.tanh(y);
            let s = t.softmax(y).unwrap();
            let l = t.dot(s, y).unwrap();
            t.backward(l, p).unwrap();
            p.flat_grads()
        };
        let a = run(&mut p);
        let b = run(&mut p);
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_accumulate() {
        let mut p = ParameterSet::new();
        let x = p.insert("x", Tensor::scalar(2.0)).unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let xv = t.param(&p, x);
            let y = t.square(xv);
            t.backward(y, &mut p).unwrap();
        }
        assert_eq!(p.grad(x).data(), &[8.0]);
        p.zero_grad();
        assert_eq!(p.grad(x).data(), &[0.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                z in prop::collection::vec(-20.0f64..20.0, 1..16),
                c in -50.0f64..50.0,
            ) {
                let p = softmax(&z).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let q = softmax(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
