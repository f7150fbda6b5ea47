//! Every differentiable op against central differences.

use fedsim::rng;
use fedsim::tensor::{grad_check_entries, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::Rng as _;

const TOL: f64 = 1e-6;
const EPS: f64 = 1e-5;

fn random(shape: &[usize], seed: u64, tag: &str) -> Tensor {
    let mut r = rng::stream(seed, tag);
    Tensor::from_fn(shape, |_| r.random_range(-1.5..1.5))
}

/// Max relative error of `op` with its output contracted against fixed
/// random weights.
fn check(seed: u64, inputs: &[Tensor], op: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>) -> f64 {
    let f = |t: &mut Tape, v: &[Var]| {
        let y = op(t, v)?;
        let w = t.constant(random(t.shape(y), seed, "weights"));
        let p = t.mul(y, w)?;
        Ok::<_, TensorError>(t.sum(p))
    };
    let entries: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, x)| (0..x.len()).map(move |e| (i, e)))
        .collect();
    grad_check_entries(f, inputs, EPS, &entries).unwrap().max_rel_error
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..4, 1usize..5, 1usize..4, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul((m, k, n, s) in dims()) {
        let e = check(s, &[random(&[m, k], s, "a"), random(&[k, n], s, "b")], |t, v| t.matmul(v[0], v[1]));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn transpose((m, n, _, s) in dims()) {
        let e = check(s, &[random(&[m, n], s, "a")], |t, v| t.transpose(v[0]));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn elementwise((m, n, _, s) in dims()) {
        let x = [random(&[m, n], s, "a"), random(&[m, n], s, "b")];
        for e in [
            check(s, &x, |t, v| t.add(v[0], v[1])),
            check(s, &x, |t, v| t.sub(v[0], v[1])),
            check(s, &x, |t, v| t.mul(v[0], v[1])),
            check(s, &x[..1], |t, v| Ok(t.scale(v[0], -0.7))),
            check(s, &x[..1], |t, v| Ok(t.gelu(v[0]))),
        ] {
            prop_assert!(e < TOL, "{e}");
        }
        let mask = random(&[m, n], s, "mask");
        let e = check(s, &x[..1], |t, v| t.mul_const(v[0], &mask));
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn row_broadcasts((m, n, _, s) in dims()) {
        let x = [random(&[m, n], s, "a"), random(&[1, n], s, "r")];
        prop_assert!(check(s, &x, |t, v| t.add_row(v[0], v[1])) < TOL);
        prop_assert!(check(s, &x, |t, v| t.mul_row(v[0], v[1])) < TOL);
        let w = random(&[n, m], s, "w");
        let b = random(&[1, m], s, "bias");
        prop_assert!(check(s, &[x[0].clone(), w, b], |t, v| t.linear(v[0], v[1], v[2])) < TOL);
    }

    #[test]
    fn normalizers((m, n, _, s) in dims()) {
        let x = [random(&[m, n + 2], s, "a")];
        prop_assert!(check(s, &x, |t, v| t.layer_norm(v[0], 1e-5)) < TOL);
        for temp in [0.5, 1.0, 2.0] {
            prop_assert!(check(s, &x, |t, v| t.softmax(v[0], temp)) < TOL);
            prop_assert!(check(s, &x, |t, v| t.log_softmax(v[0], temp)) < TOL);
        }
    }

    #[test]
    fn reductions_and_reshapes((m, n, _, s) in dims()) {
        let x = [random(&[m, n], s, "a")];
        prop_assert!(check(s, &x, |t, v| Ok(t.sum(v[0]))) < TOL);
        prop_assert!(check(s, &x, |t, v| Ok(t.mean(v[0]))) < TOL);
        prop_assert!(check(s, &x, |t, v| t.reshape(v[0], &[n, m])) < TOL);
    }

    #[test]
    fn slicing_and_joining((m, n, k, s) in dims()) {
        let x = [random(&[m, n], s, "a"), random(&[k, n], s, "b"), random(&[m, k], s, "c")];
        prop_assert!(check(s, &x[..2], |t, v| t.concat_rows(&[v[0], v[1]])) < TOL);
        prop_assert!(check(s, &[x[0].clone(), x[2].clone()], |t, v| t.concat_cols(&[v[0], v[1]])) < TOL);
        prop_assert!(check(s, &x[..1], |t, v| t.slice_rows(v[0], m - 1, 1)) < TOL);
        prop_assert!(check(s, &x[..1], |t, v| t.slice_cols(v[0], 0, n)) < TOL);
        let rows: Vec<usize> = (0..m + 2).map(|i| (i * 7 + s as usize) % m).collect();
        prop_assert!(check(s, &x[..1], |t, v| t.gather_rows(v[0], &rows)) < TOL);
        let cols: Vec<usize> = (0..m).map(|i| (i + s as usize) % n).collect();
        prop_assert!(check(s, &x[..1], |t, v| t.pick_rows(v[0], &cols)) < TOL);
    }

    #[test]
    fn patch_extraction(c in 1usize..3, grid in 1usize..3, p in 1usize..4, s in any::<u64>()) {
        let img = random(&[c, grid * p, grid * p], s, "img");
        prop_assert!(check(s, &[img], |t, v| t.patches(v[0], p)) < TOL);
    }
}
