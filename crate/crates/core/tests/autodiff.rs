//! Properties of the reverse-mode engine.

use discluster::autodiff::{Graph, Var};
use discluster::Tensor;
use proptest::prelude::*;

fn f(g: &mut Graph, x: Var, w: Var) -> Var {
    let h = g.matmul(x, w).unwrap();
    let e = g.exp(h);
    let s = g.square(e);
    g.sum_all(s)
}

fn h(g: &mut Graph, x: Var, w: Var) -> Var {
    let d = g.sq_dist(x, x).unwrap();
    let r = g.relu(w);
    let a = g.sum_all(d);
    let b = g.sum_all(r);
    g.mul(a, b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(
        x in prop::collection::vec(-1.0f64..1.0, 6),
        w in prop::collection::vec(-1.0f64..1.0, 6),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let grad = |combine: &dyn Fn(&mut Graph, Var, Var) -> Var| {
            let mut g = Graph::new();
            let xv = g.leaf(Tensor::matrix(2, 3, x.clone()).unwrap());
            let wv = g.leaf(Tensor::matrix(3, 2, w.clone()).unwrap());
            let root = combine(&mut g, xv, wv);
            let grads = g.backward(root).unwrap();
            (grads.get(xv).into_data(), grads.get(wv).into_data())
        };
        let (fx, fw) = grad(&|g, x, w| f(g, x, w));
        let (hx, hw) = grad(&|g, x, w| h(g, x, w));
        let (cx, cw) = grad(&|g, x, w| {
            let p = f(g, x, w);
            let q = h(g, x, w);
            let p = g.scale(p, a);
            let q = g.scale(q, b);
            g.add(p, q).unwrap()
        });
        for (c, (p, q)) in cx.iter().chain(&cw).zip(fx.iter().chain(&fw).zip(hx.iter().chain(&hw))) {
            let want = a * p + b * q;
            prop_assert!((c - want).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", c, want);
        }
    }
}

#[test]
fn detach_gives_exact_zero_and_runs_are_bitwise_equal() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![0.3, -1.2, 2.0]).unwrap());
        let d = g.detach(x);
        let e = g.exp(d);
        let y = g.mul(e, x).unwrap();
        let root = g.sum_all(y);
        let grads = g.backward(root).unwrap();
        (g.value(root).item().unwrap().to_bits(), grads.get(x).into_data())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    // Only the undetached factor contributes: d/dx (c·x) = c.
    let want: Vec<f64> = [0.3f64, -1.2, 2.0].iter().map(|v| v.exp()).collect();
    assert_eq!(g1, want);
}
