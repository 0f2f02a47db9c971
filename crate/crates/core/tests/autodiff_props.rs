use proptest::prelude::*;
use taco::autodiff::{finite_difference_check, Array, GraphBuilder, NodeId};

type Unary = fn(&mut GraphBuilder, NodeId) -> NodeId;

fn unary_graph(op: Unary, x: &[f64]) -> f64 {
    let mut g = GraphBuilder::new();
    let leaf = g.leaf(&[x.len()]);
    let y = op(&mut g, leaf);
    // A non-uniform weighting so every entry's gradient is exercised distinctly.
    let w = g.constant(Array::vector((0..x.len()).map(|i| 1.0 + 0.5 * i as f64).collect()));
    let wy = g.mul(w, y);
    let out = g.sum(wy);
    let graph = g.finish().unwrap();
    let xv = Array::vector(x.to_vec());
    finite_difference_check(&graph, &[&xv], out, 0, 1e-6).unwrap()
}

fn smooth_unaries() -> Vec<(&'static str, Unary)> {
    vec![
        ("tanh", |g, x| g.tanh(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("log_sigmoid", |g, x| g.log_sigmoid(x)),
        ("exp", |g, x| g.exp(x)),
        ("square", |g, x| g.square(x)),
        ("neg", |g, x| g.neg(x)),
        ("scale", |g, x| g.scale(x, -1.7)),
        ("offset", |g, x| g.offset(x, 0.3)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smooth_primitives_match_finite_differences(x in prop::collection::vec(-2.0f64..2.0, 1..5)) {
        for (name, op) in smooth_unaries() {
            let err = unary_graph(op, &x);
            prop_assert!(err <= 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn log_matches_finite_differences(x in prop::collection::vec(0.5f64..3.0, 1..5)) {
        prop_assert!(unary_graph(|g, x| g.log(x), &x) <= 1e-6);
    }

    #[test]
    fn binary_primitives_match_finite_differences(
        a in prop::collection::vec(-2.0f64..2.0, 3),
        b in prop::collection::vec(0.5f64..2.0, 3),
    ) {
        type Binary = fn(&mut GraphBuilder, NodeId, NodeId) -> NodeId;
        let ops: [(&str, Binary); 4] = [
            ("add", |g, x, y| g.add(x, y)),
            ("sub", |g, x, y| g.sub(x, y)),
            ("mul", |g, x, y| g.mul(x, y)),
            ("div", |g, x, y| g.div(x, y)),
        ];
        for (name, op) in ops {
            let mut g = GraphBuilder::new();
            let x = g.leaf(&[3]);
            let y = g.leaf(&[3]);
            let z = op(&mut g, x, y);
            let s = g.square(z);
            let out = g.sum(s);
            let graph = g.finish().unwrap();
            let (av, bv) = (Array::vector(a.clone()), Array::vector(b.clone()));
            for leaf in 0..2 {
                let err = finite_difference_check(&graph, &[&av, &bv], out, leaf, 1e-6).unwrap();
                prop_assert!(err <= 1e-6, "{name} leaf {leaf}: {err}");
            }
        }
    }

    #[test]
    fn structural_primitives_match_finite_differences(
        m in prop::collection::vec(-1.5f64..1.5, 6),
        w in prop::collection::vec(-1.5f64..1.5, 6),
        r in prop::collection::vec(0.5f64..1.5, 3),
        s in 0.5f64..2.0,
    ) {
        let mut g = GraphBuilder::new();
        let a = g.leaf(&[2, 3]);
        let b = g.leaf(&[3, 2]);
        let row = g.leaf(&[3]);
        let sc = g.leaf(&[]);
        let prod = g.matmul(a, b);
        let lsm = g.log_softmax_rows(prod);
        let added = g.add_row(a, row);
        let scaled = g.mul_row(added, row);
        let rows = g.sum_rows(scaled);
        let div = g.div_scalar(rows, sc);
        let mulled = g.mul_scalar(div, sc);
        let sq = g.square(mulled);
        let picked = g.select(lsm, vec![Some(0), None, Some(3), Some(1)]);
        let flat = g.reshape(prod, &[4]);
        let bsc = g.broadcast(sc, &[4]);
        let mixed = g.mul(flat, bsc);
        let joined = g.concat(&[sq, picked, mixed]);
        let tanh = g.tanh(joined);
        let out = g.sum(tanh);
        let graph = g.finish().unwrap();
        let (mv, wv, rv, sv) = (
            Array::matrix(2, 3, m).unwrap(),
            Array::matrix(3, 2, w).unwrap(),
            Array::vector(r),
            Array::scalar(s),
        );
        for leaf in 0..4 {
            let err = finite_difference_check(&graph, &[&mv, &wv, &rv, &sv], out, leaf, 1e-6).unwrap();
            prop_assert!(err <= 1e-6, "leaf {leaf}: {err}");
        }
    }

    #[test]
    fn evaluation_and_backward_are_pure(x in prop::collection::vec(-2.0f64..2.0, 4)) {
        let mut g = GraphBuilder::new();
        let a = g.leaf(&[4]);
        let t = g.tanh(a);
        let e = g.exp(t);
        let out = g.sum(e);
        let graph = g.finish().unwrap();
        let xv = Array::vector(x);
        let e1 = graph.evaluate(&[&xv]).unwrap();
        let e2 = graph.evaluate(&[&xv]).unwrap();
        prop_assert_eq!(e1.scalar(out).to_bits(), e2.scalar(out).to_bits());
        let g1 = graph.backward(&e1, out).unwrap();
        let g2 = graph.backward(&e2, out).unwrap();
        let bits = |a: &Array| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(g1.leaf(0)), bits(g2.leaf(0)));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(x in prop::collection::vec(-2.0f64..2.0, 3)) {
        let build = |which: u8| {
            let mut g = GraphBuilder::new();
            let a = g.leaf(&[3]);
            let f = g.sigmoid(a);
            let f = g.sum(f);
            let sq = g.square(a);
            let h = g.sum(sq);
            let out = match which {
                0 => f,
                1 => h,
                _ => g.add(f, h),
            };
            (g.finish().unwrap(), out)
        };
        let xv = Array::vector(x);
        let grad = |which| {
            let (graph, out) = build(which);
            let e = graph.evaluate(&[&xv]).unwrap();
            graph.backward(&e, out).unwrap().leaf(0).clone()
        };
        let (gf, gh, gs) = (grad(0), grad(1), grad(2));
        for i in 0..3 {
            prop_assert!((gf.data()[i] + gh.data()[i] - gs.data()[i]).abs() < 1e-14);
        }
    }
}

#[test]
fn two_layer_tanh_mlp_gradient() {
    let mut g = GraphBuilder::new();
    let w1 = g.leaf(&[3, 5]);
    let b1 = g.leaf(&[5]);
    let w2 = g.leaf(&[5, 1]);
    let x = g.constant(Array::matrix(2, 3, vec![0.3, -0.2, 0.9, -1.1, 0.4, 0.05]).unwrap());
    let z = g.matmul(x, w1);
    let z = g.add_row(z, b1);
    let h = g.tanh(z);
    let y = g.matmul(h, w2);
    let out = g.sum(y);
    let graph = g.finish().unwrap();
    let mk = |n: usize, s: f64| (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect::<Vec<_>>();
    let (a, b, c) = (
        Array::matrix(3, 5, mk(15, 0.7)).unwrap(),
        Array::vector(mk(5, 1.3)),
        Array::matrix(5, 1, mk(5, 0.4)).unwrap(),
    );
    for leaf in 0..3 {
        assert!(finite_difference_check(&graph, &[&a, &b, &c], out, leaf, 1e-5).unwrap() <= 1e-4);
    }
}
