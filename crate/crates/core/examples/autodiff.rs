//! Reverse-mode differentiation of a small regression loss, checked against
//! central finite differences.

use taco::autodiff::{finite_difference_check, Array, GraphBuilder};

fn main() -> taco::Result<()> {
    let mut g = GraphBuilder::new();
    let w = g.leaf(&[2, 3]);
    let b = g.leaf(&[3]);
    let x = g.constant(Array::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.25], vec![-0.3, 0.8]])?);
    let y = g.constant(Array::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])?);
    let z = g.matmul(x, w);
    let z = g.add_row(z, b);
    let log_p = g.log_softmax_rows(z);
    let picked = g.mul(log_p, y);
    let total = g.sum(picked);
    let loss = g.neg(total);
    let graph = g.finish()?;

    let wv = Array::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.05, 0.4, -0.1])?;
    let bv = Array::zeros(&[3]);
    let eval = graph.evaluate(&[&wv, &bv])?;
    let grads = graph.backward(&eval, loss)?;
    println!("loss = {:.6}", eval.scalar(loss));
    println!("dloss/dW = {:?}", grads.leaf(0).data());
    println!("dloss/db = {:?}", grads.leaf(1).data());
    for leaf in 0..2 {
        let err = finite_difference_check(&graph, &[&wv, &bv], loss, leaf, 1e-5)?;
        println!("leaf {leaf}: finite-difference rel err {err:.2e}");
    }
    Ok(())
}
