//! Check reverse-mode gradients against central finite differences for a
//! composite expression over every primitive.
//!
//! Run: cargo run --example gradient_check

use rec_attack::gradcore::{
    finite_difference_gradient, max_relative_error, Tape, Tensor,
};

fn main() -> anyhow::Result<()> {
    let point = Tensor::vector(vec![0.3, -0.7, 1.2, 0.05, -0.4, 0.9]);

    // J(x) = mean(relu(W·tanh(x) + x)) + sum(log_softmax(x)[0..2])
    let build = |tape: &mut Tape, x: rec_attack::gradcore::NodeId| {
        let w = tape.constant(
            Tensor::new(
                vec![6, 6],
                (0..36).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect(),
            )
            .unwrap(),
        );
        let t = tape.tanh(x);
        let wt = tape.matmul(w, t)?;
        let s = tape.add(wt, x)?;
        let r = tape.relu(s);
        let m = tape.mean(r);
        let ls = tape.log_softmax(x)?;
        let picked = tape.gather_rows(ls, &[0, 2])?;
        let ps = tape.sum(picked);
        tape.add(m, ps)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let root = build(&mut tape, x)?;
    let grads = tape.backward(root)?;
    let analytic = grads.grad(x);

    let numeric = finite_difference_gradient(
        |p| {
            let mut t = Tape::new();
            let x = t.leaf(p.clone());
            let r = build(&mut t, x).unwrap();
            t.value(r).item()
        },
        &point,
        1e-5,
    )?;

    let err = max_relative_error(&analytic, &numeric, 1e-8);
    println!("analytic grad: {:?}", analytic.data());
    println!("numeric  grad: {:?}", numeric.data());
    println!("max relative error: {err:.3e}");
    assert!(err < 1e-4, "gradient check failed");
    println!("gradient check passed (tolerance 1e-4)");
    Ok(())
}
