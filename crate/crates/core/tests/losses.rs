use approx::assert_relative_eq;
use fastsearch_core::numerics::{Tape, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two classes over four pixels, every label 0, logit gaps `d = z1 - z0` of -2, -1, 1, 2.
fn four_pixels(tape: &mut Tape) -> fastsearch_core::numerics::Var {
    let d = [-2.0, -1.0, 1.0, 2.0];
    let mut z = vec![0.0; 4];
    z.extend(d);
    tape.leaf(Tensor::new(vec![1, 2, 1, 4], z).unwrap())
}

#[test]
fn ohem_keeps_the_hardest_half() {
    let mut tape = Tape::new();
    let x = four_pixels(&mut tape);
    let loss = tape.ohem_cross_entropy(x, &[0; 4], 0.5).unwrap();
    // per-pixel loss ln(1 + e^d); the two largest come from d = 2 and d = 1
    let want = ((1.0 + 2f64.exp()).ln() + (1.0 + 1f64.exp()).ln()) / 2.0;
    assert_relative_eq!(tape.scalar(loss), want, max_relative = 1e-14);

    let g = tape.backward(loss).get(x);
    let g = g.data();
    for (p, d) in [-2.0, -1.0, 1.0, 2.0].into_iter().enumerate() {
        let kept = d > 0.0;
        let want1 = if kept { sigmoid(d) / 2.0 } else { 0.0 };
        assert_relative_eq!(g[4 + p], want1, max_relative = 1e-12);
        assert_relative_eq!(g[p], -want1, max_relative = 1e-12);
    }
}

#[test]
fn ohem_with_full_keep_is_plain_cross_entropy() {
    let mut tape = Tape::new();
    let x = four_pixels(&mut tape);
    let loss = tape.ohem_cross_entropy(x, &[0; 4], 1.0).unwrap();
    let want: f64 = [-2.0f64, -1.0, 1.0, 2.0].iter().map(|d| (1.0 + d.exp()).ln()).sum::<f64>() / 4.0;
    assert_relative_eq!(tape.scalar(loss), want, max_relative = 1e-14);
}

#[test]
fn ohem_rejects_bad_inputs() {
    let mut tape = Tape::new();
    let x = four_pixels(&mut tape);
    assert!(tape.ohem_cross_entropy(x, &[0; 3], 0.5).is_err());
    assert!(tape.ohem_cross_entropy(x, &[0; 4], 0.0).is_err());
    assert!(tape.ohem_cross_entropy(x, &[0, 0, 0, 2], 0.5).is_err());
}

#[test]
fn kl_matches_closed_form_and_gradient() {
    // student p = (1/4, 3/4), teacher q = (1/2, 1/2)
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
    let t = Tensor::new(vec![1, 2, 1, 1], vec![0.7, 0.7]).unwrap();
    let kl = tape.kl_distill(s, &t).unwrap();
    let p = [0.25, 0.75];
    let want = 0.25 * (0.5f64).ln() + 0.75 * (1.5f64).ln();
    assert_relative_eq!(tape.scalar(kl), want, max_relative = 1e-13);
    // d KL / d z_c = p_c (ln p_c - ln q_c - KL)
    let g = tape.backward(kl).get(s);
    for (&pc, &gc) in p.iter().zip(g.data()) {
        assert_relative_eq!(gc, pc * ((pc / 0.5f64).ln() - want), max_relative = 1e-12);
    }
}

#[test]
fn kl_vanishes_with_zero_gradient_when_student_equals_teacher() {
    let z = vec![0.3, -1.2, 2.0, 0.1, 0.0, 0.5];
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![1, 3, 1, 2], z.clone()).unwrap());
    let kl = tape.kl_distill(s, &Tensor::new(vec![1, 3, 1, 2], z).unwrap()).unwrap();
    assert!(tape.scalar(kl).abs() < 1e-15);
    assert!(tape.backward(kl).get(s).data().iter().all(|g| g.abs() < 1e-15));
}

#[test]
fn kl_rejects_shape_mismatch() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::zeros(&[1, 2, 1, 1]));
    assert!(tape.kl_distill(s, &Tensor::zeros(&[1, 3, 1, 1])).is_err());
}
