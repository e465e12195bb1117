use std::rc::Rc;

use glean_autograd::gradcheck::check_input_gradient;
use glean_autograd::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

const STEP: f32 = 1e-3;
const TOL: f64 = 1e-2;

#[test]
fn conv2d_input_and_weight_gradients() {
    let w = random(&[5, 3, 3, 3], 1);
    let b = random(&[5], 2);
    for stride in [1, 2] {
        let check = check_input_gradient(&random(&[2, 3, 6, 6], 3), STEP, 7, |x| {
            let t = x.tape();
            x.conv2d(t.constant(w.clone()), Some(t.constant(b.clone())), stride, 1)
        })
        .unwrap();
        assert!(check.passes(TOL), "stride {stride}: {check:?}");
    }
    let x = random(&[2, 3, 5, 5], 4);
    let check = check_input_gradient(&w, STEP, 8, |w| {
        let t = w.tape();
        t.constant(x.clone()).conv2d(w, None, 2, 1)
    })
    .unwrap();
    assert!(check.passes(TOL), "{check:?}");
}

#[test]
fn conv_bias_gradient_is_output_sum() {
    let tape = Tape::new();
    let x = tape.constant(random(&[2, 2, 4, 4], 1));
    let w = tape.constant(random(&[3, 2, 3, 3], 2));
    let b = tape.var(Tensor::zeros(&[3]));
    let y = x.conv2d(w, Some(b), 1, 1).unwrap().sum();
    let g = tape.backward(y);
    assert_eq!(g.get(b).unwrap().data(), &[32.0, 32.0, 32.0]);
}

#[test]
fn linear_gradients() {
    let w = random(&[4, 6], 5);
    let check = check_input_gradient(&random(&[3, 6], 6), STEP, 1, |x| {
        x.linear(x.tape().constant(w.clone()), None)
    })
    .unwrap();
    assert!(check.passes(TOL), "{check:?}");
    let x = random(&[3, 6], 6);
    let check = check_input_gradient(&w, STEP, 2, |w| w.tape().constant(x.clone()).linear(w, None)).unwrap();
    assert!(check.passes(TOL), "{check:?}");
}

#[test]
fn instance_norm_and_modulation_gradients() {
    let gb = random(&[2, 3], 9);
    let check = check_input_gradient(&random(&[2, 3, 4, 4], 10), STEP, 3, |x| {
        let t = x.tape();
        x.instance_norm(1e-5)?.modulate(t.constant(gb.clone()), t.constant(gb.clone()))
    })
    .unwrap();
    assert!(check.passes(TOL), "{check:?}");
    let x = random(&[2, 3, 4, 4], 11);
    let check = check_input_gradient(&gb, STEP, 4, |g| {
        let t = g.tape();
        t.constant(x.clone()).modulate(g, g.scale(0.5))
    })
    .unwrap();
    assert!(check.passes(TOL), "{check:?}");
}

#[test]
fn elementwise_and_structural_gradients() {
    let other = random(&[1, 4, 4, 4], 12);
    let rows = Rc::new(random(&[3, 4], 13));
    let cols = Rc::new(random(&[5, 4], 14));
    let check = check_input_gradient(&random(&[1, 4, 4, 4], 15), STEP, 5, |x| {
        let t = x.tape();
        let o = t.constant(other.clone());
        let a = x.leaky_relu(0.2).add(o)?.mul(x)?.tanh().softplus();
        let b = x.square().sub(o)?.scale(0.3).add_scalar(0.1).clamp(-0.5, 0.5);
        let c = glean_autograd::Var::concat(&[a, b], 1)?.narrow(1, 2, 4)?;
        let d = c.upsample2x()?.pixel_unshuffle(2)?.pixel_shuffle(2)?;
        let e = d.reshape(&[1, 4, 8, 8])?.separable(Rc::new(random(&[5, 8], 16)), Rc::new(random(&[3, 8], 17)))?;
        let f = x.separable(rows.clone(), cols.clone())?;
        glean_autograd::Var::concat(&[e.reshape(&[60])?, f.reshape(&[60])?], 0)
    })
    .unwrap();
    assert!(check.passes(TOL), "{check:?}");
}

#[test]
fn repeat_batch_and_reductions() {
    let check = check_input_gradient(&random(&[1, 2, 3, 3], 20), STEP, 6, |x| {
        let r = x.repeat_batch(3)?;
        glean_autograd::Var::concat(&[r.mean().reshape(&[1])?, r.sum().reshape(&[1])?], 0)
    })
    .unwrap();
    assert!(check.passes(TOL), "{check:?}");
}

#[test]
fn constants_record_no_gradient() {
    let tape = Tape::new();
    let x = tape.constant(random(&[1, 1, 2, 2], 1));
    let y = x.tanh().sum();
    assert!(!y.requires_grad());
    let g = tape.backward(y);
    assert!(g.get(x).is_none());
}

#[test]
fn pixel_shuffle_tile_pattern() {
    // Four constant channels a, b, c, d map onto the 2x2 tile [[a, b], [c, d]].
    let tape = Tape::new();
    let vals = [1.0, 2.0, 3.0, 4.0];
    let x = Tensor::from_fn(&[1, 4, 2, 2], |i| vals[i / 4]);
    let y = tape.constant(x).pixel_shuffle(2).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    let expected = [1., 2., 1., 2., 3., 4., 3., 4., 1., 2., 1., 2., 3., 4., 3., 4.];
    assert_eq!(y.data(), &expected);
}

#[test]
fn pixel_shuffle_rejects_indivisible_channels() {
    let tape = Tape::new();
    assert!(tape.constant(Tensor::zeros(&[1, 3, 2, 2])).pixel_shuffle(2).is_err());
}

proptest! {
    #[test]
    fn pixel_shuffle_round_trip_is_exact(c in 1usize..3, r in 1usize..4, h in 1usize..4, seed in 0u64..1000) {
        let tape = Tape::new();
        let x = random(&[2, c * r * r, h, h + 1], seed);
        let y = tape.constant(x.clone()).pixel_shuffle(r).unwrap();
        let back = y.pixel_unshuffle(r).unwrap().value();
        prop_assert_eq!(back.as_ref(), &x);
        let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = y.value().data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn kinks_fall_back_to_one_sided_or_are_skipped() {
    // the second entry sits less than one step above the kink: only the
    // minus probe crosses, so a one-sided difference is used
    let x = Tensor::new(&[1, 3], vec![0.5, 2e-4, -0.7]).unwrap();
    let check = check_input_gradient(&x, 1e-3, 1, |x| Ok(x.leaky_relu(0.2).sum())).unwrap();
    assert_eq!((check.skipped, check.checked, check.one_sided), (0, 3, 1));
    assert!(check.rel_error < 1e-4, "{check:?}");

    // kinks at ±5e-4 around zero: both probes cross, nothing valid remains
    let x = Tensor::new(&[1, 1], vec![0.0]).unwrap();
    let check = check_input_gradient(&x, 1e-3, 1, |x| {
        Ok(x.add_scalar(-5e-4).leaky_relu(0.2).add(x.add_scalar(5e-4).leaky_relu(0.2))?.sum())
    })
    .unwrap();
    assert_eq!((check.skipped, check.checked), (1, 0));
    assert!(!check.passes(1e-2));
}
