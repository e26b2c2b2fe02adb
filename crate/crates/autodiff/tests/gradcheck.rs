//! Finite-difference oracles for the tape.
//!
//! Every reverse-mode partial is checked against central differences of an
//! independent re-evaluation of the same graph. The mixed second-order path
//! (parameter gradients of spatial gradients) is checked against finite
//! differences of forward-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdfrec_autodiff::{spatial_eval, NodeId, ParamRef, ParameterStore, Tape, Unary};

/// Central-difference check of `d loss / d theta` for every parameter.
fn fd_check<F>(params: &mut ParameterStore, h: f64, tol: f64, build: F)
where
    F: Fn(&mut Tape, &ParameterStore) -> NodeId,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    let grad = tape.backward(params, loss).expect("backward");
    let eval = |params: &ParameterStore| -> f64 {
        let mut t = Tape::new();
        let l = build(&mut t, params);
        t.scalar(l)
    };
    for i in 0..params.len() {
        let orig = params.values()[i];
        params.values_mut()[i] = orig + h;
        let fp = eval(params);
        params.values_mut()[i] = orig - h;
        let fm = eval(params);
        params.values_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1.0);
        let rel = (grad[i] - fd).abs() / denom;
        assert!(
            rel <= tol,
            "param {i}: reverse {} vs fd {} (rel {rel:.3e} > {tol:.0e})",
            grad[i],
            fd
        );
    }
}

fn fill_random(params: &mut ParameterStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.values_mut() {
        *v = rng.gen_range(-scale..scale);
    }
}

/// A 3-layer network with exactly 17 parameters: 2 -> 3 -> 2 -> sum.
fn tiny_net(params: &mut ParameterStore) -> (ParamRef, ParamRef, ParamRef, ParamRef) {
    let w1 = params.alloc("w1", 2, 3);
    let b1 = params.alloc("b1", 3, 1);
    let w2 = params.alloc("w2", 3, 2);
    let b2 = params.alloc("b2", 2, 1);
    assert_eq!(params.len(), 17);
    (w1, b1, w2, b2)
}

#[test]
fn random_three_layer_network_matches_finite_differences() {
    let mut params = ParameterStore::new();
    let (w1, b1, w2, b2) = tiny_net(&mut params);
    fill_random(&mut params, 7, 0.8);
    fd_check(&mut params, 1e-5, 1e-6, |tape, params| {
        let x = tape.constant(1, 2, &[0.4, -0.7]);
        let h1 = tape.linear(params, w1, Some(b1), x, false);
        let a1 = tape.softplus(h1, 2.0);
        let h2 = tape.linear(params, w2, Some(b2), a1, false);
        let a2 = tape.sigmoid(h2);
        tape.sum_all(a2)
    });
}

#[test]
fn every_pointwise_primitive_matches_finite_differences() {
    let kinds = [
        Unary::Softplus { beta: 100.0 },
        Unary::Softplus { beta: 1.0 },
        Unary::Sigmoid,
        Unary::Exp,
        Unary::Sqrt,
        Unary::Abs,
        Unary::Square,
        Unary::Recip,
        Unary::MaxConst { k: 0.2 },
    ];
    for (ki, kind) in kinds.into_iter().enumerate() {
        let mut params = ParameterStore::new();
        let r = params.alloc("x", 4, 1);
        // positive, away from kinks of abs/max
        for (i, v) in params.slice_mut(r).iter_mut().enumerate() {
            *v = 0.45 + 0.2 * i as f64 + 0.01 * ki as f64;
        }
        fd_check(&mut params, 1e-6, 1e-6, |tape, params| {
            let x = tape.param_vector(params, r);
            let y = tape.pointwise(kind, x);
            let sq = tape.square(y);
            tape.sum_all(sq)
        });
    }
}

#[test]
fn binary_and_reduction_ops_match_finite_differences() {
    let mut params = ParameterStore::new();
    let a = params.alloc("a", 3, 2);
    let b = params.alloc("b", 3, 2);
    let s = params.alloc("s", 1, 1);
    fill_random(&mut params, 11, 0.9);
    params.slice_mut(s)[0] = 1.3;
    fd_check(&mut params, 1e-6, 1e-6, |tape, params| {
        let av = tape.param_vector(params, a);
        let bv = tape.param_vector(params, b);
        let sv = tape.param_vector(params, s);
        let sum = tape.add(av, bv);
        let dif = tape.sub(av, bv);
        let prod = tape.mul(sum, dif);
        let shifted = tape.add_const(bv, 3.0);
        let quot = tape.div(prod, shifted);
        let scaled = tape.mul_scalar(quot, sv);
        let d = tape.dot_rows(scaled, av);
        let ssum = tape.sum_all(d);
        tape.scale(ssum, 0.25)
    });
}

#[test]
fn row_scale_and_slicing_match_finite_differences() {
    let mut params = ParameterStore::new();
    let a = params.alloc("a", 4, 3);
    let s = params.alloc("s", 4, 1);
    fill_random(&mut params, 13, 1.0);
    fd_check(&mut params, 1e-6, 1e-6, |tape, params| {
        let av = tape.param_vector(params, a);
        let sv = tape.param_vector(params, s);
        let rs = tape.row_scale(av, sv);
        let top = tape.slice_rows(rs, 0, 2);
        let bot = tape.slice_rows(rs, 2, 2);
        let left = tape.slice_cols(top, 0, 2);
        let right = tape.slice_cols(bot, 1, 2);
        let g = tape.gather_rows(right, &[1, 0, 1]);
        let gsum = tape.sum_all(g);
        let cat = tape.concat_cols(&[left, right]);
        let rcat = tape.concat_rows(&[cat, cat]);
        let csum = tape.sum_all(rcat);
        let sq = tape.square(csum);
        tape.add(sq, gsum)
    });
}

#[test]
fn compositing_chain_matches_finite_differences() {
    // f values along a ray, sharpness from a raw parameter, colors fixed.
    let mut params = ParameterStore::new();
    let f = params.alloc("f", 6, 1);
    let rho = params.alloc("rho", 1, 1);
    params
        .slice_mut(f)
        .copy_from_slice(&[0.8, 0.45, 0.1, -0.2, -0.55, -0.9]);
    params.slice_mut(rho)[0] = 0.12;
    fd_check(&mut params, 1e-6, 1e-6, |tape, params| {
        let fv = tape.param_vector(params, f);
        let rhov = tape.param_vector(params, rho);
        let srate = tape.scale(rhov, 10.0);
        let s = tape.exp(srate);
        let alphas = tape.alpha_from_sdf(fv, s, 1e-8);
        let w = tape.composite_weights(alphas);
        let colors = tape.constant(5, 3, &[
            0.9, 0.1, 0.2, //
            0.8, 0.2, 0.3, //
            0.7, 0.3, 0.4, //
            0.6, 0.4, 0.5, //
            0.5, 0.5, 0.6,
        ]);
        let c = tape.weighted_sum(w, colors);
        let sq = tape.square(c);
        tape.sum_all(sq)
    });
}

#[test]
fn spatial_eval_of_norm_gives_unit_sphere_gradient() {
    // f(x) = ||x|| at (0, 0, 2) -> gradient (0, 0, 1), no parameters.
    let params = ParameterStore::new();
    let mut tape = Tape::new();
    let ev = spatial_eval(&mut tape, &params, [0.0, 0.0, 2.0], |tape, _, x| {
        let d = tape.dot_rows(x, x);
        tape.sqrt(d)
    });
    assert!((ev.value.value - 2.0).abs() < 1e-10);
    let g = [ev.grad[0].value, ev.grad[1].value, ev.grad[2].value];
    assert!((g[0]).abs() < 1e-10 && (g[1]).abs() < 1e-10 && (g[2] - 1.0).abs() < 1e-10);
    assert_eq!(ev.value.spatial, [g[0], g[1], g[2]]);
}

#[test]
fn spatial_eval_closed_forms_hold_to_1e10() {
    // f(x) = sin(pi x0) * x1 + x2^2: grad = (pi cos(pi x0) x1, sin(pi x0), 2 x2)
    let params = ParameterStore::new();
    let at = [0.3, -0.6, 0.8];
    let mut tape = Tape::new();
    let ev = spatial_eval(&mut tape, &params, at, |tape, _, x| {
        let enc = tape.pos_encode(x, 1, true);
        let x1 = tape.slice_cols(enc, 1, 1);
        let x2 = tape.slice_cols(enc, 2, 1);
        let s0 = tape.slice_cols(enc, 3, 1);
        let t1 = tape.mul(s0, x1);
        let t2 = tape.square(x2);
        tape.add(t1, t2)
    });
    let pi = std::f64::consts::PI;
    let expect = [
        pi * (pi * at[0]).cos() * at[1],
        (pi * at[0]).sin(),
        2.0 * at[2],
    ];
    for k in 0..3 {
        assert!(
            (ev.grad[k].value - expect[k]).abs() < 1e-10,
            "component {k}: {} vs {}",
            ev.grad[k].value,
            expect[k]
        );
    }
}

#[test]
fn bilinear_field_gives_unit_mixed_second_derivative() {
    // f(x) = theta * x0: grad0 = theta and d(grad0)/dtheta = 1.
    let mut params = ParameterStore::new();
    let r = params.alloc("theta", 1, 1);
    params.slice_mut(r)[0] = 1.7;
    let mut tape = Tape::new();
    let ev = spatial_eval(&mut tape, &params, [0.4, 0.0, 0.0], |tape, params, x| {
        let x0 = tape.slice_cols(x, 0, 1);
        let th = tape.param_vector(params, r);
        tape.mul(x0, th)
    });
    assert!((ev.grad[0].value - 1.7).abs() < 1e-12);
    let grad = tape.backward(&params, ev.grad[0].node).unwrap();
    assert!((grad[0] - 1.0).abs() < 1e-12);
}

/// Small MLP of the same shape family as the field network.
fn mlp_params(params: &mut ParameterStore) -> Vec<(ParamRef, ParamRef)> {
    let dims = [(9, 16), (16, 16), (16, 1)];
    dims.iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            (
                params.alloc(&format!("w{i}"), a, b),
                params.alloc(&format!("b{i}"), b, 1),
            )
        })
        .collect()
}

fn mlp_forward(
    tape: &mut Tape,
    params: &ParameterStore,
    layers: &[(ParamRef, ParamRef)],
    x: NodeId,
) -> NodeId {
    let enc = tape.pos_encode(x, 1, true);
    let mut h = enc;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.linear(params, w, Some(b), h, true);
        if i + 1 < layers.len() {
            h = tape.softplus(h, 10.0);
        }
    }
    h
}

#[test]
fn mixed_second_order_matches_fd_of_forward_gradients() {
    // d(||grad_x f||^2)/dtheta vs central differences of the forward-mode
    // gradient norm, relative error <= 1e-4.
    let mut params = ParameterStore::new();
    let layers = mlp_params(&mut params);
    fill_random(&mut params, 21, 0.5);
    let at = [0.25, -0.4, 0.55];

    let eval_grad_norm2 = |params: &ParameterStore| -> f64 {
        let mut tape = Tape::new();
        let ev = spatial_eval(&mut tape, params, at, |tape, params, x| {
            mlp_forward(tape, params, &layers, x)
        });
        ev.grad.iter().map(|g| g.value * g.value).sum()
    };

    let mut tape = Tape::new();
    let ev = spatial_eval(&mut tape, &params, at, |tape, params, x| {
        mlp_forward(tape, params, &layers, x)
    });
    let q = tape.dot_rows(ev.grad_node, ev.grad_node);
    let loss = tape.sum_all(q);
    let grad = tape.backward(&params, loss).unwrap();

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..60 {
        let i = rng.gen_range(0..params.len());
        let orig = params.values()[i];
        params.values_mut()[i] = orig + h;
        let fp = eval_grad_norm2(&params);
        params.values_mut()[i] = orig - h;
        let fm = eval_grad_norm2(&params);
        params.values_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let denom = fd.abs().max(grad[i].abs()).max(1.0);
        let rel = (grad[i] - fd).abs() / denom;
        assert!(rel <= 1e-4, "param {i}: {} vs fd {} ({rel:.2e})", grad[i], fd);
    }
}

#[test]
fn linear_with_jets_matches_finite_differences_end_to_end() {
    // Full jet path: seeded input -> encoder -> linear/softplus stack ->
    // scalar + gradient norm, all checked against FD over every parameter.
    let mut params = ParameterStore::new();
    let layers = mlp_params(&mut params);
    fill_random(&mut params, 42, 0.6);
    fd_check(&mut params, 1e-5, 1e-5, |tape, params| {
        let pts = tape.constant(2, 3, &[0.2, -0.3, 0.5, -0.1, 0.4, -0.6]);
        let x = tape.seed_spatial(pts);
        let f = mlp_forward(tape, params, &layers, x);
        let g = tape.extract_spatial(f);
        let q = tape.dot_rows(g, g);
        let qs = tape.sum_all(q);
        let fs = tape.sum_all(f);
        let fs2 = tape.square(fs);
        tape.add(qs, fs2)
    });
}
