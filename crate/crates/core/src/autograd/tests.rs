use super::gradcheck::check_gradients;
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn assert_grads(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let r = check_gradients(inputs, f, 1e-5).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn broadcast_arithmetic_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[1, 3, 1]).mapv(|x| x + 3.0);
    assert_grads(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let q = g.div(m, v[1]);
        let p = g.mul(q, v[0]);
        Ok(g.sum_all(p))
    });
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 5]).mapv(|x| x.abs() + 0.1);
    assert_grads(&[a], |g, v| {
        let s = g.sigmoid(v[0]);
        let e = g.exp(s);
        let l = g.ln(v[0]);
        let r = g.sqrt(v[0]);
        let q = g.square(l);
        let t = g.add(e, q);
        let t = g.mul(t, r);
        let t = g.scale(t, 0.7);
        let t = g.add_scalar(t, 2.0);
        let t = g.rsub_scalar(1.0, t);
        Ok(g.mean_all(t))
    });
}

#[test]
fn softmax_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 4, 3]);
    let w = rand_tensor(&mut rng, &[2, 4, 3]);
    assert_grads(&[a, w], |g, v| {
        let s = g.softmax(v[0], 1);
        let m = g.mul(s, v[1]);
        let r = g.sum_axes(m, &[1, 2]);
        let r = g.square(r);
        Ok(g.sum_all(r))
    });
}

#[test]
fn softmax_lanes_sum_to_one() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_shape_vec(IxDyn(&[2, 3]), vec![1., 2., 3., -5., 0., 5.]).unwrap());
    let s = g.softmax(a, 1);
    for row in g.value(s).axis_iter(Axis(0)) {
        assert!((row.sum() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn shape_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let b = rand_tensor(&mut rng, &[2, 1, 2, 2]);
    let w = rand_tensor(&mut rng, &[2, 4, 2, 2]);
    assert_grads(&[a, b, w], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let n = g.narrow(c, 1, 1, 3);
        let r = g.reshape(n, &[2, 12])?;
        let r = g.reshape(r, &[2, 3, 2, 2])?;
        let c2 = g.concat(&[r, v[1]], 1)?;
        let m = g.mul(c2, v[2]);
        Ok(g.sum_all(m))
    });
}

#[test]
fn min_max_route_gradients() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::from_shape_vec(IxDyn(&[3]), vec![1.0, 5.0, 2.0]).unwrap());
    let b = g.variable(Tensor::from_shape_vec(IxDyn(&[3]), vec![3.0, 4.0, 2.0]).unwrap());
    let mx = g.maximum(a, b);
    let mn = g.minimum(a, b);
    let two = g.scale(mn, 2.0);
    let s = g.add(mx, two);
    let loss = g.sum_all(s);
    let gr = g.backward(loss);
    assert_eq!(g.value(mx).as_slice().unwrap(), &[3.0, 5.0, 2.0]);
    assert_eq!(gr.get(a).unwrap().as_slice().unwrap(), &[2.0, 1.0, 3.0]);
    assert_eq!(gr.get(b).unwrap().as_slice().unwrap(), &[1.0, 2.0, 0.0]);
}

#[test]
fn conv2d_gradients_strided_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    assert_grads(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let y = g.square(y);
        Ok(g.sum_all(y))
    });
}

#[test]
fn conv2d_pointwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let w = rand_tensor(&mut rng, &[5, 3, 1, 1]);
    assert_grads(&[x, w], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0)?;
        let y = g.square(y);
        Ok(g.sum_all(y))
    });
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    let y = g.value(y);
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    for o in 0..3 {
        for oh in 0..3 {
            for ow in 0..3 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let ih = (oh * 2 + ki) as isize - 1;
                            let iw = (ow * 2 + kj) as isize - 1;
                            if (0..5).contains(&ih) && (0..5).contains(&iw) {
                                acc += w[[o, c, ki, kj]] * x[[0, c, ih as usize, iw as usize]];
                            }
                        }
                    }
                }
                assert!((y[[0, o, oh, ow]] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn depthwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 3, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 1, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    assert_grads(&[x, w, b], |g, v| {
        let y = g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let y = g.square(y);
        Ok(g.sum_all(y))
    });
}

#[test]
fn pixel_corr_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let s = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    assert_grads(&[t, s], |g, v| {
        let y = g.pixel_corr(v[0], v[1], 0.5)?;
        let y = g.square(y);
        Ok(g.sum_all(y))
    });
}

#[test]
fn batch_norm_train_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[3, 2, 2, 3]);
    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    let w = rand_tensor(&mut rng, &[3, 2, 2, 3]);
    assert_grads(&[x, gamma, beta, w], |g, v| {
        let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5);
        let y = g.mul(y, v[3]);
        let y = g.sigmoid(y);
        Ok(g.sum_all(y))
    });
}

#[test]
fn batch_norm_eval_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);
    let mean = Array1::from(vec![0.1, -0.2, 0.3]);
    let var = Array1::from(vec![0.5, 1.5, 2.0]);
    assert_grads(&[x, gamma, beta], |g, v| {
        let y = g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5);
        let y = g.square(y);
        Ok(g.sum_all(y))
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let a = g.variable(Tensor::from_elem(IxDyn(&[2]), 3.0));
    let d = g.detach(a);
    let p = g.mul(a, d);
    let l = g.sum_all(p);
    let gr = g.backward(l);
    // d(a * stopgrad(a))/da = stopgrad(a) = 3
    assert_eq!(gr.get(a).unwrap().as_slice().unwrap(), &[3.0, 3.0]);
    assert!(gr.get(d).is_none());
}

#[test]
fn constants_carry_no_backward() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_elem(IxDyn(&[2]), 1.0));
    let b = g.sigmoid(a);
    assert!(!g.requires_grad(b));
}
