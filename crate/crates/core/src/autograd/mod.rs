//! Dense `f64` tensors and a tape-based reverse-mode differentiator covering
//! the operators used by the residual models.

pub mod conv;
pub mod norm;
mod tape;
mod tensor;

pub use norm::GROUP_NORM_EPS;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let b = t.constant(Tensor::new(vec![2, 2], vec![5., 6., 7., 8.]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[5., 6., 7., 8.]);

        let a = t.constant(Tensor::scalar(2.0).reshape(vec![1, 1]).unwrap());
        let b = t.constant(Tensor::scalar(3.0).reshape(vec![1, 1]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[6.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (av, bv) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
        let mut t = Tape::new();
        let (a, b) = (t.constant(av.clone()), t.constant(bv.clone()));
        let c = t.matmul(a, b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += av.at(&[i, p]) * bv.at(&[p, j]);
                }
                assert!((t.value(c).at(&[i, j]) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let input = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y), &input);

        let w0 = t.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let b0 = t.constant(Tensor::zeros(&[2]));
        let y0 = t.conv2d(x, w0, b0, 1, 1).unwrap();
        assert!(t.value(y0).data().iter().all(|&v| v == 0.0));
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[bn, cout, oh, ow]);
        for n in 0..bn {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[o];
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += w.at(&[o, c, ky, kx]) * x.at(&[n, c, iy as usize, ix as usize]);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * cout + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1, 1), (1, 0), (2, 1)] {
            let xv = random(&[2, 3, 5, 5], &mut rng);
            let wv = random(&[4, 3, 3, 3], &mut rng);
            let bv = random(&[4], &mut rng);
            let expected = naive_conv(&xv, &wv, &bv, stride, pad);
            let mut t = Tape::new();
            let (x, w, b) = (t.constant(xv), t.constant(wv), t.constant(bv));
            let y = t.conv2d(x, w, b, stride, pad).unwrap();
            assert_eq!(t.shape(y), expected.shape());
            for (a, e) in t.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_non_integral_output() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let w = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = t.constant(Tensor::zeros(&[1]));
        assert!(matches!(t.conv2d(x, w, b, 2, 1), Err(Error::Config(_))));
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 4, 3, 3], 3.5));
        let g = t.constant(Tensor::full(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.group_norm(x, 2, g, b, &[true; 4], GROUP_NORM_EPS).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_single_group_standardizes_each_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        // large input variance keeps the eps bias below 1e-6
        let x = t.constant(Tensor::from_fn(&[3, 6, 4, 4], |_| rng.random_range(-10.0..10.0)));
        let g = t.constant(Tensor::full(&[6], 1.0));
        let b = t.constant(Tensor::zeros(&[6]));
        let y = t.group_norm(x, 1, g, b, &[true; 6], GROUP_NORM_EPS).unwrap();
        for sample in t.value(y).data().chunks(6 * 16) {
            let n = sample.len() as f64;
            let mean = sample.iter().sum::<f64>() / n;
            let var = sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
    }

    /// Classical group norm on a tensor that only contains the given channels.
    fn classical_group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64]) -> Tensor {
        let (bn, c) = (x.shape()[0], x.shape()[1]);
        let spatial: usize = x.shape()[2..].iter().product();
        let cg = c / groups;
        let mut out = x.clone();
        for n in 0..bn {
            for g in 0..groups {
                let idx: Vec<usize> = (g * cg..(g + 1) * cg)
                    .flat_map(|ch| (0..spatial).map(move |s| (n * c + ch) * spatial + s))
                    .collect();
                let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / idx.len() as f64;
                let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
                for &i in &idx {
                    let ch = (i / spatial) % c;
                    out.data_mut()[i] = gamma[ch] * (x.data()[i] - mean) / (var + GROUP_NORM_EPS).sqrt() + beta[ch];
                }
            }
        }
        out
    }

    #[test]
    fn group_norm_all_active_equals_classical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = random(&[2, 6, 3, 3], &mut rng);
        let gv = random(&[6], &mut rng);
        let bv = random(&[6], &mut rng);
        let expected = classical_group_norm(&xv, 2, gv.data(), bv.data());
        let mut t = Tape::new();
        let (x, g, b) = (t.constant(xv), t.constant(gv), t.constant(bv));
        let y = t.group_norm(x, 2, g, b, &[true; 6], GROUP_NORM_EPS).unwrap();
        for (a, e) in t.value(y).data().iter().zip(expected.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_half_active_matches_sliced_tensor() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (bn, c, s) = (2, 8, 4);
        let xv = random(&[bn, c, 2, 2], &mut rng);
        let gv = random(&[c], &mut rng);
        let bv = random(&[c], &mut rng);
        // two groups of four, keep channels 0,2 and 5,7
        let active = [true, false, true, false, false, true, false, true];
        let kept: Vec<usize> = (0..c).filter(|&ch| active[ch]).collect();
        let sliced = Tensor::from_fn(&[bn, kept.len(), 2, 2], |i| {
            let n = i / (kept.len() * s);
            let ch = kept[(i / s) % kept.len()];
            xv.data()[(n * c + ch) * s + i % s]
        });
        let sg: Vec<f64> = kept.iter().map(|&ch| gv.data()[ch]).collect();
        let sb: Vec<f64> = kept.iter().map(|&ch| bv.data()[ch]).collect();
        let expected = classical_group_norm(&sliced, 2, &sg, &sb);

        let mut t = Tape::new();
        let (x, g, b) = (t.constant(xv), t.constant(gv), t.constant(bv));
        let y = t.group_norm(x, 2, g, b, &active, GROUP_NORM_EPS).unwrap();
        let out = t.value(y);
        for n in 0..bn {
            for ch in 0..c {
                for p in 0..s {
                    let got = out.data()[(n * c + ch) * s + p];
                    match kept.iter().position(|&k| k == ch) {
                        Some(j) => {
                            let e = expected.data()[(n * kept.len() + j) * s + p];
                            assert!((got - e).abs() < 1e-12);
                        }
                        None => assert_eq!(got, 0.0),
                    }
                }
            }
        }
    }

    #[test]
    fn relu_and_uniform_cross_entropy() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);

        let logits = t.constant(Tensor::full(&[3, 10], 0.7));
        let loss = t.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((t.value(loss).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(t.softmax_cross_entropy(logits, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn sum_and_half_square_gradients() {
        let theta = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let mut t = Tape::new();
        let p = t.param(theta.clone());
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let p = t.param(theta.clone());
        let sq = t.mul(p, p).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), theta.data());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let p = t.param(Tensor::zeros(&[3]));
        let r = t.relu(p);
        assert!(matches!(t.backward(r), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_visits_each_reachable_node_once() {
        let mut t = Tape::new();
        let p = t.param(Tensor::full(&[2], 1.0));
        let a = t.relu(p);
        let b = t.add(a, p).unwrap();
        let l = t.sum(b);
        let g = t.backward(l).unwrap();
        assert_eq!(g.visited_nodes(), 4);
        assert_eq!(g.get(p).unwrap().data(), &[2.0, 2.0]);
    }

    /// Builds `loss = sum(op(...) * r)` with a fixed random projection `r` so
    /// every output element reaches the loss with a distinct weight.
    fn projected_loss(t: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = t.constant(random(t.shape(y), &mut rng));
        let m = t.mul(y, r).unwrap();
        t.sum(m)
    }

    fn check_op(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let eval = |vals: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.param(v.clone())).collect();
            let y = build(&mut t, &vars);
            let l = projected_loss(&mut t, y, seed + 1000);
            (t, vars, l)
        };
        let (t, vars, l) = eval(&inputs);
        let grads = t.backward(l).unwrap();
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).unwrap().data().to_vec();
            let numeric = central_difference(
                |flat| {
                    let mut vals = inputs.clone();
                    vals[k] = Tensor::new(inp.shape().to_vec(), flat.to_vec()).unwrap();
                    let (t, _, l) = eval(&vals);
                    t.value(l).item()
                },
                inp.data(),
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "input {k}: rel err {err}");
        }
    }

    #[test]
    fn finite_difference_each_operator() {
        check_op(&[&[3, 4], &[4, 2]], 1, |t, v| t.matmul(v[0], v[1]).unwrap());
        check_op(&[&[3, 4], &[5, 4], &[5]], 2, |t, v| t.linear(v[0], v[1], v[2]).unwrap());
        check_op(&[&[2, 2, 4, 4], &[3, 2, 3, 3], &[3]], 3, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1).unwrap());
        check_op(&[&[1, 2, 5, 5], &[2, 2, 3, 3], &[2]], 4, |t, v| t.conv2d(v[0], v[1], v[2], 2, 1).unwrap());
        check_op(&[&[2, 4, 3, 3], &[4], &[4]], 5, |t, v| {
            t.group_norm(v[0], 2, v[1], v[2], &[true; 4], GROUP_NORM_EPS).unwrap()
        });
        check_op(&[&[2, 6, 2, 2], &[6], &[6]], 6, |t, v| {
            let active = [true, false, true, true, false, true];
            t.group_norm(v[0], 2, v[1], v[2], &active, GROUP_NORM_EPS).unwrap()
        });
        check_op(&[&[3, 6]], 7, |t, v| t.relu(v[0]));
        check_op(&[&[3, 6], &[3, 6]], 8, |t, v| t.add(v[0], v[1]).unwrap());
        check_op(&[&[2, 3, 2, 2]], 9, |t, v| t.global_avg_pool(v[0]).unwrap());
        check_op(&[&[2, 3, 2, 2]], 10, |t, v| t.flatten(v[0]));
        check_op(&[&[4, 5]], 11, |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]).unwrap());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let wv = random(&[3, 4], &mut rng);
        let xv = random(&[5, 4], &mut rng);
        let (a, b) = (0.7, -1.3);
        let build = |ka: f64, kb: f64| {
            let mut t = Tape::new();
            let w = t.param(wv.clone());
            let x = t.constant(xv.clone());
            let bias = t.constant(Tensor::zeros(&[3]));
            let y = t.linear(x, w, bias).unwrap();
            let r = t.relu(y);
            let l1 = t.sum(r);
            let l2 = t.softmax_cross_entropy(y, &[0, 1, 2, 0, 1]).unwrap();
            let s1 = t.scale(l1, ka);
            let s2 = t.scale(l2, kb);
            let l = t.add(s1, s2).unwrap();
            let g = t.backward(l).unwrap();
            g.get(w).unwrap().clone()
        };
        let combined = build(a, b);
        let g1 = build(1.0, 0.0);
        let g2 = build(0.0, 1.0);
        for i in 0..combined.numel() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut t = Tape::new();
            let x = t.constant(random(&[2, 3, 5, 5], &mut rng));
            let w = t.param(random(&[4, 3, 3, 3], &mut rng));
            let b = t.param(random(&[4], &mut rng));
            let y = t.conv2d(x, w, b, 1, 1).unwrap();
            t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
