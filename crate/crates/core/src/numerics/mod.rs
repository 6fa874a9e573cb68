//! Dense tensors, a reverse-mode tape, and the layer primitives the networks use.

mod checkpoint;
pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{he_normal, sgd_step};
pub use tape::{Padding, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation with zero padding.
    fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64], pad: usize) -> (Vec<f64>, usize, usize) {
        let [ci, h, w] = x.shape() else { panic!() };
        let [co, _, kh, kw] = k.shape() else { panic!() };
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..*co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for c in 0..*ci {
                        for dy in 0..*kh {
                            for dx in 0..*kw {
                                let iy = (y + dy) as isize - pad as isize;
                                let ix = (xx + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= *h as isize || ix >= *w as isize {
                                    continue;
                                }
                                acc += x.values()[(c * h + iy as usize) * w + ix as usize]
                                    * k.values()[((o * ci + c) * kh + dy) * kw + dx];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    fn conv(x: &Tensor, k: &Tensor, b: &Tensor, pad: Padding) -> crate::Result<Tensor> {
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
        let y = tape.conv2d(xv, kv, bv, pad)?;
        Ok(tape.tensor(y))
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 - 4.0);
        let y = conv(&x, &Tensor::filled(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), Padding::Same).unwrap();
        assert_eq!(y.values(), x.values());
        assert_eq!(y.shape(), &[1, 3, 3]);
    }

    #[test]
    fn conv_all_ones_valid() {
        let y = conv(
            &Tensor::filled(&[1, 3, 3], 1.0),
            &Tensor::filled(&[1, 1, 3, 3], 1.0),
            &Tensor::zeros(&[1]),
            Padding::Valid,
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.values(), &[9.0]);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 5, 5]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        for (pad, p) in [(Padding::Valid, 0), (Padding::Same, 1)] {
            let y = conv(&x, &k, &b, pad).unwrap();
            let (want, oh, ow) = naive_conv(&x, &k, b.values(), p);
            assert_eq!(y.shape(), &[3, oh, ow]);
            for (a, e) in y.values().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_batched_equals_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 2, 6, 7]);
        let k = rand_tensor(&mut rng, &[4, 2, 5, 5]);
        let b = rand_tensor(&mut rng, &[4]);
        let y = conv(&x, &k, &b, Padding::Same).unwrap();
        for n in 0..3 {
            let xn = Tensor::new(vec![2, 6, 7], x.values()[n * 84..(n + 1) * 84].to_vec()).unwrap();
            let (want, _, _) = naive_conv(&xn, &k, b.values(), 2);
            let got = &y.values()[n * 4 * 42..(n + 1) * 4 * 42];
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors_name_the_dimension() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let err = conv(&x, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), Padding::Same).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let err = conv(&x, &Tensor::zeros(&[1, 2, 2, 2]), &Tensor::zeros(&[1]), Padding::Same).unwrap_err();
        assert!(err.to_string().contains("kernel height"), "{err}");
        let err = conv(&x, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2]), Padding::Same).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        let z = rand_tensor(&mut rng, &[2, 6, 6]);
        let (a, c) = (1.7, -0.3);
        let mix = Tensor::from_fn(&[2, 6, 6], |i| a * x.values()[i] + c * z.values()[i]);
        let lhs = conv(&mix, &k, &b, Padding::Same).unwrap();
        let cx = conv(&x, &k, &b, Padding::Same).unwrap();
        let cz = conv(&z, &k, &b, Padding::Same).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.values()[i] + c * cz.values()[i];
            assert!((lhs.values()[i] - rhs).abs() < 1e-10);
        }
    }

    fn pool(x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.maxpool2(v).unwrap();
        tape.tensor(y)
    }

    #[test]
    fn maxpool_cases() {
        let y = pool(&Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.values(), &[4.0]);
        let y = pool(&Tensor::filled(&[2, 4, 6], 2.5));
        assert_eq!(y.shape(), &[2, 2, 3]);
        assert!(y.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w) in [(6, 6), (5, 7)] {
            let x = rand_tensor(&mut rng, &[1, h, w]);
            let y = pool(&x);
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            assert_eq!(y.shape(), &[1, oh, ow]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    // replicate the final row/column for odd extents
                    for yy in [2 * oy, (2 * oy + 1).min(h - 1)] {
                        for xx in [2 * ox, (2 * ox + 1).min(w - 1)] {
                            m = m.max(x.values()[yy * w + xx]);
                        }
                    }
                    assert_eq!(y.values()[oy * ow + ox], m);
                }
            }
        }
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3], vec![-1.0, 2.0, 0.0]).unwrap();
        let r = tape.relu(x);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(r), &[0.0, 2.0, 0.0]);
        assert_eq!(tape.value(s)[2], 0.5);
        let big = tape.constant(vec![2], vec![800.0, -800.0]).unwrap();
        let s = tape.sigmoid(big);
        assert!(tape.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sigmoid_gradient_matches_central_difference() {
        let h = 1e-6;
        for &x0 in &[-3.2, -0.4, 0.0, 0.9, 2.7] {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::scalar(x0).requiring_grad());
            let s = tape.sigmoid(x);
            tape.backward(s).unwrap();
            let analytic = tape.grad(x).unwrap()[0];
            let numeric = (tape::sigmoid(x0 + h) - tape::sigmoid(x0 - h)) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-7, "x={x0}: {analytic} vs {numeric}");
        }
    }

    fn upsample(x: &Tensor, target: (usize, usize)) -> crate::Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.upsample_bilinear(v, target)?;
        Ok(tape.tensor(y))
    }

    #[test]
    fn upsample_constant_identity_and_rejection() {
        let y = upsample(&Tensor::filled(&[1, 1, 1], 3.5), (5, 4)).unwrap();
        assert!(y.values().iter().all(|&v| v == 3.5));
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i * i) as f64);
        assert_eq!(upsample(&x, (3, 4)).unwrap().values(), x.values());
        assert!(upsample(&x, (2, 4)).is_err());
        assert!(upsample(&x, (3, 3)).is_err());
    }

    #[test]
    fn upsample_2x2_to_4x4_closed_form() {
        // corners a b / c d; corner-aligned sample positions are 0, 1/3, 2/3, 1
        let (a, b, c, d) = (1.0, 4.0, -2.0, 7.0);
        let y = upsample(&Tensor::new(vec![1, 2, 2], vec![a, b, c, d]).unwrap(), (4, 4)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (ty, tx) = (i as f64 / 3.0, j as f64 / 3.0);
                let want = (1.0 - ty) * ((1.0 - tx) * a + tx * b) + ty * ((1.0 - tx) * c + tx * d);
                assert!((y.values()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::new();
        let x0 = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0).requiring_grad();
        let x = tape.leaf(&x0);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x).unwrap(), x0.values());

        let not_scalar = tape.leaf(&x0);
        assert!(tape.backward(not_scalar).is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let mut p = Tensor::scalar(1.0).requiring_grad();
        p.set_grad(vec![2.0]).unwrap();
        sgd_step(&mut [&mut p], 0.5).unwrap();
        assert_eq!(p.values(), &[0.0]);
        assert!(p.grad().is_none());

        let mut q = Tensor::scalar(3.0).requiring_grad();
        q.set_grad(vec![5.0]).unwrap();
        sgd_step(&mut [&mut q], 0.0).unwrap();
        assert_eq!(q.values(), &[3.0]);

        let mut r = Tensor::scalar(1.0);
        let err = sgd_step(&mut [&mut r], 0.1).unwrap_err();
        assert!(matches!(err, crate::Error::MissingGradient { index: 0 }));
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p0 - 3)^2 + 2 (p1 + 1)^2, minimizer (3, -1)
        let mut p = Tensor::zeros(&[2]).requiring_grad();
        for _ in 0..100 {
            let mut tape = Tape::new();
            let v = tape.leaf(&p);
            let shift = tape.constant(vec![2], vec![3.0, -1.0]).unwrap();
            let weight = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
            let d = tape.sub(v, shift).unwrap();
            let d2 = tape.mul(d, d).unwrap();
            let wd = tape.mul(d2, weight).unwrap();
            let loss = tape.sum(wd);
            tape.backward(loss).unwrap();
            tape.export_grad(v, &mut p).unwrap();
            sgd_step(&mut [&mut p], 0.2).unwrap();
        }
        assert!((p.values()[0] - 3.0).abs() < 1e-6);
        assert!((p.values()[1] + 1.0).abs() < 1e-6);
    }

    /// Central-difference check of d(sum(w * f(x)))/dx for one primitive.
    fn check_primitive(
        shape: &[usize],
        seed: u64,
        f: impl Fn(&mut Tape, Var) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape).requiring_grad();
        let mut tape = Tape::new();
        let probe = tape.leaf(&x0);
        let y0 = f(&mut tape, probe);
        let weights = rand_tensor(&mut rng, tape.shape(y0));
        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(x);
            let y = f(&mut t, v);
            t.value(y).iter().zip(weights.values()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let y = f(&mut tape, x);
        let w = tape.constant(weights.shape().to_vec(), weights.values().to_vec()).unwrap();
        let wy = tape.mul(y, w).unwrap();
        let loss = tape.sum(wy);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.values_mut()[i] += h;
            let mut minus = x0.clone();
            minus.values_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4 || (g[i] - numeric).abs() < 1e-9, "i={i}: {} vs {numeric}", g[i]);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]).requiring_grad();
        let b = rand_tensor(&mut rng, &[3]).requiring_grad();
        check_primitive(&[2, 2, 5, 6], 1, |t, x| {
            let (kv, bv) = (t.leaf(&k), t.leaf(&b));
            t.conv2d(x, kv, bv, Padding::Same).unwrap()
        });
        check_primitive(&[2, 5, 5], 2, |t, x| {
            let (kv, bv) = (t.leaf(&k), t.leaf(&b));
            t.conv2d(x, kv, bv, Padding::Valid).unwrap()
        });
        check_primitive(&[2, 5, 7], 3, |t, x| t.maxpool2(x).unwrap());
        check_primitive(&[3, 4], 4, |t, x| t.relu(x));
        check_primitive(&[3, 4], 5, |t, x| t.sigmoid(x));
        check_primitive(&[2, 3, 2], 6, |t, x| t.upsample_bilinear(x, (7, 5)).unwrap());
        check_primitive(&[2, 1, 3, 3], 7, |t, x| {
            let up = t.upsample_bilinear(x, (6, 6)).unwrap();
            t.conserve_counts(x, up).unwrap()
        });
        check_primitive(&[2, 2, 3, 3], 8, |t, x| {
            let s = t.sigmoid(x);
            t.concat_channels(&[x, s, x]).unwrap()
        });
    }

    #[test]
    fn kernel_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let b = rand_tensor(&mut rng, &[3]);
        check_primitive(&[3, 2, 3, 3], 13, |t, k| {
            let (xv, bv) = (t.leaf(&x), t.leaf(&b));
            t.conv2d(xv, k, bv, Padding::Same).unwrap()
        });
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        check_primitive(&[3], 14, |t, bias| {
            let (xv, kv) = (t.leaf(&x), t.leaf(&k));
            t.conv2d(xv, kv, bias, Padding::Same).unwrap()
        });
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let k = he_normal(&[4, 3, 3, 3], &mut rng);
            let x = rand_tensor(&mut rng, &[3, 8, 8]);
            let mut tape = Tape::new();
            let (kv, xv) = (tape.leaf(&k), tape.leaf(&x));
            let bv = tape.leaf(&Tensor::zeros(&[4]).requiring_grad());
            let y = tape.conv2d(xv, kv, bv, Padding::Same).unwrap();
            let p = tape.maxpool2(y).unwrap();
            let s = tape.sum(p);
            tape.backward(s).unwrap();
            (tape.value(p).to_vec(), tape.grad(kv).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_and_rejects_garbage() {
        let mut ck = Checkpoint::new();
        ck.push("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 / 7.0)).unwrap();
        ck.push("b", Tensor::scalar(-0.0)).unwrap();
        assert!(ck.push("a.w", Tensor::scalar(1.0)).is_err());
        let bytes = ck.to_bytes();
        assert!(bytes.starts_with(b"DCN1\na.w 2 3\n"));
        let path = std::path::Path::new("x.dcn1");
        assert_eq!(Checkpoint::from_bytes(&bytes, path).unwrap(), ck);
        assert!(Checkpoint::from_bytes(b"NOPE\n", path).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], path).is_err());
    }
}
