use fsaa_core::autodiff::Tape;
use fsaa_core::{Error, Scalar, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn<T: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (bn, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = k.shape()[0];
    let mut out = vec![0.0; bn * co * h * w];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.data()[((n * ci + c) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((o * ci + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[((n * co + o) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

fn conv<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let tape = Tape::new();
    let (x, k, b) = (
        tape.constant(x.clone()),
        tape.constant(k.clone()),
        tape.constant(b.clone()),
    );
    x.conv2d(k, b).unwrap().to_tensor()
}

#[test]
fn conv_identity_kernel_returns_input() {
    let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
    let mut k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    assert_eq!(conv(&x, &k, &Tensor::zeros(&[1])), x);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..100 {
        let (b, ci, co) = (1 + i % 2, 1 + i % 8, 1 + (i * 7) % 5);
        let (h, w) = (1 + (i * 3) % 9, 1 + (i * 5) % 9);
        let x: Tensor<f64> = randn(&mut rng, &[b, ci, h, w]);
        let k: Tensor<f64> = randn(&mut rng, &[co, ci, 3, 3]);
        let bias: Tensor<f64> = randn(&mut rng, &[co]);
        let oracle = naive_conv(&x, &k, &bias);
        let got = conv(&x, &k, &bias);
        let got32 = conv(&x.cast::<f32>(), &k.cast::<f32>(), &bias.cast::<f32>());
        let oracle32 = naive_conv(
            &x.cast::<f32>().cast(),
            &k.cast::<f32>().cast(),
            &bias.cast::<f32>().cast(),
        );
        for (j, o) in oracle.iter().enumerate() {
            assert!((got.data()[j] - o).abs() < 1e-6, "instance {i}");
            // Single-precision storage: bounded by rounding of a <= 73-term sum.
            assert!((got32.data()[j] as f64 - oracle32[j]).abs() < 1e-4 * (1.0 + oracle32[j].abs()));
        }
    }
}

#[test]
fn conv_on_spec_sized_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Tensor<f64> = randn(&mut rng, &[2, 4, 5, 5]);
    let k: Tensor<f64> = randn(&mut rng, &[3, 4, 3, 3]);
    let b = Tensor::zeros(&[3]);
    let got = conv(&x, &k, &b);
    assert_eq!(got.shape(), &[2, 3, 5, 5]);
    for (g, o) in got.data().iter().zip(naive_conv(&x, &k, &b)) {
        assert!((g - o).abs() < 1e-6);
    }
}

#[test]
fn conv_channel_mismatch_is_a_dimension_error() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[3, 4, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(x.conv2d(k, b), Err(Error::Dimension { .. })));
}

#[test]
fn maxpool_single_window_and_floor_chain() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert_eq!(x.maxpool2().unwrap().to_tensor().data(), &[4.0]);
    let mut v = tape.constant(Tensor::zeros(&[1, 1, 84, 84]));
    let mut sides = vec![];
    for _ in 0..3 {
        v = v.maxpool2().unwrap();
        sides.push(v.shape()[2]);
    }
    assert_eq!(sides, vec![42, 21, 10]);
    let tiny = tape.constant(Tensor::zeros(&[1, 1, 1, 4]));
    assert!(matches!(tiny.maxpool2(), Err(Error::Dimension { .. })));
}

#[test]
fn maxpool_gradient_goes_to_first_maximum() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(&t64(&[1, 1, 2, 2], &[5.0, 5.0, 5.0, 1.0]).with_grad());
    let g = tape.backward(x.maxpool2().unwrap().sum()).unwrap();
    assert_eq!(g.wrt(x), vec![1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn batchnorm_train_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Tensor<f64> = randn(&mut rng, &[4, 3, 5, 5]);
    let x = Tensor::from_fn(x.shape(), |i| x.data()[i] * 3.0 + 2.0);
    let tape = Tape::new();
    let (y, m) = tape
        .constant(x)
        .batch_norm_train(
            tape.constant(Tensor::ones(&[3])),
            tape.constant(Tensor::zeros(&[3])),
            1e-5,
        )
        .unwrap();
    assert_eq!(m.count, 100);
    let y = y.to_tensor();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| y.data()[(b * 3 + c) * 25..][..25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / 100.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batchnorm_eval_with_unit_stats_is_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f64> = randn(&mut rng, &[2, 3, 4, 4]);
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .batch_norm_eval(
            tape.constant(Tensor::ones(&[3])),
            tape.constant(Tensor::zeros(&[3])),
            &[0.0; 3],
            &[1.0; 3],
            1e-5,
        )
        .unwrap()
        .to_tensor();
    assert!(y.max_abs_diff(&x) < 1e-5 * (1.0 + x.data().iter().fold(0.0f64, |a, v| a.max(v.abs()))));
}

#[test]
fn batchnorm_degenerate_batch_is_rejected() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    let r = x.batch_norm_train(
        tape.constant(Tensor::ones(&[2])),
        tape.constant(Tensor::zeros(&[2])),
        1e-5,
    );
    assert!(matches!(r, Err(Error::DegenerateBatch { count: 1, .. })));
}

#[test]
fn elementwise_values() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(x.relu().to_tensor().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().to_tensor().item(), 0.5);
    let z = tape.leaf(&Tensor::new(&[1], vec![0.0f32]).unwrap().with_grad());
    assert_eq!(tape.backward(z.relu().sum()).unwrap().wrt(z), vec![0.0]);
}

#[test]
fn linear_hand_arithmetic_and_identity() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let y = x
        .linear(
            tape.constant(t64(&[1, 2], &[3.0, 4.0])),
            tape.constant(t64(&[1], &[5.0])),
        )
        .unwrap();
    assert_eq!(y.to_tensor().data(), &[16.0]);
    let eye = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let same = x.linear(eye, tape.constant(Tensor::zeros(&[2]))).unwrap();
    assert_eq!(same.to_tensor().data(), &[1.0, 2.0]);
    let wrong = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(
        x.linear(wrong, tape.constant(Tensor::zeros(&[1]))),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn global_avg_pool_values() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
    assert_eq!(x.global_avg_pool().unwrap().to_tensor().data(), &[3.0]);
    let c = tape.constant(Tensor::full(&[2, 3, 4, 5], 1.25));
    assert!(c
        .global_avg_pool()
        .unwrap()
        .to_tensor()
        .data()
        .iter()
        .all(|&v| v == 1.25));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r: Tensor<f64> = randn(&mut rng, &[3, 7, 9]);
    let got = tape.constant(r.clone()).global_avg_pool().unwrap().to_tensor();
    for c in 0..3 {
        let mut s = 0.0;
        for v in &r.data()[c * 63..(c + 1) * 63] {
            s += v;
        }
        assert!((got.data()[c] - s / 63.0).abs() < 1e-6);
    }
}

fn naive_spp(x: &Tensor<f64>, levels: &[usize]) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![];
    for &l in levels {
        for ch in 0..c {
            for i in 0..l {
                for j in 0..l {
                    let mut m = f64::NEG_INFINITY;
                    for y in (i * h / l)..((i + 1) * h / l) {
                        for xx in (j * w / l)..((j + 1) * w / l) {
                            m = m.max(x.data()[(ch * h + y) * w + xx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

#[test]
fn spp_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(
        x.spatial_pyramid_pool(&[1, 2]).unwrap().to_tensor().data(),
        &[4.0, 1.0, 2.0, 3.0, 4.0]
    );
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r: Tensor<f64> = randn(&mut rng, &[2, 3, 5, 6]);
    let g = tape.constant(r.clone()).spatial_pyramid_pool(&[1]).unwrap().to_tensor();
    for i in 0..6 {
        let m = r.data()[i * 30..(i + 1) * 30]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        assert_eq!(g.data()[i], m);
    }
    for side in [10, 3] {
        let f = tape.constant(Tensor::<f64>::zeros(&[64, side, side]));
        assert_eq!(f.spatial_pyramid_pool(&[1, 2, 3]).unwrap().shape(), vec![896]);
    }
    let small = tape.constant(Tensor::<f64>::zeros(&[1, 2, 5]));
    assert!(matches!(small.spatial_pyramid_pool(&[3]), Err(Error::Dimension { .. })));
}

#[test]
fn spp_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(3..12), rng.gen_range(3..12));
        let x: Tensor<f64> = randn(&mut rng, &[c, h, w]);
        let tape = Tape::new();
        let got = tape
            .constant(x.clone())
            .spatial_pyramid_pool(&[1, 2, 3])
            .unwrap()
            .to_tensor();
        let oracle = naive_spp(&x, &[1, 2, 3]);
        for (g, o) in got.data().iter().zip(oracle) {
            assert!((g - o).abs() < 1e-6);
        }
    }
}

#[test]
fn channel_scale_and_broadcast_mul_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..9), rng.gen_range(1..8), rng.gen_range(1..8));
        let f: Tensor<f32> = randn(&mut rng, &[c, h, w]);
        let wt: Tensor<f32> = randn(&mut rng, &[c]);
        let map: Tensor<f32> = randn(&mut rng, &[1, h, w]);
        let tape = Tape::new();
        let cs = tape
            .constant(f.clone())
            .channel_scale(tape.constant(wt.clone()))
            .unwrap()
            .to_tensor();
        let bm = tape
            .constant(f.clone())
            .broadcast_mul(tape.constant(map.clone()))
            .unwrap()
            .to_tensor();
        for ch in 0..c {
            for p in 0..h * w {
                let i = ch * h * w + p;
                assert_eq!(cs.data()[i], f.data()[i] * wt.data()[ch]);
                assert_eq!(bm.data()[i], f.data()[i] * map.data()[p]);
            }
        }
    }
}

#[test]
fn identity_and_zero_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f: Tensor<f32> = randn(&mut rng, &[5, 3, 4]);
    let tape = Tape::new();
    let fv = tape.constant(f.clone());
    assert_eq!(
        fv.channel_scale(tape.constant(Tensor::ones(&[5]))).unwrap().to_tensor(),
        f
    );
    assert_eq!(
        fv.broadcast_mul(tape.constant(Tensor::ones(&[1, 3, 4])))
            .unwrap()
            .to_tensor(),
        f
    );
    let z = fv
        .channel_scale(tape.constant(Tensor::zeros(&[5])))
        .unwrap()
        .to_tensor();
    assert!(z.data().iter().all(|&v| v == 0.0));
    let z = fv
        .broadcast_mul(tape.constant(Tensor::zeros(&[1, 3, 4])))
        .unwrap()
        .to_tensor();
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(matches!(
        fv.channel_scale(tape.constant(Tensor::ones(&[4]))),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        fv.broadcast_mul(tape.constant(Tensor::ones(&[1, 4, 3]))),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn broadcast_mul_map_gradient_sums_over_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f: Tensor<f64> = randn(&mut rng, &[3, 2, 2]);
    let tape = Tape::new();
    let m = tape.leaf(&Tensor::<f64>::ones(&[1, 2, 2]).with_grad());
    let g = tape
        .backward(tape.constant(f.clone()).broadcast_mul(m).unwrap().sum())
        .unwrap();
    for p in 0..4 {
        let expected: f64 = (0..3).map(|c| f.data()[c * 4 + p]).sum();
        assert!((g.wrt(m)[p] - expected).abs() < 1e-12);
    }
}

#[test]
fn softmax_cross_entropy_closed_forms() {
    let tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::full(&[3, 5], 0.7));
    let l = uniform.softmax_cross_entropy(&[0, 4, 2]).unwrap().scalar();
    assert!((l - 5f64.ln()).abs() < 1e-12);
    let logits = t64(&[2, 3], &[0.2, -1.0, 2.5, 1.0, 0.0, -0.5]);
    let x = tape.leaf(&logits.clone().with_grad());
    let loss = x.softmax_cross_entropy(&[2, 0]).unwrap();
    let g = tape.backward(loss).unwrap().wrt(x);
    for r in 0..2 {
        let row = &logits.data()[r * 3..r * 3 + 3];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            let onehot = if k == [2, 0][r] { 1.0 } else { 0.0 };
            assert!((g[r * 3 + k] - (row[k].exp() / z - onehot) / 2.0).abs() < 1e-12);
        }
    }
    assert!(matches!(x.softmax_cross_entropy(&[3, 0]), Err(Error::Index { .. })));
}

#[test]
fn backward_sum_and_accumulation() {
    let tape = Tape::<f32>::new();
    let mut x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32).with_grad();
    let v = tape.leaf(&x);
    let g = tape.backward(v.sum()).unwrap();
    assert_eq!(g.wrt(v), vec![1.0; 6]);
    let y = v.scale(3.0).sum();
    let g = tape.backward(y).unwrap();
    g.accumulate_into(v, &mut x).unwrap();
    let once = x.grad().unwrap().to_vec();
    g.accumulate_into(v, &mut x).unwrap();
    let twice: Vec<f32> = once.iter().map(|a| a * 2.0).collect();
    assert_eq!(x.grad().unwrap(), &twice[..]);
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spp_length_ignores_spatial_size(c in 1usize..6, h in 3usize..20, w in 3usize..20) {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, c, h, w]));
        prop_assert_eq!(x.spatial_pyramid_pool(&[1, 2, 3]).unwrap().shape(), vec![2, c * 14]);
    }

    #[test]
    fn cross_entropy_is_shift_invariant(
        logits in proptest::collection::vec(-5.0f64..5.0, 12),
        shifts in proptest::collection::vec(-50.0f64..50.0, 3),
    ) {
        let tape = Tape::<f64>::new();
        let targets = [1, 0, 3];
        let a = tape.constant(t64(&[3, 4], &logits)).softmax_cross_entropy(&targets).unwrap().scalar();
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + shifts[i / 4]).collect();
        let b = tape.constant(t64(&[3, 4], &shifted)).softmax_cross_entropy(&targets).unwrap().scalar();
        prop_assert!((a - b).abs() < 1e-6);
    }
}
