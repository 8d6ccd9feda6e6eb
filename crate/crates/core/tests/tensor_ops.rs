use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::tensor::gradcheck::{grad_check, GradCheckOptions};
use volseg::tensor::{trilinear_sample, AttentionGroups, ConvSpec, Tape, Tensor, Var};
use volseg::Result;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Reduces `out` to a scalar with fixed random weights.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).numel();
    let w = weights(&mut ChaCha8Rng::seed_from_u64(seed), n);
    tape.weighted_sum(out, &w)
}

fn assert_grads<F>(inputs: Vec<(&str, Tensor<f64>)>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(&named(inputs), f, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(1e-4), "\n{report}");
}

/// Seven nested loops over (co, oh, ow, od, ci, kh·kw·kd), written directly
/// from the cross-correlation definition.
fn conv_reference(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    spec: &ConvSpec,
) -> Tensor<f64> {
    let (h, wd, d) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g) = (w.shape()[0], w.shape()[1]);
    let [kh, kw, kd] = spec.kernel;
    let cout_g = cout / spec.groups;
    let out_dim =
        |n: usize, a: usize| (n + 2 * spec.padding[a] - spec.kernel[a]) / spec.stride[a] + 1;
    let (oh, ow, od) = (out_dim(h, 0), out_dim(wd, 1), out_dim(d, 2));
    let mut out = Tensor::<f64>::zeros(&[cout, oh, ow, od]);
    for co in 0..cout {
        let g = co / cout_g;
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..od {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin_g {
                        for a in 0..kh {
                            for bb in 0..kw {
                                for c in 0..kd {
                                    let p = (i * spec.stride[0] + a) as isize
                                        - spec.padding[0] as isize;
                                    let q = (j * spec.stride[1] + bb) as isize
                                        - spec.padding[1] as isize;
                                    let r = (k * spec.stride[2] + c) as isize
                                        - spec.padding[2] as isize;
                                    if p < 0
                                        || q < 0
                                        || r < 0
                                        || p >= h as isize
                                        || q >= wd as isize
                                        || r >= d as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.get(&[
                                        g * cin_g + ci,
                                        p as usize,
                                        q as usize,
                                        r as usize,
                                    ]);
                                    acc += w.get(&[co, ci, a, bb, c]) * xv;
                                }
                            }
                        }
                    }
                    let idx = out.offset(&[co, i, j, k]);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

fn run_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    spec: &ConvSpec,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv3d(xv, wv, bv, spec).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_matches_nested_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 4, 4, 4]);
    let w = random(&mut rng, &[3, 2, 3, 3, 3]);
    let b = random(&mut rng, &[3]);
    for spec in [
        ConvSpec::cube(3, 2, 0),
        ConvSpec::cube(3, 2, 1),
        ConvSpec::same(3),
    ] {
        let fast = run_conv(&x, &w, Some(&b), &spec);
        let slow = conv_reference(&x, &w, Some(&b), &spec);
        assert!(fast.max_abs_diff(&slow) < 1e-12, "{spec:?}");
    }
    let w1 = random(&mut rng, &[5, 2, 1, 1, 1]);
    let spec = ConvSpec::cube(1, 1, 0);
    assert!(
        run_conv(&x, &w1, None, &spec).max_abs_diff(&conv_reference(&x, &w1, None, &spec)) < 1e-12
    );
}

#[test]
fn grouped_conv_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[4, 5, 4, 3]);
    let w = random(&mut rng, &[6, 2, 3, 1, 3]);
    let spec = ConvSpec::new([3, 1, 3], [1, 2, 1], [1, 0, 1], 2).unwrap();
    assert!(
        run_conv(&x, &w, None, &spec).max_abs_diff(&conv_reference(&x, &w, None, &spec)) < 1e-12
    );
}

#[test]
fn delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[1, 4, 5, 3]);
    let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]);
    let centre = w.offset(&[0, 0, 1, 1, 1]);
    w.data_mut()[centre] = 1.0;
    assert_eq!(run_conv(&x, &w, None, &ConvSpec::same(3)), x);
}

#[test]
fn depthwise_equals_block_diagonal_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = 3;
    let x = random(&mut rng, &[c, 4, 4, 4]);
    let w = random(&mut rng, &[c, 1, 3, 3, 3]);
    let mut dense = Tensor::<f64>::zeros(&[c, c, 3, 3, 3]);
    for ch in 0..c {
        for t in 0..27 {
            let dst = dense.offset(&[ch, ch, 0, 0, 0]) + t;
            dense.data_mut()[dst] = w.data()[ch * 27 + t];
        }
    }
    let spec = ConvSpec::same(3).with_groups(c);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let dw = tape.depthwise_conv3d(xv, wv, None, &spec).unwrap();
    let grouped = run_conv(&x, &w, None, &spec);
    let full = run_conv(&x, &dense, None, &ConvSpec::same(3));
    assert_eq!(
        tape.value(dw),
        &grouped,
        "depthwise must be bit-identical to grouped conv"
    );
    assert!(grouped.max_abs_diff(&full) < 1e-12);
}

#[test]
fn depthwise_channels_are_isolated() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[2, 3, 3, 3]);
    let mut w = random(&mut rng, &[2, 1, 3, 3, 3]);
    w.data_mut()[27..].iter_mut().for_each(|v| *v = 0.0);
    let y = run_conv(&x, &w, None, &ConvSpec::same(3).with_groups(2));
    assert!(y.data()[27..].iter().all(|&v| v == 0.0));
    assert!(y.data()[..27].iter().any(|&v| v != 0.0));
}

#[test]
fn zero_offset_deformable_equals_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, &[3, 5, 4, 6]);
    let w = random(&mut rng, &[2, 3, 3, 3, 3]);
    let b = random(&mut rng, &[2]);
    let spec = ConvSpec::same(3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = tape.constant(b.clone());
    let off = tape.constant(Tensor::zeros(&[81, 5, 4, 6]));
    let y = tape.deform_conv3d(xv, wv, off, Some(bv), &spec).unwrap();
    assert!(
        tape.value(y)
            .max_abs_diff(&run_conv(&x, &w, Some(&b), &spec))
            < 1e-12
    );
}

#[test]
fn unit_depth_offset_equals_shifted_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (h, wd, d) = (4, 4, 6);
    let x = random(&mut rng, &[2, h, wd, d]);
    let w = random(&mut rng, &[1, 2, 3, 3, 3]);
    let spec = ConvSpec::same(3);
    let mut offsets = Tensor::<f64>::zeros(&[81, h, wd, d]);
    for t in 0..27 {
        let base = offsets.offset(&[3 * t + 2, 0, 0, 0]);
        offsets.data_mut()[base..base + h * wd * d]
            .iter_mut()
            .for_each(|v| *v = 1.0);
    }
    let mut shifted = Tensor::<f64>::zeros(x.shape());
    for c in 0..2 {
        for i in 0..h {
            for j in 0..wd {
                for k in 0..d - 1 {
                    let dst = shifted.offset(&[c, i, j, k]);
                    shifted.data_mut()[dst] = x.get(&[c, i, j, k + 1]);
                }
            }
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.constant(w.clone());
    let ov = tape.constant(offsets);
    let y = tape.deform_conv3d(xv, wv, ov, None, &spec).unwrap();
    let reference = run_conv(&shifted, &w, None, &spec);
    // interior along depth: both end slices see padding differently
    for i in 0..h {
        for j in 0..wd {
            for k in 1..d - 2 {
                let a = tape.value(y).get(&[0, i, j, k]);
                let b = reference.get(&[0, i, j, k]);
                assert!((a - b).abs() < 1e-12, "({i},{j},{k}): {a} vs {b}");
            }
        }
    }
}

/// Per-axis linear weights for a 2× half-pixel upsample of length `n`.
fn axis_weights(n: usize) -> Vec<Vec<f64>> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let mut row = vec![0.0; n];
            let lo = src.floor() as usize;
            let frac = src - lo as f64;
            row[lo.min(n - 1)] += 1.0 - frac;
            row[(lo + 1).min(n - 1)] += frac;
            row
        })
        .collect()
}

#[test]
fn upsample_matches_weight_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random(&mut rng, &[1, 2, 2, 2]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.trilinear_upsample(xv, 2).unwrap();
    let wa = axis_weights(2);
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                let mut expect = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        for c in 0..2 {
                            expect += wa[i][a] * wa[j][b] * wa[k][c] * x.get(&[0, a, b, c]);
                        }
                    }
                }
                assert!((tape.value(y).get(&[0, i, j, k]) - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn upsample_of_pair_is_monotone_convex() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 1, 2], &[-1.0, 3.0]).unwrap());
    let y = tape.trilinear_upsample(x, 2).unwrap();
    let v = tape.value(y).to_f64_vec();
    assert_eq!(tape.shape(y), &[1, 2, 2, 4]);
    let depth = &v[..4];
    assert!(depth.windows(2).all(|p| p[0] <= p[1]));
    assert!(v.iter().all(|&e| (-1.0..=3.0).contains(&e)));
}

#[test]
fn grid_sample_matches_explicit_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let vol = random(&mut rng, &[1, 3, 3, 3]);
    let loc = [0.3, 1.6, 0.9];
    let mut expect = 0.0;
    for (a, wa) in [(0, 0.7), (1, 0.3)] {
        for (b, wb) in [(1, 0.4), (2, 0.6)] {
            for (c, wc) in [(0, 0.1), (1, 0.9)] {
                expect += wa * wb * wc * vol.get(&[0, a, b, c]);
            }
        }
    }
    let got = trilinear_sample(vol.data(), [3, 3, 3], loc);
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn gradcheck_conv3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let inputs = vec![
        ("x", random(&mut rng, &[4, 4, 3, 5])),
        ("w", random(&mut rng, &[4, 2, 3, 3, 3])),
        ("b", random(&mut rng, &[4])),
    ];
    let spec = ConvSpec::cube(3, 2, 1).with_groups(2);
    assert_grads(inputs, |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), &spec)?;
        probe(t, y, 1)
    });
}

#[test]
fn gradcheck_pointwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        ("x", random(&mut rng, &[3, 2, 3, 2])),
        ("w", random(&mut rng, &[5, 3, 1, 1, 1])),
    ];
    assert_grads(inputs, |t, v| {
        let y = t.conv3d(v[0], v[1], None, &ConvSpec::cube(1, 1, 0))?;
        probe(t, y, 2)
    });
}

#[test]
fn gradcheck_deformable_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let off: Vec<f64> = (0..81 * 27)
        .map(|_| rng.gen_range(-0.45..0.45) + 0.05)
        .collect();
    let inputs = vec![
        ("x", random(&mut rng, &[2, 3, 3, 3])),
        ("w", random(&mut rng, &[2, 2, 3, 3, 3])),
        ("offsets", Tensor::new(vec![81, 3, 3, 3], off).unwrap()),
        ("b", random(&mut rng, &[2])),
    ];
    assert_grads(inputs, |t, v| {
        let y = t.deform_conv3d(v[0], v[1], v[2], Some(v[3]), &ConvSpec::same(3))?;
        probe(t, y, 3)
    });
}

#[test]
fn gradcheck_grid_sample_and_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let locs: Vec<f64> = (0..18).map(|_| rng.gen_range(-0.8..3.6)).collect();
    let inputs = vec![
        ("x", random(&mut rng, &[2, 3, 3, 3])),
        ("loc", Tensor::new(vec![6, 3], locs).unwrap()),
    ];
    assert_grads(inputs, |t, v| {
        let y = t.grid_sample_trilinear(v[0], v[1])?;
        probe(t, y, 4)
    });
    let inputs = vec![("x", random(&mut rng, &[2, 2, 3, 2]))];
    assert_grads(inputs, |t, v| {
        let y = t.trilinear_upsample(v[0], 2)?;
        probe(t, y, 5)
    });
}

#[test]
fn gradcheck_dense_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let inputs = vec![
        ("a", random(&mut rng, &[4, 6])),
        ("b", random(&mut rng, &[6, 5])),
        ("bias", random(&mut rng, &[5])),
        ("gamma", random(&mut rng, &[5])),
        ("beta", random(&mut rng, &[5])),
    ];
    assert_grads(inputs, |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let m = t.add_row_bias(m, v[2])?;
        let n = t.layer_norm(m, v[3], v[4], 1e-5)?;
        let g = t.gelu(n);
        let s = t.softmax_lastdim(g);
        let s = t.scale(s, 1.7);
        probe(t, s, 6)
    });
}

#[test]
fn gradcheck_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    // keep relu inputs away from the kink at zero
    let r: Vec<f64> = (0..24)
        .map(|i| if i % 2 == 0 { 0.3 } else { -0.3 } + rng.gen_range(-0.2..0.2))
        .collect();
    let inputs = vec![
        ("a", Tensor::new(vec![2, 3, 4], r).unwrap()),
        ("b", random(&mut rng, &[1, 3, 4])),
    ];
    assert_grads(inputs, |t, v| {
        let a = t.relu(v[0]);
        let c = t.concat(&[a, v[1]])?;
        let p = t.permute(c, &[2, 0, 1])?;
        let r = t.reshape(p, &[12, 3])?;
        let m = t.mul(r, r)?;
        let s = t.add(m, r)?;
        probe(t, s, 7)
    });
}

#[test]
fn gradcheck_dropout_in_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let x = random(&mut rng, &[20]);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        t.set_training(true);
        let y = t.dropout(v[0], 0.3, 99)?;
        probe(t, y, 8)
    };
    assert_grads(vec![("x", x)], f);
}

#[test]
fn gradcheck_attention_groupings() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let grid = [2, 2, 3];
    for groups in [
        AttentionGroups::joint(12),
        AttentionGroups::spatial(grid),
        AttentionGroups::slice(grid),
    ] {
        let inputs = vec![
            ("q", random(&mut rng, &[12, 8])),
            ("k", random(&mut rng, &[12, 8])),
            ("v", random(&mut rng, &[12, 6])),
        ];
        assert_grads(inputs, |t, v| {
            let y = t.attention(v[0], v[1], v[2], &groups, 2, 0.5)?;
            probe(t, y, 9)
        });
    }
}

#[test]
fn gradcheck_softmax_dice() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..2)).collect();
    assert_grads(vec![("logits", random(&mut rng, &[2, 4, 4, 4]))], |t, v| {
        t.softmax_dice(v[0], &labels)
    });
    let labels: Vec<u8> = (0..27).map(|_| rng.gen_range(0..4)).collect();
    assert_grads(vec![("logits", random(&mut rng, &[4, 3, 3, 3]))], |t, v| {
        t.softmax_dice(v[0], &labels)
    });
}

#[test]
fn single_token_attention_is_exactly_one() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Tensor::from_f64(&[1, 2], &[3.0, -1.0]).unwrap());
    let v = tape.constant(Tensor::from_f64(&[1, 2], &[0.5, 2.0]).unwrap());
    let y = tape
        .attention(q, q, v, &AttentionGroups::joint(1), 1, 1.0)
        .unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 2.0]);
    assert_eq!(tape.attention_rows(y).unwrap()[0], &[1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-spread..spread)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax_lastdim(x);
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn grid_sample_at_integers_reads_voxels(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vol = random(&mut rng, &[2, h, w, d]);
        let mut locs = Vec::new();
        for i in 0..h { for j in 0..w { for k in 0..d { locs.extend([i as f64, j as f64, k as f64]); } } }
        let mut tape = Tape::new();
        let x = tape.constant(vol.clone());
        let l = tape.constant(Tensor::new(vec![h * w * d, 3], locs).unwrap());
        let y = tape.grid_sample_trilinear(x, l).unwrap();
        prop_assert_eq!(tape.value(y).data(), vol.data());
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in any::<u64>(), perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 3, 1, 4]);
        let mut inv = vec![0; 4];
        for (i, &a) in perm.iter().enumerate() { inv[a] = i; }
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let p = tape.permute(v, &perm).unwrap();
        let back = tape.permute(p, &inv).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn constant_volume_upsamples_to_constant(c in -5.0f64..5.0, h in 1usize..4, w in 1usize..4, d in 1usize..4) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, h, w, d], c));
        let y = tape.trilinear_upsample(x, 2).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|v| (v - c).abs() < 1e-12));
    }
}
