//! Reference-oracle tests: each differentiable op is checked against an
//! independent scalar implementation and central finite differences.

mod common;

use common::*;
use unshade::tensor::param::{ParamKind, ParamStore};
use unshade::tensor::tape::Tape;
use unshade::tensor::{self, ConvMode, ScanDir, Shape, Tensor};

#[test]
fn conv2d_pointwise_identity_kernel() {
    let mut r = rng(1);
    let x = rand_tensor(Shape::new(1, 3, 4, 5), &mut r);
    let mut k = Tensor::zeros(Shape::new(3, 3, 1, 1));
    for c in 0..3 {
        k.set(c, c, 0, 0, 1.0);
    }
    let y = tensor::conv2d(&x, &k, None, ConvMode::Pointwise1x1, 1, 0).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv2d_depthwise_ones_on_constant() {
    let x = Tensor::full(Shape::new(1, 1, 5, 5), 1.0);
    let k = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let y = tensor::conv2d(&x, &k, None, ConvMode::Depthwise3x3, 1, 1).unwrap();
    assert_eq!(y.get(0, 0, 2, 2), 9.0);
    assert_eq!(y.get(0, 0, 0, 2), 6.0);
    assert_eq!(y.get(0, 0, 2, 0), 6.0);
    assert_eq!(y.get(0, 0, 0, 0), 4.0);
    assert_eq!(y.get(0, 0, 4, 4), 4.0);
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut r = rng(2);
    for case in 0..20 {
        let (n, ci, co) = (1 + case % 2, 1 + case % 3, 1 + (case / 2) % 3);
        let (h, w) = (3 + case % 5, 3 + (case * 7) % 5);
        let x = rand_tensor(Shape::new(n, ci, h, w), &mut r);
        for (mode, ks, stride, padding) in [
            (ConvMode::Full3x3, Shape::new(co, ci, 3, 3), 1, 1),
            (ConvMode::Full3x3, Shape::new(co, ci, 3, 3), 2, 1),
            (ConvMode::Full3x3, Shape::new(co, ci, 3, 3), 1, 0),
            (ConvMode::Depthwise3x3, Shape::new(ci, 1, 3, 3), 1, 1),
            (ConvMode::Pointwise1x1, Shape::new(co, ci, 1, 1), 1, 0),
        ] {
            let k = rand_tensor(ks, &mut r);
            let b = rand_tensor(Shape::new(1, ks.n, 1, 1), &mut r);
            let got = tensor::conv2d(&x, &k, Some(&b), mode, stride, padding).unwrap();
            let want = naive_conv2d(&x, &k, Some(&b), mode, stride, padding);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-5, "{mode:?} s{stride} p{padding}");
            }
        }
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
    let k = Tensor::zeros(Shape::new(2, 4, 3, 3));
    let err = tensor::conv2d(&x, &k, None, ConvMode::Full3x3, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("(2,4,3,3)") && msg.contains("(1,3,4,4)"), "{msg}");
}

#[test]
fn layer_norm_matches_direct_statistics() {
    let mut r = rng(3);
    let x = rand_tensor(Shape::new(1, 4, 2, 2), &mut r);
    let gain = Tensor::full(Shape::new(1, 4, 1, 1), 1.0);
    let shift = Tensor::zeros(Shape::new(1, 4, 1, 1));
    let y = tensor::layer_norm_channels(&x, &gain, &shift, 1e-6).unwrap();
    for h in 0..2 {
        for w in 0..2 {
            let vals: Vec<f64> = (0..4).map(|c| x.get(0, c, h, w) as f64).collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for (c, v) in vals.iter().enumerate() {
                let want = (v - mean) / (var + 1e-6).sqrt();
                assert!((y.get(0, c, h, w) as f64 - want).abs() < 1e-5);
            }
            // normalized channel vector has mean 0, variance 1
            let m: f32 = (0..4).map(|c| y.get(0, c, h, w)).sum::<f32>() / 4.0;
            let v: f32 = (0..4).map(|c| (y.get(0, c, h, w) - m).powi(2)).sum::<f32>() / 4.0;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn layer_norm_constant_input_is_zero() {
    let x = Tensor::full(Shape::new(1, 3, 2, 2), 7.0);
    let gain = Tensor::full(Shape::new(1, 3, 1, 1), 1.0);
    let shift = Tensor::zeros(Shape::new(1, 3, 1, 1));
    let y = tensor::layer_norm_channels(&x, &gain, &shift, 1e-6).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn layer_norm_two_channel_analytic() {
    let x = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 3.0]).unwrap();
    let gain = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
    let shift = Tensor::zeros(Shape::new(1, 2, 1, 1));
    let y = tensor::layer_norm_channels(&x, &gain, &shift, 1e-9).unwrap();
    assert!((y.data()[0] + 1.0).abs() < 1e-4);
    assert!((y.data()[1] - 1.0).abs() < 1e-4);
}

#[test]
fn directional_scan_matches_scalar_recurrence() {
    let mut r = rng(4);
    for case in 0..25 {
        let shape = Shape::new(1, 1 + case % 2, 2 + case % 3, 2 + (case * 3) % 3);
        let f = rand_tensor(shape, &mut r);
        let g = rand_tensor(Shape::new(shape.c, shape.c, 1, 1), &mut r);
        for dir in ScanDir::ALL {
            let t = Tape::new();
            let fv = t.constant(f.clone());
            let gv = t.constant(g.clone());
            let got = t.value(t.scan(fv, gv, dir).unwrap());
            let want = naive_scan(&f, &g, dir);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-5, "{dir:?}");
            }
        }
    }
}

#[test]
fn scan_transpose_symmetry() {
    // up-scan of f == transpose of the left-scan of transposed f
    let mut r = rng(5);
    let f = rand_tensor(Shape::new(1, 2, 3, 4), &mut r);
    let g = rand_tensor(Shape::new(2, 2, 1, 1), &mut r);
    let transpose = |t: &Tensor| {
        let s = t.shape();
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.w, s.h));
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    out.set(0, c, w, h, t.get(0, c, h, w));
                }
            }
        }
        out
    };
    let tape = Tape::new();
    let up = tape.value(
        tape.scan(tape.constant(f.clone()), tape.constant(g.clone()), ScanDir::Up)
            .unwrap(),
    );
    let left_t = tape.value(
        tape.scan(tape.constant(transpose(&f)), tape.constant(g), ScanDir::Left)
            .unwrap(),
    );
    let back = transpose(&left_t);
    for (a, b) in up.data().iter().zip(back.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn rfft2_cosine_row_concentrates_energy() {
    // cos(2*pi*u/W) along rows: energy only in the +-1 horizontal bins.
    let (h, w) = (4usize, 8usize);
    let mut x = Tensor::zeros(Shape::new(1, 1, h, w));
    for r in 0..h {
        for c in 0..w {
            x.set(0, 0, r, c, (2.0 * std::f32::consts::PI * c as f32 / w as f32).cos());
        }
    }
    let g = unshade::tensor::fft::rfft2(&x);
    let (re, im) = naive_dft2(&x, 0, 0);
    for kh in 0..h {
        for kw in 0..w / 2 + 1 {
            assert!((g.re_at(0, 0, kh, kw) as f64 - re[kh * w + kw]).abs() < 1e-3);
            assert!((g.im_at(0, 0, kh, kw) as f64 - im[kh * w + kw]).abs() < 1e-3);
            let mag = g.re_at(0, 0, kh, kw).hypot(g.im_at(0, 0, kh, kw));
            if kh == 0 && kw == 1 {
                assert!((mag - (h * w / 2) as f32).abs() < 1e-3);
            } else {
                assert!(mag.abs() < 1e-3, "bin ({kh},{kw}) = {mag}");
            }
        }
    }
}

#[test]
fn elementwise_grads_match_fd() {
    for seed in 0..3 {
        let mut r = rng(100 + seed);
        let shape = Shape::new(1, 2, 3, 3);
        let mut store = ParamStore::new();
        let a = as_param(&mut store, "a", rand_tensor(shape, &mut r));
        let b = as_param(&mut store, "b", rand_tensor(shape, &mut r));
        grad_check(&mut store, seed, |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, b));
            let sum = t.add(x, y).unwrap();
            let prod = t.mul(x, y).unwrap();
            let mixed = t.add(t.relu(sum), t.scale(t.sigmoid(prod), 0.7)).unwrap();
            t.add(mixed, t.leaky_relu(t.sub(x, y).unwrap(), 0.2)).unwrap()
        });
    }
}

#[test]
fn conv_relu_grads_match_fd() {
    for seed in 0..3 {
        let mut r = rng(200 + seed);
        let mut store = ParamStore::new();
        let x = as_param(&mut store, "x", rand_tensor(Shape::new(1, 2, 4, 4), &mut r));
        let k = store.register("k", ParamKind::Kernel, rand_tensor(Shape::new(3, 2, 3, 3), &mut r));
        let b = store.register("b", ParamKind::Bias, rand_tensor(Shape::new(1, 3, 1, 1), &mut r));
        grad_check(&mut store, seed, |t, s| {
            let xv = t.param(s, x);
            let conv = t
                .conv2d(xv, t.param(s, k), Some(t.param(s, b)), ConvMode::Full3x3, 1, 1)
                .unwrap();
            t.relu(conv)
        });
    }
}

#[test]
fn strided_and_depthwise_conv_grads_match_fd() {
    let mut r = rng(300);
    let mut store = ParamStore::new();
    let x = as_param(&mut store, "x", rand_tensor(Shape::new(1, 2, 5, 5), &mut r));
    let kd = store.register("kd", ParamKind::Kernel, rand_tensor(Shape::new(2, 1, 3, 3), &mut r));
    let ks = store.register("ks", ParamKind::Kernel, rand_tensor(Shape::new(2, 2, 3, 3), &mut r));
    let kp = store.register("kp", ParamKind::Kernel, rand_tensor(Shape::new(2, 2, 1, 1), &mut r));
    grad_check(&mut store, 0, |t, s| {
        let xv = t.param(s, x);
        let dw = t.conv2d(xv, t.param(s, kd), None, ConvMode::Depthwise3x3, 1, 1).unwrap();
        let pw = t.conv2d(dw, t.param(s, kp), None, ConvMode::Pointwise1x1, 1, 0).unwrap();
        t.conv2d(pw, t.param(s, ks), None, ConvMode::Full3x3, 2, 1).unwrap()
    });
}

#[test]
fn norm_softmax_attention_grads_match_fd() {
    for seed in 0..3 {
        let mut r = rng(400 + seed);
        let mut store = ParamStore::new();
        let q = as_param(&mut store, "q", rand_tensor(Shape::new(1, 3, 3, 3), &mut r));
        let k = as_param(&mut store, "k", rand_tensor(Shape::new(1, 3, 3, 3), &mut r));
        let v = as_param(&mut store, "v", rand_tensor(Shape::new(1, 3, 3, 3), &mut r));
        let gain = store.register("gain", ParamKind::Gain, rand_tensor(Shape::new(1, 3, 1, 1), &mut r));
        let shift = store.register("shift", ParamKind::Shift, rand_tensor(Shape::new(1, 3, 1, 1), &mut r));
        grad_check(&mut store, seed, |t, s| {
            let qn = t.l2norm_spatial(t.param(s, q));
            let kn = t.l2norm_spatial(t.param(s, k));
            let scores = t.softmax_last(t.gram(kn, qn).unwrap());
            let mixed = t.attn_apply(scores, t.param(s, v)).unwrap();
            t.layer_norm(mixed, t.param(s, gain), t.param(s, shift), 1e-6).unwrap()
        });
    }
}

#[test]
fn fft_grads_match_fd() {
    for seed in 0..3 {
        let mut r = rng(500 + seed);
        let mut store = ParamStore::new();
        for (name, w) in [("a", 6usize), ("b", 5usize)] {
            let x = as_param(
                &mut store,
                name,
                rand_tensor(Shape::new(1, 2, 4, w), &mut r),
            );
            grad_check(&mut store, seed, |t, s| {
                let xv = t.param(s, x);
                let spec = t.rfft2(xv);
                let act = t.sigmoid(spec);
                t.irfft2(act, w).unwrap()
            });
            store = ParamStore::new();
        }
    }
}

#[test]
fn scan_grads_match_fd() {
    for seed in 0..3 {
        let mut r = rng(600 + seed);
        let mut store = ParamStore::new();
        let f = as_param(&mut store, "f", rand_tensor(Shape::new(1, 2, 3, 4), &mut r));
        let g = store.register("g", ParamKind::Kernel, rand_tensor(Shape::new(2, 2, 1, 1), &mut r));
        grad_check(&mut store, seed, |t, s| {
            let fv = t.param(s, f);
            let gv = t.param(s, g);
            let mut acc = t.scan(fv, gv, ScanDir::Right).unwrap();
            for dir in [ScanDir::Left, ScanDir::Up, ScanDir::Down] {
                acc = t.add(acc, t.scan(fv, gv, dir).unwrap()).unwrap();
            }
            acc
        });
    }
}

#[test]
fn reduction_and_misc_grads_match_fd() {
    let mut r = rng(700);
    let mut store = ParamStore::new();
    let x = as_param(&mut store, "x", rand_tensor(Shape::new(1, 2, 2, 2), &mut r));
    let map = as_param(&mut store, "map", rand_tensor(Shape::new(1, 1, 2, 2), &mut r));
    let s_ = as_param(&mut store, "s", Tensor::scalar(0.8));
    grad_check(&mut store, 0, |t, s| {
        let xv = t.param(s, x);
        let mv = t.sigmoid(t.param(s, map));
        let modulated = t.mul_bcast_channel(xv, mv).unwrap();
        let scaled = t.mul_bcast_scalar(modulated, t.exp(t.param(s, s_))).unwrap();
        let up = t.upsample2x(scaled);
        let weighted = t.scale_channels(up, &[0.5, 1.5]).unwrap();
        let logpart = t.log(t.add_const(t.clamp_const(t.sigmoid(weighted), 1e-7, 1.0 - 1e-7), 0.5));
        t.mul_bcast_scalar(t.abs(logpart), t.mean_all(weighted)).unwrap()
    });
}

// ---------------------------------------------------------------------------
// Exact-precision gradient oracles: finite differences through independent
// f64 scalar re-implementations, immune to the f32 FD noise floor.
// ---------------------------------------------------------------------------

/// f64 scalar reference of the directional recurrence, reduced against fixed
/// weights. Used to check the BPTT backward to near machine precision.
fn scan_objective_f64(
    f: &[f64],
    g: &[f64],
    (c, hh, ww): (usize, usize, usize),
    dir: ScanDir,
    w_obj: &[f64],
) -> f64 {
    let vertical = matches!(dir, ScanDir::Up | ScanDir::Down);
    let (len, perp) = if vertical { (hh, ww) } else { (ww, hh) };
    let idx = |ch: usize, h: usize, w: usize| (ch * hh + h) * ww + w;
    let mut obj = 0.0;
    for p in 0..perp {
        let mut state = vec![0.0f64; c];
        for ti in 0..len {
            let t = match dir {
                ScanDir::Down | ScanDir::Right => ti,
                ScanDir::Up | ScanDir::Left => len - 1 - ti,
            };
            let (h, w) = if vertical { (t, p) } else { (p, t) };
            let mut next = vec![0.0f64; c];
            for co in 0..c {
                let mut acc = f[idx(co, h, w)];
                if ti > 0 {
                    for ci in 0..c {
                        acc += g[co * c + ci] * state[ci];
                    }
                }
                next[co] = acc.max(0.0);
            }
            for co in 0..c {
                obj += w_obj[idx(co, h, w)] * next[co];
            }
            state = next;
        }
    }
    obj
}

#[test]
fn scan_backward_matches_f64_oracle() {
    for seed in 0..3u64 {
        let mut r = rng(900 + seed);
        let shape = Shape::new(1, 2, 3, 4);
        let f0 = rand_tensor(shape, &mut r);
        let g0 = rand_tensor(Shape::new(2, 2, 1, 1), &mut r);
        let weights: Vec<f64> = (0..shape.numel()).map(|_| {
            use rand::Rng;
            r.random_range(-1.0..1.0)
        }).collect();
        for dir in ScanDir::ALL {
            let mut store = ParamStore::new();
            let f = as_param(&mut store, "f", f0.clone());
            let g = store.register("g", ParamKind::Kernel, g0.clone());
            let t = Tape::new();
            let out = t.scan(t.param(&store, f), t.param(&store, g), dir).unwrap();
            let wc = t.constant(
                Tensor::from_vec(shape, weights.iter().map(|v| *v as f32).collect()).unwrap(),
            );
            let loss = t.sum_all(t.mul(out, wc).unwrap());
            t.backward(loss, &mut store).unwrap();

            let f64s = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|v| *v as f64).collect() };
            let (fv, gv) = (f64s(&f0), f64s(&g0));
            let h = 1e-6f64;
            for j in 0..fv.len() {
                let mut p = fv.clone();
                p[j] += h;
                let plus = scan_objective_f64(&p, &gv, (2, 3, 4), dir, &weights);
                p[j] = fv[j] - h;
                let minus = scan_objective_f64(&p, &gv, (2, 3, 4), dir, &weights);
                let fd = (plus - minus) / (2.0 * h);
                let a = store.get(f).grad.data()[j] as f64;
                assert!((a - fd).abs() < 1e-4 + 1e-4 * fd.abs(), "{dir:?} f[{j}]: {a} vs {fd}");
            }
            for j in 0..gv.len() {
                let mut p = gv.clone();
                p[j] += h;
                let plus = scan_objective_f64(&fv, &p, (2, 3, 4), dir, &weights);
                p[j] = gv[j] - h;
                let minus = scan_objective_f64(&fv, &p, (2, 3, 4), dir, &weights);
                let fd = (plus - minus) / (2.0 * h);
                let a = store.get(g).grad.data()[j] as f64;
                assert!((a - fd).abs() < 1e-4 + 1e-4 * fd.abs(), "{dir:?} g[{j}]: {a} vs {fd}");
            }
        }
    }
}

/// f64 scalar reference of the attention chain
/// (l2norm -> gram -> softmax -> apply -> layer_norm).
#[allow(clippy::too_many_arguments)]
fn attention_objective_f64(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gain: &[f64],
    shift: &[f64],
    c: usize,
    plane: usize,
    w_obj: &[f64],
) -> f64 {
    let l2 = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let s: f64 = x[ch * plane..(ch + 1) * plane].iter().map(|v| v * v).sum();
            let inv = 1.0 / (s + 1e-12f64).sqrt();
            for p in 0..plane {
                out[ch * plane + p] = x[ch * plane + p] * inv;
            }
        }
        out
    };
    let (qn, kn) = (l2(q), l2(k));
    let mut s = vec![0.0f64; c * c];
    for i in 0..c {
        for j in 0..c {
            s[i * c + j] = (0..plane).map(|p| kn[i * plane + p] * qn[j * plane + p]).sum();
        }
    }
    for i in 0..c {
        let row = &mut s[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let mut mixed = vec![0.0f64; c * plane];
    for i in 0..c {
        for j in 0..c {
            let w = s[i * c + j];
            for p in 0..plane {
                mixed[i * plane + p] += w * v[j * plane + p];
            }
        }
    }
    let mut obj = 0.0;
    for p in 0..plane {
        let mean: f64 = (0..c).map(|ch| mixed[ch * plane + p]).sum::<f64>() / c as f64;
        let var: f64 =
            (0..c).map(|ch| (mixed[ch * plane + p] - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-6f64).sqrt();
        for ch in 0..c {
            let y = gain[ch] * ((mixed[ch * plane + p] - mean) * inv) + shift[ch];
            obj += w_obj[ch * plane + p] * y;
        }
    }
    obj
}

#[test]
fn attention_chain_backward_matches_f64_oracle() {
    let (c, plane) = (3usize, 9usize);
    let shape = Shape::new(1, 3, 3, 3);
    for seed in 0..2u64 {
        let mut r = rng(950 + seed);
        let mut store = ParamStore::new();
        let q = as_param(&mut store, "q", rand_tensor(shape, &mut r));
        let k = as_param(&mut store, "k", rand_tensor(shape, &mut r));
        let v = as_param(&mut store, "v", rand_tensor(shape, &mut r));
        let gain = store.register("gain", ParamKind::Gain, rand_tensor(Shape::new(1, 3, 1, 1), &mut r));
        let shift = store.register("shift", ParamKind::Shift, rand_tensor(Shape::new(1, 3, 1, 1), &mut r));
        let weights: Vec<f64> = (0..shape.numel()).map(|_| {
            use rand::Rng;
            r.random_range(-1.0..1.0)
        }).collect();

        let t = Tape::new();
        let qn = t.l2norm_spatial(t.param(&store, q));
        let kn = t.l2norm_spatial(t.param(&store, k));
        let scores = t.softmax_last(t.gram(kn, qn).unwrap());
        let mixed = t.attn_apply(scores, t.param(&store, v)).unwrap();
        let out = t.layer_norm(mixed, t.param(&store, gain), t.param(&store, shift), 1e-6).unwrap();
        let wc = t.constant(Tensor::from_vec(shape, weights.iter().map(|v| *v as f32).collect()).unwrap());
        let loss = t.sum_all(t.mul(out, wc).unwrap());
        t.backward(loss, &mut store).unwrap();

        let f64s = |id| -> Vec<f64> {
            store.get(id).value.data().iter().map(|v: &f32| *v as f64).collect()
        };
        let (q64, k64, v64, g64, s64) = (f64s(q), f64s(k), f64s(v), f64s(gain), f64s(shift));
        let h = 1e-6f64;
        for (id, which, len) in [(q, 0usize, 27usize), (k, 1, 27), (v, 2, 27), (gain, 3, 3), (shift, 4, 3)] {
            for j in 0..len {
                let eval = |delta: f64| -> f64 {
                    let mut bufs = [q64.clone(), k64.clone(), v64.clone(), g64.clone(), s64.clone()];
                    bufs[which][j] += delta;
                    attention_objective_f64(&bufs[0], &bufs[1], &bufs[2], &bufs[3], &bufs[4], c, plane, &weights)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = store.get(id).grad.data()[j] as f64;
                assert!(
                    (a - fd).abs() < 1e-4 + 1e-4 * fd.abs(),
                    "param {which}[{j}]: analytic {a} vs f64 fd {fd}"
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Block-level oracles
// ---------------------------------------------------------------------------

use unshade::blocks::{
    ftr_block, res_block, transformer_block, transformer_block_with_attention, FtrBlockParams,
    ResBlockParams, TransformerBlockParams,
};
use unshade::twrnn::{attention_map, two_wheel_pass, AttentionMapParams, TwoWheelWeights};

#[test]
fn transformer_single_channel_matches_hand_composition() {
    // With C = 1 the layer norm collapses to the shift constant, the
    // attention matrix is softmax of a scalar = 1, so the pre-projection
    // output equals V-hat; the whole block is then
    // pointwise(depthwise(pointwise(shift))) + x, which we compose by hand.
    let mut r = rng(42);
    let mut store = ParamStore::new();
    let p = TransformerBlockParams::init("t", 1, &mut store, &mut r);
    let x = rand_tensor(Shape::new(1, 1, 4, 4), &mut r);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (out, attn) = transformer_block_with_attention(&tape, &store, xv, &p, true).unwrap();
    assert_eq!(tape.value(attn).data(), &[1.0]);

    let shift = store.get(p.norm_shift).value.data()[0];
    let y = Tensor::full(Shape::new(1, 1, 4, 4), shift);
    let v_pw = naive_conv2d(&y, &store.get(p.w_p_v).value, None, ConvMode::Pointwise1x1, 1, 0);
    let v_hat = naive_conv2d(&v_pw, &store.get(p.w_d_v).value, None, ConvMode::Depthwise3x3, 1, 1);
    let projected = naive_conv2d(&v_hat, &store.get(p.w_p_out).value, None, ConvMode::Pointwise1x1, 1, 0);
    let got = tape.value(out);
    for ((g, p_), x_) in got.data().iter().zip(projected.data()).zip(x.data()) {
        assert!((g - (p_ + x_)).abs() < 1e-5);
    }
}

#[test]
fn res_block_matches_composed_convolutions() {
    let mut r = rng(43);
    let mut store = ParamStore::new();
    let p = ResBlockParams::init("r", 3, &mut store, &mut r);
    let x = rand_tensor(Shape::new(2, 3, 5, 5), &mut r);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let got = tape.value(res_block(&tape, &store, xv, &p).unwrap());
    let h1 = naive_conv2d(
        &x,
        &store.get(p.conv1).value,
        Some(&store.get(p.bias1).value),
        ConvMode::Full3x3,
        1,
        1,
    );
    let h1 = unshade::tensor::relu(&h1);
    let h2 = naive_conv2d(
        &h1,
        &store.get(p.conv2).value,
        Some(&store.get(p.bias2).value),
        ConvMode::Full3x3,
        1,
        1,
    );
    for ((g, h), x_) in got.data().iter().zip(h2.data()).zip(x.data()) {
        assert!((g - (h + x_)).abs() < 1e-5);
    }
}

#[test]
fn transformer_block_grads_match_fd() {
    for seed in 0..3u64 {
        let mut r = rng(1000 + seed);
        let mut store = ParamStore::new();
        let p = TransformerBlockParams::init("t", 3, &mut store, &mut r);
        let x = rand_tensor(Shape::new(1, 3, 4, 4), &mut r);
        grad_check(&mut store, seed, |t, s| {
            let xv = t.constant(x.clone());
            transformer_block(t, s, xv, &p, true).unwrap()
        });
    }
}

#[test]
fn ftr_block_grads_match_fd() {
    for seed in 0..3u64 {
        let mut r = rng(1100 + seed);
        let mut store = ParamStore::new();
        let p = FtrBlockParams::init("f", 2, &mut store, &mut r);
        let x = rand_tensor(Shape::new(1, 2, 8, 8), &mut r);
        grad_check(&mut store, seed, |t, s| {
            let xv = t.constant(x.clone());
            ftr_block(t, s, xv, &p).unwrap()
        });
    }
}

#[test]
fn two_wheel_pass_grads_match_fd() {
    for seed in 0..3u64 {
        let mut r = rng(1200 + seed);
        let mut store = ParamStore::new();
        let w = TwoWheelWeights::init("tw", 2, false, &mut store, &mut r);
        let x = rand_tensor(Shape::new(1, 2, 3, 3), &mut r);
        grad_check(&mut store, seed, |t, s| {
            let xv = t.constant(x.clone());
            two_wheel_pass(t, s, xv, &w).unwrap()
        });
    }
}

#[test]
fn attention_map_single_step_matches_hand_composition() {
    let mut r = rng(44);
    let mut store = ParamStore::new();
    let p = AttentionMapParams::init("a", 2, false, &mut store, &mut r);
    let x = rand_tensor(Shape::new(1, 2, 3, 3), &mut r);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (map, steps) = attention_map(&tape, &store, xv, &p, 1).unwrap();
    assert_eq!(steps.len(), 1);
    // hand composition: one two-wheel pass, project, sigmoid
    let passed = two_wheel_pass(&tape, &store, xv, &p.wheels).unwrap();
    let logits = tape
        .conv2d(
            passed,
            tape.param(&store, p.project),
            Some(tape.param(&store, p.project_bias)),
            ConvMode::Pointwise1x1,
            1,
            0,
        )
        .unwrap();
    let want = tape.value(tape.sigmoid(logits));
    for (a, b) in tape.value(map).data().iter().zip(want.data()) {
        assert_eq!(a, b);
    }
}

#[test]
fn twrnn_every_weight_gets_gradient() {
    use unshade::tensor::param::ParamKind as PK;
    for seed in 0..3u64 {
        let mut r = rng(1300 + seed);
        let mut store = ParamStore::new();
        let p = AttentionMapParams::init("a", 2, false, &mut store, &mut r);
        let x = rand_tensor(Shape::new(1, 2, 4, 4), &mut r);
        let tape = Tape::new();
        let xv = tape.constant(x);
        let (_, steps) = attention_map(&tape, &store, xv, &p, 3).unwrap();
        let mut sum = tape.sum_all(steps[0]);
        for s in &steps[1..] {
            sum = tape.add(sum, tape.sum_all(*s)).unwrap();
        }
        store.zero_grads();
        tape.backward(sum, &mut store).unwrap();
        for (_, param) in store.iter() {
            if param.kind == PK::Kernel || param.kind == PK::Bias {
                assert!(
                    param.grad.data().iter().any(|g| *g != 0.0),
                    "seed {seed}: {} has all-zero gradient",
                    param.name
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Generator-level gradient flow
// ---------------------------------------------------------------------------

use unshade::losses::{l1_weighted, L1Denominator};
use unshade::model::{Model, ModelConfig};

#[test]
fn generator_gradient_flow_reaches_every_parameter() {
    let cfg = ModelConfig {
        base_channels: 4,
        encoder_levels: 2,
        n_ftr_blocks: 1,
        twrnn_steps: 2,
        seed: 5,
        ..ModelConfig::default()
    };
    let mut model = Model::init(cfg).unwrap();
    // The output conv is zero-initialized (identity network), which blocks
    // gradients upstream of it; give it small random values first.
    let mut r = rng(77);
    let out_w = model.store.id("g.out.w").unwrap();
    for v in model.store.get_mut(out_w).value.data_mut() {
        use rand::Rng;
        *v = r.random_range(-0.05..0.05);
    }
    let image = rand_tensor(Shape::new(1, 3, 8, 8), &mut r);
    let target = rand_tensor(Shape::new(1, 3, 8, 8), &mut r);
    let tape = Tape::new();
    let xv = tape.constant(image);
    let gen = model
        .generator
        .forward(&tape, &model.store, xv, &model.config, None)
        .unwrap();
    let tv = tape.constant(target);
    // L1 against a random target, plus a light attention probe so the map
    // projection head is exercised too.
    let l1 = l1_weighted(&tape, gen.restored, tv, &[1.0; 3], L1Denominator::FourHw).unwrap();
    let attn_sum = tape.scale(tape.mean_all(gen.attention), 0.1);
    let loss = tape.add(l1, attn_sum).unwrap();
    model.store.zero_grads();
    tape.backward(loss, &mut model.store).unwrap();
    for id in model.generator_param_ids() {
        let p = model.store.get(id);
        assert!(
            p.grad.data().iter().any(|g| *g != 0.0),
            "generator parameter {} received no gradient",
            p.name
        );
    }
}

#[test]
fn discriminator_grads_match_fd() {
    let cfg = ModelConfig {
        base_channels: 2,
        encoder_levels: 1,
        n_ftr_blocks: 0,
        twrnn_steps: 1,
        seed: 6,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg).unwrap();
    let mut r = rng(88);
    let cond = rand_tensor(Shape::new(1, 3, 16, 16), &mut r);
    let cand = rand_tensor(Shape::new(1, 3, 16, 16), &mut r);
    // The probe perturbs every model parameter; generator parameters do not
    // feed this objective, so their analytic and FD gradients are both zero.
    let mut store = model.store.clone();
    grad_check(&mut store, 0, |t, s| {
        let c = t.constant(cond.clone());
        let k = t.constant(cand.clone());
        model.discriminator.forward(t, s, c, k).unwrap()
    });
}

// ---------------------------------------------------------------------------
// Remaining module invariants
// ---------------------------------------------------------------------------

#[test]
fn scan_matches_scalar_reference_tightly_on_tiny_shapes() {
    // all shapes up to 1x2x4x4, all four directions, 1e-6
    let mut r = rng(61);
    for c in 1..=2usize {
        for h in 1..=4usize {
            for w in 1..=4usize {
                let f = rand_tensor(Shape::new(1, c, h, w), &mut r);
                let g = rand_tensor(Shape::new(c, c, 1, 1), &mut r);
                for dir in ScanDir::ALL {
                    let t = Tape::new();
                    let got =
                        t.value(t.scan(t.constant(f.clone()), t.constant(g.clone()), dir).unwrap());
                    let want = naive_scan(&f, &g, dir);
                    for (a, b) in got.data().iter().zip(want.data()) {
                        assert!((a - b).abs() < 1e-6, "{dir:?} {c}x{h}x{w}: {a} vs {b}");
                    }
                }
            }
        }
    }
}

#[test]
fn every_model_kernel_respects_the_fan_in_bound() {
    let model = Model::init(ModelConfig { seed: 62, ..ModelConfig::default() }).unwrap();
    for (_, p) in model.store.iter() {
        if p.kind == ParamKind::Kernel {
            let s = p.value.shape();
            let bound = (6.0f32 / (s.c * s.h * s.w) as f32).sqrt();
            assert!(
                p.value.max_abs() <= bound + 1e-7,
                "{}: max |w| = {} exceeds sqrt(6/fan_in) = {}",
                p.name,
                p.value.max_abs(),
                bound
            );
        }
    }
}

#[test]
fn losses_differentiate_through_a_one_block_stub() {
    // Generator stub: x + res_block(x); all three losses flow gradients
    // into the block's parameters and match finite differences.
    use unshade::losses::{attention_loss, cgan_g_loss, l1_weighted, total_loss, LossWeights};
    for seed in 0..2u64 {
        let mut r = rng(1500 + seed);
        let mut store = ParamStore::new();
        let p = ResBlockParams::init("stub", 2, &mut store, &mut r);
        let proj = store.register(
            "proj",
            ParamKind::Kernel,
            rand_tensor(Shape::new(1, 2, 1, 1), &mut r),
        );
        let x = rand_tensor(Shape::new(1, 2, 6, 6), &mut r);
        let target = rand_tensor(Shape::new(1, 2, 6, 6), &mut r);
        let mut mask = Tensor::zeros(Shape::new(1, 1, 6, 6));
        for v in mask.data_mut() {
            use rand::Rng;
            *v = if r.random_bool(0.5) { 1.0 } else { 0.0 };
        }
        grad_check(&mut store, seed, |t, s| {
            let xv = t.constant(x.clone());
            let out = res_block(t, s, xv, &p).unwrap();
            let tv = t.constant(target.clone());
            let l1 = l1_weighted(t, out, tv, &[1.0, 0.5], Default::default()).unwrap();
            // a 1-channel head doubles as score grid and attention map
            let head = t
                .conv2d(out, t.param(s, proj), None, ConvMode::Pointwise1x1, 1, 0)
                .unwrap();
            let gan = cgan_g_loss(t, head, Default::default());
            let attn = attention_loss(t, t.sigmoid(head), &mask, Default::default()).unwrap();
            total_loss(t, l1, gan, attn, &LossWeights::default()).unwrap()
        });
    }
}
