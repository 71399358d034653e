use mocha_core::analysis::{amp_phase_swap, color_correlation, normalized_cc, temporal_stats};
use mocha_core::autodiff::{Ctx, Tape};
use mocha_core::gradsuite::{block_config, randomized_params};
use mocha_core::model::dmad;
use mocha_core::model::window::{window_partition_3d, window_unpartition_3d};
use mocha_core::synth::{generate_clip, isp_pipeline, pack_rggb, unpack_rggb, IspConfig, SynthConfig};
use mocha_core::tensor::fft::{dft2_direct, fft2, ifft2};
use mocha_core::tensor::ops::{conv2d, matmul, softmax_last, ConvMode};
use mocha_core::train::losses::mc_loss;
use mocha_core::train::optim::AdamW;
use mocha_core::train::wnnm::singular_values;
use mocha_core::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn circular_shift(clip: &Tensor, dy: usize, dx: usize) -> Tensor {
    let &[t, h, w, c] = clip.shape() else { panic!("rank") };
    Tensor::from_fn(&[t, h, w, c], |i| clip.at(&[i[0], (i[1] + dy) % h, (i[2] + dx) % w, i[3]]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let x = Tensor::randn(&[rows, cols], &mut rng(seed)).scale(4.0);
        let p = softmax_last(&x);
        for r in 0..rows {
            let row = &p.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        let q = softmax_last(&x.map(|v| v + shift));
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn fft_roundtrip_and_parseval(h in 1usize..13, w in 1usize..13, c in 1usize..4, seed in any::<u64>()) {
        let x = Tensor::randn(&[h, w, c], &mut rng(seed));
        let s = fft2(&x).unwrap();
        let back = ifft2(&s).unwrap();
        prop_assert!(back.max_abs_diff(&x) <= 1e-9);
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        let spec: f64 = s.amplitude().data().iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
        prop_assert!((energy - spec).abs() <= 1e-9 * energy.max(1.0));
    }

    #[test]
    fn fft_agrees_with_direct_dft(ph in 0u32..5, pw in 0u32..5, seed in any::<u64>()) {
        let x = Tensor::randn(&[1 << ph, 1 << pw, 2], &mut rng(seed));
        let a = fft2(&x).unwrap();
        let b = dft2_direct(&x).unwrap();
        prop_assert!(a.re.max_abs_diff(&b.re) < 1e-9);
        prop_assert!(a.im.max_abs_diff(&b.im) < 1e-9);
    }

    #[test]
    fn dense_ops_are_deterministic(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], &mut r);
        let b = Tensor::randn(&[k, n], &mut r);
        prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        let x = Tensor::randn(&[2, m + 2, k + 2, 3], &mut r);
        let w = Tensor::randn(&[3, 3, 3, n], &mut r);
        let y1 = conv2d(&x, &w, ConvMode::Full, 1).unwrap();
        let y2 = conv2d(&x, &w, ConvMode::Full, 1).unwrap();
        prop_assert_eq!(y1, y2);
    }

    #[test]
    fn rggb_pack_roundtrip(h in 1usize..9, w in 1usize..9, t in 1usize..4, seed in any::<u64>()) {
        let bayer = Tensor::uniform(&[t, 2 * h, 2 * w], 0.0, 1.0, &mut rng(seed));
        let packed = pack_rggb(&bayer).unwrap();
        prop_assert_eq!(packed.shape(), &[t, h, w, 4]);
        prop_assert_eq!(unpack_rggb(&packed).unwrap(), bayer);
    }

    #[test]
    fn isp_is_monotone_without_sharpening(h in 2usize..7, w in 2usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let lo = Tensor::uniform(&[2 * h, 2 * w], 0.0, 0.5, &mut r);
        let bump = Tensor::uniform(&[2 * h, 2 * w], 0.0, 0.5, &mut r);
        let hi = lo.add(&bump).unwrap();
        let cfg = IspConfig { wb_gains: [1.8, 1.0, 1.4], sharpen: 0.0 };
        let a = isp_pipeline(&lo, &cfg).unwrap();
        let b = isp_pipeline(&hi, &cfg).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| *y >= *x));
    }

    #[test]
    fn colour_correlation_invariances(h in 2usize..8, w in 2usize..8, offset in -3.0f64..3.0, gain in 0.1f64..10.0, seed in any::<u64>()) {
        let img = Tensor::randn(&[h, w, 3], &mut rng(seed));
        let cc = color_correlation(&img).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&cc));
        let moved = img.map(|v| gain * v + offset);
        prop_assert!((color_correlation(&moved).unwrap() - cc).abs() < 1e-10);
        let swapped = Tensor::from_fn(&[h, w, 3], |i| img.at(&[i[0], i[1], 2 - i[2]]));
        prop_assert!((color_correlation(&swapped).unwrap() - cc).abs() < 1e-12);
        prop_assert!((normalized_cc(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn temporal_stats_ignore_circular_shifts(t in 2usize..5, h in 2usize..9, w in 2usize..9, dy in 0usize..8, dx in 0usize..8, seed in any::<u64>()) {
        let clip = Tensor::randn(&[t, h, w, 2], &mut rng(seed));
        let a = temporal_stats(&clip).unwrap();
        let b = temporal_stats(&circular_shift(&clip, dy % h, dx % w)).unwrap();
        prop_assert_eq!(a.per_pair.len(), t - 1);
        for (x, y) in a.per_pair.iter().zip(&b.per_pair) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn amplitude_swap_twice_is_identity(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[h, w, 2], &mut r);
        let b = Tensor::randn(&[h, w, 2], &mut r);
        let (ab, ba) = amp_phase_swap(&a, &b).unwrap();
        let (a2, b2) = amp_phase_swap(&ab, &ba).unwrap();
        prop_assert!(a2.max_abs_diff(&a) < 1e-9);
        prop_assert!(b2.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn consistent_decomposition_has_zero_mc_loss(t in 1usize..4, h in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let cf = Tensor::randn(&[t, h, h, 4], &mut r);
        let pm = Tensor::randn(&[t, h, h, 4], &mut r);
        let raw = cf.add(&pm).unwrap();
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(cf), tape.leaf(pm), tape.leaf(raw));
        let l = mc_loss(&mut tape, a, b, c).unwrap();
        prop_assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn singular_values_ignore_column_order(m in 2usize..10, n in 1usize..6, rot in 0usize..6, seed in any::<u64>()) {
        let x = Tensor::randn(&[m, n], &mut rng(seed));
        let p = Tensor::from_fn(&[m, n], |i| x.at(&[i[0], (i[1] + rot) % n]));
        let a = singular_values(&x).unwrap();
        let b = singular_values(&p).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-9 * a[0].max(1.0));
        }
    }

    #[test]
    fn adamw_is_bit_reproducible(steps in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(&[3, 2], &mut r)).unwrap();
        store.insert("b", Tensor::randn(&[4], &mut r)).unwrap();
        let grads: Vec<Vec<Option<Tensor>>> = (0..steps)
            .map(|_| vec![Some(Tensor::randn(&[3, 2], &mut r)), Some(Tensor::randn(&[4], &mut r))])
            .collect();
        let run = || {
            let mut s = store.clone();
            let mut opt = AdamW::new(&s, |_| true, 1e-2, 0.01);
            for g in &grads {
                opt.update(&mut s, g).unwrap();
            }
            s
        };
        let (x, y) = (run(), run());
        for n in ["a", "b"] {
            let (u, v) = (x.value(n).unwrap(), y.value(n).unwrap());
            prop_assert!(u.data().iter().zip(v.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn window_partition_roundtrip(
        t in 2usize..4, h in 4usize..11, w in 4usize..11, c in 1usize..3,
        wt in 1usize..3, wk in 1usize..5, shifted in any::<bool>(), seed in any::<u64>(),
    ) {
        let x = Tensor::randn(&[t, h, w, c], &mut rng(seed));
        let (win, grid) = window_partition_3d(&x, [wt, wk, wk], shifted).unwrap();
        prop_assert_eq!(win.shape(), &[grid.num_windows(), grid.tokens(), c]);
        prop_assert_eq!(window_unpartition_3d(&win, &grid).unwrap(), x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthesis_is_reproducible(seed in any::<u64>()) {
        let cfg = SynthConfig { frames: 3, raw_h: 8, raw_w: 8, ..SynthConfig::default() };
        prop_assert_eq!(generate_clip(&cfg, seed).unwrap(), generate_clip(&cfg, seed).unwrap());
    }

    #[test]
    fn mcb_attention_is_stochastic_and_gate_bounded(h in 2usize..6, w in 2usize..6, seed in any::<u64>()) {
        let cfg = block_config();
        let store = randomized_params(&cfg, seed, 0.4).unwrap();
        let mut r = rng(seed);
        let fc = Tensor::randn(&[2, h, w, cfg.channels], &mut r);
        let fm = Tensor::randn(&[2, h, w, cfg.channels], &mut r);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let (a, b) = (ctx.input(fc), ctx.input(fm));
        let out = dmad::mcb_forward(&mut ctx, a, b, cfg.mcb_heads).unwrap();
        let d = cfg.channels / cfg.mcb_heads;
        let att = tape.value(out.attention).clone();
        prop_assert_eq!(att.shape(), &[2 * cfg.mcb_heads, d, d]);
        for row in att.data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(tape.value(out.a_ma).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
