use mocha_core::analysis::temporal_stats;
use mocha_core::synth::capture::capture_flat;
use mocha_core::synth::clip::jitter_poses;
use mocha_core::synth::content::procedural_content;
use mocha_core::synth::{
    capture_cfa, generate_clip, isp_pipeline, make_clip_pair, pack_rggb, render_screen, unpack_rggb, CapturePose, Sampler,
    SynthConfig,
};
use mocha_core::tensor::fft::fft2;
use mocha_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PITCH: usize = 3;

fn gray_field(side: usize) -> Tensor {
    render_screen(&Tensor::filled(&[side, side, 3], 0.5), PITCH).unwrap()
}

fn pose(scale: f64, tx: f64) -> CapturePose {
    CapturePose {
        translation: (tx, 0.0),
        rotation: 0.0,
        scale,
    }
}

/// Red sites of a mosaic, mean removed, as a `[H, W, 1]` plane.
fn red_plane(mosaic: &Tensor) -> Tensor {
    let packed = pack_rggb(mosaic).unwrap();
    let &[h, w, 4] = packed.shape() else { unreachable!() };
    let plane = Tensor::from_fn(&[h, w, 1], |i| packed.at(&[i[0], i[1], 0]));
    let m = plane.mean();
    plane.map(|v| v - m)
}

/// Largest non-DC amplitude and its bin.
fn peak(plane: &Tensor) -> (f64, [usize; 2]) {
    let amp = fft2(plane).unwrap().amplitude();
    let &[h, w, 1] = amp.shape() else { unreachable!() };
    let mut best = (0.0, [0, 0]);
    for u in 0..h {
        for v in 0..w {
            let a = amp.at(&[u, v, 0]);
            if (u, v) != (0, 0) && a > best.0 {
                best = (a, [u, v]);
            }
        }
    }
    best
}

fn amplitude_at(plane: &Tensor, bin: [usize; 2]) -> f64 {
    fft2(plane).unwrap().amplitude().at(&[bin[0], bin[1], 0])
}

#[test]
fn gray_field_repeats_with_the_pitch_only() {
    let field = gray_field(6);
    let &[h, w, 3] = field.shape() else { unreachable!() };
    let lag_diff = |lag: usize| -> f64 {
        let mut d = 0.0f64;
        for y in 0..h {
            for x in 0..w - lag {
                for c in 0..3 {
                    d = d.max((field.at(&[y, x + lag, c]) - field.at(&[y, x, c])).abs());
                }
            }
        }
        d
    };
    assert_eq!(lag_diff(PITCH), 0.0);
    for lag in 1..PITCH {
        assert!(lag_diff(lag) > 0.1, "lag {lag}");
    }
    let rows_equal = (1..h).all(|y| (0..w).all(|x| field.at(&[y, x, 0]) == field.at(&[0, x, 0])));
    assert!(rows_equal);
}

#[test]
fn incommensurate_scale_produces_a_beat_absent_at_unit_scale() {
    let sampler = Sampler::new(PITCH, 6).unwrap();
    let field = gray_field(96);
    let content = Tensor::filled(&[96, 96, 3], 0.5);
    let aliased = red_plane(&capture_cfa(&field, &pose(0.87, 0.0), &sampler, 64, 64).unwrap());
    let unit = red_plane(&capture_cfa(&field, &pose(1.0, 0.0), &sampler, 64, 64).unwrap());
    let flat = capture_flat(&content, &pose(0.87, 0.0), &sampler, 64, 64).unwrap();
    let flat_mosaic = Tensor::from_fn(&[64, 64], |i| flat.at(&[i[0], i[1], 0]));
    let clean = red_plane(&flat_mosaic);
    let (a, bin) = peak(&aliased);
    assert!(a > 1.0, "beat amplitude {a}");
    assert!(peak(&unit).0 < 1e-9);
    assert!(a >= 5.0 * amplitude_at(&clean, bin));
    assert!(a >= 5.0 * amplitude_at(&unit, bin));
}

#[test]
fn translation_moves_the_beat_phase_not_its_frequency() {
    let sampler = Sampler::new(PITCH, 6).unwrap();
    let field = gray_field(96);
    let scale = 16.0 / 17.0;
    let fundamental = [0, 4];
    let mut phases = Vec::new();
    for tx in [0.0, 0.5] {
        let plane = red_plane(&capture_cfa(&field, &pose(scale, tx), &sampler, 64, 64).unwrap());
        let spec = fft2(&plane).unwrap();
        let (amp, phase) = (spec.amplitude(), spec.phase());
        let (mut on_comb, mut off_comb) = (0.0, 0.0);
        for u in 0..32 {
            for v in 0..32 {
                let e = amp.at(&[u, v, 0]).powi(2);
                if u == 0 && v % fundamental[1] == 0 {
                    on_comb += e;
                } else {
                    off_comb += e;
                }
            }
        }
        assert!(off_comb <= 1e-12 * on_comb, "tx {tx}: {off_comb} off the harmonic comb");
        assert!(amp.at(&[0, 4, 0]) > 1.0, "tx {tx}");
        phases.push(phase.at(&[0, 4, 0]));
    }
    assert!((phases[0] - phases[1]).abs() > 0.1);
}

#[test]
fn unit_scale_without_pose_matches_the_isp_of_the_clean_mosaic() {
    let cfg = SynthConfig {
        frames: 3,
        raw_h: 16,
        raw_w: 16,
        scale_range: (1.0, 1.0),
        jitter_translation: 0.0,
        jitter_rotation: 0.0,
        ..SynthConfig::default()
    };
    for seed in [1, 2] {
        let clip = generate_clip(&cfg, seed).unwrap();
        assert!(clip.moire_raw.max_abs_diff(&clip.pseudo_clean_raw) < 1e-9);
        for f in 0..3 {
            let mosaic = unpack_rggb(&clip.pseudo_clean_raw.index_outer(f)).unwrap();
            let isp = isp_pipeline(&mosaic, &cfg.isp).unwrap();
            assert!(isp.max_abs_diff(&clip.moire_rgb.index_outer(f)) <= 1e-6);
        }
    }
}

#[test]
fn identical_poses_freeze_the_moire() {
    let cfg = SynthConfig {
        frames: 3,
        raw_h: 16,
        raw_w: 16,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let side = cfg.content_side();
    let content = procedural_content(side, side, &mut rng);
    let poses = vec![pose(0.9, 0.3); 3];
    let clip = make_clip_pair(&content, &poses, &cfg, 4).unwrap();
    assert_eq!(temporal_stats(&clip.moire_rgb).unwrap().mean, 0.0);
    assert_eq!(temporal_stats(&clip.moire_raw).unwrap().mean, 0.0);
}

#[test]
fn jitter_raises_moire_temporal_difference_above_clean() {
    let cfg = SynthConfig {
        frames: 5,
        raw_h: 32,
        raw_w: 32,
        ..SynthConfig::default()
    };
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = cfg.content_side();
        let content = procedural_content(side, side, &mut rng);
        let poses = jitter_poses(&cfg, &mut rng);
        let clip = make_clip_pair(&content, &poses, &cfg, seed).unwrap();
        let m = temporal_stats(&clip.moire_rgb).unwrap().mean;
        let c = temporal_stats(&clip.clean_rgb).unwrap().mean;
        assert!(m > c, "seed {seed}: moire {m} clean {c}");
    }
}

#[test]
fn clip_shapes_follow_the_packed_layout() {
    let cfg = SynthConfig {
        frames: 3,
        ..SynthConfig::default()
    };
    let clip = generate_clip(&cfg, 0).unwrap();
    assert_eq!(clip.moire_rgb.shape(), &[3, 64, 64, 3]);
    assert_eq!(clip.clean_rgb.shape(), &[3, 64, 64, 3]);
    assert_eq!(clip.moire_raw.shape(), &[3, 32, 32, 4]);
    assert_eq!(clip.pseudo_clean_raw.shape(), &[3, 32, 32, 4]);
    let mosaic = Tensor::zeros(&[720, 1280]);
    assert_eq!(pack_rggb(&mosaic).unwrap().shape(), &[360, 640, 4]);
    assert!(pack_rggb(&Tensor::zeros(&[5, 4])).is_err());
}
