//! Property tests for the invariants each module promises.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use stylekit::audio_io::{read_wav, resample, write_wav, Waveform};
use stylekit::dsp::{
    formant_shift, istft, mel_filterbank, mel_spectrogram, random_slice, stft, MelSpectrogram,
    ShiftFactor, StftConfig,
};
use stylekit::encoder::{forward_array, init_params, EncoderConfig};
use stylekit::metric::{angular_proto_loss, radam_step, rho_t, LossParams, OptimizerState, RAdamConfig};
use stylekit::pitch::{
    apply_semitone_shift, estimate_f0, median, semitone_shift, F0Contour, PitchConfig, SpeakerStats,
};
use stylekit::styles::{
    centroid_accuracy, classify_nearest_centroid, compute_centroids, pca_project, CentroidSet,
    LabeledEmbedding,
};
use stylekit::toygen::{synth_utterance, ToySpec, PEAK_LEVEL};

fn sines(freqs: &[(f64, f64)], sr: u32, len: usize) -> Waveform {
    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sr as f64;
            freqs
                .iter()
                .map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum()
        })
        .collect();
    Waveform::new(samples, sr).unwrap()
}

fn stats(median: f64) -> SpeakerStats {
    SpeakerStats {
        speaker_id: "x".into(),
        f0_median: median,
        f0_mean: median,
        f0_std: 1.0,
        energy_mean: 0.1,
        energy_std: 0.01,
        n_voiced_frames: 1,
        n_utterances: 1,
    }
}

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    use rand::Rng;
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let q = m.qr().q();
    Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)])
}

fn labeled(e: Array1<f64>, style: &str) -> LabeledEmbedding {
    LabeledEmbedding {
        embedding: e,
        style: style.into(),
        speaker: "s".into(),
        synthetic: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wav_round_trip_within_one_step(samples in prop::collection::vec(-1.0f64..0.9999, 1..2000)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform::new(samples, 16000).unwrap();
        write_wav(&w, &path).unwrap();
        let back = read_wav(&path).unwrap();
        prop_assert_eq!(back.len(), w.len());
        let worst = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst <= 1.0 / 32768.0 + 1e-12);
    }

    #[test]
    fn resample_up_and_down_keeps_band_energy(f1 in 100.0f64..3000.0, f2 in 100.0f64..3000.0, a in 0.1f64..0.5) {
        let w = sines(&[(f1, a), (f2, 0.3)], 8000, 4000);
        let back = resample(&resample(&w, 16000).unwrap(), 8000).unwrap();
        prop_assert_eq!(back.len(), w.len());
        // skip the filter's edge region
        let energy = |x: &[f64]| x[200..3800].iter().map(|v| v * v).sum::<f64>();
        let rel = (energy(&back.samples) - energy(&w.samples)).abs() / energy(&w.samples);
        prop_assert!(rel < 0.01, "relative band energy error {}", rel);
    }

    #[test]
    fn stft_round_trip(samples in prop::collection::vec(-1.0f64..1.0, 1024..6000)) {
        let w = Waveform::new(samples, 22050).unwrap();
        let back = istft(&stft(&w, &StftConfig::default()).unwrap()).unwrap();
        prop_assert_eq!(back.len(), w.len());
        let worst = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-6);
    }

    #[test]
    fn parseval_on_interior_frames(samples in prop::collection::vec(-1.0f64..1.0, 3000..5000)) {
        let cfg = StftConfig::default();
        let w = Waveform::new(samples, 22050).unwrap();
        let spec = stft(&w, &cfg).unwrap();
        let win = cfg.window();
        // frame 4 is centred at 4 * hop and needs no padding
        let start = 4 * cfg.hop - cfg.n_fft / 2;
        let time: f64 = (0..cfg.n_fft).map(|i| (w.samples[start + i] * win[i]).powi(2)).sum();
        let f: &Vec<Complex64> = &spec.frames[4];
        let n = cfg.n_fft;
        let freq = (f[0].norm_sqr() + f[n / 2].norm_sqr()
            + 2.0 * f[1..n / 2].iter().map(|c| c.norm_sqr()).sum::<f64>()) / n as f64;
        prop_assert!((freq / time - 1.0).abs() < 1e-6);
    }

    #[test]
    fn formant_shift_keeps_length(u in -1.0f64..1.0, len in 2000usize..6000) {
        let w = sines(&[(180.0, 0.4), (900.0, 0.2)], 22050, len);
        let cfg = StftConfig::default();
        let out = formant_shift(&w, ShiftFactor::from_unit(u), &cfg).unwrap();
        prop_assert!((out.len() as i64 - w.len() as i64).unsigned_abs() as usize <= cfg.hop);
    }

    #[test]
    fn random_slice_length_and_determinism(frames in 1usize..300, dur in 0.05f64..3.0, seed in any::<u64>()) {
        let m = MelSpectrogram {
            data: Array2::from_shape_fn((frames, 4), |(t, k)| (t * 4 + k) as f64),
            frame_period: 0.0116,
        };
        let want = m.frames_for(dur).max(1);
        let a = random_slice(&m, dur, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = random_slice(&m, dur, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a.n_frames(), want);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mel_is_monotone_in_amplitude(gain in 1.0f64..10.0, f in 80.0f64..4000.0) {
        let cfg = StftConfig::default();
        let fb = mel_filterbank(40, cfg.n_fft, 22050, 0.0, 8000.0).unwrap();
        let w = sines(&[(f, 0.1), (f * 1.7, 0.05)], 22050, 4096);
        let loud = Waveform::new(w.samples.iter().map(|v| v * gain).collect(), 22050).unwrap();
        let a = mel_spectrogram(&w, &cfg, &fb).unwrap();
        let b = mel_spectrogram(&loud, &cfg, &fb).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            prop_assert!(y >= &(x - 1e-12));
        }
    }

    #[test]
    fn semitone_shift_is_antisymmetric(a in 60.0f64..500.0, b in 60.0f64..500.0) {
        let st = 12.0 * (b / a).log2();
        prop_assume!((st.abs().fract() - 0.5).abs() > 1e-6);
        let forward = semitone_shift(&stats(a), &stats(b)).unwrap().semitones();
        let back = semitone_shift(&stats(b), &stats(a)).unwrap().semitones();
        prop_assert_eq!(forward, -back);
    }

    #[test]
    fn corrected_median_within_half_semitone(src in 80.0f64..300.0, tgt in 80.0f64..300.0, spread in 0.0f64..0.05, n in 5usize..60) {
        let values: Vec<f64> = (0..n)
            .map(|i| if i % 7 == 3 { 0.0 } else { src * (1.0 + spread * ((i as f64 * 0.9).sin())) })
            .collect();
        let contour = F0Contour { values, frame_period: 0.01 };
        let src_med = median(&contour.voiced().collect::<Vec<_>>()).unwrap();
        let s = semitone_shift(&stats(src_med), &stats(tgt)).unwrap();
        let shifted = apply_semitone_shift(&contour, s);
        let out = median(&shifted.contour.voiced().collect::<Vec<_>>()).unwrap();
        prop_assert!((12.0 * (out / tgt).log2()).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn yin_dc_offset_invariance(f0 in 90.0f64..450.0, dc in -0.1f64..0.1) {
        let w = sines(&[(f0, 0.5)], 22050, 11025);
        let shifted = Waveform::new(w.samples.iter().map(|v| v + dc).collect(), 22050).unwrap();
        let cfg = PitchConfig::default();
        let a = estimate_f0(&w, &cfg).unwrap();
        let b = estimate_f0(&shifted, &cfg).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > 0.0 && *y > 0.0 {
                prop_assert!((x - y).abs() / x < 0.01);
            }
        }
    }

    #[test]
    fn encoder_is_lipschitz_sane(seed in any::<u64>()) {
        use rand::Rng;
        let cfg = EncoderConfig { n_mels: 10, channels: vec![4, 4], hidden: 8, embedding_dim: 8 };
        let p = init_params(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let x = Array2::from_shape_simple_fn((16, 10), || rng.random_range(-4.0..0.0));
        let dx = Array2::from_shape_simple_fn((16, 10), || rng.random_range(-1e-6..1e-6));
        if let (Ok((a, _)), Ok((b, _))) = (forward_array(&p, x.view()), forward_array(&p, (&x + &dx).view())) {
            prop_assert!((&a - &b).dot(&(&a - &b)).sqrt() < 1e-2);
        }
    }

    #[test]
    fn loss_is_permutation_and_rotation_invariant(seed in any::<u64>(), w in 0.5f64..20.0, b in -5.0f64..5.0) {
        use rand::Rng;
        use rand::seq::SliceRandom;
        let (c, m, dim) = (3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Array2::from_shape_simple_fn((c * m, dim), || rng.random_range(-1.0..1.0));
        let lp = LossParams { w, b };
        let base = angular_proto_loss(&emb, c, m, &lp).unwrap().loss;

        let mut perm = emb.clone();
        for k in 0..c {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            for (i, &j) in order.iter().enumerate() {
                perm.row_mut(k * m + i).assign(&emb.row(k * m + j));
            }
        }
        prop_assert!((angular_proto_loss(&perm, c, m, &lp).unwrap().loss - base).abs() < 1e-9);

        let q = random_orthogonal(dim, &mut rng);
        let rotated = emb.dot(&q);
        prop_assert!((angular_proto_loss(&rotated, c, m, &lp).unwrap().loss - base).abs() < 1e-9);
    }

    #[test]
    fn separated_classes_loss_falls_with_scale(c in 2usize..5, m in 2usize..5) {
        let emb = Array2::from_shape_fn((c * m, c), |(i, d)| if i / m == d { 1.0 } else { 0.0 });
        let mut prev = f64::INFINITY;
        for k in 0..12 {
            let w = 0.5 * 2f64.powi(k);
            let l = angular_proto_loss(&emb, c, m, &LossParams { w, b: 0.0 }).unwrap().loss;
            // strict until the loss underflows to zero
            prop_assert!(l < prev || (l == 0.0 && prev == 0.0));
            prev = l;
        }
        prop_assert!(prev < 1e-6);
    }

    #[test]
    fn early_radam_steps_ignore_second_moment(grads in prop::collection::vec(-1e3f64..1e3, 4)) {
        let cfg = RAdamConfig::default();
        let mut p = [0.0];
        let mut st = OptimizerState::new(&[1]);
        let mut m = 0.0;
        for (t, &g) in grads.iter().enumerate() {
            let t = t as u64 + 1;
            prop_assert!(rho_t(cfg.beta2, t) <= 4.0);
            let before = p[0];
            radam_step(&mut [&mut p], &[&[g]], &mut st, &cfg).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            let expected = cfg.lr * m / (1.0 - cfg.beta1.powi(t as i32));
            prop_assert!(((before - p[0]) - expected).abs() <= 1e-12 * expected.abs().max(1e-300) + 1e-18);
        }
    }

    #[test]
    fn classification_ignores_positive_scaling(seed in any::<u64>(), sq in 0.01f64..100.0, sc in 0.01f64..100.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = CentroidSet { centroids: Default::default(), counts: Default::default() };
        for label in ["a", "b", "c", "d"] {
            raw.centroids.insert(label.into(), (0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
            raw.counts.insert(label.into(), 1);
        }
        let mut scaled = raw.clone();
        for v in scaled.centroids.values_mut() {
            v.iter_mut().for_each(|x| *x *= sc);
        }
        let q = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let a = classify_nearest_centroid(&q, &raw).label;
        let b = classify_nearest_centroid(&(&q * sq), &scaled).label;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn centroids_beat_constant_baseline(seed in any::<u64>(), k in 2usize..5) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let mut items = Vec::new();
        for c in 0..k {
            let n = rng.random_range(3..15);
            for _ in 0..n {
                let e = Array1::from_shape_fn(dim, |d| if d == c { 5.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
                items.push(labeled(e, &format!("s{c}")));
            }
        }
        let cs = compute_centroids(items.iter().map(|e| (e.style.as_str(), &e.embedding))).unwrap();
        let acc = centroid_accuracy(items.iter().map(|e| (e.style.as_str(), &e.embedding)), &cs).accuracy();
        let best_constant = cs.counts.values().max().copied().unwrap() as f64 / items.len() as f64;
        prop_assert!(acc >= best_constant);
    }

    #[test]
    fn pca_is_rotation_equivariant_up_to_sign(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 5;
        let scales = [5.0, 2.0, 0.7, 0.3, 0.1];
        let items: Vec<_> = (0..40)
            .map(|_| labeled(Array1::from_shape_fn(dim, |d| scales[d] * rng.random_range(-1.0..1.0)), "a"))
            .collect();
        let q = random_orthogonal(dim, &mut rng);
        let rotated: Vec<_> = items.iter().map(|i| labeled(i.embedding.dot(&q), "a")).collect();
        let p = pca_project(&items).unwrap();
        let r = pca_project(&rotated).unwrap();
        let corr = |a: Vec<f64>, b: Vec<f64>| {
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let cx = corr(p.points.iter().map(|t| t.x).collect(), r.points.iter().map(|t| t.x).collect());
        let cy = corr(p.points.iter().map(|t| t.y).collect(), r.points.iter().map(|t| t.y).collect());
        prop_assert!((cx.abs() - 1.0).abs() < 1e-6);
        prop_assert!((cy.abs() - 1.0).abs() < 1e-6);
        prop_assert!(p.explained_variance[0] >= p.explained_variance[1]);
    }

    #[test]
    fn toy_waveforms_are_well_formed(spk in 0usize..3, sty in 0usize..4, dur in 0.2f64..1.5, seed in any::<u64>()) {
        let spec = ToySpec::default();
        let sr = 16000;
        let w = synth_utterance(&spec.speakers[spk], &spec.styles[sty], dur, sr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(w.samples.iter().all(|v| v.is_finite()));
        prop_assert!(w.peak() <= PEAK_LEVEL + 1e-6);
        prop_assert!((w.len() as f64 - dur * sr as f64).abs() <= 1.0);
    }
}
