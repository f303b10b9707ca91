use proptest::prelude::*;

mod rng {
    use rand::Rng;
    use yvector::rng::stream;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).gen();
        let b: u64 = stream(7, &[1, 2]).gen();
        let c: u64 = stream(7, &[2, 1]).gen();
        let d: u64 = stream(8, &[1, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}

mod wav {
    use yvector::audio::{read_wav_pcm16, write_wav_pcm16};
    use yvector::Error;

    fn decode(bytes: &[u8]) -> Result<Vec<f32>, (&'static str, String)> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.wav");
        std::fs::write(&p, bytes).unwrap();
        match read_wav_pcm16(&p) {
            Ok(u) => Ok(u.samples),
            Err(Error::WavFormat { field, detail, .. }) => Err((field, detail)),
            Err(e) => panic!("unexpected {e}"),
        }
    }

    fn header(channels: u16, rate: u32, bits: u16, format: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * channels as u32 * bits as u32 / 8).to_le_bytes());
        out.extend_from_slice(&(channels * bits / 8).to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn zeros_read_back_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spk/z.wav");
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        write_wav_pcm16(&p, &vec![0.0; 62_400]).unwrap();
        let u = read_wav_pcm16(&p).unwrap();
        assert_eq!(u.samples.len(), 62_400);
        assert!(u.samples.iter().all(|&s| s == 0.0));
        assert_eq!(u.speaker_id, "spk");
        assert_eq!(u.utterance_id, "z.wav");
        assert_eq!(u.sample_rate, 16_000);
    }

    #[test]
    fn max_int16_scales_by_32768() {
        let s = decode(&header(1, 16_000, 16, 1, &32767i16.to_le_bytes())).unwrap();
        assert_eq!(s, vec![32767.0 / 32768.0]);
        let s = decode(&header(1, 16_000, 16, 1, &i16::MIN.to_le_bytes())).unwrap();
        assert_eq!(s, vec![-1.0]);
    }

    #[test]
    fn rejects_wrong_formats_naming_the_field() {
        let data = [0u8; 8];
        assert_eq!(decode(&header(2, 16_000, 16, 1, &data)).unwrap_err().0, "channels");
        assert_eq!(decode(&header(1, 8_000, 16, 1, &data)).unwrap_err().0, "sample_rate");
        assert_eq!(decode(&header(1, 16_000, 8, 1, &data)).unwrap_err().0, "bits_per_sample");
        assert_eq!(decode(&header(1, 16_000, 16, 3, &data)).unwrap_err().0, "codec");
        assert_eq!(decode(b"RIFX0000WAVE").unwrap_err().0, "riff");
    }

    #[test]
    fn stereo_file_error_mentions_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        std::fs::write(&p, header(2, 16_000, 16, 1, &[0u8; 8])).unwrap();
        let err = read_wav_pcm16(&p).unwrap_err().to_string();
        assert!(err.contains("channels"), "{err}");
    }

    #[test]
    fn skips_unknown_chunks() {
        let mut bytes = header(1, 16_000, 16, 1, &[1, 0, 2, 0]);
        // splice a LIST chunk with odd size before data
        let data_at = bytes.len() - 12;
        let list = [b'L', b'I', b'S', b'T', 3, 0, 0, 0, b'a', b'b', b'c', 0];
        bytes.splice(data_at..data_at, list);
        assert_eq!(decode(&bytes).unwrap(), vec![1.0 / 32768.0, 2.0 / 32768.0]);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let mut bytes = header(1, 16_000, 16, 1, &[0u8; 8]);
        bytes.truncate(bytes.len() - 4);
        assert_eq!(decode(&bytes).unwrap_err().0, "chunk");
    }
}

mod trials {
    use super::*;
    use yvector::audio::*;
    use yvector::Error;

    #[test]
    fn parse_examples() {
        let t = parse_trials("1 a/u1.wav a/u2.wav\n0 a/u1.wav b/u1.wav\n").unwrap();
        assert_eq!(t[0].label, TrialLabel::Target);
        assert_eq!((t[0].enroll.as_str(), t[0].test.as_str()), ("a/u1.wav", "a/u2.wav"));
        assert_eq!(t[1].label, TrialLabel::Nontarget);
        assert_eq!(t[1].line, 2);

        match parse_trials("1 a b\n2 x y\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_trials("1 a\n"), Err(Error::Parse { line: 1, .. })));
    }

    fn manifest(speakers: usize, utts: usize) -> CorpusManifest {
        let mut records = Vec::new();
        for s in 0..speakers {
            for u in 0..utts {
                records.push(ManifestRecord {
                    utterance_id: format!("s{s}/u{u}"),
                    speaker_id: format!("s{s}"),
                    path: format!("s{s}/u{u}"),
                    num_samples: 1,
                });
            }
        }
        CorpusManifest::new(records, ".")
    }

    #[test]
    fn generated_trials_round_trip_through_text() {
        let m = manifest(3, 3);
        let trials = generate_trials(&m, 10, 4).unwrap();
        let text: String = trials.iter().map(|t| format!("{t}\n")).collect();
        let back = parse_trials(&text).unwrap();
        for (a, b) in trials.iter().zip(&back) {
            assert_eq!((a.label, &a.enroll, &a.test), (b.label, &b.enroll, &b.test));
        }
    }

    proptest! {
        #[test]
        fn generated_lists_have_both_labels(speakers in 2usize..6, utts in 2usize..5, n in 2usize..40, seed in any::<u64>()) {
            let m = manifest(speakers, utts);
            let trials = generate_trials(&m, n, seed).unwrap();
            prop_assert!(trials.iter().any(|t| t.label.is_target()));
            prop_assert!(trials.iter().any(|t| !t.label.is_target()));
            for t in &trials {
                let se = t.enroll.split('/').next().unwrap();
                let st = t.test.split('/').next().unwrap();
                prop_assert_eq!(t.label.is_target(), se == st);
                prop_assert_ne!(&t.enroll, &t.test);
            }
        }
    }
}

mod synth {
    use std::f64::consts::PI;
    use yvector::audio::synth::F0_JITTER;
    use yvector::audio::*;
    use yvector::Error;

    /// Direct DFT magnitude at `bin` of a Hann-windowed frame.
    fn dft_mag(frame: &[f64], bin: usize) -> f64 {
        let n = frame.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &x) in frame.iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos();
            let a = -2.0 * PI * bin as f64 * i as f64 / n;
            re += w * x * a.cos();
            im += w * x * a.sin();
        }
        re.hypot(im)
    }

    #[test]
    fn dominant_peak_sits_on_a_harmonic() {
        let n_fft = 4096;
        let bin_hz = SAMPLE_RATE as f64 / n_fft as f64;
        for speaker in 0..4 {
            let profile = VoiceProfile::draw(11, speaker);
            assert!((80.0..=300.0).contains(&profile.f0_hz));
            let utt = synthesize(&profile, 11, speaker, 0, 8000);
            let frame: Vec<f64> = utt.samples[..n_fft].iter().map(|&v| v as f64).collect();
            let (peak_bin, _) = (1..n_fft / 2)
                .map(|b| (b, dft_mag(&frame, b)))
                .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            let peak_hz = peak_bin as f64 * bin_hz;
            let harmonic = (peak_hz / utt.f0_hz).round().max(1.0);
            let dist_bins = (peak_hz - harmonic * utt.f0_hz).abs() / bin_hz;
            assert!(dist_bins <= 2.0, "speaker {speaker}: peak {peak_hz} Hz, f0 {}", utt.f0_hz);
            assert!((utt.f0_hz / profile.f0_hz - 1.0).abs() <= F0_JITTER);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_counted() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_speakers: 2,
            utts_per_speaker: 2,
            duration_s: 0.25,
            seed: 5,
        };
        let ma = synth_corpus_generate(&cfg, a.path()).unwrap();
        let mb = synth_corpus_generate(&cfg, b.path()).unwrap();
        assert_eq!(ma.records, mb.records);
        assert_eq!(ma.len(), 4);
        assert_eq!(ma.num_classes(), 2);
        let mut classes: Vec<usize> = ma
            .records
            .iter()
            .map(|r| ma.class_of(&r.speaker_id).unwrap())
            .collect();
        classes.dedup();
        assert_eq!(classes, vec![0, 1]);
        for r in &ma.records {
            let fa = std::fs::read(ma.resolve(r)).unwrap();
            let fb = std::fs::read(mb.resolve(r)).unwrap();
            assert_eq!(fa, fb);
            assert_eq!(fa.len(), 44 + 2 * 4000);
        }
    }

    #[test]
    fn rejects_single_speaker() {
        let d = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_speakers: 1,
            utts_per_speaker: 2,
            duration_s: 0.1,
            seed: 0,
        };
        assert!(matches!(synth_corpus_generate(&cfg, d.path()), Err(Error::Config(_))));
    }
}

mod crop {
    use super::*;
    use yvector::audio::*;
    use yvector::rng;

    #[test]
    fn normalize_examples() {
        let mut a = vec![0.5f32, -1.0];
        assert_eq!(normalize_by_max(&mut a), Normalization::Scaled(1.0));
        assert_eq!(a, vec![0.5, -1.0]);

        let mut b = vec![0.25f32, -0.5];
        normalize_by_max(&mut b);
        assert_eq!(b, vec![0.5, -1.0]);

        let mut z = vec![0.0f32; 5];
        assert!(normalize_by_max(&mut z).is_degenerate());
        assert_eq!(z, vec![0.0; 5]);
    }

    #[test]
    fn crop_examples() {
        let mut r = rng::stream(1, &[]);
        let u: Vec<f32> = (0..62_400).map(|i| i as f32).collect();
        assert_eq!(random_crop(&u, 62_400, &mut r).unwrap(), u);

        let long: Vec<f32> = (0..62_401).map(|i| i as f32).collect();
        let mut starts = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let c = random_crop(&long, 62_400, &mut r).unwrap();
            starts.insert(c[0] as usize);
        }
        assert_eq!(starts.into_iter().collect::<Vec<_>>(), vec![0, 1]);

        let short: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        let c = random_crop(&short, 62_400, &mut r).unwrap();
        assert_eq!(c.len(), 62_400);
        // 62 full repetitions plus a truncated 63rd
        assert_eq!(c[62_000], 0.0);
        assert_eq!(c[62_399], 399.0);
        assert!(c.chunks(1000).all(|ch| ch.iter().enumerate().all(|(i, &v)| v == i as f32)));

        assert!(random_crop(&[], 10, &mut r).is_err());
    }

    #[test]
    fn center_crop_is_centered() {
        let u: Vec<f32> = (0..10).map(|i| i as f32).collect();
        assert_eq!(center_crop(&u, 4).unwrap(), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(center_crop(&u[..3], 5).unwrap(), vec![0.0, 1.0, 2.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-4.0f32..4.0, 1..64)) {
            let mut once = v.clone();
            normalize_by_max(&mut once);
            let mut twice = once.clone();
            normalize_by_max(&mut twice);
            prop_assert_eq!(&once, &twice);
            if v.iter().any(|&x| x != 0.0) {
                prop_assert_eq!(once.iter().fold(0.0f32, |m, &x| m.max(x.abs())), 1.0);
            }
        }

        #[test]
        fn crop_length_is_exact(len in 1usize..300, want in 1usize..400, seed in any::<u64>()) {
            let u: Vec<f32> = (0..len).map(|i| i as f32).collect();
            let mut r = rng::stream(seed, &[]);
            prop_assert_eq!(random_crop(&u, want, &mut r).unwrap().len(), want);
            prop_assert_eq!(center_crop(&u, want).unwrap().len(), want);
        }
    }
}

mod manifest {
    use yvector::audio::*;
    use yvector::Error;

    fn rec(u: &str, s: &str) -> ManifestRecord {
        ManifestRecord {
            utterance_id: u.into(),
            speaker_id: s.into(),
            path: u.into(),
            num_samples: 10,
        }
    }

    #[test]
    fn classes_are_dense_and_sorted() {
        let m = CorpusManifest::new(vec![rec("b/1", "b"), rec("a/1", "a"), rec("b/2", "b")], ".");
        assert_eq!(m.num_classes(), 2);
        assert_eq!(m.class_of("a"), Some(0));
        assert_eq!(m.class_of("b"), Some(1));
        assert_eq!(m.speakers(), vec!["a", "b"]);
    }

    #[test]
    fn load_rejects_missing_files_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        CorpusManifest::new(vec![rec("x.wav", "s")], dir.path()).save(&p).unwrap();
        assert!(matches!(CorpusManifest::load(&p), Err(Error::Io { .. })));
        std::fs::write(&p, r#"[{"utterance_id":"a","speaker_id":"s","path":"a","num_samples":1,"extra":0}]"#).unwrap();
        assert!(matches!(CorpusManifest::load(&p), Err(Error::Json(_))));
    }
}
