use elp_core::corpus::{generate_clip, generate_corpus, read_corpus, write_corpus, CorpusSpec};
use elp_core::evaluation::{evaluate_method, ground_truth_outputs, EvalConfig};
use elp_core::metrics::motion_wtlcc;
use ndarray::{ArrayView2, Axis};

fn default_corpus() -> elp_core::corpus::Corpus {
    generate_corpus(&CorpusSpec::default()).unwrap()
}

/// Root-mean-square deviation from the per-dimension temporal mean.
fn rms_amplitude(x: ArrayView2<'_, f64>) -> f64 {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = &x - &mean;
    (centered.mapv(|v| v * v).sum() / centered.len() as f64).sqrt()
}

#[test]
fn per_emotion_speaker_amplitudes_are_separated_by_three_noise_stds() {
    let spec = CorpusSpec::default();
    let corpus = default_corpus();
    let mut sums = vec![(0.0, 0usize); spec.emotions];
    for clip in corpus.all() {
        // The closure pulse is a separate cue, so the closure column is excluded.
        let beta = clip.speaker.beta();
        let cols: Vec<usize> = (0..beta.ncols()).filter(|&d| d != spec.closure_index).collect();
        let motion = beta.select(Axis(1), &cols);
        let e = clip.emotion.slot();
        sums[e].0 += rms_amplitude(motion.view());
        sums[e].1 += 1;
    }
    let means: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let gap = (means[i] - means[j]).abs();
            assert!(gap >= 3.0 * spec.speaker_noise, "emotions {i},{j}: {means:?}");
        }
    }
}

#[test]
fn ground_truth_listener_tracks_its_speaker() {
    let corpus = default_corpus();
    let eval = EvalConfig::default();
    let test = &corpus.test;
    let window = eval.window.min(corpus.spec.frames);
    let lag = eval.max_lag.min(window - 1);
    assert!(lag >= corpus.spec.lag);
    let sync = |s: usize, l: usize| {
        motion_wtlcc(test[s].speaker.beta(), test[l].listener.beta(), window, lag).unwrap()
    };
    let n = test.len();
    let own: f64 = (0..n).map(|i| sync(i, i)).sum::<f64>() / n as f64;
    let shuffled: f64 = (0..n).map(|i| sync((i + 1) % n, i)).sum::<f64>() / n as f64;
    assert!(own >= 0.5, "own-speaker wtlcc {own}");
    assert!(own - shuffled >= 0.2, "own {own}, shuffled {shuffled}");
}

#[test]
fn blink_rate_matches_each_pattern_over_ten_thousand_frames() {
    let spec = CorpusSpec {
        frames: 2000,
        ..CorpusSpec::default()
    };
    for (e, pattern) in spec.patterns().iter().enumerate() {
        let (mut events, mut frames) = (0usize, 0usize);
        for id in 0..5u64 {
            let clip = generate_clip(&spec, 1000 + id * 10 + e as u64, e).unwrap();
            events += clip.blink.count_events();
            frames += clip.frames();
        }
        let rate = events as f64 / frames as f64;
        let rel = (rate - pattern.blink_rate).abs() / pattern.blink_rate;
        assert!(rel <= 0.1, "{}: rate {rate} vs {}", pattern.name, pattern.blink_rate);
    }
}

#[test]
fn blink_rates_are_ordered_positive_neutral_negative() {
    let p = CorpusSpec::default().patterns();
    let rate = |name: &str| p.iter().find(|x| x.name == name).unwrap().blink_rate;
    assert!(rate("positive") < rate("neutral"));
    assert!(rate("neutral") < rate("negative"));
}

#[test]
fn labels_are_balanced_for_uneven_clip_counts() {
    for clips in [7, 10, 31, 300] {
        let corpus = generate_corpus(&CorpusSpec {
            clips,
            ..CorpusSpec::default()
        })
        .unwrap();
        let mut counts = vec![0usize; corpus.spec.emotions];
        for clip in corpus.all() {
            counts[clip.emotion.slot()] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{clips} clips: {counts:?}");
    }
}

#[test]
fn reloaded_corpus_reproduces_metric_values() {
    let corpus = default_corpus();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let reloaded = read_corpus(dir.path()).unwrap();
    assert_eq!(reloaded.spec, corpus.spec);
    let eval = EvalConfig::default();
    for (a, b) in [
        (&corpus.train, &reloaded.train),
        (&corpus.val, &reloaded.val),
        (&corpus.test, &reloaded.test),
    ] {
        let before = evaluate_method("gt", a, &ground_truth_outputs(a), &eval, 3).unwrap();
        let after = evaluate_method("gt", b, &ground_truth_outputs(b), &eval, 3).unwrap();
        assert_eq!(before, after);
    }
}
