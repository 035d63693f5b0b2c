use elp_core::baselines::{random_codewords, RandomBaseline};
use elp_core::corpus::{generate_corpus, CorpusSpec};
use elp_core::network::{AseModel, NetworkConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[test]
fn perturbation_std_matches_five_percent_of_training_std() {
    let corpus = generate_corpus(&CorpusSpec {
        clips: 30,
        ..CorpusSpec::default()
    })
    .unwrap();
    let train = &corpus.train;
    let scale = 0.05;
    let baseline = RandomBaseline::new(train, scale).unwrap();

    // Per-dimension population std over all training listener frames.
    let dims = [0usize, 17, 99];
    let target: Vec<f64> = dims
        .iter()
        .map(|&d| {
            let column: Vec<f64> = train.iter().flat_map(|c| c.listener.beta().column(d).to_vec()).collect();
            scale * population_std(&column)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut residuals = vec![Vec::with_capacity(10_000); dims.len()];
    for _ in 0..10_000 {
        let (motion, index) = baseline.sample(&mut rng).unwrap();
        let source = train[index].listener.beta();
        for (k, &d) in dims.iter().enumerate() {
            residuals[k].push(motion.beta()[[7, d]] - source[[7, d]]);
        }
    }
    for (k, r) in residuals.iter().enumerate() {
        let empirical = population_std(r);
        let rel = (empirical - target[k]).abs() / target[k];
        assert!(rel <= 0.05, "dim {}: {empirical} vs {}", dims[k], target[k]);
    }
}

#[test]
fn dls_codeword_histogram_is_uniform() {
    let config = NetworkConfig {
        heads: 4,
        categories: 4,
        ..NetworkConfig::default()
    };
    let model = AseModel::new(config, 0).unwrap();
    let width = model.config().code_width();
    assert_eq!(width, model.config().emotions * model.config().categories);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = vec![0usize; width + 1];
    let mut total = 0usize;
    // 25k grids of 1 frame by 4 heads = 100k draws.
    for _ in 0..25_000 {
        let grid = random_codewords(&model, 1, &mut rng).unwrap();
        for &c in grid.codes() {
            counts[c] += 1;
            total += 1;
        }
    }
    assert_eq!(counts[0], 0);
    let expected = 1.0 / width as f64;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        let freq = n as f64 / total as f64;
        assert!((freq - expected).abs() <= 0.02, "code {c}: {freq} vs {expected}");
    }
}
