//! Seed-averaged training-curve and distribution-transport properties that
//! are too slow for the unit suites.

use dad_core::config::ExperimentConfig;
use dad_core::dad::DadModule;
use dad_core::diffusion::VarianceSchedule;
use dad_core::metrics::{rbf_mmd2, MmdConfig};
use dad_core::mls::{prepare_datasets, train_source};
use dad_core::models::{Classifier, DomainTag, FeatureBatch, FeatureExtractor, NoisePredictor};
use dad_core::numerics::rng::Rng;

fn gaussian_target(rows: usize, dim: usize, rng: &mut Rng) -> FeatureBatch {
    // fixed tight 2-D Gaussian, mean (1, -0.5), stds (0.15, 0.1); a tight
    // cluster keeps the epsilon-recovery floor low at low-noise timesteps
    let mut feats = rng.gaussian(vec![rows, dim]).unwrap();
    for row in feats.data_mut().chunks_mut(dim) {
        row[0] = 1.0 + 0.15 * row[0];
        row[1] = -0.5 + 0.1 * row[1];
    }
    FeatureBatch::new(feats, None, DomainTag::Target).unwrap()
}

#[test]
fn pretrain_halves_reverse_loss_on_gaussian_target() {
    let cfg = ExperimentConfig::default();
    for seed in 0..3u64 {
        let base = Rng::new(seed);
        let mut init = base.substream(1);
        let predictor = NoisePredictor::new(
            2,
            cfg.noise_hidden,
            cfg.noise_hidden_layers,
            cfg.emb_width,
            &mut init,
        )
        .unwrap();
        let sched = VarianceSchedule::linear(50, cfg.beta_1, cfg.beta_k).unwrap();
        let mut dad = DadModule::new(predictor, sched);
        let target = gaussian_target(500, 2, &mut base.substream(2));
        let mut opts = cfg.train_opts();
        opts.lr = 0.03;
        let trace = dad
            .pretrain_target_reverse(&target, 2000, &opts, &mut base.substream(3))
            .unwrap();
        assert!(trace.iter().all(|v| v.is_finite()), "seed {seed}: non-finite loss");
        let head: f64 = trace[..100].iter().sum::<f64>() / 100.0;
        let tail: f64 = trace[trace.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(
            tail <= 0.5 * head,
            "seed {seed}: loss {head:.4} -> {tail:.4}, expected at least a halving"
        );
    }
}

#[test]
fn pretrain_zero_steps_is_noop() {
    let cfg = ExperimentConfig::default();
    let base = Rng::new(9);
    let mut init = base.substream(1);
    let predictor = NoisePredictor::new(
        2,
        cfg.noise_hidden,
        cfg.noise_hidden_layers,
        cfg.emb_width,
        &mut init,
    )
    .unwrap();
    let before: Vec<Vec<f64>> = predictor
        .mlp
        .params()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    let sched = VarianceSchedule::linear(50, cfg.beta_1, cfg.beta_k).unwrap();
    let mut dad = DadModule::new(predictor, sched);
    let target = gaussian_target(100, 2, &mut base.substream(2));
    dad.pretrain_target_reverse(&target, 0, &cfg.train_opts(), &mut base.substream(3))
        .unwrap();
    let after: Vec<Vec<f64>> = dad
        .predictor
        .mlp
        .params()
        .iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    assert_eq!(before, after);
}

/// After reverse pretraining on the shifted two-moons target, the simulated
/// endpoint distribution sits closer to the target than the source does,
/// in a majority of seeds.
#[test]
fn pretrained_transport_improves_mmd_endpoint() {
    let mut wins = 0usize;
    for seed in 0..3u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.k_steps = 50;
        cfg.k_stride = 1;
        cfg.seed = seed;
        cfg.epochs_source = 10;
        let data = prepare_datasets(&cfg).unwrap();
        let base = Rng::new(seed);
        let mut init = base.substream(1);
        let mut fe =
            FeatureExtractor::new(2, cfg.extractor_hidden, cfg.feature_dim, &mut init).unwrap();
        let mut cl =
            Classifier::new(cfg.feature_dim, cfg.classifier_hidden, 2, &mut init).unwrap();
        let predictor = NoisePredictor::new(
            cfg.feature_dim,
            cfg.noise_hidden,
            cfg.noise_hidden_layers,
            cfg.emb_width,
            &mut init,
        )
        .unwrap();
        let mut rng = base.substream(2);
        train_source(&mut fe, &mut cl, &data.source, cfg.epochs_source, &cfg.train_opts(), &mut rng)
            .unwrap();
        let src = fe
            .extract(
                &data.source.points,
                DomainTag::Source,
                Some(data.source.labels.clone()),
            )
            .unwrap();
        let tgt_train = fe
            .extract(&data.target_train.points, DomainTag::Target, None)
            .unwrap();
        let tgt_test = fe
            .extract(&data.target_test.points, DomainTag::Target, None)
            .unwrap();
        let sched = VarianceSchedule::linear(cfg.k_steps, cfg.beta_1, cfg.beta_k).unwrap();
        let mut dad = DadModule::new(predictor, sched);
        let mut opts = cfg.train_opts();
        opts.lr = 0.01;
        dad.pretrain_target_reverse(&tgt_train, 2000, &opts, &mut base.substream(3))
            .unwrap();
        let rows: Vec<usize> = (0..400).collect();
        let probe = FeatureBatch::new(
            src.features.gather_rows(&rows),
            Some(rows.iter().map(|&i| src.labels.as_ref().unwrap()[i]).collect()),
            DomainTag::Source,
        )
        .unwrap();
        let sim = dad
            .simulate_transitional(&probe, cfg.k_steps, &mut base.substream(4))
            .unwrap();
        let mmd_cfg = MmdConfig::default();
        let before = rbf_mmd2(&probe.features, &tgt_test.features, mmd_cfg).unwrap();
        let after = rbf_mmd2(&sim.features, &tgt_test.features, mmd_cfg).unwrap();
        if after < before {
            wins += 1;
        }
    }
    assert!(wins >= 2, "endpoint MMD improved in only {wins}/3 seeds");
}

#[test]
fn source_training_loss_non_increasing_in_moving_average() {
    let mut cfg = ExperimentConfig::default();
    cfg.k_steps = 50;
    cfg.k_stride = 1;
    let data = prepare_datasets(&cfg).unwrap();
    let base = Rng::new(cfg.seed);
    let mut init = base.substream(1);
    let mut fe =
        FeatureExtractor::new(2, cfg.extractor_hidden, cfg.feature_dim, &mut init).unwrap();
    let mut cl = Classifier::new(cfg.feature_dim, cfg.classifier_hidden, 2, &mut init).unwrap();
    let mut rng = base.substream(2);
    let trace = train_source(&mut fe, &mut cl, &data.source, 10, &cfg.train_opts(), &mut rng)
        .unwrap();
    let window = 50;
    assert!(trace.len() > 2 * window);
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut prev = avg(&trace[..window]);
    // sampled every `window` iterations; small tolerance for minibatch noise
    for chunk in trace[window..].chunks(window) {
        if chunk.len() < window {
            break;
        }
        let cur = avg(chunk);
        assert!(
            cur <= prev + 0.02,
            "moving average increased: {prev:.4} -> {cur:.4}"
        );
        prev = cur;
    }
}
