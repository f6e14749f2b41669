use ectc::model::{self, ModelParams, Supervision, TrainConfig};
use ectc::pipeline::{align, evaluate};
use ectc::similarity::SimilarityMode;
use ectc::synth::{generate_corpus, SyntheticSpec};

#[test]
fn untrained_model_scores_chance_on_balanced_corpus() {
    let spec = SyntheticSpec {
        videos: 200,
        test_videos: 0,
        ..SyntheticSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let params = ModelParams::zeros(spec.dim, 8, spec.actions);
    let acc = evaluate(&params, &corpus.train).unwrap().summary.frame_acc;
    let chance = 1.0 / spec.actions as f64;
    assert!((acc - chance).abs() < 0.05, "frame accuracy {acc}, chance {chance}");
}

#[test]
fn weak_alignment_beats_uniform_spread() {
    let (mut aligned, mut uniform) = (0.0, 0.0);
    let seeds = [3u64, 4];
    for seed in seeds {
        let corpus = generate_corpus(&SyntheticSpec {
            sigma: 1.0,
            videos: 60,
            test_videos: 0,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let config = TrainConfig {
            mode: Supervision::Weak,
            similarity: SimilarityMode::Both,
            hidden: 16,
            epochs: 8,
            seed,
            ..TrainConfig::default()
        };
        let items = model::prepare_corpus(&corpus.train, &config).unwrap();
        let outcome = model::train(&items, 16, corpus.vocab.len(), &config, |_| {}).unwrap();
        let rows = align(&outcome.params, &config, &corpus.vocab, &corpus.train).unwrap();
        let n = rows.len() as f64;
        aligned += rows.iter().map(|r| r.frame_acc.unwrap()).sum::<f64>() / n;
        uniform += rows.iter().map(|r| r.uniform_frame_acc.unwrap()).sum::<f64>() / n;
    }
    let (aligned, uniform) = (aligned / seeds.len() as f64, uniform / seeds.len() as f64);
    assert!(aligned >= uniform, "alignment {aligned} below uniform {uniform}");
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let corpus = generate_corpus(&SyntheticSpec {
        videos: 10,
        test_videos: 0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        hidden: 6,
        epochs: 3,
        ..TrainConfig::default()
    };
    let items = model::prepare_corpus(&corpus.train, &config).unwrap();
    let mut seen = Vec::new();
    let a = model::train(&items, 16, 5, &config, |e| seen.push(e.epoch)).unwrap();
    let b = model::train(&items, 16, 5, &config, |_| {}).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
}
