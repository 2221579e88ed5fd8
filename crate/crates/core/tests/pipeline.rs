use instparse::checkpoint::Checkpoint;
use instparse::config::Config;
use instparse::dataset::{generate_split, load_dataset, save_dataset, VAL_SEED_OFFSET};
use instparse::error::Error;
use instparse::metrics::PredictionSet;
use instparse::plot::plot_loss_curve;
use instparse::predict::{evaluate_predictions, predict_scenes, PredictOptions};
use instparse::train::{load_loss_log, loss_log_path, train};

fn tiny() -> Config {
    Config {
        fpn_channels: 8,
        backbone_widths: vec![4, 4, 8, 8, 8],
        roi_size: 14,
        batch_size: 2,
        epochs: 2,
        max_rois_per_batch: 6,
        n_instances_max: 2,
        ..Config::default()
    }
}

fn same_predictions(a: &[PredictionSet], b: &[PredictionSet]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.global == y.global
                && x.instances.len() == y.instances.len()
                && x.instances.iter().zip(&y.instances).all(|(p, q)| p.bbox == q.bbox && p.score == q.score && p.parsing == q.parsing)
        })
}

#[test]
fn train_save_load_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let scenes = generate_split(&cfg.generator(), 5, 4).unwrap();
    save_dataset(&scenes, &dir.path().join("train")).unwrap();
    let loaded = load_dataset(&dir.path().join("train")).unwrap();
    assert_eq!(loaded.len(), 4);

    let ckpt = dir.path().join("model.ckpt");
    let trainer = train(&cfg, &loaded, Some(&ckpt)).unwrap();
    let log = load_loss_log(&loss_log_path(&ckpt)).unwrap();
    assert_eq!(log.len(), cfg.epochs);
    assert_eq!(log, trainer.log);

    let restored = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(restored.epoch, cfg.epochs);
    assert_eq!(restored.config, cfg);
    let opts = PredictOptions::from_config(&cfg);
    let before = predict_scenes(&trainer.model, &loaded, &opts).unwrap();
    let after = predict_scenes(&restored.model().unwrap(), &loaded, &opts).unwrap();
    assert!(same_predictions(&before, &after));
    let again = predict_scenes(&trainer.model, &loaded, &opts).unwrap();
    assert!(same_predictions(&before, &again), "prediction is not deterministic");

    for p in &before {
        assert!(p.instances.len() <= cfg.max_detections);
        assert!(p.instances.windows(2).all(|w| w[0].score >= w[1].score));
    }
    let report = evaluate_predictions(&before, &loaded, cfg.k_parts);
    assert_eq!(report.num_images, 4);
    for (name, v) in report.scalars() {
        assert!(v.is_nan() || (0.0..=1.0).contains(&v), "{name} = {v}");
    }

    let svg = dir.path().join("loss.svg");
    plot_loss_curve(&log, &svg).unwrap();
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Config { divergence_threshold: 1e-3, ..tiny() };
    let scenes = generate_split(&cfg.generator(), 9, 2).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    match train(&cfg, &scenes, Some(&ckpt)) {
        Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.epoch)),
    }
    let kept = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(kept.epoch, 0);
    assert_eq!(kept.iteration, 0);
}

#[test]
fn splits_do_not_share_scenes() {
    let g = tiny().generator();
    let train = generate_split(&g, 0, 3).unwrap();
    let val = generate_split(&g, VAL_SEED_OFFSET, 3).unwrap();
    for t in &train {
        assert!(val.iter().all(|v| v.seed != t.seed && v.image != t.image));
    }
    assert_eq!(generate_split(&g, 0, 3).unwrap(), train);
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    match Checkpoint::load(&dir.path().join("absent.ckpt")) {
        Err(Error::MissingInput(p)) => assert!(p.ends_with("absent.ckpt")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("loaded a checkpoint that does not exist"),
    }
}
