use ifam_core::databench::{generate, DatasetSpec, GroupedDataset, Sample};
use ifam_core::model::{Ablation, Architecture, IfamConfig, IfamModel};
use ifam_core::numcore::{Rng, Tensor};
use ifam_core::trainer::{clip_grad_norm, fit, loss_and_gradients, TrainConfig, Trainer};
use ifam_core::vit::ModelConfig;

fn data() -> GroupedDataset {
    generate(&DatasetSpec {
        n_classes: 2,
        n_train: 24,
        n_val: 8,
        n_test: 8,
        image_size: 16,
        margin: 2,
        min_extent: 7,
        max_extent: 10,
        blob_size: 4,
        seed: 5,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn config(ablation: Option<Ablation>) -> TrainConfig {
    TrainConfig {
        model: IfamConfig {
            model: ModelConfig {
                image_size: 16,
                patch_size: 4,
                channels: 3,
                embed_dim: 16,
                n_heads: 2,
                n_layers: 1,
                mlp_ratio: 2,
                n_registers: 1,
                n_classes: 2,
                n_parts: 2,
            },
            ablation,
            ..IfamConfig::default()
        },
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    }
}

fn gradients(cfg: &TrainConfig, batch: &[&Sample]) -> (IfamModel, Vec<Option<Tensor>>) {
    let model = IfamModel::new(cfg.model.clone(), &mut Rng::new(1)).unwrap();
    let (_, grads) = loss_and_gradients(&model, batch, cfg, &cfg.effective_weights(), &mut Rng::new(2)).unwrap();
    (model, grads)
}

fn is_zero(g: &Option<Tensor>) -> bool {
    g.as_ref().map_or(true, |t| t.data().iter().all(|v| *v == 0.0))
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let d = data();
    let cfg = config(None);
    let model = IfamModel::new(cfg.model.clone(), &mut Rng::new(0)).unwrap();
    let before = model.store.clone();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let batch: Vec<&Sample> = d.train.iter().take(4).collect();
    let stats = trainer.step(&batch, 0.0, &mut Rng::new(1)).unwrap();
    assert!(stats.losses.values().all(|v| v.is_finite()));
    for ((_, a), (_, b)) in before.iter().zip(trainer.model.store.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn clipping_scales_to_bound() {
    let mut g = vec![Some(Tensor::vector(vec![0.0, 6.0])), Some(Tensor::vector(vec![8.0]))];
    let norm = clip_grad_norm(&mut g, 2.0);
    assert_eq!(norm, 10.0);
    assert!((g[0].as_ref().unwrap().data()[1] - 1.2).abs() < 1e-12);
    assert!((g[1].as_ref().unwrap().data()[0] - 1.6).abs() < 1e-12);
}

#[test]
fn small_step_decreases_singleton_loss() {
    let d = data();
    let mut cfg = config(None);
    cfg.gumbel = false;
    cfg.part_dropout = 0.0;
    cfg.lr_stage1 = 1e-4;
    cfg.lr_stage2 = 1e-4;
    let mut decreased = 0;
    for i in 0..20 {
        let model = IfamModel::new(cfg.model.clone(), &mut Rng::new(i)).unwrap();
        let batch = [&d.train[i as usize]];
        let weights = cfg.effective_weights();
        let before = loss_and_gradients(&model, &batch, &cfg, &weights, &mut Rng::new(0)).unwrap().0["total"];
        let mut trainer = Trainer::new(model, cfg.clone()).unwrap();
        trainer.step(&batch, 1.0, &mut Rng::new(0)).unwrap();
        let after = loss_and_gradients(&trainer.model, &batch, &cfg, &weights, &mut Rng::new(0)).unwrap().0["total"];
        decreased += usize::from(after < before);
    }
    assert_eq!(decreased, 20);
}

#[test]
fn fit_is_deterministic() {
    let d = data();
    let cfg = config(None);
    let a = fit(&d, &cfg).unwrap();
    let b = fit(&d, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best_epoch, b.best_epoch);
    for ((na, ta), (nb, tb)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ta, tb);
    }
    assert_eq!(a.log.len(), 2);
    let line = a.log_jsonl();
    assert_eq!(line.lines().count(), 2);
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["epoch", "losses", "val", "lr"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let d = data();
    let mut cfg = config(None);
    cfg.epochs = 0;
    let out = fit(&d, &cfg).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, None);
    let fresh = IfamModel::new(cfg.model.clone(), &mut Rng::new(cfg.seed).fork(1)).unwrap();
    for ((_, a), (_, b)) in out.model.store.iter().zip(fresh.store.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn frozen_stage2_has_zero_backbone_gradient() {
    let d = data();
    let batch: Vec<&Sample> = d.train.iter().take(3).collect();
    let (model, grads) = gradients(&config(Some(Ablation::FrozenStage2)), &batch);
    let mut saw_head = false;
    for ((name, _), g) in model.store.iter().zip(&grads) {
        if name.starts_with("stage2.vit.") {
            assert!(is_zero(g), "{name}");
        }
        if name == "stage2.head.w" {
            saw_head = !is_zero(g);
        }
    }
    assert!(saw_head);

    // Training must leave the frozen parameters bit-identical.
    let out = fit(&d, &config(Some(Ablation::FrozenStage2))).unwrap();
    let init = IfamModel::new(config(Some(Ablation::FrozenStage2)).model, &mut Rng::new(0).fork(1)).unwrap();
    for ((name, a), (_, b)) in out.model.store.iter().zip(init.store.iter()) {
        if name.starts_with("stage2.vit.") {
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn no_stage1_classif_silences_part_classifier() {
    let d = data();
    let batch: Vec<&Sample> = d.train.iter().take(3).collect();
    let (model, grads) = gradients(&config(Some(Ablation::NoStage1Classif)), &batch);
    for ((name, _), g) in model.store.iter().zip(&grads) {
        if name.starts_with("selector.head.") || name == "selector.modulation" {
            assert!(is_zero(g), "{name}");
        }
    }
    let (model, grads) = gradients(&config(None), &batch);
    let id = model.store.id("selector.head.w").unwrap();
    assert!(!is_zero(&grads[id.index()]));
}

#[test]
fn ablations_reroute_the_graph() {
    let d = data();
    let batch: Vec<&Sample> = d.train.iter().take(2).collect();

    let cfg = config(Some(Ablation::NoSecondStage));
    let model = IfamModel::new(cfg.model.clone(), &mut Rng::new(1)).unwrap();
    assert!(model.predictor().is_none());
    let (losses, _) = loss_and_gradients(&model, &batch, &cfg, &cfg.effective_weights(), &mut Rng::new(2)).unwrap();
    assert!(!losses.contains_key("stage2_ce") && losses.contains_key("stage1_ce"));

    let cfg = config(Some(Ablation::K1NoShaping));
    let w = cfg.effective_weights();
    assert_eq!(w.total_variation + w.presence + w.concentration + w.orthogonality + w.entropy + w.background_prior, 0.0);
    let model = IfamModel::new(cfg.model.clone(), &mut Rng::new(1)).unwrap();
    assert_eq!(model.n_parts(), 1);

    let cfg = config(Some(Ablation::SoftMasks));
    let (_, grads) = gradients(&cfg, &batch);
    assert!(grads.iter().all(|g| g.as_ref().map_or(true, |t| t.data().iter().all(|v| v.is_finite()))));

    let mut dense = config(None);
    dense.model.architecture = Architecture::Dense;
    let (model, grads) = gradients(&dense, &batch);
    assert_eq!(model.n_parts(), 0);
    assert!(grads.iter().any(|g| !is_zero(g)));
}

#[test]
fn config_json_is_strict() {
    let cfg = config(Some(Ablation::SoftMasks));
    let json = serde_json::to_string(&cfg).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 1, "learning_rate": 3}"#).is_err());
    let mut bad = cfg;
    bad.clip = 0.0;
    assert!(bad.validate().is_err());
}
