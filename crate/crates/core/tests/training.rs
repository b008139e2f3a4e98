use gcvase::autograd::{Graph, Tensor};
use gcvase::batch::{build_kpair_batch, holdout_split, ClassAxis, SplitPlan};
use gcvase::checkpoint::Checkpoint;
use gcvase::config::RunConfig;
use gcvase::dataset::Dataset;
use gcvase::losses::{total_objective, Noise, PairBatch};
use gcvase::model::{Model, ModelConfig};
use gcvase::params::ParamStore;
use gcvase::probe::{evaluate_latents, LatentKind};
use gcvase::rng;
use gcvase::signal::Epoch;
use gcvase::synthdata::{generate, SynthSpec};
use gcvase::train::{
    adam_step, adjacency_for, finetune_adapter, latent_table, objective_with_grads, run_seeds, train,
    AdamHyper, AdamState,
};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig {
        n_channels: 4,
        segment_size: 16,
        d_model: 8,
        latent_dim: 4,
        n_gcn_layers: 1,
        n_transformer_layers: 1,
        n_heads: 2,
        adapter_heads: 2,
        ..ModelConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 8;
    cfg.train.eval_every = 1;
    cfg.train.finetune_epochs = 3;
    cfg.train.probe.rounds = 10;
    cfg.data.synth = SynthSpec {
        n_subjects: 3,
        n_tasks: 2,
        epochs_per_cell: 10,
        n_channels: 4,
        ..SynthSpec::default()
    };
    cfg
}

fn tiny() -> (RunConfig, Dataset, SplitPlan) {
    let cfg = tiny_config();
    let (ds, _) = generate(&cfg.data.synth).unwrap();
    let plan = holdout_split(&ds.subjects(), &ds.tasks(), cfg.data.ratios, 0).unwrap();
    (cfg, ds, plan)
}

#[test]
fn identical_runs_are_bit_identical() {
    let (cfg, ds, plan) = tiny();
    let a = train(&ds, &plan, &cfg, 5).unwrap();
    let b = train(&ds, &plan, &cfg, 5).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
    assert!(a.diverged.is_none());
    assert_eq!(a.history.dev.len(), 3);
    let c = train(&ds, &plan, &cfg, 6).unwrap();
    assert_ne!(a.final_checkpoint.model.params, c.final_checkpoint.model.params);
}

#[test]
fn first_step_matches_independent_objective() {
    let (cfg, ds, plan) = tiny();
    let seed = 11;
    let out = train(&ds, &plan, &cfg, seed).unwrap();
    let model = Model::init(cfg.model.clone(), seed).unwrap();
    let k = cfg.train.batch_size / 2;
    let kp = build_kpair_batch(
        &plan.train,
        &ds.subjects(),
        ClassAxis::Subject,
        k,
        &mut rng::stream(seed, "train-batch"),
    )
    .unwrap();
    let batch = PairBatch::gather(&ds, &kp).unwrap();
    let noise = Noise::sample(2 * k, cfg.model.latent_dim, &mut rng::stream(seed, "train-noise"));
    let mut g = Graph::new();
    let p = model.params.bind_frozen(&mut g);
    let a = g.constant(adjacency_for(&cfg).unwrap());
    let (total, parts) = total_objective(&mut g, &p, &cfg.model, &cfg.loss, a, &batch, &noise).unwrap();
    assert_eq!(out.history.steps[0].loss, parts);
    assert_eq!(g.value(total).item(), out.history.steps[0].loss.total);
    let sum = parts.reconstruction + cfg.loss.kl_weight * (parts.kl_s + parts.kl_t) + parts.clip_subject;
    assert!((sum - parts.total).abs() < 1e-12);
}

#[test]
fn history_csv_columns() {
    let (cfg, ds, plan) = tiny();
    let out = train(&ds, &plan, &cfg, 0).unwrap();
    let csv = out.history.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,total,rec,kl_S,kl_T,clip_S,clip_T,tau"));
    assert_eq!(lines.count(), out.history.steps.len());
}

#[test]
fn ablation_flag_is_recorded() {
    let (mut cfg, ds, plan) = tiny();
    let base = cfg.fingerprint();
    cfg.model.no_gcnn = true;
    cfg.train.epochs = 1;
    let out = train(&ds, &plan, &cfg, 0).unwrap();
    let back = Checkpoint::from_bytes(&out.final_checkpoint.to_bytes()).unwrap();
    assert!(back.config.model.no_gcnn);
    assert_ne!(back.config.fingerprint(), base);
}

#[test]
fn checkpoint_reload_gives_identical_latents() {
    let (cfg, ds, plan) = tiny();
    let out = train(&ds, &plan, &cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gcvc");
    out.best_checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let ahat = adjacency_for(&cfg).unwrap();
    let before = latent_table(&out.best_checkpoint.model, &ahat, &ds).unwrap();
    let after = latent_table(&back.model, &ahat, &ds).unwrap();
    assert_eq!(before, after);
    let r1 = evaluate_latents(&before, &ds, &plan, &cfg.train.probe).unwrap();
    let r2 = evaluate_latents(&after, &ds, &plan, &cfg.train.probe).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn divergence_aborts_with_history() {
    let (cfg, mut ds, plan) = tiny();
    for e in &mut ds.epochs {
        for v in &mut e.data {
            *v *= 1e300;
        }
    }
    let out = train(&ds, &plan, &cfg, 0).unwrap();
    let msg = out.diverged.expect("diverged");
    assert!(msg.contains("3 consecutive"), "{msg}");
}

#[test]
fn too_few_classes_is_rejected() {
    let (cfg, ds, _) = tiny();
    let only_subject_0: Vec<usize> = (0..ds.len()).filter(|&i| ds.epochs[i].subject == 0).collect();
    let plan = SplitPlan {
        train: only_subject_0,
        dev: vec![],
        test: vec![],
        seed: 0,
        fold: None,
    };
    assert!(train(&ds, &plan, &cfg, 0).is_err());
}

#[test]
fn finetune_freezes_backbone_and_starts_as_identity() {
    let (mut cfg, ds, plan) = tiny();
    let base = train(&ds, &plan, &cfg, 1).unwrap().best_checkpoint;
    let ahat = adjacency_for(&cfg).unwrap();

    cfg.train.finetune_epochs = 0;
    let zero = finetune_adapter(&Checkpoint { config: cfg.clone(), ..base.clone() }, &ds, &plan.test, 1).unwrap();
    let l0 = latent_table(&base.model, &ahat, &ds).unwrap();
    let l1 = latent_table(&zero.checkpoint.model, &ahat, &ds).unwrap();
    assert_eq!(l0, l1);

    let ft = finetune_adapter(&base, &ds, &plan.test, 1).unwrap();
    for (name, t) in base.model.params.iter() {
        assert_eq!(ft.checkpoint.model.params.get(name).unwrap(), t, "{name} moved");
    }
    let adapter_moved = ft
        .checkpoint
        .model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("adapter."))
        .any(|(n, t)| zero.checkpoint.model.params.get(n).unwrap() != t);
    assert!(adapter_moved);
    // held-out and adaptation parts are disjoint and cover the test split
    let mut all: Vec<usize> = ft.adapt.iter().chain(&ft.held_out).copied().collect();
    all.sort_unstable();
    assert_eq!(all, plan.test);
    assert!(finetune_adapter(&ft.checkpoint, &ds, &plan.test, 1).is_err());
}

#[test]
fn seeds_report_mean_and_stddev() {
    let (mut cfg, ds, plan) = tiny();
    cfg.train.epochs = 1;
    let one = run_seeds(&ds, &plan, &cfg, &[0]).unwrap();
    assert!(one.summary().iter().all(|m| m.stddev.is_none()));
    assert!(one.to_text().contains(",n/a,1"));

    let three = run_seeds(&ds, &plan, &cfg, &[0, 1, 2]).unwrap();
    assert!(three.is_complete());
    let per_seed: Vec<f64> = three
        .runs
        .iter()
        .map(|(_, r)| r.get(LatentKind::S, ClassAxis::Subject).unwrap().balanced_accuracy)
        .collect();
    let mean = per_seed.iter().sum::<f64>() / 3.0;
    assert!((three.mean(LatentKind::S, ClassAxis::Subject).unwrap() - mean).abs() < 1e-12);
    assert!(run_seeds(&ds, &plan, &cfg, &[]).is_err());
}

/// Train on one repeated epoch: reconstruction must fall below 10% of the
/// input variance within 500 steps.
#[test]
fn overfit_single_epoch() {
    let cfg = ModelConfig {
        n_channels: 4,
        n_samples: 32,
        segment_size: 4,
        d_model: 16,
        latent_dim: 8,
        n_gcn_layers: 1,
        n_transformer_layers: 1,
        n_heads: 2,
        adapter_heads: 2,
        ..ModelConfig::default()
    };
    let data: Vec<f64> = (0..4 * 32)
        .map(|i| {
            let (c, t) = ((i / 32) as f64, (i % 32) as f64);
            (0.3 * t + c).sin() + 0.5 * (0.11 * t * (c + 1.0)).cos()
        })
        .collect();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64;
    let epochs: Vec<Epoch> = (0..4)
        .map(|i| Epoch {
            channels: 4,
            samples: 32,
            data: data.clone(),
            subject: (i % 2) as u16,
            task: (i / 2) as u16,
            paradigm: 0,
        })
        .collect();
    let ds = Dataset::from_epochs(epochs).unwrap();
    let run_cfg = RunConfig {
        model: cfg.clone(),
        ..RunConfig::default()
    };
    let ahat = adjacency_for(&run_cfg).unwrap();
    let mut model = Model::init(cfg.clone(), 0).unwrap();
    let mut adam = AdamState::default();
    let hyper = AdamHyper {
        lr: 3e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut r = rng::stream(0, "overfit");
    let mut last = f64::INFINITY;
    let pool = [0, 1, 2, 3];
    for step in 0..500 {
        let axis = ClassAxis::for_step(step);
        let labels = match axis {
            ClassAxis::Subject => ds.subjects(),
            ClassAxis::Task => ds.tasks(),
        };
        let kp = build_kpair_batch(&pool, &labels, axis, 2, &mut r).unwrap();
        let batch = PairBatch::gather(&ds, &kp).unwrap();
        let noise = Noise::sample(4, cfg.latent_dim, &mut r);
        let (loss, grads) = objective_with_grads(&model, &ahat, &run_cfg.loss, &batch, &noise).unwrap();
        adam_step(&mut model.params, &grads, &mut adam, &hyper, &run_cfg.loss).unwrap();
        last = loss.reconstruction;
    }
    assert!(last < 0.1 * var, "reconstruction {last} vs variance {var}");
}

#[test]
fn adam_leaves_untouched_tensors_alone() {
    let mut p = ParamStore::new();
    p.insert("a", Tensor::vector(vec![1.0, 2.0]));
    p.insert("b", Tensor::vector(vec![3.0]));
    let grads = [("a".to_string(), Tensor::vector(vec![0.5, -0.5]))].into_iter().collect();
    let mut s = AdamState::default();
    let h = AdamHyper {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    adam_step(&mut p, &grads, &mut s, &h, &Default::default()).unwrap();
    assert_eq!(p.get("b").unwrap().data(), &[3.0]);
    assert_eq!(s.step, 1);
    assert!(!s.moments.contains_key("b"));
}
