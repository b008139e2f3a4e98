//! Adam, the training and adapter fine-tuning loops, and multi-seed runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autograd::{Graph, Tensor};
use crate::batch::{build_kpair_batch, ClassAxis, SplitPlan};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::ElectrodeGraph;
use crate::losses::{total_objective, LossBreakdown, LossConfig, Noise, PairBatch};
use crate::model::Model;
use crate::probe::{self, EvalReport, GbtParams, LatentKind, LatentTable};
use crate::rng;

const MAX_BAD_STEPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; 0 means `train epochs / batch_size`.
    pub steps_per_epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seeds: Vec<u64>,
    /// Dev-split probe every this many epochs (0 disables).
    pub eval_every: usize,
    pub finetune_epochs: usize,
    pub finetune_fraction: f64,
    pub finetune_lr: f64,
    pub probe: GbtParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 256,
            steps_per_epoch: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seeds: vec![0, 1, 2],
            eval_every: 1,
            finetune_epochs: 20,
            finetune_fraction: 0.7,
            finetune_lr: 1e-4,
            probe: GbtParams::default(),
        }
    }
}

impl TrainConfig {
    /// Short schedule for the small network on one core.
    pub fn desk() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 64,
            eval_every: 10,
            finetune_lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config { line: 0, message: m.into() });
        if !(self.learning_rate > 0.0) || !(self.finetune_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 4 || self.batch_size % 2 != 0 {
            return bad("batch_size must be even and >= 4");
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction < 1.0) {
            return bad("finetune_fraction must lie in (0, 1)");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps > 0");
        }
        Ok(())
    }

    pub fn pairs_per_batch(&self) -> usize {
        self.batch_size / 2
    }
}

/// First and second moments per tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// One bias-corrected Adam update over the trainable tensors that have a
/// gradient. A non-finite gradient skips the whole step (returns false).
/// The temperature is clamped afterwards.
pub fn adam_step(
    params: &mut crate::params::ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
    loss: &LossConfig,
) -> Result<bool> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        log::warn!("non-finite gradient in `{name}`; step skipped");
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (name, g) in grads {
        if !params.is_trainable(name) {
            continue;
        }
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
    if grads.contains_key("tau") && params.is_trainable("tau") {
        let tau = params.get_mut("tau")?;
        for v in tau.data_mut() {
            *v = loss.clamp_tau(*v);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub axis: ClassAxis,
    pub loss: LossBreakdown,
    pub tau: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevRecord {
    pub epoch: usize,
    pub step: usize,
    pub subject_balanced_accuracy: f64,
}

/// Append-only training log.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub dev: Vec<DevRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,rec,kl_S,kl_T,clip_S,clip_T,tau\n");
        for r in &self.steps {
            let l = &r.loss;
            let _ = writeln!(
                s,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.step, l.total, l.reconstruction, l.kl_s, l.kl_t, l.clip_subject, l.clip_task, r.tau
            );
        }
        s
    }

    pub fn dev_csv(&self) -> String {
        let mut s = String::from("epoch,step,subject_balanced_accuracy\n");
        for d in &self.dev {
            let _ = writeln!(s, "{},{},{:?}", d.epoch, d.step, d.subject_balanced_accuracy);
        }
        s
    }

    /// Mean reconstruction term per epoch of `steps_per_epoch` steps.
    pub fn epoch_means(&self, steps_per_epoch: usize, f: impl Fn(&LossBreakdown) -> f64) -> Vec<f64> {
        self.steps
            .chunks(steps_per_epoch.max(1))
            .map(|c| c.iter().map(|r| f(&r.loss)).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Split plans for the configured protocol: one holdout plan or k folds.
pub fn split_plans(ds: &Dataset, cfg: &crate::config::DataConfig) -> Result<Vec<SplitPlan>> {
    let (subjects, tasks) = (ds.subjects(), ds.tasks());
    match cfg.split {
        crate::config::SplitKind::Holdout => Ok(vec![crate::batch::holdout_split(
            &subjects,
            &tasks,
            cfg.ratios,
            cfg.split_seed,
        )?]),
        crate::config::SplitKind::KFold => crate::batch::kfold_split(&subjects, &tasks, cfg.folds, cfg.split_seed),
    }
}

/// Normalized adjacency for the configured montage.
pub fn adjacency_for(cfg: &RunConfig) -> Result<Tensor> {
    Ok(ElectrodeGraph::build(cfg.model.n_channels, &cfg.graph)?.normalized)
}

/// Loss breakdown and gradients of all trainable tensors on one batch.
pub fn objective_with_grads(
    model: &Model,
    ahat: &Tensor,
    loss: &LossConfig,
    batch: &PairBatch,
    noise: &Noise,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let a = g.constant(ahat.clone());
    let (total, breakdown) = total_objective(&mut g, &p, &model.config, loss, a, batch, noise)?;
    let mut grads = BTreeMap::new();
    if g.requires_grad(total) {
        g.backward(total)?;
        for (name, &v) in p.iter() {
            if let Some(gr) = g.grad(v) {
                grads.insert(name.clone(), gr.clone());
            }
        }
    }
    Ok((breakdown, grads))
}

/// Encode every epoch of the dataset with posterior means.
pub fn latent_table(model: &Model, ahat: &Tensor, ds: &Dataset) -> Result<LatentTable> {
    let rows: Vec<&[f64]> = ds.epochs.iter().map(|e| e.data.as_slice()).collect();
    Ok(LatentTable {
        latents: model.encode_epochs(ahat, &rows)?,
        joint: model.config.no_split,
    })
}

struct Loop<'a> {
    ds: &'a Dataset,
    cfg: &'a RunConfig,
    ahat: &'a Tensor,
    pool: &'a [usize],
    hyper: AdamHyper,
    epochs: usize,
    seed: u64,
    label: &'a str,
}

impl Loop<'_> {
    fn steps_per_epoch(&self) -> usize {
        match self.cfg.train.steps_per_epoch {
            0 => (self.pool.len() / self.cfg.train.batch_size).max(1),
            n => n,
        }
    }

    /// Returns a divergence message if training had to stop early.
    fn run(
        &self,
        model: &mut Model,
        adam: &mut AdamState,
        history: &mut TrainHistory,
        mut after_epoch: impl FnMut(usize, &Model, &mut TrainHistory) -> Result<()>,
    ) -> Result<Option<String>> {
        let subjects: Vec<u16> = self.ds.epochs.iter().map(|e| e.subject).collect();
        let tasks: Vec<u16> = self.ds.epochs.iter().map(|e| e.task).collect();
        let mut batch_rng = rng::stream(self.seed, &format!("{}-batch", self.label));
        let mut noise_rng = rng::stream(self.seed, &format!("{}-noise", self.label));
        let k = self.cfg.train.pairs_per_batch();
        let spe = self.steps_per_epoch();
        let mut bad = 0;
        let mut step = history.steps.len();
        for epoch in 0..self.epochs {
            let start = Instant::now();
            for _ in 0..spe {
                let axis = ClassAxis::for_step(step);
                let labels = match axis {
                    ClassAxis::Subject => &subjects,
                    ClassAxis::Task => &tasks,
                };
                let kp = build_kpair_batch(self.pool, labels, axis, k, &mut batch_rng)?;
                let batch = PairBatch::gather(self.ds, &kp)?;
                let noise = Noise::sample(2 * k, model.config.latent_dim, &mut noise_rng);
                match objective_with_grads(model, self.ahat, &self.cfg.loss, &batch, &noise) {
                    Ok((loss, grads)) => {
                        let grad_norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
                        let applied = adam_step(&mut model.params, &grads, adam, &self.hyper, &self.cfg.loss)?;
                        bad = if applied { 0 } else { bad + 1 };
                        history.steps.push(StepRecord {
                            step,
                            axis,
                            loss,
                            tau: model.tau(),
                            grad_norm,
                        });
                    }
                    Err(Error::NonFinite { op }) => {
                        log::warn!("step {step}: non-finite loss in {op}; skipped");
                        bad += 1;
                    }
                    Err(e) => return Err(e),
                }
                if bad >= MAX_BAD_STEPS {
                    return Ok(Some(format!(
                        "{MAX_BAD_STEPS} consecutive non-finite steps ending at step {step}"
                    )));
                }
                step += 1;
            }
            log::info!(
                "{} epoch {}/{} done in {:.1}s",
                self.label,
                epoch + 1,
                self.epochs,
                start.elapsed().as_secs_f64()
            );
            after_epoch(epoch, model, history)?;
        }
        Ok(None)
    }
}

fn check_trainable(ds: &Dataset, pool: &[usize]) -> Result<()> {
    let mut by_subject: BTreeMap<u16, usize> = BTreeMap::new();
    let mut by_task: BTreeMap<u16, usize> = BTreeMap::new();
    for &i in pool {
        *by_subject.entry(ds.epochs[i].subject).or_default() += 1;
        *by_task.entry(ds.epochs[i].task).or_default() += 1;
    }
    let ok = |m: &BTreeMap<u16, usize>| m.values().filter(|&&n| n >= 2).count() >= 2;
    if !ok(&by_subject) || !ok(&by_task) {
        return Err(Error::invalid(
            "training needs at least two subjects and two tasks with two epochs each",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Highest dev subject balanced accuracy; the final checkpoint when the
    /// dev split is empty or never evaluated.
    pub best_checkpoint: Checkpoint,
    pub best_epoch: Option<usize>,
    pub history: TrainHistory,
    pub wall_clock_secs: f64,
    pub diverged: Option<String>,
}

/// Train a fresh model on `plan.train`, selecting on `plan.dev`.
pub fn train(ds: &Dataset, plan: &SplitPlan, cfg: &RunConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.channels != cfg.model.n_channels || ds.samples != cfg.model.n_samples {
        return Err(Error::invalid(format!(
            "dataset epochs are {}x{}, model expects {}x{}",
            ds.channels, ds.samples, cfg.model.n_channels, cfg.model.n_samples
        )));
    }
    check_trainable(ds, &plan.train)?;
    let start = Instant::now();
    let ahat = adjacency_for(cfg)?;
    let mut model = Model::init(cfg.model.clone(), seed)?;
    if let Some(t) = model.params.get_mut("tau").ok() {
        *t = Tensor::vector(vec![cfg.loss.tau_init]);
    }
    let mut adam = AdamState::default();
    let mut history = TrainHistory::default();
    let lp = Loop {
        ds,
        cfg,
        ahat: &ahat,
        pool: &plan.train,
        hyper: AdamHyper::from_config(&cfg.train, cfg.train.learning_rate),
        epochs: cfg.train.epochs,
        seed,
        label: "train",
    };
    let mut best: Option<(f64, usize, Model)> = None;
    let eval_every = cfg.train.eval_every;
    let diverged = lp.run(&mut model, &mut adam, &mut history, |epoch, m, h| {
        let last = epoch + 1 == cfg.train.epochs;
        if plan.dev.is_empty() || eval_every == 0 || !((epoch + 1) % eval_every == 0 || last) {
            return Ok(());
        }
        let table = latent_table(m, &ahat, ds)?;
        let metrics = probe::probe_split(
            &table,
            ds,
            &plan.train,
            &plan.dev,
            LatentKind::S,
            ClassAxis::Subject,
            &cfg.train.probe,
        )?;
        let ba = metrics.balanced_accuracy;
        log::info!("epoch {}: dev subject balanced accuracy {ba:.4}", epoch + 1);
        h.dev.push(DevRecord {
            epoch,
            step: h.steps.len(),
            subject_balanced_accuracy: ba,
        });
        if best.as_ref().is_none_or(|(b, _, _)| ba > *b) {
            best = Some((ba, epoch, m.clone()));
        }
        Ok(())
    })?;
    let final_checkpoint = Checkpoint {
        config: cfg.clone(),
        seed,
        model: model.clone(),
        adam: adam.clone(),
    };
    let (best_checkpoint, best_epoch) = match best {
        Some((_, e, m)) => (
            Checkpoint {
                model: m,
                ..final_checkpoint.clone()
            },
            Some(e),
        ),
        None => (final_checkpoint.clone(), None),
    };
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        best_epoch,
        history,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        diverged,
    })
}

/// Per-subject partition of test epochs into an adaptation part and a
/// held-out part. Subjects with fewer than four epochs are skipped.
pub fn finetune_split(ds: &Dataset, test: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_subject: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for &i in test {
        by_subject.entry(ds.epochs[i].subject).or_default().push(i);
    }
    let (mut adapt, mut held) = (Vec::new(), Vec::new());
    for (subject, mut idx) in by_subject {
        if idx.len() < 4 {
            log::warn!("subject {subject} has {} test epochs (< 4); skipped for fine-tuning", idx.len());
            continue;
        }
        idx.sort_unstable();
        idx.shuffle(&mut rng::stream_indexed(seed, "ft-split", subject as u64));
        let n = ((idx.len() as f64 * fraction).round() as usize).clamp(2, idx.len() - 1);
        adapt.extend_from_slice(&idx[..n]);
        held.extend_from_slice(&idx[n..]);
    }
    adapt.sort_unstable();
    held.sort_unstable();
    (adapt, held)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub adapt: Vec<usize>,
    pub held_out: Vec<usize>,
    pub history: TrainHistory,
    /// Mean total loss per fine-tuning epoch.
    pub epoch_losses: Vec<f64>,
    pub diverged: Option<String>,
}

/// Attach an adapter, freeze the backbone and train the adapter on the
/// adaptation part of `test`. The held-out part is never read.
pub fn finetune_adapter(ckpt: &Checkpoint, ds: &Dataset, test: &[usize], seed: u64) -> Result<FinetuneOutcome> {
    let cfg = &ckpt.config;
    if test.is_empty() {
        return Err(Error::invalid("fine-tuning needs test-subject epochs"));
    }
    if ckpt.model.has_adapter() {
        return Err(Error::invalid("checkpoint already carries an adapter"));
    }
    let (adapt, held_out) = finetune_split(ds, test, cfg.train.finetune_fraction, seed);
    let mut model = ckpt.model.clone();
    model.attach_adapter(seed)?;
    model.freeze_backbone()?;
    let mut adam = AdamState::default();
    let mut history = TrainHistory::default();
    let mut diverged = None;
    if cfg.train.finetune_epochs > 0 {
        check_trainable(ds, &adapt)?;
        let ahat = adjacency_for(cfg)?;
        let lp = Loop {
            ds,
            cfg,
            ahat: &ahat,
            pool: &adapt,
            hyper: AdamHyper::from_config(&cfg.train, cfg.train.finetune_lr),
            epochs: cfg.train.finetune_epochs,
            seed,
            label: "finetune",
        };
        diverged = lp.run(&mut model, &mut adam, &mut history, |_, _, _| Ok(()))?;
    }
    let spe = match cfg.train.steps_per_epoch {
        0 => (adapt.len() / cfg.train.batch_size).max(1),
        n => n,
    };
    let epoch_losses = history.epoch_means(spe, |l| l.total);
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            seed,
            model,
            adam,
        },
        adapt,
        held_out,
        history,
        epoch_losses,
        diverged,
    })
}

/// Held-out subject identification with and without adapter fine-tuning.
/// Both probes are refit on train-split plus adaptation latents; only the
/// encoder differs.
#[derive(Debug, Clone)]
pub struct FinetuneComparison {
    pub baseline: probe::Metrics,
    pub finetuned: probe::Metrics,
}

impl FinetuneComparison {
    pub fn gain(&self) -> f64 {
        self.finetuned.balanced_accuracy - self.baseline.balanced_accuracy
    }
}

pub fn compare_finetune(
    base: &Checkpoint,
    ft: &FinetuneOutcome,
    ds: &Dataset,
    plan: &SplitPlan,
) -> Result<FinetuneComparison> {
    let cfg = &base.config;
    let ahat = adjacency_for(cfg)?;
    let mut fit_idx: Vec<usize> = plan.train.iter().chain(&ft.adapt).copied().collect();
    fit_idx.sort_unstable();
    let score = |m: &Model| -> Result<probe::Metrics> {
        let table = latent_table(m, &ahat, ds)?;
        probe::probe_split(
            &table,
            ds,
            &fit_idx,
            &ft.held_out,
            LatentKind::S,
            ClassAxis::Subject,
            &cfg.train.probe,
        )
    };
    Ok(FinetuneComparison {
        baseline: score(&base.model)?,
        finetuned: score(&ft.checkpoint.model)?,
    })
}

/// The ablation grid: the full model and the four single-change variants.
pub fn ablation_configs(cfg: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut no_gcnn = cfg.clone();
    no_gcnn.model.no_gcnn = true;
    let mut no_contrastive = cfg.clone();
    no_contrastive.loss.lambda_subject = 0.0;
    no_contrastive.loss.lambda_task = 0.0;
    let mut no_split = cfg.clone();
    no_split.model.no_split = true;
    let mut ae = cfg.clone();
    ae.model.ae_mode = true;
    vec![
        ("full", cfg.clone()),
        ("-gcnn", no_gcnn),
        ("-contrastive", no_contrastive),
        ("-split", no_split),
        ("ae-mode", ae),
    ]
}

/// Multi-seed reports per ablation variant; the first row is the reference.
#[derive(Debug, Clone, Default)]
pub struct AblationTable {
    pub rows: Vec<(String, SeedReport)>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let cells = [
            (LatentKind::S, ClassAxis::Subject),
            (LatentKind::T, ClassAxis::Task),
        ];
        let reference: Vec<Option<f64>> = self
            .rows
            .first()
            .map(|(_, r)| cells.iter().map(|&(k, t)| r.mean(k, t)).collect())
            .unwrap_or_default();
        let mut s = String::from("variant,subject_ba_zS,delta,task_ba_zT,delta,n_seeds,complete\n");
        for (name, rep) in &self.rows {
            let _ = write!(s, "{name}");
            for (i, &(k, t)) in cells.iter().enumerate() {
                match (rep.mean(k, t), reference.get(i).copied().flatten()) {
                    (Some(v), Some(r)) => {
                        let _ = write!(s, ",{:.2},{:+.2}", 100.0 * v, 100.0 * (v - r));
                    }
                    (Some(v), None) => {
                        let _ = write!(s, ",{:.2},n/a", 100.0 * v);
                    }
                    _ => s.push_str(",n/a,n/a"),
                }
            }
            let _ = writeln!(s, ",{},{}", rep.runs.len(), rep.is_complete());
        }
        s
    }
}

/// Probe results per seed and their aggregate.
#[derive(Debug, Clone, Default)]
pub struct SeedReport {
    pub runs: Vec<(u64, EvalReport)>,
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; `None` with a single seed.
    pub stddev: Option<f64>,
    pub n_seeds: usize,
}

impl SeedReport {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> Vec<MetricSummary> {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for (_, rep) in &self.runs {
            for (k, t, m) in &rep.rows {
                for (name, v) in [
                    ("balanced_accuracy", m.balanced_accuracy),
                    ("closed_set_accuracy", m.closed_set_accuracy),
                    ("macro_f1", m.macro_f1),
                ] {
                    let key = format!("{k}/{t}/{name}");
                    if !values.contains_key(&key) {
                        order.push(key.clone());
                    }
                    values.entry(key).or_default().push(v);
                }
            }
        }
        order
            .into_iter()
            .map(|metric| {
                let v = &values[&metric];
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let stddev = (n > 1).then(|| {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                });
                MetricSummary {
                    metric,
                    mean,
                    stddev,
                    n_seeds: n,
                }
            })
            .collect()
    }

    pub fn mean(&self, kind: LatentKind, target: ClassAxis) -> Option<f64> {
        let key = format!("{kind}/{target}/balanced_accuracy");
        self.summary().into_iter().find(|s| s.metric == key).map(|s| s.mean)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("metric,mean,stddev,n_seeds\n");
        for m in self.summary() {
            let sd = m.stddev.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{},{:.4},{sd},{}", m.metric, m.mean, m.n_seeds);
        }
        if !self.is_complete() {
            for (seed, why) in &self.failures {
                let _ = writeln!(s, "# INCOMPLETE: seed {seed} failed: {why}");
            }
        }
        s
    }
}

/// Train and evaluate once per seed on the same split.
pub fn run_seeds(ds: &Dataset, plan: &SplitPlan, cfg: &RunConfig, seeds: &[u64]) -> Result<SeedReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("run_seeds needs at least one seed"));
    }
    let ahat = adjacency_for(cfg)?;
    let mut report = SeedReport::default();
    for &seed in seeds {
        let out = match train(ds, plan, cfg, seed) {
            Ok(o) => o,
            Err(e) => {
                report.failures.push((seed, e.to_string()));
                continue;
            }
        };
        if let Some(msg) = out.diverged {
            report.failures.push((seed, msg));
            continue;
        }
        let table = latent_table(&out.best_checkpoint.model, &ahat, ds)?;
        report
            .runs
            .push((seed, probe::evaluate_latents(&table, ds, plan, &cfg.train.probe)?));
    }
    Ok(report)
}

/// Result of a finite-difference check of the full objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub n_scalars: usize,
    pub axes: Vec<(ClassAxis, f64)>,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Central-difference check of the full objective over every parameter,
/// for a subject-paired and a task-paired step, with fixed random data
/// and reparameterization noise.
pub fn gradcheck_objective(
    model_cfg: &crate::model::ModelConfig,
    loss_cfg: &LossConfig,
    graph_cfg: &crate::graph::GraphConfig,
    seed: u64,
    eps: f64,
) -> Result<GradcheckReport> {
    use rand_distr::{Distribution, StandardNormal};
    let model = Model::init(model_cfg.clone(), seed)?;
    let ahat = ElectrodeGraph::build(model_cfg.n_channels, graph_cfg)?.normalized;
    let rows = 4;
    let mut r = rng::stream(seed, "gradcheck");
    let n = rows * model_cfg.n_channels * model_cfg.n_samples;
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
    let x = Tensor::new(vec![rows, model_cfg.n_channels, model_cfg.n_samples], x)?;
    let noise = Noise::sample(rows, model_cfg.latent_dim, &mut r);
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let mut axes = Vec::new();
    for axis in [ClassAxis::Subject, ClassAxis::Task] {
        let batch = PairBatch { x: x.clone(), axis };
        let err = crate::autograd::gradcheck_many(
            |g, vars| {
                let p = crate::params::Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
                let a = g.constant(ahat.clone());
                Ok(total_objective(g, &p, model_cfg, loss_cfg, a, &batch, &noise)?.0)
            },
            &inputs,
            eps,
        )?;
        axes.push((axis, err));
    }
    Ok(GradcheckReport {
        max_relative_error: axes.iter().map(|a| a.1).fold(0.0, f64::max),
        n_scalars: model.params.num_scalars(),
        axes,
    })
}
