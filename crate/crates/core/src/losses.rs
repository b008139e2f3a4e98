//! Training objectives: NT-Xent, its symmetric CLIP form, the Gaussian KL
//! term, the latent-permutation reconstruction and their weighted sum.

use crate::autograd::{Graph, Tensor, Var};
use crate::batch::{ClassAxis, KPairBatch};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::Bound;

pub const TAU_INIT: f64 = 14.29;
const NORM_FLOOR: f64 = 1e-12;

/// Which latent the contrastive term sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastOn {
    /// Reparameterized samples `z`.
    Sample,
    /// Posterior means `mu` (what the probe sees).
    Mean,
}

/// Which columns enter the NT-Xent denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Denominator {
    /// Standard InfoNCE: positive included.
    IncludePositive,
    /// Positive excluded (`i != k`).
    LiteralEq1,
}

/// How the learnable temperature enters the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    /// `logits = tau * sim`
    LogitScale,
    /// `logits = sim / tau`
    Divide,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub kl_weight: f64,
    pub lambda_subject: f64,
    pub lambda_task: f64,
    pub rec_weight: f64,
    pub denominator: Denominator,
    pub tau_mode: TauMode,
    pub contrast_on: ContrastOn,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_init: TAU_INIT,
            tau_min: 1.0,
            tau_max: 100.0,
            kl_weight: 1e-3,
            lambda_subject: 1.0,
            lambda_task: 1.0,
            rec_weight: 1.0,
            denominator: Denominator::IncludePositive,
            tau_mode: TauMode::LogitScale,
            contrast_on: ContrastOn::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.kl_weight,
            self.lambda_subject,
            self.lambda_task,
            self.rec_weight,
        ];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config {
                line: 0,
                message: "loss weights must be finite and >= 0".into(),
            });
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_init && self.tau_init <= self.tau_max) {
            return Err(Error::Config {
                line: 0,
                message: format!(
                    "tau init {} must lie in [{}, {}] with a positive lower bound",
                    self.tau_init, self.tau_min, self.tau_max
                ),
            });
        }
        Ok(())
    }

    pub fn clamp_tau(&self, tau: f64) -> f64 {
        tau.clamp(self.tau_min, self.tau_max)
    }
}

/// Cosine similarity with a norm floor for zero vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    dot / (na * nb)
}

fn unit_rows(g: &mut Graph, z: Var) -> Result<Var> {
    let sq = g.mul(z, z)?;
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.clamp_min(ss, NORM_FLOOR * NORM_FLOOR)?;
    let n = g.sqrt(ss)?;
    let k = g.shape(z)[0];
    let n = g.reshape(n, &[k, 1])?;
    g.div(z, n)
}

/// `[K, K]` cosine similarities between rows of `a` and rows of `b`.
pub fn similarity_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a).len() != 2 || g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op: "similarity_matrix",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let ua = unit_rows(g, a)?;
    let ub = unit_rows(g, b)?;
    let ubt = g.transpose(ub)?;
    g.matmul(ua, ubt)
}

/// Logits from similarities and the temperature variable (shape `[1]`).
pub fn scale_logits(g: &mut Graph, sim: Var, tau: Var, mode: TauMode) -> Result<Var> {
    match mode {
        TauMode::LogitScale => g.mul(sim, tau),
        TauMode::Divide => g.div(sim, tau),
    }
}

/// Per-row NT-Xent of a `[K, K]` logit matrix whose diagonal holds the
/// positives. Returns `[K]`.
pub fn nt_xent_rows(g: &mut Graph, logits: Var, denominator: Denominator) -> Result<Var> {
    let k = match *g.shape(logits) {
        [r, c] if r == c => r,
        ref s => {
            return Err(Error::Shape {
                op: "nt_xent",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let mask = match denominator {
        Denominator::IncludePositive if k >= 1 => None,
        Denominator::LiteralEq1 if k >= 2 => {
            Some((0..k * k).map(|i| i / k != i % k).collect())
        }
        _ => {
            return Err(Error::invalid(format!(
                "nt_xent with K = {k} has an empty denominator"
            )))
        }
    };
    let lse = g.logsumexp(logits, mask)?;
    let eye = g.constant(Tensor::eye(k));
    let diag = g.mul(logits, eye)?;
    let pos = g.sum_axis(diag, 1)?;
    g.sub(lse, pos)
}

/// NT-Xent for anchor row `k` (0-based) of `za` against all rows of `zb`.
pub fn nt_xent(
    g: &mut Graph,
    za: Var,
    zb: Var,
    k: usize,
    tau: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let n = g.shape(za)[0];
    if n < 2 || k >= n {
        return Err(Error::invalid(format!("nt_xent needs K >= 2 and k < K (K = {n}, k = {k})")));
    }
    let sim = similarity_matrix(g, za, zb)?;
    let logits = scale_logits(g, sim, tau, cfg.tau_mode)?;
    let rows = nt_xent_rows(g, logits, cfg.denominator)?;
    g.slice(rows, 0, k, 1)
}

/// `(1/K) sum_k [nt_xent(A, B, k) + nt_xent(B, A, k)]`.
pub fn clip_loss(g: &mut Graph, za: Var, zb: Var, tau: Var, cfg: &LossConfig) -> Result<Var> {
    let k = g.shape(za)[0];
    if k < 2 {
        return Err(Error::invalid(format!("clip loss needs K >= 2, got {k}")));
    }
    let sim = similarity_matrix(g, za, zb)?;
    let logits = scale_logits(g, sim, tau, cfg.tau_mode)?;
    let logits_t = g.transpose(logits)?;
    let ab = nt_xent_rows(g, logits, cfg.denominator)?;
    let ba = nt_xent_rows(g, logits_t, cfg.denominator)?;
    let ab = g.sum(ab)?;
    let ba = g.sum(ba)?;
    let both = g.add(ab, ba)?;
    g.scale(both, 1.0 / k as f64)
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`, summed over latent
/// dimensions and averaged over rows when the input is a batch.
pub fn kl_divergence(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    if g.shape(mu) != g.shape(logvar) {
        return Err(Error::Shape {
            op: "kl_divergence",
            lhs: g.shape(mu).to_vec(),
            rhs: g.shape(logvar).to_vec(),
        });
    }
    let rows = if g.shape(mu).len() == 2 { g.shape(mu)[0] } else { 1 };
    let m2 = g.mul(mu, mu)?;
    let ev = g.exp(logvar)?;
    let t = g.add_scalar(logvar, 1.0)?;
    let t = g.sub(t, m2)?;
    let t = g.sub(t, ev)?;
    let s = g.sum(t)?;
    g.scale(s, -0.5 / rows as f64)
}

pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Swap the shared-class latent between the halves `[A; B]` of a batch.
/// `z` is `[2K, C]`; the result is `[B; A]`.
pub fn swap_halves(g: &mut Graph, z: Var) -> Result<Var> {
    let n = g.shape(z)[0];
    if n % 2 != 0 {
        return Err(Error::invalid(format!("paired batch has odd size {n}")));
    }
    let k = n / 2;
    let a = g.slice(z, 0, 0, k)?;
    let b = g.slice(z, 0, k, k)?;
    g.concat(&[b, a], 0)
}

/// Reconstruction of each half from its own non-shared latent and its
/// partner's shared latent; `x`, `z_s`, `z_t` stack halves A then B.
#[allow(clippy::too_many_arguments)]
pub fn latent_permutation_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    ahat: Var,
    x: Var,
    z_s: Var,
    z_t: Var,
    axis: ClassAxis,
) -> Result<Var> {
    let (zs, zt) = match axis {
        ClassAxis::Subject => (swap_halves(g, z_s)?, z_t),
        ClassAxis::Task => (z_s, swap_halves(g, z_t)?),
    };
    let xhat = model::decode(g, p, cfg, ahat, zs, zt)?;
    mse(g, xhat, x)
}

/// Plain reconstruction MSE.
pub fn reconstruction_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    ahat: Var,
    x: Var,
    z_s: Var,
    z_t: Var,
) -> Result<Var> {
    let xhat = model::decode(g, p, cfg, ahat, z_s, z_t)?;
    mse(g, xhat, x)
}

/// A K-pair batch materialized as `[2K, channels, samples]`, halves A then B.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub x: Tensor,
    pub axis: ClassAxis,
}

impl PairBatch {
    pub fn gather(ds: &Dataset, kp: &KPairBatch) -> Result<Self> {
        for (k, (&a, &b)) in kp.a.iter().zip(&kp.b).enumerate() {
            let (la, lb) = (ds.epochs[a].label(kp.axis), ds.epochs[b].label(kp.axis));
            if la != lb {
                return Err(Error::invalid(format!(
                    "pair {k} mixes {} classes {la} and {lb}",
                    kp.axis
                )));
            }
        }
        let idx = kp.all();
        let mut data = Vec::with_capacity(idx.len() * ds.channels * ds.samples);
        for i in idx {
            data.extend_from_slice(&ds.epochs[i].data);
        }
        Ok(Self {
            x: Tensor::new(vec![kp.k() * 2, ds.channels, ds.samples], data)?,
            axis: kp.axis,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Standard-normal draws for the two reparameterizations, `[2K, C]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub s: Tensor,
    pub t: Tensor,
}

impl Noise {
    pub fn zeros(rows: usize, latent: usize) -> Self {
        Self {
            s: Tensor::zeros(&[rows, latent]),
            t: Tensor::zeros(&[rows, latent]),
        }
    }

    pub fn sample(rows: usize, latent: usize, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let mut draw = || {
            let v = (0..rows * latent).map(|_| StandardNormal.sample(&mut *rng)).collect();
            Tensor::new(vec![rows, latent], v).expect("shape matches")
        };
        let s = draw();
        let t = draw();
        Self { s, t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl_s: f64,
    pub kl_t: f64,
    pub clip_subject: f64,
    pub clip_task: f64,
}

/// Weights actually applied to each breakdown term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub reconstruction: f64,
    pub kl: f64,
    pub clip_subject: f64,
    pub clip_task: f64,
}

impl TermWeights {
    pub fn resolve(model: &ModelConfig, loss: &LossConfig, axis: ClassAxis) -> Self {
        let subject = axis == ClassAxis::Subject;
        Self {
            reconstruction: loss.rec_weight,
            kl: if model.ae_mode { 0.0 } else { loss.kl_weight },
            clip_subject: if subject { loss.lambda_subject } else { 0.0 },
            clip_task: if subject { 0.0 } else { loss.lambda_task },
        }
    }

    pub fn combine(&self, b: &LossBreakdown) -> f64 {
        self.reconstruction * b.reconstruction
            + self.kl * (b.kl_s + b.kl_t)
            + self.clip_subject * b.clip_subject
            + self.clip_task * b.clip_task
    }
}

fn tag(component: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{component} ({op})"),
        },
        other => other,
    }
}

/// Composite objective on one paired batch. Returns the scalar total and
/// the per-term values.
#[allow(clippy::too_many_arguments)]
pub fn total_objective(
    g: &mut Graph,
    p: &Bound,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    ahat: Var,
    batch: &PairBatch,
    noise: &Noise,
) -> Result<(Var, LossBreakdown)> {
    let rows = batch.len();
    if rows < 4 || rows % 2 != 0 {
        return Err(Error::invalid(format!(
            "paired batch needs an even size >= 4, got {rows}"
        )));
    }
    let k = rows / 2;
    let x = g.constant(batch.x.clone());
    let enc = model::encode(g, p, model_cfg, ahat, x).map_err(tag("encoder"))?;
    let es = g.constant(noise.s.clone());
    let et = g.constant(noise.t.clone());
    let z_s = model::reparameterize(g, enc.mu_s, enc.logvar_s, es, model_cfg.ae_mode)
        .map_err(tag("z_S"))?;
    let z_t = model::reparameterize(g, enc.mu_t, enc.logvar_t, et, model_cfg.ae_mode)
        .map_err(tag("z_T"))?;

    let rec = if model_cfg.no_split {
        reconstruction_loss(g, p, model_cfg, ahat, x, z_s, z_t)
    } else {
        latent_permutation_loss(g, p, model_cfg, ahat, x, z_s, z_t, batch.axis)
    }
    .map_err(tag("reconstruction"))?;
    let kl_s = kl_divergence(g, enc.mu_s, enc.logvar_s).map_err(tag("kl_S"))?;
    let kl_t = kl_divergence(g, enc.mu_t, enc.logvar_t).map_err(tag("kl_T"))?;

    let tau = p.get("tau")?;
    let (c_s, c_t) = match loss_cfg.contrast_on {
        ContrastOn::Sample => (z_s, z_t),
        ContrastOn::Mean => (enc.mu_s, enc.mu_t),
    };
    let contrast_on = match (model_cfg.no_split, batch.axis) {
        (true, _) => g.concat(&[c_s, c_t], 1)?,
        (false, ClassAxis::Subject) => c_s,
        (false, ClassAxis::Task) => c_t,
    };
    let za = g.slice(contrast_on, 0, 0, k)?;
    let zb = g.slice(contrast_on, 0, k, k)?;
    let clip = clip_loss(g, za, zb, tau, loss_cfg).map_err(tag("clip"))?;

    let w = TermWeights::resolve(model_cfg, loss_cfg, batch.axis);
    let clip_w = match batch.axis {
        ClassAxis::Subject => w.clip_subject,
        ClassAxis::Task => w.clip_task,
    };
    let mut total = g.scale(rec, w.reconstruction)?;
    let kl = g.add(kl_s, kl_t)?;
    let kl = g.scale(kl, w.kl)?;
    total = g.add(total, kl)?;
    let c = g.scale(clip, clip_w)?;
    total = g.add(total, c).map_err(tag("total"))?;

    let val = |v: Var| g.value(v).item();
    let clip_v = val(clip);
    let breakdown = LossBreakdown {
        total: val(total),
        reconstruction: val(rec),
        kl_s: val(kl_s),
        kl_t: val(kl_t),
        clip_subject: if batch.axis == ClassAxis::Subject { clip_v } else { 0.0 },
        clip_task: if batch.axis == ClassAxis::Task { clip_v } else { 0.0 },
    };
    Ok((total, breakdown))
}
