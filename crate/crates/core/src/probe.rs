//! Downstream probe: multiclass gradient-boosted trees on latents, and the
//! classification metrics reported for them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::batch::{ClassAxis, SplitPlan};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::SplitLatent;

#[derive(Debug, Clone, PartialEq)]
pub struct GbtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    /// Minimum number of distinct rows on each side of a split.
    pub min_child: usize,
    /// L2 penalty on leaf values, per unit of row weight.
    pub lambda: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 4,
            shrinkage: 0.1,
            min_child: 2,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf(_) => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbtModel {
    pub n_features: usize,
    /// Sorted class labels; class index `i` means `classes[i]`.
    pub classes: Vec<u16>,
    /// Training counts per class, used to break argmax ties.
    pub class_counts: Vec<usize>,
    pub params: GbtParams,
    /// One tree per class per round.
    pub trees: Vec<Vec<Tree>>,
    /// Weighted multiclass log-loss on the training rows after each round
    /// (entry 0 is before any round).
    pub train_logloss: Vec<f64>,
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    w: &'a [f64],
    order: &'a [Vec<usize>],
    params: &'a GbtParams,
}

impl Grower<'_> {
    fn leaf(&self, g: f64, h: f64, wsum: f64) -> f64 {
        -g / (h + self.params.lambda * wsum)
    }

    fn score(&self, g: f64, h: f64, wsum: f64) -> f64 {
        g * g / (h + self.params.lambda * wsum)
    }

    fn grow(&self, grad: &[f64], hess: &[f64], members: &[bool], depth: usize, nodes: &mut Vec<Node>) -> usize {
        let idx = nodes.len();
        nodes.push(Node::Leaf(0.0));
        let (mut g, mut h, mut ws, mut count) = (0.0, 0.0, 0.0, 0usize);
        for (i, &m) in members.iter().enumerate() {
            if m {
                g += grad[i];
                h += hess[i];
                ws += self.w[i];
                count += 1;
            }
        }
        let leaf = self.leaf(g, h, ws);
        let min_child = self.params.min_child.max(1);
        if depth >= self.params.max_depth || count < 2 * min_child {
            nodes[idx] = Node::Leaf(leaf);
            return idx;
        }

        let parent = self.score(g, h, ws);
        let mut best: Option<(f64, usize, f64)> = None;
        for (f, order) in self.order.iter().enumerate() {
            let (mut gl, mut hl, mut wl, mut nl) = (0.0, 0.0, 0.0, 0usize);
            let rows: Vec<usize> = order.iter().copied().filter(|&i| members[i]).collect();
            for pair in rows.windows(2) {
                let (i, j) = (pair[0], pair[1]);
                gl += grad[i];
                hl += hess[i];
                wl += self.w[i];
                nl += 1;
                let (a, b) = (self.x[i][f], self.x[j][f]);
                if a == b || nl < min_child || count - nl < min_child {
                    continue;
                }
                let gain = self.score(gl, hl, wl) + self.score(g - gl, h - hl, ws - wl) - parent;
                if gain > 0.0 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, a + (b - a) / 2.0));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            nodes[idx] = Node::Leaf(leaf);
            return idx;
        };
        let left_m: Vec<bool> = members
            .iter()
            .enumerate()
            .map(|(i, &m)| m && self.x[i][feature] < threshold)
            .collect();
        let right_m: Vec<bool> = members
            .iter()
            .zip(&left_m)
            .map(|(&m, &l)| m && !l)
            .collect();
        let left = self.grow(grad, hess, &left_m, depth + 1, nodes);
        let right = self.grow(grad, hess, &right_m, depth + 1, nodes);
        nodes[idx] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        idx
    }
}

/// Merge identical (features, label) rows into weights.
fn dedup(features: &[Vec<f64>], labels: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let mut seen: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
    let (mut x, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for (row, &lab) in features.iter().zip(labels) {
        let key = (row.iter().map(|v| v.to_bits()).collect(), lab);
        match seen.get(&key) {
            Some(&i) => w[i] += 1.0,
            None => {
                seen.insert(key, x.len());
                x.push(row.clone());
                y.push(lab);
                w.push(1.0);
            }
        }
    }
    (x, y, w)
}

/// Fit a softmax-objective boosted tree ensemble.
pub fn fit_gbt(features: &[Vec<f64>], labels: &[u16], params: &GbtParams) -> Result<GbtModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::invalid(format!(
            "probe needs matching non-empty features and labels ({} vs {})",
            features.len(),
            labels.len()
        )));
    }
    let n_features = features[0].len();
    if n_features == 0 || features.iter().any(|r| r.len() != n_features) {
        return Err(Error::invalid("probe feature rows must share a positive width"));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("probe features contain NaN or infinite values"));
    }
    let classes: Vec<u16> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::invalid("probe needs at least two classes"));
    }
    let class_index: BTreeMap<u16, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let y_idx: Vec<usize> = labels.iter().map(|l| class_index[l]).collect();
    let mut class_counts = vec![0; classes.len()];
    for &c in &y_idx {
        class_counts[c] += 1;
    }

    let (x, y, w) = dedup(features, &y_idx);
    let n = x.len();
    let k = classes.len();
    let order: Vec<Vec<usize>> = (0..n_features)
        .map(|f| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            o
        })
        .collect();
    let grower = Grower {
        x: &x,
        w: &w,
        order: &order,
        params,
    };

    let mut scores = vec![vec![0.0; k]; n];
    let mut probs = vec![vec![0.0; k]; n];
    let total_w: f64 = w.iter().sum();
    let logloss = |scores: &[Vec<f64>], probs: &mut [Vec<f64>]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            softmax_into(&scores[i], &mut probs[i]);
            s -= w[i] * probs[i][y[i]].max(1e-300).ln();
        }
        s / total_w
    };
    let mut train_logloss = vec![logloss(&scores, &mut probs)];
    let mut trees = Vec::with_capacity(params.rounds);
    for _ in 0..params.rounds {
        let mut round = Vec::with_capacity(k);
        for c in 0..k {
            let grad: Vec<f64> = (0..n)
                .map(|i| w[i] * (probs[i][c] - if y[i] == c { 1.0 } else { 0.0 }))
                .collect();
            let hess: Vec<f64> = (0..n)
                .map(|i| w[i] * (probs[i][c] * (1.0 - probs[i][c])).max(1e-16))
                .collect();
            let members = vec![true; n];
            let mut nodes = Vec::new();
            grower.grow(&grad, &hess, &members, 0, &mut nodes);
            for node in &mut nodes {
                if let Node::Leaf(v) = node {
                    *v *= params.shrinkage;
                }
            }
            round.push(Tree { nodes });
        }
        for i in 0..n {
            for (c, t) in round.iter().enumerate() {
                scores[i][c] += t.predict(&x[i]);
            }
        }
        train_logloss.push(logloss(&scores, &mut probs));
        trees.push(round);
    }
    Ok(GbtModel {
        n_features,
        classes,
        class_counts,
        params: params.clone(),
        trees,
        train_logloss,
    })
}

impl GbtModel {
    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(Error::Shape {
                op: "probe predict",
                lhs: vec![x.len()],
                rhs: vec![self.n_features],
            });
        }
        Ok(())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let k = self.classes.len();
        let mut s = vec![0.0; k];
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                s[c] += t.predict(x);
            }
        }
        let mut p = vec![0.0; k];
        softmax_into(&s, &mut p);
        Ok(p)
    }

    /// Most probable class label. Ties go to the class seen more often in
    /// training, then to the smaller class index.
    pub fn predict(&self, x: &[f64]) -> Result<u16> {
        let p = self.predict_proba(x)?;
        let best = (0..p.len())
            .max_by(|&a, &b| {
                p[a].total_cmp(&p[b])
                    .then(self.class_counts[a].cmp(&self.class_counts[b]))
                    .then(b.cmp(&a))
            })
            .expect("at least two classes");
        Ok(self.classes[best])
    }

    pub fn predict_many(&self, rows: &[Vec<f64>]) -> Result<Vec<u16>> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    /// Every split feature lies inside the model's feature range and every
    /// leaf is finite.
    pub fn is_well_formed(&self) -> bool {
        self.trees.iter().flatten().all(|t| {
            t.features().all(|f| f < self.n_features)
                && t.nodes.iter().all(|n| match n {
                    Node::Leaf(v) => v.is_finite(),
                    Node::Split { threshold, .. } => threshold.is_finite(),
                })
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub balanced_accuracy: f64,
    pub closed_set_accuracy: f64,
    pub macro_f1: f64,
    /// Classes with at least one true example, sorted.
    pub classes: Vec<u16>,
    pub per_class_recall: Vec<f64>,
    /// `confusion[i][j]`: true `labels[i]` predicted as `labels[j]`, over the
    /// union of true and predicted labels.
    pub labels: Vec<u16>,
    pub confusion: Vec<Vec<usize>>,
}

fn check_pairs(y_true: &[u16], y_pred: &[u16]) -> Result<()> {
    if y_true.is_empty() {
        return Err(Error::invalid("metrics need at least one example"));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::invalid(format!(
            "metrics got {} labels and {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    Ok(())
}

/// Mean of per-class recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[u16], y_pred: &[u16]) -> Result<f64> {
    check_pairs(y_true, y_pred)?;
    let mut hit: BTreeMap<u16, (usize, usize)> = BTreeMap::new();
    for (t, p) in y_true.iter().zip(y_pred) {
        let e = hit.entry(*t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    Ok(hit.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / hit.len() as f64)
}

pub fn accuracy(y_true: &[u16], y_pred: &[u16]) -> Result<f64> {
    check_pairs(y_true, y_pred)?;
    Ok(y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count() as f64 / y_true.len() as f64)
}

/// Unweighted mean of per-class F1 over every label that occurs in either
/// input; a class with no true positives scores 0.
pub fn macro_f1(y_true: &[u16], y_pred: &[u16]) -> Result<f64> {
    check_pairs(y_true, y_pred)?;
    let labels: BTreeSet<u16> = y_true.iter().chain(y_pred).copied().collect();
    let f1: f64 = labels
        .iter()
        .map(|&c| {
            let tp = y_true.iter().zip(y_pred).filter(|(t, p)| **t == c && **p == c).count();
            let n_true = y_true.iter().filter(|&&t| t == c).count();
            let n_pred = y_pred.iter().filter(|&&p| p == c).count();
            if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (n_true + n_pred) as f64
            }
        })
        .sum();
    Ok(f1 / labels.len() as f64)
}

pub fn compute_metrics(y_true: &[u16], y_pred: &[u16]) -> Result<Metrics> {
    check_pairs(y_true, y_pred)?;
    let classes: Vec<u16> = y_true.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let labels: Vec<u16> = y_true
        .iter()
        .chain(y_pred)
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let pos: BTreeMap<u16, usize> = labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut confusion = vec![vec![0; labels.len()]; labels.len()];
    for (t, p) in y_true.iter().zip(y_pred) {
        confusion[pos[t]][pos[p]] += 1;
    }
    let per_class_recall = classes
        .iter()
        .map(|c| {
            let row = &confusion[pos[c]];
            row[pos[c]] as f64 / row.iter().sum::<usize>() as f64
        })
        .collect::<Vec<_>>();
    Ok(Metrics {
        balanced_accuracy: per_class_recall.iter().sum::<f64>() / per_class_recall.len() as f64,
        closed_set_accuracy: accuracy(y_true, y_pred)?,
        macro_f1: macro_f1(y_true, y_pred)?,
        classes,
        per_class_recall,
        labels,
        confusion,
    })
}

/// Which latent the probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentKind {
    S,
    T,
}

impl std::fmt::Display for LatentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LatentKind::S => "z_S",
            LatentKind::T => "z_T",
        })
    }
}

/// Posterior means of every epoch of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub latents: Vec<SplitLatent>,
    /// With an ablated split both roles read the joint latent.
    pub joint: bool,
}

impl LatentTable {
    pub fn features(&self, kind: LatentKind, idx: &[usize]) -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                let l = &self.latents[i];
                match (self.joint, kind) {
                    (true, _) => l.joint(),
                    (false, LatentKind::S) => l.mu_s.clone(),
                    (false, LatentKind::T) => l.mu_t.clone(),
                }
            })
            .collect()
    }
}

/// Fit on `train`, score on `test`. Test rows whose class never occurs in
/// training are dropped with a warning.
pub fn probe_split(
    table: &LatentTable,
    ds: &Dataset,
    train: &[usize],
    test: &[usize],
    kind: LatentKind,
    target: ClassAxis,
    params: &GbtParams,
) -> Result<Metrics> {
    let model = fit_probe(table, ds, train, kind, target, params)?;
    score_probe(&model, table, ds, test, kind, target)
}

pub fn fit_probe(
    table: &LatentTable,
    ds: &Dataset,
    train: &[usize],
    kind: LatentKind,
    target: ClassAxis,
    params: &GbtParams,
) -> Result<GbtModel> {
    let x = table.features(kind, train);
    let y: Vec<u16> = train.iter().map(|&i| ds.epochs[i].label(target)).collect();
    fit_gbt(&x, &y, params)
}

pub fn score_probe(
    model: &GbtModel,
    table: &LatentTable,
    ds: &Dataset,
    test: &[usize],
    kind: LatentKind,
    target: ClassAxis,
) -> Result<Metrics> {
    let known: BTreeSet<u16> = model.classes.iter().copied().collect();
    let kept: Vec<usize> = test
        .iter()
        .copied()
        .filter(|&i| known.contains(&ds.epochs[i].label(target)))
        .collect();
    if kept.len() < test.len() {
        log::warn!(
            "{} test epochs carry {target} classes absent from training; excluded",
            test.len() - kept.len()
        );
    }
    let x = table.features(kind, &kept);
    let y: Vec<u16> = kept.iter().map(|&i| ds.epochs[i].label(target)).collect();
    compute_metrics(&y, &model.predict_many(&x)?)
}

/// One probe result per (latent, target) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(LatentKind, ClassAxis, Metrics)>,
}

impl EvalReport {
    pub fn get(&self, kind: LatentKind, target: ClassAxis) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|(k, t, _)| *k == kind && *t == target)
            .map(|(_, _, m)| m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("latent,target,balanced_accuracy,closed_set_accuracy,macro_f1\n");
        for (k, t, m) in &self.rows {
            let _ = writeln!(
                s,
                "{k},{t},{:.4},{:.4},{:.4}",
                m.balanced_accuracy, m.closed_set_accuracy, m.macro_f1
            );
        }
        s
    }
}

/// All four (latent, target) probes for a split plan.
pub fn evaluate_latents(
    table: &LatentTable,
    ds: &Dataset,
    plan: &SplitPlan,
    params: &GbtParams,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for target in [ClassAxis::Subject, ClassAxis::Task] {
        for kind in [LatentKind::S, LatentKind::T] {
            let m = probe_split(table, ds, &plan.train, &plan.test, kind, target, params)?;
            rows.push((kind, target, m));
        }
    }
    Ok(EvalReport { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParadigmBreakdown {
    pub rows: Vec<(u16, Metrics)>,
    pub average_balanced: f64,
    pub average_closed_set: f64,
}

impl ParadigmBreakdown {
    pub fn to_text(&self) -> String {
        let mut s = String::from("paradigm,balanced,closed_set\n");
        for (p, m) in &self.rows {
            let _ = writeln!(s, "{p},{:.4},{:.4}", m.balanced_accuracy, m.closed_set_accuracy);
        }
        let _ = writeln!(s, "average,{:.4},{:.4}", self.average_balanced, self.average_closed_set);
        s
    }
}

/// Subject identification from `z_S`, scored separately on each paradigm's
/// test epochs with one probe fitted on the full training split.
pub fn paradigm_breakdown(
    table: &LatentTable,
    ds: &Dataset,
    plan: &SplitPlan,
    params: &GbtParams,
) -> Result<ParadigmBreakdown> {
    let model = fit_probe(table, ds, &plan.train, LatentKind::S, ClassAxis::Subject, params)?;
    let mut paradigms = ds.paradigms();
    paradigms.sort_unstable();
    paradigms.dedup();
    let mut rows = Vec::new();
    for p in paradigms {
        let test: Vec<usize> = plan
            .test
            .iter()
            .copied()
            .filter(|&i| ds.epochs[i].paradigm == p)
            .collect();
        if test.is_empty() {
            log::warn!("paradigm {p} has no test epochs; omitted");
            continue;
        }
        let m = score_probe(&model, table, ds, &test, LatentKind::S, ClassAxis::Subject)?;
        rows.push((p, m));
    }
    if rows.is_empty() {
        return Err(Error::invalid("no paradigm has test epochs"));
    }
    let n = rows.len() as f64;
    Ok(ParadigmBreakdown {
        average_balanced: rows.iter().map(|(_, m)| m.balanced_accuracy).sum::<f64>() / n,
        average_closed_set: rows.iter().map(|(_, m)| m.closed_set_accuracy).sum::<f64>() / n,
        rows,
    })
}

/// Latent CSV: `epoch_index,subject,task,paradigm,z_S_0..,z_T_0..`.
pub fn latents_to_csv(table: &LatentTable, ds: &Dataset) -> String {
    let c = table.latents.first().map_or(0, |l| l.mu_s.len());
    let mut s = String::from("epoch_index,subject,task,paradigm");
    for prefix in ["z_S", "z_T"] {
        for j in 0..c {
            let _ = write!(s, ",{prefix}_{j}");
        }
    }
    s.push('\n');
    for (i, (l, e)) in table.latents.iter().zip(&ds.epochs).enumerate() {
        let _ = write!(s, "{i},{},{},{}", e.subject, e.task, e.paradigm);
        for v in l.mu_s.iter().chain(&l.mu_t) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}
