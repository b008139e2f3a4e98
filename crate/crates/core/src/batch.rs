//! Dataset splits and K-pair batch construction.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassAxis {
    Subject,
    Task,
}

impl ClassAxis {
    /// Subject-paired on even steps, task-paired on odd steps.
    pub fn for_step(step: usize) -> Self {
        if step % 2 == 0 {
            ClassAxis::Subject
        } else {
            ClassAxis::Task
        }
    }
}

impl fmt::Display for ClassAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassAxis::Subject => "subject",
            ClassAxis::Task => "task",
        })
    }
}

/// Disjoint, exhaustive partition of epoch indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    /// Test fold index for k-fold plans.
    pub fold: Option<usize>,
}

impl SplitPlan {
    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(epoch_index, split)` rows sorted by epoch index.
    pub fn assignments(&self) -> Vec<(usize, &'static str)> {
        let mut rows: Vec<(usize, &'static str)> = self
            .train
            .iter()
            .map(|&i| (i, "train"))
            .chain(self.dev.iter().map(|&i| (i, "dev")))
            .chain(self.test.iter().map(|&i| (i, "test")))
            .collect();
        rows.sort_unstable();
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch_index,fold_or_split\n");
        for (i, name) in self.assignments() {
            s.push_str(&format!("{i},{name}\n"));
        }
        s
    }
}

/// CSV of the test-fold index of every epoch across a k-fold plan set.
pub fn folds_to_csv(plans: &[SplitPlan]) -> String {
    let mut rows: Vec<(usize, usize)> = plans
        .iter()
        .flat_map(|p| p.test.iter().map(move |&i| (i, p.fold.unwrap_or(0))))
        .collect();
    rows.sort_unstable();
    let mut s = String::from("epoch_index,fold_or_split\n");
    for (i, f) in rows {
        s.push_str(&format!("{i},{f}\n"));
    }
    s
}

/// Epoch indices grouped by (subject, task), in a deterministic order.
fn strata(subjects: &[u16], tasks: &[u16]) -> BTreeMap<(u16, u16), Vec<usize>> {
    let mut m: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    for (i, (&s, &t)) in subjects.iter().zip(tasks).enumerate() {
        m.entry((s, t)).or_default().push(i);
    }
    m
}

/// Stratified train/dev/test split with percentage `ratios`.
pub fn holdout_split(subjects: &[u16], tasks: &[u16], ratios: [u32; 3], seed: u64) -> Result<SplitPlan> {
    if ratios.iter().sum::<u32>() != 100 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must sum to 100")));
    }
    if subjects.len() != tasks.len() {
        return Err(Error::invalid("label vectors differ in length"));
    }
    let mut plan = SplitPlan {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
        seed,
        fold: None,
    };
    let mut rng = rng::stream(seed, "holdout");
    for ((s, t), mut idx) in strata(subjects, tasks) {
        idx.shuffle(&mut rng);
        let n = idx.len();
        if n < 3 {
            log::warn!("stratum (subject {s}, task {t}) has {n} epochs; all assigned to train");
            plan.train.extend(idx);
            continue;
        }
        let n_train = (n as f64 * ratios[0] as f64 / 100.0).round() as usize;
        let n_dev = (n as f64 * (ratios[0] + ratios[1]) as f64 / 100.0).round() as usize - n_train;
        plan.train.extend_from_slice(&idx[..n_train]);
        plan.dev.extend_from_slice(&idx[n_train..n_train + n_dev]);
        plan.test.extend_from_slice(&idx[n_train + n_dev..]);
    }
    for v in [&mut plan.train, &mut plan.dev, &mut plan.test] {
        v.sort_unstable();
    }
    Ok(plan)
}

/// Stratified k-fold: fold `i`'s plan tests on fold `i` and trains on the rest.
/// Fold offsets rotate across strata so small strata still spread evenly.
pub fn kfold_split(subjects: &[u16], tasks: &[u16], k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k >= 2, got {k}")));
    }
    if subjects.len() != tasks.len() {
        return Err(Error::invalid("label vectors differ in length"));
    }
    let mut fold_of = vec![0usize; subjects.len()];
    let mut rng = rng::stream(seed, "kfold");
    let mut offset = 0;
    for ((s, t), mut idx) in strata(subjects, tasks) {
        if idx.len() < k {
            log::warn!(
                "stratum (subject {s}, task {t}) has {} epochs, fewer than k = {k}; rotating",
                idx.len()
            );
        }
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            fold_of[i] = (offset + j) % k;
        }
        offset += idx.len();
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..subjects.len()).partition(|&i| fold_of[i] == f);
            SplitPlan {
                train,
                dev: Vec::new(),
                test,
                seed,
                fold: Some(f),
            }
        })
        .collect())
}

/// Two aligned halves: `a[k]` and `b[k]` are distinct epochs sharing the
/// class on `axis`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KPairBatch {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    pub axis: ClassAxis,
    pub labels: Vec<u16>,
}

impl KPairBatch {
    pub fn k(&self) -> usize {
        self.a.len()
    }

    /// Epoch indices in encoding order: all of half A, then all of half B.
    pub fn all(&self) -> Vec<usize> {
        self.a.iter().chain(&self.b).copied().collect()
    }

    pub fn validate(&self, labels: &[u16]) -> Result<()> {
        for k in 0..self.k() {
            let (la, lb) = (labels[self.a[k]], labels[self.b[k]]);
            if la != lb || la != self.labels[k] || self.a[k] == self.b[k] {
                return Err(Error::invalid(format!(
                    "pair {k} breaks the {} pairing ({la} vs {lb})",
                    self.axis
                )));
            }
        }
        Ok(())
    }
}

/// Draw `k` classes uniformly with replacement among classes that have at
/// least two epochs in `pool`, then two distinct epochs of each.
pub fn build_kpair_batch<R: Rng + ?Sized>(
    pool: &[usize],
    labels: &[u16],
    axis: ClassAxis,
    k: usize,
    rng: &mut R,
) -> Result<KPairBatch> {
    if k < 2 {
        return Err(Error::invalid(format!("K-pair batch needs K >= 2, got {k}")));
    }
    let mut by_class: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let eligible: Vec<(u16, Vec<usize>)> = by_class.into_iter().filter(|(_, v)| v.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!("no {axis} class has two epochs to pair")));
    }
    let mut batch = KPairBatch {
        a: Vec::with_capacity(k),
        b: Vec::with_capacity(k),
        axis,
        labels: Vec::with_capacity(k),
    };
    for _ in 0..k {
        let (label, members) = &eligible[rng.random_range(0..eligible.len())];
        let i = rng.random_range(0..members.len());
        let mut j = rng.random_range(0..members.len() - 1);
        if j >= i {
            j += 1;
        }
        batch.a.push(members[i]);
        batch.b.push(members[j]);
        batch.labels.push(*label);
    }
    Ok(batch)
}
