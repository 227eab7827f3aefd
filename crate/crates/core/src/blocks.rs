//! Block structure: `i ∼ j` iff `|A_i|^{α_i} = |A_j|^{α_j}` almost surely.
//!
//! Two pieces of evidence are combined for every pair. The sample test
//! compares the powered moduli draw by draw. The moment test compares
//! `E|A_i|^{α_i ξ}|A_j|^{α_j(1-ξ)}` with its Hölder bound
//! `κ_i(α_i)^ξ κ_j(α_j)^{1-ξ}`, which it attains exactly when the two powered
//! moduli coincide. When the family has closed-form moments the moment test
//! also sees deviations that a finite sample can miss.

use crate::error::{Error, Result};
use crate::model::{CoeffBatch, Model};
use crate::moments::{self, MethodTag, MomentEstimate};
use crate::rng::SeedSequence;
use crate::simulate::SamplePool;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TOL_REL: f64 = 1e-9;
pub const MIN_SAMPLES: usize = 10_000;
pub const CHECK_XI: [f64; 3] = [0.25, 0.5, 0.75];
/// Slack on the closed-form Hölder ratio for rounding in `α` and the powers.
const CLOSED_FORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub xi: f64,
    pub cross_kappa: MomentEstimate,
    /// `cross_kappa / (κ_i^ξ κ_j^{1-ξ})`; at most 1, equal to 1 within a class.
    pub holder_ratio: f64,
    /// Upper confidence bound of the ratio.
    pub holder_ratio_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvidence {
    pub i: usize,
    pub j: usize,
    /// `max_k ||a_i|^{α_i} - |a_j|^{α_j}| / (1 + |a_i|^{α_i})` over the sample.
    pub max_dev: f64,
    pub sample_equal: bool,
    pub cross_kappa_min: f64,
    pub checks: Vec<CrossCheck>,
}

/// Ordered partition of the coordinates into equivalence classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    /// Each class sorted; classes ordered by smallest member.
    pub classes: Vec<Vec<usize>>,
    /// Coordinates listed class by class, i.e. the relabelling that makes
    /// every class a contiguous range.
    pub permutation: Vec<usize>,
    pub evidence: Vec<PairEvidence>,
}

impl BlockPartition {
    /// A partition given directly; classes are normalised to the canonical
    /// ordering.
    pub fn from_classes(mut classes: Vec<Vec<usize>>, d: usize) -> Result<Self> {
        let mut seen = vec![false; d];
        for class in &mut classes {
            if class.is_empty() {
                return Err(Error::config("empty class in partition"));
            }
            class.sort_unstable();
            for &j in class.iter() {
                if j >= d || seen[j] {
                    return Err(Error::config(format!("coordinate {j} is out of range or repeated")));
                }
                seen[j] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("partition does not cover every coordinate"));
        }
        classes.sort_by_key(|c| c[0]);
        let permutation = classes.concat();
        Ok(Self { classes, permutation, evidence: Vec::new() })
    }

    /// Every coordinate on its own.
    pub fn singletons(d: usize) -> Self {
        Self::from_classes((0..d).map(|j| vec![j]).collect(), d).expect("valid singleton partition")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.permutation.len()
    }

    pub fn class_of(&self, j: usize) -> Option<usize> {
        self.classes.iter().position(|c| c.contains(&j))
    }

    pub fn same_class(&self, i: usize, j: usize) -> bool {
        self.class_of(i).is_some() && self.class_of(i) == self.class_of(j)
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut x = x;
        while self.0[x] != root {
            let next = self.0[x];
            self.0[x] = root;
            x = next;
        }
        root
    }

    /// The smaller root wins, so labels do not depend on merge order.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
    }
}

fn max_deviation(batch: &CoeffBatch, i: usize, j: usize, ai: f64, aj: f64) -> f64 {
    let (x, y) = (batch.a(i), batch.a(j));
    x.par_iter()
        .zip(y.par_iter())
        .map(|(&u, &v)| {
            let (pu, pv) = (u.abs().powf(ai), v.abs().powf(aj));
            (pu - pv).abs() / (1.0 + pu)
        })
        .reduce(|| 0.0, f64::max)
}

fn pair_evidence(model: &Model, batch: &CoeffBatch, alphas: &[f64], i: usize, j: usize, tol_rel: f64) -> PairEvidence {
    let (ai, aj) = (alphas[i], alphas[j]);
    let max_dev = max_deviation(batch, i, j, ai, aj);
    let closed = model.kappa_closed(i, ai).is_some() && model.kappa_closed(j, aj).is_some();
    let kappa_at = |c: usize, s: f64| -> f64 {
        match model.kappa_closed(c, s) {
            Some(v) if closed => v,
            _ => {
                let a = batch.a(c);
                a.iter().map(|x| x.abs().powf(s)).sum::<f64>() / a.len() as f64
            }
        }
    };
    let (ki, kj) = (kappa_at(i, ai), kappa_at(j, aj));
    let checks: Vec<CrossCheck> = CHECK_XI
        .iter()
        .map(|&xi| {
            let (si, sj) = (ai * xi, aj * (1.0 - xi));
            let cross_kappa = match model.cross_closed(i, j, si, sj) {
                Some(v) if closed => MomentEstimate {
                    estimate: crate::stats::Estimate::exact(v),
                    method: MethodTag::ClosedForm,
                    stable: v.is_finite(),
                },
                _ => moments::cross_kappa_on(batch, i, j, si, sj),
            };
            let bound = ki.powf(xi) * kj.powf(1.0 - xi);
            CrossCheck {
                xi,
                holder_ratio: cross_kappa.value() / bound,
                holder_ratio_hi: cross_kappa.estimate.ci_hi / bound,
                cross_kappa,
            }
        })
        .collect();
    let cross_kappa_min = checks.iter().map(|c| c.cross_kappa.value()).fold(f64::INFINITY, f64::min);
    PairEvidence { i, j, max_dev, sample_equal: max_dev <= tol_rel, cross_kappa_min, checks }
}

impl PairEvidence {
    /// Moment test agrees with equality at every `ξ`.
    fn moment_equal(&self, tol_rel: f64) -> bool {
        self.checks.iter().all(|c| {
            let slack = match c.cross_kappa.method {
                MethodTag::ClosedForm => CLOSED_FORM_SLACK,
                MethodTag::MonteCarlo => 4.0 * tol_rel + 1e-12,
            };
            c.holder_ratio >= 1.0 - slack
        })
    }

    /// Moment test shows the strict Hölder gap at every `ξ`.
    fn moment_distinct(&self, tol_rel: f64) -> bool {
        self.checks.iter().all(|c| match c.cross_kappa.method {
            MethodTag::ClosedForm => c.holder_ratio < 1.0 - CLOSED_FORM_SLACK,
            MethodTag::MonteCarlo => c.holder_ratio_hi < 1.0 && c.holder_ratio < 1.0 - 4.0 * tol_rel,
        })
    }
}

/// Detects the partition on a fixed coefficient batch.
pub fn detect_blocks_on(model: &Model, alphas: &[f64], batch: &CoeffBatch, tol_rel: f64) -> Result<BlockPartition> {
    let d = model.dim();
    if alphas.len() != d || alphas.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::config(format!("need {d} positive tail indices, got {alphas:?}")));
    }
    if batch.dim() != d {
        return Err(Error::config("coefficient batch does not match the model"));
    }
    if batch.len() < MIN_SAMPLES {
        return Err(Error::Insufficient(format!("block detection needs at least {MIN_SAMPLES} draws, got {}", batch.len())));
    }
    if !(tol_rel >= 0.0) {
        return Err(Error::config("tol_rel must be nonnegative"));
    }
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    let evidence: Vec<PairEvidence> =
        pairs.par_iter().map(|&(i, j)| pair_evidence(model, batch, alphas, i, j, tol_rel)).collect();

    for e in &evidence {
        if e.sample_equal && !e.moment_equal(tol_rel) {
            return Err(Error::AmbiguousPartition {
                i: e.i,
                j: e.j,
                reason: format!(
                    "sample moduli agree (max deviation {:.3e}) but the cross moment falls short of its Hölder bound",
                    e.max_dev
                ),
            });
        }
        if !e.sample_equal && !e.moment_distinct(tol_rel) {
            return Err(Error::AmbiguousPartition {
                i: e.i,
                j: e.j,
                reason: format!(
                    "sample moduli differ (max deviation {:.3e}) but the cross moment is not clearly below its Hölder bound",
                    e.max_dev
                ),
            });
        }
    }

    let mut uf = UnionFind((0..d).collect());
    for e in evidence.iter().filter(|e| e.sample_equal) {
        uf.union(e.i, e.j);
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut root_class = vec![usize::MAX; d];
    for j in 0..d {
        let r = uf.find(j);
        if root_class[r] == usize::MAX {
            root_class[r] = classes.len();
            classes.push(Vec::new());
        }
        classes[root_class[r]].push(j);
    }
    // The exact relation is transitive; a tolerance-based one need not be.
    for e in evidence.iter().filter(|e| !e.sample_equal) {
        if uf.find(e.i) == uf.find(e.j) {
            return Err(Error::AmbiguousPartition {
                i: e.i,
                j: e.j,
                reason: "joined by transitivity although the pair itself differs".into(),
            });
        }
    }
    let mut partition = BlockPartition::from_classes(classes, d)?;
    partition.evidence = evidence;
    Ok(partition)
}

/// Draws `n` coefficient pairs and detects the partition.
pub fn detect_blocks(model: &Model, alphas: &[f64], n: usize, tol_rel: f64, seq: &SeedSequence) -> Result<BlockPartition> {
    if n < MIN_SAMPLES {
        return Err(Error::Insufficient(format!("block detection needs n >= {MIN_SAMPLES}, got {n}")));
    }
    let batch = CoeffBatch::draw(model, n, &seq.derive("blocks"));
    detect_blocks_on(model, alphas, &batch, tol_rel)
}

/// Sub-pool of the coordinates in class `l`.
pub fn project_block(pool: &SamplePool, partition: &BlockPartition, l: usize) -> Result<SamplePool> {
    let class = partition
        .classes
        .get(l)
        .ok_or_else(|| Error::config(format!("block {l} does not exist; the partition has {}", partition.len())))?;
    if partition.dim() != pool.dim() {
        return Err(Error::config("partition and pool dimensions differ"));
    }
    pool.project(class)
}
