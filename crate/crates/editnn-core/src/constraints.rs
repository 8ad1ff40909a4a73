//! Edit constraints and the samplers that generate edit tasks.
//!
//! A constraint is a scalar function of the parameters that is satisfied iff
//! its value is <= 0. The one used throughout is the classification margin:
//! the best competitor log-probability minus the reference-class
//! log-probability, which on raw logits equals the same difference of logits
//! because the softmax normalizer cancels.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::models::{forward, ModelConfig, ParamVars};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Which classes compete against the reference class inside the margin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Competitors {
    /// Every class except the reference. The classification default.
    AllOther,
    /// An explicit competitor list (used for externally scored candidate
    /// sets, e.g. hypotheses of a sequence model). Must exclude the
    /// reference and be non-empty.
    Explicit(Vec<usize>),
}

/// One edit task: force `x` to be classified as `y_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditConstraint {
    pub x: Tensor,
    pub y_ref: usize,
    pub competitors: Competitors,
}

impl EditConstraint {
    pub fn new(x: Tensor, y_ref: usize, competitors: Competitors) -> Result<EditConstraint> {
        if let Competitors::Explicit(list) = &competitors {
            if list.is_empty() {
                return Err(Error::Empty("competitor list"));
            }
            if list.contains(&y_ref) {
                return Err(Error::InvalidConfig(format!(
                    "competitor list contains the reference class {y_ref}"
                )));
            }
        }
        Ok(EditConstraint {
            x,
            y_ref,
            competitors,
        })
    }

    fn competitor_indices(&self, num_classes: usize) -> Result<Vec<usize>> {
        match &self.competitors {
            Competitors::AllOther => Ok((0..num_classes).filter(|&c| c != self.y_ref).collect()),
            Competitors::Explicit(list) => {
                if let Some(&bad) = list.iter().find(|&&c| c >= num_classes) {
                    return Err(Error::IndexOutOfBounds {
                        op: "competitor_indices",
                        index: bad,
                        len: num_classes,
                    });
                }
                Ok(list.clone())
            }
        }
    }
}

/// Margin constraint on a rank-1 logits node:
/// max over competitors of logits[c] minus logits[y_ref].
///
/// Computed on raw logits; subtracting the log-softmax normalizer from both
/// terms would cancel, so this equals the log-probability margin exactly.
/// Satisfied (<= 0) iff the reference class weakly dominates every
/// competitor. Differentiable; at ties the max picks the first maximal
/// competitor.
pub fn margin_constraint(logits: &Var, y_ref: usize, competitors: &Competitors) -> Result<Var> {
    if logits.shape().len() != 1 {
        return Err(Error::BadShape {
            op: "margin_constraint",
            shape: logits.shape().to_vec(),
            detail: "expected rank-1 logits".into(),
        });
    }
    let c = logits.shape()[0];
    if c < 2 {
        return Err(Error::BadShape {
            op: "margin_constraint",
            shape: logits.shape().to_vec(),
            detail: "need at least 2 classes".into(),
        });
    }
    if y_ref >= c {
        return Err(Error::IndexOutOfBounds {
            op: "margin_constraint",
            index: y_ref,
            len: c,
        });
    }
    let holder = EditConstraint {
        x: Tensor::zeros(logits.dtype(), vec![0]),
        y_ref,
        competitors: competitors.clone(),
    };
    let comps = holder.competitor_indices(c)?;
    let wide = logits.reshape(vec![1, c])?;
    let comp_vals = wide.gather_elems(comps.iter().map(|&j| (0, j)).collect())?;
    let best = comp_vals.max_all_1d()?;
    let reference = wide.gather_elems(vec![(0, y_ref)])?.reshape(vec![])?;
    best.sub(&reference)
}

/// The constraint value as a differentiable scalar: forward `c.x` through
/// the model and apply [`margin_constraint`] to the logits.
pub fn constraint_loss(config: &ModelConfig, params: &ParamVars, c: &EditConstraint) -> Result<Var> {
    let x = match c.x.shape().len() {
        1 => c.x.reshape(vec![1, c.x.shape()[0]])?,
        2 => c.x.clone(),
        _ => {
            return Err(Error::BadShape {
                op: "constraint_loss",
                shape: c.x.shape().to_vec(),
                detail: "constraint input must be a single feature vector".into(),
            })
        }
    };
    let logits = forward(config, params, &Var::constant(x))?;
    let flat = logits.reshape(vec![config.num_classes])?;
    margin_constraint(&flat, c.y_ref, &c.competitors)
}

/// The satisfaction rule: l_e <= 0, ties included. NaN is an error because
/// it cannot be compared against the threshold.
pub fn is_satisfied(l_e_value: f64) -> Result<bool> {
    if l_e_value.is_nan() {
        return Err(Error::NanConstraint);
    }
    Ok(l_e_value <= 0.0)
}

/// Target-selection strategy for generated edit tasks.
#[derive(Debug, Clone)]
pub enum SamplerStrategy {
    /// Input uniform over the candidate indices, target uniform over all C
    /// classes (the currently correct class included).
    Uniform,
    /// Input uniform; target chosen so its rank under the model's predicted
    /// ordering follows the given histogram (index = rank, 0 = argmax).
    RankMatched(Vec<f64>),
    /// A fixed pool of constraints, returned round-robin.
    Pool(Vec<EditConstraint>),
}

/// Deterministic edit-task generator. Each draw advances an explicit
/// counter; two samplers built with the same strategy and seed produce the
/// same sequence. Concurrent use requires separate instances.
#[derive(Debug, Clone)]
pub struct TargetSampler {
    strategy: SamplerStrategy,
    rng: ChaCha8Rng,
    draws: u64,
}

impl TargetSampler {
    pub fn new(strategy: SamplerStrategy, seed: u64) -> Result<TargetSampler> {
        match &strategy {
            SamplerStrategy::RankMatched(hist) => {
                if hist.is_empty() {
                    return Err(Error::Empty("rank histogram"));
                }
                if hist.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(Error::InvalidConfig(
                        "rank histogram entries must be in [0, 1]".into(),
                    ));
                }
                let total: f64 = hist.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "rank histogram sums to {total}, expected 1"
                    )));
                }
            }
            SamplerStrategy::Pool(pool) => {
                if pool.is_empty() {
                    return Err(Error::Empty("constraint pool"));
                }
            }
            SamplerStrategy::Uniform => {}
        }
        Ok(TargetSampler {
            strategy,
            rng: rng::stream_rng(seed, Stream::Constraint),
            draws: 0,
        })
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Draw the next edit task. `features` is the full [N, d] matrix;
    /// `candidates` are the row indices eligible as edit inputs (typically
    /// one split). `model_scores`, aligned with `features` rows, is required
    /// by the rank-matched strategy and ignored otherwise.
    pub fn sample(
        &mut self,
        features: &Tensor,
        candidates: &[usize],
        num_classes: usize,
        model_scores: Option<&Tensor>,
    ) -> Result<EditConstraint> {
        self.draws += 1;
        match &self.strategy {
            SamplerStrategy::Pool(pool) => Ok(pool[(self.draws - 1) as usize % pool.len()].clone()),
            SamplerStrategy::Uniform => {
                let (x, _) = self.draw_input(features, candidates)?;
                let y_ref = rng::below(&mut self.rng, num_classes);
                EditConstraint::new(x, y_ref, Competitors::AllOther)
            }
            SamplerStrategy::RankMatched(hist) => {
                let hist = hist.clone();
                let (x, row) = self.draw_input(features, candidates)?;
                let scores = model_scores.ok_or_else(|| {
                    Error::InvalidConfig(
                        "rank-matched sampling requires model scores for the inputs".into(),
                    )
                })?;
                if scores.shape().len() != 2 || scores.shape()[0] != features.shape()[0] {
                    return Err(Error::BadShape {
                        op: "sample",
                        shape: scores.shape().to_vec(),
                        detail: "model scores must be [N, C] aligned with features".into(),
                    });
                }
                let rank = self.draw_rank(&hist);
                if rank >= num_classes {
                    return Err(Error::InvalidConfig(format!(
                        "rank histogram assigns mass to rank {rank} but there are only {num_classes} classes"
                    )));
                }
                let y_ref = class_at_rank(scores, row, rank)?;
                EditConstraint::new(x, y_ref, Competitors::AllOther)
            }
        }
    }

    fn draw_input(&mut self, features: &Tensor, candidates: &[usize]) -> Result<(Tensor, usize)> {
        if candidates.is_empty() {
            return Err(Error::Empty("edit input candidates"));
        }
        let row = candidates[rng::below(&mut self.rng, candidates.len())];
        let d = features.shape()[1];
        let x = features.gather_rows(&[row])?.reshape(vec![d])?;
        Ok((x, row))
    }

    fn draw_rank(&mut self, hist: &[f64]) -> usize {
        let u = rng::uniform(&mut self.rng);
        let mut acc = 0.0;
        for (r, &p) in hist.iter().enumerate() {
            acc += p;
            if u < acc {
                return r;
            }
        }
        hist.len() - 1
    }
}

/// The class ranked `rank`-th (0 = argmax) in row `row` of a score matrix,
/// ties broken toward the lower class index.
fn class_at_rank(scores: &Tensor, row: usize, rank: usize) -> Result<usize> {
    let c = scores.shape()[1];
    let vals = scores.gather_rows(&[row])?.to_f64_vec();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    Ok(order[rank])
}

/// Parse a rank histogram from text: one "rank probability" pair per line,
/// blank lines and `#` comments ignored. Missing ranks get probability 0.
pub fn parse_rank_histogram(text: &str) -> Result<Vec<f64>> {
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(r), Some(p), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::InvalidConfig(format!(
                "rank histogram line {}: expected \"rank probability\", got {line:?}",
                lineno + 1
            )));
        };
        let rank: usize = r.parse().map_err(|_| {
            Error::InvalidConfig(format!("rank histogram line {}: bad rank {r:?}", lineno + 1))
        })?;
        let prob: f64 = p.parse().map_err(|_| {
            Error::InvalidConfig(format!(
                "rank histogram line {}: bad probability {p:?}",
                lineno + 1
            ))
        })?;
        pairs.push((rank, prob));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("rank histogram"));
    }
    let max_rank = pairs.iter().map(|&(r, _)| r).max().expect("non-empty");
    let mut hist = vec![0.0; max_rank + 1];
    for (r, p) in pairs {
        hist[r] += p;
    }
    Ok(hist)
}
