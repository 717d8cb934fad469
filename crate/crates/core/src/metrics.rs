//! Micro-averaged precision, recall and F1 for entities and triplets.
//!
//! Under [`MatchMode::Strict`] a mention is keyed by `(start, end, type)`;
//! under [`MatchMode::Partial`] by `(end, type)` only. Items are matched as
//! multisets of keys, so one gold item can satisfy at most one prediction.

use alloc::collections::BTreeMap;

use crate::data::{EntityMention, RelationTriplet};
use crate::decode::Prediction;
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchMode {
    Partial,
    Strict,
}

impl core::str::FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "partial" => Ok(Self::Partial),
            "strict" => Ok(Self::Strict),
            _ => Err(Error::InvalidConfig(alloc::format!("unknown match mode `{s}`"))),
        }
    }
}

impl core::fmt::Display for MatchMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Partial => "partial",
            Self::Strict => "strict",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Ner,
    Re,
}

impl core::fmt::Display for Task {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Ner => "ner",
            Self::Re => "re",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Prf {
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Prf {
    /// Scores from raw counts; `0/0` is taken as 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as Real / b as Real };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

type MentionKey = (Option<usize>, usize, usize);

fn mention_key(m: &EntityMention, mode: MatchMode) -> MentionKey {
    match mode {
        MatchMode::Strict => (Some(m.start), m.end, m.label),
        MatchMode::Partial => (None, m.end, m.label),
    }
}

fn triplet_key(t: &RelationTriplet, mode: MatchMode) -> (MentionKey, MentionKey, usize) {
    (mention_key(&t.head, mode), mention_key(&t.tail, mode), t.label)
}

/// `(matched, predicted, gold)` counts for one sentence.
fn multiset_counts<K: Ord>(pred: impl Iterator<Item = K>, gold: impl Iterator<Item = K>) -> (usize, usize, usize) {
    let mut bag: BTreeMap<K, (usize, usize)> = BTreeMap::new();
    let (mut np, mut ng) = (0, 0);
    for k in pred {
        bag.entry(k).or_default().0 += 1;
        np += 1;
    }
    for k in gold {
        bag.entry(k).or_default().1 += 1;
        ng += 1;
    }
    let tp = bag.values().map(|&(p, g)| p.min(g)).sum();
    (tp, np, ng)
}

/// Corpus-level micro PRF. `preds` and `golds` are aligned by sentence.
pub fn micro_f1(preds: &[Prediction], golds: &[Prediction], mode: MatchMode, task: Task) -> Result<Prf> {
    if preds.len() != golds.len() {
        return Err(Error::CountMismatch {
            what: "prediction count",
            expected: golds.len(),
            actual: preds.len(),
        });
    }
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let (t, a, b) = match task {
            Task::Ner => multiset_counts(
                p.mentions.iter().map(|m| mention_key(m, mode)),
                g.mentions.iter().map(|m| mention_key(m, mode)),
            ),
            Task::Re => multiset_counts(
                p.triplets.iter().map(|t| triplet_key(t, mode)),
                g.triplets.iter().map(|t| triplet_key(t, mode)),
            ),
        };
        tp += t;
        np += a;
        ng += b;
    }
    Ok(Prf::from_counts(tp, np - tp, ng - tp))
}

/// Both tasks at once.
pub fn score_both(preds: &[Prediction], golds: &[Prediction], mode: MatchMode) -> Result<(Prf, Prf)> {
    Ok((
        micro_f1(preds, golds, mode, Task::Ner)?,
        micro_f1(preds, golds, mode, Task::Re)?,
    ))
}

/// Helper for building predictions in tests and tools.
pub fn prediction(mentions: &[EntityMention], triplets: &[RelationTriplet]) -> Prediction {
    Prediction {
        mentions: mentions.iter().copied().collect(),
        triplets: triplets.iter().copied().collect(),
    }
}
