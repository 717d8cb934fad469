//! Decoding probability tables into typed spans and triplets.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::data::{AnnotatedSentence, EntityMention, RelationTriplet};
use crate::tensor::{Real, Tensor};

/// Decoded (or gold) extraction output for one sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Prediction {
    pub mentions: BTreeSet<EntityMention>,
    pub triplets: BTreeSet<RelationTriplet>,
}

impl Prediction {
    /// The gold annotation viewed as a prediction.
    pub fn from_gold(sentence: &AnnotatedSentence) -> Self {
        Self {
            mentions: sentence.entities.iter().copied().collect(),
            triplets: sentence.relations.iter().copied().collect(),
        }
    }

    /// Both tables at one threshold.
    pub fn decode(entity_probs: &Tensor, relation_probs: &Tensor, threshold: Real) -> Self {
        let mentions = decode_entities(entity_probs, threshold);
        let triplets = decode_relations(relation_probs, &mentions, threshold);
        Self { mentions, triplets }
    }

    /// Converts into an annotated sentence over `tokens`.
    pub fn to_sentence(&self, tokens: Vec<alloc::string::String>) -> AnnotatedSentence {
        AnnotatedSentence::new(
            tokens,
            self.mentions.iter().copied().collect(),
            self.triplets.iter().copied().collect(),
        )
    }
}

/// Every `(i, j, e)` with `i <= j` and probability above `threshold`.
pub fn decode_entities(entity_probs: &Tensor, threshold: Real) -> BTreeSet<EntityMention> {
    let s = entity_probs.shape();
    let (n, types) = (s[0], s[2]);
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in i..n {
            for e in 0..types {
                if entity_probs.at(&[i, j, e]) > threshold {
                    out.insert(EntityMention::new(i, j, e));
                }
            }
        }
    }
    out
}

/// For every hot off-diagonal cell `(i, j, r)`, one triplet per pair of
/// decoded mentions whose last tokens are `i` and `j`. Cells with no such
/// mentions are dropped.
pub fn decode_relations(
    relation_probs: &Tensor,
    mentions: &BTreeSet<EntityMention>,
    threshold: Real,
) -> BTreeSet<RelationTriplet> {
    let s = relation_probs.shape();
    let (n, types) = (s[0], s[2]);
    let mut by_head: Vec<Vec<EntityMention>> = alloc::vec![Vec::new(); n];
    for m in mentions {
        if m.end < n {
            by_head[m.end].push(*m);
        }
    }
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || by_head[i].is_empty() || by_head[j].is_empty() {
                continue;
            }
            for r in 0..types {
                if relation_probs.at(&[i, j, r]) > threshold {
                    for &head in &by_head[i] {
                        for &tail in &by_head[j] {
                            out.insert(RelationTriplet { head, tail, label: r });
                        }
                    }
                }
            }
        }
    }
    out
}
