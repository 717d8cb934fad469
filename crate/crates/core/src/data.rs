//! Annotated sentences, type schema, gold label tables and batching.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered entity and relation type inventories. Position defines the
/// output channel of each type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

impl Schema {
    pub fn new(entity_types: Vec<String>, relation_types: Vec<String>) -> Result<Self> {
        for (kind, list) in [("entity", &entity_types), ("relation", &relation_types)] {
            if list.is_empty() {
                return Err(Error::InvalidSchema(format!("no {kind} types")));
            }
            for (i, s) in list.iter().enumerate() {
                if list[..i].contains(s) {
                    return Err(Error::InvalidSchema(format!("duplicate {kind} type `{s}`")));
                }
            }
        }
        Ok(Self {
            entity_types,
            relation_types,
        })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    pub fn num_entity_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn num_relation_types(&self) -> usize {
        self.relation_types.len()
    }

    pub fn entity_index(&self, symbol: &str) -> Result<usize> {
        self.entity_types
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownSymbol {
                kind: "entity",
                symbol: symbol.to_string(),
            })
    }

    pub fn relation_index(&self, symbol: &str) -> Result<usize> {
        self.relation_types
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| Error::UnknownSymbol {
                kind: "relation",
                symbol: symbol.to_string(),
            })
    }
}

/// A typed span with inclusive token bounds. `label` indexes
/// [`Schema::entity_types`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

impl EntityMention {
    pub fn new(start: usize, end: usize, label: usize) -> Self {
        Self { start, end, label }
    }

    /// The token that stands for the mention in the relation table: its last.
    pub fn head_word(&self) -> usize {
        self.end
    }
}

/// A directed typed relation between two mentions. `label` indexes
/// [`Schema::relation_types`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationTriplet {
    pub head: EntityMention,
    pub tail: EntityMention,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
    pub relations: Vec<RelationTriplet>,
    /// 1-based line of the record in its source file, when known.
    pub line: Option<usize>,
}

impl AnnotatedSentence {
    pub fn new(tokens: Vec<String>, entities: Vec<EntityMention>, relations: Vec<RelationTriplet>) -> Self {
        Self {
            tokens,
            entities,
            relations,
            line: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks spans, type indices and relation references against `schema`.
    pub fn validate(&self, schema: &Schema) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::InvalidSentence("sentence has no tokens".into()));
        }
        let check_mention = |m: &EntityMention, field: &str| -> Result<()> {
            if m.start > m.end || m.end >= n {
                return Err(Error::InvalidSentence(format!(
                    "{field}: span [{}, {}] out of bounds for {n} tokens",
                    m.start, m.end
                )));
            }
            if m.label >= schema.num_entity_types() {
                return Err(Error::InvalidSentence(format!("{field}: entity label {} out of range", m.label)));
            }
            Ok(())
        };
        for m in &self.entities {
            check_mention(m, "entities")?;
        }
        for r in &self.relations {
            check_mention(&r.head, "relations.head")?;
            check_mention(&r.tail, "relations.tail")?;
            if r.label >= schema.num_relation_types() {
                return Err(Error::InvalidSentence(format!("relations: relation label {} out of range", r.label)));
            }
            for (m, which) in [(&r.head, "head"), (&r.tail, "tail")] {
                if !self.entities.contains(m) {
                    return Err(Error::InvalidSentence(format!(
                        "relations.{which}: [{}, {}] is not among the entities",
                        m.start, m.end
                    )));
                }
            }
            if r.head.head_word() == r.tail.head_word() {
                return Err(Error::InvalidSentence(format!(
                    "relations: head and tail share last token {}",
                    r.head.end
                )));
            }
        }
        Ok(())
    }
}

/// Gold targets for one sentence.
///
/// Both tables are `[n, n, types]` 0/1 tensors. The entity table is only
/// populated on `i <= j`, the relation table only on `i != j`; the matching
/// masks select exactly those cells for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTables {
    pub entity: Tensor,
    pub relation: Tensor,
}

impl LabelTables {
    pub fn build(sentence: &AnnotatedSentence, schema: &Schema) -> Result<Self> {
        sentence.validate(schema)?;
        let n = sentence.len();
        let mut entity = Tensor::zeros(&[n, n, schema.num_entity_types()]);
        let mut relation = Tensor::zeros(&[n, n, schema.num_relation_types()]);
        for m in &sentence.entities {
            entity.set(&[m.start, m.end, m.label], 1.0);
        }
        for r in &sentence.relations {
            relation.set(&[r.head.head_word(), r.tail.head_word(), r.label], 1.0);
        }
        Ok(Self { entity, relation })
    }

    pub fn len(&self) -> usize {
        self.entity.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entity_set(&self, i: usize, j: usize, e: usize) -> bool {
        self.entity.at(&[i, j, e]) != 0.0
    }

    pub fn relation_set(&self, i: usize, j: usize, r: usize) -> bool {
        self.relation.at(&[i, j, r]) != 0.0
    }
}

/// 1 on cells `i <= j`, 0 elsewhere, broadcast over `types` channels.
pub fn entity_mask(n: usize, types: usize) -> Tensor {
    cell_mask(n, types, |i, j| i <= j)
}

/// 1 on cells `i != j`, 0 elsewhere, broadcast over `types` channels.
pub fn relation_mask(n: usize, types: usize) -> Tensor {
    cell_mask(n, types, |i, j| i != j)
}

fn cell_mask(n: usize, types: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_fn(&[n, n, types], |flat| {
        let cell = flat / types;
        if keep(cell / n, cell % n) {
            1.0
        } else {
            0.0
        }
    })
}

/// Token vocabulary; id 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocab {
    /// Builds a vocabulary in first-seen order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a AnnotatedSentence>) -> Self {
        let mut tokens = Vec::new();
        let mut seen = BTreeMap::new();
        for s in sentences {
            for t in &s.tokens {
                if t != UNK && !seen.contains_key(t) {
                    seen.insert(t.clone(), ());
                    tokens.push(t.clone());
                }
            }
        }
        Self::from_tokens(tokens)
    }

    /// Vocabulary from an explicit token list (without the unknown token).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec![UNK.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != UNK));
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens in id order, excluding the unknown token.
    pub fn known_tokens(&self) -> &[String] {
        &self.tokens[1..]
    }
}

/// One mini-batch of sentence indices sharing a padded length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub padded_len: usize,
}

/// Deterministic shuffled, length-bucketed batches.
#[derive(Debug, Clone)]
pub struct BatchIter {
    lengths: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

/// Batches are drawn from pools of this many batches, sorted by length.
const BUCKET_POOL: usize = 4;

impl BatchIter {
    pub fn new(lengths: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(Self {
            lengths,
            batch_size,
            seed,
        })
    }

    pub fn for_sentences(sentences: &[AnnotatedSentence], batch_size: usize, seed: u64) -> Result<Self> {
        Self::new(sentences.iter().map(|s| s.len()).collect(), batch_size, seed)
    }

    /// The batches of one epoch; a pure function of `(seed, epoch)`.
    pub fn epoch(&self, epoch: u64) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for pool in order.chunks_mut(self.batch_size * BUCKET_POOL) {
            pool.sort_by_key(|&i| self.lengths[i]);
            for chunk in pool.chunks(self.batch_size) {
                batches.push(Batch {
                    indices: chunk.to_vec(),
                    padded_len: chunk.iter().map(|&i| self.lengths[i]).max().unwrap_or(0),
                });
            }
        }
        batches.shuffle(&mut rng);
        batches
    }
}

/// Count of set cells in a 0/1 table.
pub fn count_set(table: &Tensor) -> usize {
    table.data().iter().filter(|&&v| v != 0.0 as Real).count()
}
