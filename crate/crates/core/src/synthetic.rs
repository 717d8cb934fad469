//! Deterministic toy corpus with learnable entity and relation patterns.
//!
//! People and organizations come from fixed name lists (some two tokens
//! long). Relations are signalled by trigger words: `works for` / `joined`
//! give `works_for`, `founded` / `was founded by` give `founded`, and `met`
//! gives none.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AnnotatedSentence, EntityMention, RelationTriplet, Schema};

pub const PER: usize = 0;
pub const ORG: usize = 1;
pub const WORKS_FOR: usize = 0;
pub const FOUNDED: usize = 1;

/// Seed of the reference 20-sentence corpus.
pub const DEFAULT_SEED: u64 = 20;

const PEOPLE: &[&str] = &["alice", "bob smith", "carol", "dave jones", "erin", "frank"];
const ORGS: &[&str] = &["acme", "globex corp", "initech", "umbrella inc", "hooli"];

pub fn schema() -> Schema {
    Schema::new(
        vec!["PER".to_string(), "ORG".to_string()],
        vec!["works_for".to_string(), "founded".to_string()],
    )
    .expect("static schema")
}

struct Builder {
    tokens: Vec<String>,
    entities: Vec<EntityMention>,
    relations: Vec<RelationTriplet>,
}

impl Builder {
    fn new() -> Self {
        Self {
            tokens: Vec::new(),
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    fn words(&mut self, text: &str) {
        self.tokens.extend(text.split_whitespace().map(String::from));
    }

    fn entity(&mut self, name: &str, label: usize) -> EntityMention {
        let start = self.tokens.len();
        self.words(name);
        let m = EntityMention::new(start, self.tokens.len() - 1, label);
        self.entities.push(m);
        m
    }

    fn relate(&mut self, head: EntityMention, tail: EntityMention, label: usize) {
        self.relations.push(RelationTriplet { head, tail, label });
    }

    fn finish(self) -> AnnotatedSentence {
        AnnotatedSentence::new(self.tokens, self.entities, self.relations)
    }
}

fn two_distinct<'a>(rng: &mut ChaCha8Rng, names: &[&'a str]) -> (&'a str, &'a str) {
    let picked: Vec<&&str> = names.choose_multiple(rng, 2).collect();
    (picked[0], picked[1])
}

/// `n` sentences cycling through five templates, names drawn from `seed`.
pub fn corpus(n: usize, seed: u64) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (p1, p2) = two_distinct(&mut rng, PEOPLE);
            let (o1, o2) = two_distinct(&mut rng, ORGS);
            let mut b = Builder::new();
            match i % 5 {
                0 => {
                    let p = b.entity(p1, PER);
                    b.words("works for");
                    let o = b.entity(o1, ORG);
                    b.words(".");
                    b.relate(p, o, WORKS_FOR);
                }
                1 => {
                    let o = b.entity(o1, ORG);
                    b.words("was founded by");
                    let p = b.entity(p1, PER);
                    b.words(".");
                    b.relate(p, o, FOUNDED);
                }
                2 => {
                    b.entity(p1, PER);
                    b.words("met");
                    b.entity(p2, PER);
                    b.words("in");
                    b.entity(o1, ORG);
                    b.words(".");
                }
                3 => {
                    let p = b.entity(p1, PER);
                    b.words("works for");
                    let o = b.entity(o1, ORG);
                    b.words("and");
                    let q = b.entity(p2, PER);
                    b.words("founded");
                    let r = b.entity(o2, ORG);
                    b.relate(p, o, WORKS_FOR);
                    b.relate(q, r, FOUNDED);
                }
                _ => {
                    b.words("yesterday");
                    let p = b.entity(p1, PER);
                    b.words("joined");
                    let o = b.entity(o1, ORG);
                    b.relate(p, o, WORKS_FOR);
                }
            }
            b.finish()
        })
        .collect()
}

/// The reference 20-sentence training corpus.
pub fn reference_corpus() -> Vec<AnnotatedSentence> {
    corpus(20, DEFAULT_SEED)
}
