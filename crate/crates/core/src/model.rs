//! The full extraction model: encoder, interaction stack and heads.

use alloc::format;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{bce_losses, build_pair_features, score_cells, total_loss, ClassifierHeads, PairLogits};
use crate::coattention::{CoAttentionStack, StackOutput};
use crate::config::{CareConfig, EncoderProvider};
use crate::data::{LabelTables, Schema, Vocab};
use crate::decode::Prediction;
use crate::encoder::{encode_precomputed, ToyEncoder};
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tape::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Token-level input for one sentence.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    /// Raw tokens, looked up in the model vocabulary (toy encoder).
    Tokens(&'a [alloc::string::String]),
    /// Precomputed `[n, d_model]` vectors.
    Embeddings(&'a Tensor),
}

/// Position of the initialization RNG after the model was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub encoded: Var,
    pub stack: StackOutput,
    pub features: (Var, Var),
    pub logits: PairLogits,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    pub ner: Real,
    pub re: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareModel {
    config: CareConfig,
    schema: Schema,
    vocab: Vocab,
    store: ParamStore,
    encoder: Option<ToyEncoder>,
    stack: CoAttentionStack,
    heads: ClassifierHeads,
    rng_state: RngState,
}

impl CareModel {
    /// Builds a freshly initialized model; initialization depends only on
    /// `config.seed` and the shapes implied by `config`, `schema` and `vocab`.
    pub fn new(config: CareConfig, schema: Schema, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = match config.encoder_provider {
            EncoderProvider::Toy => Some(ToyEncoder::new(
                &mut store,
                &mut rng,
                vocab.len(),
                config.d_model,
                config.max_len,
            )?),
            EncoderProvider::Archive(_) => None,
        };
        let stack = CoAttentionStack::new(&mut store, &mut rng, &config)?;
        let heads = ClassifierHeads::new(
            &mut store,
            &mut rng,
            config.pair_feature_width(),
            config.d_task,
            schema.num_entity_types(),
            schema.num_relation_types(),
        )?;
        Ok(Self {
            rng_state: RngState::capture(&rng),
            config,
            schema,
            vocab,
            store,
            encoder,
            stack,
            heads,
        })
    }

    /// Rebuilds a model around saved parameters. Every parameter of the
    /// architecture must be present with the right shape, and nothing else.
    pub fn from_parts(
        config: CareConfig,
        schema: Schema,
        vocab: Vocab,
        params: ParamStore,
        rng_state: RngState,
    ) -> Result<Self> {
        let mut model = Self::new(config, schema, vocab)?;
        if params.len() != model.store.len() {
            return Err(Error::CountMismatch {
                what: "parameter count",
                expected: model.store.len(),
                actual: params.len(),
            });
        }
        for (_, p) in params.iter() {
            let id = model
                .store
                .find(p.name())
                .ok_or_else(|| Error::InvalidConfig(format!("unexpected parameter `{}`", p.name())))?;
            let expected = model.store.get(id).value().shape();
            if expected != p.value().shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_parameter",
                    lhs: expected.to_vec(),
                    rhs: p.value().shape().to_vec(),
                });
            }
            *model.store.get_mut(id) = p.clone();
        }
        model.rng_state = rng_state;
        Ok(model)
    }

    pub fn config(&self) -> &CareConfig {
        &self.config
    }

    /// Changes the fields that do not affect the architecture: the epoch
    /// budget and the decision threshold.
    pub fn set_schedule(&mut self, epochs: usize, threshold: Real) -> Result<()> {
        let mut c = self.config.clone();
        c.epochs = epochs;
        c.threshold = threshold;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stack(&self) -> &CoAttentionStack {
        &self.stack
    }

    pub fn heads(&self) -> &ClassifierHeads {
        &self.heads
    }

    pub fn toy_encoder(&self) -> Option<&ToyEncoder> {
        self.encoder.as_ref()
    }

    pub fn rng_state(&self) -> RngState {
        self.rng_state
    }

    /// Number of learnable scalars.
    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encode(&self, g: &mut Graph, input: EncoderInput<'_>) -> Result<Var> {
        match (input, &self.encoder) {
            (EncoderInput::Tokens(tokens), Some(enc)) => enc.encode(g, &self.store, &self.vocab.ids(tokens)),
            (EncoderInput::Embeddings(h), None) => {
                let n = h.shape().first().copied().unwrap_or(0);
                encode_precomputed(g, h, n, self.config.d_model)
            }
            (EncoderInput::Tokens(_), None) => Err(Error::InvalidArgument {
                op: "encode",
                msg: "model expects precomputed embeddings, got tokens".into(),
            }),
            (EncoderInput::Embeddings(_), Some(_)) => Err(Error::InvalidArgument {
                op: "encode",
                msg: "model has a toy encoder, got precomputed embeddings".into(),
            }),
        }
    }

    pub fn forward(&self, g: &mut Graph, input: EncoderInput<'_>) -> Result<ForwardOutput> {
        let encoded = self.encode(g, input)?;
        let stack = self.stack.run(g, &self.store, encoded)?;
        let shared = if self.config.use_shared_in_classifier {
            stack.shared
        } else {
            None
        };
        let features = build_pair_features(g, stack.reps, shared)?;
        let logits = score_cells(g, &self.store, &self.heads, features.0, features.1)?;
        Ok(ForwardOutput {
            encoded,
            stack,
            features,
            logits,
        })
    }

    pub fn loss(&self, g: &mut Graph, input: EncoderInput<'_>, gold: &LabelTables) -> Result<LossOutput> {
        let out = self.forward(g, input)?;
        if g.shape(out.logits.entity_probs)[0] != gold.len() {
            return Err(Error::CountMismatch {
                what: "gold table size",
                expected: g.shape(out.logits.entity_probs)[0],
                actual: gold.len(),
            });
        }
        let (ner, re) = bce_losses(g, out.logits, gold)?;
        let total = total_loss(g, ner, re)?;
        Ok(LossOutput {
            total,
            ner: g.value(ner).item(),
            re: g.value(re).item(),
        })
    }

    /// Entity and relation probability tables for one sentence.
    pub fn predict_tables(&self, input: EncoderInput<'_>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        Ok((
            g.value(out.logits.entity_probs).clone(),
            g.value(out.logits.relation_probs).clone(),
        ))
    }

    pub fn predict(&self, input: EncoderInput<'_>) -> Result<Prediction> {
        let (e, r) = self.predict_tables(input)?;
        Ok(Prediction::decode(&e, &r, self.config.threshold))
    }
}
