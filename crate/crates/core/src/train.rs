//! Mini-batch training and corpus evaluation.

use alloc::vec::Vec;

use crate::data::{AnnotatedSentence, BatchIter, LabelTables, Schema};
use crate::decode::Prediction;
use crate::error::{Error, Result};
use crate::metrics::{score_both, MatchMode, Prf};
use crate::model::{CareModel, EncoderInput};
use crate::optim::Adam;
use crate::tape::Graph;
use crate::tensor::{Real, Tensor};

/// A sentence with its gold tables and, for the archive provider, its
/// precomputed vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub sentence: AnnotatedSentence,
    pub gold: LabelTables,
    pub embeddings: Option<Tensor>,
}

impl TrainItem {
    pub fn input(&self) -> EncoderInput<'_> {
        match &self.embeddings {
            Some(h) => EncoderInput::Embeddings(h),
            None => EncoderInput::Tokens(&self.sentence.tokens),
        }
    }
}

/// Validates sentences and builds their label tables.
pub fn prepare(schema: &Schema, sentences: Vec<AnnotatedSentence>, embeddings: Option<Vec<Tensor>>) -> Result<Vec<TrainItem>> {
    if let Some(e) = &embeddings {
        if e.len() != sentences.len() {
            return Err(Error::CountMismatch {
                what: "embedding records",
                expected: sentences.len(),
                actual: e.len(),
            });
        }
    }
    let mut embeddings = embeddings.map(|e| e.into_iter());
    sentences
        .into_iter()
        .map(|sentence| {
            let gold = LabelTables::build(&sentence, schema)?;
            let embeddings = embeddings.as_mut().and_then(|it| it.next());
            Ok(TrainItem {
                sentence,
                gold,
                embeddings,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    /// Mean over sentences of the summed entity + relation loss.
    pub mean_loss: Real,
    pub mean_ner_loss: Real,
    pub mean_re_loss: Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ner: Prf,
    pub re: Prf,
    pub predictions: Vec<Prediction>,
}

/// Owns a model and steps it through epochs. Batch order for epoch `e`
/// depends only on `(config.seed, e)`.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CareModel,
    pub adam: Adam,
    batches: BatchIter,
    epoch: u64,
}

impl Trainer {
    pub fn new(model: CareModel, items: &[TrainItem]) -> Result<Self> {
        let cfg = model.config();
        let batches = BatchIter::new(items.iter().map(|i| i.sentence.len()).collect(), cfg.batch_size, cfg.seed)?;
        Ok(Self {
            adam: Adam::with_lr(cfg.lr),
            model,
            batches,
            epoch: 0,
        })
    }

    /// Resumes at a given epoch count (checkpoint loading).
    pub fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn train_epoch(&mut self, items: &[TrainItem]) -> Result<EpochStats> {
        if items.is_empty() {
            return Err(Error::InvalidArgument {
                op: "train_epoch",
                msg: "empty training set".into(),
            });
        }
        let (mut total, mut ner, mut re) = (0.0, 0.0, 0.0);
        for batch in self.batches.epoch(self.epoch) {
            for &i in &batch.indices {
                let item = &items[i];
                let mut g = Graph::new();
                let out = self.model.loss(&mut g, item.input(), &item.gold)?;
                total += g.value(out.total).item();
                ner += out.ner;
                re += out.re;
                let grads = g.backward(out.total)?;
                self.model.params_mut().accumulate(&grads);
            }
            self.adam.step(self.model.params_mut())?;
        }
        self.epoch += 1;
        let n = items.len() as Real;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: total / n,
            mean_ner_loss: ner / n,
            mean_re_loss: re / n,
        })
    }
}

/// Decodes every item and scores against its gold annotation.
pub fn evaluate(model: &CareModel, items: &[TrainItem], mode: MatchMode) -> Result<Evaluation> {
    let predictions = items
        .iter()
        .map(|item| model.predict(item.input()))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<Prediction> = items.iter().map(|i| Prediction::from_gold(&i.sentence)).collect();
    let (ner, re) = score_both(&predictions, &golds, mode)?;
    Ok(Evaluation { ner, re, predictions })
}
