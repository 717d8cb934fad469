use std::time::Instant;

use care_core::data::Vocab;
use care_core::synthetic;
use care_core::train::{evaluate, prepare, Trainer};
use care_core::{CareConfig, CareModel, MatchMode};

#[test]
fn reference_corpus_is_memorized_within_200_epochs() {
    let sentences = synthetic::reference_corpus();
    let schema = synthetic::schema();
    let vocab = Vocab::build(&sentences);
    let items = prepare(&schema, sentences, None).unwrap();
    let model = CareModel::new(CareConfig::default(), schema, vocab).unwrap();
    let mut trainer = Trainer::new(model, &items).unwrap();
    let start = Instant::now();
    let mut first_loss = None;
    let mut reached = None;
    for _ in 0..200 {
        let stats = trainer.train_epoch(&items).unwrap();
        first_loss.get_or_insert(stats.mean_loss);
        let eval = evaluate(&trainer.model, &items, MatchMode::Strict).unwrap();
        if std::env::var("OVERFIT_LOG").is_ok() {
            eprintln!("epoch {} loss {:.4} ner {:.3} re {:.3} {:?}", stats.epoch, stats.mean_loss, eval.ner.f1, eval.re.f1, start.elapsed());
        }
        if eval.ner.f1 == 1.0 && eval.re.f1 == 1.0 {
            reached = Some(stats.epoch);
            break;
        }
    }
    assert!(reached.is_some(), "did not reach F1 1.0/1.0 in 200 epochs");
    assert!(start.elapsed().as_secs() < 300);
}
