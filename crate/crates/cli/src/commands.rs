//! The subcommands as library functions; `main` only parses flags.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use care_core::classifier::bce_losses;
use care_core::config::EncoderProvider;
use care_core::decode::Prediction;
use care_core::metrics::{score_both, MatchMode, Prf};
use care_core::train::{prepare, Trainer, TrainItem};
use care_core::{synthetic, Adam, AnnotatedSentence, CareConfig, CareModel, Graph, Schema, Tensor, Vocab};
use serde::Serialize;

use crate::archive::EmbeddingArchive;
use crate::checkpoint::Checkpoint;
use crate::corpus::{load_corpus, serialize_corpus, serialize_prediction, serialize_schema};
use crate::error::{Failure, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Config fields that may differ between a checkpoint and a resumed run.
const RESUMABLE: &[&str] = &["epochs", "threshold"];

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn archive_path<'a>(provider: &'a EncoderProvider, explicit: Option<&'a Path>) -> Option<&'a Path> {
    match provider {
        EncoderProvider::Toy => None,
        EncoderProvider::Archive(p) => Some(explicit.unwrap_or(Path::new(p))),
    }
}

/// Loads a corpus and, for the archive provider, the matching vectors.
/// Sentence `k` of the file is looked up under archive id `k`.
pub fn load_items(schema: &Schema, corpus: &Path, config: &CareConfig, archive: Option<&Path>) -> Result<Vec<TrainItem>> {
    let sentences = load_corpus(corpus, schema)?;
    items_from_sentences(schema, sentences, config, archive_path(&config.encoder_provider, archive))
}

pub fn items_from_sentences(
    schema: &Schema,
    sentences: Vec<AnnotatedSentence>,
    config: &CareConfig,
    archive: Option<&Path>,
) -> Result<Vec<TrainItem>> {
    let embeddings = match archive {
        None => {
            if let Some(s) = sentences.iter().find(|s| s.len() > config.max_len) {
                return Err(Failure::Data(format!(
                    "line {}: {} tokens exceeds max_len {}",
                    s.line.unwrap_or(0),
                    s.len(),
                    config.max_len
                )));
            }
            None
        }
        Some(path) => {
            let archive = EmbeddingArchive::read(path)
                .map_err(|e| Failure::io(path, e))?
                .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
            if archive.dim() != config.d_model {
                return Err(Failure::Data(format!(
                    "{}: archive dim {} does not match d_model {}",
                    path.display(),
                    archive.dim(),
                    config.d_model
                )));
            }
            let vectors = sentences
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    archive
                        .encode(k as u32, s.len())
                        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<Tensor>>>()?;
            Some(vectors)
        }
    };
    Ok(prepare(schema, sentences, embeddings)?)
}

/// Scores and mean per-sentence losses of one pass over `items`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEval {
    pub ner: Prf,
    pub re: Prf,
    pub ner_loss: f64,
    pub re_loss: f64,
    pub predictions: Vec<Prediction>,
    pub tables: Vec<(Tensor, Tensor)>,
}

pub fn evaluate_split(model: &CareModel, items: &[TrainItem], mode: MatchMode) -> Result<SplitEval> {
    let (mut ner_loss, mut re_loss) = (0.0, 0.0);
    let mut predictions = Vec::with_capacity(items.len());
    let mut tables = Vec::with_capacity(items.len());
    for item in items {
        let mut g = Graph::new();
        let out = model.forward(&mut g, item.input())?;
        let (ln, lr) = bce_losses(&mut g, out.logits, &item.gold)?;
        let (ln, lr) = (g.value(ln).item(), g.value(lr).item());
        if !(ln.is_finite() && lr.is_finite()) {
            return Err(care_core::Error::NonFiniteLoss { ner: ln, re: lr }.into());
        }
        ner_loss += ln;
        re_loss += lr;
        let e = g.value(out.logits.entity_probs).clone();
        let r = g.value(out.logits.relation_probs).clone();
        predictions.push(Prediction::decode(&e, &r, model.config().threshold));
        tables.push((e, r));
    }
    let golds: Vec<Prediction> = items.iter().map(|i| Prediction::from_gold(&i.sentence)).collect();
    let (ner, re) = score_both(&predictions, &golds, mode)?;
    let n = items.len().max(1) as f64;
    Ok(SplitEval {
        ner,
        re,
        ner_loss: ner_loss / n,
        re_loss: re_loss / n,
        predictions,
        tables,
    })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Header {
        parameters: usize,
        train_sentences: usize,
        dev_sentences: usize,
        mode: String,
        start_epoch: u64,
        config: BTreeMap<&'a str, String>,
    },
    Metric {
        epoch: u64,
        split: &'a str,
        task: &'a str,
        p: Option<f64>,
        r: Option<f64>,
        f1: Option<f64>,
        loss: f64,
    },
}

struct MetricLog(fs::File);

impl MetricLog {
    fn open(path: &Path) -> Result<Self> {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map(Self)
            .map_err(|e| Failure::io(path, e))
    }

    fn write(&mut self, line: &LogLine<'_>) -> Result<()> {
        let mut text = serde_json::to_string(line).expect("log line serializes");
        text.push('\n');
        self.0
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Data(format!("metric log: {e}")))
    }

    fn metrics(&mut self, epoch: u64, split: &str, scores: Option<(&Prf, &Prf)>, losses: (f64, f64)) -> Result<()> {
        for (task, prf, loss) in [("ner", scores.map(|s| s.0), losses.0), ("re", scores.map(|s| s.1), losses.1)] {
            self.write(&LogLine::Metric {
                epoch,
                split,
                task,
                p: prf.map(|x| x.precision),
                r: prf.map(|x| x.recall),
                f1: prf.map(|x| x.f1),
                loss,
            })?;
        }
        Ok(())
    }
}

pub struct TrainOptions<'a> {
    pub config: CareConfig,
    pub schema: Schema,
    pub train: &'a [TrainItem],
    pub dev: &'a [TrainItem],
    pub mode: MatchMode,
    pub out_dir: PathBuf,
    /// Also decode and score the training set every epoch.
    pub eval_train: bool,
    pub resume: Option<Checkpoint>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub train: Option<(Prf, Prf)>,
    pub dev: (Prf, Prf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub parameters: usize,
    pub best_epoch: u64,
    pub best_dev: (Prf, Prf),
    pub history: Vec<EpochRecord>,
    pub metrics_path: PathBuf,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
}

fn check_resume(ck: &Checkpoint, config: &CareConfig, schema: &Schema) -> Result<()> {
    if ck.model.schema() != schema {
        return Err(Failure::Data("checkpoint schema does not match the schema file".into()));
    }
    let diff: Vec<_> = ck
        .model
        .config()
        .diff_fields(config)
        .into_iter()
        .filter(|f| !RESUMABLE.contains(f))
        .collect();
    if !diff.is_empty() {
        return Err(Failure::Usage(format!("config differs from checkpoint in {}", diff.join(", "))));
    }
    Ok(())
}

fn better(a: (&Prf, &Prf), b: Option<(&Prf, &Prf)>) -> bool {
    match b {
        None => true,
        Some((ner, re)) => (a.1.f1, a.0.f1) > (re.f1, ner.f1),
    }
}

/// Trains for `config.epochs` epochs, scoring the dev split after each
/// one. Writes `metrics.jsonl`, `last.ckpt` every epoch and `best.ckpt`
/// whenever dev (RE F1, NER F1) improves.
pub fn train(opts: TrainOptions<'_>) -> Result<TrainReport> {
    let TrainOptions {
        config,
        schema,
        train,
        dev,
        mode,
        out_dir,
        eval_train,
        resume,
        verbose,
    } = opts;
    config.validate()?;
    if train.is_empty() {
        return Err(Failure::Data("training corpus is empty".into()));
    }
    if dev.is_empty() {
        return Err(Failure::Data("dev corpus is empty".into()));
    }
    for item in train.iter().chain(dev) {
        item.sentence.validate(&schema)?;
    }
    let (model, adam, start_epoch) = match resume {
        Some(ck) => {
            check_resume(&ck, &config, &schema)?;
            let mut model = ck.model;
            model.set_schedule(config.epochs, config.threshold)?;
            (model, ck.adam, ck.epoch)
        }
        None => {
            let vocab = match config.encoder_provider {
                EncoderProvider::Toy => Vocab::build(train.iter().map(|i| &i.sentence)),
                EncoderProvider::Archive(_) => Vocab::default(),
            };
            (CareModel::new(config.clone(), schema, vocab)?, Adam::with_lr(config.lr), 0)
        }
    };
    fs::create_dir_all(&out_dir).map_err(|e| Failure::io(&out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let best_path = out_dir.join(BEST_CKPT);
    let last_path = out_dir.join(LAST_CKPT);
    let mut log = MetricLog::open(&metrics_path)?;
    let parameters = model.num_parameters();
    log.write(&LogLine::Header {
        parameters,
        train_sentences: train.len(),
        dev_sentences: dev.len(),
        mode: mode.to_string(),
        start_epoch,
        config: care_core::config::FIELDS
            .iter()
            .map(|&k| (k, config.get(k).expect("known key")))
            .collect(),
    })?;

    let mut trainer = Trainer::new(model, train)?.with_epoch(start_epoch);
    trainer.adam = adam;
    let mut best: Option<(u64, Prf, Prf)> = None;
    let mut last_good: Option<PathBuf> = None;
    let mut history = Vec::new();
    let diverged = |epoch: u64, e: Failure, last_good: &Option<PathBuf>| match e {
        Failure::Numeric(msg) => Failure::Numeric(format!(
            "training diverged in epoch {epoch}: {msg}; last good checkpoint: {}",
            last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string())
        )),
        other => other,
    };
    for _ in start_epoch..config.epochs as u64 {
        let epoch = trainer.epoch() + 1;
        let stats = trainer
            .train_epoch(train)
            .map_err(|e| diverged(epoch, e.into(), &last_good))?;
        let train_scores = if eval_train {
            let ev = evaluate_split(&trainer.model, train, mode).map_err(|e| diverged(epoch, e, &last_good))?;
            Some((ev.ner, ev.re))
        } else {
            None
        };
        let dev_eval = evaluate_split(&trainer.model, dev, mode).map_err(|e| diverged(epoch, e, &last_good))?;
        log.metrics(
            epoch,
            "train",
            train_scores.as_ref().map(|(a, b)| (a, b)),
            (stats.mean_ner_loss, stats.mean_re_loss),
        )?;
        log.metrics(epoch, "dev", Some((&dev_eval.ner, &dev_eval.re)), (dev_eval.ner_loss, dev_eval.re_loss))?;

        let mut ck = Checkpoint {
            model: trainer.model.clone(),
            epoch,
            adam: trainer.adam,
            metadata: BTreeMap::from([
                ("dev_ner_f1".to_string(), format!("{:?}", dev_eval.ner.f1)),
                ("dev_re_f1".to_string(), format!("{:?}", dev_eval.re.f1)),
                ("mode".to_string(), mode.to_string()),
            ]),
        };
        ck.save(&last_path)?;
        last_good = Some(last_path.clone());
        if better((&dev_eval.ner, &dev_eval.re), best.as_ref().map(|(_, n, r)| (n, r))) {
            ck.metadata.insert("selected_by".into(), "dev re f1, then ner f1".into());
            ck.save(&best_path)?;
            best = Some((epoch, dev_eval.ner, dev_eval.re));
        }
        if verbose {
            eprintln!(
                "epoch {epoch:>4}  loss {:>10.4}  dev ner f1 {:.4}  re f1 {:.4}",
                stats.mean_loss, dev_eval.ner.f1, dev_eval.re.f1
            );
        }
        history.push(EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            train: train_scores,
            dev: (dev_eval.ner, dev_eval.re),
        });
    }
    let (best_epoch, bn, br) = best.unwrap_or((start_epoch, Prf::default(), Prf::default()));
    Ok(TrainReport {
        parameters,
        best_epoch,
        best_dev: (bn, br),
        history,
        metrics_path,
        best_path,
        last_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrfJson {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl From<Prf> for PrfJson {
    fn from(p: Prf) -> Self {
        Self {
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            tp: p.tp,
            fp: p.fp,
            fn_: p.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub sentences: usize,
    pub ner: PrfJson,
    pub re: PrfJson,
}

/// Loads a checkpoint and the corpus it will be applied to, rejecting a
/// schema file that disagrees with the checkpoint.
pub fn load_for_inference(
    checkpoint: &Path,
    corpus: &Path,
    schema: Option<&Path>,
    archive: Option<&Path>,
) -> Result<(Checkpoint, Vec<TrainItem>)> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(path) = schema {
        if &crate::corpus::load_schema(path)? != ck.model.schema() {
            return Err(Failure::Data(format!(
                "schema mismatch: {} differs from the checkpoint schema",
                path.display()
            )));
        }
    }
    let items = load_items(ck.model.schema(), corpus, ck.model.config(), archive)?;
    if items.is_empty() {
        return Err(Failure::Data(format!("{}: corpus is empty", corpus.display())));
    }
    Ok((ck, items))
}

pub fn eval(ck: &Checkpoint, items: &[TrainItem], mode: MatchMode) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Failure::Data("corpus is empty".into()));
    }
    let ev = evaluate_split(&ck.model, items, mode)?;
    Ok(EvalReport {
        mode: mode.to_string(),
        sentences: items.len(),
        ner: ev.ner.into(),
        re: ev.re.into(),
    })
}

/// One dump line per sentence, in input order.
pub fn predict(ck: &Checkpoint, items: &[TrainItem], with_scores: bool) -> Result<String> {
    let schema = ck.model.schema();
    let mut out = String::new();
    for item in items {
        let (e, r) = ck.model.predict_tables(item.input())?;
        if !(e.is_finite() && r.is_finite()) {
            return Err(Failure::Numeric(format!(
                "non-finite probabilities for sentence on line {}",
                item.sentence.line.unwrap_or(0)
            )));
        }
        let pred = Prediction::decode(&e, &r, ck.model.config().threshold);
        out.push_str(&serialize_prediction(
            &item.sentence.tokens,
            &pred,
            schema,
            with_scores.then_some((&e, &r)),
        ));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub group: String,
    pub setting: String,
    /// Config fields that differ from the base config.
    pub changed: Vec<String>,
    pub parameters: usize,
    pub best_epoch: u64,
    pub ner_f1: f64,
    pub re_f1: f64,
}

pub fn ablation_grid(base: &CareConfig) -> Vec<(&'static str, String, CareConfig)> {
    let mut rows: Vec<_> = base
        .ablation_settings()
        .into_iter()
        .map(|(name, c)| ("component", name, c))
        .collect();
    rows.extend(base.depth_sweep().into_iter().map(|(name, c)| ("depth", name, c)));
    rows
}

/// Run directory of ablation row `i`.
pub fn ablation_dir(out_dir: &Path, i: usize, setting: &str) -> PathBuf {
    let safe: String = setting
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    out_dir.join(format!("{i}_{safe}"))
}

/// Trains every ablation row into its own subdirectory of `out_dir` and
/// writes `ablation.jsonl` and `ablation.tsv` there.
pub fn ablate(
    base: &CareConfig,
    schema: &Schema,
    train: &[TrainItem],
    dev: &[TrainItem],
    mode: MatchMode,
    out_dir: &Path,
    verbose: bool,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (i, (group, setting, cfg)) in ablation_grid(base).into_iter().enumerate() {
        if verbose {
            eprintln!("[{}/9] {setting}", i + 1);
        }
        let report = self::train(TrainOptions {
            config: cfg.clone(),
            schema: schema.clone(),
            train,
            dev,
            mode,
            out_dir: ablation_dir(out_dir, i, &setting),
            eval_train: false,
            resume: None,
            verbose: false,
        })?;
        rows.push(AblationRow {
            group: group.to_string(),
            setting,
            changed: cfg.diff_fields(base).into_iter().map(String::from).collect(),
            parameters: report.parameters,
            best_epoch: report.best_epoch,
            ner_f1: report.best_dev.0.f1,
            re_f1: report.best_dev.1.f1,
        });
    }
    let jsonl: String = rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    write_file(&out_dir.join("ablation.jsonl"), &jsonl)?;
    let mut tsv = String::from("group\tsetting\tchanged\tparameters\tbest_epoch\tner_f1\tre_f1\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
            r.group,
            r.setting,
            if r.changed.is_empty() { "-".to_string() } else { r.changed.join(",") },
            r.parameters,
            r.best_epoch,
            r.ner_f1,
            r.re_f1
        ));
    }
    write_file(&out_dir.join("ablation.tsv"), &tsv)?;
    Ok(rows)
}

/// Writes the synthetic corpus and its schema into `out_dir`.
pub fn synth(out_dir: &Path, n: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir).map_err(|e| Failure::io(out_dir, e))?;
    let schema = synthetic::schema();
    let corpus = out_dir.join("synthetic.jsonl");
    let schema_path = out_dir.join("schema.json");
    write_file(&corpus, &serialize_corpus(&synthetic::corpus(n, seed), &schema))?;
    write_file(&schema_path, &serialize_schema(&schema))?;
    Ok((corpus, schema_path))
}
