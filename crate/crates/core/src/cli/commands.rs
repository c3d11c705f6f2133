use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;

use super::config::{ClientKind, EmotionSource, RunConfig};
use super::{CliError, Command};
use crate::cause::{
    extract_causes, heuristic_causes, write_decisions, ExtractionConfig, ExtractionOutput,
    GenerativeClient, HttpClient, ScriptedClient, TargetEmotion,
};
use crate::corpus::{self, Conversation, Corpus, CorpusError, EmotionLabel, UtteranceKey};
use crate::features::{
    align, load_features, synth_features, AlignPolicy, AlignedDataset, FeatureTable, Modality,
    SynthOptions,
};
use crate::fusion::{
    self, init_model, predict, read_predictions, write_predictions, EmotionPrediction, FusionModel,
};
use crate::metrics::{
    ablation_curve, emotion_confusion, neutral_leakage, pair_mismatches, score_pairs,
    write_ablation_csv, ConfusionMatrix, ConversationMismatches, MetricsReport, PairSet,
};

pub(super) fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(args) => ingest(&args.resolve()?),
        Command::SynthFeatures(args) => synth(&args.resolve()?),
        Command::TrainMer(args) => train_mer(&args.resolve()?),
        Command::EvalMer(args) => eval_mer(&args.resolve()?),
        Command::ExtractCauses(args) => extract(&args.resolve()?),
        Command::EvalPairs(args) => eval_pairs(&args.resolve()?),
        Command::AblateWindow(args) => ablate_window(&args.resolve()?),
        Command::Report(args) => report(&args.resolve()?),
    }
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn create(cfg: &RunConfig) -> Result<Output, CliError> {
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
        Ok(Output {
            dir: cfg.output_dir.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("outputs serialize to JSON");
        text.push('\n');
        self.write(name, text)
    }

    fn write_config(&self, cfg: &RunConfig) -> Result<(), CliError> {
        self.write("run_config.toml", cfg.effective_toml())
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing CSV to memory cannot fail");
    buf
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    let corpus = corpus::load_corpus(cfg.require_corpus()?, cfg.corpus_format)?;
    if corpus.is_empty() {
        return Err(CliError::Validation(
            "corpus contains no conversations".into(),
        ));
    }
    Ok(corpus)
}

fn load_tables(cfg: &RunConfig) -> Result<Vec<FeatureTable>, CliError> {
    if cfg.features.is_empty() {
        return Err(CliError::Config(
            "no feature files configured (set [features] or pass --feature MODALITY=PATH)".into(),
        ));
    }
    cfg.features
        .iter()
        .map(|(&m, path)| load_features(path, m).map_err(CliError::from))
        .collect()
}

fn align_part(convs: &[Conversation], tables: &[FeatureTable]) -> Result<AlignedDataset, CliError> {
    let refs: Vec<&FeatureTable> = tables.iter().collect();
    Ok(align(convs, &refs, AlignPolicy::MaskMissing)?)
}

fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.require_corpus()?;
    let raw = corpus::read(path)?;
    let is_manifest = matches!(
        serde_json::from_slice::<serde_json::Value>(&raw),
        Ok(serde_json::Value::Object(ref m)) if m.contains_key("format")
    );
    let out = Output::create(cfg)?;
    let parsed = if is_manifest {
        corpus::load_manifest(path).map(Corpus::Split)
    } else {
        corpus::parse_unvalidated(&raw, cfg.corpus_format)
    };
    let (corpus, violations) = match parsed {
        Ok(c) => {
            let v = corpus::validate(&c);
            (Some(c), v)
        }
        Err(CorpusError::Validation(v)) => (None, v),
        Err(other) => return Err(other.into()),
    };
    out.write_json("validation.json", &violations)?;
    out.write_config(cfg)?;
    if let Some(first) = violations.first() {
        return Err(CliError::Validation(format!(
            "{} violation(s); first: {first}",
            violations.len()
        )));
    }
    let corpus = corpus.expect("no violations implies a parsed corpus");
    out.write("corpus.json", corpus.to_canonical_json() + "\n")?;

    let counts: BTreeMap<String, usize> = match &corpus {
        Corpus::Flat(convs) => BTreeMap::from([("all".to_string(), convs.len())]),
        Corpus::Split(split) => corpus::SplitName::ALL
            .iter()
            .map(|&s| (s.to_string(), split.part(s).len()))
            .collect(),
    };
    out.write_json("ingest_summary.json", &counts)?;
    for (split, n) in &counts {
        println!("{split}: {n} conversations");
    }
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let convs = corpus.conversations();
    let visible = cfg.synth.complementary.then(complementary_classes);
    let mut tables = Vec::new();
    for &m in &cfg.synth.modalities {
        let dim = cfg
            .synth
            .dims
            .get(&m)
            .copied()
            .unwrap_or_else(|| m.default_dim());
        let mut options = SynthOptions::new(dim, cfg.synth.signal, cfg.seed);
        options.visible = visible.as_ref().map(|v| v[&m].clone());
        tables.push(synth_features(convs.iter().copied(), m, &options)?);
    }
    let out = Output::create(cfg)?;
    for table in &tables {
        let name = format!("{}.features.csv", table.modality);
        let mut buf = Vec::new();
        table.write_to(&mut buf)?;
        out.write(&name, buf)?;
        println!(
            "{}: {} rows, dim {}",
            out.path(&name).display(),
            table.len(),
            table.dim
        );
    }
    out.write_config(cfg)
}

/// Disjoint visible-class subsets per modality.
pub fn complementary_classes() -> BTreeMap<Modality, BTreeSet<EmotionLabel>> {
    use EmotionLabel::*;
    BTreeMap::from([
        (Modality::Text, BTreeSet::from([Anger, Disgust, Fear])),
        (Modality::Audio, BTreeSet::from([Joy, Neutral])),
        (Modality::Visual, BTreeSet::from([Sadness, Surprise])),
    ])
}

#[derive(Debug, Serialize)]
struct ClassScore {
    label: EmotionLabel,
    f1: f64,
    support: u64,
}

#[derive(Debug, Serialize)]
struct EmotionReport {
    examples: u64,
    unlabeled: usize,
    weighted_f1: f64,
    accuracy: f64,
    neutral_leakage: f64,
    per_class: Vec<ClassScore>,
    confusion: ConfusionMatrix,
}

impl EmotionReport {
    fn new(matrix: ConfusionMatrix, unlabeled: usize) -> Self {
        EmotionReport {
            examples: matrix.total(),
            unlabeled,
            weighted_f1: matrix.weighted_f1(),
            accuracy: matrix.accuracy(),
            neutral_leakage: neutral_leakage(&matrix),
            per_class: EmotionLabel::ALL
                .iter()
                .map(|&label| ClassScore {
                    label,
                    f1: matrix.class_f1(label),
                    support: matrix.row_sum(label),
                })
                .collect(),
            confusion: matrix,
        }
    }
}

fn gold_labels(convs: &[&Conversation]) -> BTreeMap<UtteranceKey, Option<EmotionLabel>> {
    convs
        .iter()
        .flat_map(|c| {
            c.utterances
                .iter()
                .map(|u| (UtteranceKey::new(&c.id, u.index), u.gold_emotion))
        })
        .collect()
}

fn emotion_report(convs: &[&Conversation], predictions: &[EmotionPrediction]) -> EmotionReport {
    let outcome = emotion_confusion(
        &gold_labels(convs),
        predictions.iter().map(|p| (&p.key, p.predicted)),
    );
    EmotionReport::new(outcome.matrix, outcome.unlabeled)
}

fn train_mer(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let Corpus::Split(split) = &corpus else {
        return Err(CliError::Config(
            "train-mer needs a corpus with train/dev/test splits".into(),
        ));
    };
    let tables = load_tables(cfg)?;
    let train_set = align_part(&split.train, &tables)?;
    let dev_set = align_part(&split.dev, &tables)?;
    let dims: BTreeMap<Modality, usize> = tables.iter().map(|t| (t.modality, t.dim)).collect();

    let model = init_model(&cfg.fusion, &dims)?;
    let (model, history) = fusion::train(model, &train_set, &dev_set, &cfg.fusion)?;
    let dev_predictions = predict(&model, &dev_set)?;
    let dev_convs: Vec<&Conversation> = split.dev.iter().collect();
    let report = emotion_report(&dev_convs, &dev_predictions);

    let out = Output::create(cfg)?;
    // Write under a temporary name so a failed run never leaves a partial checkpoint.
    let partial = out.path("model.json.partial");
    model.save(&partial)?;
    let final_path = out.path("model.json");
    std::fs::rename(&partial, &final_path).map_err(|e| CliError::io(&final_path, e))?;
    out.write("history.csv", csv_bytes(|b| history.write_csv(b)))?;
    out.write_json("dev_metrics.json", &report)?;
    out.write_config(cfg)?;
    println!(
        "trained {} epochs; best epoch {} with dev weighted F1 {:.4}",
        history.epochs.len(),
        history.best_epoch,
        report.weighted_f1
    );
    Ok(())
}

fn eval_mer(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let checkpoint = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Config("eval-mer needs a checkpoint".into()))?;
    let model = FusionModel::load(checkpoint)?;
    let tables = load_tables(cfg)?;
    let convs = corpus.part(cfg.eval_split);
    let dataset = align_part(convs, &tables)?;
    let predictions = predict(&model, &dataset)?;
    let conv_refs: Vec<&Conversation> = convs.iter().collect();
    let report = emotion_report(&conv_refs, &predictions);

    let out = Output::create(cfg)?;
    let mut buf = Vec::new();
    write_predictions(&predictions, &mut buf).expect("in-memory write");
    out.write("predictions.jsonl", buf)?;
    out.write_json("emotion_metrics.json", &report)?;
    out.write(
        "confusion.csv",
        csv_bytes(|b| report.confusion.write_csv(b)),
    )?;
    out.write_config(cfg)?;
    println!(
        "{} predictions; weighted F1 {:.4}; neutral leakage {:.4}",
        predictions.len(),
        report.weighted_f1,
        report.neutral_leakage
    );
    Ok(())
}

fn load_predictions(path: &Path) -> Result<Vec<EmotionPrediction>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_predictions(std::io::BufReader::new(file))
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// The emotion assigned to each utterance of the selected conversations.
fn target_emotions(
    cfg: &RunConfig,
    convs: &[&Conversation],
) -> Result<Vec<TargetEmotion>, CliError> {
    match cfg.emotion_source {
        EmotionSource::Gold => Ok(convs
            .iter()
            .flat_map(|c| {
                c.utterances.iter().filter_map(|u| {
                    u.gold_emotion.map(|emotion| TargetEmotion {
                        key: UtteranceKey::new(&c.id, u.index),
                        emotion,
                    })
                })
            })
            .collect()),
        EmotionSource::Predictions => {
            let path = cfg.predictions.as_deref().ok_or_else(|| {
                CliError::Config(
                    "no predictions file (set `predictions` or pass --gold-emotions)".into(),
                )
            })?;
            let ids: BTreeSet<&str> = convs.iter().map(|c| c.id.as_str()).collect();
            Ok(load_predictions(path)?
                .iter()
                .filter(|p| ids.contains(p.key.conversation_id.as_str()))
                .map(TargetEmotion::from)
                .collect())
        }
    }
}

fn make_client(cfg: &RunConfig) -> Result<Box<dyn GenerativeClient>, CliError> {
    match cfg.client.kind {
        ClientKind::Stub => {
            let path =
                cfg.client.stub_fixture.as_deref().ok_or_else(|| {
                    CliError::Config("stub client needs client.stub_fixture".into())
                })?;
            if !path.exists() {
                return Err(CliError::io(path, "file not found"));
            }
            Ok(Box::new(
                ScriptedClient::from_file(path).map_err(CliError::Validation)?,
            ))
        }
        ClientKind::Http => {
            let endpoint = cfg
                .client
                .endpoint
                .as_deref()
                .ok_or_else(|| CliError::Config("http client needs client.endpoint".into()))?;
            Ok(Box::new(HttpClient::new(
                endpoint,
                Duration::from_millis(cfg.client.timeout_ms),
            )))
        }
    }
}

fn run_extraction(
    cfg: &RunConfig,
    convs: &[&Conversation],
    emotions: &[TargetEmotion],
    client: Option<&dyn GenerativeClient>,
    window: usize,
) -> Result<ExtractionOutput, CliError> {
    if let Some(strategy) = cfg.heuristic {
        let mut pairs = PairSet::new();
        for conv in convs {
            let own: Vec<(u32, EmotionLabel)> = emotions
                .iter()
                .filter(|t| t.key.conversation_id == conv.id)
                .map(|t| (t.key.utterance, t.emotion))
                .collect();
            let found = heuristic_causes(conv, &own, strategy);
            if !found.is_empty() {
                pairs.insert(conv.id.clone(), found);
            }
        }
        let count = pairs.values().map(Vec::len).sum();
        return Ok(ExtractionOutput {
            decisions: Vec::new(),
            pairs,
            summary: crate::cause::ExtractionSummary {
                targets: emotions.iter().filter(|t| !t.emotion.is_neutral()).count(),
                pairs: count,
                ..Default::default()
            },
        });
    }
    let mut prompt = cfg.prompt.clone();
    prompt.window = window;
    let config = ExtractionConfig {
        prompt,
        threshold: cfg.tau,
        max_in_flight: cfg.client.max_in_flight,
    };
    let client = client.expect("client is built whenever no heuristic is selected");
    extract_causes(convs, emotions, client, &config)
        .map_err(|e| CliError::Validation(e.to_string()))
}

fn check_failures(cfg: &RunConfig, output: &ExtractionOutput) -> Result<(), CliError> {
    let s = &output.summary;
    if s.targets > 0
        && s.generation_failures as f64 / s.targets as f64 > cfg.client.max_failure_rate
    {
        return Err(CliError::ClientFailures {
            failures: s.generation_failures,
            targets: s.targets,
            limit: cfg.client.max_failure_rate,
        });
    }
    Ok(())
}

fn extract(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let convs: Vec<&Conversation> = corpus.part(cfg.eval_split).iter().collect();
    let emotions = target_emotions(cfg, &convs)?;
    let client = match cfg.heuristic {
        Some(_) => None,
        None => Some(make_client(cfg)?),
    };
    let output = run_extraction(cfg, &convs, &emotions, client.as_deref(), cfg.prompt.window)?;

    let out = Output::create(cfg)?;
    let mut buf = Vec::new();
    write_decisions(&output.decisions, &mut buf).expect("in-memory write");
    out.write("decisions.jsonl", buf)?;
    out.write_json("pairs.json", &output.pairs)?;
    out.write_json("extraction_summary.json", &output.summary)?;
    out.write_config(cfg)?;
    let s = &output.summary;
    println!(
        "{} targets, {} pairs, {} generation failures, {} empty responses",
        s.targets, s.pairs, s.generation_failures, s.empty_responses
    );
    check_failures(cfg, &output)
}

fn gold_pairs(convs: &[&Conversation]) -> PairSet {
    convs
        .iter()
        .filter(|c| !c.gold_pairs.is_empty())
        .map(|c| (c.id.clone(), c.gold_pairs.clone()))
        .collect()
}

fn load_pairs(cfg: &RunConfig) -> Result<PairSet, CliError> {
    let path = cfg
        .pairs
        .as_deref()
        .ok_or_else(|| CliError::Config("no pairs file (set `pairs` or pass --pairs)".into()))?;
    let raw = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&raw)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn eval_pairs(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let convs: Vec<&Conversation> = corpus.part(cfg.eval_split).iter().collect();
    let predicted = load_pairs(cfg)?;
    let report = score_pairs(&gold_pairs(&convs), &predicted);
    let out = Output::create(cfg)?;
    out.write_json("pair_metrics.json", &report)?;
    out.write_config(cfg)?;
    println!(
        "weighted F1 {:.4} (macro {:.4})",
        report.weighted_f1, report.macro_f1
    );
    Ok(())
}

fn ablate_window(cfg: &RunConfig) -> Result<(), CliError> {
    let mut seen = BTreeSet::new();
    if let Some(dup) = cfg.windows.iter().find(|w| !seen.insert(**w)) {
        return Err(CliError::Config(format!(
            "window {dup} is listed more than once"
        )));
    }
    if cfg.windows.is_empty() {
        return Err(CliError::Config("no window sizes given".into()));
    }
    let corpus = load_corpus(cfg)?;
    let convs: Vec<&Conversation> = corpus.part(cfg.eval_split).iter().collect();
    let emotions = target_emotions(cfg, &convs)?;
    let client = match cfg.heuristic {
        Some(_) => None,
        None => Some(make_client(cfg)?),
    };
    let gold = gold_pairs(&convs);

    let mut results = Vec::new();
    for &w in &cfg.windows {
        let output = run_extraction(cfg, &convs, &emotions, client.as_deref(), w)?;
        check_failures(cfg, &output)?;
        results.push((w, score_pairs(&gold, &output.pairs)));
    }
    let rows = ablation_curve(&results).map_err(|e| CliError::Config(e.to_string()))?;
    let out = Output::create(cfg)?;
    out.write("ablation.csv", csv_bytes(|b| write_ablation_csv(&rows, b)))?;
    let per_window: BTreeMap<usize, &MetricsReport> =
        results.iter().map(|(w, r)| (*w, r)).collect();
    out.write_json("ablation_metrics.json", &per_window)?;
    out.write_config(cfg)?;
    for row in &rows {
        println!("w={:<3} weighted F1 {:.4}", row.window, row.weighted_f1);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct FullReport<'a> {
    pairs: &'a MetricsReport,
    emotions: Option<&'a EmotionReport>,
    mismatches: &'a [ConversationMismatches],
}

fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let corpus = load_corpus(cfg)?;
    let convs: Vec<&Conversation> = corpus.part(cfg.eval_split).iter().collect();
    if convs.is_empty() {
        return Err(CliError::Validation(format!(
            "split `{}` has no conversations",
            cfg.eval_split
        )));
    }
    let predicted = load_pairs(cfg)?;
    let gold = gold_pairs(&convs);
    let metrics = score_pairs(&gold, &predicted);
    let emotions = match &cfg.predictions {
        Some(path) => Some(emotion_report(&convs, &load_predictions(path)?)),
        None => None,
    };
    let mut mismatches = pair_mismatches(&gold, &predicted);
    mismatches.truncate(cfg.worst_k);

    let text = render_report(&metrics, emotions.as_ref(), &mismatches, cfg.worst_k);
    let out = Output::create(cfg)?;
    out.write("report.txt", &text)?;
    out.write_json(
        "report.json",
        &FullReport {
            pairs: &metrics,
            emotions: emotions.as_ref(),
            mismatches: &mismatches,
        },
    )?;
    out.write_config(cfg)?;
    print!("{text}");
    Ok(())
}

fn render_report(
    metrics: &MetricsReport,
    emotions: Option<&EmotionReport>,
    mismatches: &[ConversationMismatches],
    worst_k: usize,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "== Emotion-cause pairs ==");
    let _ = writeln!(
        s,
        "gold pairs: {}  predicted pairs: {}  true positives: {}",
        metrics.gold_pairs, metrics.predicted_pairs, metrics.true_positives
    );
    let _ = writeln!(
        s,
        "weighted F1: {:.4}  macro F1: {:.4}",
        metrics.weighted_f1, metrics.macro_f1
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<10}{:>5}{:>5}{:>5}{:>11}{:>9}{:>9}{:>5}",
        "category", "tp", "fp", "fn", "precision", "recall", "f1", "n"
    );
    for c in &metrics.per_category {
        let _ = writeln!(
            s,
            "{:<10}{:>5}{:>5}{:>5}{:>11.4}{:>9.4}{:>9.4}{:>5}",
            c.category.as_str(),
            c.tp,
            c.fp,
            c.fn_,
            c.precision,
            c.recall,
            c.f1,
            c.n
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "== Emotion recognition ==");
    match emotions {
        Some(e) => {
            let _ = writeln!(
                s,
                "utterances: {}  weighted F1: {:.4}  accuracy: {:.4}",
                e.examples, e.weighted_f1, e.accuracy
            );
            let _ = writeln!(s, "neutral leakage: {:.4}", e.neutral_leakage);
            let _ = write!(s, "{}", e.confusion);
        }
        None => {
            let _ = writeln!(s, "(no emotion predictions supplied)");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "== Mismatches (worst {worst_k} conversations) ==");
    if mismatches.is_empty() {
        let _ = writeln!(s, "(none)");
    }
    for conv in mismatches {
        let _ = writeln!(s, "{}:", conv.conversation_id);
        for m in &conv.mismatches {
            let gold = m.gold.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            let pred = m
                .predicted
                .map(|p| p.to_string())
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "  {:<14} gold {:<22} predicted {}",
                m.kind.to_string(),
                gold,
                pred
            );
        }
    }
    s
}
