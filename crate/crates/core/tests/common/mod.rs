#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use mer_mce::corpus::{Conversation, EmotionLabel, Utterance};
use mer_mce::features::{
    align, synth_features, AlignPolicy, AlignedDataset, FeatureTable, Modality, SynthOptions,
};

/// Conversations of ten utterances whose labels cycle through all seven
/// classes, so any prefix of `n` utterances is as balanced as possible.
pub fn balanced_corpus(prefix: &str, utterances: usize, offset: usize) -> Vec<Conversation> {
    let mut convs = Vec::new();
    let mut made = 0;
    while made < utterances {
        let len = (utterances - made).min(10);
        let id = format!("{prefix}{}", convs.len() + 1);
        let utterances = (0..len)
            .map(|i| Utterance {
                index: i as u32 + 1,
                speaker: if i % 2 == 0 { "A".into() } else { "B".into() },
                text: format!("utterance {}", made + i),
                gold_emotion: EmotionLabel::from_index((made + i + offset) % 7),
                media: None,
            })
            .collect();
        convs.push(Conversation {
            id,
            utterances,
            gold_pairs: vec![],
        });
        made += len;
    }
    convs
}

pub fn synth_dataset(
    convs: &[Conversation],
    modalities: &[Modality],
    dims: &BTreeMap<Modality, usize>,
    signal: f64,
    seed: u64,
    visible: Option<&BTreeMap<Modality, BTreeSet<EmotionLabel>>>,
) -> AlignedDataset {
    let tables: Vec<FeatureTable> = modalities
        .iter()
        .map(|&m| {
            let mut opts = SynthOptions::new(dims[&m], signal, seed);
            opts.visible = visible.map(|v| v[&m].clone());
            synth_features(convs, m, &opts).unwrap()
        })
        .collect();
    let refs: Vec<&FeatureTable> = tables.iter().collect();
    align(convs, &refs, AlignPolicy::Strict).unwrap()
}

pub fn default_dims() -> BTreeMap<Modality, usize> {
    Modality::ALL
        .iter()
        .map(|&m| (m, m.default_dim()))
        .collect()
}

/// Disjoint class subsets per modality; together they cover all seven classes.
pub fn complementary_visibility() -> BTreeMap<Modality, BTreeSet<EmotionLabel>> {
    use EmotionLabel::*;
    BTreeMap::from([
        (Modality::Text, BTreeSet::from([Anger, Disgust, Fear])),
        (Modality::Audio, BTreeSet::from([Joy, Neutral])),
        (Modality::Visual, BTreeSet::from([Sadness, Surprise])),
    ])
}

// ---------------------------------------------------------------------------
// Fusion gradient check

use mer_mce::corpus::{EmotionCausePair, UtteranceKey};
use mer_mce::features::Example;
use mer_mce::fusion::{init_model, loss_and_grads, FusionConfig, FusionModel, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small input widths so every parameter can be perturbed in turn.
pub fn gradcheck_dims() -> BTreeMap<Modality, usize> {
    BTreeMap::from([
        (Modality::Text, 6),
        (Modality::Audio, 5),
        (Modality::Visual, 4),
    ])
}

/// Two random labeled examples; the second lacks the visual modality so the
/// masked softmax path is exercised too.
pub fn random_batch(seed: u64, dims: &BTreeMap<Modality, usize>) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..2u32)
        .map(|i| {
            let features = dims
                .iter()
                .filter(|(m, _)| !(i == 1 && **m == Modality::Visual))
                .map(|(&m, &d)| (m, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            Example {
                key: UtteranceKey::new("g", i + 1),
                features,
                label: EmotionLabel::from_index(rng.random_range(0..7)),
            }
        })
        .collect()
}

fn batch_loss(model: &FusionModel, batch: &[&Example], mode: Mode, rng_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    loss_and_grads(model, batch, mode, &mut rng).unwrap().0
}

/// Relative error used by the gradient check. Entries where both gradients are
/// below 1e-7 in magnitude are compared absolutely, since their finite
/// difference is dominated by rounding.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of a freshly initialized model. In train mode the
/// dropout mask is held fixed by reseeding the rng for each evaluation.
pub fn gradient_check(seed: u64, mode: Mode) -> f64 {
    const EPS: f64 = 1e-5;
    let dims = gradcheck_dims();
    let config = FusionConfig {
        common_dim: 8,
        seed,
        ..FusionConfig::default()
    };
    let mut model = init_model(&config, &dims).unwrap();
    // Non-zero biases so their gradients are checked away from the init point.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in model.tensors_mut() {
        if name.ends_with("bias") {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let examples = random_batch(seed, &dims);
    let batch: Vec<&Example> = examples.iter().collect();
    let rng_seed = seed + 7;
    let (_, grads) = {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        loss_and_grads(&model, &batch, mode, &mut rng).unwrap()
    };
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, t)| t.to_vec())
        .collect();

    let mut worst: f64 = 0.0;
    for (ti, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let original = model.tensors()[ti].1[j];
            model.tensors_mut()[ti].1[j] = original + EPS;
            let up = batch_loss(&model, &batch, mode, rng_seed);
            model.tensors_mut()[ti].1[j] = original - EPS;
            let down = batch_loss(&model, &batch, mode, rng_seed);
            model.tensors_mut()[ti].1[j] = original;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * EPS)));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Brute-force pair scoring

/// Scores by enumerating every one-to-one assignment of predicted pairs to
/// identical gold pairs and keeping the assignment with the most matches.
pub fn brute_force_weighted_f1(
    gold: &[(String, EmotionCausePair)],
    pred: &[(String, EmotionCausePair)],
) -> f64 {
    fn search(
        gold: &[(String, EmotionCausePair)],
        pred: &[(String, EmotionCausePair)],
        i: usize,
        used: &mut Vec<bool>,
        tp: &mut [usize; 7],
        best: &mut (usize, [usize; 7]),
    ) {
        if i == pred.len() {
            let total: usize = tp.iter().sum();
            if total > best.0 {
                *best = (total, *tp);
            }
            return;
        }
        search(gold, pred, i + 1, used, tp, best);
        for g in 0..gold.len() {
            if !used[g] && gold[g] == pred[i] {
                used[g] = true;
                tp[pred[i].1.emotion.index()] += 1;
                search(gold, pred, i + 1, used, tp, best);
                tp[pred[i].1.emotion.index()] -= 1;
                used[g] = false;
            }
        }
    }
    let mut best = (0, [0; 7]);
    search(
        gold,
        pred,
        0,
        &mut vec![false; gold.len()],
        &mut [0; 7],
        &mut best,
    );
    let tp = best.1;

    let mut weighted = 0.0;
    let mut total_n = 0usize;
    for label in EmotionLabel::SCORED {
        let c = label.index();
        let n = gold.iter().filter(|(_, p)| p.emotion == label).count();
        let predicted = pred.iter().filter(|(_, p)| p.emotion == label).count();
        let p = if predicted == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted as f64
        };
        let r = if n == 0 { 0.0 } else { tp[c] as f64 / n as f64 };
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        weighted += n as f64 * f;
        total_n += n;
    }
    if total_n == 0 {
        0.0
    } else {
        weighted / total_n as f64
    }
}

pub fn to_pair_set(
    pairs: &[(String, EmotionCausePair)],
) -> BTreeMap<String, Vec<EmotionCausePair>> {
    let mut out: BTreeMap<String, Vec<EmotionCausePair>> = BTreeMap::new();
    for (id, p) in pairs {
        out.entry(id.clone()).or_default().push(*p);
    }
    out
}

/// A random instance over a small universe so that collisions and duplicates
/// are common.
/// Pairs tagged with their conversation id.
pub type TaggedPairs = Vec<(String, EmotionCausePair)>;

pub fn random_pair_instance(rng: &mut ChaCha8Rng) -> (TaggedPairs, TaggedPairs) {
    let draw = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(0..=6);
        (0..n)
            .map(|_| {
                let id = format!("c{}", rng.random_range(0..2));
                let emotion = EmotionLabel::SCORED[rng.random_range(0..3)];
                let pair = EmotionCausePair::new(
                    rng.random_range(1..=3),
                    emotion,
                    rng.random_range(1..=2),
                );
                (id, pair)
            })
            .collect::<Vec<_>>()
    };
    let gold = draw(rng);
    let pred = draw(rng);
    (gold, pred)
}

// ---------------------------------------------------------------------------
// Corpus fixtures

pub fn utt(index: u32, speaker: &str, text: &str, emotion: EmotionLabel) -> Utterance {
    Utterance {
        index,
        speaker: speaker.into(),
        text: text.into(),
        gold_emotion: Some(emotion),
        media: None,
    }
}

/// The four qualitative samples: a correct pair, an abstention, a future
/// cause, and a spurious pair on a neutral target. Returns the corpus and the
/// predicted pairs.
pub fn qualitative_samples() -> (Vec<Conversation>, BTreeMap<String, Vec<EmotionCausePair>>) {
    use EmotionLabel::*;
    let p = EmotionCausePair::new;
    let convs = vec![
        Conversation {
            id: "qs-1".into(),
            utterances: vec![
                utt(1, "Ross", "So what did you name it?", Neutral),
                utt(2, "Rachel", "Guess.", Neutral),
                utt(3, "Ross", "Fluffy?", Neutral),
                utt(4, "Rachel", "Cat.", Neutral),
                utt(5, "Ross", "Yes! You are so smart! I love you.", Joy),
                utt(6, "Rachel", "I love you too.", Joy),
            ],
            gold_pairs: vec![p(6, Joy, 5)],
        },
        Conversation {
            id: "qs-2".into(),
            utterances: vec![
                utt(1, "Phoebe", "I have no idea what you just said.", Neutral),
                utt(2, "Monica", "Put Joey on the phone.", Anger),
            ],
            gold_pairs: vec![p(2, Anger, 1)],
        },
        Conversation {
            id: "qs-3".into(),
            utterances: vec![
                utt(1, "Chandler", "Hey.", Neutral),
                utt(
                    2,
                    "Joey",
                    "You know what? It really creeps me out.",
                    Disgust,
                ),
                utt(3, "Chandler", "Sorry.", Neutral),
                utt(4, "Joey", "I am so excited!", Joy),
                utt(5, "Chandler", "We got the tickets!", Joy),
            ],
            gold_pairs: vec![p(4, Joy, 5)],
        },
        Conversation {
            id: "qs-4".into(),
            utterances: (1..=8)
                .map(|i| {
                    utt(
                        i,
                        if i % 2 == 0 { "Rachel" } else { "Ross" },
                        &filler(4, i),
                        Neutral,
                    )
                })
                .chain([
                    utt(9, "Ross", "Sure. Okay.", Neutral),
                    utt(10, "Rachel", "Uh, are you crazy? Are you insane?", Surprise),
                    utt(
                        11,
                        "Ross",
                        "Yeah, I just know it would make me happy.",
                        Neutral,
                    ),
                ])
                .collect(),
            gold_pairs: vec![],
        },
    ];
    let predicted = BTreeMap::from([
        ("qs-1".to_string(), vec![p(6, Joy, 5)]),
        ("qs-3".to_string(), vec![p(4, Joy, 4)]),
        ("qs-4".to_string(), vec![p(11, Joy, 11)]),
    ]);
    (convs, predicted)
}

fn filler(conv: usize, i: u32) -> String {
    format!("f{conv}a{i} f{conv}b{i} f{conv}c{i}")
}

/// Conversations of eleven utterances whose target U11 (joy) has its cause
/// planted 4 or 5 utterances back. The scripted response paraphrases the
/// cause; in most conversations a distractor 7 or 9 back matches the
/// paraphrase exactly, so wider windows pick it instead. Returns the corpus
/// and the stub fixture.
pub fn planted_window_fixture() -> (Vec<Conversation>, BTreeMap<UtteranceKey, String>) {
    // (cause distance, distractor distance)
    let layout = [
        (4, Some(7)),
        (5, Some(9)),
        (4, Some(9)),
        (5, Some(7)),
        (4, None),
        (5, None),
    ];
    let mut convs = Vec::new();
    let mut responses = BTreeMap::new();
    for (c, (cause_back, distractor_back)) in layout.into_iter().enumerate() {
        let id = format!("w{}", c + 1);
        let cause_idx = 11 - cause_back;
        let cause_text = format!("kite{c} red{c} sky{c} wind{c} string{c}");
        let response = format!("kite{c} red{c} sky{c} lake{c}");
        let utterances = (1..=11)
            .map(|i| {
                let speaker = if i % 2 == 0 { "B" } else { "A" };
                if i == 11 {
                    utt(i, speaker, &format!("t{c} hooray{c}"), EmotionLabel::Joy)
                } else if i == cause_idx {
                    utt(i, speaker, &cause_text, EmotionLabel::Neutral)
                } else if distractor_back.is_some_and(|d| i == 11 - d) {
                    utt(i, speaker, &response, EmotionLabel::Neutral)
                } else {
                    utt(i, speaker, &filler(c, i), EmotionLabel::Neutral)
                }
            })
            .collect();
        convs.push(Conversation {
            id: id.clone(),
            utterances,
            gold_pairs: vec![EmotionCausePair::new(11, EmotionLabel::Joy, cause_idx)],
        });
        responses.insert(UtteranceKey::new(id, 11), response);
    }
    (convs, responses)
}

/// Conversations whose gold causes all lie within two utterances of their
/// targets (self-causes included). With `future_cause`, one extra pair points
/// at a later utterance.
pub fn oracle_fixture(future_cause: bool) -> Vec<Conversation> {
    use EmotionLabel::*;
    let p = EmotionCausePair::new;
    let emotions = [
        Neutral, Joy, Anger, Neutral, Sadness, Surprise, Neutral, Fear, Disgust,
    ];
    let mut convs: Vec<Conversation> = (0..4)
        .map(|c| {
            let utterances: Vec<Utterance> = (1..=9)
                .map(|i| {
                    let speaker = if i % 2 == 0 { "B" } else { "A" };
                    let emotion = emotions[(i as usize - 1 + c) % emotions.len()];
                    utt(i, speaker, &filler(c, i), emotion)
                })
                .collect();
            let gold_pairs = utterances
                .iter()
                .filter_map(|u| {
                    let e = u.gold_emotion.unwrap();
                    (!e.is_neutral())
                        .then(|| p(u.index, e, u.index.saturating_sub(u.index % 3).max(1)))
                })
                .collect();
            Conversation {
                id: format!("o{}", c + 1),
                utterances,
                gold_pairs,
            }
        })
        .collect();
    if future_cause {
        let conv = &mut convs[0];
        let target = conv
            .utterances
            .iter()
            .find(|u| !u.gold_emotion.unwrap().is_neutral())
            .unwrap();
        let (t, e) = (target.index, target.gold_emotion.unwrap());
        conv.gold_pairs.retain(|gp| gp.emotion_utterance != t);
        conv.gold_pairs.push(p(t, e, t + 2));
    }
    convs
}

/// Stub responses quoting each target's gold cause text.
pub fn oracle_responses(convs: &[Conversation]) -> BTreeMap<UtteranceKey, String> {
    convs
        .iter()
        .flat_map(|c| {
            c.gold_pairs.iter().map(move |gp| {
                let text = c.utterance(gp.cause_utterance).unwrap().text.clone();
                (UtteranceKey::new(&c.id, gp.emotion_utterance), text)
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CLI helpers

use std::path::{Path, PathBuf};
use std::process::Output;

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_path_buf()
}

pub fn split_json(
    train: &[Conversation],
    dev: &[Conversation],
    test: &[Conversation],
) -> serde_json::Value {
    serde_json::json!({ "train": train, "dev": dev, "test": test })
}

pub fn stub_json(responses: &BTreeMap<UtteranceKey, String>) -> serde_json::Value {
    let map: BTreeMap<String, &String> =
        responses.iter().map(|(k, v)| (k.to_string(), v)).collect();
    serde_json::to_value(map).unwrap()
}

pub fn cli<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    std::process::Command::new(env!("CARGO_BIN_EXE_mer-mce"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Every file under `dir`, relative path to contents.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}
