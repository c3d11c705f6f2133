use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Lowercases, deletes every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Token-overlap F1 over the sets of normalized tokens.
pub fn token_f1(response: &str, candidate: &str) -> f64 {
    set_f1(&token_set(response), &token_set(candidate))
}

fn token_set(text: &str) -> BTreeSet<String> {
    normalize(text).into_iter().collect()
}

fn set_f1(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let common = a.intersection(b).count();
    if common == 0 {
        return 0.0;
    }
    // Equal to 2PR/(P+R) with P = common/|a|, R = common/|b|; the integer form
    // makes mathematically equal scores compare equal.
    (2 * common) as f64 / (a.len() + b.len()) as f64
}

/// An empty response, or one that normalizes to `none`, means no cause.
pub fn is_no_cause(response: &str) -> bool {
    let tokens = normalize(response);
    tokens.is_empty() || tokens == ["none"]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionStatus {
    Matched,
    BelowThreshold,
    NoCause,
    GenerationFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseDecision {
    pub conversation_id: String,
    pub target: u32,
    pub cause: Option<u32>,
    pub score: f64,
    pub matched_text: Option<String>,
    pub status: DecisionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CauseDecision {
    pub fn failed(conversation_id: &str, target: u32, error: String) -> Self {
        CauseDecision {
            conversation_id: conversation_id.to_string(),
            target,
            cause: None,
            score: 0.0,
            matched_text: None,
            status: DecisionStatus::GenerationFailed,
            error: Some(error),
        }
    }
}

/// Maps a generated response onto the best-matching candidate utterance.
///
/// Candidates are `(index, text)` in conversation order, the target last. The
/// highest token F1 wins; equal scores go to the candidate nearest the target.
/// Scores below `threshold` abstain.
pub fn match_cause(
    conversation_id: &str,
    target: u32,
    response: &str,
    candidates: &[(u32, &str)],
    threshold: f64,
) -> CauseDecision {
    let mut decision = CauseDecision {
        conversation_id: conversation_id.to_string(),
        target,
        cause: None,
        score: 0.0,
        matched_text: None,
        status: DecisionStatus::NoCause,
        error: None,
    };
    if is_no_cause(response) || candidates.is_empty() {
        return decision;
    }
    let response_tokens = token_set(response);
    let mut best: Option<(f64, u32, &str)> = None;
    for &(index, text) in candidates.iter().rev() {
        let score = set_f1(&response_tokens, &token_set(text));
        if best.is_none_or(|(s, _, _)| score > s) {
            best = Some((score, index, text));
        }
    }
    let (score, index, text) = best.expect("candidates are non-empty");
    decision.score = score;
    if score >= threshold && score > 0.0 {
        decision.cause = Some(index);
        decision.matched_text = Some(text.to_string());
        decision.status = DecisionStatus::Matched;
    } else {
        decision.status = DecisionStatus::BelowThreshold;
    }
    decision
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const U5: &str = "Yes! You are so smart! I love you.";
    const U6: &str = "I love you too.";

    #[test]
    fn normalization() {
        assert_eq!(
            normalize("Yes! You are so SMART!"),
            vec!["yes", "you", "are", "so", "smart"]
        );
        assert_eq!(normalize("  ...  "), Vec::<String>::new());
        assert_eq!(
            normalize("Uh , are you crazy?"),
            vec!["uh", "are", "you", "crazy"]
        );
    }

    #[test]
    fn exact_response_matches_with_score_one() {
        let d = match_cause("t1", 6, U5, &[(4, "Cat."), (5, U5), (6, U6)], 0.3);
        assert_eq!(d.cause, Some(5));
        assert_eq!(d.score, 1.0);
        assert_eq!(d.matched_text.as_deref(), Some(U5));
        assert_eq!(d.status, DecisionStatus::Matched);
    }

    #[test]
    fn sentinel_abstains() {
        for response in ["none", "None.", "  NONE ", "", "?!"] {
            let d = match_cause(
                "t2",
                2,
                response,
                &[
                    (1, "I have no idea what you just said."),
                    (2, "Put Joey on the phone."),
                ],
                0.0,
            );
            assert_eq!(d.cause, None, "{response:?}");
            assert_eq!(d.score, 0.0);
            assert_eq!(d.status, DecisionStatus::NoCause);
        }
    }

    #[test]
    fn hand_computed_token_f1() {
        // U5 has 7 distinct tokens, 3 shared: F1 = 2*3/(3+7) = 0.6.
        assert!((token_f1("I love you", U5) - 0.6).abs() < 1e-15);
        // U6 has 4 tokens, 3 shared: F1 = 6/7.
        assert!((token_f1("I love you", U6) - 6.0 / 7.0).abs() < 1e-15);
        let d = match_cause("t1", 6, "I love you", &[(5, U5), (6, U6)], 0.3);
        assert_eq!(d.cause, Some(6));
        assert!((d.score - 0.857).abs() < 1e-3);
    }

    #[test]
    fn ties_prefer_the_most_recent_candidate() {
        let d = match_cause(
            "c",
            3,
            "hello there",
            &[(1, "hello there"), (2, "hello there"), (3, "bye")],
            0.3,
        );
        assert_eq!(d.cause, Some(2));
    }

    #[test]
    fn below_threshold_abstains() {
        let d = match_cause(
            "c",
            2,
            "completely unrelated words",
            &[(1, "Cat."), (2, "Dog.")],
            0.3,
        );
        assert_eq!(d.cause, None);
        assert_eq!(d.status, DecisionStatus::BelowThreshold);
    }

    proptest! {
        #[test]
        fn score_in_unit_interval_and_one_for_equal_text(
            response in "[a-c ]{0,12}",
            texts in proptest::collection::vec("[a-c .!]{0,12}", 1..5),
            tau in 0.0f64..1.0,
        ) {
            let candidates: Vec<(u32, &str)> = texts.iter().enumerate().map(|(i, t)| (i as u32 + 1, t.as_str())).collect();
            let d = match_cause("p", candidates.len() as u32, &response, &candidates, tau);
            prop_assert!((0.0..=1.0).contains(&d.score));
            if let Some(c) = d.cause {
                prop_assert!(candidates.iter().any(|(i, _)| *i == c));
                prop_assert!(d.score >= tau);
            }
            for (_, text) in &candidates {
                if !is_no_cause(text) && normalize(text) == normalize(&response) {
                    prop_assert_eq!(d.score, 1.0);
                }
            }
            if d.score == 1.0 {
                let r: BTreeSet<String> = normalize(&response).into_iter().collect();
                prop_assert!(candidates.iter().any(|(_, t)| normalize(t).into_iter().collect::<BTreeSet<_>>() == r));
            }
        }

        #[test]
        fn raising_threshold_never_adds_a_cause(
            response in "[a-d ]{1,12}",
            texts in proptest::collection::vec("[a-d ]{1,12}", 1..5),
            lo in 0.0f64..1.0,
            hi in 0.0f64..1.0,
        ) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let candidates: Vec<(u32, &str)> = texts.iter().enumerate().map(|(i, t)| (i as u32 + 1, t.as_str())).collect();
            let low = match_cause("p", 1, &response, &candidates, lo);
            let high = match_cause("p", 1, &response, &candidates, hi);
            prop_assert!(high.cause.is_none() || high.cause == low.cause);
        }
    }
}
