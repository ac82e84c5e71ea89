use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VoteOutcome {
    /// Index of the earliest candidate carrying the majority label.
    Winner {
        index: usize,
        label: String,
    },
    Inconsistent {
        reason: String,
    },
}

/// Strict-majority vote over the labels extracted from each candidate.
///
/// A label wins when more than half of *all* candidates carry it; the
/// earliest such candidate is returned.
pub fn majority_vote(
    candidates: &[String],
    extract: impl Fn(&str) -> Option<String>,
) -> (Vec<Option<String>>, VoteOutcome) {
    let labels: Vec<Option<String>> = candidates.iter().map(|c| extract(c)).collect();
    if candidates.is_empty() {
        return (
            labels,
            VoteOutcome::Inconsistent {
                reason: "no candidates".into(),
            },
        );
    }
    if labels.iter().all(Option::is_none) {
        return (
            labels,
            VoteOutcome::Inconsistent {
                reason: "no emotion label could be extracted".into(),
            },
        );
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for l in labels.iter().flatten() {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    let winner = labels.iter().enumerate().find_map(|(i, l)| {
        let l = l.as_deref()?;
        (2 * counts[l] > candidates.len()).then(|| (i, l.to_string()))
    });
    let outcome = match winner {
        Some((index, label)) => VoteOutcome::Winner { index, label },
        None => VoteOutcome::Inconsistent {
            reason: "no majority".into(),
        },
    };
    (labels, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(s: &str) -> Option<String> {
        (!s.is_empty()).then(|| s.to_string())
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_of_three() {
        let (_, out) = majority_vote(&strs(&["happy", "happy", "sad"]), ident);
        assert_eq!(
            out,
            VoteOutcome::Winner {
                index: 0,
                label: "happy".into()
            }
        );
        let (_, out) = majority_vote(&strs(&["sad", "happy", "happy"]), ident);
        assert_eq!(
            out,
            VoteOutcome::Winner {
                index: 1,
                label: "happy".into()
            }
        );
    }

    #[test]
    fn no_majority() {
        let (_, out) = majority_vote(&strs(&["a", "b", "c"]), ident);
        assert!(matches!(out, VoteOutcome::Inconsistent { .. }));
        // A tie is not a strict majority.
        let (_, out) = majority_vote(&strs(&["a", "a", "b", "b"]), ident);
        assert!(matches!(out, VoteOutcome::Inconsistent { .. }));
    }

    #[test]
    fn unanimity_picks_first() {
        let (_, out) = majority_vote(&strs(&["x", "x", "x"]), ident);
        assert_eq!(
            out,
            VoteOutcome::Winner {
                index: 0,
                label: "x".into()
            }
        );
    }

    #[test]
    fn extraction_failures_count_against_majority() {
        let (labels, out) = majority_vote(&strs(&["a", "", ""]), ident);
        assert_eq!(labels, vec![Some("a".into()), None, None]);
        assert!(matches!(out, VoteOutcome::Inconsistent { .. }));
        let (_, out) = majority_vote(&strs(&["", ""]), ident);
        assert_eq!(
            out,
            VoteOutcome::Inconsistent {
                reason: "no emotion label could be extracted".into()
            }
        );
    }
}
