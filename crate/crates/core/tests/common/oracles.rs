//! Brute-force reference implementations, written independently of the
//! library code they check.

use rand::Rng;

/// Mean recall over the classes present in `labels`, via a dense confusion matrix.
pub fn uar(preds: &[usize], labels: &[usize]) -> f64 {
    let k = preds.iter().chain(labels).max().map_or(0, |m| m + 1);
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    let mut total = 0.0;
    let mut present = 0;
    for (c, row) in m.iter().enumerate() {
        let support: u64 = row.iter().sum();
        if support > 0 {
            total += row[c] as f64 / support as f64;
            present += 1;
        }
    }
    total / present as f64
}

/// `Σ_c support_c · recall_c / N`.
pub fn war(preds: &[usize], labels: &[usize]) -> f64 {
    let k = preds.iter().chain(labels).max().map_or(0, |m| m + 1);
    let mut acc = 0.0;
    for c in 0..k {
        let support = labels.iter().filter(|&&l| l == c).count();
        if support == 0 {
            continue;
        }
        let hits = preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| l == c && p == c)
            .count();
        acc += support as f64 * (hits as f64 / support as f64);
    }
    acc / labels.len() as f64
}

/// Sample covariance over the product of sample standard deviations.
pub fn pcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1.0);
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sx * sy)
}

/// Strict-majority winner: the first candidate whose label more than half
/// of all candidates share.
pub fn vote(labels: &[Option<String>]) -> Option<(usize, String)> {
    for (i, l) in labels.iter().enumerate() {
        let Some(l) = l else { continue };
        let count = labels
            .iter()
            .filter(|o| o.as_deref() == Some(l.as_str()))
            .count();
        if 2 * count > labels.len() {
            return Some((i, l.clone()));
        }
    }
    None
}

pub const EMOTION_WORDS: [(&str, &str); 8] = [
    ("happy", "happy"),
    ("joyful", "happy"),
    ("sad", "sad"),
    ("gloomy", "sad"),
    ("angry", "angry"),
    ("furious", "angry"),
    ("calm", "calm"),
    ("afraid", "fearful"),
];
pub const AFFECT_WORDS: [&str; 4] = ["tension", "mood", "arousal", "valence"];
pub const NEUTRAL_WORDS: [&str; 6] = ["the", "speaker", "room", "slowly", "looks", "window"];

/// A random caption from the three word pools; may be empty.
pub fn random_caption(r: &mut impl Rng) -> String {
    let len = r.gen_range(0..6);
    let words: Vec<&str> = (0..len)
        .map(|_| match r.gen_range(0..10) {
            0..=2 => EMOTION_WORDS[r.gen_range(0..EMOTION_WORDS.len())].0,
            3 => AFFECT_WORDS[r.gen_range(0..AFFECT_WORDS.len())],
            _ => NEUTRAL_WORDS[r.gen_range(0..NEUTRAL_WORDS.len())],
        })
        .collect();
    words.join(" ")
}

/// Emotion label of the first emotion word, by the pool table.
pub fn label_of(caption: &str) -> Option<String> {
    caption.split(' ').find_map(|w| {
        EMOTION_WORDS
            .iter()
            .find(|(k, _)| *k == w)
            .map(|(_, l)| l.to_string())
    })
}

/// Kept by the relevance filter: contains an emotion or affect word.
pub fn relevant(caption: &str) -> bool {
    caption
        .split(' ')
        .any(|w| EMOTION_WORDS.iter().any(|(k, _)| *k == w) || AFFECT_WORDS.contains(&w))
}
