//! Seeded synthetic corpora for smoke tests and small-scale learning checks.

use crate::data::CsvRecord;
use crate::error::{Error, Result};
use crate::tensor::Rng;

const BACKGROUND: &[u8] = b"abcdefghijklmnop";

/// Trigram planted in every document of class `k` (k < 8).
pub fn planted_trigram(class: usize) -> &'static str {
    ["qvx", "wjz", "ryk", "tsu", "QVX", "WJZ", "RYK", "TSU"][class]
}

fn background_word(rng: &mut Rng) -> String {
    let len = 2 + rng.below(6);
    (0..len).map(|_| BACKGROUND[rng.below(BACKGROUND.len())] as char).collect()
}

/// `n` documents alternating over `classes` labels. Each is 8–16 words drawn
/// from letters a–p with the class trigram inserted at a random word position.
pub fn separable_corpus(n: usize, classes: usize, seed: u64) -> Result<Vec<CsvRecord>> {
    if !(2..=8).contains(&classes) {
        return Err(Error::Parameter(format!("separable corpus supports 2..=8 classes, got {classes}")));
    }
    let mut rng = Rng::new(seed);
    Ok((0..n)
        .map(|i| {
            let label = i % classes;
            let words = 8 + rng.below(9);
            let at = rng.below(words + 1);
            let mut text: Vec<String> = (0..words).map(|_| background_word(&mut rng)).collect();
            text.insert(at, planted_trigram(label).to_string());
            CsvRecord {
                line: i + 1,
                label,
                fields: vec![text.join(" ")],
            }
        })
        .collect())
}

/// Topic-style corpus: every class owns a lexicon of 40 words and all classes
/// share a common lexicon of 120. Each body word comes from the class lexicon
/// with probability `signal`, otherwise from the shared one. Rows carry a
/// short title and a body, like news-style datasets.
pub fn topic_corpus(n: usize, classes: usize, signal: f64, seed: u64) -> Result<Vec<CsvRecord>> {
    if classes < 2 {
        return Err(Error::Parameter(format!("need at least 2 classes, got {classes}")));
    }
    if !(0.0..=1.0).contains(&signal) {
        return Err(Error::Parameter(format!("signal must lie in [0, 1], got {signal}")));
    }
    let mut lex_rng = Rng::with_stream(seed, 1);
    let word = |rng: &mut Rng| -> String {
        let len = 3 + rng.below(6);
        (0..len).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
    };
    let shared: Vec<String> = (0..120).map(|_| word(&mut lex_rng)).collect();
    let lexicons: Vec<Vec<String>> = (0..classes)
        .map(|_| (0..40).map(|_| word(&mut lex_rng)).collect())
        .collect();
    let mut rng = Rng::with_stream(seed, 2);
    let pick = |rng: &mut Rng, label: usize| -> String {
        if rng.uniform() < signal {
            lexicons[label][rng.below(40)].clone()
        } else {
            shared[rng.below(shared.len())].clone()
        }
    };
    Ok((0..n)
        .map(|i| {
            let label = i % classes;
            let title: Vec<String> = (0..3 + rng.below(3)).map(|_| pick(&mut rng, label)).collect();
            let body: Vec<String> = (0..15 + rng.below(16)).map(|_| pick(&mut rng, label)).collect();
            CsvRecord {
                line: i + 1,
                label,
                fields: vec![title.join(" "), format!("{}.", body.join(" "))],
            }
        })
        .collect())
}
