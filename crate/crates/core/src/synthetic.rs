//! Toy corpora with planted structure, used by the test suites and handy for
//! smoke-testing the pipeline end to end on one CPU core.
//!
//! All generators share a small single-letter word alphabet so a model
//! pretrained on the copy corpus transfers to the downstream tasks:
//!
//! * copy corpus — each document repeats one word type, so a masked word is
//!   recoverable from any visible neighbor in its segment;
//! * tagging — words `a`/`b` open a two-token entity (`B-ENT` on the trigger,
//!   `I-ENT` on whatever follows), everything else is `O`; the second token's
//!   label depends on its left neighbor, not on the token itself;
//! * relations — two single-token spans, labeled by the alphabetic order of
//!   the two words (direction-sensitive by construction);
//! * classification — label 1 iff the text contains the word `a`.

use rand::Rng;

use crate::data::{ClassificationRecord, RelationRecord, TaggedSentence};
use crate::rng::StreamKey;
use crate::wordpiece::Vocabulary;

pub const ALPHABET: [&str; 16] = [
    "a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p",
];

/// Entity-opening trigger words for the tagging grammar.
pub const TRIGGERS: [&str; 2] = ["a", "b"];

/// A vocabulary covering the alphabet directly (word-initial single letters).
pub fn letter_vocab() -> Vocabulary {
    Vocabulary::with_entries(ALPHABET.iter().map(|s| s.to_string()))
        .expect("static entries are valid")
}

/// Documents of one repeated word type, one document per line.
pub fn copy_corpus(n_docs: usize, words_per_doc: usize, seed: u64) -> Vec<String> {
    let mut rng = StreamKey::root(seed).child("copy-corpus").rng();
    (0..n_docs)
        .map(|_| {
            let w = ALPHABET[rng.gen_range(0..ALPHABET.len())];
            vec![w; words_per_doc].join(" ")
        })
        .collect()
}

/// Applies the tagging grammar to a token sequence.
pub fn plant_tags(tokens: &[String]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); tokens.len()];
    let mut i = 0;
    while i < tokens.len() {
        if TRIGGERS.contains(&tokens[i].as_str()) {
            tags[i] = "B-ENT".to_string();
            if i + 1 < tokens.len() {
                tags[i + 1] = "I-ENT".to_string();
                i += 1;
            }
        }
        i += 1;
    }
    tags
}

/// Sentences over the alphabet with grammar tags; `noise` flips each tag to a
/// uniform random one with the given probability (training noise only).
pub fn tagging_dataset(
    n_sentences: usize,
    sentence_len: usize,
    noise: f64,
    seed: u64,
) -> Vec<TaggedSentence> {
    let mut rng = StreamKey::root(seed).child("ner-data").rng();
    let tag_choices = ["B-ENT", "I-ENT", "O"];
    (0..n_sentences)
        .map(|_| {
            let tokens: Vec<String> = (0..sentence_len)
                .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string())
                .collect();
            let mut tags = plant_tags(&tokens);
            if noise > 0.0 {
                for t in &mut tags {
                    if rng.gen::<f64>() < noise {
                        *t = tag_choices[rng.gen_range(0..3)].to_string();
                    }
                }
            }
            TaggedSentence { tokens, tags }
        })
        .collect()
}

pub const RELATION_LABELS: [&str; 2] = ["precedes", "follows"];

/// Relation instances whose label is the alphabetic order of the two span
/// words; swapping the spans flips the label.
pub fn relation_dataset(n: usize, sentence_len: usize, seed: u64) -> Vec<RelationRecord> {
    assert!(sentence_len >= 3);
    let mut rng = StreamKey::root(seed).child("rel-data").rng();
    (0..n)
        .map(|_| {
            let mut tokens: Vec<String> = (0..sentence_len)
                .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string())
                .collect();
            let i = rng.gen_range(0..sentence_len - 2);
            let k = rng.gen_range(i + 1..sentence_len);
            // Distinct words so the order relation is well defined.
            while tokens[i] == tokens[k] {
                tokens[k] = ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string();
            }
            // Half the records present the later span as the head.
            let (head, tail) = if rng.gen::<bool>() {
                ((i, i), (k, k))
            } else {
                ((k, k), (i, i))
            };
            let label = if tokens[head.0] < tokens[tail.0] {
                RELATION_LABELS[0]
            } else {
                RELATION_LABELS[1]
            };
            RelationRecord {
                tokens,
                head,
                tail,
                label: label.to_string(),
            }
        })
        .collect()
}

/// Balanced texts labeled by the presence of the word `a`.
pub fn classification_dataset(n: usize, text_len: usize, seed: u64) -> Vec<ClassificationRecord> {
    assert!(text_len >= 2);
    let mut rng = StreamKey::root(seed).child("cls-data").rng();
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let words: Vec<String> = (0..text_len)
                .map(|_| {
                    let choices = if positive {
                        &ALPHABET[..]
                    } else {
                        &ALPHABET[1..] // no `a`
                    };
                    choices[rng.gen_range(0..choices.len())].to_string()
                })
                .collect();
            let mut words = words;
            if positive {
                let at = rng.gen_range(0..text_len);
                words[at] = "a".to_string();
            }
            ClassificationRecord {
                text: words.join(" "),
                label: usize::from(positive),
            }
        })
        .collect()
}
