//! Uncased WordPiece: vocabulary training, greedy tokenization,
//! detokenization, and vocabulary-overlap analysis.
//!
//! Training is the likelihood-ratio pair-merge scheme: at each step the
//! adjacent piece pair maximizing `freq(pair) / (freq(left) * freq(right))`
//! is merged, continuation pieces carrying the `##` prefix. Ties are broken
//! by higher pair frequency, then lexicographically smallest `(left, right)`,
//! so two runs over the same corpus produce identical entry order.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::{Error, Result};

/// Fixed special-token slots at the front of every vocabulary.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const E1_OPEN: u32 = 5;
pub const E1_CLOSE: u32 = 6;
pub const E2_OPEN: u32 = 7;
pub const E2_CLOSE: u32 = 8;
pub const NUM_SPECIALS: usize = 9;

pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[E1]", "[/E1]", "[E2]", "[/E2]",
];

/// Ordered set of subword strings with the special slots above at ids 0..9.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from non-special entries; specials are prepended.
    pub fn with_entries(pieces: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut entries: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        entries.extend(pieces);
        Vocabulary::from_entries(entries)
    }

    /// Builds from a complete entry list (specials included at their slots).
    pub fn from_entries(entries: Vec<String>) -> Result<Self> {
        if entries.len() < NUM_SPECIALS {
            return Err(Error::Invalid(format!(
                "vocabulary needs at least the {NUM_SPECIALS} special tokens"
            )));
        }
        for (i, tok) in SPECIAL_TOKENS.iter().enumerate() {
            if entries[i] != *tok {
                return Err(Error::Invalid(format!(
                    "special token slot {i} must be {tok}, found {}",
                    entries[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if i >= NUM_SPECIALS && e.is_empty() {
                return Err(Error::Invalid(format!("empty entry at id {i}")));
            }
            if index.insert(e.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate entry `{e}`")));
            }
        }
        Ok(Vocabulary { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Result<&str> {
        self.entries
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Invalid(format!("piece id {id} out of range")))
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    /// One entry per line, line number = id (the vocab.txt convention).
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            entries.push(line.trim_end_matches(['\r']).to_string());
        }
        Vocabulary::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            writeln!(file, "{e}").map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }
}

/// Token pieces with per-piece word index and attention mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSequence {
    pub piece_ids: Vec<u32>,
    /// Index of the source whitespace word; `None` on special pieces.
    pub word_ids: Vec<Option<u32>>,
    pub attention_mask: Vec<u8>,
}

impl TokenizedSequence {
    pub fn empty() -> Self {
        TokenizedSequence {
            piece_ids: Vec::new(),
            word_ids: Vec::new(),
            attention_mask: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.piece_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.piece_ids.is_empty()
    }

    pub fn push(&mut self, id: u32, word: Option<u32>, attend: bool) {
        self.piece_ids.push(id);
        self.word_ids.push(word);
        self.attention_mask.push(attend as u8);
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.piece_ids.len() != self.word_ids.len()
            || self.piece_ids.len() != self.attention_mask.len()
        {
            return Err(Error::Invalid(
                "tokenized sequence field lengths differ".into(),
            ));
        }
        let mut last = None;
        for (&id, word) in self.piece_ids.iter().zip(&self.word_ids) {
            if id as usize >= vocab_size {
                return Err(Error::Invalid(format!(
                    "piece id {id} >= vocab size {vocab_size}"
                )));
            }
            if let Some(w) = word {
                if let Some(prev) = last {
                    if *w < prev {
                        return Err(Error::Invalid("word ids must be non-decreasing".into()));
                    }
                }
                last = Some(*w);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Trains an uncased WordPiece vocabulary from an iterator of pre-normalized
/// lines. Stops at `target_size` entries (specials included) or when no
/// adjacent pair reaches `min_freq`.
pub fn train_vocab<I>(lines: I, target_size: usize, min_freq: u64) -> Result<Vocabulary>
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for line in lines {
        for word in line.as_ref().split_whitespace() {
            *word_freq.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Invalid(
            "cannot train a vocabulary on an empty corpus".into(),
        ));
    }

    // Alphabet: word-initial characters plus `##` continuations.
    let mut alphabet: BTreeMap<String, ()> = BTreeMap::new();
    for word in word_freq.keys() {
        for (i, c) in word.chars().enumerate() {
            let piece = if i == 0 {
                c.to_string()
            } else {
                format!("##{c}")
            };
            alphabet.entry(piece).or_insert(());
        }
    }
    let base = NUM_SPECIALS + alphabet.len();
    if target_size <= base {
        return Err(Error::Invalid(format!(
            "target size {target_size} must exceed specials + alphabet = {base}"
        )));
    }

    let mut entries: Vec<String> = alphabet.keys().cloned().collect();
    let mut present: HashMap<String, ()> = entries.iter().map(|e| (e.clone(), ())).collect();

    // Words as piece sequences, deduplicated and weighted by frequency.
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| {
            let pieces = w
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("##{c}") })
                .collect();
            (pieces, f)
        })
        .collect();

    while NUM_SPECIALS + entries.len() < target_size {
        let mut piece_freq: HashMap<&str, u64> = HashMap::new();
        let mut pair_freq: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (pieces, f) in &words {
            for p in pieces {
                *piece_freq.entry(p).or_insert(0) += f;
            }
            for pair in pieces.windows(2) {
                *pair_freq.entry((&pair[0], &pair[1])).or_insert(0) += f;
            }
        }

        // Max-score pair; ties by frequency then by the (already sorted)
        // lexicographic pair order of the BTreeMap walk.
        let mut best: Option<((&str, &str), u64, f64)> = None;
        for (&pair, &freq) in &pair_freq {
            if freq < min_freq {
                continue;
            }
            let denom = piece_freq[pair.0] as f64 * piece_freq[pair.1] as f64;
            let score = freq as f64 / denom;
            let better = match &best {
                None => true,
                Some((_, bf, bs)) => score > *bs || (score == *bs && freq > *bf),
            };
            if better {
                best = Some((pair, freq, score));
            }
        }
        let Some(((left, right), _, _)) = best else {
            break; // no pair meets min_freq
        };
        let merged = format!("{left}{}", right.trim_start_matches("##"));
        let (left, right) = (left.to_string(), right.to_string());
        if present.insert(merged.clone(), ()).is_none() {
            entries.push(merged.clone());
        }

        // Apply the merge left-to-right without overlap.
        for (pieces, _) in &mut words {
            let mut i = 0;
            while i + 1 < pieces.len() {
                if pieces[i] == left && pieces[i + 1] == right {
                    pieces[i] = merged.clone();
                    pieces.remove(i + 1);
                }
                i += 1;
            }
        }
    }

    Vocabulary::with_entries(entries)
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

pub const DEFAULT_MAX_WORD_CHARS: usize = 100;

/// Greedy longest-match-first tokenization of pre-normalized text.
/// Words with no full cover, or longer than `max_word_chars`, become [UNK].
pub fn tokenize(text: &str, vocab: &Vocabulary, max_word_chars: usize) -> TokenizedSequence {
    let mut seq = TokenizedSequence::empty();
    for (wi, word) in text.split_whitespace().enumerate() {
        let wi = wi as u32;
        match tokenize_word(word, vocab, max_word_chars) {
            Some(ids) => {
                for id in ids {
                    seq.push(id, Some(wi), true);
                }
            }
            None => seq.push(UNK, Some(wi), true),
        }
    }
    seq
}

/// Pieces covering one whitespace word, or `None` when not fully coverable.
pub fn tokenize_word(word: &str, vocab: &Vocabulary, max_word_chars: usize) -> Option<Vec<u32>> {
    if word.chars().count() > max_word_chars {
        return None;
    }
    let chars: Vec<char> = word.chars().collect();
    let mut ids = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut matched = None;
        // Longest vocabulary match at this start position.
        for end in (start + 1..=chars.len()).rev() {
            let mut cand: String = if start > 0 { "##".into() } else { String::new() };
            cand.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&cand) {
                matched = Some((id, end));
                break;
            }
        }
        match matched {
            Some((id, end)) => {
                ids.push(id);
                start = end;
            }
            None => return None,
        }
    }
    Some(ids)
}

/// Inverse of `tokenize` for fully covered words: strips `##`, joins
/// continuations, separates words with single spaces, drops specials.
pub fn detokenize(seq: &TokenizedSequence, vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in &seq.piece_ids {
        let piece = vocab.piece(id)?;
        if Vocabulary::is_special(id) {
            continue;
        }
        if let Some(cont) = piece.strip_prefix("##") {
            out.push_str(cont);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(piece);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Overlap
// ---------------------------------------------------------------------------

/// Fraction of `a`'s non-special entries that appear verbatim in `b`
/// (asymmetric; `##` prefixes must match exactly).
pub fn vocab_overlap(a: &Vocabulary, b: &Vocabulary) -> f64 {
    overlap_of_entries(a.entries(), b.entries())
}

/// Same computation over raw entry lists, treating bracketed tokens such as
/// `[PAD]` or `[unused5]` as specials; lets the CLI compare foreign vocab.txt
/// files directly.
pub fn overlap_of_entries(a: &[String], b: &[String]) -> f64 {
    let is_special = |s: &String| s.starts_with('[') && s.ends_with(']');
    let bset: std::collections::HashSet<&String> = b.iter().filter(|s| !is_special(s)).collect();
    let mut total = 0usize;
    let mut hit = 0usize;
    for e in a.iter().filter(|s| !is_special(s)) {
        total += 1;
        if bset.contains(e) {
            hit += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    hit as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab(extra: &[&str]) -> Vocabulary {
        Vocabulary::with_entries(extra.iter().map(|s| s.to_string())).unwrap()
    }

    #[test]
    fn specials_occupy_fixed_slots() {
        let v = toy_vocab(&["glass"]);
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[/E2]"), Some(E2_CLOSE));
        assert_eq!(v.piece(9).unwrap(), "glass");
        for (i, e) in v.entries().iter().enumerate() {
            assert_eq!(v.id(e), Some(i as u32));
        }
    }

    #[test]
    fn single_type_corpus_learns_the_full_word() {
        let corpus = vec!["aaab aaab aaab"];
        let v = train_vocab(corpus, 64, 1).unwrap();
        assert!(v.id("aaab").is_some());
    }

    #[test]
    fn glass_becomes_full_word_before_es_pieces() {
        let corpus = vec!["glass glass glasses"];
        let v = train_vocab(corpus, 64, 1).unwrap();
        let glass = v.id("glass").expect("glass trained") as usize;
        let es = v.id("##es").expect("##es trained") as usize;
        assert!(
            glass < es,
            "glass (id {glass}) must be created before ##es (id {es})"
        );
        assert!(v.id("glasses").is_some());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = || vec!["the cast cost was low", "the cast was cast twice", "low cost"];
        let a = train_vocab(corpus(), 48, 1).unwrap();
        let b = train_vocab(corpus(), 48, 1).unwrap();
        assert_eq!(a.entries(), b.entries());
    }

    #[test]
    fn training_error_cases() {
        assert!(train_vocab(Vec::<String>::new(), 100, 1).is_err());
        assert!(train_vocab(vec!["   "], 100, 1).is_err());
        // Target smaller than specials + alphabet.
        assert!(train_vocab(vec!["abc"], 5, 1).is_err());
    }

    #[test]
    fn greedy_tokenize_and_word_ids() {
        let v = toy_vocab(&["glass", "##es", "form", "##ing"]);
        let seq = tokenize("glasses forming", &v, DEFAULT_MAX_WORD_CHARS);
        let pieces: Vec<&str> = seq.piece_ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, vec!["glass", "##es", "form", "##ing"]);
        assert_eq!(seq.word_ids, vec![Some(0), Some(0), Some(1), Some(1)]);
        assert_eq!(seq.attention_mask, vec![1, 1, 1, 1]);
    }

    #[test]
    fn empty_text_and_unknown_words() {
        let v = toy_vocab(&["glass"]);
        assert!(tokenize("", &v, 100).is_empty());

        let seq = tokenize("zzz", &v, 100);
        assert_eq!(seq.piece_ids, vec![UNK]);
        assert_eq!(seq.word_ids, vec![Some(0)]);
    }

    #[test]
    fn over_long_word_becomes_unk() {
        let v = toy_vocab(&["a", "##a"]);
        let long = "a".repeat(101);
        let seq = tokenize(&long, &v, DEFAULT_MAX_WORD_CHARS);
        assert_eq!(seq.piece_ids, vec![UNK]);
    }

    #[test]
    fn greedy_means_longest_match_first() {
        // Both `glas` and `glass` cover the prefix; greedy must take `glass`.
        let v = toy_vocab(&["glas", "glass", "##s", "##es"]);
        let seq = tokenize("glasses", &v, 100);
        let pieces: Vec<&str> = seq.piece_ids.iter().map(|&i| v.piece(i).unwrap()).collect();
        assert_eq!(pieces, vec!["glass", "##es"]);
    }

    #[test]
    fn detokenize_cases() {
        let v = toy_vocab(&["glass", "##es", "form", "##ing"]);
        let seq = tokenize("glasses", &v, 100);
        assert_eq!(detokenize(&seq, &v).unwrap(), "glasses");

        assert_eq!(detokenize(&TokenizedSequence::empty(), &v).unwrap(), "");

        let mut with_specials = TokenizedSequence::empty();
        with_specials.push(CLS, None, true);
        with_specials.push(v.id("form").unwrap(), Some(0), true);
        with_specials.push(v.id("##ing").unwrap(), Some(0), true);
        with_specials.push(SEP, None, true);
        assert_eq!(detokenize(&with_specials, &v).unwrap(), "forming");

        let mut bad = TokenizedSequence::empty();
        bad.push(9999, Some(0), true);
        assert!(detokenize(&bad, &v).is_err());
    }

    #[test]
    fn round_trip_on_coverable_text() {
        let v = toy_vocab(&["glass", "##es", "form", "##ing", "melt"]);
        for text in ["glasses forming melt", "melt melt", "forming"] {
            let seq = tokenize(text, &v, 100);
            assert_eq!(detokenize(&seq, &v).unwrap(), text);
        }
    }

    #[test]
    fn overlap_cases() {
        let a = toy_vocab(&["w", "x", "y", "z"]);
        let b = toy_vocab(&["y", "z", "q"]);
        assert_eq!(vocab_overlap(&a, &a), 1.0);
        assert_eq!(vocab_overlap(&a, &b), 0.5);
        assert_eq!(vocab_overlap(&b, &a), 2.0 / 3.0);

        let disjoint = toy_vocab(&["aa", "bb"]);
        assert_eq!(vocab_overlap(&a, &disjoint), 0.0);

        // Bracketed entries in foreign files are excluded like our specials.
        let raw_a = vec![
            "[PAD]".to_string(),
            "[unused7]".to_string(),
            "abc".to_string(),
            "##d".to_string(),
        ];
        let raw_b = vec!["abc".to_string(), "[CLS]".to_string()];
        assert_eq!(overlap_of_entries(&raw_a, &raw_b), 0.5);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = train_vocab(vec!["glass glass glasses melt"], 64, 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.entries(), v.entries());
    }

    #[test]
    fn load_rejects_misplaced_specials() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "[UNK]\n[PAD]\nabc\n").unwrap();
        assert!(Vocabulary::load(&path).is_err());
    }
}
