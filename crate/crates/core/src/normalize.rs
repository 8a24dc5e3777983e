//! Unicode normalization for scientific text.
//!
//! The pipeline runs in a fixed order: (1) compatibility decomposition with
//! combining-mark stripping, (2) control characters to space, (3) lowercase,
//! (4) mapping-table substitution, (5) whitespace runs collapsed to a single
//! space with leading/trailing whitespace trimmed. The result is deterministic
//! and idempotent, and every dataset entering a downstream module is expected
//! to have passed through it first.

use std::fmt::Write as _;
use std::path::Path;

use unicode_normalization::char::canonical_combining_class;
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

/// Ordered substitution table applied after lowercasing.
///
/// Sources are single codepoints; replacements are short ASCII strings, with
/// `" "` marking a junk character mapped to space and `""` a deletion.
#[derive(Debug, Clone, Default)]
pub struct MappingTable {
    entries: Vec<(char, String)>,
}

impl MappingTable {
    /// The built-in table: the published substitutions (fullwidth forms,
    /// `≫` to `>>`, fraction slash so `¾` ends up as `3/4`) plus the junk
    /// symbols mapped to space. Fullwidth sources are kept for documentation
    /// even though compatibility decomposition usually resolves them first.
    pub fn default_table() -> Self {
        let entries = vec![
            ('\u{FF05}', "%".to_string()),  // ％
            ('\u{FF1E}', ">".to_string()),  // ＞
            ('\u{226B}', ">>".to_string()), // ≫
            ('\u{FF1D}', "=".to_string()),  // ＝
            ('\u{2044}', "/".to_string()),  // fraction slash, from ¾ etc.
            ('\u{25A1}', " ".to_string()),  // □
            ('\u{2296}', " ".to_string()),  // ⊖
            ('\u{22A0}', " ".to_string()),  // ⊠
        ];
        MappingTable { entries }
    }

    pub fn empty() -> Self {
        MappingTable::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, c: char) -> Option<&str> {
        self.entries
            .iter()
            .find(|(src, _)| *src == c)
            .map(|(_, rep)| rep.as_str())
    }

    /// Parses the TSV format: one `U+XXXX<TAB>replacement` entry per line,
    /// `#` comments and blank lines ignored. Rejects duplicate sources,
    /// malformed codepoints, non-ASCII replacements, and entries that are not
    /// fixed points of the pipeline (which would break idempotence), naming
    /// the offending line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: Vec<(char, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim_end_matches(['\r', '\n']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (code, replacement) = line.split_once('\t').ok_or_else(|| {
                Error::parse(origin, lineno, "expected `U+XXXX<TAB>replacement`")
            })?;
            let src = parse_codepoint(code)
                .ok_or_else(|| Error::parse(origin, lineno, format!("bad codepoint `{code}`")))?;
            if entries.iter().any(|(c, _)| *c == src) {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("duplicate source U+{:04X}", src as u32),
                ));
            }
            if let Some(bad) = replacement.chars().find(|c| *c as u32 > 0x7F) {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("replacement contains non-ASCII `{bad}`"),
                ));
            }
            entries.push((src, replacement.to_string()));
        }
        let table = MappingTable { entries };
        table.check_idempotent(origin)?;
        Ok(table)
    }

    /// A table is idempotent when every replacement is a fixed point of
    /// stages (1)-(4); otherwise a second normalize pass would keep rewriting.
    fn check_idempotent(&self, origin: &str) -> Result<()> {
        for (i, (src, rep)) in self.entries.iter().enumerate() {
            let again = apply_stages(rep, self);
            // A bare-space replacement survives as whitespace handled by the
            // collapse stage; compare modulo that.
            if again.trim() != rep.trim() {
                return Err(Error::parse(
                    origin,
                    i + 1,
                    format!(
                        "entry U+{:04X} is not idempotent: `{rep}` renormalizes to `{again}`",
                        *src as u32
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Loads a mapping table from a TSV file; `None` yields the built-in table.
pub fn load_mapping(path: Option<&Path>) -> Result<MappingTable> {
    match path {
        None => Ok(MappingTable::default_table()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            MappingTable::parse(&text, &p.display().to_string())
        }
    }
}

fn parse_codepoint(code: &str) -> Option<char> {
    let hex = code.strip_prefix("U+").or_else(|| code.strip_prefix("u+"))?;
    if hex.len() < 4 || hex.len() > 6 {
        return None;
    }
    let v = u32::from_str_radix(hex, 16).ok()?;
    char::from_u32(v)
}

/// Stages (1)-(4): decompose+strip, controls to space, lowercase, table.
fn apply_stages(text: &str, table: &MappingTable) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.nfkd() {
        if canonical_combining_class(c) != 0 {
            continue; // strip accents and other combining marks
        }
        let c = if c.is_control() { ' ' } else { c };
        for lc in c.to_lowercase() {
            match table.lookup(lc) {
                Some(rep) => out.push_str(rep),
                None => out.push(lc),
            }
        }
    }
    out
}

/// Full normalization pipeline; total on valid text.
pub fn normalize(text: &str, table: &MappingTable) -> String {
    let staged = apply_stages(text, table);
    // Stage 5: collapse whitespace runs, trim.
    let mut out = String::with_capacity(staged.len());
    let mut pending_space = false;
    for c in staged.chars() {
        if c.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

/// Renders a table back to its TSV form.
pub fn mapping_to_tsv(table: &MappingTable) -> String {
    let mut out = String::new();
    for (src, rep) in &table.entries {
        let _ = writeln!(out, "U+{:04X}\t{}", *src as u32, rep);
    }
    out
}
