//! Regex-based SMILES tokenization and vocabulary handling.
//!
//! The tokenizer splits a SMILES string into chemically meaningful units:
//! bracket atoms (`[nH]`, `[C@@H]`), two-letter halogens (`Cl`, `Br`),
//! single-letter organic-subset and aromatic atoms, bond/branch/ring symbols,
//! and `%NN` two-digit ring closures. Lexing is lossless: the concatenation of
//! the produced tokens always equals the input string, and any character not
//! covered by the pattern is a hard error rather than a silent skip.

use std::collections::HashMap;
use std::io::BufRead;

use regex::Regex;
use std::sync::OnceLock;
use thiserror::Error;

/// Number of reserved special tokens at the head of every vocabulary.
pub const NUM_SPECIALS: usize = 5;
/// Padding token id.
pub const PAD_ID: u32 = 0;
/// Unknown-token id (out-of-vocabulary tokens map here on encode).
pub const UNK_ID: u32 = 1;
/// Begin-of-sequence token id.
pub const BOS_ID: u32 = 2;
/// End-of-sequence token id.
pub const EOS_ID: u32 = 3;
/// Mask token id used by masked-language-model corruption.
pub const MASK_ID: u32 = 4;

/// Literal names of the special tokens, in id order.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<bos>", "<eos>", "<mask>"];

/// Maximum framed sequence length (begin/end tokens inclusive).
pub const MAX_FRAMED_LEN: usize = 202;

fn smiles_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(\[[^\]]+\]|Br?|Cl?|N|O|S|P|F|I|b|c|n|o|s|p|\(|\)|\.|=|#|-|\+|\\|/|:|~|@|\?|>|\*|\$|%[0-9]{2}|[0-9])",
        )
        .expect("tokenizer pattern is valid")
    })
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum TokenizeError {
    #[error("empty input")]
    EmptyInput,
    #[error("unlexable character at byte position {0}")]
    UnlexableCharacter(usize),
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum VocabError {
    #[error("no line in the corpus tokenizes successfully")]
    NoValidLines,
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum EncodeError {
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("framed sequence length {0} exceeds the {MAX_FRAMED_LEN}-token cap")]
    TooLong(usize),
}

#[derive(Debug, Error, PartialEq, Eq, Clone)]
pub enum DecodeError {
    #[error("id {0} is outside the vocabulary")]
    UnknownId(u32),
}

/// Split a SMILES string into tokens.
///
/// Returns an error for empty input or for any character the pattern does not
/// cover; on success `tokens.concat() == smiles`.
pub fn tokenize(smiles: &str) -> Result<Vec<String>, TokenizeError> {
    if smiles.is_empty() {
        return Err(TokenizeError::EmptyInput);
    }
    let mut tokens = Vec::new();
    let mut cursor = 0usize;
    for m in smiles_regex().find_iter(smiles) {
        if m.start() != cursor {
            return Err(TokenizeError::UnlexableCharacter(cursor));
        }
        tokens.push(m.as_str().to_owned());
        cursor = m.end();
    }
    if cursor != smiles.len() {
        return Err(TokenizeError::UnlexableCharacter(cursor));
    }
    Ok(tokens)
}

/// Bidirectional token/id map with the five reserved specials at ids `0..5`.
///
/// Ids are dense `0..len()`; the mapping is frozen at build time and safe to
/// share across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_unique_tokens(unique: Vec<String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(unique);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Total vocabulary size, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the five specials are always present
    }

    /// Number of non-special tokens.
    pub fn non_special_len(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    /// Id for a token, or `None` if out of vocabulary.
    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Token string for an id.
    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// All token strings in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Serialize as one token per line; line number equals id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    /// Parse a vocabulary file produced by [`Vocabulary::to_text`].
    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIALS {
            return Err(VocabError::Malformed(format!(
                "expected at least {NUM_SPECIALS} lines, found {}",
                lines.len()
            )));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *want {
                return Err(VocabError::Malformed(format!(
                    "line {i} must be `{want}`, found `{}`",
                    lines[i]
                )));
            }
        }
        let mut seen = HashMap::new();
        for (i, line) in lines.iter().enumerate().skip(NUM_SPECIALS) {
            if line.is_empty() {
                return Err(VocabError::Malformed(format!("empty token at line {i}")));
            }
            if seen.insert(line.to_string(), ()).is_some() {
                return Err(VocabError::Malformed(format!(
                    "duplicate token `{line}` at line {i}"
                )));
            }
        }
        Ok(Self::from_unique_tokens(
            lines[NUM_SPECIALS..].iter().map(|s| s.to_string()).collect(),
        ))
    }
}

/// Outcome counters from a corpus scan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusReport {
    /// Lines that tokenized successfully.
    pub lines_ok: usize,
    /// Lines skipped because they failed to tokenize.
    pub lines_skipped: usize,
}

/// Build a vocabulary from an iterator of SMILES lines.
///
/// Unique tokens are appended after the specials in first-appearance order, so
/// the result is deterministic for a byte-identical corpus. Unlexable lines
/// are skipped and counted in the report.
pub fn build_vocabulary<I, S>(lines: I) -> Result<(Vocabulary, CorpusReport), VocabError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut report = CorpusReport::default();
    let mut unique = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for line in lines {
        match tokenize(line.as_ref()) {
            Ok(tokens) => {
                report.lines_ok += 1;
                for t in tokens {
                    if seen.insert(t.clone(), ()).is_none() {
                        unique.push(t);
                    }
                }
            }
            Err(_) => report.lines_skipped += 1,
        }
    }
    if report.lines_ok == 0 {
        return Err(VocabError::NoValidLines);
    }
    Ok((Vocabulary::from_unique_tokens(unique), report))
}

/// Build a vocabulary by streaming lines from a reader.
pub fn build_vocabulary_from_reader<R: BufRead>(
    reader: R,
) -> Result<(Vocabulary, CorpusReport), VocabError> {
    let lines: Result<Vec<String>, _> = reader.lines().collect();
    let lines = lines.map_err(|e| VocabError::Malformed(format!("read error: {e}")))?;
    build_vocabulary(lines)
}

/// An encoded molecule: vocabulary ids plus the original string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Vocabulary ids, `<bos>`/`<eos>` framing included when `framed`.
    pub ids: Vec<u32>,
    /// The source SMILES string.
    pub raw: String,
    /// Whether begin/end tokens are present.
    pub framed: bool,
}

impl TokenSequence {
    /// Framed length (number of ids).
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids between the begin/end frame.
    pub fn payload(&self) -> &[u32] {
        if self.framed {
            &self.ids[1..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }
}

/// Encode a SMILES string as a framed id sequence.
///
/// Out-of-vocabulary tokens map to `<unk>`; framed sequences longer than
/// [`MAX_FRAMED_LEN`] are rejected.
pub fn encode(smiles: &str, vocab: &Vocabulary) -> Result<TokenSequence, EncodeError> {
    let tokens = tokenize(smiles)?;
    let framed_len = tokens.len() + 2;
    if framed_len > MAX_FRAMED_LEN {
        return Err(EncodeError::TooLong(framed_len));
    }
    let mut ids = Vec::with_capacity(framed_len);
    ids.push(BOS_ID);
    for t in &tokens {
        ids.push(vocab.id_of(t).unwrap_or(UNK_ID));
    }
    ids.push(EOS_ID);
    Ok(TokenSequence {
        ids,
        raw: smiles.to_owned(),
        framed: true,
    })
}

/// Decode ids back to a string, stripping all special tokens.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String, DecodeError> {
    let mut out = String::new();
    for &id in ids {
        if id as usize >= vocab.len() {
            return Err(DecodeError::UnknownId(id));
        }
        if id as usize >= NUM_SPECIALS {
            out.push_str(vocab.token_of(id).expect("bounds checked"));
        }
    }
    Ok(out)
}

/// True when a token denotes an atom rather than a bond, branch, or ring digit.
///
/// Atom tokens are bracket atoms, the organic subset (`B C N O S P F I Cl Br`),
/// and the aromatic lowercase forms (`b c n o s p`).
pub fn is_atom_token(token: &str) -> bool {
    if token.starts_with('[') {
        return true;
    }
    matches!(
        token,
        "B" | "C" | "N" | "O" | "S" | "P" | "F" | "I" | "Cl" | "Br" | "b" | "c" | "n" | "o"
            | "s" | "p"
    )
}
