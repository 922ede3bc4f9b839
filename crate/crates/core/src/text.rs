//! WordPiece-style subword tokenizer.
//!
//! Word-initial pieces are bare strings, word-internal pieces carry a `##`
//! prefix. Vocabularies are grown from a corpus by repeatedly merging the most
//! frequent adjacent piece pair.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[BOS]", "[EOS]", "[UNK]"];

pub const CONTINUATION: &str = "##";
pub const DEFAULT_VOCAB_SIZE: usize = 512;
/// Longest text sequence the model accepts by default.
pub const DEFAULT_MAX_TEXT_LEN: usize = 512;

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        if pieces.len() < SPECIALS.len() || pieces[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary must start with [PAD] [BOS] [EOS] [UNK]".into()));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        Ok(Vocabulary { pieces, index })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: TokenId) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Greedy longest-match-first over each whitespace-separated word.
    /// A character with no matching piece becomes `UNK`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut buf = String::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            let chars: Vec<char> = word.chars().collect();
            let mut start = 0;
            while start < chars.len() {
                let mut matched = None;
                for end in (start + 1..=chars.len()).rev() {
                    buf.clear();
                    if start > 0 {
                        buf.push_str(CONTINUATION);
                    }
                    buf.extend(&chars[start..end]);
                    if let Some(id) = self.id(&buf) {
                        matched = Some((id, end));
                        break;
                    }
                }
                match matched {
                    Some((id, end)) => {
                        out.push(id);
                        start = end;
                    }
                    None => {
                        out.push(UNK);
                        start += 1;
                    }
                }
            }
        }
        out
    }

    /// Joins pieces back into words; special ids are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(Error::IdOutOfRange { id, size: self.len() })?;
            if id < SPECIALS.len() {
                continue;
            }
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
                Some(rest) => words.push(rest.to_string()),
                None => words.push(piece.to_string()),
            }
        }
        Ok(words.join(" "))
    }

    /// Builds a vocabulary of at most `target_size` entries. Every character
    /// seen gets both a word-initial and a continuation entry.
    pub fn build(corpus: &[String], target_size: usize) -> Result<Self> {
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for line in corpus {
            for w in normalize(line).split(' ').filter(|w| !w.is_empty()) {
                *word_freq.entry(w.to_string()).or_default() += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut alphabet: Vec<String> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for w in word_freq.keys() {
            seen.extend(w.chars());
        }
        for c in &seen {
            alphabet.push(c.to_string());
            alphabet.push(format!("{CONTINUATION}{c}"));
        }
        alphabet.sort();
        let base = SPECIALS.len() + alphabet.len();
        if target_size < base {
            return Err(Error::invalid(format!(
                "target vocabulary size {target_size} is below the {base} entries needed for specials and characters"
            )));
        }

        let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        pieces.extend(alphabet);
        let mut known: std::collections::HashSet<String> = pieces.iter().cloned().collect();

        let mut words: Vec<(Vec<String>, usize)> = word_freq
            .iter()
            .map(|(w, &f)| {
                let split = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                    .collect();
                (split, f)
            })
            .collect();

        while pieces.len() < target_size {
            let mut pair_freq: BTreeMap<(String, String), usize> = BTreeMap::new();
            for (split, f) in &words {
                for pair in split.windows(2) {
                    *pair_freq.entry((pair[0].clone(), pair[1].clone())).or_default() += f;
                }
            }
            // BTreeMap iterates pairs lexicographically, so the first maximum wins ties.
            let Some(((left, right), _)) = pair_freq
                .into_iter()
                .fold(None, |best: Option<((String, String), usize)>, (pair, f)| match &best {
                    Some((_, bf)) if *bf >= f => best,
                    _ => Some((pair, f)),
                })
            else {
                break;
            };
            let merged = format!("{left}{}", right.trim_start_matches(CONTINUATION));
            for (split, _) in &mut words {
                let mut i = 0;
                while i + 1 < split.len() {
                    if split[i] == left && split[i + 1] == right {
                        split[i] = merged.clone();
                        split.remove(i + 1);
                    } else {
                        i += 1;
                    }
                }
            }
            if known.insert(merged.clone()) {
                pieces.push(merged);
            }
        }
        Vocabulary::from_pieces(pieces)
    }

    /// One piece per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        Vocabulary::from_pieces(text.lines().map(str::to_string).collect())
    }
}

/// Token ids of one text, bounded by a maximum length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokenSequence {
    ids: Vec<TokenId>,
}

impl TextTokenSequence {
    pub fn new(ids: Vec<TokenId>, vocab_size: usize, max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(Error::invalid(format!("text of {} tokens exceeds maximum {max_len}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::IdOutOfRange { id: bad, size: vocab_size });
        }
        Ok(TextTokenSequence { ids })
    }

    /// Encodes a caption and appends `EOS`, the form used as a training target.
    pub fn caption(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut ids = vocab.encode(text);
        ids.push(EOS);
        TextTokenSequence::new(ids, vocab.len(), max_len)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
