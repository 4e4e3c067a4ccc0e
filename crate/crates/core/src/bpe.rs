//! Byte-pair-encoding vocabulary learning and text segmentation.
//!
//! Text is pre-tokenized into words (runs of alphanumerics), single
//! punctuation characters, whitespace runs and reserved literals such as
//! `<head>`. A word directly followed by one space (or by the end of the
//! text) carries the end-of-word marker on its final symbol and swallows
//! that space, which keeps `decode(encode(t)) == t` exact for any text over
//! the training alphabet.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

/// Literals that are never split and always present in the vocabulary.
pub const RESERVED_LITERALS: [&str; 3] = ["<head>", "<tail>", "<relation>"];

#[derive(Debug, Clone, PartialEq, Eq)]
enum PieceKind {
    Word,
    Space,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Piece<'a> {
    text: &'a str,
    kind: PieceKind,
    boundary: bool,
}

fn pretokenize(text: &str) -> Vec<Piece<'_>> {
    let mut pieces: Vec<Piece<'_>> = Vec::new();
    let mut i = 0;
    let bytes_len = text.len();
    while i < bytes_len {
        let rest = &text[i..];
        if let Some(lit) = RESERVED_LITERALS.iter().find(|l| rest.starts_with(*l)) {
            pieces.push(Piece {
                text: &rest[..lit.len()],
                kind: PieceKind::Literal,
                boundary: false,
            });
            i += lit.len();
            continue;
        }
        let c = rest.chars().next().expect("non-empty rest");
        if c.is_whitespace() {
            let attachable = pieces.last().is_some_and(|p| p.kind != PieceKind::Space && !p.boundary);
            if c == ' ' && attachable && i + 1 < bytes_len {
                pieces.last_mut().expect("checked").boundary = true;
                i += 1;
                continue;
            }
            let len: usize = rest.chars().take_while(|c| c.is_whitespace()).map(char::len_utf8).sum();
            pieces.push(Piece {
                text: &rest[..len],
                kind: PieceKind::Space,
                boundary: false,
            });
            i += len;
        } else if c.is_alphanumeric() {
            let len: usize = rest
                .chars()
                .take_while(|c| c.is_alphanumeric())
                .map(char::len_utf8)
                .sum();
            pieces.push(Piece {
                text: &rest[..len],
                kind: PieceKind::Word,
                boundary: false,
            });
            i += len;
        } else {
            pieces.push(Piece {
                text: &rest[..c.len_utf8()],
                kind: PieceKind::Word,
                boundary: false,
            });
            i += c.len_utf8();
        }
    }
    if let Some(last) = pieces.last_mut() {
        if last.kind != PieceKind::Space {
            last.boundary = true;
        }
    }
    pieces
}

fn piece_symbols(piece: &Piece<'_>) -> Vec<String> {
    match piece.kind {
        PieceKind::Literal => {
            let mut s = piece.text.to_owned();
            if piece.boundary {
                s.push_str(END_OF_WORD);
            }
            vec![s]
        }
        PieceKind::Space => piece.text.chars().map(String::from).collect(),
        PieceKind::Word => {
            let mut symbols: Vec<String> = piece.text.chars().map(String::from).collect();
            if piece.boundary {
                symbols.last_mut().expect("non-empty word").push_str(END_OF_WORD);
            }
            symbols
        }
    }
}

/// Ordered merge rules, highest-frequency first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeTable {
    pub merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn end_of_word_marker(&self) -> &'static str {
        END_OF_WORD
    }

    /// Table holding only the first `n` merges.
    pub fn prefix(&self, n: usize) -> MergeTable {
        MergeTable {
            merges: self.merges[..n.min(self.merges.len())].to_vec(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (a, b) in &self.merges {
            out.push_str(&escape(a));
            out.push(' ');
            out.push_str(&escape(b));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => merges.push((unescape(a), unescape(b))),
                _ => {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: "expected two space-separated symbols".into(),
                    })
                }
            }
        }
        Ok(MergeTable { merges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn escape(symbol: &str) -> String {
    let mut out = String::with_capacity(symbol.len());
    for c in symbol.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Interned word-frequency table used while learning merges.
struct MergeLearner {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, usize)>,
}

impl MergeLearner {
    fn new<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut counts: HashMap<Vec<String>, usize> = HashMap::new();
        for line in corpus {
            for piece in pretokenize(line.as_ref()) {
                if piece.kind == PieceKind::Literal {
                    continue;
                }
                *counts.entry(piece_symbols(&piece)).or_default() += 1;
            }
        }
        let mut learner = MergeLearner {
            symbols: Vec::new(),
            ids: HashMap::new(),
            words: Vec::new(),
        };
        let mut sorted: Vec<_> = counts.into_iter().collect();
        sorted.sort();
        for (symbols, count) in sorted {
            let ids = symbols.iter().map(|s| learner.intern(s)).collect();
            learner.words.push((ids, count));
        }
        learner
    }

    fn intern(&mut self, symbol: &str) -> u32 {
        if let Some(&id) = self.ids.get(symbol) {
            return id;
        }
        let id = self.symbols.len() as u32;
        self.symbols.push(symbol.to_owned());
        self.ids.insert(symbol.to_owned(), id);
        id
    }

    /// Most frequent adjacent pair; ties go to the lexicographically smallest pair.
    fn best_pair(&self) -> Option<(u32, u32)> {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (word, freq) in &self.words {
            for pair in word.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += freq;
            }
        }
        counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let key = |p: &(u32, u32)| (&self.symbols[p.0 as usize], &self.symbols[p.1 as usize]);
                    key(pb).cmp(&key(pa))
                })
            })
            .map(|(pair, _)| pair)
    }

    fn apply(&mut self, pair: (u32, u32)) -> String {
        let merged = format!("{}{}", self.symbols[pair.0 as usize], self.symbols[pair.1 as usize]);
        let merged_id = self.intern(&merged);
        for (word, _) in &mut self.words {
            merge_in_place(word, pair, merged_id);
        }
        merged
    }
}

fn merge_in_place(word: &mut Vec<u32>, pair: (u32, u32), merged: u32) {
    if word.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(merged);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// Learns up to `num_merges` merge rules from `corpus`.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<MergeTable> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut learner = MergeLearner::new(corpus);
    let mut table = MergeTable::default();
    while table.len() < num_merges {
        let Some(pair) = learner.best_pair() else { break };
        let (a, b) = (
            learner.symbols[pair.0 as usize].clone(),
            learner.symbols[pair.1 as usize].clone(),
        );
        learner.apply(pair);
        table.merges.push((a, b));
    }
    Ok(table)
}

/// Token ↔ id bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub const PAD_ID: u32 = 0;
    pub const BOS_ID: u32 = 1;
    pub const EOS_ID: u32 = 2;
    pub const UNK_ID: u32 = 3;

    fn with_specials() -> Self {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in [PAD, BOS, EOS, UNK] {
            vocab.push(t);
        }
        for lit in RESERVED_LITERALS {
            vocab.push(lit);
            vocab.push(&format!("{lit}{END_OF_WORD}"));
        }
        vocab
    }

    fn push(&mut self, token: &str) {
        if !self.ids.contains_key(token) {
            self.ids.insert(token.to_owned(), self.tokens.len() as u32);
            self.tokens.push(token.to_owned());
        }
    }

    /// Special tokens, then the corpus alphabet (every character with and
    /// without the end-of-word marker) in sorted order, then merge results in
    /// learning order.
    pub fn build<S: AsRef<str>>(corpus: &[S], merges: &MergeTable) -> Self {
        let mut vocab = Vocabulary::with_specials();
        let mut alphabet = BTreeSet::new();
        for line in corpus {
            for piece in pretokenize(line.as_ref()) {
                match piece.kind {
                    PieceKind::Literal => {}
                    PieceKind::Space => alphabet.extend(piece.text.chars().map(String::from)),
                    // Both forms, so any word over the alphabet stays encodable.
                    PieceKind::Word => {
                        for c in piece.text.chars() {
                            alphabet.insert(c.to_string());
                            alphabet.insert(format!("{c}{END_OF_WORD}"));
                        }
                    }
                }
            }
        }
        for symbol in &alphabet {
            vocab.push(symbol);
        }
        for (a, b) in &merges.merges {
            vocab.push(&format!("{a}{b}"));
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, token) in self.tokens.iter().enumerate() {
            out.push_str(&escape(token));
            out.push('\t');
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: &str| Error::Parse {
                line: idx + 1,
                message: message.into(),
            };
            let (token, id) = line.rsplit_once('\t').ok_or_else(|| bad("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
            if id != vocab.tokens.len() {
                return Err(bad("ids must be dense and in increasing order"));
            }
            let token = unescape(token);
            if vocab.ids.contains_key(&token) {
                return Err(bad("duplicate token"));
            }
            vocab.push(&token);
        }
        for (expected, name) in [PAD, BOS, EOS, UNK].iter().enumerate() {
            if vocab.id(name) != Some(expected as u32) {
                return Err(Error::Parse {
                    line: expected + 1,
                    message: format!("special token {name} must have id {expected}"),
                });
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Merge table plus vocabulary, ready to encode and decode.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    merges: MergeTable,
    vocab: Vocabulary,
    pair_ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl Tokenizer {
    pub fn new(merges: MergeTable, vocab: Vocabulary) -> Result<Self> {
        let mut pair_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.merges.iter().enumerate() {
            let lookup = |s: &str| {
                vocab
                    .id(s)
                    .ok_or_else(|| Error::Config(format!("merge symbol {s:?} missing from vocabulary")))
            };
            let key = (lookup(a)?, lookup(b)?);
            let merged = lookup(&format!("{a}{b}"))?;
            pair_ranks.entry(key).or_insert((rank, merged));
        }
        Ok(Tokenizer {
            merges,
            vocab,
            pair_ranks,
        })
    }

    pub fn train<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<Self> {
        let merges = learn_bpe(corpus, num_merges)?;
        let vocab = Vocabulary::build(corpus, &merges);
        Tokenizer::new(merges, vocab)
    }

    /// Learns merges until the vocabulary reaches `vocab_size` or no pair is left.
    pub fn train_to_vocab_size<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut vocab = Vocabulary::build(corpus, &MergeTable::default());
        let mut learner = MergeLearner::new(corpus);
        let mut merges = MergeTable::default();
        while vocab.len() < vocab_size {
            let Some(pair) = learner.best_pair() else { break };
            let (a, b) = (
                learner.symbols[pair.0 as usize].clone(),
                learner.symbols[pair.1 as usize].clone(),
            );
            let merged = learner.apply(pair);
            vocab.push(&merged);
            merges.merges.push((a, b));
        }
        Tokenizer::new(merges, vocab)
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.merges.save(&dir.join("merges.txt"))?;
        self.vocab.save(&dir.join("vocab.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Tokenizer::new(
            MergeTable::load(&dir.join("merges.txt"))?,
            Vocabulary::load(&dir.join("vocab.txt"))?,
        )
    }

    /// Segments text into vocabulary symbols.
    pub fn segment(&self, text: &str) -> Vec<String> {
        self.encode(text)
            .into_iter()
            .map(|id| self.vocab.token(id).expect("encode yields vocabulary ids").to_owned())
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut unknown = 0usize;
        for piece in pretokenize(text) {
            let start = ids.len();
            for symbol in piece_symbols(&piece) {
                match self.vocab.id(&symbol) {
                    Some(id) => ids.push(id),
                    None => {
                        unknown += 1;
                        ids.push(Vocabulary::UNK_ID);
                    }
                }
            }
            self.apply_merges(&mut ids, start);
        }
        if unknown > 0 {
            log::warn!("{unknown} symbol(s) outside the vocabulary mapped to {UNK}");
        }
        ids
    }

    fn apply_merges(&self, ids: &mut Vec<u32>, start: usize) {
        loop {
            let word = &ids[start..];
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.pair_ranks
                        .get(&(w[0], w[1]))
                        .map(|&(rank, merged)| (rank, i, merged))
                })
                .min();
            let Some((rank, _, merged)) = best else { break };
            let mut out = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && self.pair_ranks.get(&(word[i], word[i + 1])).map(|r| r.0) == Some(rank) {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(word[i]);
                    i += 1;
                }
            }
            ids.truncate(start);
            ids.extend(out);
        }
    }

    /// Inverse of [`Tokenizer::encode`]. Padding and sequence markers are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut last_ends_word = false;
        for &id in ids {
            let token = self.vocab.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab.len(),
            })?;
            if matches!(id, Vocabulary::PAD_ID | Vocabulary::BOS_ID | Vocabulary::EOS_ID) {
                continue;
            }
            match token.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    out.push_str(stem);
                    out.push(' ');
                    last_ends_word = true;
                }
                None => {
                    out.push_str(token);
                    last_ends_word = false;
                }
            }
        }
        if last_ends_word {
            out.pop();
        }
        Ok(out)
    }
}
