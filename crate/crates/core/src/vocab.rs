//! Fixed 64-symbol vocabulary shared by the data generator and the toy model.
//!
//! Text is split on whitespace; every piece must be one symbol. Unknown words
//! map to `<unk>`.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;
pub const UNK: usize = 4;

const SYMBOLS: [&str; 64] = [
    "<pad>",
    "<bos>",
    "<sep>",
    "<eos>",
    "<unk>",
    ":",
    "_", //
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9", //
    "a",
    "b",
    "c",
    "d",
    "e",
    "f",
    "g",
    "h", //
    "the",
    "add",
    "sum",
    "values",
    "total",
    "modulo",
    "numbers", //
    "reverse",
    "sequence",
    "it",
    "write",
    "in",
    "backwards", //
    "sort",
    "letters",
    "them",
    "sorted",
    "order", //
    "parity",
    "of",
    "ones",
    "odd",
    "or",
    "even", //
    "copy",
    "hiding",
    "with",
    "masked",
    "blank", //
    "classify",
    "signal",
    "class",
    "which",
    "is",
    "this", //
    "red",
    "green",
    "blue",
    "gray",
];

pub const SIZE: usize = SYMBOLS.len();

fn index() -> &'static HashMap<&'static str, usize> {
    static INDEX: OnceLock<HashMap<&'static str, usize>> = OnceLock::new();
    INDEX.get_or_init(|| SYMBOLS.iter().enumerate().map(|(i, s)| (*s, i)).collect())
}

pub fn symbol(id: usize) -> &'static str {
    SYMBOLS.get(id).copied().unwrap_or("<unk>")
}

pub fn lookup(word: &str) -> Option<usize> {
    index().get(word).copied()
}

/// Lowercases and splits on whitespace; unknown words become `<unk>`.
pub fn encode(text: &str) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| lookup(&w.to_lowercase()).unwrap_or(UNK))
        .collect()
}

/// Like [`encode`] but rejects words outside the vocabulary.
pub fn encode_strict(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            lookup(&w.to_lowercase())
                .ok_or_else(|| Error::Data(format!("word {w:?} is not in the vocabulary")))
        })
        .collect()
}

/// Joins symbols with single spaces, stopping at the first `<eos>`.
pub fn decode(ids: &[usize]) -> String {
    ids.iter()
        .take_while(|&&t| t != EOS)
        .map(|&t| symbol(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace-normalised lowercase form used for exact-match grading.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
