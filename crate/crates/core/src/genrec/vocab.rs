//! Token alphabet, prompt templates and whole-word index construction.
//!
//! Entity ids are spelled character by character (`item_123` becomes
//! `item _ 1 2 3`) and every piece of one id shares a single whole-word
//! slot in `Z`. Plain words map to slot 0.

use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];
const ID_PIECES: [&str; 13] = ["user", "item", "_", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// Sequential-recommendation prompt. `{user}` and `{history}` are filled by
/// [`render_sr_prompt`].
pub const SR_TEMPLATE: &str = "user_{user} has purchased {history} , predict the next item";

/// Direct-recommendation prompt. Candidates restrict decoding rather than
/// appearing in the prompt.
pub const DR_TEMPLATE: &str = "which item should be recommended to user_{user} ?";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sr,
    Dr,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Sr => "SR",
            Task::Dr => "DR",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityKind {
    User,
    Item,
}

/// Maps entities to whole-word slots for one task.
///
/// SR: item `v` -> `1 + v`, every user id -> `n_items + 1` (one shared row,
/// so the SR table has `n_items + 1` rows). DR: user `u` -> `1 + u`, item
/// `v` -> `1 + n_users + v`. Slot 0 is the shared non-id embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotMap {
    pub task: Task,
    pub n_users: usize,
    pub n_items: usize,
}

impl SlotMap {
    pub fn slot(&self, kind: EntityKind, index: usize) -> Result<usize> {
        let (limit, label) = match kind {
            EntityKind::User => (self.n_users, "user"),
            EntityKind::Item => (self.n_items, "item"),
        };
        if index >= limit {
            return Err(Error::UnknownEntity(format!("{label}_{index}")));
        }
        Ok(match (self.task, kind) {
            (Task::Sr, EntityKind::Item) => 1 + index,
            (Task::Sr, EntityKind::User) => 1 + self.n_items,
            (Task::Dr, EntityKind::User) => 1 + index,
            (Task::Dr, EntityKind::Item) => 1 + self.n_users + index,
        })
    }

    /// Rows in the whole-word table (slot 0 excluded).
    pub fn table_rows(&self) -> usize {
        match self.task {
            Task::Sr => self.n_items + 1,
            Task::Dr => self.n_users + self.n_items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Specials, id pieces, then the sorted distinct words of `extra`.
    pub fn new<'a>(extra: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = SPECIALS.iter().chain(ID_PIECES.iter()).map(|s| s.to_string()).collect();
        let fixed: BTreeSet<&str> = SPECIALS.iter().chain(ID_PIECES.iter()).copied().collect();
        let mut rest: BTreeSet<&str> = BTreeSet::new();
        for w in extra {
            if !fixed.contains(w) {
                rest.insert(w);
            }
        }
        words.extend(rest.into_iter().map(str::to_owned));
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Vocabulary covering both built-in templates.
    pub fn for_templates() -> Self {
        let words = SR_TEMPLATE
            .split_whitespace()
            .chain(DR_TEMPLATE.split_whitespace())
            .filter(|w| !w.contains('{'));
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn digit(&self, d: u8) -> TokenId {
        self.id(&((b'0' + d) as char).to_string())
    }

    /// Decimal digits of `index` followed by `<eos>`: the decoder target for an item.
    pub fn id_target(&self, index: usize) -> Vec<TokenId> {
        let mut t: Vec<TokenId> = index.to_string().bytes().map(|b| self.digit(b - b'0')).collect();
        t.push(EOS);
        t
    }

    /// Inverse of [`Vocab::id_target`]; `None` if the tokens are not digits + eos.
    pub fn parse_id_target(&self, tokens: &[TokenId]) -> Option<usize> {
        let body = tokens.strip_suffix(&[EOS]).unwrap_or(tokens);
        if body.is_empty() {
            return None;
        }
        let mut s = String::with_capacity(body.len());
        for &t in body {
            let w = self.word(t);
            if w.len() != 1 || !w.as_bytes()[0].is_ascii_digit() {
                return None;
            }
            s.push_str(w);
        }
        s.parse().ok()
    }
}

/// Token ids `X`, aligned whole-word slots `Z`, and the decoder target `Y`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedInput {
    pub tokens: Vec<TokenId>,
    pub slots: Vec<usize>,
    pub target: Vec<TokenId>,
}

fn parse_entity(word: &str) -> Option<(EntityKind, &str)> {
    let (kind, digits) = if let Some(rest) = word.strip_prefix("user_") {
        (EntityKind::User, rest)
    } else if let Some(rest) = word.strip_prefix("item_") {
        (EntityKind::Item, rest)
    } else {
        return None;
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((kind, digits))
}

/// Splits `text` on whitespace; `user_N` / `item_N` words expand to their
/// character pieces sharing one slot, other words take slot 0.
pub fn tokenize(text: &str, vocab: &Vocab, slots: &SlotMap) -> Result<TokenizedInput> {
    let mut tokens = Vec::new();
    let mut z = Vec::new();
    for word in text.split_whitespace() {
        match parse_entity(word) {
            Some((kind, digits)) => {
                let index: usize = digits.parse().map_err(|_| Error::UnknownEntity(word.to_owned()))?;
                let slot = slots.slot(kind, index)?;
                let head = match kind {
                    EntityKind::User => "user",
                    EntityKind::Item => "item",
                };
                tokens.push(vocab.id(head));
                tokens.push(vocab.id("_"));
                tokens.extend(digits.bytes().map(|b| vocab.digit(b - b'0')));
                z.resize(tokens.len(), slot);
            }
            None => {
                tokens.push(vocab.id(word));
                z.push(0);
            }
        }
    }
    Ok(TokenizedInput {
        tokens,
        slots: z,
        target: Vec::new(),
    })
}

/// Rebuilds the whitespace-joined text, gluing id pieces back together.
pub fn detokenize(tokens: &[TokenId], vocab: &Vocab) -> String {
    let mut words: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let w = vocab.word(tokens[i]);
        let is_head = w == "user" || w == "item";
        if is_head && tokens.get(i + 1).map(|&t| vocab.word(t)) == Some("_") {
            let mut j = i + 2;
            let mut id = format!("{w}_");
            while let Some(&t) = tokens.get(j) {
                let d = vocab.word(t);
                if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() {
                    id.push_str(d);
                    j += 1;
                } else {
                    break;
                }
            }
            if j > i + 2 {
                words.push(id);
                i = j;
                continue;
            }
        }
        words.push(w.to_owned());
        i += 1;
    }
    words.join(" ")
}

pub fn render_sr_prompt(user: usize, history: &[usize]) -> String {
    let history: Vec<String> = history.iter().map(|v| format!("item_{v}")).collect();
    SR_TEMPLATE
        .replace("{user}", &user.to_string())
        .replace("{history}", &history.join(" "))
}

pub fn render_dr_prompt(user: usize) -> String {
    DR_TEMPLATE.replace("{user}", &user.to_string())
}
