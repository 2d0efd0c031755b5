//! Beam search with optional prefix-trie constraints.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::vocab::TokenId;
use crate::error::{Error, Result};

/// Anything that can score the next token given a decoded prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the whole vocabulary for the token after `prefix`.
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Prefix trie over allowed output sequences.
#[derive(Clone, Debug, Default)]
pub struct TokenTrie {
    children: Vec<BTreeMap<TokenId, usize>>,
    sequences: usize,
}

impl TokenTrie {
    pub fn new<'a>(sequences: impl IntoIterator<Item = &'a [TokenId]>) -> Self {
        let mut trie = Self {
            children: vec![BTreeMap::new()],
            sequences: 0,
        };
        for seq in sequences {
            let mut node = 0;
            for &t in seq {
                let next = trie.children.len();
                node = *trie.children[node].entry(t).or_insert_with(|| next);
                if node == next {
                    trie.children.push(BTreeMap::new());
                }
            }
            trie.sequences += 1;
        }
        trie
    }

    pub fn is_empty(&self) -> bool {
        self.children[0].is_empty()
    }

    fn node(&self, prefix: &[TokenId]) -> Option<usize> {
        let mut node = 0;
        for t in prefix {
            node = *self.children[node].get(t)?;
        }
        Some(node)
    }

    /// Allowed continuations of `prefix`, ascending.
    pub fn allowed(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        self.node(prefix)
            .map(|n| self.children[n].keys().copied().collect())
            .unwrap_or_default()
    }

    /// True if `prefix` is a complete stored sequence with no continuation.
    pub fn is_leaf(&self, prefix: &[TokenId]) -> bool {
        self.node(prefix).is_some_and(|n| self.children[n].is_empty())
    }

    pub fn contains(&self, seq: &[TokenId]) -> bool {
        self.is_leaf(seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    /// A hypothesis ending in this token is complete.
    pub eos: Option<TokenId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    /// Summed token log-probabilities (no length normalization).
    pub log_prob: f64,
}

fn ranking(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Keeps the `width` best of finished and extended hypotheses at every
/// step. Results are sorted by score, ties broken lexicographically.
pub fn beam_search(
    scorer: &dyn StepScorer,
    cfg: BeamConfig,
    constraint: Option<&TokenTrie>,
) -> Result<Vec<Hypothesis>> {
    if cfg.width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if constraint.is_some_and(TokenTrie::is_empty) {
        return Err(Error::Empty("constraint set"));
    }
    let is_done = |h: &Hypothesis| {
        h.tokens.len() >= cfg.max_len
            || cfg.eos.is_some_and(|e| h.tokens.last() == Some(&e))
            || constraint.is_some_and(|t| t.is_leaf(&h.tokens))
    };

    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    while !active.is_empty() {
        let mut pool = std::mem::take(&mut finished);
        for h in &active {
            let lp = scorer.log_probs(&h.tokens)?;
            if lp.len() != scorer.vocab_size() {
                return Err(Error::shape(format!(
                    "scorer returned {} log-probs for vocab {}",
                    lp.len(),
                    scorer.vocab_size()
                )));
            }
            let allowed: Vec<TokenId> = match constraint {
                Some(trie) => trie.allowed(&h.tokens),
                None => (0..lp.len()).collect(),
            };
            for t in allowed {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                pool.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp[t],
                });
            }
        }
        pool.sort_by(ranking);
        pool.truncate(cfg.width);
        active = Vec::new();
        for h in pool {
            if is_done(&h) {
                finished.push(h);
            } else {
                active.push(h);
            }
        }
    }
    finished.sort_by(ranking);
    Ok(finished)
}

/// Argmax decoding, smallest token on ties.
pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize, eos: Option<TokenId>) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    };
    while h.tokens.len() < max_len {
        let lp = scorer.log_probs(&h.tokens)?;
        let (best, score) = lp.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
        );
        h.tokens.push(best);
        h.log_prob += score;
        if eos == Some(best) {
            break;
        }
    }
    Ok(h)
}
