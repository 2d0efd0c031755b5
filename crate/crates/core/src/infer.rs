//! Recommendation from a trained state via constrained beam search.

use crate::error::{Error, Result};
use crate::eval::Ranker;
use crate::genrec::model::Encoded;
use crate::genrec::vocab::{TokenId, EOS};
use crate::genrec::{beam_search, inject_inputs, BeamConfig, EncodedPrompt, Task, TokenTrie};
use crate::tensor::Mat;
use crate::train::{derive, prompt_input, Derived, ModelState, Prepared};

pub struct Recommender<'a> {
    pub state: &'a ModelState,
    pub prep: &'a Prepared,
    pub derived: Derived,
    all_items: TokenTrie,
}

impl<'a> Recommender<'a> {
    pub fn new(state: &'a ModelState, prep: &'a Prepared) -> Result<Self> {
        let derived = derive(state, prep)?;
        let targets: Vec<Vec<TokenId>> = (0..prep.slots.n_items).map(|v| prep.vocab.id_target(v)).collect();
        Ok(Self {
            state,
            prep,
            derived,
            all_items: TokenTrie::new(targets.iter().map(Vec::as_slice)),
        })
    }

    fn table(&self) -> &Mat {
        match self.prep.task {
            Task::Sr => &self.state.params.omega_s,
            Task::Dr => self.derived.e_tilde.as_ref().expect("derived for DR"),
        }
    }

    pub fn encode(&self, user: usize, history: &[usize]) -> Result<Encoded> {
        let p = &self.state.params;
        let input = prompt_input(
            self.prep.task,
            &self.prep.vocab,
            &self.prep.slots,
            user,
            history,
            self.state.config.max_history,
        )?;
        let x = p.backbone.embed_tokens(&input.tokens)?;
        let xt = inject_inputs(
            &x,
            &p.prompts,
            &input.slots,
            p.omega_0.row(0),
            self.table(),
            self.state.config.beta,
        )?;
        p.backbone.encode(&xt)
    }

    /// Item ids with their best beam log-probability, best first, one entry
    /// per item. Without `candidates` every item is allowed.
    pub fn recommend(
        &self,
        user: usize,
        history: &[usize],
        candidates: Option<&[usize]>,
        beam: usize,
    ) -> Result<Vec<(usize, f64)>> {
        let n_items = self.prep.slots.n_items;
        let own;
        let trie = match candidates {
            None => &self.all_items,
            Some(c) => {
                if let Some(&v) = c.iter().find(|&&v| v >= n_items) {
                    return Err(Error::IndexOutOfRange { index: v, len: n_items });
                }
                let t: Vec<Vec<TokenId>> = c.iter().map(|&v| self.prep.vocab.id_target(v)).collect();
                own = TokenTrie::new(t.iter().map(Vec::as_slice));
                &own
            }
        };
        let scorer = EncodedPrompt {
            backbone: &self.state.params.backbone,
            encoded: self.encode(user, history)?,
        };
        let cfg = BeamConfig {
            width: beam,
            max_len: self.state.params.backbone.config.max_dec_len,
            eos: Some(EOS),
        };
        let hyps = beam_search(&scorer, cfg, Some(trie))?;
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(hyps.len());
        for h in hyps {
            if let Some(v) = self.prep.vocab.parse_id_target(&h.tokens) {
                if !out.iter().any(|(w, _)| *w == v) {
                    out.push((v, h.log_prob));
                }
            }
        }
        Ok(out)
    }
}

impl Ranker for Recommender<'_> {
    fn rank(&self, user: usize, history: &[usize], candidates: Option<&[usize]>, beam: usize) -> Result<Vec<usize>> {
        Ok(self
            .recommend(user, history, candidates, beam)?
            .into_iter()
            .map(|(v, _)| v)
            .collect())
    }
}
