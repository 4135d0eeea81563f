//! Prompt templates, the fixed vocabulary with the reserved concept token,
//! and the small token-mixing conditioner producing per-token condition
//! vectors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{AdaptedLinear, AdapterMode};
use crate::corpus::ObjectKind;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Surface word of the learnable concept token.
pub const CONCEPT_WORD: &str = "sks";
pub const PAD_WORD: &str = "<pad>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTemplate {
    /// "a photo of sks"
    Defect,
    /// "a {object} with sks"
    Object,
    /// "a photo of {object}"; conditioning used while pre-training the base
    /// inpainting model.
    Plain,
}

/// Fixed vocabulary: pad, template words, the concept token, object names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<String> = [PAD_WORD, "a", "photo", "of", "with", CONCEPT_WORD]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(ObjectKind::ALL.iter().map(|o| o.name().to_string()));
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn concept_id(&self) -> usize {
        self.id(CONCEPT_WORD).expect("concept token in vocabulary")
    }
}

/// Token ids padded to the conditioner's sequence length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<usize>,
    /// Position of the concept token, when the template contains it.
    pub concept_position: Option<usize>,
}

impl TokenizedPrompt {
    pub fn words<'a>(&self, vocab: &'a Vocab) -> Vec<&'a str> {
        self.ids.iter().map(|&i| vocab.word(i)).collect()
    }
}

pub fn tokenize(vocab: &Vocab, template: PromptTemplate, object: &str, seq_len: usize) -> Result<TokenizedPrompt> {
    let words: Vec<&str> = match template {
        PromptTemplate::Defect => vec!["a", "photo", "of", CONCEPT_WORD],
        PromptTemplate::Object => vec!["a", object, "with", CONCEPT_WORD],
        PromptTemplate::Plain => vec!["a", "photo", "of", object],
    };
    if template != PromptTemplate::Defect
        && !ObjectKind::ALL.iter().any(|o| o.name() == object)
    {
        return Err(Error::InvalidArgument(format!("unknown object name {object:?}")));
    }
    if words.len() > seq_len {
        return Err(Error::Config(format!("sequence length {seq_len} is shorter than the prompt")));
    }
    let mut ids: Vec<usize> = words
        .iter()
        .map(|w| vocab.id(w).expect("template word in vocabulary"))
        .collect();
    let concept_position = ids.iter().position(|&i| i == vocab.concept_id());
    ids.resize(seq_len, vocab.id(PAD_WORD).unwrap());
    Ok(TokenizedPrompt {
        ids,
        concept_position,
    })
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), ParamGroup::Conditioner),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamGroup::Conditioner),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        g.layer_norm(x, ga, be)
    }
}

#[derive(Clone, Debug)]
struct MixerLayer {
    norm_tokens: Norm,
    mix_weight: ParamId,
    mix_bias: ParamId,
    norm_channels: Norm,
    fc1: AdaptedLinear,
    fc2: AdaptedLinear,
}

/// Embedding table plus two residual token-mixer layers.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub vocab: Vocab,
    pub seq_len: usize,
    pub dim: usize,
    pub table: ParamId,
    pub positions: ParamId,
    /// Additive delta on the concept token's embedding; part of the adapter
    /// set, zero-initialised.
    pub concept_delta: ParamId,
    layers: Vec<MixerLayer>,
    final_norm: Norm,
}

impl Conditioner {
    pub fn new(store: &mut ParamStore, seq_len: usize, dim: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let vocab = Vocab::default();
        let table = store.add("cond.table", Tensor::randn(rng, &[vocab.len(), dim], 1.0), ParamGroup::Conditioner);
        let positions = store.add("cond.positions", Tensor::randn(rng, &[seq_len, dim], 0.1), ParamGroup::Conditioner);
        let concept_delta = store.add("cond.concept_delta", Tensor::zeros(&[dim]), ParamGroup::ConditionerAdapter);
        let layers = (0..2)
            .map(|i| {
                let name = format!("cond.mixer{i}");
                let mix = Tensor::randn(rng, &[seq_len, seq_len], 0.1 / (seq_len as f32).sqrt());
                MixerLayer {
                    norm_tokens: Norm::new(store, &format!("{name}.norm_tokens"), dim),
                    mix_weight: store.add(format!("{name}.mix.weight"), mix, ParamGroup::Conditioner),
                    mix_bias: store.add(format!("{name}.mix.bias"), Tensor::zeros(&[seq_len]), ParamGroup::Conditioner),
                    norm_channels: Norm::new(store, &format!("{name}.norm_channels"), dim),
                    fc1: AdaptedLinear::new(store, &format!("{name}.fc1"), dim, 2 * dim, true, rank, ParamGroup::Conditioner, ParamGroup::ConditionerAdapter, rng),
                    fc2: AdaptedLinear::new(store, &format!("{name}.fc2"), 2 * dim, dim, true, rank, ParamGroup::Conditioner, ParamGroup::ConditionerAdapter, rng),
                }
            })
            .collect();
        let final_norm = Norm::new(store, "cond.final_norm", dim);
        Self {
            vocab,
            seq_len,
            dim,
            table,
            positions,
            concept_delta,
            layers,
            final_norm,
        }
    }

    pub fn tokenize(&self, template: PromptTemplate, object: &str) -> Result<TokenizedPrompt> {
        tokenize(&self.vocab, template, object, self.seq_len)
    }

    pub fn adapted_linears(&self) -> Vec<&AdaptedLinear> {
        self.layers.iter().flat_map(|l| [&l.fc1, &l.fc2]).collect()
    }

    /// Condition vectors `[N, seq_len, dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prompts: &[TokenizedPrompt],
        mode: AdapterMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let n = prompts.len();
        let l = self.seq_len;
        let ids: Vec<usize> = prompts.iter().flat_map(|p| p.ids.iter().copied()).collect();
        let table = g.param(store, self.table);
        let mut h = g.embedding(table, &ids, &[n, l]);
        if mode.active {
            let concept = self.vocab.concept_id();
            let rows: Vec<usize> = ids
                .iter()
                .enumerate()
                .filter(|(_, &id)| id == concept)
                .map(|(r, _)| r)
                .collect();
            if !rows.is_empty() {
                let delta = g.param(store, self.concept_delta);
                h = g.add_rows(h, delta, &rows);
            }
        }
        let pos = g.param(store, self.positions);
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
        let pos = g.embedding(pos, &pos_ids, &[n, l]);
        h = g.add(h, pos);
        for layer in &self.layers {
            let t = layer.norm_tokens.forward(g, store, h);
            let w = g.param(store, layer.mix_weight);
            let b = g.param(store, layer.mix_bias);
            let t = g.token_mix(t, w, b);
            h = g.add(h, t);
            let c = layer.norm_channels.forward(g, store, h);
            let c = layer.fc1.forward(g, store, c, mode, rng.as_deref_mut());
            let c = g.silu(c);
            let c = layer.fc2.forward(g, store, c, mode, rng.as_deref_mut());
            h = g.add(h, c);
        }
        self.final_norm.forward(g, store, h)
    }

    /// Folds the concept delta into the embedding table.
    pub fn merge_concept_delta(&self, store: &mut ParamStore) {
        let delta = store.value(self.concept_delta).data().to_vec();
        let concept = self.vocab.concept_id();
        let d = self.dim;
        let table = store.value_mut(self.table).data_mut();
        for (a, b) in table[concept * d..(concept + 1) * d].iter_mut().zip(&delta) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_have_expected_words() {
        let v = Vocab::default();
        let p = tokenize(&v, PromptTemplate::Object, "disc", 6).unwrap();
        assert_eq!(p.words(&v), ["a", "disc", "with", "sks", "<pad>", "<pad>"]);
        assert_eq!(p.concept_position, Some(3));
        let d = tokenize(&v, PromptTemplate::Defect, "", 6).unwrap();
        assert_eq!(d.ids.iter().filter(|&&i| i == v.concept_id()).count(), 1);
        let plain = tokenize(&v, PromptTemplate::Plain, "tile", 6).unwrap();
        assert_eq!(plain.concept_position, None);
        assert!(matches!(tokenize(&v, PromptTemplate::Object, "teapot", 6), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn concept_token_has_one_reserved_id() {
        let v = Vocab::default();
        assert_eq!((0..v.len()).filter(|&i| v.word(i) == CONCEPT_WORD).count(), 1);
    }
}
