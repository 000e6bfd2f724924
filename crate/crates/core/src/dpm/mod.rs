//! Dynamic prompt module.
//!
//! Dataset prompts and a category memory bank are embedded from short
//! sentences whose leading tokens are learnable context vectors. A stack of
//! masked ("localized") attention layers specializes the active dataset's
//! prompt against the categories it annotates; the result, together with
//! those categories' bank slices, conditions image features (or decoder
//! content queries) through cross-attention.

pub mod tokenizer;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Ffn, Init, LayerNorm, Scope, MASK_VALUE};
use crate::registry::CategoryRegistry;
pub use tokenizer::{tokenize, BpeTokenizer, TokenSequence, EOS, PAD, SOS, VOCAB_SIZE};

/// Where the prompt module is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpmMode {
    /// Enhance the flattened multi-scale feature tokens.
    Feature,
    /// Enhance the learnable content queries; features reach the decoder as-is.
    Query,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over the non-padding token embeddings.
    Mean,
    /// Embedding at the end-of-text position.
    Eos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpmConfig {
    pub mode: DpmMode,
    pub use_memory_bank: bool,
    pub use_dataset_prompt: bool,
    /// Learnable context tokens T placed before each name.
    pub context_tokens: usize,
    /// Fixed sentence length L^S.
    pub seq_len: usize,
    /// Localized attention layers L (also the cross-attention depth).
    pub layers: usize,
    pub pooling: Pooling,
}

impl Default for DpmConfig {
    fn default() -> Self {
        Self {
            mode: DpmMode::Feature,
            use_memory_bank: true,
            use_dataset_prompt: true,
            context_tokens: 16,
            seq_len: 77,
            layers: 3,
            pooling: Pooling::Mean,
        }
    }
}

impl DpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode != DpmMode::Off && !self.use_memory_bank && !self.use_dataset_prompt {
            return Err(Error::Config(
                "dpm needs the memory bank or the dataset prompt (or mode = off)".into(),
            ));
        }
        if self.seq_len < self.context_tokens + 3 {
            return Err(Error::Config(format!(
                "dpm.seq_len = {} leaves no room for a name after {} context tokens",
                self.seq_len, self.context_tokens
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("dpm.layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sentence `[SOS] [V_1..V_T] name [EOS] pad…`, with ids mapped to rows
/// of the compact embedding table.
#[derive(Debug, Clone)]
struct Sentence {
    tokens: TokenSequence,
    /// Row per position; context positions hold a placeholder row.
    rows: Vec<u32>,
    content_len: usize,
}

/// Learnable tables behind the dataset prompts and the category memory bank.
///
/// Token embeddings are stored only for ids that occur in the registry's
/// sentences; other vocabulary rows would never be read.
pub struct PromptTables {
    token_table: Tensor,
    data_context: Tensor,
    type_context: Tensor,
    data_sentences: Vec<Sentence>,
    type_sentences: Vec<Sentence>,
    token_rows: BTreeMap<u32, usize>,
    context_tokens: usize,
    seq_len: usize,
    dim: usize,
    pooling: Pooling,
}

/// Placeholder text tokenized in the context slots.
const CONTEXT_PLACEHOLDER: &str = "X";

fn sentence_text(context_tokens: usize, name: &str) -> String {
    let mut words = vec![CONTEXT_PLACEHOLDER; context_tokens];
    words.push(name);
    words.join(" ")
}

impl PromptTables {
    pub fn new(
        scope: &Scope,
        registry: &CategoryRegistry,
        context_tokens: usize,
        seq_len: usize,
        dim: usize,
        pooling: Pooling,
    ) -> Result<Self> {
        let tok = BpeTokenizer::shared();
        let data_tokens: Vec<TokenSequence> = registry
            .datasets()
            .iter()
            .map(|d| tok.tokenize(&sentence_text(context_tokens, &d.name), seq_len))
            .collect();
        let type_tokens: Vec<TokenSequence> = registry
            .global_names()
            .iter()
            .map(|c| tok.tokenize(&sentence_text(context_tokens, c), seq_len))
            .collect();

        let mut token_rows = BTreeMap::new();
        for seq in data_tokens.iter().chain(&type_tokens) {
            for (pos, &id) in seq.ids.iter().enumerate() {
                let is_context = pos >= 1 && pos <= context_tokens;
                if !is_context {
                    token_rows.entry(id).or_insert(0);
                }
            }
        }
        for (row, v) in token_rows.values_mut().enumerate() {
            *v = row;
        }
        let to_sentence = |tokens: TokenSequence| -> Sentence {
            let rows = tokens
                .ids
                .iter()
                .enumerate()
                .map(|(pos, id)| {
                    if pos >= 1 && pos <= context_tokens {
                        0
                    } else {
                        token_rows[id] as u32
                    }
                })
                .collect();
            let content_len = tokens.content_len();
            Sentence {
                tokens,
                rows,
                content_len,
            }
        };
        let data_sentences = data_tokens.into_iter().map(to_sentence).collect();
        let type_sentences = type_tokens.into_iter().map(to_sentence).collect();

        let token_table = scope.get(
            &[token_rows.len(), dim],
            "token_embedding",
            Init::Normal(0.02),
        )?;
        let ctx_len = context_tokens.max(1);
        let data_context = scope.get(&[ctx_len, dim], "data_context", Init::Normal(0.02))?;
        let type_context = scope.get(&[ctx_len, dim], "type_context", Init::Normal(0.02))?;
        Ok(Self {
            token_table,
            data_context,
            type_context,
            data_sentences,
            type_sentences,
            token_rows,
            context_tokens,
            seq_len,
            dim,
            pooling,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of distinct vocabulary ids with a stored embedding row.
    pub fn stored_tokens(&self) -> usize {
        self.token_rows.len()
    }

    pub fn dataset_tokens(&self, d: usize) -> &TokenSequence {
        &self.data_sentences[d].tokens
    }

    pub fn category_tokens(&self, c: usize) -> &TokenSequence {
        &self.type_sentences[c].tokens
    }

    fn embed(&self, s: &Sentence, context: &Tensor) -> Result<Tensor> {
        let device = self.token_table.device();
        let rows = Tensor::from_vec(s.rows.clone(), s.rows.len(), device)?;
        let tokens = self.token_table.index_select(&rows, 0)?;
        if self.context_tokens == 0 {
            return Ok(tokens);
        }
        let t = self.context_tokens;
        Ok(Tensor::cat(
            &[
                tokens.narrow(0, 0, 1)?,
                context.narrow(0, 0, t)?,
                tokens.narrow(0, 1 + t, self.seq_len - 1 - t)?,
            ],
            0,
        )?)
    }

    /// Dataset prompts `(D, E)`.
    pub fn dataset_prompts(&self) -> Result<Tensor> {
        let rows = self
            .data_sentences
            .iter()
            .map(|s| {
                let e = self.embed(s, &self.data_context)?;
                Ok(match self.pooling {
                    Pooling::Mean => e.narrow(0, 0, s.content_len)?.mean_keepdim(0)?,
                    Pooling::Eos => e.narrow(0, s.content_len - 1, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Category memory bank `(C, L^S, E)`.
    pub fn memory_bank(&self) -> Result<Tensor> {
        let slices = self
            .type_sentences
            .iter()
            .map(|s| self.embed(s, &self.type_context))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&slices, 0)?)
    }
}

/// Additive mask row over the flattened memory bank for dataset `d`: zero on
/// positions whose category is visible, `MASK_VALUE` elsewhere.
pub fn build_visibility_mask(registry: &CategoryRegistry, d: usize, seq_len: usize) -> Vec<f64> {
    let visible = registry.visible(d);
    (0..registry.num_categories() * seq_len)
        .map(|j| {
            if visible.binary_search(&(j / seq_len)).is_ok() {
                0.0
            } else {
                MASK_VALUE
            }
        })
        .collect()
}

fn mask_tensor(mask: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(mask.to_vec(), (1, mask.len()), device)?.to_dtype(dtype)?)
}

/// `Q' = FFN(LN(CA(Q, K, V, M))) + Q` with single-head masked cross-attention.
#[derive(Clone, Debug)]
pub struct LocalizedAttentionLayer {
    attn: Attention,
    norm: LayerNorm,
    ffn: Ffn,
}

impl LocalizedAttentionLayer {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(&scope.pp("attn"), dim, 1)?,
            norm: LayerNorm::new(&scope.pp("norm"), dim)?,
            ffn: Ffn::new(&scope.pp("ffn"), dim, 4 * dim)?,
        })
    }

    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, key, value, mask)?.0)
    }

    /// Also returns the post-softmax attention weights `(n_q, n_k)`.
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        if let Some(m) = mask {
            let row_max = m.max_keepdim(candle_core::D::Minus1)?.flatten_all()?;
            let row_max = row_max.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if row_max.iter().any(|&v| v <= MASK_VALUE / 2.0) {
                return Err(Error::Numerical(
                    "attention mask hides every key for some query".into(),
                ));
            }
        }
        let (ca, w) = self.attn.forward_with_weights(query, key, value, mask)?;
        let out = (self.ffn.forward(&self.norm.forward(&ca)?)? + query)?;
        Ok((out, w.squeeze(0)?))
    }
}

/// Keys/values for enhancement: the specialized prompt followed by the
/// visible categories' bank slices in global order.
pub fn assemble_kv(specialized: &Tensor, bank: &Tensor, visible: &[usize]) -> Result<Tensor> {
    let bank_part = visible_bank(bank, visible)?;
    Ok(Tensor::cat(&[specialized, &bank_part], 0)?)
}

fn visible_bank(bank: &Tensor, visible: &[usize]) -> Result<Tensor> {
    if visible.is_empty() {
        return Err(Error::Data("dataset with no visible category".into()));
    }
    let (_, seq_len, dim) = bank.dims3()?;
    let idx: Vec<u32> = visible.iter().map(|&i| i as u32).collect();
    let idx = Tensor::from_vec(idx, visible.len(), bank.device())?;
    Ok(bank
        .index_select(&idx, 0)?
        .reshape((visible.len() * seq_len, dim))?)
}

/// Learned part of the prompt module.
pub struct Dpm {
    pub config: DpmConfig,
    pub tables: PromptTables,
    localized: Vec<LocalizedAttentionLayer>,
    enhancers: Vec<LocalizedAttentionLayer>,
}

impl Dpm {
    pub fn new(scope: &Scope, registry: &CategoryRegistry, config: &DpmConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let tables = PromptTables::new(
            &scope.pp("prompts"),
            registry,
            config.context_tokens,
            config.seq_len,
            dim,
            config.pooling,
        )?;
        let localized = (0..config.layers)
            .map(|l| LocalizedAttentionLayer::new(&scope.pp(format!("localized.{l}")), dim))
            .collect::<Result<_>>()?;
        let enhancers = (0..config.layers)
            .map(|l| LocalizedAttentionLayer::new(&scope.pp(format!("enhance.{l}")), dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            tables,
            localized,
            enhancers,
        })
    }

    /// Runs the localized attention stack on prompt row `d` against the
    /// flattened bank under the dataset's visibility mask.
    pub fn specialize_dataset_prompt(
        &self,
        prompts: &Tensor,
        bank: &Tensor,
        mask: &[f64],
        d: usize,
    ) -> Result<Tensor> {
        let (c, seq_len, dim) = bank.dims3()?;
        let flat = bank.reshape((c * seq_len, dim))?;
        let mask = mask_tensor(mask, bank.dtype(), bank.device())?;
        let mut q = prompts.narrow(0, d, 1)?;
        for layer in &self.localized {
            q = layer.forward(&q, &flat, &flat, Some(&mask))?;
        }
        Ok(q)
    }

    /// Cross-attention stack with `inputs` as queries and `kv` as keys/values.
    pub fn enhance(&self, inputs: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let mut x = inputs.clone();
        for layer in &self.enhancers {
            x = layer.forward(&x, kv, kv, None)?;
        }
        Ok(x)
    }

    /// Keys/values for dataset `d` given explicit prompt/bank tensors.
    pub fn keys_values(
        &self,
        prompts: &Tensor,
        bank: &Tensor,
        registry: &CategoryRegistry,
        d: usize,
    ) -> Result<Tensor> {
        let visible = registry.visible(d);
        match (self.config.use_dataset_prompt, self.config.use_memory_bank) {
            (true, true) => {
                let mask = build_visibility_mask(registry, d, bank.dims3()?.1);
                let special = self.specialize_dataset_prompt(prompts, bank, &mask, d)?;
                assemble_kv(&special, bank, visible)
            }
            (false, true) => visible_bank(bank, visible),
            (true, false) => Ok(prompts.narrow(0, d, 1)?),
            (false, false) => Err(Error::Config("dpm has neither prompts nor bank".into())),
        }
    }

    /// Full module on explicit tables, for callers that perturb them.
    pub fn forward_with_tables(
        &self,
        inputs: &Tensor,
        prompts: &Tensor,
        bank: &Tensor,
        registry: &CategoryRegistry,
        d: usize,
    ) -> Result<Tensor> {
        let kv = self.keys_values(prompts, bank, registry, d)?;
        self.enhance(inputs, &kv)
    }

    /// Enhances `inputs` for dataset `d` using the learned tables.
    pub fn forward(&self, inputs: &Tensor, registry: &CategoryRegistry, d: usize) -> Result<Tensor> {
        if d >= registry.num_datasets() {
            return Err(Error::OutOfRange(format!("dataset id {d}")));
        }
        let prompts = self.tables.dataset_prompts()?;
        let bank = self.tables.memory_bank()?;
        self.forward_with_tables(inputs, &prompts, &bank, registry, d)
    }
}
