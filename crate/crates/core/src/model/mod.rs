//! Detection trunk shared by all datasets, with per-dataset heads.
//!
//! Pipeline: backbone -> encoder -> prompt module -> first-stage heads ->
//! top-k reference points -> decoder with iterative refinement -> per-layer
//! heads (deep supervision).

pub mod backbone;
pub mod transformer;

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::cdn::{cdn_group_mask, denormalize, QueryKind, QuerySet};
use crate::dpm::{Dpm, DpmConfig, DpmMode};
use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::nn::{
    inverse_sigmoid, sine_embedding, softmax_last, to_rows, Init, LayerNorm, Linear, Mlp,
    ParamStore, Scope,
};
use crate::registry::CategoryRegistry;
pub use backbone::{check_image_size, image_to_tensor, Backbone, FeatureLevel, MultiScaleFeatures};
pub use transformer::{AttentionStrategy, DecoderInputs, DecoderLayer, EncoderLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width E.
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of candidate queries k.
    pub num_queries: usize,
    pub backbone_channels: [usize; 4],
    pub attention: AttentionStrategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            heads: 8,
            ffn_dim: 1024,
            encoder_layers: 3,
            decoder_layers: 3,
            num_queries: 900,
            backbone_channels: [32, 64, 128, 256],
            attention: AttentionStrategy::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("model.dim = {} must be a positive multiple of 4", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.heads = {} must divide model.dim = {}",
                self.heads, self.dim
            )));
        }
        if self.num_queries == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("model.num_queries and model.decoder_layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Coordinate and classification branches for one dataset.
#[derive(Clone, Debug)]
pub struct Head {
    coord: Linear,
    class: Linear,
}

impl Head {
    fn new(scope: &Scope, dim: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            coord: Linear::zeros(&scope.pp("coord"), dim, 2)?,
            class: Linear::new(&scope.pp("class"), dim, num_classes + 1)?,
        })
    }

    /// Refines `reference` (normalized, `(n, 2)`) with predicted offsets in
    /// logit space.
    fn forward(&self, x: &Tensor, reference: &Tensor) -> Result<HeadOutput> {
        let offsets = self.coord.forward(x)?;
        let coords = candle_nn::ops::sigmoid(&(inverse_sigmoid(reference)? + offsets)?)?;
        Ok(HeadOutput {
            coords,
            logits: self.class.forward(x)?,
        })
    }
}

/// Normalized coordinates `(n, 2)` and logits `(n, t_d + 1)`; the last
/// logit column is "no object".
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub coords: Tensor,
    pub logits: Tensor,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.coords.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn narrow(&self, start: usize, len: usize) -> Result<HeadOutput> {
        Ok(HeadOutput {
            coords: self.coords.narrow(0, start, len)?,
            logits: self.logits.narrow(0, start, len)?,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Result<HeadOutput> {
        let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
        let idx = Tensor::from_vec(idx, rows.len(), self.coords.device())?;
        Ok(HeadOutput {
            coords: self.coords.index_select(&idx, 0)?,
            logits: self.logits.index_select(&idx, 0)?,
        })
    }
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!(
            "k = {k} candidate queries but only {} tokens",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Everything the loss needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// First-stage predictions for the selected top-k tokens.
    pub first_stage: HeadOutput,
    pub selected_tokens: Vec<usize>,
    /// Per decoder layer, candidate (content) queries.
    pub layers: Vec<HeadOutput>,
    /// Per decoder layer, denoising queries in input order (possibly empty).
    pub cdn_layers: Vec<HeadOutput>,
    pub num_cdn: usize,
}

/// Intermediate tensors exposed for tests and diagnostics.
#[derive(Clone, Debug)]
pub struct Trace {
    pub features: MultiScaleFeatures,
    pub encoded: Tensor,
    pub memory: Tensor,
    pub reference_points: Vec<[f64; 2]>,
}

pub struct Model {
    pub config: ModelConfig,
    pub dpm_config: DpmConfig,
    registry: CategoryRegistry,
    store: ParamStore,
    backbone: Backbone,
    level_embed: Tensor,
    encoder: Vec<EncoderLayer>,
    dpm: Option<Dpm>,
    proposal_proj: Linear,
    proposal_norm: LayerNorm,
    first_heads: Vec<Head>,
    content_queries: Tensor,
    ref_point_head: Mlp,
    decoder: Vec<DecoderLayer>,
    layer_heads: Vec<Vec<Head>>,
    label_tables: Vec<Tensor>,
}

impl Model {
    pub fn new(
        config: &ModelConfig,
        dpm_config: &DpmConfig,
        registry: &CategoryRegistry,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let e = config.dim;
        let backbone = Backbone::new(&root.pp("backbone"), &config.backbone_channels, e)?;
        let level_embed = root.get(&[3, e], "level_embed", Init::Normal(1.0))?;
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderLayer::new(&root.pp(format!("encoder.{l}")), e, config.heads, config.ffn_dim))
            .collect::<Result<_>>()?;
        let dpm = match dpm_config.mode {
            DpmMode::Off => None,
            _ => Some(Dpm::new(&root.pp("dpm"), registry, dpm_config, e)?),
        };
        let proposal_proj = Linear::new(&root.pp("proposal.linear"), e, e)?;
        let proposal_norm = LayerNorm::new(&root.pp("proposal.norm"), e)?;
        let d_count = registry.num_datasets();
        let first_heads = (0..d_count)
            .map(|d| Head::new(&root.pp(format!("heads.first.{d}")), e, registry.num_classes(d)))
            .collect::<Result<_>>()?;
        let content_queries = root.get(&[config.num_queries, e], "content_queries", Init::Normal(1.0))?;
        let ref_point_head = Mlp::new(&root.pp("ref_point_head"), &[e, e, e])?;
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderLayer::new(&root.pp(format!("decoder.{l}")), e, config.heads, config.ffn_dim))
            .collect::<Result<_>>()?;
        let layer_heads = (0..config.decoder_layers)
            .map(|l| {
                (0..d_count)
                    .map(|d| {
                        Head::new(
                            &root.pp(format!("heads.layer{l}.{d}")),
                            e,
                            registry.num_classes(d),
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let label_tables = (0..d_count)
            .map(|d| {
                root.get(
                    &[registry.num_classes(d) + 1, e],
                    &format!("cdn_labels.{d}"),
                    Init::Normal(1.0),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            dpm_config: dpm_config.clone(),
            registry: registry.clone(),
            store,
            backbone,
            level_embed,
            encoder,
            dpm,
            proposal_proj,
            proposal_norm,
            first_heads,
            content_queries,
            ref_point_head,
            decoder,
            layer_heads,
            label_tables,
        })
    }

    pub fn registry(&self) -> &CategoryRegistry {
        &self.registry
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn dpm(&self) -> Option<&Dpm> {
        self.dpm.as_ref()
    }

    pub fn label_table(&self, d: usize) -> &Tensor {
        &self.label_tables[d]
    }

    /// Count of per-dataset head instances: first stage plus one per decoder layer.
    pub fn head_count(&self) -> usize {
        self.first_heads.len() + self.layer_heads.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameter path prefixes owned by dataset `d`'s heads.
    pub fn head_prefixes(&self, d: usize) -> Vec<String> {
        let mut out = vec![format!("heads.first.{d}.")];
        out.extend((0..self.config.decoder_layers).map(|l| format!("heads.layer{l}.{d}.")));
        out
    }

    fn check_dataset(&self, d: usize) -> Result<()> {
        if d >= self.registry.num_datasets() {
            return Err(Error::OutOfRange(format!(
                "dataset id {d} (model has {} heads per stage)",
                self.registry.num_datasets()
            )));
        }
        Ok(())
    }

    pub fn image_tensor(&self, image: &RgbImage) -> Result<Tensor> {
        image_to_tensor(image, self.dtype(), self.store.device())
    }

    /// Positional encoding of every token: sine embedding of its center
    /// plus a learned level vector.
    pub fn token_positions(&self, features: &MultiScaleFeatures) -> Result<Tensor> {
        let centers = features.token_centers();
        let sine = sine_embedding(&centers, self.config.dim, self.dtype(), self.store.device())?;
        let levels: Vec<u32> = features.token_levels().iter().map(|&l| l as u32).collect();
        let idx = Tensor::from_vec(levels, centers.len(), self.store.device())?;
        Ok((sine + self.level_embed.index_select(&idx, 0)?)?)
    }

    pub fn encode(&self, features: &MultiScaleFeatures) -> Result<Tensor> {
        let pos = self.token_positions(features)?;
        let centers = features.token_centers();
        let size = (features.image_width as f64, features.image_height as f64);
        let bias = self.config.attention.bias(
            &centers,
            &centers,
            &features.token_strides(),
            size,
            self.dtype(),
            self.store.device(),
        )?;
        let mut x = features.flatten()?;
        for layer in &self.encoder {
            x = layer.forward(&x, &pos, bias.as_ref())?;
        }
        Ok(x)
    }

    /// First-stage predictions for every token of dataset `d`.
    pub fn first_stage(&self, memory: &Tensor, centers: &[[f64; 2]], d: usize) -> Result<HeadOutput> {
        self.check_dataset(d)?;
        let x = self.proposal_norm.forward(&self.proposal_proj.forward(memory)?)?;
        let reference = points_tensor(centers, self.dtype(), self.store.device())?;
        self.first_heads[d].forward(&x, &reference)
    }

    /// Per-token ranking scores: best real-class probability.
    pub fn ranking_scores(&self, logits: &Tensor, d: usize) -> Result<Vec<f64>> {
        let t = self.registry.num_classes(d);
        let probs = softmax_last(logits)?.narrow(1, 0, t)?;
        let best = probs.max_keepdim(1)?.flatten_all()?;
        Ok(best.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Candidate queries from the top-k first-stage tokens: reference
    /// points are the predicted coordinates, content comes from the table.
    pub fn candidate_queries(&self, first: &HeadOutput, d: usize, content: &Tensor) -> Result<(QuerySet, Vec<usize>)> {
        let scores = self.ranking_scores(&first.logits, d)?;
        let top = select_top_k(&scores, self.config.num_queries)?;
        let coords = to_rows(&first.coords.detach())?;
        let refs = top.iter().map(|&i| [coords[i][0], coords[i][1]]).collect();
        Ok((
            QuerySet {
                content: content.clone(),
                reference_points: refs,
                kinds: vec![QueryKind::Content; top.len()],
                groups: vec![None; top.len()],
            },
            top,
        ))
    }

    /// Runs the decoder over `[cdn..., candidates]` and returns per-layer
    /// outputs for the whole query list.
    pub fn decode(
        &self,
        queries: &QuerySet,
        self_mask: Option<&Tensor>,
        memory: &Tensor,
        memory_pos: &Tensor,
        features: &MultiScaleFeatures,
        d: usize,
    ) -> Result<Vec<HeadOutput>> {
        self.check_dataset(d)?;
        let size = (features.image_width as f64, features.image_height as f64);
        let centers = features.token_centers();
        let strides = features.token_strides();
        let memory_keys = (memory + memory_pos)?;
        let mut tgt = queries.content.clone();
        let mut refs = queries.reference_points.clone();
        let mut outputs = Vec::with_capacity(self.decoder.len());
        for (l, layer) in self.decoder.iter().enumerate() {
            let sine = sine_embedding(&refs, self.config.dim, self.dtype(), self.store.device())?;
            let query_pos = self.ref_point_head.forward(&sine)?;
            let cross_bias = self.config.attention.bias(
                &refs,
                &centers,
                &strides,
                size,
                self.dtype(),
                self.store.device(),
            )?;
            tgt = layer.forward(
                &tgt,
                &DecoderInputs {
                    query_pos: &query_pos,
                    self_mask,
                    memory,
                    memory_keys: &memory_keys,
                    cross_bias: cross_bias.as_ref(),
                },
            )?;
            let reference = points_tensor(&refs, self.dtype(), self.store.device())?;
            let out = self.layer_heads[l][d].forward(&tgt, &reference)?;
            refs = to_rows(&out.coords.detach())?
                .into_iter()
                .map(|r| [r[0], r[1]])
                .collect();
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Full forward pass. `cdn` queries, when given, are prepended to the
    /// candidate queries and isolated by the group mask.
    pub fn forward(&self, image: &Tensor, d: usize, cdn: Option<&QuerySet>) -> Result<ForwardOutput> {
        Ok(self.forward_traced(image, d, cdn)?.0)
    }

    pub fn forward_traced(
        &self,
        image: &Tensor,
        d: usize,
        cdn: Option<&QuerySet>,
    ) -> Result<(ForwardOutput, Trace)> {
        self.check_dataset(d)?;
        let features = self.backbone.forward(image)?;
        let encoded = self.encode(&features)?;
        let mut content = self.content_queries.clone();
        let memory = match (&self.dpm, self.dpm_config.mode) {
            (Some(dpm), DpmMode::Feature) => dpm.forward(&encoded, &self.registry, d)?,
            (Some(dpm), DpmMode::Query) => {
                content = dpm.forward(&content, &self.registry, d)?;
                encoded.clone()
            }
            _ => encoded.clone(),
        };
        let centers = features.token_centers();
        let first_all = self.first_stage(&memory, &centers, d)?;
        let (candidates, top) = self.candidate_queries(&first_all, d, &content)?;
        let first_stage = first_all.select(&top)?;

        let n_cdn = cdn.map_or(0, QuerySet::len);
        let (queries, mask) = match cdn {
            Some(c) if !c.is_empty() => {
                let n_groups = c.groups.iter().flatten().max().map_or(0, |g| g + 1);
                let per_group = c.len() / n_groups;
                let mask = cdn_group_mask(per_group, n_groups, candidates.len());
                let n = c.len() + candidates.len();
                let mask = Tensor::from_vec(mask, (n, n), self.store.device())?.to_dtype(self.dtype())?;
                let mut refs = c.reference_points.clone();
                refs.extend(&candidates.reference_points);
                let mut kinds = c.kinds.clone();
                kinds.extend(&candidates.kinds);
                let mut groups = c.groups.clone();
                groups.extend(&candidates.groups);
                let merged = QuerySet {
                    content: Tensor::cat(&[&c.content, &candidates.content], 0)?,
                    reference_points: refs,
                    kinds,
                    groups,
                };
                (merged, Some(mask))
            }
            _ => (candidates, None),
        };
        let memory_pos = self.token_positions(&features)?;
        let all_layers = self.decode(&queries, mask.as_ref(), &memory, &memory_pos, &features, d)?;
        let k = self.config.num_queries;
        let mut layers = Vec::with_capacity(all_layers.len());
        let mut cdn_layers = Vec::with_capacity(all_layers.len());
        for out in &all_layers {
            cdn_layers.push(out.narrow(0, n_cdn)?);
            layers.push(out.narrow(n_cdn, k)?);
        }
        let trace = Trace {
            features,
            encoded,
            memory,
            reference_points: queries.reference_points[n_cdn..].to_vec(),
        };
        Ok((
            ForwardOutput {
                first_stage,
                selected_tokens: top,
                layers,
                cdn_layers,
                num_cdn: n_cdn,
            },
            trace,
        ))
    }

    /// Final-layer candidates above `threshold`, in pixel coordinates.
    pub fn predict(&self, image: &RgbImage, d: usize, threshold: f64) -> Result<Vec<Prediction>> {
        let x = self.image_tensor(image)?;
        let out = self.forward(&x, d, None)?;
        let last = out.layers.last().expect("at least one decoder layer");
        decode_predictions(
            last,
            self.registry.num_classes(d),
            (image.width() as f64, image.height() as f64),
            threshold,
        )
    }
}

/// Turns head output into predictions: class is the arg-max over the real
/// classes and its probability is the confidence.
pub fn decode_predictions(
    out: &HeadOutput,
    num_classes: usize,
    image_size: (f64, f64),
    threshold: f64,
) -> Result<Vec<Prediction>> {
    let probs = to_rows(&softmax_last(&out.logits)?)?;
    let coords = to_rows(&out.coords)?;
    let mut preds = Vec::new();
    for (p, c) in probs.iter().zip(&coords) {
        let (class, confidence) = p[..num_classes]
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
        if confidence >= threshold {
            let pt = denormalize([c[0], c[1]], image_size);
            preds.push(Prediction {
                u: pt.u,
                v: pt.v,
                class,
                confidence,
            });
        }
    }
    Ok(preds)
}

pub fn points_tensor(points: &[[f64; 2]], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let flat: Vec<f64> = points.iter().flat_map(|p| [p[0], p[1]]).collect();
    Ok(Tensor::from_vec(flat, (points.len(), 2), device)?.to_dtype(dtype)?)
}
