//! Optimization loop, checkpoints, evaluation and ablations.

mod ablate;
pub mod checkpoint;
pub mod config;

use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cdn::{embed_cdn_queries, gen_noised_annotations, normalize};
use crate::data::{augment, slice_patches, sliding_window_infer};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, Targets};
use crate::metrics::{ClassAggregation, EvalAccumulator, EvalReport};
use crate::model::Model;
use crate::registry::{AnnotatedSample, CategoryRegistry};
use crate::rng::stream;

pub use ablate::{ablate, rows_to_csv, rows_to_markdown, AblationAxis, AblationRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use config::{DataConfig, OptimConfig, RunConfig};

/// Parameters whose path starts with this prefix train at the backbone rate.
pub const BACKBONE_PREFIX: &str = "backbone.";

// Stream tags keep the random draws of different purposes independent.
const TAG_PICK: u64 = 0;
const TAG_AUGMENT: u64 = 1;
const TAG_NOISE: u64 = 2;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        iteration: usize,
        loss: LossBreakdown,
        grad_norm: f64,
    },
    Eval {
        iteration: usize,
        report: EvalReport,
    },
}

/// Splits parameters into (backbone, rest).
pub fn param_groups(model: &Model) -> (Vec<(String, Var)>, Vec<(String, Var)>) {
    model
        .params()
        .vars()
        .into_iter()
        .partition(|(name, _)| name.starts_with(BACKBONE_PREFIX))
}

pub struct Trainer {
    config: RunConfig,
    model: Model,
    samples: Vec<AnnotatedSample>,
    backbone_vars: Vec<Var>,
    rest_vars: Vec<Var>,
    opt_backbone: AdamW,
    opt_rest: AdamW,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig, registry: &CategoryRegistry, samples: Vec<AnnotatedSample>) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        let model = Model::new(&config.model, &config.dpm, registry, config.seed, DType::F32)?;
        Self::with_model(config, model, samples)
    }

    pub fn with_model(config: &RunConfig, model: Model, samples: Vec<AnnotatedSample>) -> Result<Self> {
        let (backbone, rest) = param_groups(&model);
        let backbone_vars: Vec<Var> = backbone.into_iter().map(|(_, v)| v).collect();
        let rest_vars: Vec<Var> = rest.into_iter().map(|(_, v)| v).collect();
        let params = |lr| ParamsAdamW {
            lr,
            weight_decay: config.optim.weight_decay,
            ..ParamsAdamW::default()
        };
        Ok(Self {
            opt_backbone: AdamW::new(backbone_vars.clone(), params(config.optim.lr_backbone))?,
            opt_rest: AdamW::new(rest_vars.clone(), params(config.optim.lr_rest))?,
            backbone_vars,
            rest_vars,
            config: config.clone(),
            model,
            samples,
            iteration: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// The augmented sample fed at `(iteration, slot)`.
    pub fn batch_sample(&self, iteration: usize, slot: usize) -> AnnotatedSample {
        let seed = self.config.seed;
        let (it, sl) = (iteration as u64, slot as u64);
        let pick = stream(seed, &[TAG_PICK, it, sl]).gen_range(0..self.samples.len());
        let mut rng = stream(seed, &[TAG_AUGMENT, it, sl]);
        let src = &self.samples[pick];
        let patch = self.config.slice.patch_size;
        let src = if src.width() > patch || src.height() > patch {
            let mut patches = slice_patches(src, &self.config.slice);
            let i = rng.gen_range(0..patches.len());
            patches.swap_remove(i).0
        } else {
            src.clone()
        };
        augment(&src, &self.config.augment, &mut rng)
    }

    /// Loss of one sample at `iteration`, with its denoising queries.
    pub fn sample_loss(&self, sample: &AnnotatedSample, iteration: usize, slot: usize) -> Result<(candle_core::Tensor, LossBreakdown)> {
        let d = sample.dataset_id;
        let registry = self.model.registry();
        let size = (sample.width() as f64, sample.height() as f64);
        let targets = Targets {
            coords: sample.centroids.iter().map(|p| normalize(p, size)).collect(),
            classes: sample.classes.clone(),
        };
        let noised = if self.config.cdn.enabled && !sample.is_empty() {
            let mut rng = stream(self.config.seed, &[TAG_NOISE, iteration as u64, slot as u64]);
            Some(gen_noised_annotations(
                &sample.centroids,
                &sample.classes,
                registry.num_classes(d),
                size,
                &self.config.cdn,
                &mut rng,
            )?)
        } else {
            None
        };
        let queries = match &noised {
            Some(n) => Some(embed_cdn_queries(n, self.model.label_table(d), size)?),
            None => None,
        };
        let x = self.model.image_tensor(&sample.image)?;
        let out = self.model.forward(&x, d, queries.as_ref())?;
        let weight = registry.dataset(d)?.loss_weight;
        total_loss(&out, &targets, noised.as_ref(), weight, &self.config.loss)
    }

    /// One optimization step; returns the batch loss and pre-clip gradient norm.
    pub fn step(&mut self) -> Result<(LossBreakdown, f64)> {
        let it = self.iteration;
        let mut total: Option<candle_core::Tensor> = None;
        let mut breakdown = LossBreakdown::default();
        for slot in 0..self.config.batch_size {
            let sample = self.batch_sample(it, slot);
            let (loss, parts) = self.sample_loss(&sample, it, slot).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("iteration {it}, slot {slot}: {m}")),
                other => other,
            })?;
            breakdown.accumulate(&parts);
            total = Some(match total {
                Some(t) => (t + loss)?,
                None => loss,
            });
        }
        let total = total.expect("batch_size >= 1");
        let mut grads = total.backward()?;
        let norm = self.clip(&mut grads)?;
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("iteration {it}: gradient norm {norm}")));
        }
        self.opt_backbone.step(&grads)?;
        self.opt_rest.step(&grads)?;
        self.iteration += 1;
        Ok((breakdown, norm))
    }

    fn clip(&self, grads: &mut GradStore) -> Result<f64> {
        let vars = self.backbone_vars.iter().chain(&self.rest_vars);
        let mut sq = 0.0;
        for v in vars.clone() {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let max = self.config.optim.grad_clip;
        if max > 0.0 && norm > max {
            let scale = max / (norm + 1e-6);
            for v in vars {
                if let Some(g) = grads.get(v.as_tensor()) {
                    let scaled = (g * scale)?;
                    grads.insert(v.as_tensor(), scaled);
                }
            }
        }
        Ok(norm)
    }
}

/// Per-dataset reports for `samples` using tiled inference.
pub fn evaluate_samples(model: &Model, samples: &[AnnotatedSample], config: &RunConfig) -> Result<Vec<EvalReport>> {
    let registry = model.registry();
    let mut accs: Vec<Option<EvalAccumulator>> = (0..registry.num_datasets()).map(|_| None).collect();
    for s in samples {
        let d = s.dataset_id;
        let radius = registry.dataset(d)?.radius_px;
        let preds = sliding_window_infer(model, &s.image, d, &config.slice, radius, config.threshold)?;
        let gts: Vec<_> = s.centroids.iter().copied().zip(s.classes.iter().copied()).collect();
        let acc = match &mut accs[d] {
            Some(a) => a,
            slot => slot.insert(EvalAccumulator::new(registry, d)?),
        };
        acc.add_image(&preds, &gts)?;
    }
    Ok(accs
        .iter()
        .flatten()
        .map(|a| a.report(registry, ClassAggregation::Mean))
        .collect())
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRecord>,
    pub reports: Vec<EvalReport>,
}

/// Trains for `config.iterations`, logging every `log_every` steps and
/// evaluating on `eval_samples` at the end. With `out_dir`, writes
/// `metrics.jsonl`, periodic checkpoints and `checkpoint.safetensors`.
pub fn train(
    config: &RunConfig,
    registry: &CategoryRegistry,
    samples: Vec<AnnotatedSample>,
    eval_samples: &[AnnotatedSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, registry, samples)?;
    let mut log = Vec::new();
    let mut sink = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        if let Some((f, p)) = &mut sink {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(rec);
        Ok(())
    };
    for _ in 0..config.iterations {
        let (loss, grad_norm) = trainer.step()?;
        let it = trainer.iteration();
        if config.log_every > 0 && (it % config.log_every == 0 || it == 1) {
            log::info!("iteration {it}: loss {:.5}", loss.total);
            emit(
                LogRecord::Step {
                    iteration: it,
                    loss,
                    grad_norm,
                },
                &mut log,
            )?;
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && it % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("checkpoints/iter_{it:07}.safetensors")), trainer.model(), config, it)?;
            }
        }
    }
    let reports = evaluate_samples(trainer.model(), eval_samples, config)?;
    for r in &reports {
        emit(
            LogRecord::Eval {
                iteration: trainer.iteration(),
                report: r.clone(),
            },
            &mut log,
        )?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("checkpoint.safetensors"), trainer.model(), config, trainer.iteration())?;
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        log,
        reports,
    })
}

/// Loads a checkpoint and evaluates it on `samples`; the samples' registry
/// must equal the checkpoint's.
pub fn evaluate_checkpoint(
    path: &Path,
    registry: &CategoryRegistry,
    samples: &[AnnotatedSample],
) -> Result<Vec<EvalReport>> {
    let ck = load_checkpoint(path)?;
    if ck.model.registry() != registry {
        return Err(Error::Data(format!(
            "{}: checkpoint registry differs from the manifest registry",
            path.display()
        )));
    }
    evaluate_samples(&ck.model, samples, &ck.config)
}
