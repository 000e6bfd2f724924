use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train, RunConfig};
use crate::dpm::DpmMode;
use crate::error::{Error, Result};
use crate::registry::{AnnotatedSample, CategoryRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Prompt module on (feature mode) vs off.
    Dpm,
    MemoryBank,
    DatasetPrompt,
    /// Feature-enhancing vs query-enhancing.
    EnhanceMode,
    /// Localized attention depth 1 to 4.
    LSweep,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dpm" => AblationAxis::Dpm,
            "memory_bank" => AblationAxis::MemoryBank,
            "dataset_prompt" => AblationAxis::DatasetPrompt,
            "enhance_mode" => AblationAxis::EnhanceMode,
            "L_sweep" | "l_sweep" => AblationAxis::LSweep,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation axis {other:?} (expected dpm, memory_bank, dataset_prompt, enhance_mode or L_sweep)"
                )))
            }
        })
    }
}

impl AblationAxis {
    /// Named configurations compared along this axis, all sharing `base`'s seed.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |name: &str, f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (name.to_string(), c)
        };
        match self {
            AblationAxis::Dpm => vec![
                with("dpm=feature", &|c| c.dpm.mode = DpmMode::Feature),
                with("dpm=off", &|c| c.dpm.mode = DpmMode::Off),
            ],
            AblationAxis::MemoryBank => vec![
                with("memory_bank=on", &|c| c.dpm.use_memory_bank = true),
                with("memory_bank=off", &|c| c.dpm.use_memory_bank = false),
            ],
            AblationAxis::DatasetPrompt => vec![
                with("dataset_prompt=on", &|c| c.dpm.use_dataset_prompt = true),
                with("dataset_prompt=off", &|c| c.dpm.use_dataset_prompt = false),
            ],
            AblationAxis::EnhanceMode => vec![
                with("enhance=feature", &|c| c.dpm.mode = DpmMode::Feature),
                with("enhance=query", &|c| c.dpm.mode = DpmMode::Query),
            ],
            AblationAxis::LSweep => (1..=4)
                .map(|l| {
                    let mut c = base.clone();
                    c.dpm.layers = l;
                    (format!("L={l}"), c)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub dataset: String,
    pub f_d: f64,
    pub mean_f_c: f64,
}

/// Trains every variant of `axis` and scores it on `eval_samples`.
pub fn ablate(
    base: &RunConfig,
    axis: AblationAxis,
    registry: &CategoryRegistry,
    train_samples: &[AnnotatedSample],
    eval_samples: &[AnnotatedSample],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, cfg) in axis.variants(base) {
        log::info!("ablation variant {name}");
        let out = train(&cfg, registry, train_samples.to_vec(), eval_samples, None)?;
        for r in out.reports {
            rows.push(AblationRow {
                variant: name.clone(),
                dataset: r.dataset,
                f_d: r.f_d,
                mean_f_c: r.mean_f_c,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,dataset,f_d,mean_f_c\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.variant, r.dataset, r.f_d, r.mean_f_c));
    }
    out
}

pub fn rows_to_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| variant | dataset | F_d | mean F_c |\n|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} | {:.4} | {:.4} |\n", r.variant, r.dataset, r.f_d, r.mean_f_c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_variants() {
        let base = RunConfig::default();
        assert_eq!("L_sweep".parse::<AblationAxis>().unwrap().variants(&base).len(), 4);
        let e = AblationAxis::EnhanceMode.variants(&base);
        assert_eq!(e[1].1.dpm.mode, DpmMode::Query);
        assert!("nope".parse::<AblationAxis>().is_err());
    }
}
