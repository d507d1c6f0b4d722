//! Probe sweeps over backbone layers and diffusion timesteps, plus the
//! module ablation grid. Each probe key yields one report row; failures
//! (unknown layers, out-of-range timesteps) become error rows so a sweep
//! never dies half way.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::backbone::synthetic::{default_catalog, SyntheticBackbone};
use crate::backbone::{FeatureSelection, LayerId};
use crate::error::Result;
use crate::pipeline::config::PipelineConfig;
use crate::pipeline::data::{generate_toy_dataset, Dataset};
use crate::pipeline::model::{Model, Toggles};
use crate::pipeline::train::{evaluate, train, TrainMode};

#[derive(Debug, Clone, serde::Serialize)]
pub enum ProbeOutcome {
    Metrics {
        recall: f64,
        ap: f64,
        map: f64,
        top1: f64,
    },
    Error(String),
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeRow {
    pub key: String,
    pub outcome: ProbeOutcome,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("key\trecall\tap\tmap\ttop1\n");
        for row in &self.rows {
            match &row.outcome {
                ProbeOutcome::Metrics {
                    recall,
                    ap,
                    map,
                    top1,
                } => {
                    writeln!(
                        out,
                        "{}\t{recall:.6}\t{ap:.6}\t{map:.6}\t{top1:.6}",
                        row.key
                    )
                    .unwrap();
                }
                ProbeOutcome::Error(msg) => {
                    writeln!(out, "{}\terror\t{msg}\t\t", row.key).unwrap();
                }
            }
        }
        out
    }
}

fn probe_setup(cfg: &PipelineConfig) -> Result<(Dataset, SyntheticBackbone)> {
    let dataset = generate_toy_dataset(&cfg.data, cfg.seed)?;
    let backbone = SyntheticBackbone::new(&dataset.specs(), default_catalog(), cfg.seed)?;
    Ok((dataset, backbone))
}

fn run_probe(
    model: &Model,
    dataset: &Dataset,
    backbone: &SyntheticBackbone,
) -> Result<ProbeOutcome> {
    let out = train(model, dataset, backbone, TrainMode::Joint, Toggles::all_on())?;
    let report = evaluate(model, &out.store, dataset, backbone, Toggles::all_on())?;
    Ok(ProbeOutcome::Metrics {
        recall: report.detection.recall,
        ap: report.detection.ap,
        map: report.search.map,
        top1: report.search.top1,
    })
}

/// Sweep single backbone layers: the probed layer serves as detection
/// feature, attention source, and the only re-ID input.
pub fn probe_layers(cfg: &PipelineConfig, layers: &[String]) -> Result<ProbeReport> {
    let (dataset, backbone) = probe_setup(cfg)?;
    let mut rows = Vec::with_capacity(layers.len());
    for key in layers {
        let outcome = (|| -> Result<ProbeOutcome> {
            let layer = LayerId::from_str(key)?;
            let selection = FeatureSelection {
                detection_layer: layer,
                detection_attention_layer: layer,
                reid_layers: vec![layer],
            };
            let model = Model::with_selection(cfg.clone(), default_catalog(), selection)?;
            run_probe(&model, &dataset, &backbone)
        })()
        .unwrap_or_else(|e| ProbeOutcome::Error(e.to_string()));
        rows.push(ProbeRow {
            key: key.clone(),
            outcome,
        });
    }
    Ok(ProbeReport { rows })
}

/// Sweep diffusion timesteps with the default layer selection.
pub fn probe_timesteps(cfg: &PipelineConfig, timesteps: &[usize]) -> Result<ProbeReport> {
    let (dataset, backbone) = probe_setup(cfg)?;
    let mut rows = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let outcome = (|| -> Result<ProbeOutcome> {
            let mut c = cfg.clone();
            c.timestep = t;
            let model = Model::new(c)?;
            run_probe(&model, &dataset, &backbone)
        })()
        .unwrap_or_else(|e| ProbeOutcome::Error(e.to_string()));
        rows.push(ProbeRow {
            key: format!("t={t}"),
            outcome,
        });
    }
    Ok(ProbeReport { rows })
}

/// Train and evaluate every combination of the three module toggles under
/// one shared seed and dataset.
pub fn ablate(cfg: &PipelineConfig) -> Result<ProbeReport> {
    let (dataset, backbone) = probe_setup(cfg)?;
    let model = Model::new(cfg.clone())?;
    let mut rows = Vec::new();
    for bits in 0..8u8 {
        let toggles = Toggles {
            dgrpn: bits & 4 != 0,
            msfrn: bits & 2 != 0,
            sfan: bits & 1 != 0,
        };
        let outcome = (|| -> Result<ProbeOutcome> {
            let out = train(&model, &dataset, &backbone, TrainMode::Joint, toggles)?;
            let report = evaluate(&model, &out.store, &dataset, &backbone, toggles)?;
            Ok(ProbeOutcome::Metrics {
                recall: report.detection.recall,
                ap: report.detection.ap,
                map: report.search.map,
                top1: report.search.top1,
            })
        })()
        .unwrap_or_else(|e| ProbeOutcome::Error(e.to_string()));
        rows.push(ProbeRow {
            key: toggles.label(),
            outcome,
        });
    }
    Ok(ProbeReport { rows })
}
