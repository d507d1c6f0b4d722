use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffps::backbone::synthetic::{default_catalog, SyntheticBackbone};
use diffps::backbone::{Backbone, LayerId};
use diffps::nn::ParamStore;
use diffps::pipeline::{
    ablate, evaluate, generate_toy_dataset, probe_layers, probe_timesteps, train, Dataset, Model,
    PipelineConfig, Toggles, TrainMode,
};
use diffps::{Error, Result};

#[derive(Parser)]
#[command(
    name = "diffps",
    version,
    about = "Person search over frozen diffusion features: synthetic data, training, evaluation, probes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; defaults apply for any omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the attention threshold tau.
    #[arg(long)]
    tau: Option<f64>,
    /// Override the Gaussian width floor delta.
    #[arg(long)]
    delta: Option<f64>,
    /// Override the diffusion timestep for feature extraction.
    #[arg(long)]
    timestep: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.tau {
            cfg.dgrpn.tau = t;
        }
        if let Some(d) = self.delta {
            cfg.dgrpn.delta = d;
        }
        if let Some(t) = self.timestep {
            cfg.timestep = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    DetectionOnly,
    ReidOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Joint => TrainMode::Joint,
            ModeArg::DetectionOnly => TrainMode::DetectionOnly,
            ModeArg::ReidOnly => TrainMode::ReidOnly,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and write it to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the selected branches; writes metrics.tsv and checkpoint.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "joint")]
        mode: ModeArg,
        /// Dataset directory; generated in memory from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split; prints a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per backbone layer; emits a TSV report.
    ProbeLayers {
        #[command(flatten)]
        common: Common,
        /// Layer keys (e.g. up.l3.vit_key.0); all catalog layers if omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per diffusion timestep; emits a TSV report.
    ProbeTimesteps {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 400, 800])]
        timesteps: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate all eight module-toggle combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PCA-visualize a backbone feature map for one scene as a PNG.
    Viz {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Layer key to visualize; the detection layer if omitted.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dataset_for(cfg: &PipelineConfig, data: &Option<PathBuf>) -> Result<Dataset> {
    match data {
        Some(dir) => Dataset::load(dir),
        None => generate_toy_dataset(&cfg.data, cfg.seed),
    }
}

fn emit_report(tsv: &str, out: &Option<PathBuf>) -> Result<()> {
    print!("{tsv}");
    if let Some(path) = out {
        std::fs::write(path, tsv)?;
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { common, out } => {
            let cfg = common.load()?;
            let ds = generate_toy_dataset(&cfg.data, cfg.seed)?;
            ds.save(&out)?;
            println!(
                "wrote {} scenes ({} identities) to {}",
                ds.records.len(),
                ds.identities,
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            common,
            mode,
            data,
            out,
        } => {
            let cfg = common.load()?;
            let ds = dataset_for(&cfg, &data)?;
            let model = Model::new(cfg)?;
            let backbone = SyntheticBackbone::new(&ds.specs(), default_catalog(), model.cfg.seed)?;
            let result = train(&model, &ds, &backbone, mode.into(), Toggles::all_on())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("metrics.tsv"), &result.metrics_log)?;
            std::fs::write(out.join("checkpoint.json"), result.store.to_json())?;
            std::fs::write(out.join("config.toml"), model.cfg.to_toml())?;
            println!(
                "trained {} steps; metrics and checkpoint in {}",
                result.metrics_log.lines().count().saturating_sub(1),
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            common,
            checkpoint,
            data,
            out,
        } => {
            let cfg = common.load()?;
            let text = std::fs::read_to_string(&checkpoint).map_err(|e| {
                Error::Config(format!("cannot read checkpoint {}: {e}", checkpoint.display()))
            })?;
            let store = ParamStore::from_json(&text)?;
            let ds = dataset_for(&cfg, &data)?;
            let model = Model::new(cfg)?;
            let backbone = SyntheticBackbone::new(&ds.specs(), default_catalog(), model.cfg.seed)?;
            let report = evaluate(&model, &store, &ds, &backbone, Toggles::all_on())?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(path, json)?;
            }
            Ok(())
        }
        Cmd::ProbeLayers {
            common,
            layers,
            out,
        } => {
            let cfg = common.load()?;
            let keys = if layers.is_empty() {
                default_catalog()
                    .entries
                    .iter()
                    .map(|e| e.layer.to_string())
                    .collect()
            } else {
                layers
            };
            let report = probe_layers(&cfg, &keys)?;
            emit_report(&report.to_tsv(), &out)
        }
        Cmd::ProbeTimesteps {
            common,
            timesteps,
            out,
        } => {
            let cfg = common.load()?;
            let report = probe_timesteps(&cfg, &timesteps)?;
            emit_report(&report.to_tsv(), &out)
        }
        Cmd::Ablate { common, out } => {
            let cfg = common.load()?;
            let report = ablate(&cfg)?;
            emit_report(&report.to_tsv(), &out)
        }
        Cmd::Viz {
            common,
            scene,
            layer,
            out,
        } => {
            let cfg = common.load()?;
            let ds = generate_toy_dataset(&cfg.data, cfg.seed)?;
            let record = ds
                .records
                .get(scene)
                .ok_or_else(|| Error::Argument(format!("scene {scene} out of range")))?;
            let model = Model::new(cfg)?;
            let backbone = SyntheticBackbone::new(&ds.specs(), default_catalog(), model.cfg.seed)?;
            let layer = match layer {
                Some(key) => LayerId::from_str(&key)?,
                None => model.selection.detection_layer,
            };
            let mut selection = model.selection.clone();
            selection.reid_layers = vec![layer];
            selection.detection_layer = layer;
            let image = diffps::pipeline::data::scene_image(record);
            let extraction =
                backbone.extract_features(&image, &selection, model.cfg.timestep)?;
            let fmap = extraction
                .get(&layer)
                .ok_or_else(|| Error::Catalog(format!("layer {layer} not extracted")))?;
            if let Some(parent) = out.parent() {
                if parent != Path::new("") {
                    std::fs::create_dir_all(parent)?;
                }
            }
            diffps::pipeline::visualize_pca(&fmap.data, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Catalog(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
