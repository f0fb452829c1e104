//! `fusenet <verb>`: one pipeline stage per invocation. Every verb writes its
//! outputs, the resolved config and a provenance record under `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusenet_core::clf3d::FusionMode;
use fusenet_core::evalkit::{RocClass, Subset};
use fusenet_core::fusion::SelectionReport;
use fusenet_core::synthlab::SignalMode;

use crate::checkpoint::{self, Checkpoint, ClassifierBundle};
use crate::config::{Preset, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::DataDir;
use crate::pipeline::{self, EvaluationRecord, LoadedScan};
use crate::provenance::Provenance;
use crate::report;
use crate::vgr::write_bytes;

pub const SEGNET_FILE: &str = "segnet.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const SELECTION_FILE: &str = "selection.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

#[derive(Debug, Parser)]
#[command(name = "fusenet", version, about = "Segmentation-feature fusion for weakly supervised CT classification")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML or JSON file overlaid on the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: Preset,
    /// Run directory receiving every output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Stfa,
    Dyfa,
}

impl From<ModeArg> for FusionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => FusionMode::Baseline,
            ModeArg::Stfa => FusionMode::Stfa,
            ModeArg::Dyfa => FusionMode::Dyfa,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SignalArg {
    RawVisible,
    FeatureFavored,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Render a synthetic dataset: VGR volumes, label masks and a manifest.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        signal: Option<SignalArg>,
    },
    /// Resample, window, normalise and pad every scan of a data directory.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Pre-train the segmentation network on the training split and freeze it.
    PretrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the 60 feature maps on training scans and keep the top k.
    SelectFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        segnet: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train a classifier; pre-trains and selects first when not given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        segnet: Option<PathBuf>,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Mean-probability predictions of a trained run on one split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        subset: SubsetArg,
    },
    /// Per-disease and pooled ROC analysis of a predictions file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Per-class ROC tables and an SVG plot from an evaluated run.
    RocExport {
        #[command(flatten)]
        common: Common,
        /// Directory written by `evaluate`.
        #[arg(long)]
        run: PathBuf,
    },
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::GenSynth { .. } => "gen-synth",
            Verb::Preprocess { .. } => "preprocess",
            Verb::PretrainSeg { .. } => "pretrain-seg",
            Verb::SelectFeatures { .. } => "select-features",
            Verb::Train { .. } => "train",
            Verb::Infer { .. } => "infer",
            Verb::Evaluate { .. } => "evaluate",
            Verb::RocExport { .. } => "roc-export",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Verb::GenSynth { common, .. }
            | Verb::Preprocess { common, .. }
            | Verb::PretrainSeg { common, .. }
            | Verb::SelectFeatures { common, .. }
            | Verb::Train { common, .. }
            | Verb::Infer { common, .. }
            | Verb::Evaluate { common, .. }
            | Verb::RocExport { common, .. } => common,
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

/// Parses and executes one verb. Returns the process exit code: 0 on
/// success, 2 for usage errors, 1 otherwise; failures print one JSON line
/// to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage_error", first));
            return 2;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.verb, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.preset, common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.pretrain.seed = s;
        cfg.split_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common.out.clone().ok_or_else(|| Error::Usage("--out is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &serde_json::to_vec_pretty(value)?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifacts(path.display().to_string()))
    }
}

fn execute(verb: Verb, argv: &[String]) -> Result<()> {
    pipeline::init_threads();
    let name = verb.name();
    let mut cfg = resolve(verb.common())?;
    let out = out_dir(verb.common())?;
    let mut prov = Provenance::new(name, argv);
    if let Some(path) = &verb.common().config {
        prov.add_input(path)?;
    }
    match verb {
        Verb::GenSynth { n, signal, .. } => {
            if let Some(n) = n {
                cfg.synth.n_scans = n;
            }
            if let Some(s) = signal {
                cfg.synth.mode = match s {
                    SignalArg::RawVisible => SignalMode::RawVisible,
                    SignalArg::FeatureFavored => SignalMode::FeatureFavored,
                };
            }
            pipeline::gen_synth(&cfg.synth, &out)?;
        }
        Verb::Preprocess { data, .. } => {
            prov.add_input(&data)?;
            pipeline::preprocess_dir(&DataDir::open(&data)?, &cfg, &out)?;
        }
        Verb::PretrainSeg { data, epochs, .. } => {
            prov.add_input(&data)?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            let dir = DataDir::open(&data)?;
            let split = pipeline::split_of(&dir.manifest, &cfg)?;
            let scans = pipeline::load_scans(&dir, &cfg, None)?;
            let pick = |sub| scans.iter().filter(|s| split.get(&s.record.scan_id) == Some(sub)).collect::<Vec<&LoadedScan>>();
            let outcome = pipeline::pretrain_segnet(&cfg, &pick(Subset::Train), &pick(Subset::Val))?;
            checkpoint::segnet_checkpoint(&outcome.model)?.save(out.join(SEGNET_FILE))?;
            write_bytes(&out.join("pretrain_log.csv"), &report::pretrain_log_csv(&outcome.log)?)?;
            let mean = outcome.held_out_dice.iter().map(|d| d.1).sum::<f64>() / outcome.held_out_dice.len().max(1) as f64;
            write_json(&out.join("metrics.json"), &serde_json::json!({ "held_out_lung_dice": outcome.held_out_dice, "mean_lung_dice": mean }))?;
        }
        Verb::SelectFeatures { data, segnet, k, .. } => {
            prov.add_input(&data)?;
            prov.add_input(&segnet)?;
            let k = k.unwrap_or(cfg.selection_k);
            cfg.selection_k = k;
            let model = checkpoint::load_segnet(&Checkpoint::load(&segnet)?)?;
            let dir = DataDir::open(&data)?;
            let split = pipeline::split_of(&dir.manifest, &cfg)?;
            let ids = pipeline::subset_ids(&dir.manifest, &split, Subset::Train);
            let scans = pipeline::load_scans(&dir, &cfg, Some(&ids))?;
            let refs: Vec<&LoadedScan> = scans.iter().collect();
            write_json(&out.join(SELECTION_FILE), &pipeline::select_features(&model, &refs, k)?)?;
        }
        Verb::Train { data, mode, segnet, selection, epochs, .. } => {
            prov.add_input(&data)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let dir = DataDir::open(&data)?;
            let split = pipeline::split_of(&dir.manifest, &cfg)?;
            let scans = pipeline::load_scans(&dir, &cfg, None)?;
            let pick = |sub| scans.iter().filter(|s| split.get(&s.record.scan_id) == Some(sub)).collect::<Vec<&LoadedScan>>();
            let train = pick(Subset::Train);
            let seg = match segnet {
                Some(p) => {
                    prov.add_input(&p)?;
                    checkpoint::load_segnet(&Checkpoint::load(&p)?)?
                }
                None => pipeline::pretrain_segnet(&cfg, &train, &[])?.model,
            };
            if !seg.is_frozen() {
                return Err(fusenet_core::Error::FrozenViolation("segnet checkpoint is not frozen".into()).into());
            }
            let sel: SelectionReport = match selection {
                Some(p) => {
                    prov.add_input(&p)?;
                    read_json(&p)?
                }
                None => pipeline::select_features(&seg, &train, cfg.selection_k)?,
            };
            let prepared = pipeline::prepare_scans(&seg, &train, &sel)?;
            let (bundle, log) = pipeline::train_classifier(&cfg, mode.into(), cfg.seed, &seg, &sel, &prepared)?;
            checkpoint::segnet_checkpoint(&seg)?.save(out.join(SEGNET_FILE))?;
            write_json(&out.join(SELECTION_FILE), &sel)?;
            bundle.checkpoint().save(out.join(CLASSIFIER_FILE))?;
            write_bytes(&out.join("train_log.csv"), &report::train_log_csv(&log)?)?;
        }
        Verb::Infer { data, run, subset, .. } => {
            prov.add_input(&data)?;
            let seg_path = require(run.join(SEGNET_FILE))?;
            let clf_path = require(run.join(CLASSIFIER_FILE))?;
            prov.add_input(&seg_path)?;
            prov.add_input(&clf_path)?;
            let seg = checkpoint::load_segnet(&Checkpoint::load(&seg_path)?)?;
            let bundle = ClassifierBundle::from_checkpoint(&Checkpoint::load(&clf_path)?)?;
            let dir = DataDir::open(&data)?;
            let ids: Vec<String> = match subset {
                SubsetArg::All => dir.manifest.records.iter().map(|r| r.scan_id.clone()).collect(),
                s => {
                    let sub = match s {
                        SubsetArg::Train => Subset::Train,
                        SubsetArg::Val => Subset::Val,
                        _ => Subset::Test,
                    };
                    pipeline::subset_ids(&dir.manifest, &pipeline::split_of(&dir.manifest, &cfg)?, sub)
                }
            };
            let scans = pipeline::load_scans(&dir, &cfg, Some(&ids))?;
            let refs: Vec<&LoadedScan> = scans.iter().collect();
            let prepared = pipeline::prepare_scans(&seg, &refs, &bundle.selection)?;
            write_json(&out.join(PREDICTIONS_FILE), &pipeline::infer_scans(&bundle, &prepared, &cfg)?)?;
        }
        Verb::Evaluate { data, predictions, .. } => {
            prov.add_input(&data)?;
            prov.add_input(&predictions)?;
            let dir = DataDir::open(&data)?;
            let preds: Vec<fusenet_core::evalkit::ScanPrediction> = read_json(&predictions)?;
            let records = preds
                .iter()
                .map(|p| dir.manifest.get(&p.scan_id).cloned().ok_or_else(|| Error::Config(format!("{} is not in the manifest", p.scan_id))))
                .collect::<Result<Vec<_>>>()?;
            let record = EvaluationRecord { records, predictions: preds };
            let rep = record.report()?;
            write_json(&out.join(EVALUATION_FILE), &record)?;
            write_bytes(&out.join("roc.csv"), &report::roc_csv(&rep)?)?;
            write_bytes(&out.join("auc_summary.json"), &report::auc_summary_json(&rep)?)?;
        }
        Verb::RocExport { run, .. } => {
            let eval_path = require(run.join(EVALUATION_FILE))?;
            prov.add_input(&eval_path)?;
            let rep = read_json::<EvaluationRecord>(&eval_path)?.report()?;
            for class in RocClass::ALL {
                write_bytes(&out.join(format!("roc_{}.csv", class.name())), &report::roc_class_csv(&rep, class.name())?)?;
            }
            write_bytes(&out.join("roc.svg"), report::roc_svg(&rep).as_bytes())?;
        }
    }
    write_bytes(&out.join("config.json"), &cfg.to_json()?)?;
    let mut listing: Vec<PathBuf> = fs::read_dir(&out).map_err(|e| Error::io(&out, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    listing.sort();
    for p in listing.iter().filter(|p| p.file_name().is_some_and(|n| n != "provenance.json")) {
        prov.add_output(p)?;
    }
    write_json(&out.join("provenance.json"), &prov)
}
