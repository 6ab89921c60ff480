//! Command implementations. Each returns the process exit code on
//! success; recoverable per-file problems surface as [`EXIT_PARTIAL`]
//! rather than errors so a batch always runs to completion.

mod evaluate;
mod infer;
mod train;

use std::path::{Path, PathBuf};

use cybervax_core::attacks::FaceSwapModel;
use cybervax_core::data::{
    generate_synthetic_splits, load_dataset, load_dataset_tree, FaceDataset, Split,
};
use cybervax_core::models::{CheckpointMeta, ImmuneSystem, Validator};
use cybervax_core::training::InpaintingBaseline;
use cybervax_core::{Error, Result};

use crate::config::RunConfig;
use crate::{Cli, Command, DataArgs};

pub use crate::io::{BatchRow, Sidecar};

/// Resolve configuration and route to the requested command.
pub fn dispatch(cli: Cli) -> Result<i32> {
    let mut cfg = RunConfig::resolve(&cli.globals)?;
    let out = cli.globals.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    // A resolution given on the command line or environment must agree
    // with any checkpoint the command loads; one merely inherited from
    // defaults or the config file adapts to the checkpoint instead.
    let pinned = cli.globals.resolution.is_some();
    let ctx = Ctx { out, pinned_resolution: pinned };

    match cli.command {
        Command::Train(args) => train::cmd_train(&mut cfg, &ctx, args),
        Command::TrainValidator(args) => train::cmd_train_validator(&mut cfg, &ctx, args),
        Command::TrainBaseline(args) => train::cmd_train_baseline(&mut cfg, &ctx, args),
        Command::TrainFaceswap(args) => train::cmd_train_faceswap(&mut cfg, &ctx, args),
        Command::Vaccinate(args) => infer::cmd_vaccinate(&mut cfg, &ctx, args),
        Command::Neutralise(args) => infer::cmd_neutralise(&mut cfg, &ctx, args),
        Command::Validate(args) => infer::cmd_validate(&mut cfg, &ctx, args),
        Command::Attack(args) => infer::cmd_attack(&mut cfg, &ctx, args),
        Command::Evaluate(args) => evaluate::cmd_evaluate(&mut cfg, &ctx, args),
    }
}

pub struct Ctx {
    pub out: PathBuf,
    pub pinned_resolution: bool,
}

impl Ctx {
    /// Adopt a loaded checkpoint's resolution, or reject the run if the
    /// user pinned a conflicting one.
    pub fn adopt_resolution(&self, cfg: &mut RunConfig, ckpt_res: usize, what: &str) -> Result<()> {
        if cfg.resolution == ckpt_res {
            return Ok(());
        }
        if self.pinned_resolution {
            return Err(Error::Parameter(format!(
                "--resolution {} conflicts with the {what} checkpoint ({}×{})",
                cfg.resolution, ckpt_res, ckpt_res
            )));
        }
        cfg.set_resolution(ckpt_res)
    }
}

fn require_checkpoint(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "{what} checkpoint {} not found",
            path.display()
        )))
    }
}

pub fn load_immune(path: &Path) -> Result<(ImmuneSystem, CheckpointMeta)> {
    require_checkpoint(path, "immune-system")?;
    ImmuneSystem::load(path)
}

pub fn load_validator(path: &Path) -> Result<(Validator, CheckpointMeta)> {
    require_checkpoint(path, "validator")?;
    Validator::load(path)
}

pub fn load_baseline(path: &Path) -> Result<(InpaintingBaseline, CheckpointMeta)> {
    require_checkpoint(path, "baseline")?;
    InpaintingBaseline::load(path)
}

pub fn load_faceswap(path: &Path) -> Result<(FaceSwapModel, CheckpointMeta)> {
    require_checkpoint(path, "face-swap")?;
    FaceSwapModel::load(path)
}

/// Train/val/test datasets from the data source flags. Synthetic data
/// is split by identity (the held-out tenths never appear in training);
/// a directory is either a `train/val/test` tree or one flat split.
pub struct DataBundle {
    pub train: FaceDataset,
    pub val: Option<FaceDataset>,
    pub test: Option<FaceDataset>,
}

pub fn build_datasets(data: &DataArgs, resolution: usize, seed: u64) -> Result<DataBundle> {
    match (&data.synthetic, &data.data) {
        (Some(n), None) => {
            let (train, val, test) = generate_synthetic_splits(*n, resolution, seed)?;
            Ok(DataBundle {
                train,
                val: (!val.is_empty()).then_some(val),
                test: (!test.is_empty()).then_some(test),
            })
        }
        (None, Some(dir)) => {
            if dir.join("train").is_dir() {
                let (train, val, test) = load_dataset_tree(dir, resolution)?;
                for d in train
                    .diagnostics
                    .iter()
                    .chain(&val.diagnostics)
                    .chain(&test.diagnostics)
                {
                    eprintln!("note: {d}");
                }
                Ok(DataBundle {
                    train: train.dataset,
                    val: (!val.dataset.is_empty()).then_some(val.dataset),
                    test: (!test.dataset.is_empty()).then_some(test.dataset),
                })
            } else {
                let lm = dir.join("landmarks.txt");
                let lm = lm.exists().then_some(lm);
                let out = load_dataset(dir, lm.as_deref(), resolution, Split::Train)?;
                for d in &out.diagnostics {
                    eprintln!("note: {d}");
                }
                Ok(DataBundle { train: out.dataset, val: None, test: None })
            }
        }
        (None, None) => Err(Error::Parameter(
            "no dataset given: pass --synthetic N or --data DIR".into(),
        )),
        (Some(_), Some(_)) => Err(Error::Parameter(
            "--synthetic and --data are mutually exclusive".into(),
        )),
    }
}

/// First `k` records as a dataset (0 keeps everything).
pub fn cap_dataset(ds: &FaceDataset, k: usize) -> FaceDataset {
    if k == 0 || ds.len() <= k {
        return ds.clone();
    }
    FaceDataset::new(ds.resolution(), ds.split(), ds.records()[..k].to_vec())
}
