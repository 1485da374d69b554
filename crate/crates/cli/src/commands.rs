//! Subcommand implementations. Each writes its artifacts under `cfg.out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use saliency_core::complexity::{rgb_luma, SavingsReport};
use saliency_core::gradcheck::{gradient_check, GradCheckReport};
use saliency_core::objectives::{mae, max_f, total_loss, train_step};
use saliency_core::{
    savings_report, DepthMap, GroundTruth, Level, LossTerms, Modality, Model, Tensor,
};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::netpbm::{self, NetpbmError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Netpbm(#[from] NetpbmError),
    #[error(transparent)]
    Core(#[from] saliency_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("threshold exceeded: {0}")]
    Threshold(String),
}

impl CliError {
    /// 1 for contract, parse and I/O errors, 2 for a missed threshold.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Threshold(_) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|source| CliError::Io {
        path: cfg.out.display().to_string(),
        source,
    })?;
    Ok(&cfg.out)
}

fn fit(image: Tensor, cfg: &RunConfig, what: &str) -> CliResult<Tensor> {
    let side = cfg.model.side;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if (h, w) == (side, side) {
        Ok(image)
    } else if cfg.resize {
        Ok(netpbm::resize_square(&image, side))
    } else {
        Err(saliency_core::Error::Contract(format!(
            "{what} is {h}x{w} but side is {side}; set resize=true to resample"
        ))
        .into())
    }
}

pub struct Inputs {
    pub rgb: Tensor,
    pub depth: Option<DepthMap>,
    /// Present for loaded or synthetic ground truth.
    pub gt: Option<Tensor>,
    pub source: String,
}

/// Reads the configured files, falling back to the synthetic scene when
/// no image is given.
pub fn load_inputs(cfg: &RunConfig) -> CliResult<Inputs> {
    let (rgb, mut gt, source) = match &cfg.rgb {
        Some(p) => (
            fit(netpbm::load_image(p)?, cfg, "rgb image")?,
            None,
            p.display().to_string(),
        ),
        None => {
            let (rgb, gt) = saliency_core::model::synthetic_scene(cfg.model.side);
            (rgb, Some(gt), "synthetic".to_owned())
        }
    };
    if let Some(p) = &cfg.gt {
        let raw = fit(netpbm::load_gray(p)?, cfg, "ground truth")?;
        gt = Some(raw.map(|v| if v > 0.5 { 1.0 } else { 0.0 }));
    }
    let depth = match (cfg.model.modality, &cfg.depth) {
        (Modality::Rgb, _) => None,
        (Modality::Rgbd, Some(p)) => Some(DepthMap::new(fit(
            netpbm::load_gray(p)?,
            cfg,
            "depth map",
        )?)?),
        (Modality::Rgbd, None) => Some(DepthMap::new(rgb_luma(&rgb))?),
    };
    Ok(Inputs {
        rgb,
        depth,
        gt,
        source,
    })
}

fn ground_truth(inputs: &Inputs) -> CliResult<GroundTruth> {
    let gt = inputs.gt.clone().ok_or_else(|| {
        saliency_core::Error::Contract("a ground-truth mask is required with an rgb image".into())
    })?;
    Ok(GroundTruth::new(gt)?)
}

fn manifest_head(cfg: &RunConfig, command: &str) -> String {
    format!(
        "command\t{command}\nseed\t{}\nconfig_sha256\t{}\n",
        cfg.model.seed,
        cfg.hash()
    )
}

/// Writes `{level}_{map}.pgm` for every level and map plus `manifest.txt`;
/// returns the written paths.
pub fn cmd_infer(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let inputs = load_inputs(cfg)?;
    let model = Model::new(cfg.model.clone())?;
    let preds = model.forward(&inputs.rgb, inputs.depth.as_ref())?;
    let dir = out_dir(cfg)?;
    let mut manifest = manifest_head(cfg, "infer");
    let _ = writeln!(manifest, "input\t{}", inputs.source);
    let mut written = Vec::new();
    for level in &preds.levels {
        for (name, map) in level.maps() {
            let file = format!("{}_{name}.pgm", level.level.tag());
            let path = dir.join(&file);
            netpbm::save_gray(map, &path)?;
            let _ = writeln!(manifest, "file\t{file}\t{}x{}", level.grid.0, level.grid.1);
            written.push(path);
        }
    }
    let path = dir.join("manifest.txt");
    write_file(&path, manifest)?;
    written.push(path);
    Ok(written)
}

pub fn cmd_macs(cfg: &RunConfig) -> CliResult<SavingsReport> {
    let model = Model::new(cfg.model.clone())?;
    let report = savings_report(&model, [cfg.fg_fraction; 2])?;
    let text = format!(
        "{}fg_fraction\t{}\n{}",
        manifest_head(cfg, "macs"),
        cfg.fg_fraction,
        report.to_text()
    );
    write_file(&out_dir(cfg)?.join("macs.txt"), text)?;
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<GradCheckReport> {
    let inputs = load_inputs(cfg)?;
    let gt = ground_truth(&inputs)?;
    let mut model = Model::new(cfg.model.clone())?;
    let report = gradient_check(&mut model, &inputs.rgb, inputs.depth.as_ref(), &gt)?;
    let text = format!("{}{}", manifest_head(cfg, "gradcheck"), report.to_text());
    write_file(&out_dir(cfg)?.join("gradcheck.txt"), text)?;
    let within = report.max_rel_error < cfg.gradcheck_tolerance;
    if !within {
        return Err(CliError::Threshold(format!(
            "max relative error {:.3e} is not below {:.1e}",
            report.max_rel_error, cfg.gradcheck_tolerance
        )));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    /// MAE of the full-resolution dense saliency map.
    pub mae: f64,
}

impl OverfitReport {
    pub fn passed(&self, cfg: &RunConfig) -> bool {
        self.final_loss < cfg.loss_threshold && self.mae < cfg.mae_threshold
    }
}

/// Plain gradient descent on one image. `progress` sees every step's loss.
pub fn run_overfit(
    cfg: &RunConfig,
    mut progress: impl FnMut(usize, f64),
) -> CliResult<OverfitReport> {
    let inputs = load_inputs(cfg)?;
    let gt = ground_truth(&inputs)?;
    let mut model = Model::new(cfg.model.clone())?;
    let depth = inputs.depth.as_ref();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let loss = train_step(&mut model, &inputs.rgb, depth, &gt, LossTerms::ALL, cfg.lr)?;
        progress(step, loss);
        losses.push(loss);
    }
    let preds = model.forward(&inputs.rgb, depth)?;
    let final_loss = total_loss(&preds, &gt, LossTerms::ALL)?.total;
    let mae = mae(&preds.level(Level::Full).dense_saliency, &gt.saliency)?;
    Ok(OverfitReport {
        losses,
        final_loss,
        mae,
    })
}

pub fn cmd_overfit(cfg: &RunConfig) -> CliResult<OverfitReport> {
    let dir = out_dir(cfg)?.to_path_buf();
    let report = run_overfit(cfg, |step, loss| {
        if step % 100 == 0 {
            eprintln!("step {step}\tloss {loss:.6}");
        }
    })?;
    let mut log = manifest_head(cfg, "overfit");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(log, "step\t{i}\t{l:.12e}");
    }
    let _ = writeln!(log, "final_loss\t{:.12e}", report.final_loss);
    let _ = writeln!(log, "full_resolution_mae\t{:.12e}", report.mae);
    write_file(&dir.join("overfit.log"), log)?;
    if !report.passed(cfg) {
        return Err(CliError::Threshold(format!(
            "final loss {:.4} (limit {}), MAE {:.4} (limit {})",
            report.final_loss, cfg.loss_threshold, report.mae, cfg.mae_threshold
        )));
    }
    Ok(report)
}

/// MAE and maxF of a predicted map against a mask binarized at 0.5.
pub fn cmd_eval(pred: &Path, gt: &Path) -> CliResult<String> {
    let p = netpbm::load_gray(pred)?;
    let g = netpbm::load_gray(gt)?.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    Ok(format!(
        "mae\t{:.6}\nmax_f\t{:.6}\n",
        mae(&p, &g)?,
        max_f(&p, &g)?
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "side=32\nc=8\nd=16\nheads=2\nencoder_layers=1\nconvertor_layers=2\n\
             decoder_layers=1,1,1\nffn_ratio=2\nsteps=3\n",
            "tiny",
        )
        .unwrap();
        cfg.out = dir.to_path_buf();
        cfg
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Threshold("x".into()).exit_code(), 2);
        let e: CliError = ConfigError::UnknownKey("k".into()).into();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn infer_writes_sixteen_maps_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let files = cmd_infer(&cfg).unwrap();
        assert_eq!(files.len(), 17);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("seed\t0\n"));
        assert!(manifest.contains(&cfg.hash()));
        assert!(manifest.contains("file\td16_dense_saliency.pgm\t2x2"));
        assert!(manifest.contains("file\td1_token_boundary.pgm\t32x32"));
        let map = netpbm::load_gray(&dir.path().join("d4_dense_boundary.pgm")).unwrap();
        assert_eq!(map.shape(), &[8, 8]);
    }

    #[test]
    fn image_size_must_match_unless_resizing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        let rgb = dir.path().join("in.ppm");
        let mut bytes = b"P6 16 16 255\n".to_vec();
        bytes.extend(std::iter::repeat_n(100u8, 16 * 16 * 3));
        fs::write(&rgb, bytes).unwrap();
        cfg.rgb = Some(rgb);
        assert_eq!(cmd_infer(&cfg).unwrap_err().exit_code(), 1);
        cfg.resize = true;
        assert_eq!(cmd_infer(&cfg).unwrap().len(), 17);
    }

    #[test]
    fn gradcheck_needs_ground_truth_for_real_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        let rgb = dir.path().join("in.ppm");
        let mut bytes = b"P6 32 32 255\n".to_vec();
        bytes.extend(std::iter::repeat_n(7u8, 32 * 32 * 3));
        fs::write(&rgb, bytes).unwrap();
        cfg.rgb = Some(rgb);
        assert!(matches!(
            cmd_gradcheck(&cfg),
            Err(CliError::Core(saliency_core::Error::Contract(_)))
        ));
    }

    #[test]
    fn overfit_threshold_failure_is_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let err = cmd_overfit(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let log = fs::read_to_string(dir.path().join("overfit.log")).unwrap();
        assert_eq!(log.matches("step\t").count(), 3);
    }

    #[test]
    fn eval_of_mask_against_itself() {
        let dir = tempfile::tempdir().unwrap();
        let gt = dir.path().join("gt.pgm");
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0, 255, 255, 0]);
        fs::write(&gt, bytes).unwrap();
        assert_eq!(
            cmd_eval(&gt, &gt).unwrap(),
            "mae\t0.000000\nmax_f\t1.000000\n"
        );
    }
}
