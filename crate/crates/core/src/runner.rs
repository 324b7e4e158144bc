//! Subcommand orchestration. Every stage reads and writes fixed artifact
//! names inside the run directory, so the full workflow composes:
//! synth-data -> pretrain -> finetune -> train-adaptor -> translate -> eval.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adaptor::{assemble_i2i, train_adaptor, I2IBundle};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{crop_and_resize, image_to_tensor, load_image_folder, tensor_to_image};
use crate::error::{Error, Result};
use crate::gan::{pretrain_unconditional, train_conditional};
use crate::metrics::{eval_report, RandomPyramidExtractor};
use crate::models::UncondModel;
use crate::rng::stage_rng;
use crate::synth::{render_orbit_video, render_synthetic_dataset};
use crate::translate::{translate_image, translate_video, TranslationRequest};
use crate::transplant::{cond_from_checkpoint, transplant_conditional, uncond_to_checkpoint};
use crate::video::VideoSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    SynthData,
    Pretrain,
    Finetune,
    TrainAdaptor,
    Translate,
    Eval,
    Orbit,
}

impl FromStr for Subcommand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synth-data" => Self::SynthData,
            "pretrain" => Self::Pretrain,
            "finetune" => Self::Finetune,
            "train-adaptor" => Self::TrainAdaptor,
            "translate" => Self::Translate,
            "eval" => Self::Eval,
            "orbit" => Self::Orbit,
            other => {
                return Err(Error::config(format!(
                    "unknown subcommand '{other}' (expected synth-data, pretrain, finetune, \
                     train-adaptor, translate, eval, or orbit)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Device {
    #[default]
    Cpu,
    Accelerator,
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cpu" => Self::Cpu,
            "accelerator" => Self::Accelerator,
            other => {
                return Err(Error::config(format!(
                    "unknown device '{other}' (expected cpu or accelerator)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub out: PathBuf,
    pub device: Device,
}

pub mod artifacts {
    pub const RESOLVED_CONFIG: &str = "resolved-config.json";
    pub const DATASET: &str = "dataset";
    pub const UNCOND: &str = "checkpoint-uncond";
    pub const COND: &str = "checkpoint-cond";
    pub const BUNDLE: &str = "bundle";
    pub const ORBIT: &str = "orbit-source";
    pub const TRANSLATED: &str = "translated";
    pub const REPORT: &str = "report.json";
}

/// Execute one subcommand. The resolved config snapshot is written into the
/// run directory before any work starts.
pub fn run(sub: Subcommand, opts: &RunOptions) -> Result<()> {
    let cfg = RunConfig::load(opts.config.as_deref(), &opts.overrides)?;
    if opts.device == Device::Accelerator {
        eprintln!("note: no accelerator backend is built in; running on cpu");
    }
    std::fs::create_dir_all(&opts.out)?;
    std::fs::write(
        opts.out.join(artifacts::RESOLVED_CONFIG),
        cfg.to_pretty_json(),
    )?;
    match sub {
        Subcommand::SynthData => synth_data(&cfg, &opts.out),
        Subcommand::Pretrain => pretrain(&cfg, &opts.out),
        Subcommand::Finetune => finetune(&cfg, &opts.out),
        Subcommand::TrainAdaptor => adaptor_stage(&cfg, &opts.out),
        Subcommand::Translate => translate_stage(&cfg, &opts.out),
        Subcommand::Eval => eval_stage(&cfg, &opts.out),
        Subcommand::Orbit => orbit_stage(&cfg, &opts.out).map(|_| ()),
    }
}

fn dataset_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.data
        .path
        .clone()
        .unwrap_or_else(|| out.join(artifacts::DATASET))
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let specs = cfg.scene_specs();
    let dir = out.join(artifacts::DATASET);
    let manifest = render_synthetic_dataset(
        &specs,
        cfg.data.n_per_class,
        cfg.arch.image_res,
        &cfg.camera,
        cfg.seed,
        &dir,
    )?;
    eprintln!(
        "wrote {} images across {} classes to {}",
        manifest.entries.len(),
        specs.len(),
        dir.display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (data, _, skipped) = load_image_folder(&dataset_dir(cfg, out), cfg.arch.image_res)?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} undecodable files");
    }
    let mut model = UncondModel::new(&mut stage_rng(cfg.seed, "uncond-init"), &cfg.arch)?;
    let log = pretrain_unconditional(&mut model, &data, &cfg.pretrain, &cfg.camera, cfg.seed, Some(out))?;
    uncond_to_checkpoint(&model, cfg.pretrain.steps as u64, cfg.seed)
        .save(&out.join(artifacts::UNCOND))?;
    std::fs::write(
        out.join("pretrain-log.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    Ok(())
}

fn finetune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let uncond = Checkpoint::load(&out.join(artifacts::UNCOND))?;
    let init = transplant_conditional(&uncond, cfg.arch.n_classes, cfg.seed)?;
    let mut model = cond_from_checkpoint(&init)?;
    let (data, _, _) = load_image_folder(&dataset_dir(cfg, out), cfg.arch.image_res)?;
    let log = train_conditional(&mut model, &data, &cfg.finetune, &cfg.camera, cfg.seed, Some(out))?;
    let mut ckpt = crate::transplant::cond_to_checkpoint(&model, cfg.finetune.steps as u64, cfg.seed);
    ckpt.manifest.transplant = init.manifest.transplant.clone();
    ckpt.save(&out.join(artifacts::COND))?;
    std::fs::write(
        out.join("finetune-log.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    Ok(())
}

fn adaptor_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let cond = Checkpoint::load(&out.join(artifacts::COND))?;
    let mut bundle = assemble_i2i(&cond, &cfg.adaptor, cfg.seed)?;
    let log = train_adaptor(&mut bundle, &cfg.adaptor_train, &cfg.camera, cfg.seed, None)?;
    bundle
        .to_checkpoint(log.stats.len() as u64, cfg.seed)
        .save(&out.join(artifacts::BUNDLE))?;
    std::fs::write(
        out.join("adaptor-log.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    Ok(())
}

fn orbit_stage(cfg: &RunConfig, out: &Path) -> Result<VideoSequence> {
    let specs = cfg.scene_specs();
    let o = &cfg.translate.orbit;
    let spec = specs.get(o.spec_index).ok_or_else(|| {
        Error::config(format!(
            "orbit spec_index {} out of range ({} specs)",
            o.spec_index,
            specs.len()
        ))
    })?;
    let video = render_orbit_video(
        spec,
        o.n_frames,
        o.yaw_from,
        o.yaw_to,
        o.pitch,
        cfg.arch.image_res,
        &cfg.camera,
        o.seed,
    )?;
    video.save(&out.join(artifacts::ORBIT))?;
    Ok(video)
}

fn codes_json(codes: &crate::translate::StyleCodes) -> serde_json::Value {
    serde_json::json!({
        "z": codes.z.to_vec(),
        "w1": codes.w1.to_vec(),
        "w2": codes.w2.to_vec(),
    })
}

fn translate_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let bundle = I2IBundle::from_checkpoint(&Checkpoint::load(&out.join(artifacts::BUNDLE))?)?;
    let request = TranslationRequest {
        target_class: cfg.translate.target_class,
        z: None,
        style_seed: cfg.translate.style_seed,
    };
    let translated_dir = out.join(artifacts::TRANSLATED);
    std::fs::create_dir_all(&translated_dir)?;

    if let Some(image_path) = &cfg.translate.image {
        let img = image::ImageReader::open(image_path)?
            .decode()
            .map_err(Error::Image)?
            .to_rgb8();
        let tensor = image_to_tensor(&crop_and_resize(&img, cfg.arch.image_res));
        let (result, codes) = translate_image(&bundle, &tensor, &request)?;
        tensor_to_image(&result).save(translated_dir.join("image.png"))?;
        std::fs::write(
            translated_dir.join("image-codes.json"),
            serde_json::to_string_pretty(&codes_json(&codes))?,
        )?;
        return Ok(());
    }

    let source = match &cfg.translate.video {
        Some(dir) => VideoSequence::load(dir)?,
        None => {
            // Render (and persist) the source orbit.
            orbit_stage(cfg, out)?
        }
    };
    if source.resolution() != (cfg.arch.image_res, cfg.arch.image_res) {
        return Err(Error::shape(format!(
            "source video is {:?}, model expects {res}x{res}",
            source.resolution(),
            res = cfg.arch.image_res
        )));
    }
    let (video, codes) = translate_video(&bundle, &source, &request)?;
    let vdir = translated_dir.join("video-000");
    video.save(&vdir)?;
    std::fs::write(
        vdir.join("codes.json"),
        serde_json::to_string_pretty(&codes_json(&codes))?,
    )?;
    Ok(())
}

fn eval_stage(cfg: &RunConfig, out: &Path) -> Result<()> {
    let translated_root = out.join(artifacts::TRANSLATED);
    let mut video_dirs: Vec<PathBuf> = std::fs::read_dir(&translated_root)
        .map_err(|e| {
            Error::data(format!(
                "no translated outputs under {} ({e}); run `translate` first",
                translated_root.display()
            ))
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("trajectory.json").exists())
        .collect();
    video_dirs.sort();
    if video_dirs.is_empty() {
        return Err(Error::data(format!(
            "no translated videos under {}",
            translated_root.display()
        )));
    }
    let mut videos = Vec::new();
    let mut translated_stills = Vec::new();
    for dir in &video_dirs {
        let v = VideoSequence::load(dir)?;
        let unit = v.frames_unit();
        translated_stills.extend(unit.iter().cloned());
        videos.push(unit);
    }

    let (real, _, _) = load_image_folder(&dataset_dir(cfg, out), cfg.arch.image_res)?;
    let real_unit: Vec<_> = (0..real.len())
        .map(|i| real.image(i).mapv(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0))
        .collect();

    let extractor = RandomPyramidExtractor::new(
        cfg.metrics.extractor_seed,
        cfg.metrics.extractor_channels,
        cfg.metrics.extractor_scales,
    );
    let report = eval_report(
        &videos,
        &real_unit,
        &translated_stills,
        &extractor,
        &cfg.metrics.protocol,
    )?;
    std::fs::write(
        out.join(artifacts::REPORT),
        serde_json::to_string_pretty(&report)?,
    )?;
    eprintln!(
        "tc_mean {:.4} (tl {:.4} / vlpips {:.4}), fid {:?}",
        report.tc_mean, report.tl, report.vlpips, report.fid
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommands_parse() {
        for (s, v) in [
            ("synth-data", Subcommand::SynthData),
            ("pretrain", Subcommand::Pretrain),
            ("finetune", Subcommand::Finetune),
            ("train-adaptor", Subcommand::TrainAdaptor),
            ("translate", Subcommand::Translate),
            ("eval", Subcommand::Eval),
            ("orbit", Subcommand::Orbit),
        ] {
            assert_eq!(Subcommand::from_str(s).unwrap(), v);
        }
        assert!(Subcommand::from_str("bogus").is_err());
        assert!(Device::from_str("accelerator").is_ok());
        assert!(Device::from_str("gpu").is_err());
    }
}
