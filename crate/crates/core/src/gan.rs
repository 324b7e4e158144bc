//! Adversarial training for both stages: the unconditional pretrain and the
//! multi-class fine-tune share one loop; they differ only in how styles are
//! produced and which modules the generator-side update touches.

use std::path::Path;

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::checkpoint::Checkpoint;
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::losses::{adv_g_loss, gan_losses_per_class, per_class_logit, LossWeights};
use crate::models::{CondModel, Discriminator, Generator, UncondModel};
use crate::nn::{apply_grads, grads_by_name, normal_tensor, Adam, Cx, Linear, Module};
use crate::renderer::{feature_image_consistency, render_batch, FieldNet, RenderConfig};
use crate::rng::{stage_rng, step_rng};
use crate::synth::CameraPrior;
use crate::tape::{Graph, Tensor, Var};
use crate::transplant::{cond_to_checkpoint, uncond_to_checkpoint};

/// Optimization settings for the adversarial stages.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    /// Seeded feature-grid positions per step for the render-consistency term.
    pub path_positions: usize,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    pub verbose: bool,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 8,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            weights: LossWeights::default(),
            path_positions: 64,
            checkpoint_every: 0,
            verbose: false,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub real_logit: f64,
    pub fake_logit: f64,
    pub r1: f64,
    pub path: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub stats: Vec<StepStats>,
}

impl TrainLog {
    pub fn all_finite(&self) -> bool {
        self.stats.iter().all(|s| {
            s.loss_d.is_finite() && s.loss_g.is_finite() && s.r1.is_finite() && s.path.is_finite()
        })
    }
}

/// What the shared loop needs from a stage.
pub trait GanStage: Module + Sized {
    const STAGE_TAG: &'static str;

    fn n_classes(&self) -> usize;
    fn z_dim(&self) -> usize;
    fn field(&self) -> &FieldNet;
    fn gen(&self) -> &Generator;
    fn disc(&self) -> &Discriminator;
    fn disc_mut(&mut self) -> &mut Discriminator;
    fn path_proj(&self) -> &Linear;
    fn image_res(&self) -> usize;
    fn render_config(&self) -> RenderConfig;
    /// (w1, w2) for a noise batch and 1-based labels.
    fn styles(&self, cx: &Cx, z: Var, labels: &[usize]) -> Result<(Var, Var)>;
    /// Modules updated by the generator-side step, excluding the
    /// discriminator.
    fn g_side(&self) -> Vec<(&'static str, &dyn Module)>;
    fn apply_g_side(&mut self, adam: &mut Adam, grads: &std::collections::BTreeMap<String, Tensor>);
    fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint;
}

impl GanStage for UncondModel {
    const STAGE_TAG: &'static str = "pretrain";

    fn n_classes(&self) -> usize {
        1
    }

    fn z_dim(&self) -> usize {
        self.cfg.z_dim
    }

    fn field(&self) -> &FieldNet {
        &self.field
    }

    fn gen(&self) -> &Generator {
        &self.gen
    }

    fn disc(&self) -> &Discriminator {
        &self.disc
    }

    fn disc_mut(&mut self) -> &mut Discriminator {
        &mut self.disc
    }

    fn path_proj(&self) -> &Linear {
        &self.path_proj
    }

    fn image_res(&self) -> usize {
        self.cfg.image_res
    }

    fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_samples: self.cfg.n_samples_train,
            stratified: true,
            t_near: self.cfg.t_near,
            t_far: self.cfg.t_far,
            resolution: (self.cfg.feat_res, self.cfg.feat_res),
        }
    }

    fn styles(&self, cx: &Cx, z: Var, _labels: &[usize]) -> Result<(Var, Var)> {
        let w = self.mapping.forward(cx, z);
        Ok((w, w))
    }

    fn g_side(&self) -> Vec<(&'static str, &dyn Module)> {
        vec![
            ("mapping", &self.mapping),
            ("field", &self.field),
            ("gen", &self.gen),
            ("path_proj", &self.path_proj),
        ]
    }

    fn apply_g_side(
        &mut self,
        adam: &mut Adam,
        grads: &std::collections::BTreeMap<String, Tensor>,
    ) {
        apply_grads(adam, &mut self.mapping, "mapping", grads);
        apply_grads(adam, &mut self.field, "field", grads);
        apply_grads(adam, &mut self.gen, "gen", grads);
        apply_grads(adam, &mut self.path_proj, "path_proj", grads);
    }

    fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        uncond_to_checkpoint(self, step, seed)
    }
}

impl GanStage for CondModel {
    const STAGE_TAG: &'static str = "finetune";

    fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    fn z_dim(&self) -> usize {
        self.cfg.z_dim
    }

    fn field(&self) -> &FieldNet {
        &self.field
    }

    fn gen(&self) -> &Generator {
        &self.gen
    }

    fn disc(&self) -> &Discriminator {
        &self.disc
    }

    fn disc_mut(&mut self) -> &mut Discriminator {
        &mut self.disc
    }

    fn path_proj(&self) -> &Linear {
        &self.path_proj
    }

    fn image_res(&self) -> usize {
        self.cfg.image_res
    }

    fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_samples: self.cfg.n_samples_train,
            stratified: true,
            t_near: self.cfg.t_near,
            t_far: self.cfg.t_far,
            resolution: (self.cfg.feat_res, self.cfg.feat_res),
        }
    }

    fn styles(&self, cx: &Cx, z: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let w1 = self.map_latent_m1(cx, z)?;
        let w2 = self.map_latent_m2(cx, z, labels)?;
        Ok((w1, w2))
    }

    fn g_side(&self) -> Vec<(&'static str, &dyn Module)> {
        vec![
            ("m1", &self.m1),
            ("m2", &self.m2),
            ("embed", &self.embed),
            ("field", &self.field),
            ("gen", &self.gen),
            ("path_proj", &self.path_proj),
        ]
    }

    fn apply_g_side(
        &mut self,
        adam: &mut Adam,
        grads: &std::collections::BTreeMap<String, Tensor>,
    ) {
        apply_grads(adam, &mut self.m1, "m1", grads);
        apply_grads(adam, &mut self.m2, "m2", grads);
        apply_grads(adam, &mut self.embed, "embed", grads);
        apply_grads(adam, &mut self.field, "field", grads);
        apply_grads(adam, &mut self.gen, "gen", grads);
        apply_grads(adam, &mut self.path_proj, "path_proj", grads);
    }

    fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        cond_to_checkpoint(self, step, seed)
    }
}

fn sample_labels(rng: &mut ChaCha8Rng, n: usize, n_classes: usize) -> Vec<usize> {
    (0..n).map(|_| 1 + rng.random_range(0..n_classes)).collect()
}

fn sample_poses(rng: &mut ChaCha8Rng, prior: &CameraPrior, n: usize) -> Result<Vec<CameraPose>> {
    (0..n).map(|_| prior.sample(rng)).collect()
}

/// One discriminator update on explicit batches. `fake` must already be
/// detached from whatever produced it.
pub fn disc_update(
    disc: &mut Discriminator,
    adam: &mut Adam,
    real: &Array4<f64>,
    real_labels: &[usize],
    fake: &Array4<f64>,
    fake_labels: &[usize],
    lambda_r1: f64,
) -> Result<(f64, f64, f64, f64)> {
    let g = Graph::new();
    let cx_d = Cx::new(&g, true);
    let real_var = g.param(real.clone().into_dyn());
    let fake_var = g.constant(fake.clone().into_dyn());
    let terms = gan_losses_per_class(
        &cx_d,
        disc,
        real_var,
        real_labels,
        fake_var,
        fake_labels,
        lambda_r1,
    )?;
    let loss = g.scalar_value(terms.loss_d);
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite discriminator loss".into()));
    }
    let grads = grads_by_name(&g, &cx_d, terms.loss_d, &[("disc", disc)]);
    apply_grads(adam, disc, "disc", &grads);
    let real_logit = g.value(terms.sel_real).mean().unwrap_or(0.0);
    let fake_logit = g.value(terms.sel_fake).mean().unwrap_or(0.0);
    Ok((loss, g.scalar_value(terms.r1), real_logit, fake_logit))
}

/// Shared training loop for both adversarial stages: alternating
/// discriminator and generator updates, R1 every step, fully seeded.
pub fn train_gan<M: GanStage>(
    model: &mut M,
    data: &LabeledImages,
    cfg: &GanTrainConfig,
    prior: &CameraPrior,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    prior.validate()?;
    if data.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let res = model.image_res();
    match data.resolution() {
        Some((h, w)) if h == res && w == res => {}
        other => {
            return Err(Error::config(format!(
                "dataset resolution {other:?} does not match model {res}x{res}"
            )));
        }
    }
    if data.n_classes() < model.n_classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, model expects {}",
            data.n_classes(),
            model.n_classes()
        )));
    }

    let z_dim = model.z_dim();
    let render_cfg = model.render_config();
    let mut adam_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut adam_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut data_rng = stage_rng(seed, &format!("{}-data", M::STAGE_TAG));
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, &format!("{}-step", M::STAGE_TAG), step);

        // Discriminator update.
        let (fake, fake_labels) = {
            let g = Graph::new();
            let cx = Cx::new(&g, false);
            let labels = sample_labels(&mut rng, cfg.batch, model.n_classes());
            let z = g.constant(normal_tensor(&mut rng, &[cfg.batch, z_dim], 1.0));
            let poses = sample_poses(&mut rng, prior, cfg.batch)?;
            let (w1, w2) = model.styles(&cx, z, &labels)?;
            let (f, _) = render_batch(&cx, model.field(), &poses, w1, &render_cfg, Some(&mut rng))?;
            let (image, _) = model.gen().synthesize(&cx, f, w1, w2)?;
            let value = (*g.value(image)).clone();
            let arr: Array4<f64> = value
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|e| Error::shape(e.to_string()))?;
            (arr, labels)
        };
        let (real, mut real_labels) = data.sample_batch(&mut data_rng, cfg.batch)?;
        if model.n_classes() == 1 {
            // The unconditional discriminator has a single response.
            real_labels = vec![1; real_labels.len()];
        }
        let (loss_d, r1, real_logit, fake_logit) = disc_update(
            model.disc_mut(),
            &mut adam_d,
            &real,
            &real_labels,
            &fake,
            &fake_labels,
            cfg.weights.lambda_r1,
        )
        .map_err(|e| stamp_step(e, step))?;

        // Generator-side update.
        let (loss_g, path_value) = {
            let g = Graph::new();
            let cx_g = Cx::new(&g, true);
            let cx_d = Cx::new(&g, false);
            let labels = sample_labels(&mut rng, cfg.batch, model.n_classes());
            let z = g.constant(normal_tensor(&mut rng, &[cfg.batch, z_dim], 1.0));
            let poses = sample_poses(&mut rng, prior, cfg.batch)?;
            let (w1, w2) = model.styles(&cx_g, z, &labels)?;
            let (f, _) =
                render_batch(&cx_g, model.field(), &poses, w1, &render_cfg, Some(&mut rng))?;
            let (image, _) = model.gen().synthesize(&cx_g, f, w1, w2)?;
            let (logits, _) = model.disc().discriminate(&cx_d, image)?;
            let sel = per_class_logit(&g, logits, &labels)?;
            let adv = adv_g_loss(&g, sel);
            let path = feature_image_consistency(
                &cx_g,
                model.path_proj(),
                f,
                image,
                cfg.path_positions,
                &mut rng,
            )?;
            let total = g.add(adv, g.scale(path, cfg.weights.beta_path));
            let loss = g.scalar_value(total);
            if !loss.is_finite() {
                return Err(stamp_step(
                    Error::Numeric("non-finite generator loss".into()),
                    step,
                ));
            }
            let grads = grads_by_name(&g, &cx_g, total, &model.g_side());
            let path_value = g.scalar_value(path);
            model.apply_g_side(&mut adam_g, &grads);
            (loss, path_value)
        };

        log.stats.push(StepStats {
            step,
            loss_d,
            loss_g,
            real_logit,
            fake_logit,
            r1,
            path: path_value,
        });
        if cfg.verbose && (step % 25 == 0 || step + 1 == cfg.steps) {
            eprintln!(
                "[{}] step {step}: loss_d {loss_d:.4} loss_g {loss_g:.4} r1 {r1:.4} path {path_value:.4}",
                M::STAGE_TAG
            );
        }
        if let (Some(dir), true) = (
            checkpoint_dir,
            cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0,
        ) {
            model
                .to_checkpoint((step + 1) as u64, seed)
                .save(&dir.join(format!("step-{:06}", step + 1)))?;
        }
    }
    Ok(log)
}

fn stamp_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} (step {step})")),
        other => other,
    }
}

/// Stage 1: adversarial pretraining of the unconditional model.
pub fn pretrain_unconditional(
    model: &mut UncondModel,
    data: &LabeledImages,
    cfg: &GanTrainConfig,
    prior: &CameraPrior,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    train_gan(model, data, cfg, prior, seed, checkpoint_dir)
}

/// Stage 2: adversarial fine-tuning of the transplanted multi-class model.
pub fn train_conditional(
    model: &mut CondModel,
    data: &LabeledImages,
    cfg: &GanTrainConfig,
    prior: &CameraPrior,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    if data.n_classes() != model.cfg.n_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, conditional model expects {}",
            data.n_classes(),
            model.cfg.n_classes
        )));
    }
    for i in 0..data.len() {
        let l = data.label(i);
        if l == 0 || l > model.cfg.n_classes {
            return Err(Error::Label {
                label: l,
                n_classes: model.cfg.n_classes,
            });
        }
    }
    train_gan(model, data, cfg, prior, seed, checkpoint_dir)
}
