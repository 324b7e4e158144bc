//! The adaptor that maps encoder features back to field feature maps, the
//! assembled translation bundle, and the data-free adaptor training loop.
//!
//! Training never touches a dataset: every batch is produced by the frozen
//! generator stack itself, and only the adaptor's parameters receive
//! gradients. The loop takes no data argument at all, which makes the
//! "no real data" contract structural rather than procedural.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{assign_tensors, collect_tensors, Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::losses::{adaptor_objective, LossWeights};
use crate::models::{CondModel, EmbeddingTable, Encoder, Generator, MappingNet};
use crate::nn::{
    apply_grads, grads_by_name, normal_tensor, Adam, BatchNorm2d, BnMode, Conv2d, Cx, Module,
    Param, LRELU_SLOPE,
};
use crate::renderer::{render_batch, FieldNet, RenderConfig};
use crate::rng::{stage_rng, step_rng, SeedableRng};
use crate::synth::CameraPrior;
use crate::tape::{Graph, Var};
use crate::transplant::cond_from_checkpoint;

/// Which adaptor architecture to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorKind {
    Unet,
    PlainConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptorConfig {
    pub kind: AdaptorKind,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        Self {
            kind: AdaptorKind::Unet,
        }
    }
}

/// Channel multipliers of the encoder ladder, relative to the input width.
/// The full five-rung ladder only fits feature grids of 64 and up; smaller
/// grids truncate it while keeping the skip topology.
fn ladder_multipliers(feat_res: usize) -> Vec<usize> {
    let max_rungs = (feat_res as f64).log2().floor() as usize;
    let rungs = if feat_res >= 64 { 5 } else { 3.min(max_rungs) };
    (0..rungs).map(|i| 1usize << i.min(3)).collect()
}

/// U-net adaptor: strided conv encoder, upsampling decoder with skip
/// connections between layer k and layer n-k, batch-norm everywhere except
/// the final 64-channel convolution.
#[derive(Clone, Debug)]
pub struct UnetAdaptor {
    enc: Vec<(Conv2d, BatchNorm2d)>,
    dec: Vec<(Conv2d, BatchNorm2d)>,
    final_conv: Conv2d,
    pub channels: usize,
    pub feat_res: usize,
}

impl UnetAdaptor {
    pub fn new(rng: &mut impl Rng, channels: usize, feat_res: usize) -> Result<Self> {
        let mults = ladder_multipliers(feat_res);
        if mults.len() < 2 {
            return Err(Error::config(format!(
                "feature grid {feat_res} too small for a U-net adaptor"
            )));
        }
        let widths: Vec<usize> = mults.iter().map(|m| channels * m).collect();
        let mut enc = Vec::new();
        let mut in_ch = channels;
        for &w in &widths {
            enc.push((Conv2d::new(rng, in_ch, w, 3, 2, 1), BatchNorm2d::new(w)));
            in_ch = w;
        }
        // Decoder mirrors the encoder; rung j consumes the previous decoder
        // output concatenated with the skip from encoder rung n-2-j.
        let n = widths.len();
        let mut dec = Vec::new();
        let mut prev = widths[n - 1];
        for j in 0..n {
            let out = if j + 1 < n { widths[n - 2 - j] } else { channels };
            let skip = if j == 0 {
                0
            } else {
                widths[n - 1 - j]
            };
            dec.push((
                Conv2d::new(rng, prev + skip, out, 3, 1, 1),
                BatchNorm2d::new(out),
            ));
            prev = out;
        }
        Ok(Self {
            enc,
            dec,
            final_conv: Conv2d::new(rng, channels, channels, 3, 1, 1),
            channels,
            feat_res,
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var, mode: BnMode) -> Result<Var> {
        let g = cx.g;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels || shape[2] != self.feat_res {
            return Err(Error::shape(format!(
                "adaptor expects [N,{},{res},{res}], got {shape:?}",
                self.channels,
                res = self.feat_res
            )));
        }
        let mut skips = Vec::new();
        let mut h = x;
        for (conv, bn) in &self.enc {
            h = conv.forward(cx, h);
            h = bn.forward(cx, h, mode)?;
            h = g.leaky_relu(h, LRELU_SLOPE);
            skips.push(h);
        }
        let n = self.dec.len();
        for (j, (conv, bn)) in self.dec.iter().enumerate() {
            if j > 0 {
                h = g.concat(&[h, skips[n - 1 - j]], 1);
            }
            h = g.nearest_up2(h);
            h = conv.forward(cx, h);
            h = bn.forward(cx, h, mode)?;
            h = g.relu(h);
        }
        Ok(self.final_conv.forward(cx, h))
    }
}

impl Module for UnetAdaptor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, (c, b)) in self.enc.iter().enumerate() {
            c.visit_params(&format!("{prefix}.enc{i}.conv"), f);
            b.visit_params(&format!("{prefix}.enc{i}.bn"), f);
        }
        for (i, (c, b)) in self.dec.iter().enumerate() {
            c.visit_params(&format!("{prefix}.dec{i}.conv"), f);
            b.visit_params(&format!("{prefix}.dec{i}.bn"), f);
        }
        self.final_conv.visit_params(&format!("{prefix}.final"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (c, b)) in self.enc.iter_mut().enumerate() {
            c.visit_params_mut(&format!("{prefix}.enc{i}.conv"), f);
            b.visit_params_mut(&format!("{prefix}.enc{i}.bn"), f);
        }
        for (i, (c, b)) in self.dec.iter_mut().enumerate() {
            c.visit_params_mut(&format!("{prefix}.dec{i}.conv"), f);
            b.visit_params_mut(&format!("{prefix}.dec{i}.bn"), f);
        }
        self.final_conv.visit_params_mut(&format!("{prefix}.final"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::tape::Tensor)) {
        for (i, (_, b)) in self.enc.iter().enumerate() {
            b.visit_buffers(&format!("{prefix}.enc{i}.bn"), f);
        }
        for (i, (_, b)) in self.dec.iter().enumerate() {
            b.visit_buffers(&format!("{prefix}.dec{i}.bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::tape::Tensor)) {
        for (i, (_, b)) in self.enc.iter_mut().enumerate() {
            b.visit_buffers_mut(&format!("{prefix}.enc{i}.bn"), f);
        }
        for (i, (_, b)) in self.dec.iter_mut().enumerate() {
            b.visit_buffers_mut(&format!("{prefix}.dec{i}.bn"), f);
        }
    }
}

/// Baseline adaptor without skips or resolution changes.
#[derive(Clone, Debug)]
pub struct PlainConvAdaptor {
    convs: Vec<(Conv2d, BatchNorm2d)>,
    final_conv: Conv2d,
    pub channels: usize,
    pub feat_res: usize,
}

impl PlainConvAdaptor {
    pub fn new(rng: &mut impl Rng, channels: usize, feat_res: usize) -> Result<Self> {
        let wide = channels * 2;
        Ok(Self {
            convs: vec![
                (Conv2d::new(rng, channels, wide, 3, 1, 1), BatchNorm2d::new(wide)),
                (Conv2d::new(rng, wide, wide, 3, 1, 1), BatchNorm2d::new(wide)),
            ],
            final_conv: Conv2d::new(rng, wide, channels, 3, 1, 1),
            channels,
            feat_res,
        })
    }

    pub fn forward(&self, cx: &Cx, x: Var, mode: BnMode) -> Result<Var> {
        let g = cx.g;
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.channels || shape[2] != self.feat_res {
            return Err(Error::shape(format!(
                "adaptor expects [N,{},{res},{res}], got {shape:?}",
                self.channels,
                res = self.feat_res
            )));
        }
        let mut h = x;
        for (conv, bn) in &self.convs {
            h = conv.forward(cx, h);
            h = bn.forward(cx, h, mode)?;
            h = g.leaky_relu(h, LRELU_SLOPE);
        }
        Ok(self.final_conv.forward(cx, h))
    }
}

impl Module for PlainConvAdaptor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, (c, b)) in self.convs.iter().enumerate() {
            c.visit_params(&format!("{prefix}.conv{i}"), f);
            b.visit_params(&format!("{prefix}.bn{i}"), f);
        }
        self.final_conv.visit_params(&format!("{prefix}.final"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (c, b)) in self.convs.iter_mut().enumerate() {
            c.visit_params_mut(&format!("{prefix}.conv{i}"), f);
            b.visit_params_mut(&format!("{prefix}.bn{i}"), f);
        }
        self.final_conv.visit_params_mut(&format!("{prefix}.final"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::tape::Tensor)) {
        for (i, (_, b)) in self.convs.iter().enumerate() {
            b.visit_buffers(&format!("{prefix}.bn{i}"), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::tape::Tensor)) {
        for (i, (_, b)) in self.convs.iter_mut().enumerate() {
            b.visit_buffers_mut(&format!("{prefix}.bn{i}"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub enum Adaptor {
    Unet(UnetAdaptor),
    PlainConv(PlainConvAdaptor),
}

impl Adaptor {
    pub fn new(
        rng: &mut impl Rng,
        cfg: &AdaptorConfig,
        channels: usize,
        feat_res: usize,
    ) -> Result<Self> {
        Ok(match cfg.kind {
            AdaptorKind::Unet => Adaptor::Unet(UnetAdaptor::new(rng, channels, feat_res)?),
            AdaptorKind::PlainConv => {
                Adaptor::PlainConv(PlainConvAdaptor::new(rng, channels, feat_res)?)
            }
        })
    }

    pub fn kind(&self) -> AdaptorKind {
        match self {
            Adaptor::Unet(_) => AdaptorKind::Unet,
            Adaptor::PlainConv(_) => AdaptorKind::PlainConv,
        }
    }

    pub fn forward(&self, cx: &Cx, x: Var, mode: BnMode) -> Result<Var> {
        match self {
            Adaptor::Unet(a) => a.forward(cx, x, mode),
            Adaptor::PlainConv(a) => a.forward(cx, x, mode),
        }
    }

    fn as_module(&self) -> &dyn Module {
        match self {
            Adaptor::Unet(a) => a,
            Adaptor::PlainConv(a) => a,
        }
    }

    fn as_module_mut(&mut self) -> &mut dyn Module {
        match self {
            Adaptor::Unet(a) => a,
            Adaptor::PlainConv(a) => a,
        }
    }
}

impl Module for Adaptor {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.as_module().visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.as_module_mut().visit_params_mut(prefix, f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::tape::Tensor)) {
        self.as_module().visit_buffers(prefix, f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::tape::Tensor)) {
        self.as_module_mut().visit_buffers_mut(prefix, f);
    }
}

/// The assembled translation system. Everything except the adaptor is frozen.
#[derive(Clone, Debug)]
pub struct I2IBundle {
    pub arch: crate::models::ArchConfig,
    pub adaptor_cfg: AdaptorConfig,
    pub enc: Encoder,
    pub adaptor: Adaptor,
    pub gen: Generator,
    pub m1: MappingNet,
    pub m2: MappingNet,
    pub embed: EmbeddingTable,
    pub field: FieldNet,
}

pub const FROZEN_PREFIXES: [&str; 6] = ["enc", "m1", "m2", "embed", "field", "gen"];

impl I2IBundle {
    /// Checksum of every frozen (non-adaptor) tensor.
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = 0u64;
        h ^= crate::nn::checksum(&self.enc, "enc");
        h = h.rotate_left(7) ^ crate::nn::checksum(&self.m1, "m1");
        h = h.rotate_left(7) ^ crate::nn::checksum(&self.m2, "m2");
        h = h.rotate_left(7) ^ crate::nn::checksum(&self.embed, "embed");
        h = h.rotate_left(7) ^ crate::nn::checksum(&self.field, "field");
        h = h.rotate_left(7) ^ crate::nn::checksum(&self.gen, "gen");
        h
    }

    /// Parameter names flagged trainable (adaptor only).
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.adaptor
            .visit_params("adaptor", &mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn to_checkpoint(&self, step: u64, seed: u64) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        collect_tensors(&mut tensors, &self.enc, "enc");
        collect_tensors(&mut tensors, &self.adaptor, "adaptor");
        collect_tensors(&mut tensors, &self.gen, "gen");
        collect_tensors(&mut tensors, &self.m1, "m1");
        collect_tensors(&mut tensors, &self.m2, "m2");
        collect_tensors(&mut tensors, &self.embed, "embed");
        collect_tensors(&mut tensors, &self.field, "field");
        let mut ckpt = Checkpoint::new(
            CheckpointKind::TranslationBundle,
            self.arch.clone(),
            step,
            seed,
            tensors,
        );
        ckpt.manifest.frozen = Some(FROZEN_PREFIXES.iter().map(|s| s.to_string()).collect());
        ckpt.manifest.extra = Some(serde_json::json!({
            "adaptor": self.adaptor_cfg,
            "ladder_multipliers": ladder_multipliers(self.arch.feat_res),
        }));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.manifest.kind != CheckpointKind::TranslationBundle {
            return Err(Error::Checkpoint(format!(
                "expected a translation bundle, found {:?}",
                ckpt.manifest.kind
            )));
        }
        let arch = ckpt.manifest.arch.clone();
        let adaptor_cfg: AdaptorConfig = match &ckpt.manifest.extra {
            Some(extra) => serde_json::from_value(extra["adaptor"].clone())?,
            None => AdaptorConfig::default(),
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let cond = CondModel::new(&mut rng, &arch)?;
        let mut bundle = Self {
            enc: cond.disc.to_encoder(),
            adaptor: Adaptor::new(&mut rng, &adaptor_cfg, arch.feat_channels, arch.feat_res)?,
            gen: cond.gen,
            m1: cond.m1,
            m2: cond.m2,
            embed: cond.embed,
            field: cond.field,
            arch,
            adaptor_cfg,
        };
        let mut consumed = std::collections::BTreeSet::new();
        assign_tensors(&mut bundle.enc, "enc", &ckpt.tensors, &mut consumed)?;
        assign_tensors(&mut bundle.adaptor, "adaptor", &ckpt.tensors, &mut consumed)?;
        assign_tensors(&mut bundle.gen, "gen", &ckpt.tensors, &mut consumed)?;
        assign_tensors(&mut bundle.m1, "m1", &ckpt.tensors, &mut consumed)?;
        assign_tensors(&mut bundle.m2, "m2", &ckpt.tensors, &mut consumed)?;
        assign_tensors(&mut bundle.embed, "embed", &ckpt.tensors, &mut consumed)?;
        assign_tensors(&mut bundle.field, "field", &ckpt.tensors, &mut consumed)?;
        let extra: Vec<&String> = ckpt
            .tensors
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if !extra.is_empty() {
            return Err(Error::Transplant(format!("unused bundle tensors: {extra:?}")));
        }
        Ok(bundle)
    }
}

/// Build the translation system from a trained conditional checkpoint: the
/// encoder is the discriminator trunk, generator/mappings/field/embeddings
/// copy over, and the adaptor starts fresh.
pub fn assemble_i2i(
    cond_ckpt: &Checkpoint,
    adaptor_cfg: &AdaptorConfig,
    seed: u64,
) -> Result<I2IBundle> {
    let cond = cond_from_checkpoint(cond_ckpt)?;
    let mut rng = stage_rng(seed, "adaptor-init");
    let arch = cond.cfg.clone();
    Ok(I2IBundle {
        enc: cond.disc.to_encoder(),
        adaptor: Adaptor::new(&mut rng, adaptor_cfg, arch.feat_channels, arch.feat_res)?,
        gen: cond.gen,
        m1: cond.m1,
        m2: cond.m2,
        embed: cond.embed,
        field: cond.field,
        arch,
        adaptor_cfg: adaptor_cfg.clone(),
    })
}

/// Optimization settings for the adaptor stage.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptorTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub n_anchors: usize,
    /// Stop once the rolling mean of the alignment term falls below this
    /// fraction of its initial rolling mean (None = run all steps).
    pub early_stop_align_ratio: Option<f64>,
    pub early_stop_window: usize,
    pub verbose: bool,
}

impl Default for AdaptorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            weights: LossWeights::default(),
            n_anchors: 16,
            early_stop_align_ratio: None,
            early_stop_window: 25,
            verbose: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdaptorStepStats {
    pub step: usize,
    pub total: f64,
    pub alignment: f64,
    pub hierarchical: f64,
    pub relative: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdaptorTrainLog {
    pub stats: Vec<AdaptorStepStats>,
    pub stopped_early: bool,
}

impl AdaptorTrainLog {
    pub fn rolling_alignment(&self, window: usize) -> (f64, f64) {
        let w = window.max(1).min(self.stats.len());
        let first: f64 = self.stats[..w].iter().map(|s| s.alignment).sum::<f64>() / w as f64;
        let last: f64 = self.stats[self.stats.len() - w..]
            .iter()
            .map(|s| s.alignment)
            .sum::<f64>()
            / w as f64;
        (first, last)
    }
}

/// Train the adaptor on generated data only. Everything but the adaptor is
/// lifted as constants, so no other network can receive gradients; the
/// freeze contract is additionally checkable via [`I2IBundle::frozen_checksum`].
pub fn train_adaptor(
    bundle: &mut I2IBundle,
    cfg: &AdaptorTrainConfig,
    prior: &CameraPrior,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<AdaptorTrainLog> {
    cfg.weights.validate()?;
    prior.validate()?;
    if cfg.batch < 2 {
        return Err(Error::config(
            "adaptor training uses batch statistics; batch must be >= 2",
        ));
    }
    let render_cfg = RenderConfig {
        n_samples: bundle.arch.n_samples_train,
        stratified: true,
        t_near: bundle.arch.t_near,
        t_far: bundle.arch.t_far,
        resolution: (bundle.arch.feat_res, bundle.arch.feat_res),
    };
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut log = AdaptorTrainLog::default();
    let mut initial_roll: Option<f64> = None;

    for step in 0..cfg.steps {
        let mut rng = step_rng(seed, "adaptor-step", step);
        let g = Graph::new();
        let frozen = Cx::new(&g, false);
        let trainable = Cx::new(&g, true);

        let labels: Vec<usize> = (0..cfg.batch)
            .map(|_| 1 + rng.random_range(0..bundle.arch.n_classes))
            .collect();
        let z = g.constant(normal_tensor(&mut rng, &[cfg.batch, bundle.arch.z_dim], 1.0));
        let poses: Vec<_> = (0..cfg.batch)
            .map(|_| prior.sample(&mut rng))
            .collect::<Result<_>>()?;

        let w1 = bundle.m1.forward(&frozen, z);
        let e = bundle.embed.lookup(&frozen, &labels)?;
        let ze = g.concat(&[z, e], 1);
        let w2 = bundle.m2.forward(&frozen, ze);

        let (f, _) = render_batch(&frozen, &bundle.field, &poses, w1, &render_cfg, Some(&mut rng))?;
        let (image, blocks_f) = bundle.gen.synthesize(&frozen, f, w1, w2)?;
        let enc_features = bundle.enc.encode(&frozen, image)?;
        let f_hat = bundle.adaptor.forward(&trainable, enc_features, BnMode::Train)?;
        let (image_hat, blocks_f_hat) = bundle.gen.synthesize(&frozen, f_hat, w1, w2)?;

        let mut levels_f = blocks_f;
        levels_f.push(image);
        let mut levels_f_hat = blocks_f_hat;
        levels_f_hat.push(image_hat);

        let loss = adaptor_objective(
            &g,
            f,
            f_hat,
            &levels_f,
            &levels_f_hat,
            &cfg.weights,
            cfg.n_anchors,
            &mut rng,
        )?;
        let total = g.scalar_value(loss.total);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite adaptor loss at step {step}"
            )));
        }
        let grads = grads_by_name(&g, &trainable, loss.total, &[("adaptor", &bundle.adaptor)]);
        apply_grads(&mut adam, &mut bundle.adaptor, "adaptor", &grads);

        log.stats.push(AdaptorStepStats {
            step,
            total,
            alignment: g.scalar_value(loss.alignment),
            hierarchical: g.scalar_value(loss.hierarchical),
            relative: g.scalar_value(loss.relative),
        });
        if cfg.verbose && (step % 25 == 0 || step + 1 == cfg.steps) {
            let s = log.stats.last().expect("just pushed");
            eprintln!(
                "[adaptor] step {step}: total {:.4} align {:.4} hier {:.4} rel {:.4}",
                s.total, s.alignment, s.hierarchical, s.relative
            );
        }

        if let Some(ratio) = cfg.early_stop_align_ratio {
            let w = cfg.early_stop_window.max(1);
            if log.stats.len() == w {
                initial_roll =
                    Some(log.stats.iter().map(|s| s.alignment).sum::<f64>() / w as f64);
            }
            if let Some(first) = initial_roll {
                if log.stats.len() >= 2 * w {
                    let last: f64 = log.stats[log.stats.len() - w..]
                        .iter()
                        .map(|s| s.alignment)
                        .sum::<f64>()
                        / w as f64;
                    if last <= ratio * first {
                        log.stopped_early = true;
                        break;
                    }
                }
            }
        }

        if let (Some(dir), true) = (checkpoint_dir, step > 0 && step % 500 == 0) {
            bundle
                .to_checkpoint(step as u64, seed)
                .save(&dir.join(format!("step-{step:06}")))?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchConfig;
    use crate::nn::checksum;
    use crate::rng::stage_rng;
    use crate::transplant::{transplant_conditional, uncond_to_checkpoint};

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            z_dim: 6,
            style_dim: 8,
            embed_dim: 4,
            n_classes: 2,
            image_res: 16,
            feat_res: 4,
            feat_channels: 6,
            gen_channels: vec![6, 4],
            disc_stem_channels: 4,
            disc_channels: vec![4, 6],
            field_hidden: 8,
            field_layers: 1,
            posenc_freqs: 2,
            map_layers: 2,
            map_hidden: 8,
            n_samples_train: 6,
            n_samples_eval: 8,
            ..ArchConfig::default()
        }
    }

    fn tiny_bundle(seed: u64) -> I2IBundle {
        let mut rng = stage_rng(seed, "init");
        let mut arch = tiny_arch();
        arch.n_classes = 1;
        let uncond = crate::models::UncondModel::new(&mut rng, &arch).unwrap();
        let ckpt = uncond_to_checkpoint(&uncond, 0, seed);
        let cond = transplant_conditional(&ckpt, 2, seed).unwrap();
        assemble_i2i(&cond, &AdaptorConfig::default(), seed).unwrap()
    }

    #[test]
    fn ladder_truncation_follows_grid_size() {
        assert_eq!(ladder_multipliers(64), vec![1, 2, 4, 8, 8]);
        assert_eq!(ladder_multipliers(16), vec![1, 2, 4]);
        assert_eq!(ladder_multipliers(8), vec![1, 2, 4]);
        assert_eq!(ladder_multipliers(4), vec![1, 2]);
    }

    #[test]
    fn unet_shape_contract_and_bn_modes() {
        let mut rng = stage_rng(1, "unet");
        let unet = UnetAdaptor::new(&mut rng, 6, 16).unwrap();
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let x = g.constant(normal_tensor(&mut rng, &[2, 6, 16, 16], 1.0));
        let y = unet.forward(&cx, x, BnMode::Train).unwrap();
        assert_eq!(g.shape(y), vec![2, 6, 16, 16]);

        // Eval mode is deterministic.
        let a = unet.forward(&cx, x, BnMode::Eval).unwrap();
        let b = unet.forward(&cx, x, BnMode::Eval).unwrap();
        assert_eq!(*g.value(a), *g.value(b));

        // Train-mode batch of one is rejected.
        let single = g.constant(normal_tensor(&mut rng, &[1, 6, 16, 16], 1.0));
        assert!(unet.forward(&cx, single, BnMode::Train).is_err());

        // Wrong channel count is a shape error.
        let bad = g.constant(normal_tensor(&mut rng, &[2, 5, 16, 16], 1.0));
        assert!(unet.forward(&cx, bad, BnMode::Train).is_err());
    }

    #[test]
    fn bundle_assembly_freezes_everything_but_adaptor() {
        let bundle = tiny_bundle(3);
        let trainable = bundle.trainable_names();
        assert!(!trainable.is_empty());
        assert!(trainable.iter().all(|n| n.starts_with("adaptor.")));
        let ckpt = bundle.to_checkpoint(0, 3);
        assert_eq!(
            ckpt.manifest.frozen.as_deref().unwrap(),
            &FROZEN_PREFIXES.map(String::from)
        );
    }

    #[test]
    fn encoder_matches_discriminator_trunk_after_assembly() {
        let mut rng = stage_rng(4, "init");
        let mut arch = tiny_arch();
        arch.n_classes = 1;
        let uncond = crate::models::UncondModel::new(&mut rng, &arch).unwrap();
        let cond_ckpt =
            transplant_conditional(&uncond_to_checkpoint(&uncond, 0, 4), 2, 4).unwrap();
        let cond = crate::transplant::cond_from_checkpoint(&cond_ckpt).unwrap();
        let bundle = assemble_i2i(&cond_ckpt, &AdaptorConfig::default(), 4).unwrap();

        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let img = g.constant(normal_tensor(&mut rng, &[2, 3, 16, 16], 0.5));
        let e = bundle.enc.encode(&cx, img).unwrap();
        let (_, trunk) = cond.disc.discriminate(&cx, img).unwrap();
        assert_eq!(*g.value(e), *g.value(trunk));
    }

    #[test]
    fn bundle_checkpoint_roundtrips_byte_identically() {
        let bundle = tiny_bundle(5);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        bundle.to_checkpoint(1, 5).save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        let restored = I2IBundle::from_checkpoint(&loaded).unwrap();
        restored.to_checkpoint(1, 5).save(&b).unwrap();
        assert_eq!(
            std::fs::read(a.join("manifest.json")).unwrap(),
            std::fs::read(b.join("manifest.json")).unwrap()
        );
        for entry in &loaded.manifest.tensors {
            let pa = a.join("tensors").join(format!("{}.f32le", entry.name));
            let pb = b.join("tensors").join(format!("{}.f32le", entry.name));
            assert_eq!(
                std::fs::read(pa).unwrap(),
                std::fs::read(pb).unwrap(),
                "tensor {} changed across the roundtrip",
                entry.name
            );
        }
    }

    #[test]
    fn adaptor_training_touches_only_adaptor_and_is_deterministic() {
        let mut bundle = tiny_bundle(6);
        let frozen_before = bundle.frozen_checksum();
        let adaptor_before = checksum(&bundle.adaptor, "adaptor");
        let cfg = AdaptorTrainConfig {
            steps: 4,
            batch: 2,
            n_anchors: 2,
            ..AdaptorTrainConfig::default()
        };
        let log = train_adaptor(&mut bundle, &cfg, &CameraPrior::default(), 11, None).unwrap();
        assert_eq!(log.stats.len(), 4);
        assert!(log.stats.iter().all(|s| s.total.is_finite()));
        assert_eq!(bundle.frozen_checksum(), frozen_before, "frozen nets changed");
        assert_ne!(
            checksum(&bundle.adaptor, "adaptor"),
            adaptor_before,
            "adaptor did not change"
        );

        // Same seed, same result.
        let mut bundle2 = tiny_bundle(6);
        train_adaptor(&mut bundle2, &cfg, &CameraPrior::default(), 11, None).unwrap();
        assert_eq!(
            checksum(&bundle.adaptor, "adaptor"),
            checksum(&bundle2.adaptor, "adaptor")
        );
    }
}
