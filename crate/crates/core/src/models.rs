//! The network stack: mapping networks, class embeddings, the upsampling
//! generator with per-block outputs, and the downsampling discriminator whose
//! trunk doubles as the translation encoder.

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Cx, Linear, Module, Param, StyleMod, LRELU_SLOPE};
use crate::renderer::FieldNet;
use crate::tape::{Tensor, Var};

/// Architecture hyperparameters. Everything downstream (transplants,
/// checkpoints, the translation bundle) is derived from this block.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub z_dim: usize,
    pub style_dim: usize,
    pub embed_dim: usize,
    pub n_classes: usize,
    pub image_res: usize,
    pub feat_res: usize,
    pub feat_channels: usize,
    /// Output channels of each upsampling generator block.
    pub gen_channels: Vec<usize>,
    pub disc_stem_channels: usize,
    /// Output channels of each downsampling discriminator block; the last
    /// entry is the trunk (encoder) output width.
    pub disc_channels: Vec<usize>,
    pub field_hidden: usize,
    pub field_layers: usize,
    pub posenc_freqs: usize,
    pub map_layers: usize,
    pub map_hidden: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub n_samples_train: usize,
    pub n_samples_eval: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            style_dim: 128,
            embed_dim: 64,
            n_classes: 2,
            image_res: 64,
            feat_res: 16,
            feat_channels: 64,
            gen_channels: vec![48, 32],
            disc_stem_channels: 32,
            disc_channels: vec![48, 64],
            field_hidden: 64,
            field_layers: 2,
            posenc_freqs: 6,
            map_layers: 4,
            map_hidden: 128,
            t_near: 2.0,
            t_far: 6.0,
            n_samples_train: 32,
            n_samples_eval: 96,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let n_blocks = self.gen_channels.len();
        if n_blocks == 0 {
            return Err(Error::config("generator needs at least one block"));
        }
        if self.feat_res << n_blocks != self.image_res {
            return Err(Error::config(format!(
                "feat_res {} with {} doubling blocks gives {}, not image_res {}",
                self.feat_res,
                n_blocks,
                self.feat_res << n_blocks,
                self.image_res
            )));
        }
        if self.disc_channels.len() != n_blocks {
            return Err(Error::config(
                "discriminator must mirror the generator's block count",
            ));
        }
        if *self.disc_channels.last().expect("non-empty") != self.feat_channels {
            return Err(Error::config(
                "discriminator trunk width must equal the feature-map channels \
                 (the adaptor consumes the trunk output)",
            ));
        }
        if self.n_classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        if self.n_samples_train < 2 || self.n_samples_eval < 2 {
            return Err(Error::config("ray sample counts must be >= 2"));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.gen_channels.len()
    }
}

/// MLP mapping noise (optionally with a class embedding) to a style code.
#[derive(Clone, Debug)]
pub struct MappingNet {
    pub layers: Vec<Linear>,
}

impl MappingNet {
    pub fn new(
        rng: &mut impl Rng,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        n_layers: usize,
    ) -> Self {
        assert!(n_layers >= 1);
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let d_in = if i == 0 { in_dim } else { hidden };
            let d_out = if i + 1 == n_layers { out_dim } else { hidden };
            layers.push(Linear::new(rng, d_in, d_out));
        }
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn forward(&self, cx: &Cx, z: Var) -> Var {
        let g = cx.g;
        let mut h = z;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(cx, h);
            if i + 1 != self.layers.len() {
                h = g.leaky_relu(h, LRELU_SLOPE);
            }
        }
        h
    }
}

impl Module for MappingNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&format!("{prefix}.fc{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&format!("{prefix}.fc{i}"), f);
        }
    }
}

/// Learned class embeddings; labels are 1-based per the public contract.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: Param,
}

impl EmbeddingTable {
    pub fn new(rng: &mut impl Rng, n_classes: usize, dim: usize) -> Self {
        Self {
            table: Param::new(crate::nn::normal_tensor(rng, &[n_classes, dim], 0.02)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.table.value.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.value.shape()[1]
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label == 0 || label > self.n_classes() {
            return Err(Error::Label {
                label,
                n_classes: self.n_classes(),
            });
        }
        Ok(())
    }

    /// `[N, E]` rows for 1-based labels.
    pub fn lookup(&self, cx: &Cx, labels: &[usize]) -> Result<Var> {
        for &l in labels {
            self.check_label(l)?;
        }
        let idx: Vec<usize> = labels.iter().map(|l| l - 1).collect();
        Ok(cx.g.gather_rows(cx.p(&self.table), std::sync::Arc::new(idx)))
    }

    /// Convex blend `(1-alpha) e_a + alpha e_b`, shape `[1, E]`.
    pub fn blend(&self, cx: &Cx, label_a: usize, label_b: usize, alpha: f64) -> Result<Var> {
        self.check_label(label_a)?;
        self.check_label(label_b)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Range {
                what: "class interpolation alpha".into(),
                value: alpha,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let g = cx.g;
        let t = cx.p(&self.table);
        let ea = g.gather_rows(t, std::sync::Arc::new(vec![label_a - 1]));
        let eb = g.gather_rows(t, std::sync::Arc::new(vec![label_b - 1]));
        Ok(g.add(g.scale(ea, 1.0 - alpha), g.scale(eb, alpha)))
    }
}

impl Module for EmbeddingTable {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}.table"), &self.table);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}.table"), &mut self.table);
    }
}

const RESIDUAL_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Style-modulated residual block that doubles spatial resolution.
#[derive(Clone, Debug)]
pub struct GenBlock {
    pub conv1: Conv2d,
    pub mod1: StyleMod,
    pub conv2: Conv2d,
    pub mod2: StyleMod,
    pub skip: Conv2d,
}

impl GenBlock {
    fn new(rng: &mut impl Rng, in_ch: usize, out_ch: usize, style_dim: usize) -> Self {
        Self {
            conv1: Conv2d::new(rng, in_ch, out_ch, 3, 1, 1),
            mod1: StyleMod::new(rng, style_dim, out_ch),
            conv2: Conv2d::new(rng, out_ch, out_ch, 3, 1, 1),
            mod2: StyleMod::new(rng, style_dim, out_ch),
            skip: Conv2d::new(rng, in_ch, out_ch, 1, 1, 0),
        }
    }

    fn forward(&self, cx: &Cx, x: Var, style: Var) -> Var {
        let g = cx.g;
        let up = g.nearest_up2(x);
        let mut h = self.conv1.forward(cx, up);
        h = self.mod1.forward(cx, h, style);
        h = g.leaky_relu(h, LRELU_SLOPE);
        h = self.conv2.forward(cx, h);
        h = self.mod2.forward(cx, h, style);
        h = g.leaky_relu(h, LRELU_SLOPE);
        let s = self.skip.forward(cx, up);
        g.scale(g.add(h, s), RESIDUAL_SCALE)
    }
}

impl Module for GenBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.mod1.visit_params(&format!("{prefix}.mod1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.mod2.visit_params(&format!("{prefix}.mod2"), f);
        self.skip.visit_params(&format!("{prefix}.skip"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), f);
        self.mod1.visit_params_mut(&format!("{prefix}.mod1"), f);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), f);
        self.mod2.visit_params_mut(&format!("{prefix}.mod2"), f);
        self.skip.visit_params_mut(&format!("{prefix}.skip"), f);
    }
}

/// Upsampling generator. Each block doubles resolution; the RGB head maps the
/// last block to 3 channels in [-1, 1].
#[derive(Clone, Debug)]
pub struct Generator {
    pub blocks: Vec<GenBlock>,
    pub rgb: Conv2d,
    pub feat_channels: usize,
    pub feat_res: usize,
}

/// Which style source drives a generator block in the two-style model.
/// Blocks below the midpoint take the geometry/content style, blocks at or
/// above take the class-specific style.
pub fn style_split(n_blocks: usize) -> usize {
    n_blocks / 2
}

impl Generator {
    pub fn new(rng: &mut impl Rng, cfg: &ArchConfig) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = cfg.feat_channels;
        for &out_ch in &cfg.gen_channels {
            blocks.push(GenBlock::new(rng, in_ch, out_ch, cfg.style_dim));
            in_ch = out_ch;
        }
        Self {
            blocks,
            rgb: Conv2d::new(rng, in_ch, 3, 1, 1, 0),
            feat_channels: cfg.feat_channels,
            feat_res: cfg.feat_res,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Forward with one style per block. Returns the RGB image and every
    /// intermediate block output (for the hierarchical constraint).
    pub fn forward_per_block(
        &self,
        cx: &Cx,
        fmap: Var,
        styles: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let g = cx.g;
        let shape = g.shape(fmap);
        if shape.len() != 4 || shape[1] != self.feat_channels {
            return Err(Error::shape(format!(
                "generator expects [N,{},h,w] features, got {shape:?}",
                self.feat_channels
            )));
        }
        if styles.len() != self.blocks.len() {
            return Err(Error::shape(format!(
                "need {} per-block styles, got {}",
                self.blocks.len(),
                styles.len()
            )));
        }
        for s in styles {
            let ss = g.shape(*s);
            if ss.len() != 2 || ss[0] != shape[0] {
                return Err(Error::shape(format!(
                    "style batch {ss:?} does not match feature batch {}",
                    shape[0]
                )));
            }
        }
        let mut h = fmap;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (block, style) in self.blocks.iter().zip(styles) {
            h = block.forward(cx, h, *style);
            block_outputs.push(h);
        }
        let image = g.tanh(self.rgb.forward(cx, h));
        Ok((image, block_outputs))
    }

    /// Two-style forward: w1 modulates the early blocks, w2 the rest.
    /// With `w2 == w1` this is exactly the single-style forward.
    pub fn synthesize(&self, cx: &Cx, fmap: Var, w1: Var, w2: Var) -> Result<(Var, Vec<Var>)> {
        let split = style_split(self.n_blocks());
        let styles: Vec<Var> = (0..self.n_blocks())
            .map(|k| if k < split { w1 } else { w2 })
            .collect();
        self.forward_per_block(cx, fmap, &styles)
    }
}

impl Module for Generator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&format!("{prefix}.block{i}"), f);
        }
        self.rgb.visit_params(&format!("{prefix}.rgb"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&format!("{prefix}.block{i}"), f);
        }
        self.rgb.visit_params_mut(&format!("{prefix}.rgb"), f);
    }
}

/// Residual block that halves spatial resolution.
#[derive(Clone, Debug)]
pub struct DiscBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Conv2d,
}

impl DiscBlock {
    fn new(rng: &mut impl Rng, in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv1: Conv2d::new(rng, in_ch, out_ch, 3, 1, 1),
            conv2: Conv2d::new(rng, out_ch, out_ch, 3, 1, 1),
            skip: Conv2d::new(rng, in_ch, out_ch, 1, 1, 0),
        }
    }

    fn forward(&self, cx: &Cx, x: Var) -> Var {
        let g = cx.g;
        let mut h = g.leaky_relu(self.conv1.forward(cx, x), LRELU_SLOPE);
        h = g.leaky_relu(self.conv2.forward(cx, h), LRELU_SLOPE);
        h = g.avg_pool2(h);
        let s = g.avg_pool2(self.skip.forward(cx, x));
        g.scale(g.add(h, s), RESIDUAL_SCALE)
    }
}

impl Module for DiscBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.skip.visit_params(&format!("{prefix}.skip"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_params_mut(&format!("{prefix}.conv2"), f);
        self.skip.visit_params_mut(&format!("{prefix}.skip"), f);
    }
}

/// Discriminator: stem + halving blocks (the trunk) and a 1x1 conv head with
/// one output channel per class, spatially averaged into logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub stem: Conv2d,
    pub blocks: Vec<DiscBlock>,
    pub head: Conv2d,
    pub n_classes: usize,
    pub image_res: usize,
}

impl Discriminator {
    pub fn new(rng: &mut impl Rng, cfg: &ArchConfig, n_classes: usize) -> Self {
        let stem = Conv2d::new(rng, 3, cfg.disc_stem_channels, 3, 1, 1);
        let mut blocks = Vec::new();
        let mut in_ch = cfg.disc_stem_channels;
        for &out_ch in &cfg.disc_channels {
            blocks.push(DiscBlock::new(rng, in_ch, out_ch));
            in_ch = out_ch;
        }
        let head = Conv2d::new(rng, in_ch, n_classes, 1, 1, 0);
        Self {
            stem,
            blocks,
            head,
            n_classes,
            image_res: cfg.image_res,
        }
    }

    fn check_input(&self, cx: &Cx, image: Var) -> Result<()> {
        let shape = cx.g.shape(image);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.image_res || shape[3] != self.image_res
        {
            return Err(Error::shape(format!(
                "expected [N,3,{res},{res}] image, got {shape:?}",
                res = self.image_res
            )));
        }
        Ok(())
    }

    /// Trunk features, shared verbatim with the encoder.
    pub fn trunk(&self, cx: &Cx, image: Var) -> Result<Var> {
        self.check_input(cx, image)?;
        Ok(run_trunk(&self.stem, &self.blocks, cx, image))
    }

    /// Per-class logits `[N, L]` plus the trunk feature map.
    pub fn discriminate(&self, cx: &Cx, image: Var) -> Result<(Var, Var)> {
        let g = cx.g;
        let trunk = self.trunk(cx, image)?;
        let maps = self.head.forward(cx, trunk);
        let shape = g.shape(maps);
        let (n, l, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let pooled = g.scale(g.sum_to(maps, &[n, l, 1, 1]), 1.0 / (h * w) as f64);
        let logits = g.reshape(pooled, &[n, l]);
        Ok((logits, trunk))
    }

    /// Encoder initialized from the trunk (weights copied).
    pub fn to_encoder(&self) -> Encoder {
        Encoder {
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            image_res: self.image_res,
        }
    }
}

fn run_trunk(stem: &Conv2d, blocks: &[DiscBlock], cx: &Cx, image: Var) -> Var {
    let g = cx.g;
    let mut h = g.leaky_relu(stem.forward(cx, image), LRELU_SLOPE);
    for b in blocks {
        h = b.forward(cx, h);
    }
    h
}

impl Module for Discriminator {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&format!("{prefix}.block{i}"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params_mut(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&format!("{prefix}.block{i}"), f);
        }
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
    }
}

/// The translation encoder: a discriminator trunk without the head.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Conv2d,
    pub blocks: Vec<DiscBlock>,
    pub image_res: usize,
}

impl Encoder {
    pub fn encode(&self, cx: &Cx, image: Var) -> Result<Var> {
        let shape = cx.g.shape(image);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.image_res || shape[3] != self.image_res
        {
            return Err(Error::shape(format!(
                "expected [N,3,{res},{res}] image, got {shape:?}",
                res = self.image_res
            )));
        }
        Ok(run_trunk(&self.stem, &self.blocks, cx, image))
    }
}

impl Module for Encoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&format!("{prefix}.block{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params_mut(&format!("{prefix}.stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&format!("{prefix}.block{i}"), f);
        }
    }
}

/// Unconditional model: one mapping network, field, generator, single-logit
/// discriminator, and the render-consistency projection head.
#[derive(Clone, Debug)]
pub struct UncondModel {
    pub cfg: ArchConfig,
    pub mapping: MappingNet,
    pub field: FieldNet,
    pub gen: Generator,
    pub disc: Discriminator,
    pub path_proj: Linear,
}

impl UncondModel {
    pub fn new(rng: &mut impl Rng, cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            mapping: MappingNet::new(rng, cfg.z_dim, cfg.map_hidden, cfg.style_dim, cfg.map_layers),
            field: FieldNet::new(
                rng,
                cfg.posenc_freqs,
                cfg.field_hidden,
                cfg.field_layers,
                cfg.feat_channels,
                cfg.style_dim,
            ),
            gen: Generator::new(rng, cfg),
            disc: Discriminator::new(rng, cfg, 1),
            path_proj: Linear::new(rng, cfg.feat_channels, 3),
        })
    }
}

impl Module for UncondModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.mapping.visit_params(&p("mapping"), f);
        self.field.visit_params(&p("field"), f);
        self.gen.visit_params(&p("gen"), f);
        self.disc.visit_params(&p("disc"), f);
        self.path_proj.visit_params(&p("path_proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.mapping.visit_params_mut(&p("mapping"), f);
        self.field.visit_params_mut(&p("field"), f);
        self.gen.visit_params_mut(&p("gen"), f);
        self.disc.visit_params_mut(&p("disc"), f);
        self.path_proj.visit_params_mut(&p("path_proj"), f);
    }
}

/// Multi-class model: two mapping networks, an embedding table, shared field
/// and generator, and a per-class discriminator head.
#[derive(Clone, Debug)]
pub struct CondModel {
    pub cfg: ArchConfig,
    pub m1: MappingNet,
    pub m2: MappingNet,
    pub embed: EmbeddingTable,
    pub field: FieldNet,
    pub gen: Generator,
    pub disc: Discriminator,
    pub path_proj: Linear,
}

impl CondModel {
    pub fn new(rng: &mut impl Rng, cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            m1: MappingNet::new(rng, cfg.z_dim, cfg.map_hidden, cfg.style_dim, cfg.map_layers),
            m2: MappingNet::new(
                rng,
                cfg.z_dim + cfg.embed_dim,
                cfg.map_hidden,
                cfg.style_dim,
                cfg.map_layers,
            ),
            embed: EmbeddingTable::new(rng, cfg.n_classes, cfg.embed_dim),
            field: FieldNet::new(
                rng,
                cfg.posenc_freqs,
                cfg.field_hidden,
                cfg.field_layers,
                cfg.feat_channels,
                cfg.style_dim,
            ),
            gen: Generator::new(rng, cfg),
            disc: Discriminator::new(rng, cfg, cfg.n_classes),
            path_proj: Linear::new(rng, cfg.feat_channels, 3),
        })
    }

    /// Geometry/content style from noise.
    pub fn map_latent_m1(&self, cx: &Cx, z: Var) -> Result<Var> {
        let shape = cx.g.shape(z);
        if shape.len() != 2 || shape[1] != self.cfg.z_dim {
            return Err(Error::shape(format!(
                "expected [N,{}] noise, got {shape:?}",
                self.cfg.z_dim
            )));
        }
        Ok(self.m1.forward(cx, z))
    }

    /// Class-specific style from noise and a 1-based label per row.
    pub fn map_latent_m2(&self, cx: &Cx, z: Var, labels: &[usize]) -> Result<Var> {
        let g = cx.g;
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.cfg.z_dim {
            return Err(Error::shape(format!(
                "expected [N,{}] noise, got {shape:?}",
                self.cfg.z_dim
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::shape("one label per noise row"));
        }
        let e = self.embed.lookup(cx, labels)?;
        let ze = g.concat(&[z, e], 1);
        Ok(self.m2.forward(cx, ze))
    }

    /// Class-specific style from noise and an explicit embedding row
    /// (used for class interpolation).
    pub fn map_latent_m2_embedding(&self, cx: &Cx, z: Var, embedding: Var) -> Result<Var> {
        let g = cx.g;
        let zs = g.shape(z);
        let es = g.shape(embedding);
        if es.len() != 2 || es[1] != self.cfg.embed_dim {
            return Err(Error::shape(format!(
                "expected [N,{}] embedding, got {es:?}",
                self.cfg.embed_dim
            )));
        }
        let e = if es[0] == zs[0] {
            embedding
        } else {
            g.broadcast_to(embedding, &[zs[0], es[1]])
        };
        let ze = g.concat(&[z, e], 1);
        Ok(self.m2.forward(cx, ze))
    }
}

impl Module for CondModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.m1.visit_params(&p("m1"), f);
        self.m2.visit_params(&p("m2"), f);
        self.embed.visit_params(&p("embed"), f);
        self.field.visit_params(&p("field"), f);
        self.gen.visit_params(&p("gen"), f);
        self.disc.visit_params(&p("disc"), f);
        self.path_proj.visit_params(&p("path_proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.m1.visit_params_mut(&p("m1"), f);
        self.m2.visit_params_mut(&p("m2"), f);
        self.embed.visit_params_mut(&p("embed"), f);
        self.field.visit_params_mut(&p("field"), f);
        self.gen.visit_params_mut(&p("gen"), f);
        self.disc.visit_params_mut(&p("disc"), f);
        self.path_proj.visit_params_mut(&p("path_proj"), f);
    }
}

/// Standard-normal noise batch `[N, Z]` as a graph constant.
pub fn sample_noise(cx: &Cx, rng: &mut impl Rng, n: usize, z_dim: usize) -> Var {
    cx.g
        .constant(crate::nn::normal_tensor(rng, &[n, z_dim], 1.0))
}

/// Zero tensor helper for tests and padding.
pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use crate::rng::stage_rng;
    use crate::tape::Graph;

    fn small_cfg() -> ArchConfig {
        ArchConfig {
            z_dim: 8,
            style_dim: 12,
            embed_dim: 6,
            n_classes: 3,
            image_res: 16,
            feat_res: 4,
            feat_channels: 10,
            gen_channels: vec![8, 6],
            disc_stem_channels: 6,
            disc_channels: vec![8, 10],
            field_hidden: 8,
            field_layers: 2,
            posenc_freqs: 2,
            map_layers: 3,
            map_hidden: 16,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn config_shape_ladder_validates() {
        assert!(small_cfg().validate().is_ok());
        let mut bad = small_cfg();
        bad.image_res = 32;
        assert!(bad.validate().is_err());
        let mut bad2 = small_cfg();
        bad2.disc_channels = vec![8, 9];
        assert!(bad2.validate().is_err());
    }

    #[test]
    fn mapping_is_deterministic_and_zero_final_layer_gives_bias() {
        let mut rng = stage_rng(1, "map");
        let mut map = MappingNet::new(&mut rng, 8, 16, 12, 3);
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let z = g.constant(normal_tensor(&mut rng, &[2, 8], 1.0));
        let a = map.forward(&cx, z);
        let b = map.forward(&cx, z);
        assert_eq!(*g.value(a), *g.value(b));

        // Zero the final layer: output must equal its bias for any z.
        let last = map.layers.last_mut().unwrap();
        last.w.value.fill(0.0);
        last.b.value.fill(0.25);
        let g2 = Graph::new();
        let cx2 = Cx::new(&g2, false);
        let z1 = g2.constant(normal_tensor(&mut rng, &[1, 8], 1.0));
        let z2 = g2.constant(normal_tensor(&mut rng, &[1, 8], 1.0));
        let o1 = map.forward(&cx2, z1);
        let o2 = map.forward(&cx2, z2);
        assert_eq!(*g2.value(o1), *g2.value(o2));
        assert!(g2.value(o1).iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn mapping_jacobian_column_matches_finite_difference() {
        let mut rng = stage_rng(2, "map");
        let map = MappingNet::new(&mut rng, 4, 8, 5, 3);
        let z0 = normal_tensor(&mut rng, &[1, 4], 1.0);

        let eval = |z: &Tensor| -> Tensor {
            let g = Graph::new();
            let cx = Cx::new(&g, false);
            let zv = g.constant(z.clone());
            (*g.value(map.forward(&cx, zv))).clone()
        };

        // Analytic Jacobian column for e1 via backprop of each output.
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let zv = g.param(z0.clone());
        let out = map.forward(&cx, zv);
        let eps = 1e-6;
        let mut z_hi = z0.clone();
        z_hi[[0, 0]] += eps;
        let mut z_lo = z0.clone();
        z_lo[[0, 0]] -= eps;
        let numeric = (&eval(&z_hi) - &eval(&z_lo)) / (2.0 * eps);
        for j in 0..5 {
            let oj = g.slice_axis(out, 1, j, 1);
            let ojs = g.sum_all(oj);
            let grad = g.grad_values(ojs, &[zv]).pop().unwrap();
            let analytic = grad[[0, 0]];
            let num = numeric[[0, j]];
            assert!(
                (analytic - num).abs() / analytic.abs().max(num.abs()).max(1e-8) < 1e-4,
                "column mismatch at {j}: {analytic} vs {num}"
            );
        }
    }

    #[test]
    fn embedding_labels_are_one_based_and_checked() {
        let mut rng = stage_rng(3, "embed");
        let table = EmbeddingTable::new(&mut rng, 3, 6);
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        assert!(table.lookup(&cx, &[1, 3]).is_ok());
        assert!(matches!(
            table.lookup(&cx, &[0]),
            Err(Error::Label { label: 0, .. })
        ));
        assert!(matches!(
            table.lookup(&cx, &[4]),
            Err(Error::Label { label: 4, .. })
        ));
    }

    #[test]
    fn m2_distinguishes_classes_unless_embeddings_collide() {
        let mut rng = stage_rng(4, "cond");
        let cfg = small_cfg();
        let mut model = CondModel::new(&mut rng, &cfg).unwrap();
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let z = g.constant(normal_tensor(&mut rng, &[1, cfg.z_dim], 1.0));
        let w_a = model.map_latent_m2(&cx, z, &[1]).unwrap();
        let w_a2 = model.map_latent_m2(&cx, z, &[1]).unwrap();
        let w_b = model.map_latent_m2(&cx, z, &[2]).unwrap();
        assert_eq!(*g.value(w_a), *g.value(w_a2));
        assert_ne!(*g.value(w_a), *g.value(w_b));

        // Force all embeddings equal: every class collapses to the same w2.
        let first = model.embed.table.value.index_axis(ndarray::Axis(0), 0).to_owned();
        for mut row in model.embed.table.value.axis_iter_mut(ndarray::Axis(0)) {
            row.assign(&first);
        }
        let g2 = Graph::new();
        let cx2 = Cx::new(&g2, false);
        let z2 = g2.constant(normal_tensor(&mut rng, &[1, cfg.z_dim], 1.0));
        let u = model.map_latent_m2(&cx2, z2, &[1]).unwrap();
        let v = model.map_latent_m2(&cx2, z2, &[3]).unwrap();
        assert_eq!(*g2.value(u), *g2.value(v));
    }

    #[test]
    fn generator_shape_ladder_and_purity() {
        let mut rng = stage_rng(5, "gen");
        let cfg = small_cfg();
        let gen = Generator::new(&mut rng, &cfg);
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let f = g.constant(normal_tensor(&mut rng, &[2, cfg.feat_channels, 4, 4], 1.0));
        let w1 = g.constant(normal_tensor(&mut rng, &[2, cfg.style_dim], 1.0));
        let w2 = g.constant(normal_tensor(&mut rng, &[2, cfg.style_dim], 1.0));
        let (img, blocks) = gen.synthesize(&cx, f, w1, w2).unwrap();
        assert_eq!(g.shape(img), vec![2, 3, 16, 16]);
        assert_eq!(g.shape(blocks[0]), vec![2, 8, 8, 8]);
        assert_eq!(g.shape(blocks[1]), vec![2, 6, 16, 16]);
        assert!(g.value(img).iter().all(|v| (-1.0..=1.0).contains(v)));

        // Same inputs -> identical outputs; different w2 -> different image,
        // same input feature map (purity).
        let (img_repeat, _) = gen.synthesize(&cx, f, w1, w2).unwrap();
        assert_eq!(*g.value(img), *g.value(img_repeat));
        let w2b = g.constant(normal_tensor(&mut rng, &[2, cfg.style_dim], 1.0));
        let f_before = (*g.value(f)).clone();
        let (img_b, _) = gen.synthesize(&cx, f, w1, w2b).unwrap();
        assert_ne!(*g.value(img), *g.value(img_b));
        assert_eq!(*g.value(f), f_before);
    }

    #[test]
    fn single_style_equals_two_style_with_same_code() {
        let mut rng = stage_rng(6, "gen");
        let cfg = small_cfg();
        let gen = Generator::new(&mut rng, &cfg);
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let f = g.constant(normal_tensor(&mut rng, &[1, cfg.feat_channels, 4, 4], 1.0));
        let w = g.constant(normal_tensor(&mut rng, &[1, cfg.style_dim], 1.0));
        let styles: Vec<Var> = vec![w; gen.n_blocks()];
        let (a, _) = gen.forward_per_block(&cx, f, &styles).unwrap();
        let (b, _) = gen.synthesize(&cx, f, w, w).unwrap();
        assert_eq!(*g.value(a), *g.value(b));
    }

    #[test]
    fn discriminator_shapes_and_encoder_equivalence() {
        let mut rng = stage_rng(7, "disc");
        let cfg = small_cfg();
        let disc = Discriminator::new(&mut rng, &cfg, cfg.n_classes);
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let img = g.constant(normal_tensor(&mut rng, &[2, 3, 16, 16], 0.5));
        let (logits, trunk) = disc.discriminate(&cx, img).unwrap();
        assert_eq!(g.shape(logits), vec![2, 3]);
        assert_eq!(g.shape(trunk), vec![2, cfg.feat_channels, 4, 4]);

        let enc = disc.to_encoder();
        let e = enc.encode(&cx, img).unwrap();
        assert_eq!(*g.value(e), *g.value(trunk));

        // Unconditional head gives one logit.
        let disc1 = Discriminator::new(&mut rng, &cfg, 1);
        let (l1, _) = disc1.discriminate(&cx, img).unwrap();
        assert_eq!(g.shape(l1), vec![2, 1]);

        // Wrong resolution is a shape error.
        let bad = g.constant(normal_tensor(&mut rng, &[1, 3, 8, 8], 0.5));
        assert!(disc.discriminate(&cx, bad).is_err());
    }

    #[test]
    fn discriminator_logit_gradient_wrt_input_is_finite() {
        let mut rng = stage_rng(8, "disc");
        let cfg = small_cfg();
        let disc = Discriminator::new(&mut rng, &cfg, cfg.n_classes);
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let img_val = normal_tensor(&mut rng, &[1, 3, 16, 16], 0.5);
        let img = g.param(img_val.clone());
        let (logits, _) = disc.discriminate(&cx, img).unwrap();
        let l0 = g.sum_all(g.slice_axis(logits, 1, 1, 1));
        let grad = g.grad_values(l0, &[img]).pop().unwrap();
        assert!(grad.iter().all(|v| v.is_finite()));
        let norm: f64 = grad.iter().map(|v| v * v).sum();
        assert!(norm > 0.0);

        // Spot-check one pixel against finite differences.
        let f = |im: &Tensor| {
            let g2 = Graph::new();
            let cx2 = Cx::new(&g2, false);
            let iv = g2.constant(im.clone());
            let (lg, _) = disc.discriminate(&cx2, iv).unwrap();
            g2.scalar_value(g2.sum_all(g2.slice_axis(lg, 1, 1, 1)))
        };
        let eps = 1e-5;
        let mut hi = img_val.clone();
        hi[[0, 1, 7, 7]] += eps;
        let mut lo = img_val.clone();
        lo[[0, 1, 7, 7]] -= eps;
        let numeric = (f(&hi) - f(&lo)) / (2.0 * eps);
        let analytic = grad[[0, 1, 7, 7]];
        assert!(
            (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-9) < 1e-4
        );
    }
}
