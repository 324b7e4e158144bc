//! Rough step timings used to size test configurations.

use std::time::Instant;

use viewshift::adaptor::{assemble_i2i, train_adaptor, AdaptorConfig, AdaptorTrainConfig};
use viewshift::gan::{pretrain_unconditional, GanTrainConfig};
use viewshift::models::{ArchConfig, UncondModel};
use viewshift::rng::stage_rng;
use viewshift::synth::{default_scene_specs, synth_labeled_images, CameraPrior};
use viewshift::transplant::{transplant_conditional, uncond_to_checkpoint};

fn mid_arch() -> ArchConfig {
    ArchConfig {
        z_dim: 32,
        style_dim: 48,
        embed_dim: 24,
        n_classes: 2,
        image_res: 32,
        feat_res: 8,
        feat_channels: 32,
        gen_channels: vec![24, 16],
        disc_stem_channels: 16,
        disc_channels: vec![24, 32],
        field_hidden: 32,
        field_layers: 2,
        posenc_freqs: 4,
        map_layers: 3,
        map_hidden: 48,
        n_samples_train: 16,
        n_samples_eval: 32,
        ..ArchConfig::default()
    }
}

fn main() {
    let prior = CameraPrior::default();

    for (name, arch) in [("mid-32px", mid_arch()), ("desk-64px", ArchConfig::default())] {
        let data = synth_labeled_images(
            &default_scene_specs(),
            8,
            arch.image_res,
            &prior,
            1,
        )
        .unwrap();
        let mut model = UncondModel::new(&mut stage_rng(1, "init"), &arch).unwrap();
        let cfg = GanTrainConfig {
            steps: 3,
            batch: 8,
            ..GanTrainConfig::default()
        };
        let t0 = Instant::now();
        pretrain_unconditional(&mut model, &data, &cfg, &prior, 1, None).unwrap();
        println!("{name}: gan step ~{:.2?}/step", t0.elapsed() / 3);

        let uncond = uncond_to_checkpoint(&model, 0, 1);
        let cond = transplant_conditional(&uncond, 2, 1).unwrap();
        let mut bundle = assemble_i2i(&cond, &AdaptorConfig::default(), 1).unwrap();
        let acfg = AdaptorTrainConfig {
            steps: 3,
            batch: 8,
            ..AdaptorTrainConfig::default()
        };
        let t0 = Instant::now();
        train_adaptor(&mut bundle, &acfg, &prior, 1, None).unwrap();
        println!("{name}: adaptor step ~{:.2?}/step", t0.elapsed() / 3);
    }
}
