//! Weight transplant between training stages.
//!
//! The multi-class model is initialized from the unconditional checkpoint:
//! the geometry mapping network, field, generator and render-consistency
//! projection are copied verbatim; the class mapping network reuses every
//! layer except the first (its input grows by the embedding width); the
//! discriminator keeps its trunk and gets a fresh per-class head; the
//! embedding table starts fresh. Every target tensor is accounted for as
//! either copied or fresh — nothing defaults silently.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{
    assign_tensors, collect_tensors, Checkpoint, CheckpointKind, TransplantPlan,
};
use crate::error::{Error, Result};
use crate::models::{CondModel, UncondModel};
use crate::nn::{normal_tensor, Conv2d, Linear, Module};
use crate::rng::SeedableRng;
use crate::tape::Tensor;

pub fn uncond_to_checkpoint(model: &UncondModel, step: u64, seed: u64) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    collect_tensors(&mut tensors, model, "");
    Checkpoint::new(
        CheckpointKind::Unconditional,
        model.cfg.clone(),
        step,
        seed,
        tensors,
    )
}

pub fn uncond_from_checkpoint(ckpt: &Checkpoint) -> Result<UncondModel> {
    if ckpt.manifest.kind != CheckpointKind::Unconditional {
        return Err(Error::Checkpoint(format!(
            "expected an unconditional checkpoint, found {:?}",
            ckpt.manifest.kind
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = UncondModel::new(&mut rng, &ckpt.manifest.arch)?;
    let mut consumed = BTreeSet::new();
    assign_tensors(&mut model, "", &ckpt.tensors, &mut consumed)?;
    check_no_leftovers(&ckpt.tensors, &consumed)?;
    Ok(model)
}

pub fn cond_to_checkpoint(model: &CondModel, step: u64, seed: u64) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    collect_tensors(&mut tensors, model, "");
    Checkpoint::new(
        CheckpointKind::Conditional,
        model.cfg.clone(),
        step,
        seed,
        tensors,
    )
}

pub fn cond_from_checkpoint(ckpt: &Checkpoint) -> Result<CondModel> {
    if ckpt.manifest.kind != CheckpointKind::Conditional {
        return Err(Error::Checkpoint(format!(
            "expected a conditional checkpoint, found {:?}",
            ckpt.manifest.kind
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = CondModel::new(&mut rng, &ckpt.manifest.arch)?;
    let mut consumed = BTreeSet::new();
    assign_tensors(&mut model, "", &ckpt.tensors, &mut consumed)?;
    check_no_leftovers(&ckpt.tensors, &consumed)?;
    Ok(model)
}

fn check_no_leftovers(map: &BTreeMap<String, Tensor>, consumed: &BTreeSet<String>) -> Result<()> {
    let extra: Vec<&String> = map.keys().filter(|k| !consumed.contains(*k)).collect();
    if !extra.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has tensors the model does not use: {extra:?}"
        )));
    }
    Ok(())
}

fn param_names(m: &dyn Module, prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    m.visit_params(prefix, &mut |n, _| names.push(n.to_string()));
    names
}

/// Build the multi-class model from an unconditional checkpoint.
///
/// Freshly initialized (normal(0, 0.02) weights, zero bias): the first layer
/// of the class mapping network, the discriminator's per-class head, and the
/// embedding table. Everything else is copied. The returned checkpoint's
/// manifest records the full plan.
pub fn transplant_conditional(
    uncond: &Checkpoint,
    n_classes: usize,
    seed: u64,
) -> Result<Checkpoint> {
    let source = uncond_from_checkpoint(uncond)?;
    let mut arch = source.cfg.clone();
    arch.n_classes = n_classes;
    arch.validate()?;

    let mut rng = crate::rng::stage_rng(seed, "transplant-fresh");
    let mut target = CondModel::new(&mut rng, &arch)?;

    let mut plan = TransplantPlan::default();
    let mut copy = |src: &dyn Module,
                    src_prefix: &str,
                    dst: &mut dyn Module,
                    dst_prefix: &str|
     -> Result<()> {
        let mut src_map = BTreeMap::new();
        collect_tensors(&mut src_map, src, src_prefix);
        let mut errors = Vec::new();
        dst.visit_params_mut(dst_prefix, &mut |name, p| {
            let src_name = format!("{src_prefix}{}", &name[dst_prefix.len()..]);
            match src_map.get(&src_name) {
                Some(t) if t.shape() == p.value.shape() => {
                    p.value = t.clone();
                    plan.copied.push((src_name, name.to_string()));
                }
                Some(t) => errors.push(format!(
                    "{src_name} -> {name}: shape {:?} vs {:?}",
                    t.shape(),
                    p.value.shape()
                )),
                None => errors.push(format!("{src_name} missing for {name}")),
            }
        });
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Transplant(errors.join("; ")))
        }
    };

    // M1 and the shared field/generator/projection copy verbatim.
    copy(&source.mapping, "mapping", &mut target.m1, "m1")?;
    copy(&source.field, "field", &mut target.field, "field")?;
    copy(&source.gen, "gen", &mut target.gen, "gen")?;
    copy(&source.path_proj, "path_proj", &mut target.path_proj, "path_proj")?;

    // M2 duplicates the mapping network except its first layer, whose input
    // dimension now includes the class embedding.
    {
        let n_layers = source.mapping.layers.len();
        if target.m2.layers.len() != n_layers {
            return Err(Error::Transplant(format!(
                "class mapping depth {} differs from source {}",
                target.m2.layers.len(),
                n_layers
            )));
        }
        for i in 1..n_layers {
            copy(
                &source.mapping.layers[i],
                &format!("mapping.fc{i}"),
                &mut target.m2.layers[i],
                &format!("m2.fc{i}"),
            )?;
        }
        let first = Linear::new_fresh(
            &mut rng,
            arch.z_dim + arch.embed_dim,
            source.mapping.layers[0].out_dim(),
        );
        target.m2.layers[0] = first;
        plan.fresh.extend(param_names(&target.m2.layers[0], "m2.fc0"));
    }

    // Discriminator trunk copies; the head is a fresh L-channel layer.
    copy(&source.disc.stem, "disc.stem", &mut target.disc.stem, "disc.stem")?;
    for i in 0..source.disc.blocks.len() {
        copy(
            &source.disc.blocks[i],
            &format!("disc.block{i}"),
            &mut target.disc.blocks[i],
            &format!("disc.block{i}"),
        )?;
    }
    let trunk_ch = *arch.disc_channels.last().expect("non-empty");
    target.disc.head = Conv2d::new_fresh(&mut rng, trunk_ch, n_classes, 1, 1, 0);
    plan.fresh.extend(param_names(&target.disc.head, "disc.head"));

    // Fresh embedding table.
    target.embed.table.value = normal_tensor(&mut rng, &[n_classes, arch.embed_dim], 0.02);
    plan.fresh.extend(param_names(&target.embed, "embed"));

    // Coverage audit: every target parameter is either copied or fresh.
    let all_targets: BTreeSet<String> = param_names(&target, "").into_iter().collect();
    let mut covered: BTreeSet<String> = plan.fresh.iter().cloned().collect();
    for (_, dst) in &plan.copied {
        covered.insert(dst.clone());
    }
    if covered != all_targets {
        let missing: Vec<_> = all_targets.difference(&covered).collect();
        let unknown: Vec<_> = covered.difference(&all_targets).collect();
        return Err(Error::Transplant(format!(
            "transplant coverage broken: uncovered {missing:?}, unknown {unknown:?}"
        )));
    }

    plan.copied.sort();
    plan.fresh.sort();
    let mut ckpt = cond_to_checkpoint(&target, 0, seed);
    ckpt.manifest.transplant = Some(plan);
    Ok(ckpt)
}
