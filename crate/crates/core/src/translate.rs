//! Inference through the assembled translation system: single images, videos
//! with a style held fixed across frames, and class-embedding interpolation.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::adaptor::I2IBundle;
use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, BnMode, Cx};
use crate::rng::stage_rng;
use crate::tape::{Graph, Var};
use crate::video::VideoSequence;

/// What a translation run was asked to do.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TranslationRequest {
    pub target_class: usize,
    /// Explicit style noise; when absent a seeded sample is drawn.
    pub z: Option<Vec<f64>>,
    pub style_seed: u64,
}

/// The latent codes a translation actually used (for style-constancy audits).
#[derive(Clone, Debug)]
pub struct StyleCodes {
    pub z: Array1<f64>,
    pub w1: Array1<f64>,
    pub w2: Array1<f64>,
}

fn resolve_noise(bundle: &I2IBundle, request: &TranslationRequest) -> Result<Array1<f64>> {
    match &request.z {
        Some(z) => {
            if z.len() != bundle.arch.z_dim {
                return Err(Error::shape(format!(
                    "style noise has dim {}, model expects {}",
                    z.len(),
                    bundle.arch.z_dim
                )));
            }
            Ok(Array1::from_vec(z.clone()))
        }
        None => {
            let mut rng = stage_rng(request.style_seed, "translate-style");
            let t = normal_tensor(&mut rng, &[bundle.arch.z_dim], 1.0);
            Ok(Array1::from_iter(t.iter().copied()))
        }
    }
}

fn style_vars(
    bundle: &I2IBundle,
    cx: &Cx,
    z: &Array1<f64>,
    label: usize,
) -> Result<(Var, Var)> {
    bundle.embed.check_label(label)?;
    let g = cx.g;
    let zv = g.constant(z.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let w1 = bundle.m1.forward(cx, zv);
    let e = bundle.embed.lookup(cx, &[label])?;
    let ze = g.concat(&[zv, e], 1);
    let w2 = bundle.m2.forward(cx, ze);
    Ok((w1, w2))
}

fn row_of(g: &Graph, v: Var) -> Array1<f64> {
    Array1::from_iter(g.value(v).iter().copied())
}

/// Core translation path; `feature_override` bypasses the encoder/adaptor
/// (used to verify the identity `A`-bypass and for diagnostics).
pub fn translate_image_with_override(
    bundle: &I2IBundle,
    image: &Array3<f64>,
    request: &TranslationRequest,
    feature_override: Option<&Array3<f64>>,
) -> Result<(Array3<f64>, StyleCodes)> {
    let z = resolve_noise(bundle, request)?;
    let g = Graph::new();
    let cx = Cx::new(&g, false);
    let (w1, w2) = style_vars(bundle, &cx, &z, request.target_class)?;

    let f_hat = match feature_override {
        Some(f) => {
            let (c, h, w) = f.dim();
            if c != bundle.arch.feat_channels || h != bundle.arch.feat_res {
                return Err(Error::shape(format!(
                    "feature override {c}x{h}x{w} does not match the model grid"
                )));
            }
            let arr = f
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[1, c, h, w]))
                .expect("feature shape");
            g.constant(arr)
        }
        None => {
            let img = image
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&[
                    1,
                    image.dim().0,
                    image.dim().1,
                    image.dim().2,
                ]))
                .expect("image shape");
            let iv = g.constant(img);
            let enc = bundle.enc.encode(&cx, iv)?;
            bundle.adaptor.forward(&cx, enc, BnMode::Eval)?
        }
    };
    let (out, _) = bundle.gen.synthesize(&cx, f_hat, w1, w2)?;
    let value = (*g.value(out)).clone();
    let res = bundle.arch.image_res;
    let out3 = value
        .into_shape_with_order(ndarray::IxDyn(&[3, res, res]))
        .expect("output shape")
        .into_dimensionality::<ndarray::Ix3>()
        .expect("3-d image");
    Ok((
        out3,
        StyleCodes {
            z,
            w1: row_of(&g, w1),
            w2: row_of(&g, w2),
        },
    ))
}

/// Translate one image into the target class.
pub fn translate_image(
    bundle: &I2IBundle,
    image: &Array3<f64>,
    request: &TranslationRequest,
) -> Result<(Array3<f64>, StyleCodes)> {
    translate_image_with_override(bundle, image, request, None)
}

/// Translate a video with one style sampled for the whole sequence, so
/// frame-to-frame changes come from the viewpoint alone.
pub fn translate_video(
    bundle: &I2IBundle,
    video: &VideoSequence,
    request: &TranslationRequest,
) -> Result<(VideoSequence, StyleCodes)> {
    if video.is_empty() {
        return Err(Error::data("cannot translate an empty video"));
    }
    let z = resolve_noise(bundle, request)?;
    let fixed = TranslationRequest {
        target_class: request.target_class,
        z: Some(z.to_vec()),
        style_seed: request.style_seed,
    };
    let mut frames = Vec::with_capacity(video.len());
    let mut codes = None;
    for frame in &video.frames {
        let (out, c) = translate_image(bundle, frame, &fixed)?;
        if codes.is_none() {
            codes = Some(c);
        }
        frames.push(out);
    }
    let out = VideoSequence::new(frames, video.poses.clone())?;
    Ok((out, codes.expect("non-empty video")))
}

/// Baseline that resamples the style for every frame (the behaviour of
/// per-image translators applied frame by frame). Exists for comparisons.
pub fn translate_video_resampled_styles(
    bundle: &I2IBundle,
    video: &VideoSequence,
    target_class: usize,
    seed: u64,
) -> Result<VideoSequence> {
    if video.is_empty() {
        return Err(Error::data("cannot translate an empty video"));
    }
    let mut frames = Vec::with_capacity(video.len());
    for (i, frame) in video.frames.iter().enumerate() {
        let request = TranslationRequest {
            target_class,
            z: None,
            style_seed: seed.wrapping_add(i as u64).wrapping_mul(2654435761),
        };
        let (out, _) = translate_image(bundle, frame, &request)?;
        frames.push(out);
    }
    VideoSequence::new(frames, video.poses.clone())
}

/// Translate with the class embedding interpolated between two classes.
/// At alpha 0 or 1 this reproduces the plain translations exactly.
pub fn interpolate_classes(
    bundle: &I2IBundle,
    image: &Array3<f64>,
    label_a: usize,
    label_b: usize,
    alpha: f64,
    request: &TranslationRequest,
) -> Result<Array3<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range {
            what: "class interpolation alpha".into(),
            value: alpha,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let z = resolve_noise(bundle, request)?;
    let g = Graph::new();
    let cx = Cx::new(&g, false);
    let zv = g.constant(z.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let w1 = bundle.m1.forward(&cx, zv);
    let blend = bundle.embed.blend(&cx, label_a, label_b, alpha)?;
    let ze = g.concat(&[zv, blend], 1);
    let w2 = bundle.m2.forward(&cx, ze);

    let img = image
        .clone()
        .into_shape_with_order(ndarray::IxDyn(&[1, image.dim().0, image.dim().1, image.dim().2]))
        .expect("image shape");
    let iv = g.constant(img);
    let enc = bundle.enc.encode(&cx, iv)?;
    let f_hat = bundle.adaptor.forward(&cx, enc, BnMode::Eval)?;
    let (out, _) = bundle.gen.synthesize(&cx, f_hat, w1, w2)?;
    let res = bundle.arch.image_res;
    Ok((*g.value(out))
        .clone()
        .into_shape_with_order(ndarray::IxDyn(&[3, res, res]))
        .expect("output shape")
        .into_dimensionality::<ndarray::Ix3>()
        .expect("3-d image"))
}

/// Translate every image of a labeled set into `target_class` with one fixed
/// style per image index (used for the Fréchet comparisons).
pub fn translate_set(
    bundle: &I2IBundle,
    images: &LabeledImages,
    target_class: usize,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let request = TranslationRequest {
            target_class,
            z: None,
            style_seed: seed.wrapping_add(i as u64),
        };
        let (img, _) = translate_image(bundle, images.image(i), &request)?;
        out.push(img);
    }
    Ok(out)
}
