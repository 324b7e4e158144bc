//! Scalar objectives: the logistic adversarial loss with per-class response
//! selection and R1 gradient penalty, and the three adaptor losses
//! (alignment, hierarchical, relative) with their weighted sum.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Discriminator;
use crate::nn::Cx;
use crate::rng::Rng as _;
use crate::tape::{Graph, Tensor, Var};

/// Loss weights. The adversarial stages use `lambda_r1` and `beta_path`;
/// adaptor training sums its three terms with unit weights by default.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_r1: f64,
    pub beta_path: f64,
    pub align: f64,
    pub hierarchical: f64,
    pub relative: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_r1: 0.5,
            beta_path: 0.2,
            align: 1.0,
            hierarchical: 1.0,
            relative: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_r1,
            self.beta_path,
            self.align,
            self.hierarchical,
            self.relative,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `v(u) = -log(1 + exp(-u))`, elementwise, via the stable softplus form.
pub fn logistic_v(g: &Graph, u: Var) -> Var {
    g.neg(g.softplus(g.neg(u)))
}

/// Scalar version for tests and reporting.
pub fn logistic_v_scalar(u: f64) -> f64 {
    -((-u).max(0.0) + (-(-u).abs()).exp().ln_1p())
}

/// Select the logit of each sample's own class: `logits` is `[N, L]`,
/// labels are 1-based; returns `[N, 1]`. Built from a constant one-hot mask
/// so gradients at every other channel are exactly zero.
pub fn per_class_logit(g: &Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits);
    let (n, l) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    let mut mask = Tensor::zeros(ndarray::IxDyn(&[n, l]));
    for (i, &label) in labels.iter().enumerate() {
        if label == 0 || label > l {
            return Err(Error::Label {
                label,
                n_classes: l,
            });
        }
        mask[[i, label - 1]] = 1.0;
    }
    let m = g.constant(mask);
    Ok(g.sum_to(g.mul(logits, m), &[n, 1]))
}

/// Mean R1 penalty: per-sample squared gradient norm of the selected real
/// logit with respect to the real image batch. `real` must be a
/// differentiable leaf of the graph. The result stays differentiable with
/// respect to discriminator parameters (double backward).
pub fn r1_penalty(g: &Graph, selected_real_logits: Var, real: Var) -> Result<Var> {
    let n = g.shape(real)[0] as f64;
    let total = g.sum_all(selected_real_logits);
    let grad = g.grads(total, &[real])[0].ok_or_else(|| {
        Error::Numeric("real batch does not influence the discriminator output".into())
    })?;
    Ok(g.scale(g.sum_all(g.square(grad)), 1.0 / n))
}

/// Discriminator-side scalar to minimize (before the R1 term):
/// `softplus(D(fake)) + softplus(-D(real))`, batch means.
pub fn adv_d_loss(g: &Graph, sel_real: Var, sel_fake: Var) -> Var {
    let fake_term = g.mean_all(g.softplus(sel_fake));
    let real_term = g.mean_all(g.softplus(g.neg(sel_real)));
    g.add(fake_term, real_term)
}

/// Generator-side scalar to minimize: `softplus(-D(fake))`, batch mean.
pub fn adv_g_loss(g: &Graph, sel_fake: Var) -> Var {
    g.mean_all(g.softplus(g.neg(sel_fake)))
}

/// Every term of the per-class adversarial objective, evaluated in one graph.
pub struct GanLossTerms {
    /// mean v(D(fake)_l) — the generator's raw objective.
    pub gen_adv: Var,
    /// mean v(-D(fake)_l).
    pub disc_fake: Var,
    /// mean v(D(real)_l).
    pub disc_real: Var,
    /// mean per-sample squared gradient norm (unweighted).
    pub r1: Var,
    /// Discriminator scalar to minimize (includes lambda * r1).
    pub loss_d: Var,
    /// Generator scalar to minimize.
    pub loss_g: Var,
    /// Selected per-sample logits `[N, 1]` on the real and fake batches.
    pub sel_real: Var,
    pub sel_fake: Var,
}

/// Per-class adversarial losses for one batch. Only the label's channel of
/// the discriminator output enters any term; the R1 penalty differentiates
/// the selected real logit with respect to `real`.
pub fn gan_losses_per_class(
    cx_disc: &Cx,
    disc: &Discriminator,
    real: Var,
    real_labels: &[usize],
    fake: Var,
    fake_labels: &[usize],
    lambda_r1: f64,
) -> Result<GanLossTerms> {
    let g = cx_disc.g;
    let (logits_real, _) = disc.discriminate(cx_disc, real)?;
    let (logits_fake, _) = disc.discriminate(cx_disc, fake)?;
    let sel_real = per_class_logit(g, logits_real, real_labels)?;
    let sel_fake = per_class_logit(g, logits_fake, fake_labels)?;

    let gen_adv = g.mean_all(logistic_v(g, sel_fake));
    let disc_fake = g.mean_all(logistic_v(g, g.neg(sel_fake)));
    let disc_real = g.mean_all(logistic_v(g, sel_real));
    let r1 = r1_penalty(g, sel_real, real)?;

    let loss_d = g.add(adv_d_loss(g, sel_real, sel_fake), g.scale(r1, lambda_r1));
    let loss_g = adv_g_loss(g, sel_fake);

    Ok(GanLossTerms {
        gen_adv,
        disc_fake,
        disc_real,
        r1,
        loss_d,
        loss_g,
        sel_real,
        sel_fake,
    })
}

fn check_same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    let sa = g.shape(a);
    let sb = g.shape(b);
    if sa != sb {
        return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean absolute difference between the rendered and adapted feature maps.
pub fn loss_alignment(g: &Graph, f: Var, f_hat: Var) -> Result<Var> {
    check_same_shape(g, f, f_hat, "alignment inputs")?;
    Ok(g.mean_all(g.abs(g.sub(f, f_hat))))
}

/// Sum over levels of the mean absolute difference between corresponding
/// generator outputs. Callers pass every block output plus the final image.
pub fn loss_hierarchical(g: &Graph, levels_f: &[Var], levels_f_hat: &[Var]) -> Result<Var> {
    if levels_f.is_empty() || levels_f.len() != levels_f_hat.len() {
        return Err(Error::config(format!(
            "hierarchical constraint needs matching non-empty level lists ({} vs {})",
            levels_f.len(),
            levels_f_hat.len()
        )));
    }
    let mut total = None;
    for (a, b) in levels_f.iter().zip(levels_f_hat) {
        check_same_shape(g, *a, *b, "hierarchical level")?;
        let term = g.mean_all(g.abs(g.sub(*a, *b)));
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("non-empty levels"))
}

/// The 8-connected neighborhood in row-major order.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Relative regularization: for seeded interior anchors, the difference
/// between a feature vector and each of its 8 neighbors must match between
/// `f` and `f_hat`. Shared offsets cancel, so a constant shift of `f_hat`
/// costs nothing; local structure errors do.
pub fn loss_relative(
    g: &Graph,
    f: Var,
    f_hat: Var,
    n_anchors: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    check_same_shape(g, f, f_hat, "relative inputs")?;
    let shape = g.shape(f);
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "relative loss expects [N,C,H,W], got {shape:?}"
        )));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < 3 || w < 3 {
        return Err(Error::config(format!(
            "feature grid {h}x{w} has no interior anchors (need >= 3x3)"
        )));
    }
    let interior: Vec<(usize, usize)> = (1..h - 1)
        .flat_map(|y| (1..w - 1).map(move |x| (y, x)))
        .collect();
    let k = n_anchors.min(interior.len()).max(1);
    let anchors: Vec<(usize, usize)> = if k == interior.len() {
        interior
    } else {
        // Partial Fisher-Yates: uniform without replacement.
        let mut pool = interior;
        for i in 0..k {
            let j = i + (rng.random::<u64>() as usize) % (pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    };

    let mut anchor_rows = Vec::with_capacity(n * k * 8);
    let mut neighbor_rows = Vec::with_capacity(n * k * 8);
    for b in 0..n {
        for &(y, x) in &anchors {
            for (dy, dx) in NEIGHBOR_OFFSETS {
                let ny = (y as isize + dy) as usize;
                let nx = (x as isize + dx) as usize;
                anchor_rows.push(b * h * w + y * w + x);
                neighbor_rows.push(b * h * w + ny * w + nx);
            }
        }
    }

    let to_rows = |v: Var| {
        let p = g.permute(v, &[0, 2, 3, 1]);
        g.reshape(p, &[n * h * w, c])
    };
    let f_rows = to_rows(f);
    let fh_rows = to_rows(f_hat);
    let anchor_idx = Arc::new(anchor_rows);
    let neighbor_idx = Arc::new(neighbor_rows);

    let d_f = g.sub(
        g.gather_rows(f_rows, anchor_idx.clone()),
        g.gather_rows(f_rows, neighbor_idx.clone()),
    );
    let d_fh = g.sub(
        g.gather_rows(fh_rows, anchor_idx),
        g.gather_rows(fh_rows, neighbor_idx),
    );
    Ok(g.mean_all(g.abs(g.sub(d_f, d_fh))))
}

/// Components of the adaptor objective.
pub struct AdaptorLoss {
    pub total: Var,
    pub alignment: Var,
    pub hierarchical: Var,
    pub relative: Var,
}

/// Weighted sum of the three adaptor terms.
#[allow(clippy::too_many_arguments)]
pub fn adaptor_objective(
    g: &Graph,
    f: Var,
    f_hat: Var,
    levels_f: &[Var],
    levels_f_hat: &[Var],
    weights: &LossWeights,
    n_anchors: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptorLoss> {
    weights.validate()?;
    let alignment = loss_alignment(g, f, f_hat)?;
    let hierarchical = loss_hierarchical(g, levels_f, levels_f_hat)?;
    let relative = loss_relative(g, f, f_hat, n_anchors, rng)?;
    let total = g.add(
        g.add(
            g.scale(alignment, weights.align),
            g.scale(hierarchical, weights.hierarchical),
        ),
        g.scale(relative, weights.relative),
    );
    Ok(AdaptorLoss {
        total,
        alignment,
        hierarchical,
        relative,
    })
}
