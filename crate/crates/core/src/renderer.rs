//! Differentiable volume rendering of the style-conditioned feature field.
//!
//! Rays are marched with alpha-compositing quadrature: sample depths t_i,
//! delta_i = t_{i+1} - t_i, alpha_i = 1 - exp(-sigma_i * delta_i), and
//! weights p_i = alpha_i * prod_{j<i} (1 - alpha_j). Because 1 - alpha_j =
//! exp(-sigma_j * delta_j), the transmittance is computed as
//! exp(-cumsum(sigma * delta)) which keeps the whole pipeline smooth.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{generate_rays, CameraPose};
use crate::error::{Error, Result};
use crate::nn::{Cx, Linear, Module, Param, LRELU_SLOPE};
use crate::tape::{Graph, Var};

/// One field query result.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub feature: Array1<f64>,
    pub sigma: f64,
}

/// Rendered feature grid, stored `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Raw little-endian f32 dump plus a JSON shape sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for v in self.data.iter() {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        let (c, h, w) = self.data.dim();
        let sidecar = serde_json::json!({
            "shape": [c, h, w],
            "layout": "channel,row,col",
            "dtype": "f32le",
        });
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let shape: Vec<usize> = serde_json::from_value(sidecar["shape"].clone())?;
        let bytes = std::fs::read(path)?;
        let expected = shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::shape(format!(
                "feature map blob has {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Self { data: arr })
    }
}

/// Quadrature settings for one render.
#[derive(Clone, Copy, Debug)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub stratified: bool,
    pub t_near: f64,
    pub t_far: f64,
    pub resolution: (usize, usize),
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::config(format!(
                "n_samples must be >= 2, got {}",
                self.n_samples
            )));
        }
        if !(self.t_near >= 0.0 && self.t_near < self.t_far) {
            return Err(Error::config(format!(
                "invalid depth range [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::config("render resolution must be at least 1x1"));
        }
        Ok(())
    }
}

/// Anything that maps (position, direction, style) to (feature, density).
pub trait FeatureField {
    fn channels(&self) -> usize;
    /// `positions`/`dirs` are `[M, 3]` constants, `styles` is an `[M, D]`
    /// var. Returns features `[M, C]` and densities `[M, 1]` (already
    /// non-negative).
    fn eval(&self, cx: &Cx, positions: &Array2<f64>, dirs: &Array2<f64>, styles: Var)
        -> (Var, Var);
}

/// Sinusoidal positional encoding: `x` followed by sin/cos at doubling
/// frequencies. `[M, 3]` -> `[M, 3 + 6*freqs]`.
pub fn positional_encoding(x: &Array2<f64>, freqs: usize) -> Array2<f64> {
    let m = x.dim().0;
    let d = x.dim().1;
    let mut out = Array2::zeros((m, d * (1 + 2 * freqs)));
    for r in 0..m {
        for c in 0..d {
            let v = x[[r, c]];
            out[[r, c]] = v;
            for f in 0..freqs {
                let s = v * (1u64 << f) as f64;
                out[[r, d + 2 * (c * freqs + f)]] = s.sin();
                out[[r, d + 2 * (c * freqs + f) + 1]] = s.cos();
            }
        }
    }
    out
}

/// The learned neural field: a style-modulated MLP over encoded positions.
/// View direction feeds only the feature head, never the density, so
/// geometry stays view-consistent.
#[derive(Clone, Debug)]
pub struct FieldNet {
    pub posenc_freqs: usize,
    pub hidden: usize,
    pub channels: usize,
    pub style_dim: usize,
    pub trunk: Vec<Linear>,
    pub films: Vec<Linear>,
    pub sigma_head: Linear,
    pub feat_hidden: Linear,
    pub feat_out: Linear,
}

impl FieldNet {
    pub fn new(
        rng: &mut impl Rng,
        posenc_freqs: usize,
        hidden: usize,
        layers: usize,
        channels: usize,
        style_dim: usize,
    ) -> Self {
        let in_dim = 3 * (1 + 2 * posenc_freqs);
        let mut trunk = Vec::new();
        let mut films = Vec::new();
        for i in 0..layers {
            let d_in = if i == 0 { in_dim } else { hidden };
            trunk.push(Linear::new(rng, d_in, hidden));
            let mut film = Linear::new(rng, style_dim, 2 * hidden);
            film.w.value.mapv_inplace(|v| v * 0.05);
            films.push(film);
        }
        Self {
            posenc_freqs,
            hidden,
            channels,
            style_dim,
            trunk,
            films,
            sigma_head: Linear::new(rng, hidden, 1),
            feat_hidden: Linear::new(rng, hidden + 3, hidden),
            feat_out: Linear::new(rng, hidden, channels),
        }
    }

    fn film(g: &Graph, h: Var, sb: Var, width: usize) -> Var {
        let scale = g.slice_axis(sb, 1, 0, width);
        let shift = g.slice_axis(sb, 1, width, width);
        let gain = g.shift(scale, 1.0);
        g.add(g.mul(h, gain), shift)
    }

    /// Single-point evaluation (the public field query).
    pub fn eval_point(
        &self,
        x: &Array1<f64>,
        d: &Array1<f64>,
        w1: &Array1<f64>,
    ) -> Result<FieldSample> {
        if x.len() != 3 || d.len() != 3 {
            return Err(Error::shape("position and direction must be 3-vectors"));
        }
        if w1.len() != self.style_dim {
            return Err(Error::shape(format!(
                "style dim {} != configured {}",
                w1.len(),
                self.style_dim
            )));
        }
        if !(x.iter().chain(d.iter()).chain(w1.iter())).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite field input".into()));
        }
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let pos = x.clone().insert_axis(ndarray::Axis(0));
        let dir = d.clone().insert_axis(ndarray::Axis(0));
        let styles = g.constant(w1.clone().insert_axis(ndarray::Axis(0)).into_dyn());
        let (feat, sigma) = self.eval(&cx, &pos, &dir, styles);
        let feat = g.value(feat);
        let sigma = g.value(sigma);
        Ok(FieldSample {
            feature: Array1::from_iter(feat.iter().copied()),
            sigma: sigma[[0, 0]],
        })
    }
}

impl FeatureField for FieldNet {
    fn channels(&self) -> usize {
        self.channels
    }

    fn eval(
        &self,
        cx: &Cx,
        positions: &Array2<f64>,
        dirs: &Array2<f64>,
        styles: Var,
    ) -> (Var, Var) {
        let g = cx.g;
        let enc = positional_encoding(positions, self.posenc_freqs);
        let mut h = g.constant(enc.into_dyn());
        for (lin, film) in self.trunk.iter().zip(&self.films) {
            h = lin.forward(cx, h);
            let sb = film.forward(cx, styles);
            h = Self::film(g, h, sb, self.hidden);
            h = g.leaky_relu(h, LRELU_SLOPE);
        }
        let sigma = g.softplus(self.sigma_head.forward(cx, h));
        let d = g.constant(dirs.clone().into_dyn());
        let hd = g.concat(&[h, d], 1);
        let fh = g.leaky_relu(self.feat_hidden.forward(cx, hd), LRELU_SLOPE);
        let feat = self.feat_out.forward(cx, fh);
        (feat, sigma)
    }
}

impl Module for FieldNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.trunk.iter().enumerate() {
            l.visit_params(&format!("{prefix}.trunk{i}"), f);
        }
        for (i, l) in self.films.iter().enumerate() {
            l.visit_params(&format!("{prefix}.film{i}"), f);
        }
        self.sigma_head.visit_params(&format!("{prefix}.sigma"), f);
        self.feat_hidden.visit_params(&format!("{prefix}.feat_hidden"), f);
        self.feat_out.visit_params(&format!("{prefix}.feat_out"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.trunk.iter_mut().enumerate() {
            l.visit_params_mut(&format!("{prefix}.trunk{i}"), f);
        }
        for (i, l) in self.films.iter_mut().enumerate() {
            l.visit_params_mut(&format!("{prefix}.film{i}"), f);
        }
        self.sigma_head.visit_params_mut(&format!("{prefix}.sigma"), f);
        self.feat_hidden
            .visit_params_mut(&format!("{prefix}.feat_hidden"), f);
        self.feat_out.visit_params_mut(&format!("{prefix}.feat_out"), f);
    }
}

/// Depth samples for a batch of rays: midpoints of equal bins, jittered
/// within the bin when `stratified`. Returns (ts `[R,S]`, deltas `[R,S]`).
fn depth_samples(
    n_rays: usize,
    cfg: &RenderConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, Array2<f64>) {
    let s = cfg.n_samples;
    let span = cfg.t_far - cfg.t_near;
    let bin = span / s as f64;
    let mut ts = Array2::zeros((n_rays, s));
    match (cfg.stratified, rng) {
        (true, Some(rng)) => {
            for r in 0..n_rays {
                for i in 0..s {
                    let u: f64 = rng.random();
                    ts[[r, i]] = cfg.t_near + (i as f64 + u) * bin;
                }
            }
        }
        _ => {
            for r in 0..n_rays {
                for i in 0..s {
                    ts[[r, i]] = cfg.t_near + (i as f64 + 0.5) * bin;
                }
            }
        }
    }
    let mut deltas = Array2::zeros((n_rays, s));
    for r in 0..n_rays {
        for i in 0..s - 1 {
            deltas[[r, i]] = ts[[r, i + 1]] - ts[[r, i]];
        }
        deltas[[r, s - 1]] = cfg.t_far - ts[[r, s - 1]];
    }
    (ts, deltas)
}

/// Batched differentiable render. `w1` is `[B, D]`; the result is
/// `[B, C, H, W]` together with the compositing weights `[B*H*W, S]`.
pub fn render_batch(
    cx: &Cx,
    field: &dyn FeatureField,
    poses: &[CameraPose],
    w1: Var,
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let g = cx.g;
    let b = poses.len();
    let (h, w) = cfg.resolution;
    let rays_per_pose = h * w;
    let n_rays = b * rays_per_pose;
    let s = cfg.n_samples;

    let mut origins = Vec::with_capacity(n_rays);
    let mut directions = Vec::with_capacity(n_rays);
    for pose in poses {
        let rays = generate_rays(pose, (h, w), cfg.t_near, cfg.t_far)?;
        for ray in rays {
            origins.push(ray.origin);
            directions.push(ray.direction);
        }
    }

    let (ts, deltas) = depth_samples(n_rays, cfg, rng.as_deref_mut());

    let m = n_rays * s;
    let mut positions = Array2::zeros((m, 3));
    let mut dirs = Array2::zeros((m, 3));
    let mut style_index = Vec::with_capacity(m);
    for r in 0..n_rays {
        let batch = r / rays_per_pose;
        for i in 0..s {
            let t = ts[[r, i]];
            let p = origins[r] + directions[r] * t;
            let row = r * s + i;
            positions[[row, 0]] = p.x;
            positions[[row, 1]] = p.y;
            positions[[row, 2]] = p.z;
            dirs[[row, 0]] = directions[r].x;
            dirs[[row, 1]] = directions[r].y;
            dirs[[row, 2]] = directions[r].z;
            style_index.push(batch);
        }
    }

    let styles = g.gather_rows(w1, Arc::new(style_index));
    let (feat, sigma) = field.eval(cx, &positions, &dirs, styles);

    {
        let sv = g.value(sigma);
        let fv = g.value(feat);
        for (i, v) in sv.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite density at ray {}",
                    i / s
                )));
            }
        }
        if let Some((i, _)) = fv.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let c = field.channels();
            return Err(Error::Numeric(format!(
                "non-finite feature at ray {}",
                i / (s * c)
            )));
        }
    }

    let c = field.channels();
    let sigma_rs = g.reshape(sigma, &[n_rays, s]);
    let delta = g.constant(deltas.into_dyn());
    let sig_delta = g.mul(sigma_rs, delta);
    let alpha = {
        let e = g.exp(g.neg(sig_delta));
        g.shift(g.neg(e), 1.0)
    };
    // Transmittance before sample i: exp(-sum_{j<i} sigma_j delta_j).
    let incl = g.cumsum_axis(sig_delta, 1);
    let excl = g.sub(incl, sig_delta);
    let trans = g.exp(g.neg(excl));
    let weights = g.mul(alpha, trans);

    let feat_rsc = g.reshape(feat, &[n_rays, s, c]);
    let w_rs1 = g.reshape(weights, &[n_rays, s, 1]);
    let contrib = g.mul(feat_rsc, w_rs1);
    let summed = g.sum_to(contrib, &[n_rays, 1, c]);
    let fmap = g.reshape(summed, &[b, h, w, c]);
    let fmap = g.permute(fmap, &[0, 3, 1, 2]);
    Ok((fmap, weights))
}

/// Render a single pose outside any training graph.
pub fn render_feature_map(
    field: &dyn FeatureField,
    pose: &CameraPose,
    w1: &Array1<f64>,
    cfg: &RenderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<FeatureMap> {
    let g = Graph::new();
    let cx = Cx::new(&g, false);
    let w = g.constant(
        w1.clone()
            .insert_axis(ndarray::Axis(0))
            .into_dyn(),
    );
    let (fmap, _) = render_batch(&cx, field, std::slice::from_ref(pose), w, cfg, rng.as_deref_mut())?;
    let v = g.value(fmap);
    let (h, wdt) = cfg.resolution;
    let c = field.channels();
    let data = (*v)
        .clone()
        .into_shape_with_order(IxDyn(&[c, h, wdt]))
        .expect("render shape")
        .into_dimensionality::<ndarray::Ix3>()
        .expect("3-d feature map");
    Ok(FeatureMap { data })
}

/// L1 alignment between a learned 1x1 projection of the feature map and the
/// box-downsampled image at `k` seeded grid positions. Ties the upsampling
/// path's output back to the field render.
pub fn feature_image_consistency(
    cx: &Cx,
    projection: &Linear,
    fmap: Var,
    image: Var,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let g = cx.g;
    let fs = g.shape(fmap);
    let is = g.shape(image);
    let (b, c, hf, wf) = (fs[0], fs[1], fs[2], fs[3]);
    let (ib, ic, ih, iw) = (is[0], is[1], is[2], is[3]);
    if ib != b || ic != 3 {
        return Err(Error::shape(format!(
            "image batch/channels {ib}x{ic} incompatible with feature map {b}x3"
        )));
    }
    if ih % hf != 0 || iw % wf != 0 || !(ih / hf).is_power_of_two() || ih / hf != iw / wf {
        return Err(Error::shape(format!(
            "image {ih}x{iw} not a power-of-two multiple of feature grid {hf}x{wf}"
        )));
    }
    let mut img = image;
    let mut factor = ih / hf;
    while factor > 1 {
        img = g.avg_pool2(img);
        factor /= 2;
    }

    let fm = g.permute(fmap, &[0, 2, 3, 1]);
    let fm = g.reshape(fm, &[b * hf * wf, c]);
    let proj = projection.forward(cx, fm);

    let im = g.permute(img, &[0, 2, 3, 1]);
    let im = g.reshape(im, &[b * hf * wf, 3]);

    let grid = hf * wf;
    let k_eff = k.min(grid);
    let mut picks: Vec<usize> = if k_eff == grid {
        (0..grid).collect()
    } else {
        // Uniform without replacement.
        let mut all: Vec<usize> = (0..grid).collect();
        for i in 0..k_eff {
            let j = i + (rng.random::<u64>() as usize) % (grid - i);
            all.swap(i, j);
        }
        all.truncate(k_eff);
        all.sort_unstable();
        all
    };
    let mut rows = Vec::with_capacity(b * k_eff);
    for bi in 0..b {
        rows.extend(picks.iter().map(|p| bi * grid + p));
    }
    picks.clear();
    let idx = Arc::new(rows);
    let proj_sel = g.gather_rows(proj, idx.clone());
    let img_sel = g.gather_rows(im, idx);
    let diff = g.sub(proj_sel, img_sel);
    Ok(g.mean_all(g.abs(diff)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stage_rng;
    use crate::tape::Tensor;
    use crate::tape::check::{central_diff_grad, max_rel_err};

    struct ConstField {
        feature: Vec<f64>,
        sigma: f64,
    }

    impl FeatureField for ConstField {
        fn channels(&self) -> usize {
            self.feature.len()
        }

        fn eval(
            &self,
            cx: &Cx,
            positions: &Array2<f64>,
            _dirs: &Array2<f64>,
            _styles: Var,
        ) -> (Var, Var) {
            let m = positions.dim().0;
            let c = self.feature.len();
            let mut feat = Array2::zeros((m, c));
            for mut row in feat.rows_mut() {
                for (i, v) in self.feature.iter().enumerate() {
                    row[i] = *v;
                }
            }
            let sigma = Array2::from_elem((m, 1), self.sigma);
            (cx.g.constant(feat.into_dyn()), cx.g.constant(sigma.into_dyn()))
        }
    }

    fn test_cfg(n_samples: usize, res: usize) -> RenderConfig {
        RenderConfig {
            n_samples,
            stratified: false,
            t_near: 2.0,
            t_far: 6.0,
            resolution: (res, res),
        }
    }

    fn frontal_pose() -> CameraPose {
        CameraPose::from_orbit(3.0, 0.0, 0.0, 0.7).unwrap()
    }

    #[test]
    fn zero_density_renders_zero() {
        let field = ConstField {
            feature: vec![1.0, -2.0, 3.0],
            sigma: 0.0,
        };
        let w1 = Array1::zeros(4);
        let fm = render_feature_map(&field, &frontal_pose(), &w1, &test_cfg(16, 4), None).unwrap();
        assert!(fm.data.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn constant_field_matches_closed_form_transmittance() {
        let sigma = 1.0;
        let c0 = [0.8, -0.4, 1.5];
        let field = ConstField {
            feature: c0.to_vec(),
            sigma,
        };
        let cfg = test_cfg(256, 2);
        let w1 = Array1::zeros(4);
        let fm = render_feature_map(&field, &frontal_pose(), &w1, &cfg, None).unwrap();
        let expected = 1.0 - (-sigma * (cfg.t_far - cfg.t_near)).exp();
        for ch in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let got = fm.data[[ch, y, x]];
                    let want = c0[ch] * expected;
                    assert!(
                        (got - want).abs() < 1e-3,
                        "channel {ch}: {got} vs {want}"
                    );
                }
            }
        }
    }

    struct SmoothField;

    impl FeatureField for SmoothField {
        fn channels(&self) -> usize {
            1
        }

        fn eval(
            &self,
            cx: &Cx,
            positions: &Array2<f64>,
            _dirs: &Array2<f64>,
            _styles: Var,
        ) -> (Var, Var) {
            let m = positions.dim().0;
            let mut feat = Array2::zeros((m, 1));
            let mut sigma = Array2::zeros((m, 1));
            for r in 0..m {
                let (x, y, z) = (positions[[r, 0]], positions[[r, 1]], positions[[r, 2]]);
                feat[[r, 0]] = (x * 1.3).sin() + (y - z * 0.5).cos();
                sigma[[r, 0]] = 0.4 + 0.3 * (z * 0.9).sin().powi(2);
            }
            (cx.g.constant(feat.into_dyn()), cx.g.constant(sigma.into_dyn()))
        }
    }

    #[test]
    fn doubling_samples_reduces_quadrature_error() {
        let field = SmoothField;
        let w1 = Array1::zeros(4);
        let pose = frontal_pose();
        let reference =
            render_feature_map(&field, &pose, &w1, &test_cfg(4096, 2), None).unwrap();
        let mut errors = Vec::new();
        for n in [16, 32, 64, 128] {
            let fm = render_feature_map(&field, &pose, &w1, &test_cfg(n, 2), None).unwrap();
            let err = (&fm.data - &reference.data).iter().map(|v| v.abs()).fold(0.0, f64::max);
            errors.push(err);
        }
        for pair in errors.windows(2) {
            assert!(pair[1] < pair[0], "error did not shrink: {errors:?}");
        }
    }

    #[test]
    fn compositing_weights_form_a_partial_partition() {
        let mut rng = stage_rng(11, "weights-test");
        let field = SmoothField;
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let w1 = g.constant(Tensor::zeros(IxDyn(&[1, 4])));
        let cfg = RenderConfig {
            stratified: true,
            ..test_cfg(24, 3)
        };
        let (_, weights) =
            render_batch(&cx, &field, &[frontal_pose()], w1, &cfg, Some(&mut rng)).unwrap();
        let wv = g.value(weights);
        for row in wv.rows() {
            let mut total = 0.0;
            for &p in row.iter() {
                assert!((0.0..=1.0).contains(&p), "weight {p} outside [0,1]");
                total += p;
            }
            assert!(total <= 1.0 + 1e-6, "weights sum {total}");
        }
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        let mut rng = stage_rng(5, "field-init");
        let field = FieldNet::new(&mut rng, 2, 8, 2, 3, 4);
        let cfg = test_cfg(8, 2);
        let pose = frontal_pose();
        let w1_val = Array2::from_shape_fn((1, 4), |(_, j)| 0.1 * (j as f64 + 1.0));

        let loss_for = |f: &FieldNet, w1a: &Array2<f64>| -> (f64, Option<Tensor>, Option<Tensor>) {
            let g = Graph::new();
            let cx = Cx::new(&g, true);
            let w1 = g.param(w1a.clone().into_dyn());
            let (fmap, _) = render_batch(&cx, f, &[pose], w1, &cfg, None).unwrap();
            let loss = g.mean_all(g.square(fmap));
            let first = f.trunk[0].w.clone();
            let gw = cx
                .var_for(&first)
                .and_then(|v| g.grads(loss, &[v])[0])
                .map(|v| (*g.value(v)).clone());
            let gw1 = g.grads(loss, &[w1])[0].map(|v| (*g.value(v)).clone());
            (g.scalar_value(loss), gw, gw1)
        };

        let (_, grad_w, grad_w1) = loss_for(&field, &w1_val);
        let grad_w = grad_w.expect("trunk weight grad");
        let grad_w1 = grad_w1.expect("style grad");

        let mut f_param = |w: &Tensor| {
            let mut f2 = field.clone();
            f2.trunk[0].w.value = w.clone();
            loss_for(&f2, &w1_val).0
        };
        let numeric_w = central_diff_grad(&mut f_param, &field.trunk[0].w.value, 1e-5);
        assert!(
            max_rel_err(&grad_w, &numeric_w) < 1e-4,
            "field param gradient mismatch"
        );

        let mut f_style = |w: &Tensor| {
            let w2 = w.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            loss_for(&field, &w2).0
        };
        let numeric_w1 = central_diff_grad(&mut f_style, &w1_val.clone().into_dyn(), 1e-5);
        assert!(
            max_rel_err(&grad_w1, &numeric_w1) < 1e-4,
            "style gradient mismatch"
        );
    }

    #[test]
    fn view_continuity_under_small_rotations() {
        let mut rng = stage_rng(6, "field-init");
        let field = FieldNet::new(&mut rng, 2, 8, 2, 3, 4);
        let w1 = Array1::from_shape_fn(4, |i| 0.3 * (i as f64 - 1.5));
        let cfg = test_cfg(16, 4);
        let base = render_feature_map(&field, &frontal_pose(), &w1, &cfg, None).unwrap();
        let mut dists = Vec::new();
        for eps in [0.04, 0.02, 0.01] {
            let pose = CameraPose::from_orbit(3.0, eps, 0.0, 0.7).unwrap();
            let fm = render_feature_map(&field, &pose, &w1, &cfg, None).unwrap();
            let d = (&fm.data - &base.data).iter().map(|v| v * v).sum::<f64>().sqrt();
            dists.push(d);
        }
        assert!(dists[0] > dists[1] && dists[1] > dists[2], "{dists:?}");
    }

    #[test]
    fn stratified_render_is_seed_deterministic() {
        let mut rng1 = stage_rng(9, "render");
        let mut rng2 = stage_rng(9, "render");
        let mut field_rng = stage_rng(7, "field-init");
        let field = FieldNet::new(&mut field_rng, 2, 8, 2, 3, 4);
        let w1 = Array1::zeros(4);
        let cfg = RenderConfig {
            stratified: true,
            ..test_cfg(12, 4)
        };
        let a = render_feature_map(&field, &frontal_pose(), &w1, &cfg, Some(&mut rng1)).unwrap();
        let b = render_feature_map(&field, &frontal_pose(), &w1, &cfg, Some(&mut rng2)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn eval_field_zero_density_head_gives_log_two() {
        let mut rng = stage_rng(8, "field-init");
        let mut field = FieldNet::new(&mut rng, 2, 8, 2, 3, 4);
        field.sigma_head.w.value.fill(0.0);
        field.sigma_head.b.value.fill(0.0);
        let x = Array1::from_vec(vec![0.1, -0.4, 2.5]);
        let d = Array1::from_vec(vec![0.0, 0.0, 1.0]);
        let w1 = Array1::zeros(4);
        let s = field.eval_point(&x, &d, &w1).unwrap();
        assert!((s.sigma - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn eval_field_is_deterministic_and_style_sensitive() {
        let mut rng = stage_rng(10, "field-init");
        let field = FieldNet::new(&mut rng, 2, 8, 2, 3, 4);
        let x = Array1::from_vec(vec![0.3, 0.2, 2.8]);
        let d = Array1::from_vec(vec![0.0, 0.0, 1.0]);
        let w_a = Array1::from_shape_fn(4, |i| 0.2 * i as f64);
        let w_b = Array1::from_shape_fn(4, |i| -0.3 * (i as f64 + 1.0));
        let s1 = field.eval_point(&x, &d, &w_a).unwrap();
        let s2 = field.eval_point(&x, &d, &w_a).unwrap();
        assert_eq!(s1.feature, s2.feature);
        assert_eq!(s1.sigma, s2.sigma);
        let s3 = field.eval_point(&x, &d, &w_b).unwrap();
        assert_ne!(s1.feature, s3.feature, "styles should change features");
        assert!(s1.sigma >= 0.0 && s3.sigma >= 0.0);
    }

    #[test]
    fn eval_field_rejects_bad_style_dim() {
        let mut rng = stage_rng(12, "field-init");
        let field = FieldNet::new(&mut rng, 2, 8, 2, 3, 4);
        let x = Array1::zeros(3);
        let d = Array1::from_vec(vec![0.0, 0.0, 1.0]);
        let w = Array1::zeros(7);
        assert!(field.eval_point(&x, &d, &w).is_err());
    }

    #[test]
    fn config_rejects_one_sample(){
        let cfg = test_cfg(1, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn feature_map_roundtrips_through_disk() {
        let fm = FeatureMap {
            data: Array3::from_shape_fn((2, 3, 3), |(c, y, x)| {
                (c as f64) - (y as f64) * 0.5 + (x as f64) * 0.25
            }),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fmap.f32le");
        fm.save(&path).unwrap();
        let back = FeatureMap::load(&path).unwrap();
        assert_eq!(back.data.dim(), fm.data.dim());
        for (a, b) in back.data.iter().zip(fm.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn consistency_loss_zero_when_projection_matches() {
        // 2x2 feature grid, identity-ish setup: projection output equals the
        // downsampled image exactly -> loss 0; also check the hand-built
        // brute-force value for a mismatched image.
        let g = Graph::new();
        let cx = Cx::new(&g, false);
        let mut rng = stage_rng(13, "nerf-path");
        // Feature map with 2 channels; projection takes channel 0 as r, g, b.
        let mut proj = Linear {
            w: Param::new(Tensor::zeros(IxDyn(&[2, 3]))),
            b: Param::new(Tensor::zeros(IxDyn(&[3]))),
        };
        proj.w.value[[0, 0]] = 1.0;
        proj.w.value[[0, 1]] = 1.0;
        proj.w.value[[0, 2]] = 1.0;

        let fdata = ndarray::Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| {
            if c == 0 {
                0.1 + y as f64 * 0.2 + x as f64 * 0.4
            } else {
                9.0
            }
        });
        let fmap = g.constant(fdata.clone().into_dyn());

        // Image at 4x4 whose 2x2 box-average equals channel 0 of the fmap.
        let image = ndarray::Array4::from_shape_fn((1, 3, 4, 4), |(_, _, y, x)| {
            0.1 + (y / 2) as f64 * 0.2 + (x / 2) as f64 * 0.4
        });
        let img = g.constant(image.into_dyn());
        let loss =
            feature_image_consistency(&cx, &proj, fmap, img, usize::MAX, &mut rng).unwrap();
        assert!(g.scalar_value(loss) < 1e-12);

        // Shift the image by +0.5: mean-L1 moves by exactly 0.5.
        let image2 = ndarray::Array4::from_shape_fn((1, 3, 4, 4), |(_, _, y, x)| {
            0.6 + (y / 2) as f64 * 0.2 + (x / 2) as f64 * 0.4
        });
        let img2 = g.constant(image2.into_dyn());
        let loss2 =
            feature_image_consistency(&cx, &proj, fmap, img2, usize::MAX, &mut rng).unwrap();
        assert!((g.scalar_value(loss2) - 0.5).abs() < 1e-12);
    }
}
