//! Procedural multi-view dataset: analytically ray-traced primitives
//! (Lambertian, one directional light) rendered from a seeded camera prior.
//! Renders of one scene instance are exactly view-consistent, which gives the
//! consistency metrics a ground truth to stand on.

use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_rays, CameraPose};
use crate::data::{tensor_to_image, LabeledImages};
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::video::VideoSequence;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Viewpoint distribution: uniform yaw/pitch on a fixed-radius orbit.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPrior {
    pub distance: f64,
    pub yaw_range: (f64, f64),
    pub pitch_range: (f64, f64),
    pub fov_y: f64,
}

impl Default for CameraPrior {
    fn default() -> Self {
        Self {
            distance: 3.0,
            yaw_range: (-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4),
            pitch_range: (
                -15.0f64.to_radians(),
                15.0f64.to_radians(),
            ),
            fov_y: 0.7,
        }
    }
}

impl CameraPrior {
    pub fn validate(&self) -> Result<()> {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let ok = |(lo, hi): (f64, f64)| lo <= hi && lo > -half_pi && hi < half_pi;
        if !ok(self.yaw_range) && !(self.yaw_range.0 <= self.yaw_range.1) {
            return Err(Error::config("invalid yaw range"));
        }
        if !ok(self.pitch_range) {
            return Err(Error::config("pitch range must stay within (-pi/2, pi/2)"));
        }
        if self.distance <= 0.0 {
            return Err(Error::config("camera distance must be positive"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<CameraPose> {
        self.validate()?;
        let yaw = sample_range(rng, self.yaw_range);
        let pitch = sample_range(rng, self.pitch_range);
        CameraPose::from_orbit(self.distance, yaw, pitch, self.fov_y)
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    Cuboid,
}

/// One class of scenes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Class folder name; specs must be listed in sorted-name order so the
    /// folder loader assigns the same labels.
    pub name: String,
    pub label: usize,
    pub primitive: Primitive,
    pub albedo_lo: [f64; 3],
    pub albedo_hi: [f64; 3],
    pub size_range: (f64, f64),
    pub light: [f64; 3],
    pub background: [f64; 3],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.label == 0 {
            return Err(Error::config("labels are 1-based"));
        }
        if !(self.size_range.0 > 0.0 && self.size_range.1 >= self.size_range.0) {
            return Err(Error::config("degenerate size range"));
        }
        for c in 0..3 {
            if self.albedo_hi[c] < self.albedo_lo[c] {
                return Err(Error::config("albedo range inverted"));
            }
        }
        Ok(())
    }
}

/// The desk-scale default: red-hued spheres vs blue-hued boxes.
pub fn default_scene_specs() -> Vec<SceneSpec> {
    let light = [0.45, 0.8, -0.5];
    let background = [0.10, 0.10, 0.13];
    vec![
        SceneSpec {
            name: "c1_red_spheres".into(),
            label: 1,
            primitive: Primitive::Sphere,
            albedo_lo: [0.6, 0.05, 0.05],
            albedo_hi: [1.0, 0.35, 0.30],
            size_range: (0.7, 1.05),
            light,
            background,
        },
        SceneSpec {
            name: "c2_blue_boxes".into(),
            label: 2,
            primitive: Primitive::Cuboid,
            albedo_lo: [0.05, 0.05, 0.6],
            albedo_hi: [0.30, 0.35, 1.0],
            size_range: (0.55, 0.85),
            light,
            background,
        },
    ]
}

/// A concrete scene drawn from a spec.
#[derive(Clone, Debug)]
pub struct SceneInstance {
    pub primitive: Primitive,
    pub albedo: [f64; 3],
    pub size: f64,
    pub light: Vector3<f64>,
    pub background: [f64; 3],
}

impl SceneInstance {
    pub fn draw(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let albedo = [0, 1, 2].map(|c| {
            if spec.albedo_hi[c] > spec.albedo_lo[c] {
                rng.random_range(spec.albedo_lo[c]..spec.albedo_hi[c])
            } else {
                spec.albedo_lo[c]
            }
        });
        let size = if spec.size_range.1 > spec.size_range.0 {
            rng.random_range(spec.size_range.0..spec.size_range.1)
        } else {
            spec.size_range.0
        };
        Self {
            primitive: spec.primitive,
            albedo,
            size,
            light: Vector3::new(spec.light[0], spec.light[1], spec.light[2]).normalize(),
            background: spec.background,
        }
    }

    /// Intersection along a unit ray from `origin`: returns (t, normal).
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self.primitive {
            Primitive::Sphere => {
                let b = origin.dot(dir);
                let c = origin.dot(origin) - self.size * self.size;
                let disc = b * b - c;
                if disc <= 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= 1e-6 {
                    return None;
                }
                let p = origin + dir * t;
                Some((t, p / self.size))
            }
            Primitive::Cuboid => {
                let s = self.size;
                let mut t_min = f64::NEG_INFINITY;
                let mut t_max = f64::INFINITY;
                let mut axis = 0usize;
                for i in 0..3 {
                    if dir[i].abs() < 1e-12 {
                        if origin[i].abs() > s {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[i];
                    let (mut t1, mut t2) = ((-s - origin[i]) * inv, (s - origin[i]) * inv);
                    if t1 > t2 {
                        std::mem::swap(&mut t1, &mut t2);
                    }
                    if t1 > t_min {
                        t_min = t1;
                        axis = i;
                    }
                    t_max = t_max.min(t2);
                }
                if t_max < t_min || t_min <= 1e-6 {
                    return None;
                }
                let p = origin + dir * t_min;
                let mut n = Vector3::zeros();
                n[axis] = p[axis].signum();
                Some((t_min, n))
            }
        }
    }

    /// Ray-trace the scene into `[3, res, res]` in [-1, 1].
    pub fn render(&self, pose: &CameraPose, resolution: usize) -> Result<Array3<f64>> {
        const AMBIENT: f64 = 0.25;
        let rays = generate_rays(pose, (resolution, resolution), 0.1, 100.0)?;
        let mut img = Array3::zeros((3, resolution, resolution));
        for (i, ray) in rays.iter().enumerate() {
            let y = i / resolution;
            let x = i % resolution;
            let color = match self.hit(&ray.origin, &ray.direction) {
                Some((_, normal)) => {
                    let shade = AMBIENT + (1.0 - AMBIENT) * normal.dot(&self.light).max(0.0);
                    [0, 1, 2].map(|c| self.albedo[c] * shade)
                }
                None => self.background,
            };
            for c in 0..3 {
                img[[c, y, x]] = color[c] * 2.0 - 1.0;
            }
        }
        Ok(img)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub path: String,
    pub label: usize,
    /// Stored for evaluation only; training never reads it.
    pub pose: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub specs: Vec<SceneSpec>,
    pub entries: Vec<DatasetEntry>,
}

fn check_specs(specs: &[SceneSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("need at least one scene spec"));
    }
    let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != specs.len() {
        return Err(Error::config("scene spec names must be unique"));
    }
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.label != i + 1 {
            return Err(Error::config(format!(
                "spec {} must carry label {} (specs are ordered)",
                spec.name,
                i + 1
            )));
        }
    }
    let mut sorted = specs.to_vec();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    if sorted.iter().map(|s| &s.name).ne(specs.iter().map(|s| &s.name)) {
        return Err(Error::config(
            "scene specs must be listed in sorted-name order so folder \
             loading assigns the same labels",
        ));
    }
    Ok(())
}

/// Draw (instance, pose) pairs for a whole dataset: one camera per sample,
/// single-view by construction.
fn draw_samples(
    specs: &[SceneSpec],
    n_per_class: usize,
    prior: &CameraPrior,
    seed: u64,
) -> Result<Vec<(usize, SceneInstance, CameraPose)>> {
    let mut rng = stage_rng(seed, "synth-data");
    let mut samples = Vec::with_capacity(specs.len() * n_per_class);
    for (si, spec) in specs.iter().enumerate() {
        for _ in 0..n_per_class {
            let instance = SceneInstance::draw(spec, &mut rng);
            let pose = prior.sample(&mut rng)?;
            samples.push((si, instance, pose));
        }
    }
    Ok(samples)
}

fn render_all(
    samples: &[(usize, SceneInstance, CameraPose)],
    resolution: usize,
) -> Result<Vec<Array3<f64>>> {
    #[cfg(feature = "parallel")]
    {
        samples
            .par_iter()
            .map(|(_, inst, pose)| inst.render(pose, resolution))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        samples
            .iter()
            .map(|(_, inst, pose)| inst.render(pose, resolution))
            .collect()
    }
}

/// In-memory synthetic dataset (used by tests and smoke runs).
pub fn synth_labeled_images(
    specs: &[SceneSpec],
    n_per_class: usize,
    resolution: usize,
    prior: &CameraPrior,
    seed: u64,
) -> Result<LabeledImages> {
    check_specs(specs)?;
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    let samples = draw_samples(specs, n_per_class, prior, seed)?;
    let images = render_all(&samples, resolution)?;
    let mut data = LabeledImages::new(specs.len());
    for ((si, _, _), img) in samples.iter().zip(images) {
        data.push(img, specs[*si].label)?;
    }
    Ok(data)
}

/// Render the dataset to `out/<class_name>/NNNNN.png` plus `manifest.json`.
pub fn render_synthetic_dataset(
    specs: &[SceneSpec],
    n_per_class: usize,
    resolution: usize,
    prior: &CameraPrior,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    check_specs(specs)?;
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    let samples = draw_samples(specs, n_per_class, prior, seed)?;
    let images = render_all(&samples, resolution)?;

    for spec in specs {
        std::fs::create_dir_all(out.join(&spec.name))?;
    }
    let mut counters = vec![0usize; specs.len()];
    let mut entries = Vec::with_capacity(samples.len());
    for ((si, _, pose), img) in samples.iter().zip(images) {
        let rel = format!("{}/{:05}.png", specs[*si].name, counters[*si]);
        counters[*si] += 1;
        tensor_to_image(&img).save(out.join(&rel))?;
        entries.push(DatasetEntry {
            path: rel,
            label: specs[*si].label,
            pose: pose.to_json(),
        });
    }
    let manifest = DatasetManifest {
        seed,
        specs: specs.to_vec(),
        entries,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Deterministic yaw sweep of one scene instance at fixed pitch.
#[allow(clippy::too_many_arguments)]
pub fn render_orbit_video(
    spec: &SceneSpec,
    n_frames: usize,
    yaw_from: f64,
    yaw_to: f64,
    pitch: f64,
    resolution: usize,
    prior: &CameraPrior,
    seed: u64,
) -> Result<VideoSequence> {
    spec.validate()?;
    if n_frames < 2 {
        return Err(Error::config("an orbit needs at least 2 frames"));
    }
    let mut rng = stage_rng(seed, "orbit-instance");
    let instance = SceneInstance::draw(spec, &mut rng);
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let a = i as f64 / (n_frames - 1) as f64;
        let yaw = yaw_from + (yaw_to - yaw_from) * a;
        poses.push(CameraPose::from_orbit(
            prior.distance,
            yaw,
            pitch,
            prior.fov_y,
        )?);
    }
    let frames: Vec<Array3<f64>> = poses
        .iter()
        .map(|p| instance.render(p, resolution))
        .collect::<Result<_>>()?;
    VideoSequence::new(frames, poses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frontal_sphere_silhouette_is_a_centered_disc() {
        let spec = &default_scene_specs()[0];
        let mut rng = stage_rng(1, "synth-test");
        let instance = SceneInstance::draw(spec, &mut rng);
        let pose = CameraPose::from_orbit(3.0, 0.0, 0.0, 0.7).unwrap();
        let img = instance.render(&pose, 33).unwrap();
        let bg: [f64; 3] = [0, 1, 2].map(|c| spec.background[c] * 2.0 - 1.0);
        // Center pixel hits the sphere, corners see background.
        let center: Vec<f64> = (0..3).map(|c| img[[c, 16, 16]]).collect();
        assert!((center[0] - bg[0]).abs() > 0.05, "center should hit the sphere");
        for c in 0..3 {
            assert!((img[[c, 0, 0]] - bg[c]).abs() < 1e-12);
            assert!((img[[c, 32, 32]] - bg[c]).abs() < 1e-12);
        }
        // Red-hued class: red channel dominates at the center.
        assert!(center[0] > center[2]);
    }

    #[test]
    fn camera_prior_bounds_and_degenerate_ranges() {
        let prior = CameraPrior::default();
        let mut rng = stage_rng(2, "prior");
        for _ in 0..2000 {
            let pose = prior.sample(&mut rng).unwrap();
            let yaw = pose.position.x.atan2(-pose.position.z);
            assert!(yaw >= prior.yaw_range.0 - 1e-9 && yaw <= prior.yaw_range.1 + 1e-9);
            let pitch = (pose.position.y / prior.distance).asin();
            assert!(pitch >= prior.pitch_range.0 - 1e-9 && pitch <= prior.pitch_range.1 + 1e-9);
        }

        let frozen = CameraPrior {
            yaw_range: (0.3, 0.3),
            pitch_range: (0.1, 0.1),
            ..CameraPrior::default()
        };
        let a = frozen.sample(&mut rng).unwrap();
        let b = frozen.sample(&mut rng).unwrap();
        assert_eq!(a.position, b.position);
    }

    #[test]
    fn prior_sampling_is_seed_deterministic() {
        let prior = CameraPrior::default();
        let seq_a: Vec<_> = {
            let mut rng = stage_rng(3, "prior");
            (0..5).map(|_| prior.sample(&mut rng).unwrap().position).collect()
        };
        let seq_b: Vec<_> = {
            let mut rng = stage_rng(3, "prior");
            (0..5).map(|_| prior.sample(&mut rng).unwrap().position).collect()
        };
        assert_eq!(seq_a, seq_b);
    }

    #[test]
    fn dataset_counts_labels_and_determinism() {
        let specs = default_scene_specs();
        let prior = CameraPrior::default();
        let a = synth_labeled_images(&specs, 6, 16, &prior, 9).unwrap();
        let b = synth_labeled_images(&specs, 6, 16, &prior, 9).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a.label_counts(), vec![6, 6]);
        for i in 0..a.len() {
            assert_eq!(a.image(i), b.image(i));
        }
    }

    #[test]
    fn dataset_on_disk_has_manifest_and_balanced_entries() {
        let dir = tempfile::tempdir().unwrap();
        let specs = default_scene_specs();
        let prior = CameraPrior::default();
        let manifest =
            render_synthetic_dataset(&specs, 4, 16, &prior, 5, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        let ones = manifest.entries.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones, 4);
        assert!(dir.path().join("c1_red_spheres/00003.png").exists());
        assert!(dir.path().join("manifest.json").exists());

        // Loading through the training interface matches labels.
        let (data, names, _) = crate::data::load_image_folder(dir.path(), 16).unwrap();
        assert_eq!(names, vec!["c1_red_spheres", "c2_blue_boxes"]);
        assert_eq!(data.label_counts(), vec![4, 4]);
    }

    #[test]
    fn orbit_sweep_reversal_mirrors_frames() {
        let spec = &default_scene_specs()[1];
        let prior = CameraPrior::default();
        let fwd = render_orbit_video(spec, 5, -0.4, 0.4, 0.1, 16, &prior, 11).unwrap();
        let rev = render_orbit_video(spec, 5, 0.4, -0.4, 0.1, 16, &prior, 11).unwrap();
        for (a, b) in fwd.frames.iter().zip(rev.frames.iter().rev()) {
            assert_eq!(a, b);
        }

        let frozen = render_orbit_video(spec, 2, 0.2, 0.2, 0.0, 16, &prior, 11).unwrap();
        assert_eq!(frozen.frames[0], frozen.frames[1]);
    }

    #[test]
    fn spec_ordering_is_enforced() {
        let mut specs = default_scene_specs();
        specs.swap(0, 1);
        let prior = CameraPrior::default();
        assert!(synth_labeled_images(&specs, 2, 8, &prior, 1).is_err());
    }
}
