//! Ordered frame sequences along a camera trajectory. On disk a video is a
//! directory of zero-padded PNG frames plus `trajectory.json` (one pose per
//! frame).

use std::path::Path;

use ndarray::Array3;

use crate::camera::CameraPose;
use crate::data::{image_to_tensor, tensor_to_image};
use crate::error::{Error, Result};

/// Frames are `[3, H, W]` in the model range [-1, 1].
#[derive(Clone, Debug)]
pub struct VideoSequence {
    pub frames: Vec<Array3<f64>>,
    pub poses: Vec<CameraPose>,
}

impl VideoSequence {
    pub fn new(frames: Vec<Array3<f64>>, poses: Vec<CameraPose>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::data("video has no frames"));
        }
        if frames.len() != poses.len() {
            return Err(Error::data(format!(
                "{} frames but {} poses",
                frames.len(),
                poses.len()
            )));
        }
        let dim = frames[0].dim();
        if frames.iter().any(|f| f.dim() != dim) {
            return Err(Error::shape("frames differ in shape"));
        }
        Ok(Self { frames, poses })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].dim();
        (h, w)
    }

    /// Frames converted to [0, 1] (the metric domain).
    pub fn frames_unit(&self) -> Vec<Array3<f64>> {
        self.frames
            .iter()
            .map(|f| f.mapv(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (i, frame) in self.frames.iter().enumerate() {
            tensor_to_image(frame).save(dir.join(format!("{i:05}.png")))?;
        }
        let trajectory: Vec<serde_json::Value> =
            self.poses.iter().map(|p| p.to_json()).collect();
        std::fs::write(
            dir.join("trajectory.json"),
            serde_json::to_string_pretty(&trajectory)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let trajectory: Vec<serde_json::Value> =
            serde_json::from_str(&std::fs::read_to_string(dir.join("trajectory.json"))?)?;
        let poses: Vec<CameraPose> = trajectory
            .iter()
            .map(CameraPose::from_json)
            .collect::<Result<_>>()?;
        let mut frames = Vec::with_capacity(poses.len());
        for i in 0..poses.len() {
            let path = dir.join(format!("{i:05}.png"));
            let img = image::ImageReader::open(&path)?
                .decode()
                .map_err(Error::Image)?
                .to_rgb8();
            frames.push(image_to_tensor(&img));
        }
        Self::new(frames, poses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_roundtrips_through_disk() {
        let poses: Vec<CameraPose> = (0..3)
            .map(|i| CameraPose::from_orbit(3.0, i as f64 * 0.2 - 0.2, 0.1, 0.7).unwrap())
            .collect();
        let frames: Vec<Array3<f64>> = (0..3)
            .map(|i| {
                Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
                    // Values on the u8 grid so quantization is exact.
                    let q = ((c + y + x + i) % 5) as f64 * 51.0;
                    q / 255.0 * 2.0 - 1.0
                })
            })
            .collect();
        let video = VideoSequence::new(frames, poses).unwrap();
        let dir = tempfile::tempdir().unwrap();
        video.save(dir.path()).unwrap();
        let back = VideoSequence::load(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.frames.iter().zip(&video.frames) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!((back.poses[1].position - video.poses[1].position).norm() < 1e-9);
    }

    #[test]
    fn empty_video_rejected() {
        assert!(VideoSequence::new(vec![], vec![]).is_err());
    }

    #[test]
    fn unit_range_conversion() {
        let f = Array3::from_elem((3, 2, 2), -1.0);
        let video = VideoSequence::new(
            vec![f],
            vec![CameraPose::from_orbit(3.0, 0.0, 0.0, 0.7).unwrap()],
        )
        .unwrap();
        let unit = video.frames_unit();
        assert!(unit[0].iter().all(|v| *v == 0.0));
    }
}
