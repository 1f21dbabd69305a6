//! Frame sources for training and evaluation: the synthetic scene generator
//! and a directory of PPM/PGM pairs described by a JSON manifest.
//!
//! On-disk layout:
//!
//! ```text
//! manifest.json   {"height", "width", "depth_scale", "frames": [{"name", "rgb", "depth"}]}
//! <name>.ppm      P6, 8-bit RGB
//! <name>.pgm      P5, 16-bit depth; depth = sample / depth_scale, 0 = invalid
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::netpbm::{self, Image};
use crate::scenes::{generate_scene, SceneConfig, SceneSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub name: String,
    /// `3×H×W` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `H×W`.
    pub depth: Tensor<f32>,
}

pub trait DepthDataset {
    fn len(&self) -> usize;

    fn frame(&self, i: usize) -> Result<Frame>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn frames(&self) -> Result<Vec<Frame>> {
        (0..self.len()).map(|i| self.frame(i)).collect()
    }
}

/// Generated scenes over an index range.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub scene: SceneConfig,
    pub set: SceneSet,
}

impl DepthDataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.set.len()
    }

    fn frame(&self, i: usize) -> Result<Frame> {
        let index = self.set.index(i);
        let s = generate_scene::<f32>(&self.scene, index)?;
        Ok(Frame {
            name: format!("scene_{index:06}"),
            rgb: s.rgb,
            depth: s.depth,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskFrame {
    pub name: String,
    pub rgb: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiskManifest {
    pub height: usize,
    pub width: usize,
    /// Samples per depth unit.
    pub depth_scale: f64,
    pub frames: Vec<DiskFrame>,
}

#[derive(Clone, Debug)]
pub struct DiskDataset {
    root: PathBuf,
    manifest: DiskManifest,
}

impl DiskDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DiskManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if !(manifest.depth_scale > 0.0) {
            return Err(Error::format(&mpath, "depth_scale must be positive"));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DiskManifest {
        &self.manifest
    }

    fn image(&self, file: &str, channels: usize) -> Result<Image> {
        let path = self.root.join(file);
        let img = netpbm::read(&path)?;
        let (w, h) = (self.manifest.width, self.manifest.height);
        if img.channels != channels || img.width != w || img.height != h {
            return Err(Error::format(
                &path,
                format!(
                    "expected {channels}-channel {w}×{h}, found {}-channel {}×{}",
                    img.channels, img.width, img.height
                ),
            ));
        }
        Ok(img)
    }
}

impl DepthDataset for DiskDataset {
    fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    fn frame(&self, i: usize) -> Result<Frame> {
        let f = &self.manifest.frames[i];
        let (w, h) = (self.manifest.width, self.manifest.height);
        let rgb = self.image(&f.rgb, 3)?;
        let max = rgb.maxval as f32;
        let mut planar = vec![0f32; 3 * h * w];
        for (p, px) in rgb.samples.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + p] = px[c] as f32 / max;
            }
        }
        let depth = self.image(&f.depth, 1)?;
        let scale = self.manifest.depth_scale;
        let depth: Vec<f32> = depth.samples.iter().map(|&s| (s as f64 / scale) as f32).collect();
        Ok(Frame {
            name: f.name.clone(),
            rgb: Tensor::new([3, h, w], planar)?,
            depth: Tensor::new([h, w], depth)?,
        })
    }
}

/// Writes every frame of `ds` as a loadable on-disk dataset.
pub fn export_dataset(ds: &dyn DepthDataset, dir: &Path, depth_scale: f64) -> Result<DiskManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::with_capacity(ds.len());
    let (mut height, mut width) = (0, 0);
    for i in 0..ds.len() {
        let f = ds.frame(i)?;
        let s = f.depth.shape();
        (height, width) = (s[0], s[1]);
        let plane = height * width;
        let mut rgb = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                rgb.push((f.rgb.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u16);
            }
        }
        let depth = f
            .depth
            .data()
            .iter()
            .map(|&d| (d as f64 * depth_scale).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let entry = DiskFrame {
            name: f.name.clone(),
            rgb: format!("{}.ppm", f.name),
            depth: format!("{}.pgm", f.name),
        };
        netpbm::write(
            &dir.join(&entry.rgb),
            &Image {
                width,
                height,
                channels: 3,
                maxval: 255,
                samples: rgb,
            },
        )?;
        netpbm::write(&dir.join(&entry.depth), &netpbm::gray16(width, height, depth))?;
        frames.push(entry);
    }
    let manifest = DiskManifest {
        height,
        width,
        depth_scale,
        frames,
    };
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::make_split;

    #[test]
    fn export_then_load_preserves_frames_up_to_quantization() {
        let scene = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
        let ds = SyntheticDataset { scene, set: make_split(3, 1, 1).unwrap().train };
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&ds, dir.path(), 1000.0).unwrap();
        let disk = DiskDataset::open(dir.path()).unwrap();
        assert_eq!(disk.len(), 3);
        for i in 0..3 {
            let (a, b) = (ds.frame(i).unwrap(), disk.frame(i).unwrap());
            assert_eq!(a.name, b.name);
            assert!(a.depth.max_abs_diff(&b.depth) <= 0.5e-3 + 1e-6);
            assert!(a.rgb.max_abs_diff(&b.rgb) <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn mismatched_image_size_is_a_format_error() {
        let scene = SceneConfig { height: 16, width: 16, ..SceneConfig::default() };
        let ds = SyntheticDataset { scene, set: make_split(1, 1, 1).unwrap().train };
        let dir = tempfile::tempdir().unwrap();
        let mut m = export_dataset(&ds, dir.path(), 1000.0).unwrap();
        m.width = 8;
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        let disk = DiskDataset::open(dir.path()).unwrap();
        assert!(matches!(disk.frame(0), Err(Error::Format { .. })));
    }
}
