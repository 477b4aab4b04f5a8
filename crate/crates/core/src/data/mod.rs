//! Synthetic RGB-D datasets: generation, manifest I/O and augmentation.

pub mod augment;
pub mod synth;

pub use augment::{augment, AugmentParams};
pub use synth::gen_synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rdt::{load_rdt, RdtTensor};
use crate::tensor::{Float, Tensor};

pub const IGNORE_INDEX: usize = 255;
pub const RECIPE_VERSION: u32 = 1;

/// What feeds the depth branch: the stored depth map, or a copy of the RGB
/// image (the depth-free pretraining baseline).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthSource {
    Depth,
    RgbCopy,
}

/// Duplicate a single-channel depth map to `channels` (3-channel stems take
/// the depth map replicated per channel).
pub fn adapt_depth_channels<E: Float>(depth: &Tensor<E>, channels: usize) -> Tensor<E> {
    let d = depth.dims();
    if d[1] == channels {
        return depth.clone();
    }
    assert_eq!(d[1], 1, "can only duplicate single-channel depth");
    let (b, h, w) = (d[0], d[2], d[3]);
    let mut data = vec![E::ZERO; b * channels * h * w];
    for s in 0..b {
        let src = &depth.data()[s * h * w..(s + 1) * h * w];
        for c in 0..channels {
            data[(s * channels + c) * h * w..(s * channels + c + 1) * h * w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![b, channels, h, w], data).expect("duplicate dims consistent")
}

/// Stacks samples into batch tensors and flattens targets (one id per
/// sample for classification, one per pixel for segmentation).
pub fn stack_batch<E: Float>(
    samples: &[&RGBDSample],
    depth_channels: usize,
    source: DepthSource,
) -> Result<(Tensor<E>, Tensor<E>, Vec<usize>)> {
    let (h, w) = samples[0].hw();
    let b = samples.len();
    let mut rgb = vec![E::ZERO; b * 3 * h * w];
    let mut depth1 = vec![E::ZERO; b * h * w];
    let mut targets = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.hw() != (h, w) {
            return Err(Error::Shape("batch samples disagree on size".into()));
        }
        for (j, &v) in s.rgb.data().iter().enumerate() {
            rgb[i * 3 * h * w + j] = E::from_f64(v as f64);
        }
        for (j, &v) in s.depth.data().iter().enumerate() {
            depth1[i * h * w + j] = E::from_f64(v as f64);
        }
        match &s.target {
            Target::Class(c) => targets.push(*c),
            Target::Map { ids, .. } => targets.extend(ids.iter().map(|&v| v as usize)),
        }
    }
    let rgb = Tensor::new(vec![b, 3, h, w], rgb)?;
    let depth = match source {
        DepthSource::Depth => {
            adapt_depth_channels(&Tensor::new(vec![b, 1, h, w], depth1)?, depth_channels)
        }
        DepthSource::RgbCopy => {
            if depth_channels != 3 {
                return Err(Error::Config(
                    "rgb-copy depth source requires depth_in_channels = 3".into(),
                ));
            }
            rgb.clone()
        }
    };
    Ok((rgb, depth, targets))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Classification: one class id.
    Class(usize),
    /// Segmentation: per-pixel class ids (255 = ignore), row-major [h, w].
    Map { h: usize, w: usize, ids: Vec<u8> },
}

#[derive(Clone, Debug)]
pub struct RGBDSample {
    pub rgb: Tensor<f32>,   // [3, H, W] in [0,1]
    pub depth: Tensor<f32>, // [1, H, W] in [0,1]
    pub target: Target,
}

impl RGBDSample {
    pub fn hw(&self) -> (usize, usize) {
        (self.rgb.dims()[1], self.rgb.dims()[2])
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, PathBuf, PathBuf)>,
    pub num_classes: usize,
    pub seed: u64,
    pub recipe: u32,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.txt")
    }

    /// Plain-text format: header `#classes=N seed=S recipe=V`, then one
    /// line per sample: rgb_path<TAB>depth_path<TAB>label_path.
    pub fn save(&self) -> Result<()> {
        let mut out = format!(
            "#classes={} seed={} recipe={}\n",
            self.num_classes, self.seed, self.recipe
        );
        for (r, d, l) in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                r.display(),
                d.display(),
                l.display()
            ));
        }
        fs::write(Self::manifest_path(&self.root), out)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(Self::manifest_path(root))
            .map_err(|e| Error::Dataset(format!("cannot read manifest in {}: {e}", root.display())))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Dataset("empty manifest".into()))?;
        if !header.starts_with('#') {
            return Err(Error::Dataset("manifest missing header line".into()));
        }
        let mut num_classes = None;
        let mut seed = None;
        let mut recipe = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            let Some((k, v)) = field.split_once('=') else { continue };
            match k {
                "classes" => num_classes = v.parse().ok(),
                "seed" => seed = v.parse().ok(),
                "recipe" => recipe = v.parse().ok(),
                _ => {}
            }
        }
        let num_classes =
            num_classes.ok_or_else(|| Error::Dataset("manifest header lacks classes=".into()))?;
        let mut entries = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(r), Some(d), Some(l)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Dataset(format!("malformed manifest line: {line}")));
            };
            entries.push((PathBuf::from(r), PathBuf::from(d), PathBuf::from(l)));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
            num_classes,
            seed: seed.unwrap_or(0),
            recipe: recipe.unwrap_or(RECIPE_VERSION),
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_sample(&self, i: usize) -> Result<RGBDSample> {
        let (r, d, l) = &self.entries[i];
        let rgb = load_rdt(self.resolve(r))?.to_tensor::<f32>()?;
        let depth = load_rdt(self.resolve(d))?.to_tensor::<f32>()?;
        let target = match load_rdt(self.resolve(l))? {
            RdtTensor::U8 { dims, data } => match dims.len() {
                1 if dims[0] == 1 => Target::Class(data[0] as usize),
                2 => Target::Map {
                    h: dims[0],
                    w: dims[1],
                    ids: data,
                },
                _ => {
                    return Err(Error::Dataset(format!(
                        "label {:?} has unsupported dims {:?}",
                        l, dims
                    )))
                }
            },
            _ => return Err(Error::Dataset(format!("label {:?} is not a u8 tensor", l))),
        };
        Ok(RGBDSample { rgb, depth, target })
    }

    pub fn load_all(&self) -> Result<Vec<RGBDSample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }
}
