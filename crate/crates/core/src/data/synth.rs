//! Synthetic RGB-D scene generator: 1-4 geometric shapes on a textured
//! background. Each shape class has a color family AND a disjoint depth
//! band, so depth carries genuine label signal; color families are shared
//! between class pairs, which keeps RGB alone ambiguous.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rdt::{save_rdt, RdtTensor};
use crate::rng::Rng;
use crate::threads::parallel_map;

use super::{DatasetManifest, RECIPE_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenMode {
    Classify,
    Segment,
}

impl GenMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(GenMode::Classify),
            "segment" => Ok(GenMode::Segment),
            other => Err(Error::InvalidArg(format!(
                "unknown mode '{other}' (expected classify or segment)"
            ))),
        }
    }
}

struct Shape {
    kind: usize, // 0 circle, 1 rectangle, 2 triangle
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    class: usize, // shape-class index in 0..K
    depth: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            0 => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0,
            1 => dx.abs() <= self.rx && dy.abs() <= self.ry,
            _ => {
                // isoceles triangle pointing up
                if dy < -self.ry || dy > self.ry {
                    return false;
                }
                let t = (dy + self.ry) / (2.0 * self.ry);
                dx.abs() <= t * self.rx
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

/// Hue family shared by shape-class pairs (2k and 2k+1), so color alone
/// cannot separate them; their depth bands can.
fn class_color(rng: &mut Rng, class: usize) -> [f64; 3] {
    const FAMILY_HUES: [f64; 4] = [0.02, 0.58, 0.33, 0.12];
    let hue = FAMILY_HUES[(class / 2) % 4] + rng.uniform(-0.05, 0.05);
    let sat = rng.uniform(0.5, 0.85);
    let val = rng.uniform(0.45, 0.85);
    hsv_to_rgb(hue, sat, val)
}

fn class_depth(rng: &mut Rng, class: usize, n_shape_classes: usize) -> f64 {
    let band = 0.7 / n_shape_classes as f64;
    band * (class as f64 + 0.25 + 0.5 * rng.uniform_f64())
}

pub(crate) struct Scene {
    pub rgb: Vec<f32>,   // [3, S, S]
    pub depth: Vec<f32>, // [1, S, S]
    pub label: Vec<u8>,  // [S, S] (segment) class ids, 0 = background
    pub class: usize,    // dominant class (classify target)
}

pub(crate) fn render_scene(rng: &mut Rng, size: usize, mode: GenMode, n_classes: usize) -> Scene {
    let s = size;
    let n_shape_classes = match mode {
        GenMode::Classify => n_classes,
        GenMode::Segment => n_classes - 1,
    };
    // textured background
    let grid = 4usize;
    let mut coarse = [[[0.0f64; 3]; 5]; 5];
    let base: [f64; 3] = [
        rng.uniform(0.15, 0.75),
        rng.uniform(0.15, 0.75),
        rng.uniform(0.15, 0.75),
    ];
    for row in coarse.iter_mut() {
        for cell in row.iter_mut() {
            for (c, v) in cell.iter_mut().enumerate() {
                *v = (base[c] + rng.uniform(-0.12, 0.12)).clamp(0.02, 0.98);
            }
        }
    }
    let mut rgb = vec![0.0f32; 3 * s * s];
    let mut depth = vec![0.0f32; s * s];
    let mut label = vec![0u8; s * s];
    for y in 0..s {
        for x in 0..s {
            let gy = y as f64 / s as f64 * grid as f64;
            let gx = x as f64 / s as f64 * grid as f64;
            let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - iy as f64, gx - ix as f64);
            for c in 0..3 {
                let v = coarse[iy][ix][c] * (1.0 - fy) * (1.0 - fx)
                    + coarse[iy][ix + 1][c] * (1.0 - fy) * fx
                    + coarse[iy + 1][ix][c] * fy * (1.0 - fx)
                    + coarse[iy + 1][ix + 1][c] * fy * fx;
                rgb[c * s * s + y * s + x] = v as f32;
            }
            let d = 0.85 + 0.1 * y as f64 / s as f64;
            depth[y * s + x] = d.clamp(0.0, 1.0) as f32;
        }
    }
    // shapes
    let n_shapes = 1 + rng.below(4);
    let sample_class = rng.below(n_shape_classes);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = match mode {
            GenMode::Classify => sample_class,
            GenMode::Segment => rng.below(n_shape_classes),
        };
        let kind = rng.below(3);
        let cx = rng.uniform(0.28, 0.72) * s as f64;
        let cy = rng.uniform(0.28, 0.72) * s as f64;
        let rx = rng.uniform(0.14, 0.28) * s as f64;
        let ry = rng.uniform(0.14, 0.28) * s as f64;
        let sdepth = class_depth(rng, class, n_shape_classes);
        let color = class_color(rng, class);
        shapes.push(Shape {
            kind,
            cx,
            cy,
            rx,
            ry,
            class,
            depth: sdepth,
            color,
        });
    }
    // far-to-near painter's order so nearer shapes overwrite
    shapes.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());
    let mut dominant_area = vec![0usize; n_shape_classes];
    for sh in &shapes {
        for y in 0..s {
            for x in 0..s {
                if !sh.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                for c in 0..3 {
                    rgb[c * s * s + y * s + x] = sh.color[c].clamp(0.0, 1.0) as f32;
                }
                depth[y * s + x] = sh.depth.clamp(0.0, 1.0) as f32;
                label[y * s + x] = (sh.class + 1) as u8;
            }
        }
    }
    for &l in &label {
        if l > 0 {
            dominant_area[(l - 1) as usize] += 1;
        }
    }
    let class = match mode {
        GenMode::Classify => sample_class,
        GenMode::Segment => dominant_area
            .iter()
            .enumerate()
            .max_by_key(|(_, &a)| a)
            .map(|(i, _)| i)
            .unwrap_or(0),
    };
    Scene {
        rgb,
        depth,
        label,
        class,
    }
}

/// Generates `n_samples` scenes under `out_dir` and writes the manifest.
/// Regeneration from the same (seed, recipe) is byte-identical; per-sample
/// rng streams make the output independent of the worker count.
pub fn gen_synthetic(
    seed: u64,
    n_samples: usize,
    size: usize,
    mode: GenMode,
    n_classes: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::InvalidArg(format!(
            "size {size} must be a positive multiple of 32"
        )));
    }
    if n_classes < 2 || n_classes > 200 {
        return Err(Error::InvalidArg(format!(
            "n_classes {n_classes} out of range [2, 200]"
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArg("n_samples must be >= 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let results: Vec<Result<(PathBuf, PathBuf, PathBuf)>> = parallel_map(n_samples, |i| {
        let mut rng = Rng::stream(seed, i as u64);
        let scene = render_scene(&mut rng, size, mode, n_classes);
        let rgb_p = PathBuf::from(format!("sample_{i:05}.rgb.rdt"));
        let depth_p = PathBuf::from(format!("sample_{i:05}.depth.rdt"));
        let label_p = PathBuf::from(format!("sample_{i:05}.label.rdt"));
        save_rdt(
            &RdtTensor::F32 {
                dims: vec![3, size, size],
                data: scene.rgb,
            },
            out_dir.join(&rgb_p),
        )?;
        save_rdt(
            &RdtTensor::F32 {
                dims: vec![1, size, size],
                data: scene.depth,
            },
            out_dir.join(&depth_p),
        )?;
        let label = match mode {
            GenMode::Classify => RdtTensor::U8 {
                dims: vec![1],
                data: vec![scene.class as u8],
            },
            GenMode::Segment => RdtTensor::U8 {
                dims: vec![size, size],
                data: scene.label,
            },
        };
        save_rdt(&label, out_dir.join(&label_p))?;
        Ok((rgb_p, depth_p, label_p))
    });
    let mut entries = Vec::with_capacity(n_samples);
    for r in results {
        entries.push(r?);
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        num_classes: n_classes,
        seed,
        recipe: RECIPE_VERSION,
    };
    manifest.save()?;
    Ok(manifest)
}
