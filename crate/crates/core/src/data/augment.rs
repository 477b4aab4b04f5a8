//! Geometric training augmentation: random horizontal flip plus random
//! scaling with a fixed-size crop window. One transform is applied
//! identically to rgb, depth and labels (bilinear for images, nearest for
//! labels); window pixels outside the scaled image become zeros / ignore.

use crate::error::{Error, Result};
use crate::image::{hflip_labels, resize_bilinear_hw, resize_nearest_labels};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{RGBDSample, Target, IGNORE_INDEX};

#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    pub flip_p: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Output (crop) size; the pipeline keeps samples square.
    pub crop: usize,
}

impl AugmentParams {
    pub fn finetune_default(crop: usize) -> Self {
        AugmentParams {
            flip_p: 0.5,
            scale_lo: 0.5,
            scale_hi: 1.75,
            crop,
        }
    }

    pub fn identity(crop: usize) -> Self {
        AugmentParams {
            flip_p: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            crop,
        }
    }
}

fn window_offset(rng: &mut Rng, scaled: usize, crop: usize) -> isize {
    let lo = (scaled as isize - crop as isize).min(0);
    let hi = (scaled as isize - crop as isize).max(0);
    if lo == hi {
        lo
    } else {
        lo + rng.below((hi - lo + 1) as usize) as isize
    }
}

fn crop_channels(src: &Tensor<f32>, oy: isize, ox: isize, crop: usize, fill: f32) -> Tensor<f32> {
    let d = src.dims();
    let (ch, h, w) = (d[0], d[1], d[2]);
    let mut out = vec![fill; ch * crop * crop];
    for c in 0..ch {
        for y in 0..crop {
            let sy = y as isize + oy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..crop {
                let sx = x as isize + ox;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(c * crop + y) * crop + x] =
                    src.data()[(c * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(vec![ch, crop, crop], out).expect("crop dims consistent")
}

pub fn augment(sample: &RGBDSample, rng: &mut Rng, p: &AugmentParams) -> Result<RGBDSample> {
    let (h, w) = sample.hw();
    if p.scale_lo <= 0.0 || p.scale_hi < p.scale_lo {
        return Err(Error::InvalidArg(format!(
            "augment: bad scale range [{}, {}]",
            p.scale_lo, p.scale_hi
        )));
    }
    let f = rng.uniform(p.scale_lo, p.scale_hi);
    let nh = ((h as f64 * f).round() as usize).max(1);
    let nw = ((w as f64 * f).round() as usize).max(1);
    let oy = window_offset(rng, nh, p.crop);
    let ox = window_offset(rng, nw, p.crop);
    let flip = rng.bernoulli(p.flip_p);

    let rgb = resize_bilinear_hw(&sample.rgb, nh, nw);
    let depth = resize_bilinear_hw(&sample.depth, nh, nw);
    let mut rgb = crop_channels(&rgb, oy, ox, p.crop, 0.0);
    let mut depth = crop_channels(&depth, oy, ox, p.crop, 0.0);
    let mut target = match &sample.target {
        Target::Class(c) => Target::Class(*c),
        Target::Map { h: lh, w: lw, ids } => {
            let scaled = resize_nearest_labels(ids, *lh, *lw, nh, nw);
            let mut out = vec![IGNORE_INDEX as u8; p.crop * p.crop];
            for y in 0..p.crop {
                let sy = y as isize + oy;
                if sy < 0 || sy >= nh as isize {
                    continue;
                }
                for x in 0..p.crop {
                    let sx = x as isize + ox;
                    if sx < 0 || sx >= nw as isize {
                        continue;
                    }
                    out[y * p.crop + x] = scaled[sy as usize * nw + sx as usize];
                }
            }
            Target::Map {
                h: p.crop,
                w: p.crop,
                ids: out,
            }
        }
    };
    if flip {
        rgb = rgb.flip_last_axis();
        depth = depth.flip_last_axis();
        if let Target::Map { h, w, ids } = &target {
            target = Target::Map {
                h: *h,
                w: *w,
                ids: hflip_labels(ids, *h, *w),
            };
        }
    }
    Ok(RGBDSample { rgb, depth, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{render_scene, GenMode};

    fn sample() -> RGBDSample {
        let mut rng = Rng::new(42);
        let s = render_scene(&mut rng, 64, GenMode::Segment, 4);
        RGBDSample {
            rgb: Tensor::new(vec![3, 64, 64], s.rgb).unwrap(),
            depth: Tensor::new(vec![1, 64, 64], s.depth).unwrap(),
            target: Target::Map {
                h: 64,
                w: 64,
                ids: s.label,
            },
        }
    }

    #[test]
    fn identity_params_are_identity() {
        let s = sample();
        let mut rng = Rng::new(7);
        let a = augment(&s, &mut rng, &AugmentParams::identity(64)).unwrap();
        assert_eq!(a.rgb, s.rgb);
        assert_eq!(a.depth, s.depth);
        assert_eq!(a.target, s.target);
    }

    #[test]
    fn flip_twice_restores_original() {
        let s = sample();
        let p = AugmentParams {
            flip_p: 1.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            crop: 64,
        };
        let mut rng = Rng::new(7);
        let once = augment(&s, &mut rng, &p).unwrap();
        let twice = augment(&once, &mut rng, &p).unwrap();
        assert_eq!(twice.rgb, s.rgb);
        assert_eq!(twice.target, s.target);
    }

    #[test]
    fn labels_stay_aligned_with_colors_after_scale_and_crop() {
        // On the flat-colored synthetic shapes, any pixel whose 3x3 label
        // neighborhood is uniform must carry that region's color statistics:
        // shape pixels differ from background pixels of the same sample.
        let s = sample();
        let p = AugmentParams {
            flip_p: 0.0,
            scale_lo: 0.5,
            scale_hi: 0.5,
            crop: 64,
        };
        let mut rng = Rng::new(9);
        let a = augment(&s, &mut rng, &p).unwrap();
        let Target::Map { h, w, ids } = &a.target else {
            panic!("segment target expected")
        };
        // Collect the mean color per label id over interior pixels, then
        // check every interior pixel sits close to its own label's mean and
        // far from the nearest other label mean when labels differ a lot.
        let mut interior = vec![];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let c = ids[y * w + x];
                if c == IGNORE_INDEX as u8 {
                    continue;
                }
                let uniform = (0..3).all(|dy| {
                    (0..3).all(|dx| ids[(y + dy - 1) * w + (x + dx - 1)] == c)
                });
                if uniform {
                    interior.push((y, x, c));
                }
            }
        }
        assert!(!interior.is_empty());
        // Interior shape pixels must keep exactly the shape's flat color
        // (bilinear interpolation of a constant region is constant), so the
        // per-label color variance over interior pixels is ~0 for shapes.
        use std::collections::HashMap;
        let mut by_label: HashMap<u8, Vec<[f32; 3]>> = HashMap::new();
        for &(y, x, c) in &interior {
            let px = [
                a.rgb.data()[y * w + x],
                a.rgb.data()[h * w + y * w + x],
                a.rgb.data()[2 * h * w + y * w + x],
            ];
            by_label.entry(c).or_default().push(px);
        }
        for (label, pxs) in by_label {
            if label == 0 {
                continue; // background is textured by design
            }
            let mean: [f32; 3] = [0, 1, 2].map(|c| {
                pxs.iter().map(|p| p[c]).sum::<f32>() / pxs.len() as f32
            });
            for p in &pxs {
                for c in 0..3 {
                    assert!(
                        (p[c] - mean[c]).abs() < 1e-4,
                        "label {label} interior pixel drifted from flat fill"
                    );
                }
            }
        }
    }
}
