//! Deterministic synthetic fine-grained classification task.
//!
//! Every image is a smooth, label-independent noise background with one small
//! P x P class glyph stamped at a random location. The glyph is the only
//! class evidence, and its ground-truth mask ships with the sample, so
//! attention-localization claims can be scored exactly.
//!
//! Generation is pure per (spec, sample index): each sample draws from its
//! own RNG stream, so datasets are bit-reproducible and samples can be
//! regenerated independently.

use crate::error::{CoreError, Result};
use crate::rng::{self, StreamKind};
use crate::viz;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub background_noise_scale: f64,
    pub seed: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 10,
            image_size: 64,
            patch_size: 8,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            background_noise_scale: 1.0,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(CoreError::Config("classes must be >= 1".into()));
        }
        if self.patch_size == 0 {
            return Err(CoreError::Config("patch_size must be >= 1".into()));
        }
        if self.patch_size > self.image_size / 4 {
            return Err(CoreError::Config(format!(
                "patch_size {} exceeds image_size/4 = {}",
                self.patch_size,
                self.image_size / 4
            )));
        }
        for (name, count) in [
            ("train", self.n_train),
            ("val", self.n_val),
            ("test", self.n_test),
        ] {
            if count < self.classes {
                return Err(CoreError::Config(format!(
                    "{name} count {count} is below the class count {}",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }
}

/// One image with its label and ground-truth discriminative-patch mask.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// 3 x size x size, values in [0,1], channel-major.
    pub image: Vec<f32>,
    pub label: usize,
    /// size x size, 1 inside the glyph patch.
    pub mask: Vec<u8>,
    /// (row, col) of the patch's top-left corner.
    pub patch_origin: (usize, usize),
    pub size: usize,
}

impl SyntheticSample {
    pub fn mask_popcount(&self) -> usize {
        self.mask.iter().filter(|&&b| b != 0).count()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Per-class glyph: a binary micro-pattern with two colors.
#[derive(Clone, Debug)]
pub struct Glyph {
    pub pattern: Vec<u8>,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// The K class glyphs under a spec. Patterns are rejected until every pair
/// differs in at least P*P/4 cells, so inter-class evidence always exists.
pub fn glyphs(spec: &DatasetSpec) -> Vec<Glyph> {
    let p2 = spec.patch_size * spec.patch_size;
    let mut rng = rng::stream(spec.seed as u64, StreamKind::Glyph, 0);
    let mut out: Vec<Glyph> = Vec::with_capacity(spec.classes);
    while out.len() < spec.classes {
        let pattern: Vec<u8> = (0..p2)
            .map(|_| (rng::uniform(&mut rng) < 0.5) as u8)
            .collect();
        if out.iter().any(|g| hamming(&g.pattern, &pattern) < p2 / 4) {
            continue;
        }
        let mut color = || {
            [
                rng::uniform(&mut rng) as f32,
                rng::uniform(&mut rng) as f32,
                rng::uniform(&mut rng) as f32,
            ]
        };
        let fg = color();
        let bg = loop {
            let c = color();
            let dist: f32 = fg.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum();
            if dist >= 0.75 {
                break c;
            }
        };
        out.push(Glyph { pattern, fg, bg });
    }
    out
}

/// Rendered 3 x P x P template of class k (what the glyph stamp writes).
pub fn class_template(spec: &DatasetSpec, k: usize) -> Vec<f32> {
    let g = &glyphs(spec)[k];
    let p = spec.patch_size;
    let mut out = vec![0.0f32; 3 * p * p];
    for ch in 0..3 {
        for i in 0..p * p {
            out[ch * p * p + i] = if g.pattern[i] != 0 { g.fg[ch] } else { g.bg[ch] };
        }
    }
    out
}

/// Smooth value-noise background for one sample, before the glyph stamp.
/// Never reads the label.
pub fn background(spec: &DatasetSpec, index: usize) -> Vec<f32> {
    let s = spec.image_size;
    let step = 8usize;
    let gh = s.div_ceil(step) + 1;
    let mut rng = rng::stream(spec.seed as u64, StreamKind::Sample, index as u64);
    // The first two draws of the stream are reserved for the patch position.
    let _ = rng::uniform(&mut rng);
    let _ = rng::uniform(&mut rng);
    let mut image = vec![0.0f32; 3 * s * s];
    let mut grid = vec![0.0f32; gh * gh];
    for ch in 0..3 {
        for v in grid.iter_mut() {
            *v = rng::uniform(&mut rng) as f32;
        }
        let plane = &mut image[ch * s * s..(ch + 1) * s * s];
        for y in 0..s {
            let gy = y as f32 / step as f32;
            let y0 = gy as usize;
            let fy = gy - y0 as f32;
            for x in 0..s {
                let gx = x as f32 / step as f32;
                let x0 = gx as usize;
                let fx = gx - x0 as f32;
                let v00 = grid[y0 * gh + x0];
                let v01 = grid[y0 * gh + x0 + 1];
                let v10 = grid[(y0 + 1) * gh + x0];
                let v11 = grid[(y0 + 1) * gh + x0 + 1];
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                let centered = 0.5 + spec.background_noise_scale as f32 * (v - 0.5);
                plane[y * s + x] = centered.clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Patch origin drawn by sample `index` (first two draws of its stream).
fn patch_position(spec: &DatasetSpec, index: usize) -> (usize, usize) {
    let s = spec.image_size;
    let p = spec.patch_size;
    let mut rng = rng::stream(spec.seed as u64, StreamKind::Sample, index as u64);
    let row = (rng::uniform(&mut rng) * (s - p + 1) as f64) as usize;
    let col = (rng::uniform(&mut rng) * (s - p + 1) as f64) as usize;
    (row.min(s - p), col.min(s - p))
}

/// Generate sample `index` (global, across the split concatenation).
pub fn generate_sample(spec: &DatasetSpec, glyph_set: &[Glyph], index: usize) -> SyntheticSample {
    let s = spec.image_size;
    let p = spec.patch_size;
    let label = index % spec.classes;
    let (row, col) = patch_position(spec, index);
    let mut image = background(spec, index);
    let glyph = &glyph_set[label];
    let mut mask = vec![0u8; s * s];
    for dy in 0..p {
        for dx in 0..p {
            mask[(row + dy) * s + (col + dx)] = 1;
            let bit = glyph.pattern[dy * p + dx];
            for ch in 0..3 {
                image[ch * s * s + (row + dy) * s + (col + dx)] =
                    if bit != 0 { glyph.fg[ch] } else { glyph.bg[ch] };
            }
        }
    }
    SyntheticSample {
        image,
        label,
        mask,
        patch_origin: (row, col),
        size: s,
    }
}

/// Generate the full train/val/test splits. Splits are disjoint by
/// construction: global indices partition as [0,train), [train,train+val),
/// [train+val,total).
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let glyph_set = glyphs(spec);
    let make = |lo: usize, hi: usize| -> Vec<SyntheticSample> {
        (lo..hi)
            .map(|i| generate_sample(spec, &glyph_set, i))
            .collect()
    };
    let train = make(0, spec.n_train);
    let val = make(spec.n_train, spec.n_train + spec.n_val);
    let test = make(spec.n_train + spec.n_val, spec.total());
    Ok(Dataset {
        spec: *spec,
        train,
        val,
        test,
    })
}

/// Bounding box (row0, col0, row1, col1) of the mask's 1-pixels, inclusive.
fn mask_bbox(mask: &[u8], size: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    let mut any = false;
    for r in 0..size {
        for c in 0..size {
            if mask[r * size + c] != 0 {
                any = true;
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    any.then_some((r0, c0, r1, c1))
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub flip_prob: f64,
}

/// Random crop (re-sampled until the whole patch survives, with a centered
/// fallback) followed by a horizontal flip. Image and mask move together.
pub fn augment(
    sample: &SyntheticSample,
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
) -> Result<SyntheticSample> {
    let s = sample.size;
    let c = cfg.crop_size;
    if c > s {
        return Err(CoreError::Config(format!(
            "crop_size {c} exceeds image size {s}"
        )));
    }
    if c == 0 {
        return Err(CoreError::Config("crop_size must be >= 1".into()));
    }
    let bbox = mask_bbox(&sample.mask, s);
    let max_off = s - c;

    let (top, left) = if max_off == 0 {
        (0, 0)
    } else {
        let fits = |top: usize, left: usize| match bbox {
            Some((r0, c0, r1, c1)) => {
                r0 >= top && c0 >= left && r1 < top + c && c1 < left + c
            }
            None => true,
        };
        let mut chosen = None;
        for _ in 0..100 {
            let t = rng::below(rng, max_off + 1);
            let l = rng::below(rng, max_off + 1);
            if fits(t, l) {
                chosen = Some((t, l));
                break;
            }
        }
        chosen.unwrap_or_else(|| match bbox {
            Some((r0, c0, r1, c1)) => {
                let center = |lo: usize, hi: usize| -> usize {
                    let mid = (lo + hi + 1) / 2;
                    mid.saturating_sub(c / 2).min(max_off)
                };
                (center(r0, r1), center(c0, c1))
            }
            None => (0, 0),
        })
    };

    let mut image = vec![0.0f32; 3 * c * c];
    let mut mask = vec![0u8; c * c];
    for ch in 0..3 {
        for y in 0..c {
            let src = &sample.image[ch * s * s + (top + y) * s + left..][..c];
            image[ch * c * c + y * c..ch * c * c + (y + 1) * c].copy_from_slice(src);
        }
    }
    for y in 0..c {
        mask[y * c..(y + 1) * c].copy_from_slice(&sample.mask[(top + y) * s + left..][..c]);
    }

    let flip = cfg.flip_prob > 0.0 && rng::uniform(rng) < cfg.flip_prob;
    if flip {
        for ch in 0..3 {
            for y in 0..c {
                image[ch * c * c + y * c..ch * c * c + (y + 1) * c].reverse();
            }
        }
        for y in 0..c {
            mask[y * c..(y + 1) * c].reverse();
        }
    }

    let patch_origin = mask_bbox(&mask, c)
        .map(|(r0, c0, _, _)| (r0, c0))
        .unwrap_or((0, 0));
    Ok(SyntheticSample {
        image,
        label: sample.label,
        mask,
        patch_origin,
        size: c,
    })
}

/// Mirror the sample horizontally (used by tests; augmentation draws its own
/// coin).
pub fn hflip(sample: &SyntheticSample) -> SyntheticSample {
    let s = sample.size;
    let mut out = sample.clone();
    for ch in 0..3 {
        for y in 0..s {
            out.image[ch * s * s + y * s..ch * s * s + (y + 1) * s].reverse();
        }
    }
    for y in 0..s {
        out.mask[y * s..(y + 1) * s].reverse();
    }
    out.patch_origin = mask_bbox(&out.mask, s)
        .map(|(r0, c0, _, _)| (r0, c0))
        .unwrap_or((0, 0));
    out
}

#[derive(Clone, Copy, Debug)]
pub struct EvalTransform {
    pub resize_to: usize,
    pub center_crop: usize,
}

/// Deterministic bilinear resize then central crop; the mask follows the
/// image and is re-binarized at 0.5.
pub fn eval_transform(sample: &SyntheticSample, cfg: &EvalTransform) -> Result<SyntheticSample> {
    if cfg.center_crop > cfg.resize_to {
        return Err(CoreError::Config(format!(
            "center_crop {} exceeds resize_to {}",
            cfg.center_crop, cfg.resize_to
        )));
    }
    if cfg.resize_to == 0 {
        return Err(CoreError::Config("resize_to must be >= 1".into()));
    }
    let s = sample.size;
    let r = cfg.resize_to;
    let c = cfg.center_crop;

    let mut resized = vec![0.0f32; 3 * r * r];
    for ch in 0..3 {
        let plane = viz::resize_plane(&sample.image[ch * s * s..(ch + 1) * s * s], s, s, r, r);
        resized[ch * r * r..(ch + 1) * r * r].copy_from_slice(&plane);
    }
    let mask_f: Vec<f32> = sample.mask.iter().map(|&b| b as f32).collect();
    let mask_r = viz::resize_plane(&mask_f, s, s, r, r);

    let off = (r - c) / 2;
    let mut image = vec![0.0f32; 3 * c * c];
    let mut mask = vec![0u8; c * c];
    for ch in 0..3 {
        for y in 0..c {
            let src = &resized[ch * r * r + (off + y) * r + off..][..c];
            image[ch * c * c + y * c..ch * c * c + (y + 1) * c].copy_from_slice(src);
        }
    }
    for y in 0..c {
        for x in 0..c {
            mask[y * c + x] = (mask_r[(off + y) * r + off + x] >= 0.5) as u8;
        }
    }
    let patch_origin = mask_bbox(&mask, c)
        .map(|(r0, c0, _, _)| (r0, c0))
        .unwrap_or((0, 0));
    Ok(SyntheticSample {
        image,
        label: sample.label,
        mask,
        patch_origin,
        size: c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            classes: 4,
            image_size: 32,
            patch_size: 6,
            n_train: 8,
            n_val: 4,
            n_test: 4,
            background_noise_scale: 1.0,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = tiny_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.patch_origin, y.patch_origin);
            assert!(x.image.iter().zip(&y.image).all(|(u, v)| u == v));
            assert_eq!(x.mask, y.mask);
        }
    }

    #[test]
    fn masks_are_exact_squares() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let p2 = spec.patch_size * spec.patch_size;
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert_eq!(s.mask_popcount(), p2);
            let (r, c) = s.patch_origin;
            assert!(r + spec.patch_size <= spec.image_size);
            assert!(c + spec.patch_size <= spec.image_size);
            for dy in 0..spec.patch_size {
                for dx in 0..spec.patch_size {
                    assert_eq!(s.mask[(r + dy) * spec.image_size + (c + dx)], 1);
                }
            }
        }
    }

    #[test]
    fn glyph_only_alters_masked_pixels() {
        let spec = tiny_spec();
        let glyph_set = glyphs(&spec);
        for idx in 0..6 {
            let sample = generate_sample(&spec, &glyph_set, idx);
            let bg = background(&spec, idx);
            let s = spec.image_size;
            for pix in 0..s * s {
                for ch in 0..3 {
                    let same = sample.image[ch * s * s + pix] == bg[ch * s * s + pix];
                    if sample.mask[pix] == 0 {
                        assert!(same, "pixel {pix} outside mask changed");
                    }
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = tiny_spec();
        spec.patch_size = 9; // > 32/4
        assert!(matches!(generate(&spec), Err(CoreError::Config(_))));
        let mut spec = tiny_spec();
        spec.n_val = 3; // below class count
        assert!(spec.validate().is_err());
    }

    #[test]
    fn glyph_patterns_are_separated() {
        let spec = DatasetSpec::default();
        let gs = glyphs(&spec);
        let p2 = spec.patch_size * spec.patch_size;
        for i in 0..gs.len() {
            for j in 0..i {
                assert!(hamming(&gs[i].pattern, &gs[j].pattern) >= p2 / 4);
            }
        }
    }

    #[test]
    fn augment_degenerate_config_is_identity() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let cfg = AugmentConfig {
            crop_size: spec.image_size,
            flip_prob: 0.0,
        };
        let mut rng = rng::stream(1, StreamKind::Augment, 0);
        let out = augment(&ds.train[0], &mut rng, &cfg).unwrap();
        assert!(out.image.iter().zip(&ds.train[0].image).all(|(a, b)| a == b));
        assert_eq!(out.mask, ds.train[0].mask);
        assert_eq!(out.patch_origin, ds.train[0].patch_origin);
    }

    #[test]
    fn flip_is_an_involution() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let s0 = &ds.train[1];
        let once = hflip(s0);
        let twice = hflip(&once);
        assert!(twice.image.iter().zip(&s0.image).all(|(a, b)| a == b));
        assert_eq!(twice.mask, s0.mask);
        assert_eq!(twice.patch_origin, s0.patch_origin);
    }

    #[test]
    fn augment_is_deterministic_under_a_seeded_rng() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let cfg = AugmentConfig {
            crop_size: 24,
            flip_prob: 0.5,
        };
        let run = || {
            let mut rng = rng::stream(3, StreamKind::Augment, 42);
            augment(&ds.train[2], &mut rng, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.image.iter().zip(&b.image).all(|(x, y)| x == y));
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn augment_preserves_whole_patch() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let cfg = AugmentConfig {
            crop_size: 16,
            flip_prob: 0.5,
        };
        let p2 = spec.patch_size * spec.patch_size;
        for (i, sample) in ds.train.iter().enumerate() {
            let mut rng = rng::stream(9, StreamKind::Augment, i as u64);
            let out = augment(sample, &mut rng, &cfg).unwrap();
            assert_eq!(out.mask_popcount(), p2, "sample {i}");
            assert_eq!(out.size, 16);
        }
    }

    #[test]
    fn augment_rejects_oversized_crop() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let cfg = AugmentConfig {
            crop_size: spec.image_size + 1,
            flip_prob: 0.0,
        };
        let mut rng = rng::stream(1, StreamKind::Augment, 0);
        assert!(matches!(
            augment(&ds.train[0], &mut rng, &cfg),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn eval_transform_identity() {
        let spec = tiny_spec();
        let ds = generate(&spec).unwrap();
        let cfg = EvalTransform {
            resize_to: spec.image_size,
            center_crop: spec.image_size,
        };
        let out = eval_transform(&ds.test[0], &cfg).unwrap();
        assert!(out.image.iter().zip(&ds.test[0].image).all(|(a, b)| a == b));
        assert_eq!(out.mask, ds.test[0].mask);
    }

    #[test]
    fn eval_transform_constant_preservation() {
        let sample = SyntheticSample {
            image: vec![0.3; 3 * 8 * 8],
            label: 0,
            mask: vec![0; 64],
            patch_origin: (0, 0),
            size: 8,
        };
        let out = eval_transform(
            &sample,
            &EvalTransform {
                resize_to: 16,
                center_crop: 16,
            },
        )
        .unwrap();
        assert!(out.image.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }
}
