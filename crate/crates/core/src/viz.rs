//! Attention-map inspection: bilinear upsampling, top-fraction thresholding,
//! boundary tracing into closed contours, overlay rasterization, and the
//! pointing-game / IoU localization metrics.
//!
//! Conventions frozen for reproducibility: bilinear interpolation uses
//! half-pixel centers; thresholding and argmax break ties by ascending
//! row-major index; contours are closed axis-aligned polylines on the
//! half-integer corner grid, oriented with the mask interior on the left.

use crate::error::{CoreError, Result};
use crate::graph::{Real, Shape};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Bilinear resample of one plane with half-pixel-center alignment:
/// src_coord = (dst + 0.5) * src/dst - 0.5, clamped to the source.
/// Handles both up- and downscaling.
pub fn resize_plane<T: Real>(src: &[T], h: usize, w: usize, th: usize, tw: usize) -> Vec<T> {
    debug_assert_eq!(src.len(), h * w);
    if th == h && tw == w {
        return src.to_vec();
    }
    let mut out = vec![T::zero(); th * tw];
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for y in 0..th {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = crate::graph::real::<T>(fy - y0 as f64);
        let one = T::one();
        for x in 0..tw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = crate::graph::real::<T>(fx - x0 as f64);
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let top = v00 * (one - dx) + v01 * dx;
            let bot = v10 * (one - dx) + v11 * dx;
            out[y * tw + x] = top * (one - dy) + bot * dy;
        }
    }
    out
}

/// Upsample an N x 1 x h x w map to N x 1 x H x W. Downscaling is rejected.
pub fn upsample_bilinear<T: Real>(
    map: &[T],
    shape: Shape,
    target: (usize, usize),
) -> Result<(Vec<T>, Shape)> {
    let (n, c, h, w) = (shape.n(), shape.c(), shape.h(), shape.w());
    if c != 1 {
        return Err(CoreError::Dim {
            op: "upsample_bilinear",
            axis: "channels",
            expected: 1,
            got: c,
        });
    }
    if map.len() != shape.numel() {
        return Err(CoreError::Dim {
            op: "upsample_bilinear",
            axis: "numel",
            expected: shape.numel(),
            got: map.len(),
        });
    }
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(CoreError::Argument(format!(
            "upsample_bilinear cannot downscale: {h}x{w} -> {th}x{tw}"
        )));
    }
    let mut out = vec![T::zero(); n * th * tw];
    for s in 0..n {
        let plane = resize_plane(&map[s * h * w..(s + 1) * h * w], h, w, th, tw);
        out[s * th * tw..(s + 1) * th * tw].copy_from_slice(&plane);
    }
    Ok((out, Shape::nchw(n, 1, th, tw)))
}

/// Dense binary mask over an H x W pixel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_bytes(bytes: &[u8], h: usize, w: usize) -> Result<Self> {
        if bytes.len() != h * w {
            return Err(CoreError::Dim {
                op: "mask_from_bytes",
                axis: "numel",
                expected: h * w,
                got: bytes.len(),
            });
        }
        Ok(BinaryMask {
            h,
            w,
            bits: bytes.iter().map(|&b| b != 0).collect(),
        })
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Mask of the k = ceil(fraction * H * W) highest-valued pixels. Ties break
/// toward the smaller row-major index.
pub fn top_fraction_mask<T: Real>(
    map: &[T],
    h: usize,
    w: usize,
    fraction: f64,
) -> Result<BinaryMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Argument(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if map.len() != h * w {
        return Err(CoreError::Dim {
            op: "top_fraction_mask",
            axis: "numel",
            expected: h * w,
            got: map.len(),
        });
    }
    let k = (num_traits::Float::ceil(fraction * (h * w) as f64) as usize).min(h * w);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| {
        map[b]
            .partial_cmp(&map[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut mask = BinaryMask::new(h, w);
    for &idx in order.iter().take(k) {
        mask.bits[idx] = true;
    }
    Ok(mask)
}

/// Closed axis-aligned polyline on the half-integer grid. `points` repeats
/// the first vertex at the end; consecutive vertices differ by one unit step.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    pub points: Vec<(f64, f64)>,
}

impl Contour {
    pub fn segments(&self) -> usize {
        self.points.len().saturating_sub(1)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContourSet {
    pub contours: Vec<Contour>,
}

impl ContourSet {
    pub fn total_boundary_length(&self) -> usize {
        self.contours.iter().map(Contour::segments).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.contours.is_empty()
    }
}

// Headings on the corner grid, (d_row, d_col).
const HEADINGS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, 1), (0, -1)]; // N S E W
const N: usize = 0;
const S: usize = 1;
const E: usize = 2;
const W: usize = 3;

fn turn_left(h: usize) -> usize {
    match h {
        E => N,
        N => W,
        W => S,
        S => E,
        _ => unreachable!(),
    }
}

fn turn_right(h: usize) -> usize {
    match h {
        E => S,
        S => W,
        W => N,
        N => E,
        _ => unreachable!(),
    }
}

/// Trace the boundaries between 1-pixels and 0-pixels (or the image border)
/// as closed loops with the mask interior on the left. At saddle corners the
/// walk turns left first, which keeps diagonal-only neighbors in separate
/// loops.
pub fn trace_contours(mask: &BinaryMask) -> ContourSet {
    let (h, w) = (mask.h, mask.w);
    let cw = w + 1; // corner-grid width
    // outgoing[corner][heading] = true if a boundary edge leaves this corner
    // with that heading.
    let mut outgoing = vec![[false; 4]; (h + 1) * cw];
    let mut edge_list: Vec<(usize, usize)> = Vec::new(); // (corner, heading)
    let is_set = |r: isize, c: isize| -> bool {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask.get(r as usize, c as usize)
    };
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            // (neighbor dy,dx) -> edge (corner, heading), interior on the left
            let sides = [
                ((-1, 0), (y, x + 1), W),
                ((1, 0), (y + 1, x), E),
                ((0, -1), (y, x), S),
                ((0, 1), (y + 1, x + 1), N),
            ];
            for ((dy, dx), (cr, cc), heading) in sides {
                if !is_set(yi + dy, xi + dx) {
                    let corner = cr * cw + cc;
                    outgoing[corner][heading] = true;
                    edge_list.push((corner, heading));
                }
            }
        }
    }

    let advance = |corner: usize, heading: usize| -> usize {
        let (dr, dc) = HEADINGS[heading];
        ((corner / cw) as isize + dr) as usize * cw + ((corner % cw) as isize + dc) as usize
    };

    let mut used = vec![[false; 4]; (h + 1) * cw];
    let mut contours = Vec::new();
    for &(start_corner, start_heading) in &edge_list {
        if used[start_corner][start_heading] {
            continue;
        }
        let mut points = Vec::new();
        let to_point = |corner: usize| -> (f64, f64) {
            ((corner / cw) as f64 - 0.5, (corner % cw) as f64 - 0.5)
        };
        let (mut corner, mut heading) = (start_corner, start_heading);
        points.push(to_point(corner));
        loop {
            used[corner][heading] = true;
            corner = advance(corner, heading);
            points.push(to_point(corner));
            // left turn first, then straight, then right
            let next = [turn_left(heading), heading, turn_right(heading)]
                .into_iter()
                .find(|&cand| outgoing[corner][cand]);
            match next {
                Some(cand) if corner == start_corner && cand == start_heading => break,
                Some(cand) => heading = cand,
                None => break, // malformed mask; close what we have
            }
        }
        contours.push(Contour { points });
    }
    ContourSet { contours }
}

/// Quantize a [0,1] image to 8-bit and draw the contours in pure green. The
/// pixel on the interior side of every boundary segment is painted, giving a
/// one-pixel outline just inside the traced region. Returns interleaved RGB.
pub fn render_overlay(image: &[f32], size: usize, contours: &ContourSet) -> Result<Vec<u8>> {
    if image.len() != 3 * size * size {
        return Err(CoreError::Dim {
            op: "render_overlay",
            axis: "numel",
            expected: 3 * size * size,
            got: image.len(),
        });
    }
    let mut rgb = vec![0u8; size * size * 3];
    for pix in 0..size * size {
        for ch in 0..3 {
            let v = image[ch * size * size + pix].clamp(0.0, 1.0);
            rgb[pix * 3 + ch] = num_traits::Float::round(v * 255.0) as u8;
        }
    }
    for contour in &contours.contours {
        for pair in contour.points.windows(2) {
            let (r0, c0) = pair[0];
            let (r1, c1) = pair[1];
            // back to corner indices
            let (cr, cc) = ((r0 + 0.5) as isize, (c0 + 0.5) as isize);
            let (dr, dc) = ((r1 - r0) as isize, (c1 - c0) as isize);
            // interior pixel left of travel
            let (pr, pc) = match (dr, dc) {
                (0, 1) => (cr - 1, cc),      // east
                (0, -1) => (cr, cc - 1),     // west
                (1, 0) => (cr, cc),          // south
                (-1, 0) => (cr - 1, cc - 1), // north
                _ => continue,
            };
            if pr >= 0 && pc >= 0 && (pr as usize) < size && (pc as usize) < size {
                let base = (pr as usize * size + pc as usize) * 3;
                rgb[base] = 0;
                rgb[base + 1] = 255;
                rgb[base + 2] = 0;
            }
        }
    }
    Ok(rgb)
}

/// Binary PPM (P6, maxval 255) encoding of an interleaved RGB buffer.
pub fn encode_ppm(rgb: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    if rgb.len() != 3 * w * h {
        return Err(CoreError::Dim {
            op: "encode_ppm",
            axis: "numel",
            expected: 3 * w * h,
            got: rgb.len(),
        });
    }
    let header = format!("P6\n{w} {h}\n255\n");
    let mut out = Vec::with_capacity(header.len() + rgb.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(rgb);
    Ok(out)
}

/// True when the argmax pixel (row-major tie break) falls inside `gt`.
pub fn pointing_game<T: Real>(map: &[T], h: usize, w: usize, gt: &BinaryMask) -> Result<bool> {
    if gt.h != h || gt.w != w {
        return Err(CoreError::Dim {
            op: "pointing_game",
            axis: "height",
            expected: h,
            got: gt.h,
        });
    }
    if map.len() != h * w {
        return Err(CoreError::Dim {
            op: "pointing_game",
            axis: "numel",
            expected: h * w,
            got: map.len(),
        });
    }
    let mut best = 0usize;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    Ok(gt.bits[best])
}

/// Intersection over union; 0 when both masks are empty.
pub fn attention_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(CoreError::Dim {
            op: "attention_iou",
            axis: "height",
            expected: gt.h,
            got: pred.h,
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of total map mass in the outer one-pixel ring. Reported as a
/// border-artifact statistic; nothing is asserted against it.
pub fn border_mass<T: Real>(map: &[T], h: usize, w: usize) -> f64 {
    debug_assert_eq!(map.len(), h * w);
    let mut total = 0.0f64;
    let mut ring = 0.0f64;
    for r in 0..h {
        for c in 0..w {
            let v = map[r * w + c].to_f64().unwrap_or(0.0);
            total += v;
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                ring += v;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        ring / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_constant_and_single_source() {
        let (out, shape) =
            upsample_bilinear(&[0.7f64; 4], Shape::nchw(1, 1, 2, 2), (8, 8)).unwrap();
        assert_eq!(shape, Shape::nchw(1, 1, 8, 8));
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let (out, _) = upsample_bilinear(&[0.3f64], Shape::nchw(1, 1, 1, 1), (8, 8)).unwrap();
        assert!(out.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn upsample_rejects_downscale() {
        let err = upsample_bilinear(&[0.0f64; 16], Shape::nchw(1, 1, 4, 4), (2, 8)).unwrap_err();
        assert!(matches!(err, CoreError::Argument(_)));
    }

    #[test]
    fn top_fraction_full_and_largest() {
        let mask = top_fraction_mask(&[0.1f64, 0.9, 0.4, 0.6], 2, 2, 1.0).unwrap();
        assert_eq!(mask.popcount(), 4);

        let map = [0.1f64, 0.9, 0.4, 0.6, 0.2, 0.8];
        let mask = top_fraction_mask(&map, 2, 3, 0.5).unwrap();
        assert_eq!(mask.popcount(), 3);
        assert!(mask.bits[1] && mask.bits[5] && mask.bits[3]);
    }

    #[test]
    fn top_fraction_tie_breaks_row_major() {
        let map = [0.5f64; 12];
        let mask = top_fraction_mask(&map, 3, 4, 5.0 / 12.0).unwrap();
        assert_eq!(mask.popcount(), 5);
        assert!(mask.bits[..5].iter().all(|&b| b));
        assert!(mask.bits[5..].iter().all(|&b| !b));
    }

    #[test]
    fn top_fraction_rejects_bad_fraction() {
        for f in [0.0, -0.5, 1.5] {
            assert!(matches!(
                top_fraction_mask(&[0.0f64; 4], 2, 2, f),
                Err(CoreError::Argument(_))
            ));
        }
    }

    #[test]
    fn single_pixel_contour_is_a_unit_square() {
        let mut mask = BinaryMask::new(4, 4);
        mask.bits[1 * 4 + 2] = true;
        let set = trace_contours(&mask);
        assert_eq!(set.contours.len(), 1);
        assert_eq!(set.contours[0].segments(), 4);
        let first = set.contours[0].points[0];
        let last = *set.contours[0].points.last().unwrap();
        assert_eq!(first, last);
        for pt in &set.contours[0].points {
            assert!(pt.0 == 0.5 || pt.0 == 1.5);
            assert!(pt.1 == 1.5 || pt.1 == 2.5);
        }
    }

    #[test]
    fn all_ones_contour_follows_border() {
        let mut mask = BinaryMask::new(3, 5);
        mask.bits.iter_mut().for_each(|b| *b = true);
        let set = trace_contours(&mask);
        assert_eq!(set.contours.len(), 1);
        assert_eq!(set.contours[0].segments(), 2 * (3 + 5));
    }

    #[test]
    fn empty_mask_has_no_contours() {
        let set = trace_contours(&BinaryMask::new(4, 4));
        assert!(set.is_empty());
        assert_eq!(set.total_boundary_length(), 0);
    }

    #[test]
    fn diagonal_pixels_stay_separate_loops() {
        let mut mask = BinaryMask::new(2, 2);
        mask.bits[0] = true;
        mask.bits[3] = true;
        let set = trace_contours(&mask);
        assert_eq!(set.contours.len(), 2);
        assert_eq!(set.total_boundary_length(), 8);
    }

    #[test]
    fn pointing_game_examples() {
        let mut gt = BinaryMask::new(2, 2);
        gt.bits[3] = true;
        assert!(pointing_game(&[0.0f64, 0.1, 0.2, 0.9], 2, 2, &gt).unwrap());
        assert!(!pointing_game(&[0.9f64, 0.1, 0.2, 0.3], 2, 2, &gt).unwrap());
        // constant map: argmax ties to pixel 0
        assert!(!pointing_game(&[0.5f64; 4], 2, 2, &gt).unwrap());
        let mut gt0 = BinaryMask::new(2, 2);
        gt0.bits[0] = true;
        assert!(pointing_game(&[0.5f64; 4], 2, 2, &gt0).unwrap());
    }

    #[test]
    fn iou_examples() {
        let mut a = BinaryMask::new(2, 2);
        a.bits[0] = true;
        a.bits[1] = true;
        assert_eq!(attention_iou(&a, &a).unwrap(), 1.0);

        let mut b = BinaryMask::new(2, 2);
        b.bits[2] = true;
        b.bits[3] = true;
        assert_eq!(attention_iou(&a, &b).unwrap(), 0.0);

        // equal areas overlapping half: IoU = 1/3
        let mut c = BinaryMask::new(2, 2);
        c.bits[1] = true;
        c.bits[2] = true;
        assert!((attention_iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        assert_eq!(
            attention_iou(&BinaryMask::new(2, 2), &BinaryMask::new(2, 2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn ppm_header_and_identity() {
        let rgb = vec![1u8, 2, 3, 4, 5, 6];
        let ppm = encode_ppm(&rgb, 2, 1).unwrap();
        assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&ppm[ppm.len() - 6..], &rgb[..]);
    }

    #[test]
    fn overlay_empty_contours_is_plain_quantization() {
        let image = vec![0.5f32; 3 * 4];
        let rgb = render_overlay(&image, 2, &ContourSet::default()).unwrap();
        assert!(rgb.iter().all(|&b| b == 128));
    }

    #[test]
    fn border_mass_constant_map() {
        let v = border_mass(&[1.0f64; 16], 4, 4);
        assert!((v - 12.0 / 16.0).abs() < 1e-12);
    }
}
