//! Brute-force oracle equivalence for every forward operation, on randomized
//! small instances in double precision. The oracles are direct loop
//! transcriptions of the definitions and share no code with the engine.

mod common;

use common::*;
use loupe_core::graph::{Graph, L1Mode, Shape};
use loupe_core::viz;

const CASES: usize = 120;
const TOL: f64 = 1e-6;

/// Direct quadruple-loop convolution (cross-correlation, zero padding).
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c_out * h * wd];
    for s in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((co * c_in + ci) * k + ky) * k + kx]
                                    * x[((s * c_in + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((s * c_out + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_summation() {
    for case in 0..CASES {
        let mut rng = test_rng(case as u64);
        let (k, pad) = if case % 3 == 0 { (1, 0) } else { (3, 1) };
        let n = dim(&mut rng, 1, 3);
        let c_in = dim(&mut rng, 1, 4);
        let c_out = dim(&mut rng, 1, 4);
        let h = dim(&mut rng, 1, 6);
        let w = dim(&mut rng, 1, 6);
        let x = random_vec(&mut rng, n * c_in * h * w);
        let wt = random_vec(&mut rng, c_out * c_in * k * k);
        let b = random_vec(&mut rng, c_out);

        let expected = conv_oracle(&x, &wt, &b, n, c_in, h, w, c_out, k, pad);

        let mut g = Graph::new();
        let xv = g.leaf(x, Shape::nchw(n, c_in, h, w), false).unwrap();
        let wv = g.leaf(wt, Shape::nchw(c_out, c_in, k, k), false).unwrap();
        let bv = g.leaf(b, Shape::vector(c_out), false).unwrap();
        let y = g.conv2d(xv, wv, bv, pad).unwrap();
        assert!(
            max_rel_err(g.data(y), &expected) < TOL,
            "case {case}: conv2d diverged from oracle"
        );
    }
}

#[test]
fn patch_embed_matches_direct_summation() {
    for case in 0..CASES {
        let mut rng = test_rng(1000 + case as u64);
        let p = dim(&mut rng, 1, 3);
        let n = dim(&mut rng, 1, 2);
        let c_in = dim(&mut rng, 1, 3);
        let c_out = dim(&mut rng, 1, 4);
        let grid = dim(&mut rng, 1, 4);
        let s = grid * p;
        let x = random_vec(&mut rng, n * c_in * s * s);
        let wt = random_vec(&mut rng, c_out * c_in * p * p);
        let b = random_vec(&mut rng, c_out);

        // independent oracle: direct block summation
        let mut expected = vec![0.0; n * c_out * grid * grid];
        for sn in 0..n {
            for co in 0..c_out {
                for gy in 0..grid {
                    for gx in 0..grid {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for dy in 0..p {
                                for dx in 0..p {
                                    acc += wt[((co * c_in + ci) * p + dy) * p + dx]
                                        * x[((sn * c_in + ci) * s + gy * p + dy) * s
                                            + gx * p
                                            + dx];
                                }
                            }
                        }
                        expected[((sn * c_out + co) * grid + gy) * grid + gx] = acc;
                    }
                }
            }
        }

        let mut g = Graph::new();
        let xv = g.leaf(x, Shape::nchw(n, c_in, s, s), false).unwrap();
        let wv = g.leaf(wt, Shape::nchw(c_out, c_in, p, p), false).unwrap();
        let bv = g.leaf(b, Shape::vector(c_out), false).unwrap();
        let y = g.patch_embed(xv, wv, bv, p).unwrap();
        assert!(max_rel_err(g.data(y), &expected) < TOL, "case {case}");
    }
}

#[test]
fn linear_matches_double_loop() {
    for case in 0..CASES {
        let mut rng = test_rng(2000 + case as u64);
        let n = dim(&mut rng, 1, 5);
        let d = dim(&mut rng, 1, 6);
        let k = dim(&mut rng, 1, 6);
        let x = random_vec(&mut rng, n * d);
        let w = random_vec(&mut rng, k * d);
        let b = random_vec(&mut rng, k);

        let mut expected = vec![0.0; n * k];
        for s in 0..n {
            for ko in 0..k {
                let mut acc = b[ko];
                for di in 0..d {
                    acc += w[ko * d + di] * x[s * d + di];
                }
                expected[s * k + ko] = acc;
            }
        }

        let mut g = Graph::new();
        let xv = g.leaf(x, Shape::matrix(n, d), false).unwrap();
        let wv = g.leaf(w, Shape::matrix(k, d), false).unwrap();
        let bv = g.leaf(b, Shape::vector(k), false).unwrap();
        let y = g.linear(xv, wv, bv).unwrap();
        assert!(max_rel_err(g.data(y), &expected) < TOL, "case {case}");
    }
}

#[test]
fn patch_merge_matches_gather_matmul_oracle() {
    for case in 0..CASES {
        let mut rng = test_rng(3000 + case as u64);
        let n = dim(&mut rng, 1, 2);
        let c = dim(&mut rng, 1, 4);
        let h = 2 * dim(&mut rng, 1, 3);
        let w = 2 * dim(&mut rng, 1, 3);
        let x = random_vec(&mut rng, n * c * h * w);
        let wt = random_vec(&mut rng, 2 * c * 4 * c);
        let b = random_vec(&mut rng, 2 * c);

        // oracle: explicit gather (TL,TR,BL,BR channel groups) then matmul
        let (ho, wo) = (h / 2, w / 2);
        let mut expected = vec![0.0; n * 2 * c * ho * wo];
        for s in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut gathered = Vec::with_capacity(4 * c);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        for ci in 0..c {
                            gathered
                                .push(x[((s * c + ci) * h + 2 * oy + dy) * w + 2 * ox + dx]);
                        }
                    }
                    for co in 0..2 * c {
                        let mut acc = b[co];
                        for (q, &gv) in gathered.iter().enumerate() {
                            acc += wt[co * 4 * c + q] * gv;
                        }
                        expected[((s * 2 * c + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }

        let mut g = Graph::new();
        let xv = g.leaf(x, Shape::nchw(n, c, h, w), false).unwrap();
        let wv = g.leaf(wt, Shape::matrix(2 * c, 4 * c), false).unwrap();
        let bv = g.leaf(b, Shape::vector(2 * c), false).unwrap();
        let y = g.patch_merge(xv, wv, bv).unwrap();
        assert!(max_rel_err(g.data(y), &expected) < TOL, "case {case}");
    }
}

#[test]
fn softmax_cross_entropy_matches_direct_formula() {
    for case in 0..CASES {
        let mut rng = test_rng(4000 + case as u64);
        let n = dim(&mut rng, 1, 5);
        let k = dim(&mut rng, 2, 8);
        let logits = random_vec_in(&mut rng, n * k, -5.0, 5.0);
        let labels: Vec<usize> = (0..n).map(|_| loupe_core::rng::below(&mut rng, k)).collect();

        // oracle: explicit softmax then negative log, no stabilization tricks
        let mut expected = 0.0;
        for (row, &label) in logits.chunks(k).zip(&labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let p = row[label].exp() / z;
            expected += -p.ln();
        }
        expected /= n as f64;

        let mut g = Graph::new();
        let lv = g.leaf(logits, Shape::matrix(n, k), false).unwrap();
        let loss = g.softmax_cross_entropy(lv, &labels).unwrap();
        let rel = (g.scalar(loss) - expected).abs() / expected.abs().max(1e-9);
        assert!(rel < 1e-9, "case {case}: {} vs {expected}", g.scalar(loss));
    }
}

#[test]
fn global_avg_pool_matches_direct_mean() {
    for case in 0..CASES {
        let mut rng = test_rng(5000 + case as u64);
        let n = dim(&mut rng, 1, 3);
        let c = dim(&mut rng, 1, 4);
        let h = dim(&mut rng, 1, 6);
        let w = dim(&mut rng, 1, 6);
        let x = random_vec(&mut rng, n * c * h * w);

        let mut expected = vec![0.0; n * c];
        for (i, e) in expected.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..h * w {
                acc += x[i * h * w + j];
            }
            *e = acc / (h * w) as f64;
        }

        let mut g = Graph::new();
        let xv = g.leaf(x, Shape::nchw(n, c, h, w), false).unwrap();
        let y = g.global_avg_pool(xv).unwrap();
        assert!(max_rel_err(g.data(y), &expected) < TOL, "case {case}");
    }
}

#[test]
fn l1_reduce_matches_absolute_sum() {
    for case in 0..CASES {
        let mut rng = test_rng(6000 + case as u64);
        let n = dim(&mut rng, 1, 4);
        let h = dim(&mut rng, 1, 6);
        let w = dim(&mut rng, 1, 6);
        let x = random_vec(&mut rng, n * h * w);

        let total: f64 = x.iter().map(|v| v.abs()).sum();
        let per_sample = total / n as f64;
        let per_element = total / (n * h * w) as f64;

        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), Shape::nchw(n, 1, h, w), false).unwrap();
        let a = g.l1_reduce(xv, L1Mode::SumPerSample).unwrap();
        let b = g.l1_reduce(xv, L1Mode::MeanPerElement).unwrap();
        assert!((g.scalar(a) - per_sample).abs() <= TOL * per_sample.abs().max(1.0));
        assert!((g.scalar(b) - per_element).abs() <= TOL * per_element.abs().max(1.0));
    }
}

#[test]
fn upsample_matches_independent_interpolation_oracle() {
    for case in 0..CASES {
        let mut rng = test_rng(7000 + case as u64);
        let h = dim(&mut rng, 1, 6);
        let w = dim(&mut rng, 1, 6);
        let th = h + dim(&mut rng, 0, 10);
        let tw = w + dim(&mut rng, 0, 10);
        let x = random_vec(&mut rng, h * w);

        // oracle: direct per-destination coordinate mapping
        let mut expected = vec![0.0; th * tw];
        for y in 0..th {
            for xx in 0..tw {
                let sy = ((y as f64 + 0.5) * h as f64 / th as f64 - 0.5)
                    .clamp(0.0, (h - 1) as f64);
                let sx = ((xx as f64 + 0.5) * w as f64 / tw as f64 - 0.5)
                    .clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                expected[y * tw + xx] = x[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + x[y0 * w + x1] * (1.0 - fy) * fx
                    + x[y1 * w + x0] * fy * (1.0 - fx)
                    + x[y1 * w + x1] * fy * fx;
            }
        }

        let (out, shape) =
            viz::upsample_bilinear(&x, Shape::nchw(1, 1, h, w), (th, tw)).unwrap();
        assert_eq!(shape, Shape::nchw(1, 1, th, tw));
        assert!(max_rel_err(&out, &expected) < 1e-9, "case {case}");

        // convexity: output bounded by source extrema
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h2), &v| {
                (l.min(v), h2.max(v))
            });
        assert!(out.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}

#[test]
fn contour_length_matches_adjacency_scan() {
    for case in 0..CASES {
        let mut rng = test_rng(8000 + case as u64);
        let h = dim(&mut rng, 1, 8);
        let w = dim(&mut rng, 1, 8);
        let density = loupe_core::rng::uniform(&mut rng);
        let mut mask = viz::BinaryMask::new(h, w);
        for b in mask.bits.iter_mut() {
            *b = loupe_core::rng::uniform(&mut rng) < density;
        }

        // oracle: count 1/0 and 1/border adjacencies directly
        let mut edges = 0usize;
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                for (dy, dx) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    let neighbor_set = ny >= 0
                        && nx >= 0
                        && (ny as usize) < h
                        && (nx as usize) < w
                        && mask.get(ny as usize, nx as usize);
                    if !neighbor_set {
                        edges += 1;
                    }
                }
            }
        }

        let set = viz::trace_contours(&mask);
        assert_eq!(set.total_boundary_length(), edges, "case {case}");
        if mask.popcount() > 0 {
            assert!(!set.is_empty());
        }
        // every contour closed, unit axis-aligned steps
        for contour in &set.contours {
            let pts = &contour.points;
            assert_eq!(pts.first(), pts.last());
            assert!(pts.len() >= 5);
            for pair in pts.windows(2) {
                let dr = (pair[1].0 - pair[0].0).abs();
                let dc = (pair[1].1 - pair[0].1).abs();
                assert_eq!(dr + dc, 1.0);
            }
        }
    }
}
