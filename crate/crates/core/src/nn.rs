//! Dense CHW kernels (`f64`) with hand-written backward passes.
//!
//! Every buffer is a flat slice in channel-major, row-major order. Backward
//! functions accumulate (`+=`) into their gradient outputs.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_shape(&self, input: Shape) -> Shape {
        let oh = (input.h + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        let ow = (input.w + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        Shape::new(self.out_c, oh, ow)
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }

    /// Output column range `[lo, hi)` whose input column `o * stride + k - pad`
    /// lands inside `[0, width)`.
    #[inline]
    fn valid_range(&self, k: usize, width: usize, out_w: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // o * s + k - pad <= width - 1
        let limit = width + self.pad;
        let hi = if limit > k { ((limit - k - 1) / s + 1).min(out_w) } else { 0 };
        (lo.min(hi), hi)
    }
}

pub fn conv_forward(
    geom: &ConvGeom,
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) -> Shape {
    let os = geom.out_shape(in_shape);
    debug_assert_eq!(input.len(), in_shape.len());
    debug_assert_eq!(out.len(), os.len());
    let k = geom.kernel;
    let s = geom.stride;
    for oc in 0..geom.out_c {
        let plane = &mut out[oc * os.plane()..(oc + 1) * os.plane()];
        plane.fill(bias[oc]);
        for ic in 0..geom.in_c {
            let src = &input[ic * in_shape.plane()..(ic + 1) * in_shape.plane()];
            let wbase = (oc * geom.in_c + ic) * k * k;
            for ky in 0..k {
                let (oy_lo, oy_hi) = geom.valid_range(ky, in_shape.h, os.h);
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = geom.valid_range(kx, in_shape.w, os.w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geom.pad;
                        let row = &src[iy * in_shape.w..(iy + 1) * in_shape.w];
                        let dst = &mut plane[oy * os.w..(oy + 1) * os.w];
                        if s == 1 {
                            let off = kx as isize - geom.pad as isize;
                            let src_row = &row[(ox_lo as isize + off) as usize..(ox_hi as isize + off) as usize];
                            for (d, &x) in dst[ox_lo..ox_hi].iter_mut().zip(src_row) {
                                *d += wv * x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] += wv * row[ox * s + kx - geom.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    os
}

/// Accumulates weight, bias and (optionally) input gradients.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    geom: &ConvGeom,
    input: &[f64],
    in_shape: Shape,
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let os = geom.out_shape(in_shape);
    let k = geom.kernel;
    let s = geom.stride;
    for oc in 0..geom.out_c {
        let gplane = &grad_out[oc * os.plane()..(oc + 1) * os.plane()];
        grad_bias[oc] += gplane.iter().sum::<f64>();
        for ic in 0..geom.in_c {
            let src = &input[ic * in_shape.plane()..(ic + 1) * in_shape.plane()];
            let wbase = (oc * geom.in_c + ic) * k * k;
            for ky in 0..k {
                let (oy_lo, oy_hi) = geom.valid_range(ky, in_shape.h, os.h);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = geom.valid_range(kx, in_shape.w, os.w);
                    let wv = weight[wbase + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - geom.pad;
                        let g = &gplane[oy * os.w..(oy + 1) * os.w];
                        let row = iy * in_shape.w;
                        for ox in ox_lo..ox_hi {
                            let ix = ox * s + kx - geom.pad;
                            acc += g[ox] * src[row + ix];
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            if wv != 0.0 {
                                let gi = &mut gi[ic * in_shape.plane() + row..ic * in_shape.plane() + row + in_shape.w];
                                for ox in ox_lo..ox_hi {
                                    gi[ox * s + kx - geom.pad] += wv * g[ox];
                                }
                            }
                        }
                    }
                    grad_weight[wbase + ky * k + kx] += acc;
                }
            }
        }
    }
}

/// 3x3, stride 2, padding 1 max pooling. Returns the output shape and the
/// flat input index chosen for every output element.
pub fn max_pool_forward(input: &[f64], shape: Shape, out: &mut Vec<f64>, argmax: &mut Vec<usize>) -> Shape {
    let oh = (shape.h + 2 - 3) / 2 + 1;
    let ow = (shape.w + 2 - 3) / 2 + 1;
    let os = Shape::new(shape.c, oh, ow);
    out.clear();
    argmax.clear();
    for c in 0..shape.c {
        let base = c * shape.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for dy in 0..3 {
                    let iy = (oy * 2 + dy) as isize - 1;
                    if iy < 0 || iy >= shape.h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = (ox * 2 + dx) as isize - 1;
                        if ix < 0 || ix >= shape.w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * shape.w + ix as usize;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    os
}

pub fn max_pool_backward(argmax: &[usize], grad_out: &[f64], grad_input: &mut [f64]) {
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_input[idx] += g;
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// `grad *= (pre > 0)`
pub fn relu_backward_inplace(pre: &[f64], grad: &mut [f64]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, plus its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = softmax(logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    p[label] -= 1.0;
    (loss, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], s: Shape, w: &[f64], b: &[f64]) -> Vec<f64> {
        let os = g.out_shape(s);
        let mut out = vec![0.0; os.len()];
        for oc in 0..g.out_c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = b[oc];
                    for ic in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w[((oc * g.in_c + ic) * g.kernel + ky) * g.kernel + kx]
                                    * x[ic * s.plane() + iy as usize * s.w + ix as usize];
                            }
                        }
                    }
                    out[oc * os.plane() + oy * os.w + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 * 0.731 + salt).sin() * 1.3)).collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 7, 5), (3, 2, 1, 8, 9), (1, 2, 0, 6, 6), (7, 2, 3, 11, 10), (3, 1, 0, 4, 4)] {
            let g = ConvGeom { in_c: 2, out_c: 3, kernel: k, stride, pad };
            let s = Shape::new(2, h, w);
            let x = pseudo(s.len(), 0.3);
            let wt = pseudo(g.weight_len(), 1.7);
            let b = pseudo(3, 2.9);
            let mut out = vec![0.0; g.out_shape(s).len()];
            conv_forward(&g, &x, s, &wt, &b, &mut out);
            let expect = naive_conv(&g, &x, s, &wt, &b);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeom { in_c: 2, out_c: 2, kernel: 3, stride: 2, pad: 1 };
        let s = Shape::new(2, 5, 6);
        let x = pseudo(s.len(), 0.1);
        let wt = pseudo(g.weight_len(), 0.5);
        let b = pseudo(2, 0.9);
        let os = g.out_shape(s);
        let gout = pseudo(os.len(), 2.2);
        let objective = |x: &[f64], wt: &[f64]| -> f64 {
            naive_conv(&g, x, s, wt, &b).iter().zip(&gout).map(|(a, c)| a * c).sum()
        };
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 2];
        let mut gx = vec![0.0; x.len()];
        conv_backward(&g, &x, s, &wt, &gout, &mut gw, &mut gb, Some(&mut gx));
        let eps = 1e-6;
        for i in 0..wt.len() {
            let mut p = wt.clone();
            p[i] += eps;
            let mut m = wt.clone();
            m[i] -= eps;
            let fd = (objective(&x, &p) - objective(&x, &m)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-6, "weight {i}: {fd} vs {}", gw[i]);
        }
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += eps;
            let mut m = x.clone();
            m[i] -= eps;
            let fd = (objective(&p, &wt) - objective(&m, &wt)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-6, "input {i}: {fd} vs {}", gx[i]);
        }
        assert!((gb[0] - gout[..os.plane()].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let s = Shape::new(1, 4, 4);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = Vec::new();
        let mut arg = Vec::new();
        let os = max_pool_forward(&x, s, &mut out, &mut arg);
        assert_eq!((os.h, os.w), (2, 2));
        assert_eq!(out, vec![5.0, 7.0, 13.0, 15.0]);
        let mut gi = vec![0.0; 16];
        max_pool_backward(&arg, &[1.0, 2.0, 3.0, 4.0], &mut gi);
        assert_eq!(gi[5], 1.0);
        assert_eq!(gi[15], 4.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (loss, grad) = cross_entropy(&[0.0, 0.0], 1);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!((grad[0] - 0.5).abs() < 1e-12 && (grad[1] + 0.5).abs() < 1e-12);
    }
}
