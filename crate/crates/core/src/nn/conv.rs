//! 2D convolution kernels (zero padding of half the kernel, stride 1 or 2)
//! with the matching gradient passes. Accumulation runs in f64 per output
//! element so numeric gradient checks stay meaningful at f32.

use rayon::prelude::*;

use super::grid::Grid4;

pub fn out_spatial(in_h: usize, in_w: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let pad = kernel / 2;
    (
        (in_h + 2 * pad - kernel) / stride + 1,
        (in_w + 2 * pad - kernel) / stride + 1,
    )
}

/// out[b, co] = bias[co] + sum_ci input[b, ci] * weight[co, ci]
pub fn forward(input: &Grid4, weight: &Grid4, bias: &Grid4, stride: usize, out: &mut Grid4) {
    let [_, in_c, in_h, in_w] = input.shape();
    let [out_c, w_in_c, kh, kw] = weight.shape();
    let [_, _, out_h, out_w] = out.shape();
    debug_assert_eq!(in_c, w_in_c);
    debug_assert_eq!(bias.len(), out_c);
    let pad = kh / 2;

    let plane = out_h * out_w;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(bc, out_plane)| {
            let b = bc / out_c;
            let co = bc % out_c;
            let bias_v = f64::from(bias.data()[co]);
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias_v;
                    for ci in 0..in_c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                acc += f64::from(input.at(b, ci, iy as usize, ix as usize))
                                    * f64::from(weight.at(co, ci, ky, kx));
                            }
                        }
                    }
                    out_plane[oy * out_w + ox] = acc as f32;
                }
            }
        });
    debug_assert!(out.all_finite(), "conv output not finite");
}

/// Accumulates d(loss)/d(input) into `grad_in`.
pub fn backward_input(grad_out: &Grid4, weight: &Grid4, stride: usize, grad_in: &mut Grid4) {
    let [batch, in_c, in_h, in_w] = grad_in.shape();
    let [out_c, _, kh, kw] = weight.shape();
    let [_, _, out_h, out_w] = grad_out.shape();
    let pad = kh / 2;
    debug_assert_eq!(batch, grad_out.shape()[0]);

    let plane = in_h * in_w;
    grad_in
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(bc, grad_plane)| {
            let b = bc / in_c;
            let ci = bc % in_c;
            for iy in 0..in_h {
                for ix in 0..in_w {
                    let mut acc = 0.0f64;
                    for ky in 0..kh {
                        let oy_num = iy + pad;
                        if oy_num < ky || (oy_num - ky) % stride != 0 {
                            continue;
                        }
                        let oy = (oy_num - ky) / stride;
                        if oy >= out_h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox_num = ix + pad;
                            if ox_num < kx || (ox_num - kx) % stride != 0 {
                                continue;
                            }
                            let ox = (ox_num - kx) / stride;
                            if ox >= out_w {
                                continue;
                            }
                            for co in 0..out_c {
                                acc += f64::from(grad_out.at(b, co, oy, ox))
                                    * f64::from(weight.at(co, ci, ky, kx));
                            }
                        }
                    }
                    grad_plane[iy * in_w + ix] += acc as f32;
                }
            }
        });
}

/// Accumulates d(loss)/d(weight) and d(loss)/d(bias).
pub fn backward_params(
    grad_out: &Grid4,
    input: &Grid4,
    stride: usize,
    grad_weight: &mut Grid4,
    grad_bias: &mut Grid4,
) {
    let [batch, in_c, in_h, in_w] = input.shape();
    let [_, _, kh, kw] = grad_weight.shape();
    let [_, _, out_h, out_w] = grad_out.shape();
    let pad = kh / 2;

    let w_plane = in_c * kh * kw;
    grad_weight
        .data_mut()
        .par_chunks_mut(w_plane)
        .zip(grad_bias.data_mut().par_chunks_mut(1))
        .enumerate()
        .for_each(|(co, (w_slice, b_slice))| {
            let mut bias_acc = 0.0f64;
            for b in 0..batch {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        bias_acc += f64::from(grad_out.at(b, co, oy, ox));
                    }
                }
            }
            b_slice[0] += bias_acc as f32;

            for ci in 0..in_c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0f64;
                        for b in 0..batch {
                            for oy in 0..out_h {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= in_h as isize {
                                    continue;
                                }
                                for ox in 0..out_w {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= in_w as isize {
                                        continue;
                                    }
                                    acc += f64::from(grad_out.at(b, co, oy, ox))
                                        * f64::from(input.at(b, ci, iy as usize, ix as usize));
                                }
                            }
                        }
                        w_slice[(ci * kh + ky) * kw + kx] += acc as f32;
                    }
                }
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct summation reference, no loop reordering tricks.
    fn conv_reference(input: &Grid4, weight: &Grid4, bias: &Grid4, stride: usize) -> Grid4 {
        let [batch, in_c, in_h, in_w] = input.shape();
        let [out_c, _, kh, kw] = weight.shape();
        let (out_h, out_w) = out_spatial(in_h, in_w, kh, stride);
        let pad = (kh / 2) as isize;
        let mut out = Grid4::zeros([batch, out_c, out_h, out_w]);
        for b in 0..batch {
            for co in 0..out_c {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = f64::from(bias.data()[co]);
                        for ci in 0..in_c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if iy >= 0
                                        && iy < in_h as isize
                                        && ix >= 0
                                        && ix < in_w as isize
                                    {
                                        acc += f64::from(input.at(b, ci, iy as usize, ix as usize))
                                            * f64::from(weight.at(co, ci, ky, kx));
                                    }
                                }
                            }
                        }
                        out.set(b, co, oy, ox, acc as f32);
                    }
                }
            }
        }
        out
    }

    fn random_grid(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Grid4 {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Grid4::from_vec(shape, data)
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_grid(&mut rng, [1, 3, 6, 7]);
        let mut weight = Grid4::zeros([3, 3, 1, 1]);
        for c in 0..3 {
            weight.set(c, c, 0, 0, 1.0);
        }
        let bias = Grid4::zeros([1, 3, 1, 1]);
        let mut out = Grid4::zeros(input.shape());
        forward(&input, &weight, &bias, 1, &mut out);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn forward_matches_direct_summation_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(in_c, out_c, k, stride, h, w) in
            &[(2, 4, 3, 1, 8, 9), (3, 2, 3, 2, 8, 8), (1, 5, 1, 1, 5, 6), (2, 3, 3, 2, 7, 5)]
        {
            let input = random_grid(&mut rng, [2, in_c, h, w]);
            let weight = random_grid(&mut rng, [out_c, in_c, k, k]);
            let bias = random_grid(&mut rng, [1, out_c, 1, 1]);
            let (oh, ow) = out_spatial(h, w, k, stride);
            let mut out = Grid4::zeros([2, out_c, oh, ow]);
            forward(&input, &weight, &bias, stride, &mut out);
            let reference = conv_reference(&input, &weight, &bias, stride);
            for (a, b) in out.data().iter().zip(reference.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }
}
