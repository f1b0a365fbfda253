//! Embedding network forward and backward passes.
//!
//! Each block is a 3x3 convolution with zero padding 1 and stride 1, ReLU,
//! then a 2x2 max-pool with stride 2 (argmax recorded for the backward
//! pass). The embedding is the flattened final pooled activation.

use super::{BlockLayout, ModelParams, Real};
use crate::datastore::ImageTensor;

pub(super) struct Trace<T> {
    /// Input activation of each block; `inputs[0]` is the image.
    inputs: Vec<Vec<T>>,
    /// Pre-ReLU convolution output per block.
    preact: Vec<Vec<T>>,
    /// Flat argmax indices (into the ReLU output) per pooled cell.
    argmax: Vec<Vec<usize>>,
}

fn image_to_scalars<T: Real>(image: &ImageTensor) -> Vec<T> {
    image.data.iter().map(|&v| T::from_f32(v)).collect()
}

fn conv3x3<T: Real>(
    input: &[T],
    weights: &[T],
    biases: &[T],
    layout: &BlockLayout,
    out: &mut [T],
) {
    let (h, w) = (layout.in_h, layout.in_w);
    let plane = h * w;
    for o in 0..layout.out_c {
        let zplane = &mut out[o * plane..(o + 1) * plane];
        zplane.fill(biases[o]);
        for i in 0..layout.in_c {
            let xplane = &input[i * plane..(i + 1) * plane];
            let wbase = (o * layout.in_c + i) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let y_lo = if dy < 0 { 1 } else { 0 };
                let y_hi = if dy > 0 { h - 1 } else { h };
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let x_lo = if dx < 0 { 1 } else { 0 };
                    let x_hi = if dx > 0 { w - 1 } else { w };
                    let wv = weights[wbase + ky * 3 + kx];
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let zrow = &mut zplane[y * w..y * w + w];
                        let xrow = &xplane[sy * w..sy * w + w];
                        for x in x_lo..x_hi {
                            let sx = (x as isize + dx) as usize;
                            zrow[x] += wv * xrow[sx];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pool; ties resolve to the first maximum in scan order.
fn maxpool2<T: Real>(
    activ: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut Vec<T>,
    argmax: &mut Vec<usize>,
) {
    let (oh, ow) = (h / 2, w / 2);
    out.clear();
    argmax.clear();
    out.reserve(channels * oh * ow);
    argmax.reserve(channels * oh * ow);
    for c in 0..channels {
        let plane = &activ[c * h * w..(c + 1) * h * w];
        for py in 0..oh {
            for px in 0..ow {
                let mut best_idx = (2 * py) * w + 2 * px;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * py + dy) * w + 2 * px + dx;
                    if plane[idx] > best {
                        best = plane[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(c * h * w + best_idx);
            }
        }
    }
}

fn run_blocks<T: Real>(
    params: &ModelParams<T>,
    image: &ImageTensor,
    mut trace: Option<&mut Trace<T>>,
) -> Vec<T> {
    let layouts = params.arch.layouts();
    let mut current: Vec<T> = image_to_scalars(image);
    let mut pooled = Vec::new();
    let mut argmax = Vec::new();
    for layout in &layouts {
        let mut z = vec![T::zero(); layout.out_c * layout.in_h * layout.in_w];
        conv3x3(
            &current,
            &params.data[layout.w_off..layout.b_off],
            &params.data[layout.b_off..layout.b_off + layout.out_c],
            layout,
            &mut z,
        );
        let relu: Vec<T> = z.iter().map(|&v| v.max(T::zero())).collect();
        maxpool2(
            &relu,
            layout.out_c,
            layout.in_h,
            layout.in_w,
            &mut pooled,
            &mut argmax,
        );
        if let Some(t) = trace.as_deref_mut() {
            t.inputs.push(current);
            t.preact.push(z);
            t.argmax.push(argmax.clone());
        }
        current = std::mem::take(&mut pooled);
    }
    current
}

/// Forward pass without bookkeeping; returns the embedding.
pub(super) fn embed_one<T: Real>(params: &ModelParams<T>, image: &ImageTensor) -> Vec<T> {
    run_blocks(params, image, None)
}

/// Forward pass recording everything the backward pass needs; returns the
/// trace and the embedding.
pub(super) fn forward_trace<T: Real>(
    params: &ModelParams<T>,
    image: &ImageTensor,
) -> (Trace<T>, Vec<T>) {
    let blocks = params.arch.blocks();
    let mut trace = Trace {
        inputs: Vec::with_capacity(blocks),
        preact: Vec::with_capacity(blocks),
        argmax: Vec::with_capacity(blocks),
    };
    let embedding = run_blocks(params, image, Some(&mut trace));
    (trace, embedding)
}

/// Accumulate d(loss)/d(params) into `grad` given d(loss)/d(embedding).
pub(super) fn backward_trace<T: Real>(
    params: &ModelParams<T>,
    trace: &Trace<T>,
    d_embedding: &[T],
    grad: &mut [T],
) {
    let layouts = params.arch.layouts();
    let mut d_pooled: Vec<T> = d_embedding.to_vec();

    for (b, layout) in layouts.iter().enumerate().rev() {
        let (h, w) = (layout.in_h, layout.in_w);
        let plane = h * w;
        let conv_len = layout.out_c * plane;

        // Pool backward: route each pooled gradient to its argmax cell,
        // then gate by ReLU (preact > 0).
        let mut d_z = vec![T::zero(); conv_len];
        for (j, &src) in trace.argmax[b].iter().enumerate() {
            d_z[src] += d_pooled[j];
        }
        let preact = &trace.preact[b];
        for (dz, &z) in d_z.iter_mut().zip(preact) {
            if z <= T::zero() {
                *dz = T::zero();
            }
        }

        let input = &trace.inputs[b];
        let mut d_input = vec![T::zero(); layout.in_c * plane];
        for o in 0..layout.out_c {
            let dzplane = &d_z[o * plane..(o + 1) * plane];
            let mut bias_acc = T::zero();
            for &v in dzplane {
                bias_acc += v;
            }
            grad[layout.b_off + o] += bias_acc;

            for i in 0..layout.in_c {
                let xplane = &input[i * plane..(i + 1) * plane];
                let dxplane = &mut d_input[i * plane..(i + 1) * plane];
                let wbase = layout.w_off + (o * layout.in_c + i) * 9;
                for ky in 0..3usize {
                    let dy = ky as isize - 1;
                    let y_lo = if dy < 0 { 1 } else { 0 };
                    let y_hi = if dy > 0 { h - 1 } else { h };
                    for kx in 0..3usize {
                        let dx = kx as isize - 1;
                        let x_lo = if dx < 0 { 1 } else { 0 };
                        let x_hi = if dx > 0 { w - 1 } else { w };
                        let widx = wbase + ky * 3 + kx;
                        let wv = params.data[widx];
                        let mut w_acc = T::zero();
                        for y in y_lo..y_hi {
                            let sy = (y as isize + dy) as usize;
                            let dzrow = &dzplane[y * w..y * w + w];
                            let xrow = &xplane[sy * w..sy * w + w];
                            let dxrow = &mut dxplane[sy * w..sy * w + w];
                            for x in x_lo..x_hi {
                                let sx = (x as isize + dx) as usize;
                                let g = dzrow[x];
                                w_acc += g * xrow[sx];
                                dxrow[sx] += wv * g;
                            }
                        }
                        grad[widx] += w_acc;
                    }
                }
            }
        }
        d_pooled = d_input;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{Geometry, ValueDomain};
    use crate::learner::{embed, ArchConfig, ModelParams};
    use crate::rng::RngStream;

    fn normalized_image(geometry: Geometry, values: Vec<f32>) -> ImageTensor {
        ImageTensor::new(geometry, ValueDomain::Normalized, values)
    }

    #[test]
    fn zero_params_give_zero_embeddings() {
        let arch = ArchConfig::new(Geometry::new(1, 8, 8), vec![2, 2]);
        let params = ModelParams::<f64>::zeros(arch).unwrap();
        let img = normalized_image(Geometry::new(1, 8, 8), (0..64).map(|v| v as f32).collect());
        let emb = embed(&params, &[img]).unwrap();
        assert!(emb.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_dim_matches_shape_arithmetic() {
        // 32x32 through four halvings -> 2x2 cells, 128 channels -> 512.
        let arch = ArchConfig::new(Geometry::new(3, 32, 32), vec![16, 32, 64, 128]);
        assert_eq!(arch.embedding_dim(), 512);
        let mut rng = RngStream::root(3).child("init", 0);
        let params = ModelParams::<f32>::init(arch, &mut rng).unwrap();
        let geom = Geometry::new(3, 32, 32);
        let img = normalized_image(geom, vec![0.1; geom.volume()]);
        let emb = embed(&params, &[img]).unwrap();
        assert_eq!(emb.cols, 512);
    }

    #[test]
    fn embed_is_order_preserving_and_deterministic() {
        let geom = Geometry::new(1, 8, 8);
        let arch = ArchConfig::new(geom, vec![2, 2]);
        let mut rng = RngStream::root(5).child("init", 0);
        let params = ModelParams::<f64>::init(arch, &mut rng).unwrap();
        let imgs: Vec<ImageTensor> = (0..4)
            .map(|i| normalized_image(geom, (0..64).map(|v| ((v + i * 7) % 9) as f32).collect()))
            .collect();
        let all = embed(&params, &imgs).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let single = embed(&params, std::slice::from_ref(img)).unwrap();
            assert_eq!(all.row(i), single.row(0));
        }
    }

    #[test]
    fn embed_rejects_wrong_geometry() {
        let arch = ArchConfig::new(Geometry::new(1, 8, 8), vec![2]);
        let params = ModelParams::<f64>::zeros(arch).unwrap();
        let img = normalized_image(Geometry::new(1, 4, 4), vec![0.0; 16]);
        assert!(embed(&params, &[img]).is_err());
    }

    #[test]
    fn known_tiny_convolution_value() {
        // One block, 1->1 channels, all-ones 3x3 kernel, bias 0, on a 2x2
        // image of ones: interior sums depend on padding. For the 2x2 case
        // every conv output is sum of the in-bounds 3x3 window = 4, ReLU
        // keeps it, and the single pooled cell is 4.
        let geom = Geometry::new(1, 2, 2);
        let arch = ArchConfig::new(geom, vec![1]);
        let mut params = ModelParams::<f64>::zeros(arch).unwrap();
        for i in 0..9 {
            params.data[i] = 1.0;
        }
        let img = normalized_image(geom, vec![1.0; 4]);
        let emb = embed(&params, &[img]).unwrap();
        assert_eq!(emb.data, vec![4.0]);
    }
}
