//! Parameter-free tensor operations.

use super::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<S: Scalar>(mut x: Tensor<S>) -> Tensor<S> {
    let slope = S::of(LEAKY_SLOPE);
    for v in x.data_mut() {
        if *v < S::zero() {
            *v *= slope;
        }
    }
    x
}

/// Gradient through [`leaky_relu`] given its output `y` (sign-preserving).
pub fn leaky_relu_backward<S: Scalar>(y: &Tensor<S>, mut dy: Tensor<S>) -> Tensor<S> {
    let slope = S::of(LEAKY_SLOPE);
    for (d, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v < S::zero() {
            *d *= slope;
        }
    }
    dy
}

/// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
pub fn pixel_shuffle<S: Scalar>(x: &Tensor<S>, r: usize) -> Tensor<S> {
    let [n, cr, h, w] = x.shape();
    assert_eq!(cr % (r * r), 0, "channels {cr} not divisible by {}", r * r);
    let c = cr / (r * r);
    let mut out = Tensor::zeros([n, c, h * r, w * r]);
    let (hr, wr) = (h * r, w * r);
    for b in 0..n {
        let src = x.item(b);
        let dst = out.item_mut(b);
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &src[((ch * r + i) * r + j) * h * w..][..h * w];
                    for y in 0..h {
                        let row = &mut dst[(ch * hr + y * r + i) * wr..][..wr];
                        for x in 0..w {
                            row[x * r + j] = plane[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle`]; also its gradient.
pub fn pixel_unshuffle<S: Scalar>(x: &Tensor<S>, r: usize) -> Tensor<S> {
    let [n, c, hr, wr] = x.shape();
    assert!(hr % r == 0 && wr % r == 0);
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor::zeros([n, c * r * r, h, w]);
    for b in 0..n {
        let src = x.item(b);
        let dst = out.item_mut(b);
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &mut dst[((ch * r + i) * r + j) * h * w..][..h * w];
                    for y in 0..h {
                        let row = &src[(ch * hr + y * r + i) * wr..][..wr];
                        for x in 0..w {
                            plane[y * w + x] = row[x * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Concatenates along the channel axis.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    let [n, _, h, w] = parts[0].shape();
    let channels: usize = parts
        .iter()
        .map(|p| {
            let s = p.shape();
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
            s[1]
        })
        .sum();
    let mut out = Tensor::zeros([n, channels, h, w]);
    for b in 0..n {
        let mut offset = 0;
        let dst = out.item_mut(b);
        for p in parts {
            let src = p.item(b);
            dst[offset..offset + src.len()].copy_from_slice(src);
            offset += src.len();
        }
    }
    out
}

/// Splits along the channel axis into pieces of the given widths.
pub fn split_channels<S: Scalar>(x: &Tensor<S>, widths: &[usize]) -> Vec<Tensor<S>> {
    let [n, c, h, w] = x.shape();
    assert_eq!(widths.iter().sum::<usize>(), c);
    let mut parts: Vec<Tensor<S>> = widths.iter().map(|&wd| Tensor::zeros([n, wd, h, w])).collect();
    for b in 0..n {
        let src = x.item(b);
        let mut offset = 0;
        for p in parts.iter_mut() {
            let dst = p.item_mut(b);
            dst.copy_from_slice(&src[offset..offset + dst.len()]);
            offset += dst.len();
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_shuffle_places_subpixels() {
        // one output channel, r = 2: four input planes of 1x1 become one 2x2 plane
        let x = Tensor::from_vec([1, 4, 1, 1], vec![1.0f32, 2.0, 3.0, 4.0]);
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unshuffle_inverts_shuffle() {
        let x = Tensor::from_vec([2, 8, 3, 2], (0..96).map(|v| v as f64).collect());
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&x, 2), 2), x);
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::from_vec([2, 1, 2, 2], (0..8).map(|v| v as f32).collect());
        let b = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|v| -(v as f32)).collect());
        let cat = concat_channels(&[&a, &b]);
        assert_eq!(cat.shape(), [2, 4, 2, 2]);
        let parts = split_channels(&cat, &[1, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn leaky_backward_scales_negative_side() {
        let y = leaky_relu(Tensor::from_vec([1, 1, 1, 2], vec![-1.0f64, 2.0]));
        assert_eq!(y.data(), &[-0.2, 2.0]);
        let d = leaky_relu_backward(&y, Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0]));
        assert_eq!(d.data(), &[0.2, 1.0]);
    }
}
