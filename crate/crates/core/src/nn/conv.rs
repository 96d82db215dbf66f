use rand::Rng;

use super::scalar::gemm;
use super::{ParamId, ParamStore, Scalar, Tensor};

/// 2-D convolution with square kernels, symmetric zero padding and groups.
///
/// Weights are stored as `[out, in / groups, k, k]`, matching the usual
/// framework layout so checkpoints are easy to inspect.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        assert!(groups >= 1 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        assert!(kernel >= 1 && stride >= 1);
        let fan_in = (in_channels / groups) * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            vec![out_channels, in_channels / groups, kernel, kernel],
            bound,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), vec![out_channels], bound, rng);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            weight,
            bias,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn geometry(&self, x: &[usize; 4]) -> Geometry {
        assert_eq!(
            x[1], self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels, x[1]
        );
        assert!(x[2] + 2 * self.padding >= self.kernel && x[3] + 2 * self.padding >= self.kernel);
        let (ho, wo) = self.output_hw(x[2], x[3]);
        let cig = self.in_channels / self.groups;
        Geometry {
            h: x[2],
            w: x[3],
            ho,
            wo,
            cig,
            cog: self.out_channels / self.groups,
            kk: cig * self.kernel * self.kernel,
        }
    }

    /// Samples folded into one GEMM so tiny spatial grids still give a
    /// reasonable column count; larger grids go one sample at a time.
    fn chunk(g: &Geometry, batch: usize) -> usize {
        const TARGET_COLS: usize = 128;
        TARGET_COLS.div_ceil(g.ho * g.wo).clamp(1, batch.max(1))
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let shape = x.shape();
        let g = self.geometry(&shape);
        let hw = g.ho * g.wo;
        let weight = store.value(self.weight);
        let bias = store.value(self.bias);
        let mut y = Tensor::zeros([shape[0], self.out_channels, g.ho, g.wo]);
        let chunk = Self::chunk(&g, shape[0]);
        let mut cols = vec![S::zero(); g.kk * chunk * hw];
        let mut out = vec![S::zero(); g.cog * chunk * hw];
        let group_in = g.cig * g.h * g.w;
        for start in (0..shape[0]).step_by(chunk) {
            let cn = chunk.min(shape[0] - start);
            let ld = cn * hw;
            for grp in 0..self.groups {
                for i in 0..cn {
                    let xg = &x.item(start + i)[grp * group_in..(grp + 1) * group_in];
                    self.im2col(xg, &g, &mut cols, ld, i * hw);
                }
                let wg = &weight[grp * g.cog * g.kk..(grp + 1) * g.cog * g.kk];
                gemm(false, false, g.cog, g.kk, ld, wg, &cols[..g.kk * ld], S::zero(), &mut out[..g.cog * ld]);
                for i in 0..cn {
                    let yb = y.item_mut(start + i);
                    for o in 0..g.cog {
                        let oc = grp * g.cog + o;
                        let b = bias[oc];
                        let src = &out[o * ld + i * hw..][..hw];
                        for (d, &v) in yb[oc * hw..(oc + 1) * hw].iter_mut().zip(src) {
                            *d = v + b;
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        x: &Tensor<S>,
        dy: &Tensor<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let shape = x.shape();
        let g = self.geometry(&shape);
        let hw = g.ho * g.wo;
        assert_eq!(dy.shape(), [shape[0], self.out_channels, g.ho, g.wo]);

        {
            let db = store.grad_mut(self.bias);
            for n in 0..shape[0] {
                let dyb = dy.item(n);
                for (o, acc) in db.iter_mut().enumerate() {
                    *acc += dyb[o * hw..(o + 1) * hw].iter().copied().sum::<S>();
                }
            }
        }

        let mut dx = need_input_grad.then(|| Tensor::zeros(shape));
        let (weight, dweight) = store.value_and_grad(self.weight);
        let chunk = Self::chunk(&g, shape[0]);
        let mut cols = vec![S::zero(); g.kk * chunk * hw];
        let mut dyc = vec![S::zero(); g.cog * chunk * hw];
        let mut dcols = if need_input_grad { vec![S::zero(); g.kk * chunk * hw] } else { Vec::new() };
        let group_in = g.cig * g.h * g.w;
        for start in (0..shape[0]).step_by(chunk) {
            let cn = chunk.min(shape[0] - start);
            let ld = cn * hw;
            for grp in 0..self.groups {
                for i in 0..cn {
                    let xg = &x.item(start + i)[grp * group_in..(grp + 1) * group_in];
                    self.im2col(xg, &g, &mut cols, ld, i * hw);
                    let dyb = dy.item(start + i);
                    for o in 0..g.cog {
                        let oc = grp * g.cog + o;
                        dyc[o * ld + i * hw..][..hw].copy_from_slice(&dyb[oc * hw..(oc + 1) * hw]);
                    }
                }
                let wg = &weight[grp * g.cog * g.kk..(grp + 1) * g.cog * g.kk];
                let dwg = &mut dweight[grp * g.cog * g.kk..(grp + 1) * g.cog * g.kk];
                gemm(false, true, g.cog, ld, g.kk, &dyc[..g.cog * ld], &cols[..g.kk * ld], S::one(), dwg);

                if let Some(dx) = dx.as_mut() {
                    gemm(true, false, g.kk, g.cog, ld, wg, &dyc[..g.cog * ld], S::zero(), &mut dcols[..g.kk * ld]);
                    for i in 0..cn {
                        let dxg = &mut dx.item_mut(start + i)[grp * group_in..(grp + 1) * group_in];
                        self.col2im(&dcols, &g, dxg, ld, i * hw);
                    }
                }
            }
        }
        dx
    }

    /// Output columns `lo..hi` whose input column `ox * stride + kj - pad` is
    /// inside the image.
    fn valid_cols(&self, kj: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
        let hi = if w + p > kj { ((w - 1 + p - kj) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Writes the patches of one sample into columns `off..off + ho * wo` of a
    /// row-major `[kk, ld]` matrix.
    fn im2col<S: Scalar>(&self, x: &[S], g: &Geometry, cols: &mut [S], ld: usize, off: usize) {
        let hw = g.ho * g.wo;
        if self.pointwise() {
            for c in 0..g.cig {
                cols[c * ld + off..][..hw].copy_from_slice(&x[c * hw..(c + 1) * hw]);
            }
            return;
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for c in 0..g.cig {
            let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj, g.w, g.wo);
                    let row = &mut cols[((c * k + ki) * k + kj) * ld + off..][..hw];
                    for oy in 0..g.ho {
                        let out = &mut row[oy * g.wo..(oy + 1) * g.wo];
                        let iy = oy * s + ki;
                        if iy < p || iy - p >= g.h || lo == hi {
                            out.fill(S::zero());
                            continue;
                        }
                        let src = &plane[(iy - p) * g.w..(iy - p + 1) * g.w];
                        out[..lo].fill(S::zero());
                        out[hi..].fill(S::zero());
                        let first = lo * s + kj - p;
                        if s == 1 {
                            out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (o, &v) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], g: &Geometry, dx: &mut [S], ld: usize, off: usize) {
        let hw = g.ho * g.wo;
        if self.pointwise() {
            for c in 0..g.cig {
                for (d, &v) in dx[c * hw..(c + 1) * hw].iter_mut().zip(&cols[c * ld + off..][..hw]) {
                    *d += v;
                }
            }
            return;
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for c in 0..g.cig {
            let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let (lo, hi) = self.valid_cols(kj, g.w, g.wo);
                    if lo == hi {
                        continue;
                    }
                    let row = &cols[((c * k + ki) * k + kj) * ld + off..][..hw];
                    for oy in 0..g.ho {
                        let iy = oy * s + ki;
                        if iy < p || iy - p >= g.h {
                            continue;
                        }
                        let dst = &mut plane[(iy - p) * g.w..(iy - p + 1) * g.w];
                        let first = lo * s + kj - p;
                        let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

struct Geometry {
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
    kk: usize,
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn reference(conv: &Conv2d, store: &ParamStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, _, h, w] = x.shape();
        let (ho, wo) = conv.output_hw(h, w);
        let cig = conv.in_channels / conv.groups;
        let cog = conv.out_channels / conv.groups;
        let wt = store.value(conv.weight);
        let bias = store.value(conv.bias);
        let k = conv.kernel;
        let mut y = Tensor::zeros([n, conv.out_channels, ho, wo]);
        for b in 0..n {
            for o in 0..conv.out_channels {
                let grp = o / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[o];
                        for ci in 0..cig {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let c = grp * cig + ci;
                                    let xv = x.data()[((b * conv.in_channels + c) * h + iy as usize) * w + ix as usize];
                                    acc += wt[((o * cig + ci) * k + ki) * k + kj] * xv;
                                }
                            }
                        }
                        y.data_mut()[((b * conv.out_channels + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    const CASES: [(usize, usize, usize, usize, usize, usize); 5] = [
        // in, out, kernel, stride, padding, groups
        (3, 4, 3, 1, 1, 1),
        (2, 6, 3, 2, 1, 1),
        (4, 4, 5, 1, 2, 2),
        (6, 3, 1, 1, 0, 1),
        (4, 8, 7, 1, 3, 4),
    ];

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ci, co, k, s, p, g) in &CASES {
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut store, "c", ci, co, k, s, p, g, &mut rng);
            let x = random_tensor([2, ci, 8, 6], &mut rng);
            let got = conv.forward(&store, &x);
            let want = reference(&conv, &store, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "case {:?}", (ci, co, k, s, p, g));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(ci, co, k, s, p, g) in &CASES {
            let mut store = ParamStore::<f64>::new();
            let conv = Conv2d::new(&mut store, "c", ci, co, k, s, p, g, &mut rng);
            let x = random_tensor([2, ci, 6, 5], &mut rng);
            let y = conv.forward(&store, &x);
            let probe = random_tensor(y.shape(), &mut rng);
            let objective = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
                conv.forward(store, x).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            store.zero_grad();
            let dx = conv.backward(&mut store, &x, &probe, true).unwrap();

            let eps = 1e-6;
            for i in 0..x.numel() {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (objective(&store, &xp) - objective(&store, &xm)) / (2.0 * eps);
                assert!((fd - dx.data()[i]).abs() < 1e-6, "input grad {i}");
            }
            let analytic = store.grads().to_vec();
            for i in 0..store.len() {
                let orig = store.values()[i];
                store.values_mut()[i] = orig + eps;
                let fp = objective(&store, &x);
                store.values_mut()[i] = orig - eps;
                let fm = objective(&store, &x);
                store.values_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - analytic[i]).abs() < 1e-6, "param grad {i}");
            }
        }
    }
}
