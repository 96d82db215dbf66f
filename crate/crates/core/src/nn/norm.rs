use super::{ParamId, ParamStore, Scalar, Tensor};

/// Group normalisation over `(channels / groups, H, W)` per sample.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<S> {
    xhat: Tensor<S>,
    rstd: Vec<S>,
}

impl GroupNorm {
    /// `groups` is reduced to the largest divisor of `channels` not above it.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.max(1)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        let gamma = store.add_constant(format!("{name}.weight"), vec![channels], 1.0);
        let beta = store.add_constant(format!("{name}.bias"), vec![channels], 0.0);
        Self {
            channels,
            groups,
            eps: 1e-5,
            gamma,
            beta,
        }
    }

    pub fn forward<S: Scalar>(&self, store: &ParamStore<S>, mut x: Tensor<S>) -> (Tensor<S>, GroupNormCache<S>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels);
        let cpg = c / self.groups;
        let group_len = cpg * h * w;
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let mut rstd = Vec::with_capacity(n * self.groups);
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            let xb = x.item_mut(b);
            let ob = out.item_mut(b);
            for g in 0..self.groups {
                let xs = &mut xb[g * group_len..(g + 1) * group_len];
                let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / group_len as f64;
                let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / group_len as f64;
                let r = 1.0 / (var + self.eps).sqrt();
                rstd.push(S::of(r));
                let (mean, r) = (S::of(mean), S::of(r));
                for (ci, chunk) in xs.chunks_mut(h * w).enumerate() {
                    let ch = g * cpg + ci;
                    let dst = &mut ob[ch * h * w..(ch + 1) * h * w];
                    for (v, o) in chunk.iter_mut().zip(dst) {
                        *v = (*v - mean) * r;
                        *o = *v * gamma[ch] + beta[ch];
                    }
                }
            }
        }
        (out, GroupNormCache { xhat: x, rstd })
    }

    pub fn backward<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        cache: &GroupNormCache<S>,
        mut dy: Tensor<S>,
    ) -> Tensor<S> {
        let [n, c, h, w] = dy.shape();
        let cpg = c / self.groups;
        let plane = h * w;
        {
            let dgamma = store.grad_mut(self.gamma);
            for b in 0..n {
                let xb = cache.xhat.item(b);
                let db = dy.item(b);
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    dgamma[ch] += db[r.clone()].iter().zip(&xb[r]).map(|(&d, &x)| d * x).sum::<S>();
                }
            }
        }
        {
            let dbeta = store.grad_mut(self.beta);
            for b in 0..n {
                let db = dy.item(b);
                for (ch, acc) in dbeta.iter_mut().enumerate() {
                    *acc += db[ch * plane..(ch + 1) * plane].iter().copied().sum::<S>();
                }
            }
        }
        let gamma = store.value(self.gamma);
        let m = S::of((cpg * plane) as f64);
        for b in 0..n {
            let xb = cache.xhat.item(b);
            let db = dy.item_mut(b);
            for g in 0..self.groups {
                let rstd = cache.rstd[b * self.groups + g];
                let range = g * cpg * plane..(g + 1) * cpg * plane;
                let xs = &xb[range.clone()];
                let ds = &mut db[range];
                let mut sum_d = S::zero();
                let mut sum_dx = S::zero();
                for (i, (d, &x)) in ds.iter_mut().zip(xs).enumerate() {
                    *d *= gamma[g * cpg + i / plane];
                    sum_d += *d;
                    sum_dx += *d * x;
                }
                let mean_d = sum_d / m;
                let mean_dx = sum_dx / m;
                for (d, &x) in ds.iter_mut().zip(xs) {
                    *d = rstd * (*d - mean_d - x * mean_dx);
                }
            }
        }
        dy
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn output_is_standardised_per_group() {
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "gn", 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec([2, 4, 3, 3], (0..72).map(|_| rng.random_range(-3.0..5.0)).collect());
        let (y, _) = gn.forward(&store, x);
        for chunk in y.data().chunks(18) {
            let mean = chunk.iter().sum::<f64>() / 18.0;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_count_falls_back_to_a_divisor() {
        let mut store = ParamStore::<f32>::new();
        assert_eq!(GroupNorm::new(&mut store, "a", 12, 8).groups, 6);
        assert_eq!(GroupNorm::new(&mut store, "b", 7, 8).groups, 7);
        assert_eq!(GroupNorm::new(&mut store, "c", 64, 8).groups, 8);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let gn = GroupNorm::new(&mut store, "gn", 6, 3);
        for v in store.values_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        let x = Tensor::from_vec([2, 6, 3, 2], (0..72).map(|_| rng.random_range(-2.0..2.0)).collect());
        let probe: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
            let (y, _) = gn.forward(store, x.clone());
            y.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gn.forward(&store, x.clone());
        let dx = gn.backward(&mut store, &cache, Tensor::from_vec([2, 6, 3, 2], probe.clone()));
        let eps = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(&store, &xp) - objective(&store, &xm)) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
        let analytic = store.grads().to_vec();
        for i in 0..store.len() {
            let orig = store.values()[i];
            store.values_mut()[i] = orig + eps;
            let fp = objective(&store, &x);
            store.values_mut()[i] = orig - eps;
            let fm = objective(&store, &x);
            store.values_mut()[i] = orig;
            assert!(((fp - fm) / (2.0 * eps) - analytic[i]).abs() < 1e-6);
        }
    }
}
