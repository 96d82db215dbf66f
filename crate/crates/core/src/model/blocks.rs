//! Building blocks of the encoder, translator and decoder.

use rand::Rng;

use crate::nn::{
    concat_channels, leaky_relu, leaky_relu_backward, pixel_shuffle, pixel_unshuffle, split_channels, Conv2d,
    GroupNorm, GroupNormCache, ParamStore, Scalar, Tensor,
};

/// Convolution, group norm, leaky ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

pub(crate) struct ConvBlockCache<S> {
    input: Tensor<S>,
    norm: GroupNormCache<S>,
    output: Tensor<S>,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        norm_groups: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_c, out_c, kernel, stride, kernel / 2, groups, rng);
        let norm = GroupNorm::new(store, &format!("{name}.norm"), out_c, norm_groups);
        Self { conv, norm }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: Tensor<S>) -> (Tensor<S>, ConvBlockCache<S>) {
        let z = self.conv.forward(p, &x);
        let (u, norm) = self.norm.forward(p, z);
        let y = leaky_relu(u);
        (
            y.clone(),
            ConvBlockCache {
                input: x,
                norm,
                output: y,
            },
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        p: &mut ParamStore<S>,
        cache: ConvBlockCache<S>,
        dy: Tensor<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let du = leaky_relu_backward(&cache.output, dy);
        let dz = self.norm.backward(p, &cache.norm, du);
        self.conv.backward(p, &cache.input, &dz, need_input_grad)
    }
}

/// 3x3 convolution to four times the width, pixel shuffle (x2 upsampling),
/// group norm, leaky ReLU.
#[derive(Debug, Clone)]
pub(crate) struct UpBlock {
    conv: Conv2d,
    norm: GroupNorm,
}

impl UpBlock {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_c: usize,
        out_c: usize,
        norm_groups: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_c, out_c * 4, 3, 1, 1, 1, rng);
        let norm = GroupNorm::new(store, &format!("{name}.norm"), out_c, norm_groups);
        Self { conv, norm }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: Tensor<S>) -> (Tensor<S>, ConvBlockCache<S>) {
        let z = pixel_shuffle(&self.conv.forward(p, &x), 2);
        let (u, norm) = self.norm.forward(p, z);
        let y = leaky_relu(u);
        (
            y.clone(),
            ConvBlockCache {
                input: x,
                norm,
                output: y,
            },
        )
    }

    pub fn backward<S: Scalar>(&self, p: &mut ParamStore<S>, cache: ConvBlockCache<S>, dy: Tensor<S>) -> Tensor<S> {
        let du = leaky_relu_backward(&cache.output, dy);
        let dz = pixel_unshuffle(&self.norm.backward(p, &cache.norm, du), 2);
        self.conv.backward(p, &cache.input, &dz, true).expect("input grad requested")
    }
}

/// Inception block: 1x1 reduction, parallel grouped convolutions of several
/// kernel sizes (each with norm and activation), channel concatenation and a
/// 1x1 fusion.
#[derive(Debug, Clone)]
pub(crate) struct Inception {
    reduce: Conv2d,
    branches: Vec<ConvBlock>,
    fuse: Conv2d,
    mid: usize,
}

pub(crate) struct InceptionCache<S> {
    input: Tensor<S>,
    branches: Vec<ConvBlockCache<S>>,
    concat: Tensor<S>,
}

impl Inception {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        in_c: usize,
        mid: usize,
        out_c: usize,
        kernels: &[usize],
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let reduce = Conv2d::new(store, &format!("{name}.reduce"), in_c, mid, 1, 1, 0, 1, rng);
        let groups = if mid.is_multiple_of(groups) { groups } else { 1 };
        let branches = kernels
            .iter()
            .map(|&k| ConvBlock::new(store, &format!("{name}.branch_k{k}"), mid, mid, k, 1, groups, groups, rng))
            .collect();
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), mid * kernels.len(), out_c, 1, 1, 0, 1, rng);
        Self {
            reduce,
            branches,
            fuse,
            mid,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: Tensor<S>) -> (Tensor<S>, InceptionCache<S>) {
        let reduced = self.reduce.forward(p, &x);
        let (outs, caches): (Vec<_>, Vec<_>) = self.branches.iter().map(|b| b.forward(p, reduced.clone())).unzip();
        let concat = concat_channels(&outs.iter().collect::<Vec<_>>());
        let y = self.fuse.forward(p, &concat);
        (
            y,
            InceptionCache {
                input: x,
                branches: caches,
                concat,
            },
        )
    }

    pub fn backward<S: Scalar>(&self, p: &mut ParamStore<S>, cache: InceptionCache<S>, dy: Tensor<S>) -> Tensor<S> {
        let dcat = self.fuse.backward(p, &cache.concat, &dy, true).expect("input grad requested");
        let parts = split_channels(&dcat, &vec![self.mid; self.branches.len()]);
        let mut dreduced: Option<Tensor<S>> = None;
        for ((branch, bc), part) in self.branches.iter().zip(cache.branches).zip(parts) {
            let d = branch.backward(p, bc, part, true).expect("input grad requested");
            match dreduced.as_mut() {
                Some(acc) => acc.add_assign(&d),
                None => dreduced = Some(d),
            }
        }
        let dreduced = dreduced.expect("at least one branch");
        self.reduce.backward(p, &cache.input, &dreduced, true).expect("input grad requested")
    }
}

/// Inception UNet over the stacked time-channel axis followed by the 1x1
/// remap from `T_in * C` to `T_out * C` channels.
#[derive(Debug, Clone)]
pub(crate) struct Translator {
    enc: Vec<Inception>,
    dec: Vec<Inception>,
    remap: Conv2d,
    hidden: usize,
}

pub(crate) struct TranslatorCache<S> {
    enc: Vec<InceptionCache<S>>,
    dec: Vec<InceptionCache<S>>,
    remap_input: Tensor<S>,
}

impl Translator {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        channels_in: usize,
        channels_out: usize,
        hidden: usize,
        n_blocks: usize,
        kernels: &[usize],
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let n_enc = n_blocks.div_ceil(2);
        let n_dec = n_blocks / 2;
        let mid = (hidden / 2).max(1);
        let enc = (0..n_enc)
            .map(|i| {
                let cin = if i == 0 { channels_in } else { hidden };
                let cout = if n_dec == 0 && i == n_enc - 1 { channels_in } else { hidden };
                Inception::new(store, &format!("translator.enc.{i}"), cin, mid, cout, kernels, groups, rng)
            })
            .collect();
        let dec = (0..n_dec)
            .map(|j| {
                let cin = if j == 0 { hidden } else { 2 * hidden };
                let cout = if j == n_dec - 1 { channels_in } else { hidden };
                Inception::new(store, &format!("translator.dec.{j}"), cin, mid, cout, kernels, groups, rng)
            })
            .collect();
        let remap = Conv2d::new(store, "translator.remap", channels_in, channels_out, 1, 1, 0, 1, rng);
        Self {
            enc,
            dec,
            remap,
            hidden,
        }
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: Tensor<S>) -> (Tensor<S>, TranslatorCache<S>) {
        let mut z = x;
        let mut skips = Vec::new();
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        for (i, block) in self.enc.iter().enumerate() {
            let (out, cache) = block.forward(p, z);
            enc_caches.push(cache);
            if i + 1 < self.enc.len() {
                skips.push(out.clone());
            }
            z = out;
        }
        let mut dec_caches = Vec::with_capacity(self.dec.len());
        for (j, block) in self.dec.iter().enumerate() {
            let input = if j == 0 {
                z
            } else {
                concat_channels(&[&z, &skips[self.enc.len() - 1 - j]])
            };
            let (out, cache) = block.forward(p, input);
            dec_caches.push(cache);
            z = out;
        }
        let y = self.remap.forward(p, &z);
        (
            y,
            TranslatorCache {
                enc: enc_caches,
                dec: dec_caches,
                remap_input: z,
            },
        )
    }

    pub fn backward<S: Scalar>(&self, p: &mut ParamStore<S>, cache: TranslatorCache<S>, dy: Tensor<S>) -> Tensor<S> {
        let mut dz = self.remap.backward(p, &cache.remap_input, &dy, true).expect("input grad requested");
        let mut dskips: Vec<Option<Tensor<S>>> = (0..self.enc.len().saturating_sub(1)).map(|_| None).collect();
        for (j, (block, bc)) in self.dec.iter().zip(cache.dec).enumerate().rev() {
            let din = block.backward(p, bc, dz);
            if j == 0 {
                dz = din;
            } else {
                let mut parts = split_channels(&din, &[self.hidden, self.hidden]);
                let dskip = parts.pop().expect("two parts");
                dz = parts.pop().expect("two parts");
                let slot = &mut dskips[self.enc.len() - 1 - j];
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&dskip),
                    None => *slot = Some(dskip),
                }
            }
        }
        for (i, (block, bc)) in self.enc.iter().zip(cache.enc).enumerate().rev() {
            if let Some(Some(ds)) = dskips.get(i) {
                dz.add_assign(ds);
            }
            dz = block.backward(p, bc, dz);
        }
        dz
    }
}
