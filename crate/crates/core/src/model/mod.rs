//! Deterministic nowcasting network.
//!
//! Frames are encoded one at a time by a strided convolutional encoder, the
//! per-frame latents are stacked along the channel axis and passed through an
//! Inception UNet translator, a 1x1 convolution maps the `T_in` stacked time
//! slots onto `T_out`, and a pixel-shuffle decoder reconstructs every future
//! frame in one pass. The first encoder block's features of the last observed
//! frame are added back before the final decoder block.
//!
//! Tensors use `[B, T, H, W]` for frame stacks (the single radar channel is
//! implicit) and NCHW everywhere else.
//!
//! Parameter names, as stored in checkpoints:
//!
//! | prefix | layer |
//! |---|---|
//! | `encoder.{i}.conv`, `encoder.{i}.norm` | strided encoder block `i` |
//! | `translator.enc.{i}.reduce` / `.branch_k{k}.conv` / `.branch_k{k}.norm` / `.fuse` | translator down path |
//! | `translator.dec.{j}.*` | translator up path (same sub-layers) |
//! | `translator.remap` | `T_in*C -> T_out*C` 1x1 convolution |
//! | `decoder.{i}.conv`, `decoder.{i}.norm` | upsampling block `i` |
//! | `readout` | final 1x1 convolution to one channel |
//!
//! Each name is suffixed `.weight` or `.bias`.

mod blocks;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, Scalar, Tensor};
use blocks::{ConvBlock, ConvBlockCache, Translator, TranslatorCache, UpBlock};

pub(crate) use checkpoint::write_atomic;
pub use checkpoint::{file_sha256, load_model, save_model, Archive, ArchiveArray, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub t_in: usize,
    pub t_out: usize,
    /// Channel width of the encoder and decoder.
    pub hid_spatial: usize,
    /// Channel width of the translator.
    pub hid_temporal: usize,
    pub n_spatial_blocks: usize,
    pub n_temporal_blocks: usize,
    pub inception_kernels: Vec<usize>,
    /// Group count for grouped convolutions and group norm.
    pub groups: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t_in: 13,
            t_out: 12,
            hid_spatial: 64,
            hid_temporal: 256,
            n_spatial_blocks: 2,
            n_temporal_blocks: 4,
            inception_kernels: vec![3, 5, 7, 11],
            groups: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.t_in", self.t_in),
            ("model.t_out", self.t_out),
            ("model.hid_spatial", self.hid_spatial),
            ("model.hid_temporal", self.hid_temporal),
            ("model.n_spatial_blocks", self.n_spatial_blocks),
            ("model.n_temporal_blocks", self.n_temporal_blocks),
            ("model.groups", self.groups),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be at least 1"));
        }
        if self.inception_kernels.is_empty() || self.inception_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config("model.inception_kernels", "need at least one odd kernel size"));
        }
        Ok(())
    }

    /// Spatial reduction factor of the encoder.
    pub fn downsampling(&self) -> usize {
        1 << self.n_spatial_blocks
    }

    /// Same architecture with a different output horizon.
    pub fn with_horizon(&self, t_out: usize) -> Self {
        Self {
            t_out,
            ..self.clone()
        }
    }
}

/// Encoder output: stacked latents plus the skip features.
#[derive(Debug, Clone)]
pub struct Encoded<S> {
    /// `[N, hid_spatial, H / f, W / f]`.
    pub latent: Tensor<S>,
    /// First-block features `[N, hid_spatial, H / 2, W / 2]`.
    pub skip: Tensor<S>,
}

/// Intermediate values retained by [`NowcastModel::forward_train`].
pub struct ForwardCache<S> {
    shape: [usize; 4],
    encoder: Vec<ConvBlockCache<S>>,
    translator: TranslatorCache<S>,
    decoder: Vec<ConvBlockCache<S>>,
    readout_input: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct NowcastModel<S: Scalar = f32> {
    config: ModelConfig,
    params: ParamStore<S>,
    encoder: Vec<ConvBlock>,
    translator: Translator,
    decoder: Vec<UpBlock>,
    readout: Conv2d,
}

/// Builds a model with seeded random weights.
pub fn init_model<S: Scalar>(config: &ModelConfig) -> Result<NowcastModel<S>> {
    NowcastModel::new(config.clone())
}

impl<S: Scalar> NowcastModel<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let hs = config.hid_spatial;
        let g = config.groups;

        let encoder = (0..config.n_spatial_blocks)
            .map(|i| {
                let cin = if i == 0 { 1 } else { hs };
                ConvBlock::new(&mut params, &format!("encoder.{i}"), cin, hs, 3, 2, 1, g, &mut rng)
            })
            .collect();
        let translator = Translator::new(
            &mut params,
            config.t_in * hs,
            config.t_out * hs,
            config.hid_temporal,
            config.n_temporal_blocks,
            &config.inception_kernels,
            g,
            &mut rng,
        );
        let decoder = (0..config.n_spatial_blocks)
            .map(|i| UpBlock::new(&mut params, &format!("decoder.{i}"), hs, hs, g, &mut rng))
            .collect();
        let readout = Conv2d::new(&mut params, "readout", hs, 1, 1, 1, 0, 1, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            translator,
            decoder,
            readout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn check_frames(&self, op: &'static str, shape: [usize; 4], frames: usize) -> Result<()> {
        let f = self.config.downsampling();
        if shape[1] != frames || shape[2] == 0 || !shape[2].is_multiple_of(f) || shape[3] == 0 || !shape[3].is_multiple_of(f) {
            return Err(Error::shape(
                op,
                format!("[B, {frames}, H, W] with H, W positive multiples of {f}"),
                format!("{shape:?}"),
            ));
        }
        Ok(())
    }

    /// Per-frame spatial encoder. Input `[N, 1, H, W]`.
    pub fn encode(&self, frames: &Tensor<S>) -> Result<Encoded<S>> {
        self.check_frames("encode", frames.shape(), 1)?;
        let mut z = frames.clone();
        let mut skip = None;
        for (i, block) in self.encoder.iter().enumerate() {
            z = block.forward(&self.params, z).0;
            if i == 0 {
                skip = Some(z.clone());
            }
        }
        Ok(Encoded {
            latent: z,
            skip: skip.expect("at least one encoder block"),
        })
    }

    /// Stacked-time translator: `[B, T_in*C, h, w] -> [B, T_out*C, h, w]`.
    pub fn translate(&self, latent: &Tensor<S>) -> Result<Tensor<S>> {
        let want = self.config.t_in * self.config.hid_spatial;
        if latent.shape()[1] != want {
            return Err(Error::shape("translate", format!("{want} channels"), format!("{:?}", latent.shape())));
        }
        Ok(self.translator.forward(&self.params, latent.clone()).0)
    }

    /// Decoder: `[N, C, h, w] -> [N, 1, H, W]`.
    ///
    /// `skip` holds first-encoder-block features at `H/2 x W/2`; its leading
    /// dimension must divide `N`, and skip `i` is added to latents
    /// `i*k .. (i+1)*k` with `k = N / skip.N`.
    pub fn decode(&self, latent: &Tensor<S>, skip: &Tensor<S>) -> Result<Tensor<S>> {
        let [n, c, h, w] = latent.shape();
        let [sn, sc, sh, sw] = skip.shape();
        let up = 1 << (self.config.n_spatial_blocks - 1);
        if c != self.config.hid_spatial || sn == 0 || n % sn != 0 || sc != c || sh != h * up || sw != w * up {
            return Err(Error::shape(
                "decode",
                format!("latent [N, {}, h, w] with skip [N/k, {}, {}h, {}w]", self.config.hid_spatial, c, up, up),
                format!("latent {:?}, skip {:?}", latent.shape(), skip.shape()),
            ));
        }
        let (out, _, _) = self.decode_inner(latent.clone(), skip, n / sn);
        Ok(out)
    }

    fn decode_inner(&self, latent: Tensor<S>, skip: &Tensor<S>, per_skip: usize) -> (Tensor<S>, Vec<ConvBlockCache<S>>, Tensor<S>) {
        let mut z = latent;
        let mut caches = Vec::with_capacity(self.decoder.len());
        let last = self.decoder.len() - 1;
        for (i, block) in self.decoder.iter().enumerate() {
            if i == last {
                add_broadcast(&mut z, skip, per_skip);
            }
            let (out, cache) = block.forward(&self.params, z);
            caches.push(cache);
            z = out;
        }
        let y = self.readout.forward(&self.params, &z);
        (y, caches, z)
    }

    /// Full prediction `[B, T_in, H, W] -> [B, T_out, H, W]`, clamped to `[0, 1]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (mut y, _) = self.forward_train(x)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        for v in y.data_mut() {
            *v = v.max(S::zero()).min(S::one());
        }
        Ok(y)
    }

    /// Unclamped prediction plus the cache needed by [`Self::backward`].
    pub fn forward_train(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ForwardCache<S>)> {
        self.check_frames("forward", x.shape(), self.config.t_in)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("forward input".into()));
        }
        if !self.params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let [b, t_in, h, w] = x.shape();
        let hs = self.config.hid_spatial;
        let t_out = self.config.t_out;

        let mut z = x.clone().reshape([b * t_in, 1, h, w]);
        let mut encoder = Vec::with_capacity(self.encoder.len());
        let mut skip = None;
        for (i, block) in self.encoder.iter().enumerate() {
            let (out, cache) = block.forward(&self.params, z);
            encoder.push(cache);
            if i == 0 {
                skip = Some(last_frame_features(&out, b, t_in));
            }
            z = out;
        }
        let skip = skip.expect("at least one encoder block");
        let [_, _, lh, lw] = z.shape();
        let (z, translator) = self.translator.forward(&self.params, z.reshape([b, t_in * hs, lh, lw]));
        let (y, decoder, readout_input) = self.decode_inner(z.reshape([b * t_out, hs, lh, lw]), &skip, t_out);
        let y = y.reshape([b, t_out, h, w]);
        Ok((
            y,
            ForwardCache {
                shape: x.shape(),
                encoder,
                translator,
                decoder,
                readout_input,
            },
        ))
    }

    /// Accumulates `d loss / d params` given `d loss / d prediction`.
    pub fn backward(&mut self, cache: ForwardCache<S>, dy: &Tensor<S>) {
        let [b, t_in, h, w] = cache.shape;
        let t_out = self.config.t_out;
        let hs = self.config.hid_spatial;
        assert_eq!(dy.shape(), [b, t_out, h, w], "gradient shape");
        let p = &mut self.params;

        let d = dy.clone().reshape([b * t_out, 1, h, w]);
        let mut d = self.readout.backward(p, &cache.readout_input, &d, true).expect("input grad requested");
        let mut dskip = None;
        for (i, (block, bc)) in self.decoder.iter().zip(cache.decoder).enumerate().rev() {
            d = block.backward(p, bc, d);
            if i == self.decoder.len() - 1 {
                dskip = Some(sum_broadcast(&d, t_out));
            }
        }
        let [_, _, lh, lw] = d.shape();
        let d = self.translator.backward(p, cache.translator, d.reshape([b, t_out * hs, lh, lw]));
        let mut d = d.reshape([b * t_in, hs, lh, lw]);
        for (i, (block, bc)) in self.encoder.iter().zip(cache.encoder).enumerate().rev() {
            if i == 0 {
                let ds = dskip.take().expect("decoder ran");
                for n in 0..b {
                    let dst = d.item_mut(n * t_in + t_in - 1);
                    for (a, &g) in dst.iter_mut().zip(ds.item(n)) {
                        *a += g;
                    }
                }
            }
            match block.backward(p, bc, d, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    /// Same architecture and weights in another precision.
    pub fn cast<T: Scalar>(&self) -> NowcastModel<T> {
        let mut out = NowcastModel::<T>::new(self.config.clone()).expect("config already validated");
        let values: Vec<T> = self.params.values().iter().map(|v| T::of(v.as_f64())).collect();
        out.params.load_values(&values);
        out
    }
}

/// First-block features of the last observed frame of each sample.
fn last_frame_features<S: Scalar>(features: &Tensor<S>, b: usize, t_in: usize) -> Tensor<S> {
    let [_, c, h, w] = features.shape();
    let mut out = Tensor::zeros([b, c, h, w]);
    for n in 0..b {
        out.item_mut(n).copy_from_slice(features.item(n * t_in + t_in - 1));
    }
    out
}

fn add_broadcast<S: Scalar>(z: &mut Tensor<S>, skip: &Tensor<S>, per_skip: usize) {
    for n in 0..z.shape()[0] {
        let s = skip.item(n / per_skip);
        for (a, &v) in z.item_mut(n).iter_mut().zip(s) {
            *a += v;
        }
    }
}

fn sum_broadcast<S: Scalar>(d: &Tensor<S>, per_skip: usize) -> Tensor<S> {
    let [n, c, h, w] = d.shape();
    let mut out = Tensor::zeros([n / per_skip, c, h, w]);
    for i in 0..n {
        let dst = out.item_mut(i / per_skip);
        for (a, &g) in dst.iter_mut().zip(d.item(i)) {
            *a += g;
        }
    }
    out
}
