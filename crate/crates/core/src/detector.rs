//! The convolutional forgery detector and its channel mask.
//!
//! Architecture: a fixed input shift `x - input_offset` (pixels in `[0, 1]`
//! become zero-centred), then `[conv -> bias -> relu] x L`, producing the
//! last-layer feature map `[B, C, H', W']`; the channel mask zeroes decoupled
//! channels; global average pooling gives a `[B, C]` representation; a dense
//! head maps it to two logits (real, fake).
//!
//! # Checkpoint layout
//!
//! All integers are little-endian `u32`, all weights little-endian `f64`.
//!
//! ```text
//! magic        8 bytes  "FAIRDET2"
//! height, width, in_channels, kernel_size, stride, n_layers
//! input_offset f64
//! channels     n_layers x u32
//! n_tensors    u32
//! per tensor:  rank u32, dims rank x u32, values (product of dims) x f64
//!              (declaration order: conv_1.w, conv_1.b, ..., head.w, head.b)
//! n_channels   u32
//! mask         n_channels x u8 (1 = decoupled)
//! n_rounds     u32
//! per round:   count u32, channel indices count x u32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::graph::{kernels, Graph, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FAIRDET2";

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Output channels of each convolution; the last entry is `C`.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    /// Subtracted from every pixel before the first convolution. Without it
    /// the constant image level acts as a large per-filter bias, so most
    /// filters start either dead or linear and pooling averages the
    /// artifact away.
    pub input_offset: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            height: 16,
            width: 16,
            in_channels: 1,
            channels: vec![8, 16],
            kernel_size: 3,
            stride: 1,
            input_offset: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            bail!(Config, "detector needs at least one convolution");
        }
        if self.feature_channels() < 4 {
            bail!(
                Config,
                "last convolution needs at least 4 channels, got {}",
                self.feature_channels()
            );
        }
        if !self.input_offset.is_finite() {
            bail!(Config, "input offset must be finite");
        }
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 {
            bail!(Config, "kernel size, stride and input channels must be positive");
        }
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.channels {
            if self.kernel_size > h || self.kernel_size > w {
                bail!(
                    Config,
                    "kernel {} does not fit a {h}x{w} activation",
                    self.kernel_size
                );
            }
            h = (h - self.kernel_size) / self.stride + 1;
            w = (w - self.kernel_size) / self.stride + 1;
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Spatial size of the last-layer feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.channels {
            h = (h - self.kernel_size) / self.stride + 1;
            w = (w - self.kernel_size) / self.stride + 1;
        }
        (h, w)
    }
}

/// Per-channel decoupling state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    active: Vec<bool>,
    history: Vec<Vec<usize>>,
}

impl ChannelMask {
    pub fn all_active(channels: usize) -> Self {
        ChannelMask {
            active: vec![true; channels],
            history: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.active.len()
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.active[k]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn decoupled(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&k| !self.active[k]).collect()
    }

    /// Newly decoupled channel indices, one entry per selection round.
    pub fn history(&self) -> &[Vec<usize>] {
        &self.history
    }

    /// Decouple `channels` as one selection round. Every index must be
    /// currently active and at least one channel must stay active.
    pub fn decouple(&mut self, channels: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.active.len()];
        for &k in channels {
            if k >= self.active.len() {
                bail!(State, "channel {k} out of range");
            }
            if !self.active[k] || seen[k] {
                bail!(State, "channel {k} is already decoupled");
            }
            seen[k] = true;
        }
        if channels.len() >= self.active_count() {
            bail!(State, "decoupling would leave no active channel");
        }
        for &k in channels {
            self.active[k] = false;
        }
        self.history.push(channels.to_vec());
        Ok(())
    }

    /// Zero every decoupled channel of `features` in place.
    pub fn apply(&self, features: &mut FeatureMap) -> Result<()> {
        if features.channels() != self.active.len() {
            bail!(
                Dimension,
                "mask of {} channels on a {}-channel feature map",
                self.active.len(),
                features.channels()
            );
        }
        kernels::zero_channels(&mut features.values, &self.active);
        Ok(())
    }
}

/// Last-convolution activations, axes `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            bail!(Dimension, "feature map must be rank 4, got {:?}", values.shape());
        }
        Ok(FeatureMap { values })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn spatial(&self) -> usize {
        self.values.shape()[2] * self.values.shape()[3]
    }

    /// Sample `i`'s flattened map for channel `k`.
    pub fn sample_channel(&self, i: usize, k: usize) -> &[f64] {
        let s = self.spatial();
        let base = (i * self.channels() + k) * s;
        &self.values.data()[base..base + s]
    }

    pub fn sample_channel_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let s = self.spatial();
        let base = (i * self.channels() + k) * s;
        &mut self.values.data_mut()[base..base + s]
    }

    /// Channel `k` as `b` rows of `H'·W'` features.
    pub fn channel_rows(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.batch())
            .map(|i| self.sample_channel(i, k).to_vec())
            .collect()
    }
}

/// Graph handles produced by [`Detector::build`].
pub struct DetectorVars {
    pub params: Vec<Var>,
    pub features: Var,
    pub logits: Var,
    pub fake_prob: Var,
}

pub struct DetectorOutput {
    pub features: FeatureMap,
    pub logits: Tensor,
    pub fake_prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    config: DetectorConfig,
    params: Vec<Tensor>,
}

impl Detector {
    /// Glorot-uniform weights, zero biases, drawn from a seeded stream.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;
        let mut params = Vec::new();
        let mut cin = config.in_channels;
        for &cout in &config.channels {
            let limit = (6.0 / ((cin * k * k + cout * k * k) as f64)).sqrt();
            let w: Vec<f64> = (0..cout * cin * k * k)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            params.push(Tensor::new(vec![cout, cin, k, k], w)?);
            params.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        let c = config.feature_channels();
        let limit = (6.0 / ((c + 2) as f64)).sqrt();
        let w: Vec<f64> = (0..2 * c).map(|_| rng.random_range(-limit..limit)).collect();
        params.push(Tensor::new(vec![2, c], w)?);
        params.push(Tensor::zeros(&[2]));
        Ok(Detector { config, params })
    }

    pub fn from_parts(config: DetectorConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let template = Detector::new(config.clone(), 0)?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            bail!(Dimension, "parameter shapes do not match the configuration");
        }
        Ok(Detector { config, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.height || s[3] != c.width {
            bail!(
                Dimension,
                "expected images [B,{},{},{}], got {s:?}",
                c.in_channels,
                c.height,
                c.width
            );
        }
        Ok(())
    }

    fn check_mask(&self, mask: &ChannelMask) -> Result<()> {
        if mask.channels() != self.config.feature_channels() {
            bail!(
                Dimension,
                "mask has {} channels, detector has {}",
                mask.channels(),
                self.config.feature_channels()
            );
        }
        Ok(())
    }

    fn centred(&self, images: &Tensor) -> Tensor {
        let off = self.config.input_offset;
        images.map(|v| v - off)
    }

    /// Record the forward pass on `g` with trainable parameters.
    pub fn build(&self, g: &mut Graph, images: Tensor, mask: &ChannelMask) -> Result<DetectorVars> {
        self.check_images(&images)?;
        self.check_mask(mask)?;
        let params: Vec<Var> = self.params.iter().map(|p| g.param(p.clone())).collect();
        let mut x = g.constant(self.centred(&images));
        for layer in 0..self.config.channels.len() {
            let conv = g.conv2d(x, params[2 * layer], self.config.stride)?;
            let biased = g.channel_bias(conv, params[2 * layer + 1])?;
            x = g.relu(biased)?;
        }
        let features = x;
        let masked = g.channel_mask(features, mask.active())?;
        let pooled = g.global_avg_pool(masked)?;
        let n = params.len();
        let logits = g.dense(pooled, params[n - 2], params[n - 1])?;
        let probs = g.softmax(logits)?;
        let fake_prob = g.column(probs, 1)?;
        Ok(DetectorVars {
            params,
            features,
            logits,
            fake_prob,
        })
    }

    /// Inference forward pass. The returned feature map is pre-mask.
    pub fn forward(&self, images: &Tensor, mask: &ChannelMask) -> Result<DetectorOutput> {
        let features = self.features(images)?;
        let logits = self.head(&features, mask)?;
        let probs = kernels::softmax_rows(&logits);
        let fake_prob = probs.data().chunks(2).map(|r| r[1]).collect();
        Ok(DetectorOutput {
            features,
            logits,
            fake_prob,
        })
    }

    /// Last-layer activations before masking.
    pub fn features(&self, images: &Tensor) -> Result<FeatureMap> {
        self.check_images(images)?;
        let mut x = self.centred(images);
        for layer in 0..self.config.channels.len() {
            let conv = kernels::conv2d(&x, &self.params[2 * layer], self.config.stride)?;
            let biased = kernels::channel_bias(&conv, &self.params[2 * layer + 1])?;
            x = biased.map(|v| if v > 0.0 { v } else { 0.0 });
        }
        FeatureMap::new(x)
    }

    /// Mask, pool and classify a feature map.
    pub fn head(&self, features: &FeatureMap, mask: &ChannelMask) -> Result<Tensor> {
        self.check_mask(mask)?;
        let mut masked = features.clone();
        mask.apply(&mut masked)?;
        let pooled = kernels::reduce(
            &masked.values,
            crate::graph::Reduction::GlobalAvgPool,
            &[2, 3],
        )?;
        let n = self.params.len();
        kernels::dense(&pooled, &self.params[n - 2], &self.params[n - 1])
    }

    /// Plain SGD step `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        crate::graph::sgd_update(&mut self.params, grads, lr)
    }

    pub fn save(&self, mask: &ChannelMask, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(mask, &mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Detector, ChannelMask)> {
        let bytes = std::fs::read(path)?;
        Detector::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, mask: &ChannelMask, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        for v in [
            c.height,
            c.width,
            c.in_channels,
            c.kernel_size,
            c.stride,
            c.channels.len(),
        ] {
            write_u32(w, v)?;
        }
        for &ch in &c.channels {
            write_u32(w, ch)?;
        }
        w.write_all(&c.input_offset.to_le_bytes())?;
        write_u32(w, self.params.len())?;
        for p in &self.params {
            write_u32(w, p.rank())?;
            for &d in p.shape() {
                write_u32(w, d)?;
            }
            for v in p.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        write_u32(w, mask.channels())?;
        let bits: Vec<u8> = mask.active().iter().map(|&a| u8::from(!a)).collect();
        w.write_all(&bits)?;
        write_u32(w, mask.history().len())?;
        for round in mask.history() {
            write_u32(w, round.len())?;
            for &k in round {
                write_u32(w, k)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<(Detector, ChannelMask)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!(Data, "not a detector checkpoint");
        }
        let height = read_u32(r)?;
        let width = read_u32(r)?;
        let in_channels = read_u32(r)?;
        let kernel_size = read_u32(r)?;
        let stride = read_u32(r)?;
        let n_layers = read_u32(r)?;
        let channels = (0..n_layers).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let input_offset = f64::from_le_bytes(b);
        let config = DetectorConfig {
            height,
            width,
            in_channels,
            channels,
            kernel_size,
            stride,
            input_offset,
        };
        let n_tensors = read_u32(r)?;
        let mut params = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            params.push(Tensor::new(shape, data)?);
        }
        let detector = Detector::from_parts(config, params)?;
        let n_channels = read_u32(r)?;
        let mut bits = vec![0u8; n_channels];
        r.read_exact(&mut bits)?;
        let n_rounds = read_u32(r)?;
        let mut mask = ChannelMask::all_active(n_channels);
        for _ in 0..n_rounds {
            let count = read_u32(r)?;
            let round = (0..count).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            mask.decouple(&round)?;
        }
        let stored: Vec<bool> = bits.iter().map(|&b| b == 0).collect();
        if stored != mask.active {
            bail!(Data, "checkpoint mask bits disagree with decoupling history");
        }
        Ok((detector, mask))
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| crate::Error::Data(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Batch cross-entropy over mixed real/fake samples.
pub fn classification_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    kernels::cross_entropy(logits, labels)?.item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![b, 1, 16, 16],
            (0..b * 256).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_rejects_too_few_channels() {
        let cfg = DetectorConfig {
            channels: vec![8, 3],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(DetectorConfig::default().feature_hw(), (12, 12));
    }

    #[test]
    fn graph_and_inference_paths_agree() {
        let det = Detector::new(DetectorConfig::default(), 7).unwrap();
        let mut mask = ChannelMask::all_active(16);
        mask.decouple(&[3, 9]).unwrap();
        let x = images(3, 1);
        let out = det.forward(&x, &mask).unwrap();
        let mut g = Graph::new();
        let vars = det.build(&mut g, x, &mask).unwrap();
        assert_eq!(g.value(vars.logits), &out.logits);
        assert_eq!(g.value(vars.features), &out.features.values);
        assert_eq!(g.value(vars.fake_prob).data(), out.fake_prob.as_slice());
    }

    #[test]
    fn all_active_mask_is_identity() {
        let det = Detector::new(DetectorConfig::default(), 3).unwrap();
        let x = images(4, 2);
        let feats = det.features(&x).unwrap();
        let logits = det.forward(&x, &ChannelMask::all_active(16)).unwrap().logits;
        let pooled = kernels::reduce(
            &feats.values,
            crate::graph::Reduction::GlobalAvgPool,
            &[2, 3],
        )
        .unwrap();
        let p = det.params();
        let direct = kernels::dense(&pooled, &p[4], &p[5]).unwrap();
        assert_eq!(logits, direct);
    }

    #[test]
    fn decoupled_channel_ignores_injected_noise() {
        let det = Detector::new(DetectorConfig::default(), 5).unwrap();
        let mut mask = ChannelMask::all_active(16);
        mask.decouple(&[4]).unwrap();
        let x = images(2, 9);
        let mut feats = det.features(&x).unwrap();
        let before = det.head(&feats, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..2 {
            for v in feats.sample_channel_mut(i, 4) {
                *v = rng.random_range(-100.0..100.0);
            }
        }
        assert_eq!(det.head(&feats, &mask).unwrap(), before);
    }

    #[test]
    fn mask_is_idempotent() {
        let det = Detector::new(DetectorConfig::default(), 5).unwrap();
        let mut mask = ChannelMask::all_active(16);
        mask.decouple(&[0, 15]).unwrap();
        let mut once = det.features(&images(2, 3)).unwrap();
        mask.apply(&mut once).unwrap();
        let mut twice = once.clone();
        mask.apply(&mut twice).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mask_never_empties() {
        let mut mask = ChannelMask::all_active(4);
        mask.decouple(&[0, 1]).unwrap();
        assert!(mask.decouple(&[1]).is_err());
        assert!(mask.decouple(&[2, 3]).is_err());
        mask.decouple(&[2]).unwrap();
        assert_eq!(mask.decoupled(), vec![0, 1, 2]);
        assert_eq!(mask.history(), &[vec![0, 1], vec![2]]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let det = Detector::new(DetectorConfig::default(), 21).unwrap();
        let mut mask = ChannelMask::all_active(16);
        mask.decouple(&[2]).unwrap();
        mask.decouple(&[7, 8]).unwrap();
        let mut buf = Vec::new();
        det.write_to(&mask, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"FAIRDET2");
        let (back, back_mask) = Detector::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, det);
        assert_eq!(back_mask, mask);
        buf[0] = b'X';
        assert!(Detector::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let det = Detector::new(DetectorConfig::default(), 1).unwrap();
        let bad = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(matches!(
            det.forward(&bad, &ChannelMask::all_active(16)),
            Err(crate::Error::Dimension(_))
        ));
    }
}
