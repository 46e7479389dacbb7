//! The two-head discriminator.
//!
//! A shared layout-fusion network turns a frame and its layout into layout
//! features `f_t` at a quarter of the frame resolution: a global branch
//! encodes the label raster, a local branch crops every instance from the
//! frame, encodes the crop together with its label embedding and places the
//! result back into the box. The image head scores one frame together with
//! its `f_t`; the motion head scores two frames of the same clip, stacked as
//! `[Δt plane, frame1 RGB, frame2 RGB]` (7 channels), together with both
//! frames' layout features. In both heads the full-resolution input is
//! downsampled by strided convolutions to the `f_t` resolution, where the
//! layout features join along the channel axis. The final score weights the
//! two image logits by ¼ each and the motion logit by ½.
//!
//! All public single-sample entry points are batch calls with `N = 1`, so a
//! composed evaluation and [`Discriminator::discriminate`] agree bitwise.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    rasterize_batch, stn_crop_many, stn_place_sum, BoundingBox, FrameLayout, LabelEmbeddingTable,
    LayoutLimits,
};
use crate::nn::{leaky_relu, Conv2d, Init, Linear, ParamStore};
use crate::video::VideoClip;

/// Number of base input channels of the motion head: one `Δt` plane and two
/// RGB frames.
pub const MOTION_BASE_CHANNELS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub num_categories: usize,
    pub max_instances: usize,
    /// Frame height and width; must be `4 · 2^k` with `k ≥ 2`.
    pub resolution: usize,
    pub embed_dim: usize,
    pub global_channels: usize,
    pub local_channels: usize,
    pub crop_size: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Store parameters rounded to IEEE half precision.
    pub half_precision: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_categories: LayoutLimits::VIDVRD.num_categories,
            max_instances: LayoutLimits::VIDVRD.max_instances,
            resolution: 64,
            embed_dim: 16,
            global_channels: 8,
            local_channels: 8,
            crop_size: 8,
            base_channels: 16,
            max_channels: 64,
            half_precision: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn limits(&self) -> LayoutLimits {
        LayoutLimits {
            num_categories: self.num_categories,
            max_instances: self.max_instances,
        }
    }

    /// Side of the layout-feature map.
    pub fn feature_size(&self) -> usize {
        self.resolution / 4
    }

    pub fn layout_feature_channels(&self) -> usize {
        self.global_channels + self.local_channels
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 16 || r % 4 != 0 || !(r / 4).is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator resolution must be 4 * 2^k >= 16, got {r}"
            )));
        }
        if self.crop_size < 2 || self.crop_size % 2 != 0 {
            return Err(Error::Config("crop_size must be even and at least 2".into()));
        }
        for (name, v) in [
            ("num_categories", self.num_categories),
            ("embed_dim", self.embed_dim),
            ("global_channels", self.global_channels),
            ("local_channels", self.local_channels),
            ("base_channels", self.base_channels),
            ("max_channels", self.max_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Two frames of one clip with their indices.
#[derive(Debug, Clone)]
pub struct FramePairSample {
    pub frame1: Tensor,
    pub frame2: Tensor,
    pub t1: usize,
    pub t2: usize,
    pub clip_length: usize,
}

impl FramePairSample {
    pub fn from_clip(clip: &VideoClip, t1: usize, t2: usize) -> Result<Self> {
        Ok(Self {
            frame1: clip.frame(t1)?,
            frame2: clip.frame(t2)?,
            t1,
            t2,
            clip_length: clip.num_frames(),
        })
    }

    pub fn delta_t(&self) -> usize {
        self.t1.abs_diff(self.t2)
    }

    /// `Δt / (T - 1)`, or 0 for single-frame clips.
    pub fn normalized_delta_t(&self) -> f64 {
        normalized_gap(self.delta_t(), self.clip_length)
    }
}

pub fn normalized_gap(delta_t: usize, clip_length: usize) -> f64 {
    if clip_length <= 1 {
        0.0
    } else {
        delta_t as f64 / (clip_length - 1) as f64
    }
}

/// `¼·(d_i1 + d_i2) + ½·d_m`.
pub fn aggregate(d_i1: f64, d_i2: f64, d_m: f64) -> f64 {
    0.25 * (d_i1 + d_i2) + 0.5 * d_m
}

/// Elementwise [`aggregate`] on score tensors of equal shape.
pub fn aggregate_tensors(d_i1: &Tensor, d_i2: &Tensor, d_m: &Tensor) -> Result<Tensor> {
    Ok(((d_i1 + d_i2)?.affine(0.25, 0.0)? + d_m.affine(0.5, 0.0)?)?)
}

/// Convolutional classifier over a full-resolution input. Stride-2 stages
/// bring it down to the layout-feature resolution, where the layout features
/// are concatenated; further stages reach 4×4 before a linear read-out.
#[derive(Debug, Clone)]
struct Classifier {
    stem: Conv2d,
    pre: Vec<Conv2d>,
    post: Vec<Conv2d>,
    head: Linear,
}

impl Classifier {
    fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        layout_channels: usize,
        config: &DiscriminatorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut c = config.base_channels;
        let stem = Conv2d::new(store, &format!("{name}.stem"), input, c, 3, 1, 1, rng)?;
        let mut size = config.resolution;
        let mut pre = Vec::new();
        while size > config.feature_size() {
            let next = (2 * c).min(config.max_channels);
            pre.push(Conv2d::new(store, &format!("{name}.down{}", pre.len()), c, next, 3, 2, 1, rng)?);
            c = next;
            size /= 2;
        }
        c += layout_channels;
        let mut post = Vec::new();
        while size > 4 {
            let next = (2 * c).min(config.max_channels);
            let k = pre.len() + post.len();
            post.push(Conv2d::new(store, &format!("{name}.down{k}"), c, next, 3, 2, 1, rng)?);
            c = next;
            size /= 2;
        }
        let head = Linear::with_init(
            store,
            &format!("{name}.head"),
            c * 16,
            1,
            true,
            Init::Normal((1.0 / (c * 16) as f64).sqrt()),
            rng,
        )?;
        Ok(Self { stem, pre, post, head })
    }

    /// `(N, C, R, R)` input and `(N, C_t, R/4, R/4)` layout features → `(N,)`.
    fn forward(&self, x: &Tensor, layout: &Tensor) -> Result<Tensor> {
        let mut h = leaky_relu(&self.stem.forward(x)?)?;
        for d in &self.pre {
            h = leaky_relu(&d.forward(&h)?)?;
        }
        h = Tensor::cat(&[&h, layout], 1)?;
        for d in &self.post {
            h = leaky_relu(&d.forward(&h)?)?;
        }
        let n = h.dim(0)?;
        Ok(self.head.forward(&h.flatten_from(1)?)?.reshape(n)?)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamStore,
    labels: LabelEmbeddingTable,
    global_conv: Conv2d,
    local_conv1: Conv2d,
    local_label: Linear,
    local_conv2: Conv2d,
    image_head: Classifier,
    motion_head: Classifier,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(dtype);
        let c = &config;
        let labels = LabelEmbeddingTable::new(p.create(
            "labels",
            &[c.num_categories, c.embed_dim],
            Init::Normal(1.0),
            rng,
        )?)?;
        let global_conv = Conv2d::new(&mut p, "layout.global", c.embed_dim, c.global_channels, 3, 1, 1, rng)?;
        let local_conv1 = Conv2d::new(&mut p, "layout.local1", 3, c.local_channels, 3, 1, 1, rng)?;
        let local_label = Linear::new(&mut p, "layout.local_label", c.embed_dim, c.local_channels, false, rng)?;
        let local_conv2 =
            Conv2d::new(&mut p, "layout.local2", c.local_channels, c.local_channels, 3, 2, 1, rng)?;
        let ft = c.layout_feature_channels();
        let image_head = Classifier::new(&mut p, "image", 3, ft, c, rng)?;
        let motion_head = Classifier::new(&mut p, "motion", MOTION_BASE_CHANNELS, 2 * ft, c, rng)?;
        let d = Self {
            config,
            params: p,
            labels,
            global_conv,
            local_conv1,
            local_label,
            local_conv2,
            image_head,
            motion_head,
        };
        if d.config.half_precision {
            d.round_to_half()?;
        }
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn labels(&self) -> &LabelEmbeddingTable {
        &self.labels
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn half_precision(&self) -> bool {
        self.config.half_precision
    }

    /// Rounds every parameter through IEEE half precision in place.
    pub fn round_to_half(&self) -> Result<()> {
        for (_, var) in self.params.iter() {
            let rounded = var.as_tensor().to_dtype(DType::F16)?.to_dtype(self.dtype())?;
            var.set(&rounded)?;
        }
        Ok(())
    }

    fn check_frames(&self, frames: &Tensor) -> Result<usize> {
        let (n, c, h, w) = frames.dims4()?;
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::Config(format!(
                "discriminator expects (N, 3, {r}, {r}) frames, got {:?}",
                frames.dims()
            )));
        }
        Ok(n)
    }

    /// Batched layout fusion: frames `(N, 3, R, R)` → `(N, C_t, R/4, R/4)`.
    pub fn fuse_layout_batch(&self, frames: &Tensor, layouts: &[FrameLayout]) -> Result<Tensor> {
        let n = self.check_frames(frames)?;
        if layouts.len() != n {
            return Err(Error::Input(format!("{n} frames but {} layouts", layouts.len())));
        }
        let limits = self.config.limits();
        layouts.iter().try_for_each(|l| l.validate(&limits))?;
        let c = &self.config;
        let s = c.feature_size();
        let frames = frames.to_dtype(self.dtype())?;

        let raster = rasterize_batch(layouts, &self.labels, s, s)?;
        let global = leaky_relu(&self.global_conv.forward(&raster)?)?;

        let canonical: Vec<_> = layouts.iter().map(|l| l.canonical_instances()).collect();
        let total: usize = canonical.iter().map(Vec::len).sum();
        let local = if total == 0 {
            Tensor::zeros((n, c.local_channels, s, s), self.dtype(), &Device::Cpu)?
        } else {
            let k = c.crop_size;
            let mut crops = Vec::with_capacity(n);
            let mut cats = Vec::with_capacity(total);
            for (i, inst) in canonical.iter().enumerate() {
                if inst.is_empty() {
                    continue;
                }
                let boxes: Vec<BoundingBox> = inst.iter().map(|x| x.bbox).collect();
                crops.push(stn_crop_many(&frames.get(i)?, &boxes, k, k)?);
                cats.extend(inst.iter().map(|x| x.category_id as u32));
            }
            let crops = Tensor::cat(&crops, 0)?;
            let idx = Tensor::from_vec(cats, total, &Device::Cpu)?;
            let emb = self.labels.tensor().index_select(&idx, 0)?;
            let label_bias = self
                .local_label
                .forward(&emb)?
                .reshape((total, c.local_channels, 1, 1))?;
            let h = leaky_relu(&self.local_conv1.forward(&crops)?.broadcast_add(&label_bias)?)?;
            let h = leaky_relu(&self.local_conv2.forward(&h)?)?;
            let mut out = Vec::with_capacity(n);
            let mut offset = 0;
            for inst in &canonical {
                let boxes: Vec<BoundingBox> = inst.iter().map(|x| x.bbox).collect();
                let feats = h.narrow(0, offset, boxes.len())?;
                out.push(stn_place_sum(&feats, &boxes, s, s)?);
                offset += boxes.len();
            }
            Tensor::stack(&out, 0)?
        };
        Ok(Tensor::cat(&[&global, &local], 1)?)
    }

    /// Batched image head: `(N,)` logits.
    pub fn score_image_batch(&self, frames: &Tensor, f_t: &Tensor) -> Result<Tensor> {
        self.check_frames(frames)?;
        self.image_head.forward(&frames.to_dtype(self.dtype())?, f_t)
    }

    /// Batched motion head. `delta_t` holds normalized gaps `(N,)`.
    pub fn score_motion_batch(
        &self,
        frames1: &Tensor,
        frames2: &Tensor,
        delta_t: &Tensor,
        f_t1: &Tensor,
        f_t2: &Tensor,
    ) -> Result<Tensor> {
        let n = self.check_frames(frames1)?;
        self.check_frames(frames2)?;
        let r = self.config.resolution;
        let plane = delta_t
            .to_dtype(self.dtype())?
            .reshape((n, 1, 1, 1))?
            .broadcast_as((n, 1, r, r))?;
        let x = Tensor::cat(
            &[&plane, &frames1.to_dtype(self.dtype())?, &frames2.to_dtype(self.dtype())?],
            1,
        )?;
        self.motion_head.forward(&x, &Tensor::cat(&[f_t1, f_t2], 1)?)
    }

    /// Batched full score on frame pairs.
    pub fn discriminate_batch(
        &self,
        frames1: &Tensor,
        frames2: &Tensor,
        layouts1: &[FrameLayout],
        layouts2: &[FrameLayout],
        delta_t: &Tensor,
    ) -> Result<DiscriminatorScores> {
        let f1 = self.fuse_layout_batch(frames1, layouts1)?;
        let f2 = self.fuse_layout_batch(frames2, layouts2)?;
        let image1 = self.score_image_batch(frames1, &f1)?;
        let image2 = self.score_image_batch(frames2, &f2)?;
        let motion = self.score_motion_batch(frames1, frames2, delta_t, &f1, &f2)?;
        let total = aggregate_tensors(&image1, &image2, &motion)?;
        Ok(DiscriminatorScores {
            image1,
            image2,
            motion,
            total,
        })
    }

    /// Layout features `(C_t, R/4, R/4)` for one `(3, R, R)` frame.
    pub fn fuse_layout(&self, frame: &Tensor, layout: &FrameLayout) -> Result<Tensor> {
        Ok(self
            .fuse_layout_batch(&frame.unsqueeze(0)?, std::slice::from_ref(layout))?
            .get(0)?)
    }

    pub fn score_image(&self, frame: &Tensor, f_t: &Tensor) -> Result<f64> {
        scalar(&self.score_image_batch(&frame.unsqueeze(0)?, &f_t.unsqueeze(0)?)?)
    }

    pub fn score_motion(&self, pair: &FramePairSample, f_t1: &Tensor, f_t2: &Tensor) -> Result<f64> {
        let dt = Tensor::new(&[pair.normalized_delta_t()], &Device::Cpu)?;
        scalar(&self.score_motion_batch(
            &pair.frame1.unsqueeze(0)?,
            &pair.frame2.unsqueeze(0)?,
            &dt,
            &f_t1.unsqueeze(0)?,
            &f_t2.unsqueeze(0)?,
        )?)
    }

    /// Scores a clip on frames `t1` and `t2` with their per-frame layouts.
    pub fn discriminate(
        &self,
        clip: &VideoClip,
        layouts: &[FrameLayout],
        pair_indices: (usize, usize),
    ) -> Result<f64> {
        let (t1, t2) = pair_indices;
        let t = clip.num_frames();
        if t1 >= t || t2 >= t {
            return Err(Error::Input(format!(
                "frame pair ({t1}, {t2}) out of range for a {t}-frame clip"
            )));
        }
        if layouts.len() != t {
            return Err(Error::Input(format!("{t} frames but {} layouts", layouts.len())));
        }
        let pair = FramePairSample::from_clip(clip, t1, t2)?;
        let f1 = self.fuse_layout(&pair.frame1, &layouts[t1])?;
        let f2 = self.fuse_layout(&pair.frame2, &layouts[t2])?;
        let d1 = self.score_image(&pair.frame1, &f1)?;
        let d2 = self.score_image(&pair.frame2, &f2)?;
        let dm = self.score_motion(&pair, &f1, &f2)?;
        Ok(aggregate(d1, d2, dm))
    }
}

/// Per-sample head outputs of a batched evaluation, each `(N,)`.
#[derive(Debug, Clone)]
pub struct DiscriminatorScores {
    pub image1: Tensor,
    pub image2: Tensor,
    pub motion: Tensor,
    pub total: Tensor,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
