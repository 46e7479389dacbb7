//! The layout-to-video generator.
//!
//! Three pieces feed the implicit video function:
//!
//! * the **global pathway** rasterizes the layout's label embeddings, encodes
//!   the raster with strided convolutions and appends the broadcast content
//!   latent `z_I`, giving `f_g`;
//! * the **local pathway** maps each instance's label embedding through a
//!   stack of style layers to a small feature map and places it into its box
//!   with a spatial transformer, giving `f_l` (zero away from boxes);
//! * the **synthesis module** evaluates, at every grid coordinate `(x, y, t)`,
//!   the first-layer coordinate feature
//!   `f = σx·w_x·x + σy·w_y·y + σt·w_t·t + b`, adds the motion trajectory
//!   `σt·t·A·f_m` produced from the motion latent `z_M`, and combines its sine
//!   with the upsampled `[f_g, f_l]` features through sine-activated layers.
//!
//! The motion term vanishes at `t = 0`, so the first frame is determined by
//! the layout and `z_I` alone and `z_M` only animates later frames.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    rasterize_batch, stn_place_sum, BoundingBox, FrameLayout, LabelEmbeddingTable, LayoutLimits,
};
use crate::nn::{leaky_relu, tensor_from_f64, Conv2d, Init, Linear, ParamStore};
use crate::video::VideoClip;

/// Coordinate frequencies of the first synthesis layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyConfig {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_t: f64,
}

impl FrequencyConfig {
    pub fn new(sigma_x: f64, sigma_y: f64, sigma_t: f64) -> Result<Self> {
        let cfg = Self {
            sigma_x,
            sigma_y,
            sigma_t,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("sigma_t", self.sigma_t),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for FrequencyConfig {
    fn default() -> Self {
        // Slow time axis: a quarter of the spatial frequency.
        Self {
            sigma_x: 8.0,
            sigma_y: 8.0,
            sigma_t: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_categories: usize,
    pub max_instances: usize,
    /// Output height and width; must be `base_size · 2^k`.
    pub resolution: usize,
    pub base_size: usize,
    pub embed_dim: usize,
    pub content_dim: usize,
    pub motion_dim: usize,
    pub motion_code_dim: usize,
    pub global_channels: usize,
    pub local_channels: usize,
    pub local_size: usize,
    pub style_layers: usize,
    pub style_dim: usize,
    pub decoder_channels: usize,
    pub coord_dim: usize,
    pub synthesis_dim: usize,
    pub synthesis_layers: usize,
    pub frequencies: FrequencyConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_categories: LayoutLimits::VIDVRD.num_categories,
            max_instances: LayoutLimits::VIDVRD.max_instances,
            resolution: 64,
            base_size: 4,
            embed_dim: 16,
            content_dim: 16,
            motion_dim: 8,
            motion_code_dim: 16,
            global_channels: 32,
            local_channels: 16,
            local_size: 4,
            style_layers: 4,
            style_dim: 64,
            decoder_channels: 64,
            coord_dim: 32,
            synthesis_dim: 64,
            synthesis_layers: 1,
            frequencies: FrequencyConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn limits(&self) -> LayoutLimits {
        LayoutLimits {
            num_categories: self.num_categories,
            max_instances: self.max_instances,
        }
    }

    /// Number of ×2 upsampling stages from the base map to the output.
    pub fn upsample_stages(&self) -> Result<usize> {
        if self.base_size == 0 || self.resolution % self.base_size != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a multiple of base size {}",
                self.resolution, self.base_size
            )));
        }
        let ratio = self.resolution / self.base_size;
        if !ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution {} must be base size {} times a power of two",
                self.resolution, self.base_size
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.upsample_stages()?;
        self.frequencies.validate()?;
        let positive = [
            ("num_categories", self.num_categories),
            ("embed_dim", self.embed_dim),
            ("content_dim", self.content_dim),
            ("motion_dim", self.motion_dim),
            ("motion_code_dim", self.motion_code_dim),
            ("global_channels", self.global_channels),
            ("local_channels", self.local_channels),
            ("local_size", self.local_size),
            ("style_dim", self.style_dim),
            ("decoder_channels", self.decoder_channels),
            ("coord_dim", self.coord_dim),
            ("synthesis_dim", self.synthesis_dim),
            ("synthesis_layers", self.synthesis_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.global_channels < 2 {
            return Err(Error::Config("global_channels must be at least 2".into()));
        }
        Ok(())
    }

    /// Channels of `f_g`.
    pub fn global_feature_channels(&self) -> usize {
        self.global_channels + self.content_dim
    }

    /// Side of the canvas the global pathway rasterizes onto.
    pub fn raster_size(&self) -> usize {
        (self.base_size * 4).max(4)
    }

    fn decoder_widths(&self) -> Result<Vec<usize>> {
        let stages = self.upsample_stages()?;
        Ok((0..=stages)
            .map(|k| (self.decoder_channels >> k).max(16.min(self.decoder_channels)))
            .collect())
    }
}

/// The latent pair `z = (z_I, z_M)`: a per-clip content vector broadcast to
/// every frame and a motion vector.
#[derive(Debug, Clone)]
pub struct LatentPair {
    pub content: Tensor,
    pub motion: Tensor,
}

impl LatentPair {
    pub fn new(content: Tensor, motion: Tensor) -> Result<Self> {
        if content.rank() != 1 || motion.rank() != 1 {
            return Err(Error::Input("latents must be vectors".into()));
        }
        Ok(Self { content, motion })
    }

    /// Standard normal draw.
    pub fn sample(config: &GeneratorConfig, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Self> {
        let mut draw = |n: usize| -> Result<Tensor> {
            let v: Vec<f64> = (0..n)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect();
            tensor_from_f64(v, &[n], dtype)
        };
        let content = draw(config.content_dim)?;
        let motion = draw(config.motion_dim)?;
        Ok(Self { content, motion })
    }

    pub fn with_motion(&self, motion: Tensor) -> Self {
        Self {
            content: self.content.clone(),
            motion,
        }
    }
}

/// Equally spaced (or caller-chosen) coordinate values for decoding the
/// implicit video: `x` has `W` entries, `y` has `H`, `t` has `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateGrid {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ts: Vec<f64>,
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn linspace01(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

impl CoordinateGrid {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, ts: Vec<f64>) -> Result<Self> {
        for (name, v) in [("x", &xs), ("y", &ys), ("t", &ts)] {
            if v.is_empty() {
                return Err(Error::Input(format!("{name} grid is empty")));
            }
            if !v.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) {
                return Err(Error::Input(format!("{name} grid must lie in [0, 1]")));
            }
            if !strictly_increasing(v) {
                return Err(Error::Input(format!("{name} grid must be strictly increasing")));
            }
        }
        Ok(Self { xs, ys, ts })
    }

    /// Equally spaced grid over `[0, 1]` on every axis. Frame `k` of `T` maps
    /// to `t = k / (T - 1)`.
    pub fn uniform(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Input("grid sizes must be positive".into()));
        }
        Self::new(linspace01(width), linspace01(height), linspace01(frames))
    }

    /// Same spatial grid restricted to frames `indices` (strictly increasing).
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let ts = indices
            .iter()
            .map(|&i| {
                self.ts
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("frame {i} outside grid")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.xs.clone(), self.ys.clone(), ts)
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }
    pub fn ys(&self) -> &[f64] {
        &self.ys
    }
    pub fn ts(&self) -> &[f64] {
        &self.ts
    }
    pub fn frames(&self) -> usize {
        self.ts.len()
    }
    pub fn height(&self) -> usize {
        self.ys.len()
    }
    pub fn width(&self) -> usize {
        self.xs.len()
    }
}

/// Residual upsampling block: nearest ×2, two 3×3 convolutions, and a 1×1
/// skip projection, without normalization.
#[derive(Debug, Clone)]
struct UpBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Conv2d,
}

impl UpBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng)?,
            skip: Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = x.upsample_nearest2d(2 * h, 2 * w)?;
        let main = leaky_relu(&self.conv1.forward(&up)?)?;
        let main = leaky_relu(&self.conv2.forward(&main)?)?;
        let skip = self.skip.forward(&up)?;
        Ok((main + skip)?.affine(std::f64::consts::FRAC_1_SQRT_2, 0.0)?)
    }
}

/// Intermediate results of one batched forward pass, exposed for tests and
/// diagnostics.
#[derive(Debug, Clone)]
pub struct GeneratorTrace {
    pub global: Tensor,
    pub local: Tensor,
    pub decoded: Tensor,
    pub motion_code: Tensor,
    /// `(N, T, 3, H, W)`
    pub video: Tensor,
}

/// Generator parameters plus the layers that read them.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    params: ParamStore,
    local_pathway: bool,
    labels: LabelEmbeddingTable,
    global_conv1: Conv2d,
    global_conv2: Conv2d,
    style: Vec<Linear>,
    style_out: Linear,
    decoder_stem: Conv2d,
    decoder_blocks: Vec<UpBlock>,
    motion_hidden: Linear,
    motion_out: Linear,
    motion_proj: Linear,
    w_x: Tensor,
    w_y: Tensor,
    w_t: Tensor,
    coord_bias: Tensor,
    synth_coord: Linear,
    synth_feature: Linear,
    synth_hidden: Vec<Linear>,
    synth_out: Linear,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new(dtype);
        let c = &config;

        let labels = LabelEmbeddingTable::new(p.create(
            "labels",
            &[c.num_categories, c.embed_dim],
            Init::Normal(1.0),
            rng,
        )?)?;

        let half = c.global_channels / 2;
        let global_conv1 = Conv2d::new(&mut p, "global.conv1", c.embed_dim, half, 3, 2, 1, rng)?;
        let global_conv2 =
            Conv2d::new(&mut p, "global.conv2", half, c.global_channels, 3, 2, 1, rng)?;

        let mut style = Vec::with_capacity(c.style_layers);
        let mut width = c.embed_dim;
        for k in 0..c.style_layers {
            style.push(Linear::new(&mut p, &format!("local.style{k}"), width, c.style_dim, true, rng)?);
            width = c.style_dim;
        }
        let style_out = Linear::new(
            &mut p,
            "local.out",
            width,
            c.local_channels * c.local_size * c.local_size,
            true,
            rng,
        )?;

        let widths = c.decoder_widths()?;
        let stem_in = c.global_feature_channels() + c.local_channels;
        let decoder_stem = Conv2d::new(&mut p, "decoder.stem", stem_in, widths[0], 3, 1, 1, rng)?;
        let decoder_blocks = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| UpBlock::new(&mut p, &format!("decoder.up{k}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        let decoded_channels = *widths.last().expect("at least one width");

        let motion_hidden = Linear::new(&mut p, "motion.hidden", c.motion_dim, 32, true, rng)?;
        let motion_out = Linear::new(&mut p, "motion.out", 32, c.motion_code_dim, true, rng)?;
        let motion_proj = Linear::with_init(
            &mut p,
            "synthesis.motion",
            c.motion_code_dim,
            c.coord_dim,
            false,
            Init::Normal(0.5 / (c.motion_code_dim as f64).sqrt()),
            rng,
        )?;

        let d = c.coord_dim;
        let w_x = p.create("synthesis.w_x", &[d], Init::Uniform(1.0), rng)?;
        let w_y = p.create("synthesis.w_y", &[d], Init::Uniform(1.0), rng)?;
        let w_t = p.create("synthesis.w_t", &[d], Init::Uniform(1.0), rng)?;
        let coord_bias = p.create(
            "synthesis.bias",
            &[d],
            Init::Uniform(std::f64::consts::PI),
            rng,
        )?;

        let s = c.synthesis_dim;
        let sine_init = |fan_in: usize| Init::Uniform((3.0 / fan_in as f64).sqrt());
        let synth_coord =
            Linear::with_init(&mut p, "synthesis.coord", d, s, false, sine_init(d + decoded_channels), rng)?;
        let synth_feature = Linear::with_init(
            &mut p,
            "synthesis.feature",
            decoded_channels,
            s,
            true,
            sine_init(d + decoded_channels),
            rng,
        )?;
        let synth_hidden = (1..c.synthesis_layers)
            .map(|k| Linear::with_init(&mut p, &format!("synthesis.hidden{k}"), s, s, true, sine_init(s), rng))
            .collect::<Result<Vec<_>>>()?;
        let synth_out = Linear::with_init(&mut p, "synthesis.rgb", s, 3, true, sine_init(s), rng)?;

        Ok(Self {
            config,
            params: p,
            local_pathway: true,
            labels,
            global_conv1,
            global_conv2,
            style,
            style_out,
            decoder_stem,
            decoder_blocks,
            motion_hidden,
            motion_out,
            motion_proj,
            w_x,
            w_y,
            w_t,
            coord_bias,
            synth_coord,
            synth_feature,
            synth_hidden,
            synth_out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn labels(&self) -> &LabelEmbeddingTable {
        &self.labels
    }

    /// The time weight `w_t` of the first synthesis layer.
    pub fn time_weight(&self) -> &Tensor {
        &self.w_t
    }

    /// Enables or disables the identity (local) pathway. When disabled `f_l`
    /// is all zeros.
    pub fn set_local_pathway(&mut self, enabled: bool) {
        self.local_pathway = enabled;
    }

    pub fn local_pathway(&self) -> bool {
        self.local_pathway
    }

    /// Coordinate grid matching the configured output resolution.
    pub fn grid(&self, frames: usize) -> Result<CoordinateGrid> {
        CoordinateGrid::uniform(frames, self.config.resolution, self.config.resolution)
    }

    fn check_layouts(&self, layouts: &[FrameLayout]) -> Result<()> {
        let limits = self.config.limits();
        layouts.iter().try_for_each(|l| l.validate(&limits))
    }

    fn stack_latents(&self, vs: &[&Tensor], dim: usize, what: &str) -> Result<Tensor> {
        for v in vs {
            if v.dims() != [dim] {
                return Err(Error::Config(format!(
                    "{what} latent must have dimension {dim}, got {:?}",
                    v.dims()
                )));
            }
        }
        Ok(Tensor::stack(vs, 0)?.to_dtype(self.dtype())?)
    }

    fn global_batch(&self, contents: &Tensor, layouts: &[FrameLayout]) -> Result<Tensor> {
        let c = &self.config;
        let r = c.raster_size();
        let raster = rasterize_batch(layouts, &self.labels, r, r)?;
        let x = leaky_relu(&self.global_conv1.forward(&raster)?)?;
        let x = leaky_relu(&self.global_conv2.forward(&x)?)?;
        let (n, _, h, w) = x.dims4()?;
        let z = contents
            .reshape((n, c.content_dim, 1, 1))?
            .broadcast_as((n, c.content_dim, h, w))?;
        Ok(Tensor::cat(&[&x, &z], 1)?)
    }

    fn local_batch(&self, layouts: &[FrameLayout]) -> Result<Tensor> {
        let c = &self.config;
        let b = c.base_size;
        let n = layouts.len();
        let zeros = || Tensor::zeros((n, c.local_channels, b, b), self.dtype(), &Device::Cpu);
        if !self.local_pathway {
            return Ok(zeros()?);
        }
        let canonical: Vec<_> = layouts.iter().map(|l| l.canonical_instances()).collect();
        let categories: Vec<u32> = canonical
            .iter()
            .flatten()
            .map(|i| i.category_id as u32)
            .collect();
        if categories.is_empty() {
            return Ok(zeros()?);
        }
        let idx = Tensor::from_vec(categories.clone(), categories.len(), &Device::Cpu)?;
        let mut h = self.labels.tensor().index_select(&idx, 0)?;
        for layer in &self.style {
            h = leaky_relu(&layer.forward(&h)?)?;
        }
        let k = c.local_size;
        let maps = self
            .style_out
            .forward(&h)?
            .reshape((categories.len(), c.local_channels, k, k))?;
        let mut out = Vec::with_capacity(n);
        let mut offset = 0;
        for inst in &canonical {
            let boxes: Vec<BoundingBox> = inst.iter().map(|i| i.bbox).collect();
            let feats = maps.narrow(0, offset, boxes.len())?;
            out.push(stn_place_sum(&feats, &boxes, b, b)?);
            offset += boxes.len();
        }
        Ok(Tensor::stack(&out, 0)?)
    }

    fn motion_batch(&self, motions: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.motion_hidden.forward(motions)?)?;
        self.motion_out.forward(&h)
    }

    fn decode(&self, global: &Tensor, local: &Tensor) -> Result<Tensor> {
        let mut x = leaky_relu(&self.decoder_stem.forward(&Tensor::cat(&[global, local], 1)?)?)?;
        for block in &self.decoder_blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// Spatial part of the first layer, `σx·w_x·x + σy·w_y·y + b`, as an
    /// `(H·W, D)` matrix in row-major pixel order.
    fn spatial_coords(&self, grid: &CoordinateGrid) -> Result<Tensor> {
        let f = &self.config.frequencies;
        let (h, w) = (grid.height(), grid.width());
        let dtype = self.dtype();
        let xs = tensor_from_f64(grid.xs().iter().map(|x| f.sigma_x * x).collect(), &[1, w, 1], dtype)?;
        let ys = tensor_from_f64(grid.ys().iter().map(|y| f.sigma_y * y).collect(), &[h, 1, 1], dtype)?;
        let d = self.config.coord_dim;
        let wx = self.w_x.reshape((1, 1, d))?;
        let wy = self.w_y.reshape((1, 1, d))?;
        let b = self.coord_bias.reshape((1, 1, d))?;
        let f = xs
            .broadcast_mul(&wx)?
            .broadcast_add(&ys.broadcast_mul(&wy)?)?
            .broadcast_add(&b)?;
        Ok(f.reshape((h * w, d))?)
    }

    /// First synthesis layer evaluated on a grid: `(T, H, W, D)` with
    /// `f = σx·w_x·x + σy·w_y·y + σt·w_t·t + b`.
    pub fn first_layer(&self, grid: &CoordinateGrid) -> Result<Tensor> {
        let d = self.config.coord_dim;
        let (t, h, w) = (grid.frames(), grid.height(), grid.width());
        let spatial = self.spatial_coords(grid)?.reshape((1, h * w, d))?;
        let st = self.config.frequencies.sigma_t;
        let ts = tensor_from_f64(grid.ts().iter().map(|t| st * t).collect(), &[t, 1, 1], self.dtype())?;
        let temporal = ts.broadcast_mul(&self.w_t.reshape((1, 1, d))?)?;
        Ok(spatial.broadcast_add(&temporal)?.reshape((t, h, w, d))?)
    }

    /// Global pathway for one clip: `(C_g + d_I, h0, w0)`.
    pub fn encode_global(&self, content: &Tensor, layout: &FrameLayout) -> Result<Tensor> {
        self.check_layouts(std::slice::from_ref(layout))?;
        let z = self.stack_latents(&[content], self.config.content_dim, "content")?;
        Ok(self.global_batch(&z, std::slice::from_ref(layout))?.get(0)?)
    }

    /// Local pathway for one clip: `(C_l, h0, w0)`.
    pub fn encode_local(&self, layout: &FrameLayout) -> Result<Tensor> {
        self.check_layouts(std::slice::from_ref(layout))?;
        Ok(self.local_batch(std::slice::from_ref(layout))?.get(0)?)
    }

    /// Motion code `f_m = G_M(z_M)`.
    pub fn motion_features(&self, motion: &Tensor) -> Result<Tensor> {
        let z = self.stack_latents(&[motion], self.config.motion_dim, "motion")?;
        Ok(self.motion_batch(&z)?.get(0)?)
    }

    /// Batched generation where every clip may use its own time values.
    /// `times[n]` lists the `t` coordinates of clip `n`; all lists must have
    /// the same length. The spatial grid is shared.
    pub fn forward(
        &self,
        latents: &[LatentPair],
        layouts: &[FrameLayout],
        xs_ys: &CoordinateGrid,
        times: &[Vec<f64>],
    ) -> Result<GeneratorTrace> {
        let n = latents.len();
        if layouts.len() != n || times.len() != n || n == 0 {
            return Err(Error::Input(format!(
                "batch mismatch: {n} latents, {} layouts, {} time lists",
                layouts.len(),
                times.len()
            )));
        }
        let res = self.config.resolution;
        if xs_ys.height() != res || xs_ys.width() != res {
            return Err(Error::Config(format!(
                "grid is {}x{} but the generator decodes at {res}x{res}",
                xs_ys.height(),
                xs_ys.width()
            )));
        }
        let frames = times[0].len();
        if frames == 0 || times.iter().any(|t| t.len() != frames) {
            return Err(Error::Input("every clip needs the same, non-zero number of times".into()));
        }
        self.check_layouts(layouts)?;
        let c = &self.config;
        let contents = self.stack_latents(
            &latents.iter().map(|l| &l.content).collect::<Vec<_>>(),
            c.content_dim,
            "content",
        )?;
        let motions = self.stack_latents(
            &latents.iter().map(|l| &l.motion).collect::<Vec<_>>(),
            c.motion_dim,
            "motion",
        )?;

        let global = self.global_batch(&contents, layouts)?;
        let local = self.local_batch(layouts)?;
        let decoded = self.decode(&global, &local)?;
        let motion_code = self.motion_batch(&motions)?;

        let (h, w) = (res, res);
        let hw = h * w;
        let d = c.coord_dim;
        let s = c.synthesis_dim;
        let cd = decoded.dims4()?.1;

        // Time-dependent first-layer term: σt·t·(w_t + A·f_m), (N, T, 1, D).
        let velocity = self
            .motion_proj
            .forward(&motion_code)?
            .broadcast_add(&self.w_t.reshape((1, d))?)?;
        let st = c.frequencies.sigma_t;
        let ts: Vec<f64> = times.iter().flatten().map(|t| st * t).collect();
        let ts = tensor_from_f64(ts, &[n, frames, 1], self.dtype())?;
        let temporal = ts
            .broadcast_mul(&velocity.reshape((n, 1, d))?)?
            .reshape((n, frames, 1, d))?;
        let spatial = self.spatial_coords(xs_ys)?.reshape((1, 1, hw, d))?;
        let coords = spatial.broadcast_add(&temporal)?.sin()?;

        let coord_term = self
            .synth_coord
            .forward(&coords.reshape((n * frames * hw, d))?)?
            .reshape((n, frames, hw, s))?;
        let feature_term = self
            .synth_feature
            .forward(&decoded.flatten_from(2)?.transpose(1, 2)?.contiguous()?.reshape((n * hw, cd))?)?
            .reshape((n, 1, hw, s))?;
        let mut x = coord_term.broadcast_add(&feature_term)?.sin()?.reshape((n * frames * hw, s))?;
        for layer in &self.synth_hidden {
            x = layer.forward(&x)?.sin()?;
        }
        let rgb = self.synth_out.forward(&x)?.tanh()?;
        let video = rgb
            .reshape((n, frames, h, w, 3))?
            .permute((0, 1, 4, 2, 3))?
            .contiguous()?;
        Ok(GeneratorTrace {
            global,
            local,
            decoded,
            motion_code,
            video,
        })
    }

    /// Batched generation on a common grid: `(N, T, 3, H, W)`.
    pub fn generate_batch(
        &self,
        latents: &[LatentPair],
        layouts: &[FrameLayout],
        grid: &CoordinateGrid,
    ) -> Result<Tensor> {
        let times = vec![grid.ts().to_vec(); latents.len()];
        Ok(self.forward(latents, layouts, grid, &times)?.video)
    }

    /// Decodes one clip conditioned on a single-frame layout.
    pub fn generate_video(
        &self,
        latent: &LatentPair,
        layout: &FrameLayout,
        grid: &CoordinateGrid,
    ) -> Result<VideoClip> {
        let video = self.generate_batch(std::slice::from_ref(latent), std::slice::from_ref(layout), grid)?;
        VideoClip::new(video.get(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::LayoutInstance;
    use crate::nn::to_f64_vec;
    use crate::rng::stream;

    pub(crate) fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            num_categories: 5,
            max_instances: 4,
            resolution: 16,
            base_size: 4,
            embed_dim: 6,
            content_dim: 5,
            motion_dim: 4,
            motion_code_dim: 6,
            global_channels: 8,
            local_channels: 4,
            local_size: 3,
            style_layers: 4,
            style_dim: 12,
            decoder_channels: 16,
            coord_dim: 8,
            synthesis_dim: 16,
            synthesis_layers: 2,
            frequencies: FrequencyConfig::default(),
        }
    }

    fn layout() -> FrameLayout {
        FrameLayout::new(
            0,
            vec![
                LayoutInstance::new(1, 0, BoundingBox::new(0.1, 0.1, 0.5, 0.6).unwrap()),
                LayoutInstance::new(3, 1, BoundingBox::new(0.4, 0.5, 0.9, 0.95).unwrap()),
            ],
        )
        .unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        to_f64_vec(a)
            .unwrap()
            .iter()
            .zip(to_f64_vec(b).unwrap())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn frequency_validation() {
        assert!(FrequencyConfig::new(1.0, 1.0, 0.0).is_err());
        assert!(FrequencyConfig::new(1.0, -1.0, 1.0).is_err());
        assert!(FrequencyConfig::new(1.0, 2.0, 0.5).is_ok());
    }

    #[test]
    fn resolution_must_be_power_of_two_multiple() {
        let mut c = tiny_config();
        c.resolution = 24;
        assert!(c.validate().is_err());
        c.resolution = 32;
        assert_eq!(c.upsample_stages().unwrap(), 3);
    }

    #[test]
    fn grid_validation() {
        assert!(CoordinateGrid::new(vec![0.0, 0.0], vec![0.0], vec![0.0]).is_err());
        assert!(CoordinateGrid::new(vec![0.0, 1.5], vec![0.0], vec![0.0]).is_err());
        let g = CoordinateGrid::uniform(5, 4, 3).unwrap();
        assert_eq!(g.ts(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.select_frames(&[0, 2]).unwrap().ts(), &[0.0, 0.5]);
        assert!(g.select_frames(&[2, 0]).is_err());
    }

    #[test]
    fn global_encoding_shape_and_determinism() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(1, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(2, &[]), DType::F32).unwrap();
        let a = g.encode_global(&z.content, &layout()).unwrap();
        let b = g.encode_global(&z.content, &layout()).unwrap();
        assert_eq!(a.dims(), &[8 + 5, 4, 4]);
        assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
        let empty = g.encode_global(&z.content, &FrameLayout::empty(0)).unwrap();
        assert!(max_abs_diff(&a, &empty) > 0.0);
    }

    #[test]
    fn local_encoding_cases() {
        let g = Generator::new(tiny_config(), DType::F64, &mut stream(1, &[])).unwrap();
        let empty = g.encode_local(&FrameLayout::empty(0)).unwrap();
        assert!(to_f64_vec(&empty).unwrap().iter().all(|&v| v == 0.0));

        let full = FrameLayout::new(0, vec![LayoutInstance::new(2, 0, BoundingBox::full())]).unwrap();
        let f = to_f64_vec(&g.encode_local(&full).unwrap()).unwrap();
        // every spatial position of the 4x4 canvas receives some energy
        for p in 0..16 {
            let energy: f64 = (0..4).map(|c| f[c * 16 + p].abs()).sum();
            assert!(energy > 0.0);
        }

        let a = FrameLayout::new(0, vec![LayoutInstance::new(1, 0, BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap())]).unwrap();
        let b = FrameLayout::new(0, vec![LayoutInstance::new(4, 1, BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap())]).unwrap();
        let both = FrameLayout::new(0, [a.instances(), b.instances()].concat()).unwrap();
        let sum = (g.encode_local(&a).unwrap() + g.encode_local(&b).unwrap()).unwrap();
        assert!(max_abs_diff(&sum, &g.encode_local(&both).unwrap()) < 1e-12);
    }

    #[test]
    fn motion_code_shape_and_determinism() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(1, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(3, &[]), DType::F32).unwrap();
        let a = g.motion_features(&z.motion).unwrap();
        assert_eq!(a.dims(), &[6]);
        assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&g.motion_features(&z.motion).unwrap()).unwrap());
    }

    #[test]
    fn first_layer_matches_scalar_loop() {
        let g = Generator::new(tiny_config(), DType::F64, &mut stream(4, &[])).unwrap();
        let grid = CoordinateGrid::new(vec![0.0, 0.7], vec![0.2, 1.0], vec![0.0, 0.4]).unwrap();
        let f = to_f64_vec(&g.first_layer(&grid).unwrap()).unwrap();
        let wx = to_f64_vec(&g.w_x).unwrap();
        let wy = to_f64_vec(&g.w_y).unwrap();
        let wt = to_f64_vec(&g.w_t).unwrap();
        let b = to_f64_vec(&g.coord_bias).unwrap();
        let s = g.config().frequencies;
        let d = 8;
        for (ti, t) in grid.ts().iter().enumerate() {
            for (yi, y) in grid.ys().iter().enumerate() {
                for (xi, x) in grid.xs().iter().enumerate() {
                    for k in 0..d {
                        let expect = s.sigma_x * wx[k] * x + s.sigma_y * wy[k] * y + s.sigma_t * wt[k] * t + b[k];
                        let got = f[((ti * 2 + yi) * 2 + xi) * d + k];
                        assert!((got - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn first_layer_at_origin_is_bias() {
        let g = Generator::new(tiny_config(), DType::F64, &mut stream(4, &[])).unwrap();
        let grid = CoordinateGrid::new(vec![0.0], vec![0.0], vec![0.0]).unwrap();
        let f = to_f64_vec(&g.first_layer(&grid).unwrap()).unwrap();
        assert_eq!(f, to_f64_vec(&g.coord_bias).unwrap());
    }

    #[test]
    fn video_shape_range_and_determinism() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(5, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(6, &[]), DType::F32).unwrap();
        let grid = g.grid(4).unwrap();
        let a = g.generate_video(&z, &layout(), &grid).unwrap();
        let b = g.generate_video(&z, &layout(), &grid).unwrap();
        assert_eq!(a.tensor().dims(), &[4, 3, 16, 16]);
        let va = a.values().unwrap();
        assert!(va.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(va, b.values().unwrap());
    }

    #[test]
    fn grid_mismatch_is_config_error() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(5, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(6, &[]), DType::F32).unwrap();
        let grid = CoordinateGrid::uniform(2, 8, 8).unwrap();
        assert!(matches!(g.generate_video(&z, &layout(), &grid), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_latent_dimension_is_config_error() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(5, &[])).unwrap();
        let bad = Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.motion_features(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn sub_grid_matches_full_generation() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(7, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(8, &[]), DType::F32).unwrap();
        let full_grid = g.grid(5).unwrap();
        let full = g.generate_video(&z, &layout(), &full_grid).unwrap();
        let sub = g
            .generate_video(&z, &layout(), &full_grid.select_frames(&[0, 2]).unwrap())
            .unwrap();
        for (k, &t) in [0usize, 2].iter().enumerate() {
            let d = max_abs_diff(&sub.frame(k).unwrap(), &full.frame(t).unwrap());
            assert!(d < 1e-6, "frame {t}: {d}");
        }
    }

    #[test]
    fn permuted_instances_give_identical_video() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(9, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(10, &[]), DType::F32).unwrap();
        let l = layout();
        let mut rev = l.instances().to_vec();
        rev.reverse();
        let permuted = FrameLayout::new(0, rev).unwrap();
        let grid = g.grid(3).unwrap();
        let a = g.generate_video(&z, &l, &grid).unwrap().values().unwrap();
        let b = g.generate_video(&z, &permuted, &grid).unwrap().values().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn layout_change_changes_output() {
        let g = Generator::new(tiny_config(), DType::F32, &mut stream(11, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(12, &[]), DType::F32).unwrap();
        let grid = g.grid(2).unwrap();
        let l = layout();
        let mut moved = l.instances().to_vec();
        moved[0].bbox = BoundingBox::new(0.3, 0.1, 0.7, 0.6).unwrap();
        let moved = FrameLayout::new(0, moved).unwrap();
        let a = g.generate_video(&z, &l, &grid).unwrap();
        let b = g.generate_video(&z, &moved, &grid).unwrap();
        assert!(max_abs_diff(a.tensor(), b.tensor()) > 0.0);
    }

    #[test]
    fn motion_latent_only_affects_later_frames() {
        let g = Generator::new(tiny_config(), DType::F64, &mut stream(13, &[])).unwrap();
        let z = LatentPair::sample(g.config(), &mut stream(14, &[]), DType::F64).unwrap();
        let other = LatentPair::sample(g.config(), &mut stream(15, &[]), DType::F64).unwrap();
        let z2 = z.with_motion(other.motion);
        let grid = g.grid(6).unwrap();
        let a = g.generate_video(&z, &layout(), &grid).unwrap();
        let b = g.generate_video(&z2, &layout(), &grid).unwrap();
        let per_frame: Vec<f64> = (0..6)
            .map(|t| {
                let d = (a.frame(t).unwrap() - b.frame(t).unwrap()).unwrap();
                to_f64_vec(&d).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        assert_eq!(per_frame[0], 0.0);
        assert!(per_frame[5] > per_frame[0]);
        assert!(per_frame[3] > 0.0);
    }
}
