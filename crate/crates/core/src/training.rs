//! Adversarial training.
//!
//! Each step draws a batch of clips and one frame pair `(t1, t2)` per clip,
//! generates the same two frames from the clip's first-frame layout, updates
//! the discriminator on real versus generated pairs and then the generator
//! against the updated discriminator. Both networks see the real per-frame
//! layouts `L_t1`, `L_t2`.
//!
//! Randomness of step `s` comes from a stream derived from `(seed, s)` only,
//! so a run restored from a checkpoint continues exactly like an
//! uninterrupted one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{center_crop_clip, ClipRecord};
use crate::discriminator::{normalized_gap, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{CoordinateGrid, Generator, GeneratorConfig, LatentPair};
use crate::layout::{BoundingBox, FrameLayout, LayoutInstance};
use crate::nn::{softplus, to_f64_vec, ParamStore};
use crate::rng::{derive_seed, stream, tag};

/// How much of the layout the networks are allowed to see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// No layout at all: empty layouts, local pathway off.
    ActionLabel,
    /// Category labels only: one full-frame box per present category.
    MultiClassObjectLabel,
    /// As above on center-cropped clips.
    MultiClassObjectLabelCenterCrop,
    /// Boxes and labels, local (identity) pathway off.
    MultiObjectLayout,
    /// Boxes, labels and the local pathway.
    Full,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 5] = [
        ConditioningMode::ActionLabel,
        ConditioningMode::MultiClassObjectLabel,
        ConditioningMode::MultiClassObjectLabelCenterCrop,
        ConditioningMode::MultiObjectLayout,
        ConditioningMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConditioningMode::ActionLabel => "action_label",
            ConditioningMode::MultiClassObjectLabel => "multi_class_object_label",
            ConditioningMode::MultiClassObjectLabelCenterCrop => "multi_class_object_label_center_crop",
            ConditioningMode::MultiObjectLayout => "multi_object_layout",
            ConditioningMode::Full => "full",
        }
    }

    pub fn local_pathway(self) -> bool {
        self == ConditioningMode::Full
    }

    pub fn center_crop(self) -> bool {
        self == ConditioningMode::MultiClassObjectLabelCenterCrop
    }

    /// The layout as seen under this mode.
    pub fn apply(self, layout: &FrameLayout) -> FrameLayout {
        match self {
            ConditioningMode::ActionLabel => FrameLayout::empty(layout.frame_index()),
            ConditioningMode::MultiClassObjectLabel | ConditioningMode::MultiClassObjectLabelCenterCrop => {
                let cats: BTreeSet<usize> = layout.instances().iter().map(|i| i.category_id).collect();
                let instances = cats
                    .into_iter()
                    .map(|c| LayoutInstance::new(c, c as u32, BoundingBox::full()))
                    .collect();
                FrameLayout::new(layout.frame_index(), instances).expect("one instance per category")
            }
            ConditioningMode::MultiObjectLayout | ConditioningMode::Full => layout.clone(),
        }
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown conditioning mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub frames_per_epoch: usize,
    pub epochs: usize,
    /// Overrides the step count derived from `epochs` when set.
    pub max_steps: Option<u64>,
    pub clip_length: usize,
    /// Frame side; overrides the resolution of both networks.
    pub resolution: usize,
    pub conditioning_mode: ConditioningMode,
    pub discriminator_half_precision: bool,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Weight of the real-sample gradient penalty; 0 disables it.
    pub r1_gamma: f64,
    /// The penalty is applied every `r1_interval` steps, scaled by the interval.
    pub r1_interval: u64,
    pub center_crop_fraction: f64,
    pub telemetry_interval: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    /// Category count and instance limit of both networks come from here.
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            learning_rate: 5e-3,
            frames_per_epoch: 25_000,
            epochs: 1,
            max_steps: None,
            clip_length: 16,
            resolution: 64,
            conditioning_mode: ConditioningMode::Full,
            discriminator_half_precision: false,
            seed: 0,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            adam_epsilon: 1e-8,
            r1_gamma: 1.0,
            r1_interval: 16,
            center_crop_fraction: 0.75,
            telemetry_interval: 500,
            checkpoint_interval: 500,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            resolution: self.resolution,
            ..self.generator.clone()
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: self.resolution,
            num_categories: self.generator.num_categories,
            max_instances: self.generator.max_instances,
            half_precision: self.discriminator_half_precision,
            ..self.discriminator.clone()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.max_steps.unwrap_or_else(|| {
            let per_step = (self.batch_size * self.clip_length).max(1);
            (self.epochs * self.frames_per_epoch).div_ceil(per_step) as u64
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.clip_length < 2 {
            return Err(Error::Config("clip_length must be at least 2".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) || !(self.r1_gamma >= 0.0) {
            return Err(Error::Config("adam_epsilon must be positive and r1_gamma non-negative".into()));
        }
        if self.telemetry_interval == 0 {
            return Err(Error::Config("telemetry_interval must be positive".into()));
        }
        self.generator_config().validate()?;
        self.discriminator_config().validate()
    }
}

/// `d_loss = softplus(-real) + softplus(fake)`, `g_loss = softplus(-fake)`.
pub fn gan_losses(real_score: f64, fake_score: f64) -> (f64, f64) {
    (scalar_softplus(-real_score) + scalar_softplus(fake_score), scalar_softplus(-fake_score))
}

fn scalar_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Real-minus-fake gap of log-sigmoid scores, `log σ(real) - log σ(fake)`.
pub fn logit_gap(real_score: f64, fake_score: f64) -> f64 {
    scalar_softplus(-fake_score) - scalar_softplus(-real_score)
}

/// Two distinct frame indices drawn uniformly without replacement, and
/// their gap.
pub fn sample_frame_pair(clip_length: usize, rng: &mut impl Rng) -> Result<(usize, usize, usize)> {
    if clip_length < 2 {
        return Err(Error::Input(format!(
            "frame pairs need at least 2 frames, got {clip_length}"
        )));
    }
    let t1 = rng.random_range(0..clip_length);
    let mut t2 = rng.random_range(0..clip_length - 1);
    if t2 >= t1 {
        t2 += 1;
    }
    Ok((t1, t2, t1.abs_diff(t2)))
}

/// Adam with bias correction; moments are kept per named parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, params: &ParamStore) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in params.iter() {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.to_string(), (z.clone(), z));
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            steps: 0,
            moments,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; parameters without a gradient get a zero gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params.iter() {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("optimizer has no state for `{name}`")))?;
            let g = match grads.get(name) {
                Some(g) => g.detach(),
                None => var.as_tensor().zeros_like()?,
            };
            *m = (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?.detach();
            *v = (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?.detach();
            let denom = v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.epsilon)?;
            let update = m.affine(self.learning_rate / c1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }

    fn export(&self, prefix: &str, ck: &mut Checkpoint) {
        for (name, (m, v)) in &self.moments {
            ck.tensors.insert(format!("{prefix}.m/{name}"), m.clone());
            ck.tensors.insert(format!("{prefix}.v/{name}"), v.clone());
        }
    }

    fn import(&mut self, prefix: &str, ck: &Checkpoint, steps: u64, path: &Path) -> Result<()> {
        self.steps = steps;
        for (name, (m, v)) in self.moments.iter_mut() {
            for (slot, kind) in [(m, "m"), (v, "v")] {
                let key = format!("{prefix}.{kind}/{name}");
                let t = ck.tensors.get(&key).ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("missing tensor `{key}`"),
                })?;
                if t.dims() != slot.dims() {
                    return Err(Error::Checkpoint {
                        path: path.to_path_buf(),
                        reason: format!("tensor `{key}` has shape {:?}, expected {:?}", t.dims(), slot.dims()),
                    });
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        Ok(())
    }
}

fn collect_grads(params: &ParamStore, grads: &GradStore) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .filter_map(|(name, var)| grads.get(var.as_tensor()).map(|g| (name.to_string(), g.clone())))
        .collect()
}

/// Input gradients of the summed discriminator scores at a batch of real
/// frame pairs.
fn score_input_gradients(
    d: &Discriminator,
    real1: &Tensor,
    real2: &Tensor,
    layouts1: &[FrameLayout],
    layouts2: &[FrameLayout],
    delta_t: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let x1 = Var::from_tensor(real1)?;
    let x2 = Var::from_tensor(real2)?;
    let grads = d
        .discriminate_batch(x1.as_tensor(), x2.as_tensor(), layouts1, layouts2, delta_t)?
        .total
        .sum_all()?
        .backward()?;
    let grad = |x: &Var| -> Result<Tensor> {
        Ok(match grads.get(x.as_tensor()) {
            Some(g) => g.detach(),
            None => x.as_tensor().zeros_like()?,
        })
    };
    Ok((grad(&x1)?, grad(&x2)?))
}

/// Real-sample gradient penalty `γ/2 · mean_n ‖∇_x D(x_n)‖²`, where `x_n`
/// is the frame pair of sample `n`.
pub fn r1_penalty(
    d: &Discriminator,
    real1: &Tensor,
    real2: &Tensor,
    layouts1: &[FrameLayout],
    layouts2: &[FrameLayout],
    delta_t: &Tensor,
    gamma: f64,
) -> Result<f64> {
    let (g1, g2) = score_input_gradients(d, real1, real2, layouts1, layouts2, delta_t)?;
    let sq = to_f64_vec(&(g1.sqr()?.sum_all()? + g2.sqr()?.sum_all()?)?)?[0];
    Ok(0.5 * gamma * sq / real1.dim(0)? as f64)
}

/// [`r1_penalty`] and its gradient with respect to the discriminator
/// parameters.
///
/// The gradient is a Hessian-vector product `γ/N · H g` with `g = ∇_x D`,
/// taken as a central difference of parameter gradients at `x ± εg`. The
/// input moves by an RMS of 1e-6 in double precision and 1e-2 in single
/// precision, where smaller steps drown in rounding; the coarse step
/// smooths over activation kinks.
pub fn r1_gradients(
    d: &Discriminator,
    real1: &Tensor,
    real2: &Tensor,
    layouts1: &[FrameLayout],
    layouts2: &[FrameLayout],
    delta_t: &Tensor,
    gamma: f64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let (g1, g2) = score_input_gradients(d, real1, real2, layouts1, layouts2, delta_t)?;
    let sq = to_f64_vec(&(g1.sqr()?.sum_all()? + g2.sqr()?.sum_all()?)?)?[0];
    let n = real1.dim(0)? as f64;
    let penalty = 0.5 * gamma * sq / n;
    if sq == 0.0 || gamma == 0.0 {
        return Ok((penalty, BTreeMap::new()));
    }
    let rms = (sq / (2 * real1.elem_count()) as f64).sqrt();
    let shift = if real1.dtype() == DType::F64 { 1e-6 } else { 1e-2 };
    let eps = shift / rms;
    let shifted = |sign: f64| -> Result<BTreeMap<String, Tensor>> {
        let a = (real1 + g1.affine(sign * eps, 0.0)?)?;
        let b = (real2 + g2.affine(sign * eps, 0.0)?)?;
        let total = d.discriminate_batch(&a, &b, layouts1, layouts2, delta_t)?.total.sum_all()?;
        Ok(collect_grads(d.params(), &total.backward()?))
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    let scale = gamma / n / (2.0 * eps);
    let mut out = BTreeMap::new();
    for (name, p) in plus {
        if let Some(m) = minus.get(&name) {
            out.insert(name, (p - m)?.affine(scale, 0.0)?.detach());
        }
    }
    Ok((penalty, out))
}

/// One telemetry record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub step: u64,
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    pub r1_penalty: Option<f64>,
    pub logit_gap_mean: f64,
    pub logit_gap_std: f64,
    pub real_scores: Vec<f64>,
    pub fake_scores: Vec<f64>,
    /// Seconds since the run (or resumed segment) started; not part of the
    /// determinism contract.
    pub wall_clock: f64,
}

impl Telemetry {
    /// Record with the wall-clock field cleared, for exact comparisons.
    pub fn without_time(&self) -> Self {
        Self {
            wall_clock: 0.0,
            ..self.clone()
        }
    }
}

/// Mean and population standard deviation of per-sample logit gaps.
pub fn gap_statistics(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let gaps: Vec<f64> = real.iter().zip(fake).map(|(&r, &f)| logit_gap(r, f)).collect();
    let n = gaps.len().max(1) as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Inputs of one batch, shared by the discriminator and generator updates.
struct Batch {
    real1: Tensor,
    real2: Tensor,
    layouts1: Vec<FrameLayout>,
    layouts2: Vec<FrameLayout>,
    conditions: Vec<FrameLayout>,
    latents: Vec<LatentPair>,
    times: Vec<Vec<f64>>,
    delta_t: Tensor,
}

/// Generator, discriminator and their optimizers.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    step: u64,
    freeze_generator: bool,
    grid: CoordinateGrid,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut generator = Generator::new(
            config.generator_config(),
            dtype,
            &mut stream(config.seed, &[tag("init.generator")]),
        )?;
        generator.set_local_pathway(config.conditioning_mode.local_pathway());
        let discriminator = Discriminator::new(
            config.discriminator_config(),
            dtype,
            &mut stream(config.seed, &[tag("init.discriminator")]),
        )?;
        let adam = |p: &ParamStore| {
            Adam::new(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon, p)
        };
        let g_opt = adam(generator.params())?;
        let d_opt = adam(discriminator.params())?;
        let grid = CoordinateGrid::uniform(config.clip_length, config.resolution, config.resolution)?;
        Ok(Self {
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            step: 0,
            freeze_generator: false,
            grid,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    /// Number of completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Skips generator updates (the discriminator still trains).
    pub fn set_generator_frozen(&mut self, frozen: bool) {
        self.freeze_generator = frozen;
    }

    /// Applies the conditioning mode's data transform (center crop).
    pub fn prepare_dataset(&self, data: &[ClipRecord]) -> Result<Vec<ClipRecord>> {
        self.check_dataset(data)?;
        if self.config.conditioning_mode.center_crop() {
            data.iter()
                .map(|c| center_crop_clip(c, self.config.center_crop_fraction))
                .collect()
        } else {
            Ok(data.to_vec())
        }
    }

    fn check_dataset(&self, data: &[ClipRecord]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Input("training dataset is empty".into()));
        }
        let (t, r) = (self.config.clip_length, self.config.resolution);
        for c in data {
            if c.num_frames() != t || c.clip.height() != r || c.clip.width() != r {
                return Err(Error::Input(format!(
                    "clip `{}` is {}x{}x{} but training expects {t}x{r}x{r}",
                    c.source_id,
                    c.num_frames(),
                    c.clip.height(),
                    c.clip.width()
                )));
            }
        }
        Ok(())
    }

    fn batch_seed(&self, step: u64) -> u64 {
        derive_seed(self.config.seed, &[tag("step"), step])
    }

    fn make_batch(&self, data: &[ClipRecord], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let mode = self.config.conditioning_mode;
        let t = self.config.clip_length;
        let dtype = self.generator.dtype();
        let b = self.config.batch_size;
        let (mut f1, mut f2) = (Vec::with_capacity(b), Vec::with_capacity(b));
        let mut batch = Batch {
            real1: Tensor::zeros(1, dtype, &Device::Cpu)?,
            real2: Tensor::zeros(1, dtype, &Device::Cpu)?,
            layouts1: Vec::with_capacity(b),
            layouts2: Vec::with_capacity(b),
            conditions: Vec::with_capacity(b),
            latents: Vec::with_capacity(b),
            times: Vec::with_capacity(b),
            delta_t: Tensor::zeros(1, dtype, &Device::Cpu)?,
        };
        let mut gaps = Vec::with_capacity(b);
        for _ in 0..b {
            let clip = &data[rng.random_range(0..data.len())];
            let (t1, t2, dt) = sample_frame_pair(t, rng)?;
            f1.push(clip.clip.frame(t1)?);
            f2.push(clip.clip.frame(t2)?);
            batch.layouts1.push(mode.apply(&clip.layouts[t1]));
            batch.layouts2.push(mode.apply(&clip.layouts[t2]));
            batch.conditions.push(mode.apply(&clip.layouts[0]));
            batch.latents.push(LatentPair::sample(self.generator.config(), rng, dtype)?);
            let ts = self.grid.ts();
            batch.times.push(vec![ts[t1], ts[t2]]);
            gaps.push(normalized_gap(dt, t));
        }
        batch.real1 = Tensor::stack(&f1, 0)?.to_dtype(dtype)?;
        batch.real2 = Tensor::stack(&f2, 0)?.to_dtype(dtype)?;
        batch.delta_t = Tensor::new(gaps, &Device::Cpu)?.to_dtype(dtype)?;
        Ok(batch)
    }

    fn check_finite(&self, step: u64, loss: &'static str, value: f64) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step,
                loss,
                batch_seed: self.batch_seed(step),
            })
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &[ClipRecord]) -> Result<Telemetry> {
        self.check_dataset(data)?;
        let step = self.step + 1;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.batch_seed(step));
        let batch = self.make_batch(data, &mut rng)?;
        let b = self.config.batch_size;

        let trace = self
            .generator
            .forward(&batch.latents, &batch.conditions, &self.grid, &batch.times)?;
        let fake1 = trace.video.narrow(1, 0, 1)?.squeeze(1)?;
        let fake2 = trace.video.narrow(1, 1, 1)?.squeeze(1)?;

        // Discriminator: real and (detached) fake pairs in one batch.
        let d = &self.discriminator;
        let both = |r: &Tensor, f: &Tensor| Tensor::cat(&[r, &f.detach()], 0);
        let l1: Vec<_> = batch.layouts1.iter().chain(&batch.layouts1).cloned().collect();
        let l2: Vec<_> = batch.layouts2.iter().chain(&batch.layouts2).cloned().collect();
        let dt2 = Tensor::cat(&[&batch.delta_t, &batch.delta_t], 0)?;
        let scores = d
            .discriminate_batch(&both(&batch.real1, &fake1)?, &both(&batch.real2, &fake2)?, &l1, &l2, &dt2)?
            .total;
        let real = scores.narrow(0, 0, b)?;
        let fake = scores.narrow(0, b, b)?;
        let d_loss = (softplus(&real.neg()?)?.mean_all()? + softplus(&fake)?.mean_all()?)?;
        let d_loss_value = to_f64_vec(&d_loss)?[0];
        self.check_finite(step, "discriminator", d_loss_value)?;
        let mut d_grads = collect_grads(d.params(), &d_loss.backward()?);

        let r1_due = self.config.r1_gamma > 0.0
            && self.config.r1_interval > 0
            && step % self.config.r1_interval == 0;
        let r1_penalty = if r1_due {
            let (penalty, grads) = r1_gradients(
                &self.discriminator,
                &batch.real1,
                &batch.real2,
                &batch.layouts1,
                &batch.layouts2,
                &batch.delta_t,
                self.config.r1_gamma,
            )?;
            self.check_finite(step, "r1", penalty)?;
            // Lazy regularization: scale by the interval to keep its weight.
            let interval = self.config.r1_interval as f64;
            for (name, g) in grads {
                let g = g.affine(interval, 0.0)?;
                let sum = match d_grads.get(&name) {
                    Some(prev) => (prev + g)?,
                    None => g,
                };
                d_grads.insert(name, sum);
            }
            Some(penalty)
        } else {
            None
        };
        let real_scores = to_f64_vec(&real)?;
        let fake_scores = to_f64_vec(&fake)?;
        self.d_opt.step(self.discriminator.params(), &d_grads)?;
        if self.discriminator.half_precision() {
            self.discriminator.round_to_half()?;
        }

        // Generator against the updated discriminator.
        let g_scores = self
            .discriminator
            .discriminate_batch(&fake1, &fake2, &batch.layouts1, &batch.layouts2, &batch.delta_t)?
            .total;
        let g_loss = softplus(&g_scores.neg()?)?.mean_all()?;
        let g_loss_value = to_f64_vec(&g_loss)?[0];
        self.check_finite(step, "generator", g_loss_value)?;
        if !self.freeze_generator {
            let g_grads = collect_grads(self.generator.params(), &g_loss.backward()?);
            self.g_opt.step(self.generator.params(), &g_grads)?;
        }

        self.step = step;
        let (logit_gap_mean, logit_gap_std) = gap_statistics(&real_scores, &fake_scores);
        Ok(Telemetry {
            step,
            generator_loss: g_loss_value,
            discriminator_loss: d_loss_value,
            r1_penalty,
            logit_gap_mean,
            logit_gap_std,
            real_scores,
            fake_scores,
            wall_clock: started.elapsed().as_secs_f64(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "movgan-training-state",
            "step": self.step,
            "generator_steps": self.g_opt.steps(),
            "discriminator_steps": self.d_opt.steps(),
            "dtype": format!("{:?}", self.generator.dtype()),
            "config": serde_json::to_value(&self.config)?,
        }));
        ck.insert_store("generator", self.generator.params());
        ck.insert_store("discriminator", self.discriminator.params());
        self.g_opt.export("adam.generator", &mut ck);
        self.d_opt.export("adam.discriminator", &mut ck);
        Ok(ck)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuilds a trainer from a checkpoint, validating every tensor shape.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let meta = &ck.metadata;
        let config: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| bad(&format!("bad config: {e}")))?;
        let dtype = match meta["dtype"].as_str() {
            Some("F64") => DType::F64,
            Some("F32") => DType::F32,
            _ => return Err(bad("unknown dtype")),
        };
        let count = |key: &str| meta[key].as_u64().ok_or_else(|| bad(&format!("missing `{key}`")));
        let mut trainer = Self::with_dtype(config, dtype)?;
        ck.restore_store("generator", trainer.generator.params(), path)?;
        ck.restore_store("discriminator", trainer.discriminator.params(), path)?;
        trainer.g_opt.import("adam.generator", &ck, count("generator_steps")?, path)?;
        trainer.d_opt.import("adam.discriminator", &ck, count("discriminator_steps")?, path)?;
        trainer.step = count("step")?;
        Ok(trainer)
    }
}

/// Loads only the generator of a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, TrainConfig)> {
    let trainer = Trainer::load_checkpoint(path)?;
    let config = trainer.config.clone();
    Ok((trainer.generator, config))
}

/// Outcome of [`train_loop`].
#[derive(Debug)]
pub struct TrainingRun {
    /// Telemetry of every step of this invocation.
    pub history: Vec<Telemetry>,
    pub checkpoint: PathBuf,
    pub telemetry_log: PathBuf,
    pub trainer: Trainer,
}

/// Trains until `config.total_steps()`, appending telemetry to
/// `<out>/telemetry.jsonl` every `telemetry_interval` steps (and at the last
/// step) and writing `<out>/checkpoint.ckpt` every `checkpoint_interval`
/// steps and at the end. With `resume`, training continues from that
/// checkpoint's state; the step budget comes from `config`.
pub fn train_loop(
    dataset: &[ClipRecord],
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainingRun> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::load_checkpoint(p)?;
            if t.config.generator_config() != config.generator_config()
                || t.config.discriminator_config() != config.discriminator_config()
            {
                return Err(Error::Config("resume checkpoint was trained with different networks".into()));
            }
            t
        }
        None => Trainer::new(config.clone())?,
    };
    let data = trainer.prepare_dataset(dataset)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join("checkpoint.ckpt");
    let telemetry_log = out_dir.join("telemetry.jsonl");
    // A resumed run extends the log; a fresh run starts a new one.
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&telemetry_log)
        .map_err(|e| Error::io(&telemetry_log, e))?;
    let total = config.total_steps();
    let started = Instant::now();
    let mut history = Vec::new();
    while trainer.step < total {
        let mut record = trainer.train_step(&data)?;
        record.wall_clock = started.elapsed().as_secs_f64();
        let s = record.step;
        if s % config.telemetry_interval == 0 || s == total {
            let line = serde_json::to_string(&record)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&telemetry_log, e))?;
            log::info!(
                "step {s}: d_loss {:.4} g_loss {:.4} gap {:.4}",
                record.discriminator_loss,
                record.generator_loss,
                record.logit_gap_mean
            );
        }
        if config.checkpoint_interval > 0 && s % config.checkpoint_interval == 0 && s != total {
            trainer.save_checkpoint(&checkpoint)?;
        }
        history.push(record);
    }
    log.flush().map_err(|e| Error::io(&telemetry_log, e))?;
    trainer.save_checkpoint(&checkpoint)?;
    Ok(TrainingRun {
        history,
        checkpoint,
        telemetry_log,
        trainer,
    })
}
