//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use movgan::discriminator::{Discriminator, DiscriminatorConfig};
use movgan::generator::{CoordinateGrid, Generator, GeneratorConfig, LatentPair};
use movgan::layout::{BoundingBox, FrameLayout, LayoutInstance};
use movgan::nn::{tensor_from_f64, to_f64_vec};
use movgan::rng::stream;
use movgan::training::TrainConfig;
use movgan::Result;

/// Training config for 16×16 clips of 4 frames with small networks.
pub fn tiny_train_config() -> TrainConfig {
    let mut c = TrainConfig {
        batch_size: 4,
        clip_length: 4,
        resolution: 16,
        telemetry_interval: 1,
        checkpoint_interval: 0,
        ..Default::default()
    };
    c.generator.num_categories = 4;
    c.generator.max_instances = 3;
    c.generator.decoder_channels = 32;
    c.generator.synthesis_dim = 32;
    c.generator.style_dim = 32;
    c.discriminator.base_channels = 8;
    c.discriminator.max_channels = 32;
    c
}

pub fn random_layout(rng: &mut impl Rng, categories: usize, max_instances: usize) -> FrameLayout {
    let n = rng.random_range(1..=max_instances);
    let instances = (0..n)
        .map(|i| {
            let (w, h) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
            let (x, y) = (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h));
            let b = BoundingBox::new(x, y, x + w, y + h).unwrap();
            LayoutInstance::new(rng.random_range(0..categories), i as u32, b)
        })
        .collect();
    FrameLayout::new(0, instances).unwrap()
}

/// Relative error with a floor so that two near-zero values agree.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Miniature double-precision generator and discriminator for gradient
/// checks: 16×16 frames, 4 frames, at most 2 instances.
pub struct MiniModel {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub layout: FrameLayout,
    pub grid: CoordinateGrid,
    pub projection: Tensor,
    pub content: Vec<f64>,
    pub motion: Vec<f64>,
}

/// Which input a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Content,
    Motion,
    TimeWeight,
    GeneratorLabels,
    DiscriminatorLabels,
}

/// Which scalar is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    /// Fixed random projection of the generated clip.
    Video,
    /// Discriminator score of generated frames 0 and 3.
    Logit,
}

impl MiniModel {
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = stream(seed, &[]);
        let gc = GeneratorConfig {
            resolution: 16,
            num_categories: 3,
            max_instances: 2,
            decoder_channels: 16,
            synthesis_dim: 16,
            style_dim: 16,
            ..Default::default()
        };
        let dc = DiscriminatorConfig {
            resolution: 16,
            num_categories: 3,
            max_instances: 2,
            base_channels: 8,
            max_channels: 16,
            ..Default::default()
        };
        let generator = Generator::new(gc, DType::F64, &mut rng)?;
        let discriminator = Discriminator::new(dc, DType::F64, &mut rng)?;
        let layout = FrameLayout::new(
            0,
            vec![
                LayoutInstance::new(0, 0, BoundingBox::new(0.1, 0.15, 0.55, 0.6)?),
                LayoutInstance::new(2, 1, BoundingBox::new(0.4, 0.35, 0.9, 0.95)?),
            ],
        )?;
        let grid = generator.grid(4)?;
        let n = 4 * 3 * 16 * 16;
        let projection = tensor_from_f64((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), &[1, 4, 3, 16, 16], DType::F64)?;
        let z = LatentPair::sample(generator.config(), &mut rng, DType::F64)?;
        Ok(Self {
            content: to_f64_vec(&z.content)?,
            motion: to_f64_vec(&z.motion)?,
            generator,
            discriminator,
            layout,
            grid,
            projection,
        })
    }

    fn scalar(&self, content: &Tensor, motion: &Tensor, output: Output) -> Result<Tensor> {
        let z = LatentPair::new(content.clone(), motion.clone())?;
        let times = vec![self.grid.ts().to_vec()];
        let video = self
            .generator
            .forward(&[z], std::slice::from_ref(&self.layout), &self.grid, &times)?
            .video;
        Ok(match output {
            Output::Video => (video * &self.projection)?.sum_all()?,
            Output::Logit => {
                let f1 = video.narrow(1, 0, 1)?.squeeze(1)?;
                let f2 = video.narrow(1, 3, 1)?.squeeze(1)?;
                let dt = tensor_from_f64(vec![1.0], &[1], DType::F64)?;
                let l = std::slice::from_ref(&self.layout);
                self.discriminator.discriminate_batch(&f1, &f2, l, l, &dt)?.total.sum_all()?
            }
        })
    }

    fn latents(&self) -> Result<(Var, Var)> {
        Ok((
            Var::from_tensor(&tensor_from_f64(self.content.clone(), &[self.content.len()], DType::F64)?)?,
            Var::from_tensor(&tensor_from_f64(self.motion.clone(), &[self.motion.len()], DType::F64)?)?,
        ))
    }

    fn param(&self, target: Target) -> Option<(&movgan::nn::ParamStore, &'static str)> {
        match target {
            Target::TimeWeight => Some((self.generator.params(), "synthesis.w_t")),
            Target::GeneratorLabels => Some((self.generator.params(), "labels")),
            Target::DiscriminatorLabels => Some((self.discriminator.params(), "labels")),
            Target::Content | Target::Motion => None,
        }
    }

    /// Number of scalar coordinates of a target.
    pub fn size(&self, target: Target) -> usize {
        match self.param(target) {
            Some((store, name)) => store.get(name).unwrap().elem_count(),
            None if target == Target::Content => self.content.len(),
            None => self.motion.len(),
        }
    }

    /// Analytic gradient of `output` with respect to every coordinate of
    /// `target`.
    pub fn analytic(&self, target: Target, output: Output) -> Result<Vec<f64>> {
        let (c, m) = self.latents()?;
        let grads = self.scalar(c.as_tensor(), m.as_tensor(), output)?.backward()?;
        let t = match (target, self.param(target)) {
            (_, Some((store, name))) => store.get(name).unwrap().as_tensor().clone(),
            (Target::Content, None) => c.as_tensor().clone(),
            _ => m.as_tensor().clone(),
        };
        match grads.get(&t) {
            Some(g) => to_f64_vec(g),
            None => Ok(vec![0.0; t.elem_count()]),
        }
    }

    fn value(&self, output: Output) -> Result<f64> {
        let (c, m) = self.latents()?;
        Ok(to_f64_vec(&self.scalar(c.as_tensor(), m.as_tensor(), output)?)?[0])
    }

    /// Central difference of `output` along coordinate `k` of `target`.
    pub fn numeric(&mut self, target: Target, output: Output, k: usize, h: f64) -> Result<f64> {
        let eval = |this: &mut Self, delta: f64| -> Result<f64> {
            match this.param(target) {
                Some((store, name)) => {
                    let var = store.get(name).unwrap();
                    let mut v = to_f64_vec(var.as_tensor())?;
                    let original = v[k];
                    v[k] += delta;
                    store.assign(name, &tensor_from_f64(v.clone(), var.dims(), DType::F64)?)?;
                    let out = this.value(output);
                    v[k] = original;
                    store.assign(name, &tensor_from_f64(v, var.dims(), DType::F64)?)?;
                    out
                }
                None => {
                    let latent = if target == Target::Content { &mut this.content } else { &mut this.motion };
                    latent[k] += delta;
                    let out = this.value(output);
                    let latent = if target == Target::Content { &mut this.content } else { &mut this.motion };
                    latent[k] -= delta;
                    out
                }
            }
        };
        let plus = eval(self, h)?;
        let minus = eval(self, -h)?;
        Ok((plus - minus) / (2.0 * h))
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl AuditReport {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Samples `per_pair` coordinates for each (target, output) combination and
/// counts those with relative error below `tol`.
pub fn gradient_audit(
    model: &mut MiniModel,
    pairs: &[(Target, Output)],
    per_pair: usize,
    tol: f64,
    seed: u64,
) -> Result<AuditReport> {
    let mut rng = stream(seed, &[]);
    let mut report = AuditReport::default();
    for &(target, output) in pairs {
        let analytic = model.analytic(target, output)?;
        let n = model.size(target);
        for _ in 0..per_pair {
            let k = rng.random_range(0..n);
            let numeric = model.numeric(target, output, k, 1e-5)?;
            let err = relative_error(analytic[k], numeric);
            report.checked += 1;
            if err < tol {
                report.passed += 1;
            }
            report.worst = report.worst.max(err);
        }
    }
    Ok(report)
}

/// Every combination that reaches a target: the video does not depend on the
/// discriminator's labels.
pub const AUDIT_PAIRS: [(Target, Output); 9] = [
    (Target::Content, Output::Video),
    (Target::Motion, Output::Video),
    (Target::TimeWeight, Output::Video),
    (Target::GeneratorLabels, Output::Video),
    (Target::Content, Output::Logit),
    (Target::Motion, Output::Logit),
    (Target::TimeWeight, Output::Logit),
    (Target::GeneratorLabels, Output::Logit),
    (Target::DiscriminatorLabels, Output::Logit),
];
