//! Fréchet distances over surrogate features, the layout-adherence probe and
//! layout editing.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClipRecord, ToyShape};
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentPair};
use crate::layout::{union_coverage, BoundingBox, FrameLayout, LayoutInstance, LayoutLimits};
use crate::nn::{to_f64_vec, Conv2d, ParamStore};
use crate::rng::{stream, tag};
use crate::training::ConditioningMode;
use crate::video::VideoClip;

/// Running mean and co-moment matrix of a stream of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    n: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Adds one vector (Welford update).
    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Input(format!(
                "feature of dimension {} pushed into {}-dimensional stats",
                x.len(),
                self.dim()
            )));
        }
        let x = DVector::from_column_slice(x);
        self.n += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let after = &x - &self.mean;
        self.comoment += &delta * after.transpose();
        Ok(())
    }

    /// Combines two partial accumulations.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Input("cannot merge stats of different dimensions".into()));
        }
        if self.n == 0 {
            return Ok(other.clone());
        }
        if other.n == 0 {
            return Ok(self.clone());
        }
        let n = self.n + other.n;
        let delta = &other.mean - &self.mean;
        let w = (self.n * other.n) as f64 / n as f64;
        Ok(Self {
            n,
            mean: &self.mean + &delta * (other.n as f64 / n as f64),
            comoment: &self.comoment + &other.comoment + &delta * delta.transpose() * w,
        })
    }

    /// Unbiased covariance (`n - 1` divisor); needs at least two samples.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.n < 2 {
            return Err(Error::Input(format!(
                "covariance needs at least 2 samples, have {}",
                self.n
            )));
        }
        Ok(&self.comoment / (self.n - 1) as f64)
    }
}

/// Accumulates stats over an iterator of equal-length vectors.
pub fn accumulate_stats<'a>(dim: usize, features: impl IntoIterator<Item = &'a [f64]>) -> Result<FeatureStats> {
    let mut s = FeatureStats::new(dim);
    for f in features {
        s.push(f)?;
    }
    Ok(s)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of the square root is computed as `Σ √λ` over the eigenvalues
/// of the symmetric matrix `Σa^{1/2} Σb Σa^{1/2}`, which is similar to
/// `Σa Σb`; negative eigenvalues from round-off are clipped to zero, as is
/// the final result.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (ca, cb) = (a.covariance()?, b.covariance()?);
    let diff = a.mean() - b.mean();
    let root_a = psd_sqrt(&ca);
    let inner = &root_a * &cb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * trace_root;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// One feature vector per frame.
    Image,
    /// One feature vector per clip.
    Video,
}

/// Maps clips to feature vectors.
pub trait FeatureExtractor {
    fn mode(&self) -> FeatureMode;
    fn dim(&self) -> usize;
    /// Human-readable identity recorded with every score.
    fn identity(&self) -> String;
    /// Features of one clip: `T` vectors in image mode, one in video mode.
    fn extract(&self, clip: &VideoClip) -> Result<Vec<Vec<f64>>>;
}

/// Fixed random convolutional features: two stride-2 stages of 2D
/// convolutions (image mode) or of spatio-temporal convolutions with three
/// temporal taps (video mode), ReLU, then per-channel means and standard
/// deviations over all positions.
#[derive(Debug, Clone)]
pub struct SurrogateExtractor {
    mode: FeatureMode,
    seed: u64,
    taps: usize,
    stage1: Vec<Conv2d>,
    stage2: Vec<Conv2d>,
    channels: usize,
}

impl SurrogateExtractor {
    pub fn new(mode: FeatureMode, seed: u64) -> Result<Self> {
        let mut rng: ChaCha8Rng = stream(seed, &[tag("extractor"), mode as u64]);
        let mut p = ParamStore::new(DType::F32);
        let taps = match mode {
            FeatureMode::Image => 1,
            FeatureMode::Video => 3,
        };
        let (c1, c2) = (16, 32);
        let stage1 = (0..taps)
            .map(|k| Conv2d::new(&mut p, &format!("s1.t{k}"), 3, c1, 3, 2, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let stage2 = (0..taps)
            .map(|k| Conv2d::new(&mut p, &format!("s2.t{k}"), c1, c2, 3, 2, 1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode,
            seed,
            taps,
            stage1,
            stage2,
            channels: c2,
        })
    }

    /// Temporal convolution with `taps` offsets and no padding:
    /// `(T, C, H, W)` → `(T - taps + 1, C', H', W')`.
    fn temporal(&self, convs: &[Conv2d], x: &Tensor) -> Result<Tensor> {
        let t = x.dim(0)?;
        if t < self.taps {
            return Err(Error::Input(format!(
                "video features need at least {} frames, got {t}",
                self.taps
            )));
        }
        let out_t = t - self.taps + 1;
        let mut acc: Option<Tensor> = None;
        for (k, conv) in convs.iter().enumerate() {
            let y = conv.forward(&x.narrow(0, k, out_t)?)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one tap"))
    }

    fn pooled(features: &Tensor) -> Result<Vec<Vec<f64>>> {
        // (N, C, P) -> mean and std over P
        let mean = features.mean_keepdim(2)?;
        let var = features.broadcast_sub(&mean)?.sqr()?.mean(2)?;
        let out = Tensor::cat(&[&mean.squeeze(2)?, &var.sqrt()?], 1)?;
        let n = out.dim(0)?;
        let flat = to_f64_vec(&out)?;
        let d = flat.len() / n.max(1);
        Ok(flat.chunks(d).map(<[f64]>::to_vec).collect())
    }
}

impl FeatureExtractor for SurrogateExtractor {
    fn mode(&self) -> FeatureMode {
        self.mode
    }

    fn dim(&self) -> usize {
        2 * self.channels
    }

    fn identity(&self) -> String {
        let m = match self.mode {
            FeatureMode::Image => "image",
            FeatureMode::Video => "video",
        };
        format!("surrogate-random-conv-{m}-seed{}", self.seed)
    }

    fn extract(&self, clip: &VideoClip) -> Result<Vec<Vec<f64>>> {
        // Each stage shortens the clip by `taps - 1` frames.
        let needed = 2 * (self.taps - 1) + 1;
        if clip.num_frames() < needed {
            return Err(Error::Input(format!(
                "video features need clips of at least {needed} frames, got {}",
                clip.num_frames()
            )));
        }
        let x = clip.tensor().to_dtype(DType::F32)?;
        let h = self.temporal(&self.stage1, &x)?.relu()?;
        let h = self.temporal(&self.stage2, &h)?.relu()?;
        let (t, c, hh, ww) = h.dims4()?;
        match self.mode {
            FeatureMode::Image => Self::pooled(&h.reshape((t, c, hh * ww))?),
            FeatureMode::Video => {
                let per_clip = h.permute((1, 0, 2, 3))?.reshape((1, c, t * hh * ww))?;
                Self::pooled(&per_clip)
            }
        }
    }
}

/// Feature stats of a set of clips.
pub fn clip_stats(extractor: &dyn FeatureExtractor, clips: &[VideoClip]) -> Result<FeatureStats> {
    let mut s = FeatureStats::new(extractor.dim());
    for c in clips {
        for f in extractor.extract(c)? {
            s.push(&f)?;
        }
    }
    Ok(s)
}

/// Fréchet distance between the features of two clip sets.
pub fn frechet_between(extractor: &dyn FeatureExtractor, a: &[VideoClip], b: &[VideoClip]) -> Result<f64> {
    frechet_distance(&clip_stats(extractor, a)?, &clip_stats(extractor, b)?)
}

/// Generated clip with the condition it was generated from.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub clip: VideoClip,
    pub condition: FrameLayout,
}

/// Generates `n` clips of `frames` frames conditioned on the first-frame
/// layouts of `dataset` (cycled), with latents drawn from `(seed, i)`.
pub fn generate_samples(
    generator: &Generator,
    dataset: &[ClipRecord],
    n: usize,
    frames: usize,
    seed: u64,
    conditioning: ConditioningMode,
) -> Result<Vec<GeneratedSample>> {
    if dataset.is_empty() {
        return Err(Error::Input("no conditions to generate from".into()));
    }
    let grid = generator.grid(frames)?;
    let mut out = Vec::with_capacity(n);
    let chunk = 8;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let conditions: Vec<FrameLayout> = idx
            .iter()
            .map(|&i| conditioning.apply(&dataset[i % dataset.len()].layouts[0]))
            .collect();
        let latents = idx
            .iter()
            .map(|&i| LatentPair::sample(generator.config(), &mut stream(seed, &[tag("sample"), i as u64]), generator.dtype()))
            .collect::<Result<Vec<_>>>()?;
        let videos = generator.generate_batch(&latents, &conditions, &grid)?;
        for (k, condition) in conditions.into_iter().enumerate() {
            out.push(GeneratedSample {
                clip: VideoClip::new(videos.get(k)?)?,
                condition,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score: f64,
    pub mode: FeatureMode,
    pub real_samples: usize,
    pub generated_samples: usize,
    pub extractor: String,
}

/// Fréchet score of generated clips against the whole dataset. Image mode
/// compares per-frame features, video mode per-clip features.
pub fn evaluate(
    generator: &Generator,
    dataset: &[ClipRecord],
    extractor: &dyn FeatureExtractor,
    n_samples: usize,
    seed: u64,
    conditioning: ConditioningMode,
) -> Result<EvalReport> {
    if n_samples < 2 {
        return Err(Error::Input(format!("evaluation needs at least 2 samples, got {n_samples}")));
    }
    if dataset.len() < 2 {
        return Err(Error::Input("evaluation needs at least 2 real clips".into()));
    }
    let frames = dataset[0].num_frames();
    let real: Vec<VideoClip> = dataset.iter().map(|c| c.clip.clone()).collect();
    let fake: Vec<VideoClip> = generate_samples(generator, dataset, n_samples, frames, seed, conditioning)?
        .into_iter()
        .map(|s| s.clip)
        .collect();
    let real_stats = clip_stats(extractor, &real)?;
    let fake_stats = clip_stats(extractor, &fake)?;
    Ok(EvalReport {
        score: frechet_distance(&real_stats, &fake_stats)?,
        mode: extractor.mode(),
        real_samples: real_stats.count(),
        generated_samples: fake_stats.count(),
        extractor: extractor.identity(),
    })
}

/// Colors of the synthetic categories, indexed by category id.
pub fn toy_palette() -> Vec<[f32; 3]> {
    ToyShape::ALL.iter().map(|s| s.color()).collect()
}

/// Color distance at which a pixel stops counting toward a category.
pub const ADHERENCE_COLOR_RADIUS: f64 = 1.0;

fn color_weight(px: [f64; 3], color: [f32; 3]) -> f64 {
    let d = px
        .iter()
        .zip(color)
        .map(|(a, b)| (a - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    (1.0 - d / ADHERENCE_COLOR_RADIUS).max(0.0)
}

/// Fraction of category-colored pixel mass of frame 0 that falls inside the
/// boxes of that category, averaged over instances and then clips.
///
/// Each pixel weighs `max(0, 1 − ‖rgb − color‖ / r)` toward a category; an
/// instance with no colored mass anywhere scores 0. Clips without instances
/// are skipped.
pub fn layout_adherence(clips: &[VideoClip], layouts: &[FrameLayout], palette: &[[f32; 3]]) -> Result<f64> {
    if clips.len() != layouts.len() {
        return Err(Error::Input(format!("{} clips but {} layouts", clips.len(), layouts.len())));
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    for (clip, layout) in clips.iter().zip(layouts) {
        if layout.is_empty() {
            continue;
        }
        let (h, w) = (clip.height(), clip.width());
        let frame = to_f64_vec(&clip.frame(0)?)?;
        let mut scores = Vec::with_capacity(layout.len());
        for inst in layout.instances() {
            let color = *palette.get(inst.category_id).ok_or_else(|| {
                Error::Input(format!("no color known for category {}", inst.category_id))
            })?;
            let boxes: Vec<BoundingBox> = layout
                .instances()
                .iter()
                .filter(|i| i.category_id == inst.category_id)
                .map(|i| i.bbox)
                .collect();
            let inside = union_coverage(&boxes, h, w);
            let (mut total, mut within) = (0.0, 0.0);
            for (p, &covered) in inside.iter().enumerate() {
                let px = [frame[p], frame[h * w + p], frame[2 * h * w + p]];
                let m = color_weight(px, color);
                total += m;
                if covered {
                    within += m;
                }
            }
            scores.push(if total > 0.0 { within / total } else { 0.0 });
        }
        per_clip.push(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    if per_clip.is_empty() {
        return Ok(0.0);
    }
    Ok(per_clip.iter().sum::<f64>() / per_clip.len() as f64)
}

/// Adherence expected from spatially uniform color mass: the covered area
/// fraction of each instance's category boxes, averaged like
/// [`layout_adherence`].
pub fn adherence_chance_level(layouts: &[FrameLayout], height: usize, width: usize) -> f64 {
    let per_clip: Vec<f64> = layouts
        .iter()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let s: f64 = l
                .instances()
                .iter()
                .map(|inst| {
                    let boxes: Vec<BoundingBox> = l
                        .instances()
                        .iter()
                        .filter(|i| i.category_id == inst.category_id)
                        .map(|i| i.bbox)
                        .collect();
                    let cov = union_coverage(&boxes, height, width);
                    cov.iter().filter(|&&c| c).count() as f64 / cov.len() as f64
                })
                .sum();
            s / l.len() as f64
        })
        .collect();
    if per_clip.is_empty() {
        0.0
    } else {
        per_clip.iter().sum::<f64>() / per_clip.len() as f64
    }
}

/// A structural change to a frame layout.
#[derive(Debug, Clone, PartialEq)]
pub enum LayoutEdit {
    Add(LayoutInstance),
    Remove(u32),
    Resize(u32, BoundingBox),
}

/// Applies an edit, returning a new layout; the input is never modified.
pub fn edit_layout(layout: &FrameLayout, edit: &LayoutEdit, limits: &LayoutLimits) -> Result<FrameLayout> {
    let mut instances = layout.instances().to_vec();
    match edit {
        LayoutEdit::Add(inst) => {
            if layout.find(inst.instance_id).is_some() {
                return Err(Error::Input(format!("instance {} already exists", inst.instance_id)));
            }
            if instances.len() >= limits.max_instances {
                return Err(Error::Input(format!(
                    "layout already holds the maximum of {} instances",
                    limits.max_instances
                )));
            }
            if inst.category_id >= limits.num_categories {
                return Err(Error::Input(format!("category {} out of range", inst.category_id)));
            }
            instances.push(*inst);
        }
        LayoutEdit::Remove(id) => {
            let pos = instances
                .iter()
                .position(|i| i.instance_id == *id)
                .ok_or_else(|| Error::Input(format!("unknown instance {id}")))?;
            instances.remove(pos);
        }
        LayoutEdit::Resize(id, bbox) => {
            let inst = instances
                .iter_mut()
                .find(|i| i.instance_id == *id)
                .ok_or_else(|| Error::Input(format!("unknown instance {id}")))?;
            inst.bbox = *bbox;
        }
    }
    FrameLayout::new(layout.frame_index(), instances)
}

/// Parses an edit script, one edit per line:
///
/// ```text
/// add <instance_id> <category_id> x0 y0 x1 y1
/// remove <instance_id>
/// resize <instance_id> x0 y0 x1 y1
/// ```
///
/// Blank lines and `#` comments are ignored.
pub fn parse_edit_script(text: &str) -> Result<Vec<LayoutEdit>> {
    let mut edits = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::validation("edit script", format!("line {}: {reason}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad(&format!("bad integer `{s}`")));
        let bbox = |s: &[&str]| -> Result<BoundingBox> {
            let mut c = [0.0; 4];
            for (slot, v) in c.iter_mut().zip(s) {
                *slot = v.parse().map_err(|_| bad(&format!("bad coordinate `{v}`")))?;
            }
            BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(&e.to_string()))
        };
        let edit = match (f[0], f.len()) {
            ("add", 7) => LayoutEdit::Add(LayoutInstance::new(int(f[2])? as usize, int(f[1])? as u32, bbox(&f[3..])?)),
            ("remove", 2) => LayoutEdit::Remove(int(f[1])? as u32),
            ("resize", 6) => LayoutEdit::Resize(int(f[1])? as u32, bbox(&f[2..])?),
            ("add" | "remove" | "resize", k) => return Err(bad(&format!("wrong number of fields ({k})"))),
            (op, _) => return Err(bad(&format!("unknown operation `{op}`"))),
        };
        edits.push(edit);
    }
    Ok(edits)
}

/// Uniform noise clips in `[-1, 1]`.
pub fn noise_clips(n: usize, frames: usize, height: usize, width: usize, seed: u64) -> Result<Vec<VideoClip>> {
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, &[tag("noise"), i as u64]);
            let v: Vec<f32> = (0..frames * 3 * height * width)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0f32..=1.0))
                .collect();
            VideoClip::from_f32(v, frames, height, width)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, ToyConfig};
    use rand::Rng;

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, &[]);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
    }

    fn two_pass(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = xs.len() as f64;
        let d = xs[0].len();
        let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let cov = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect();
        (mean, cov)
    }

    fn stats(xs: &[Vec<f64>]) -> FeatureStats {
        accumulate_stats(xs[0].len(), xs.iter().map(Vec::as_slice)).unwrap()
    }

    #[test]
    fn constant_vectors_have_zero_covariance() {
        let xs = vec![vec![1.5, -2.0]; 10];
        assert!(stats(&xs).covariance().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opposite_unit_vectors() {
        let s = stats(&[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        assert!(s.mean().iter().all(|&v| v == 0.0));
        let c = s.covariance().unwrap();
        assert_eq!(c[(0, 0)], 2.0);
        assert_eq!(c.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn single_sample_covariance_is_invalid() {
        assert!(stats(&[vec![1.0]]).covariance().is_err());
    }

    #[test]
    fn matches_two_pass_oracle() {
        let xs = random_vectors(500, 6, 1);
        let s = stats(&xs);
        let (mean, cov) = two_pass(&xs);
        let c = s.covariance().unwrap();
        for i in 0..6 {
            assert!((s.mean()[i] - mean[i]).abs() < 1e-10);
            for j in 0..6 {
                assert!((c[(i, j)] - cov[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn merge_equals_single_pass_and_order_does_not_matter() {
        let xs = random_vectors(300, 4, 2);
        let whole = stats(&xs);
        let merged = stats(&xs[..120]).merge(&stats(&xs[120..])).unwrap();
        let mut rev = xs.clone();
        rev.reverse();
        let reversed = stats(&rev);
        let (a, b, c) = (whole.covariance().unwrap(), merged.covariance().unwrap(), reversed.covariance().unwrap());
        assert!((a - &b).abs().max() < 1e-9);
        assert!((whole.covariance().unwrap() - c).abs().max() < 1e-9);
    }

    #[test]
    fn frechet_identity_and_symmetry() {
        let a = stats(&random_vectors(200, 5, 3));
        let b = stats(&random_vectors(200, 5, 4));
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= 0.0);
        assert!(frechet_distance(&a, &stats(&random_vectors(20, 3, 5))).is_err());
    }

    /// Denman–Beavers iteration for the principal square root.
    fn db_sqrt(p: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = p.clone();
        let mut z = DMatrix::identity(p.nrows(), p.ncols());
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            y = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
        }
        y
    }

    #[test]
    fn frechet_matches_iterative_square_root_oracle() {
        for seed in 0..5 {
            let a = stats(&random_vectors(60, 4, 10 + seed));
            let b = stats(&random_vectors(60, 4, 20 + seed));
            let (ca, cb) = (a.covariance().unwrap(), b.covariance().unwrap());
            let root = db_sqrt(&(&ca * &cb));
            let want = (a.mean() - b.mean()).norm_squared() + ca.trace() + cb.trace() - 2.0 * root.trace();
            let got = frechet_distance(&a, &b).unwrap();
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn shifted_identity_gaussians() {
        // Exact stats with identity covariance and shifted mean.
        let d = 3;
        let mk = |mu: f64| FeatureStats {
            n: 11,
            mean: DVector::from_element(d, mu),
            comoment: DMatrix::identity(d, d) * 10.0,
        };
        let got = frechet_distance(&mk(0.0), &mk(0.5)).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
    }

    #[test]
    fn extractor_is_deterministic_and_sized() {
        let clips = make_toy_dataset(&ToyConfig { clips: 2, ..Default::default() }).unwrap();
        for mode in [FeatureMode::Image, FeatureMode::Video] {
            let e = SurrogateExtractor::new(mode, 3).unwrap();
            let a = e.extract(&clips[0].clip).unwrap();
            assert_eq!(a, e.extract(&clips[0].clip).unwrap());
            assert_eq!(a.len(), if mode == FeatureMode::Image { 8 } else { 1 });
            assert!(a.iter().all(|f| f.len() == e.dim()));
            assert_ne!(a, e.extract(&clips[1].clip).unwrap());
        }
    }

    #[test]
    fn ground_truth_adherence_is_one() {
        let clips = make_toy_dataset(&ToyConfig { clips: 10, ..Default::default() }).unwrap();
        let videos: Vec<_> = clips.iter().map(|c| c.clip.clone()).collect();
        let layouts: Vec<_> = clips.iter().map(|c| c.layouts[0].clone()).collect();
        assert_eq!(layout_adherence(&videos, &layouts, &toy_palette()).unwrap(), 1.0);
    }

    #[test]
    fn unknown_category_color_is_input_error() {
        let clips = make_toy_dataset(&ToyConfig { clips: 1, ..Default::default() }).unwrap();
        let err = layout_adherence(&[clips[0].clip.clone()], &[clips[0].layouts[0].clone()], &toy_palette()[..0]);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn noise_adherence_is_near_chance() {
        let clips = make_toy_dataset(&ToyConfig { clips: 64, ..Default::default() }).unwrap();
        let layouts: Vec<_> = clips.iter().map(|c| c.layouts[0].clone()).collect();
        let noise = noise_clips(64, 1, 32, 32, 9).unwrap();
        let got = layout_adherence(&noise, &layouts, &toy_palette()).unwrap();
        let chance = adherence_chance_level(&layouts, 32, 32);
        assert!((0.0..=1.0).contains(&got));
        assert!((got - chance).abs() < 0.03, "{got} vs chance {chance}");
    }

    fn three() -> FrameLayout {
        let b = |x: f64| BoundingBox::new(x, 0.1, x + 0.2, 0.5).unwrap();
        FrameLayout::new(
            0,
            vec![LayoutInstance::new(0, 0, b(0.0)), LayoutInstance::new(1, 1, b(0.3)), LayoutInstance::new(2, 2, b(0.6))],
        )
        .unwrap()
    }

    #[test]
    fn edits() {
        let limits = LayoutLimits { num_categories: 4, max_instances: 4 };
        let l = three();
        let added = edit_layout(&l, &LayoutEdit::Add(LayoutInstance::new(3, 7, BoundingBox::full())), &limits).unwrap();
        assert_eq!(added.len(), 4);
        assert_eq!(edit_layout(&added, &LayoutEdit::Remove(7), &limits).unwrap(), l);
        let same = edit_layout(&l, &LayoutEdit::Resize(1, l.find(1).unwrap().bbox), &limits).unwrap();
        assert_eq!(same, l);
        let removed = edit_layout(&l, &LayoutEdit::Remove(1), &limits).unwrap();
        assert_eq!(removed.instances(), &[l.instances()[0], l.instances()[2]]);
        assert!(matches!(edit_layout(&l, &LayoutEdit::Remove(9), &limits), Err(Error::Input(_))));
        let full = LayoutLimits { max_instances: 3, ..limits };
        let extra = LayoutEdit::Add(LayoutInstance::new(0, 8, BoundingBox::full()));
        assert!(matches!(edit_layout(&l, &extra, &full), Err(Error::Input(_))));
        assert_eq!(l, three());
    }

    #[test]
    fn edit_script_parsing() {
        let edits = parse_edit_script("# grow\nadd 5 2 0.1 0.1 0.4 0.4\nremove 1\nresize 0 0 0 0.5 0.5\n").unwrap();
        assert_eq!(edits.len(), 3);
        assert_eq!(edits[1], LayoutEdit::Remove(1));
        assert!(parse_edit_script("shrink 1").is_err());
        assert!(parse_edit_script("remove").is_err());
        assert!(parse_edit_script("resize 0 0.5 0 0.2 1").is_err());
    }
}
