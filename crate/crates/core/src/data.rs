//! Annotation ingestion, dataset refinement, clip sampling, the synthetic
//! moving-shapes dataset and the binary clip cache.
//!
//! # Annotation schema
//!
//! One JSON file per video (the public VidVRD layout):
//!
//! ```json
//! {
//!   "video_id": "ILSVRC2015_train_00010001",
//!   "frame_count": 3,
//!   "width": 640,
//!   "height": 360,
//!   "subject/objects": [{ "tid": 0, "category": "dog" }],
//!   "trajectories": [
//!     [{ "tid": 0, "bbox": { "xmin": 10, "ymin": 20, "xmax": 200, "ymax": 300 } }],
//!     [],
//!     [{ "tid": 0, "bbox": { "xmin": 12, "ymin": 20, "xmax": 204, "ymax": 300 } }]
//!   ]
//! }
//! ```
//!
//! `trajectories[i]` lists the boxes of frame `i` in pixels. The object list
//! may also be given under the key `objects`. Frame images for video `v` are
//! read from `<root>/frames/<v>/<frame index, 6 digits>.png`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{stn_crop, BoundingBox, FrameLayout, LayoutInstance, LayoutLimits};
use crate::rng::{stream, tag};
use crate::video::{rgb8_to_chw, VideoClip};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub category: String,
    pub category_id: usize,
}

/// One parsed video annotation with boxes normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub objects: BTreeMap<u32, ObjectInfo>,
    /// Per-frame layouts; `frame_index` is the original frame number.
    pub frames: Vec<FrameLayout>,
}

impl AnnotationRecord {
    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.frames
            .iter()
            .flat_map(|f| f.instances().iter().map(|i| i.instance_id))
            .collect()
    }

    pub fn categories(&self) -> BTreeSet<usize> {
        self.frames
            .iter()
            .flat_map(|f| f.instances().iter().map(|i| i.category_id))
            .collect()
    }

    pub fn valid_frames(&self) -> usize {
        self.frames.iter().filter(|f| !f.is_empty()).count()
    }
}

/// Result of parsing an annotation directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub records: Vec<AnnotationRecord>,
    /// Category names; the index is the category id.
    pub categories: Vec<String>,
    /// Boxes that extended past the frame and were clamped.
    pub clamped_boxes: usize,
    /// Boxes lying entirely outside the frame, dropped after clamping.
    pub dropped_boxes: usize,
}

#[derive(Deserialize)]
struct RawBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

#[derive(Deserialize)]
struct RawTrajectoryEntry {
    tid: u32,
    bbox: RawBox,
}

#[derive(Deserialize)]
struct RawObject {
    tid: u32,
    category: String,
}

#[derive(Deserialize)]
struct RawAnnotation {
    video_id: String,
    frame_count: usize,
    width: u32,
    height: u32,
    #[serde(rename = "subject/objects", alias = "objects")]
    objects: Vec<RawObject>,
    trajectories: Vec<Vec<RawTrajectoryEntry>>,
}

fn parse_error(video_id: &str, field: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        video_id: video_id.to_string(),
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn annotation_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.extension().is_some_and(|e| e == "json") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Parses one annotation file or every `*.json` file of a directory (sorted
/// by file name). Category ids index the sorted set of category names.
pub fn parse_annotations(path: &Path) -> Result<AnnotationSet> {
    let mut raws = Vec::new();
    for file in annotation_files(path)? {
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let raw: RawAnnotation = serde_json::from_str(&text).map_err(|e| {
            let id = file.file_stem().and_then(|s| s.to_str()).unwrap_or("?");
            parse_error(id, "json", e.to_string())
        })?;
        raws.push(raw);
    }
    let categories: Vec<String> = raws
        .iter()
        .flat_map(|r| r.objects.iter().map(|o| o.category.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut set = AnnotationSet {
        categories,
        ..Default::default()
    };
    for raw in raws {
        let record = convert(raw, &set.categories, &mut set.clamped_boxes, &mut set.dropped_boxes)?;
        set.records.push(record);
    }
    if set.clamped_boxes > 0 || set.dropped_boxes > 0 {
        log::warn!(
            "{} boxes clamped to the frame, {} dropped",
            set.clamped_boxes,
            set.dropped_boxes
        );
    }
    Ok(set)
}

fn convert(
    raw: RawAnnotation,
    categories: &[String],
    clamped: &mut usize,
    dropped: &mut usize,
) -> Result<AnnotationRecord> {
    let id = raw.video_id.as_str();
    if raw.width == 0 || raw.height == 0 {
        return Err(parse_error(id, "width/height", "frame size must be positive"));
    }
    if raw.trajectories.len() != raw.frame_count {
        return Err(parse_error(
            id,
            "trajectories",
            format!("{} entries for frame_count {}", raw.trajectories.len(), raw.frame_count),
        ));
    }
    let mut objects = BTreeMap::new();
    for o in &raw.objects {
        let category_id = categories
            .binary_search(&o.category)
            .expect("category collected from the same records");
        let info = ObjectInfo {
            category: o.category.clone(),
            category_id,
        };
        if objects.insert(o.tid, info).is_some() {
            return Err(parse_error(id, "subject/objects", format!("duplicate tid {}", o.tid)));
        }
    }
    let (w, h) = (raw.width as f64, raw.height as f64);
    let mut frames = Vec::with_capacity(raw.frame_count);
    for (index, entries) in raw.trajectories.iter().enumerate() {
        let mut instances = Vec::with_capacity(entries.len());
        for e in entries {
            let obj = objects.get(&e.tid).ok_or_else(|| {
                parse_error(id, "trajectories", format!("frame {index} references undeclared tid {}", e.tid))
            })?;
            let b = &e.bbox;
            let coords = [b.xmin, b.ymin, b.xmax, b.ymax];
            if coords.iter().any(|c| !c.is_finite()) || b.xmin >= b.xmax || b.ymin >= b.ymax {
                return Err(parse_error(
                    id,
                    "bbox",
                    format!("frame {index}, tid {}: invalid box {coords:?}", e.tid),
                ));
            }
            let x0 = b.xmin.clamp(0.0, w);
            let y0 = b.ymin.clamp(0.0, h);
            let x1 = b.xmax.clamp(0.0, w);
            let y1 = b.ymax.clamp(0.0, h);
            if x0 >= x1 || y0 >= y1 {
                *dropped += 1;
                continue;
            }
            if [x0, y0, x1, y1] != coords {
                *clamped += 1;
            }
            let bbox = BoundingBox::new(x0 / w, y0 / h, x1 / w, y1 / h)
                .map_err(|e| parse_error(id, "bbox", e.to_string()))?;
            instances.push(LayoutInstance::new(obj.category_id, e.tid, bbox));
        }
        frames.push(FrameLayout::new(index, instances).map_err(|e| parse_error(id, "trajectories", e.to_string()))?);
    }
    Ok(AnnotationRecord {
        video_id: raw.video_id,
        frame_count: raw.frame_count,
        width: raw.width,
        height: raw.height,
        objects,
        frames,
    })
}

/// Dataset summary in the shape of the usual dataset-statistics table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub categories: usize,
    pub valid_frames: usize,
    pub max_instance: usize,
}

pub fn dataset_stats(records: &[AnnotationRecord]) -> DatasetStats {
    let categories: BTreeSet<usize> = records.iter().flat_map(|r| r.categories()).collect();
    DatasetStats {
        videos: records.len(),
        categories: categories.len(),
        valid_frames: records.iter().map(AnnotationRecord::valid_frames).sum(),
        max_instance: records.iter().map(|r| r.instance_ids().len()).max().unwrap_or(0),
    }
}

/// Number of videos per distinct-instance count.
pub fn stratum_sizes(records: &[AnnotationRecord]) -> BTreeMap<usize, usize> {
    let mut sizes = BTreeMap::new();
    for r in records {
        *sizes.entry(r.instance_ids().len()).or_insert(0) += 1;
    }
    sizes
}

/// Cleans a parsed dataset:
///
/// 1. frames without any object are removed (videos left with no frame are
///    dropped);
/// 2. videos whose distinct instance count exceeds `max_instances` are
///    dropped;
/// 3. with `balance`, videos are grouped by distinct instance count and each
///    group larger than the median group size is downsampled to it (the
///    lower median for an even number of groups), choosing survivors with a
///    seeded shuffle and keeping their original order.
pub fn refine(
    records: &[AnnotationRecord],
    max_instances: usize,
    balance: bool,
    seed: u64,
) -> (Vec<AnnotationRecord>, DatasetStats) {
    let mut out: Vec<AnnotationRecord> = records
        .iter()
        .filter_map(|r| {
            let frames: Vec<FrameLayout> = r.frames.iter().filter(|f| !f.is_empty()).cloned().collect();
            (!frames.is_empty()).then(|| AnnotationRecord {
                frames,
                ..r.clone()
            })
        })
        .filter(|r| r.instance_ids().len() <= max_instances)
        .collect();

    if balance && !out.is_empty() {
        let sizes = stratum_sizes(&out);
        let mut counts: Vec<usize> = sizes.values().copied().collect();
        counts.sort_unstable();
        let median = counts[(counts.len() - 1) / 2];
        let mut keep = vec![true; out.len()];
        for (&key, &size) in &sizes {
            if size <= median {
                continue;
            }
            let mut members: Vec<usize> = (0..out.len())
                .filter(|&i| out[i].instance_ids().len() == key)
                .collect();
            members.shuffle(&mut stream(seed, &[tag("balance"), key as u64]));
            for &i in &members[median..] {
                keep[i] = false;
            }
        }
        let mut k = keep.into_iter();
        out.retain(|_| k.next().unwrap_or(false));
    }
    if out.is_empty() {
        log::warn!("refinement removed every video");
    }
    let stats = dataset_stats(&out);
    (out, stats)
}

/// Training sample: `T` frames with their per-frame layouts.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub clip: VideoClip,
    /// One layout per frame; `layouts[i].frame_index() == i`.
    pub layouts: Vec<FrameLayout>,
    pub source_id: String,
    /// Original frame number of clip frame 0.
    pub start_frame: usize,
}

impl ClipRecord {
    pub fn new(clip: VideoClip, layouts: Vec<FrameLayout>, source_id: String, start_frame: usize) -> Result<Self> {
        if layouts.len() != clip.num_frames() {
            return Err(Error::Input(format!(
                "{} layouts for a {}-frame clip",
                layouts.len(),
                clip.num_frames()
            )));
        }
        let layouts = layouts
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.with_frame_index(i))
            .collect();
        Ok(Self {
            clip,
            layouts,
            source_id,
            start_frame,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.clip.num_frames()
    }

    pub fn validate(&self, limits: &LayoutLimits) -> Result<()> {
        self.layouts.iter().try_for_each(|l| l.validate(limits))
    }
}

/// Provides RGB frames for annotated videos.
pub trait FrameSource {
    fn load(&self, video_id: &str, frame_index: usize) -> Result<image::RgbImage>;
}

/// Reads `<root>/frames/<video_id>/<frame_index:06>.png`.
#[derive(Debug, Clone)]
pub struct ImageDirSource {
    pub root: PathBuf,
}

impl FrameSource for ImageDirSource {
    fn load(&self, video_id: &str, frame_index: usize) -> Result<image::RgbImage> {
        let path = self
            .root
            .join("frames")
            .join(video_id)
            .join(format!("{frame_index:06}.png"));
        Ok(image::open(&path)
            .map_err(|e| Error::Input(format!("cannot read frame {}: {e}", path.display())))?
            .to_rgb8())
    }
}

/// Start positions (indices into `record.frames`) of every window of `t`
/// frames with consecutive frame numbers.
fn window_starts(record: &AnnotationRecord, t: usize) -> Vec<usize> {
    let f = &record.frames;
    if t == 0 || f.len() < t {
        return Vec::new();
    }
    (0..=f.len() - t)
        .filter(|&s| (1..t).all(|k| f[s + k].frame_index() == f[s].frame_index() + k))
        .collect()
}

/// Box of a layout after cropping the central square of a `w × h` frame.
/// Returns `None` when the box leaves the crop.
fn center_crop_box(b: &BoundingBox, width: u32, height: u32) -> Option<BoundingBox> {
    let (w, h) = (width as f64, height as f64);
    let side = w.min(h);
    let (ox, oy) = ((w - side) / 2.0 / w, (h - side) / 2.0 / h);
    let (sx, sy) = (side / w, side / h);
    let x0 = ((b.x0() - ox) / sx).clamp(0.0, 1.0);
    let x1 = ((b.x1() - ox) / sx).clamp(0.0, 1.0);
    let y0 = ((b.y0() - oy) / sy).clamp(0.0, 1.0);
    let y1 = ((b.y1() - oy) / sy).clamp(0.0, 1.0);
    BoundingBox::new(x0, y0, x1, y1).ok()
}

fn crop_layout(layout: &FrameLayout, f: impl Fn(&BoundingBox) -> Option<BoundingBox>) -> FrameLayout {
    let instances = layout
        .instances()
        .iter()
        .filter_map(|i| f(&i.bbox).map(|b| LayoutInstance::new(i.category_id, i.instance_id, b)))
        .collect();
    FrameLayout::new(layout.frame_index(), instances).expect("ids stay unique")
}

/// Cuts a contiguous window of `t` frames from an annotated video, resizes
/// it to `resolution × resolution` and scales pixels to `[-1, 1]`. With
/// `center_crop` the central square of every frame is used instead of the
/// full frame. Returns `Ok(None)` when the video has no window of `t`
/// consecutive annotated frames.
pub fn sample_clip(
    record: &AnnotationRecord,
    source: &dyn FrameSource,
    t: usize,
    resolution: usize,
    center_crop: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Option<ClipRecord>> {
    if resolution == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let starts = window_starts(record, t);
    if starts.is_empty() {
        return Ok(None);
    }
    let s = starts[rng.random_range(0..starts.len())];
    let r = resolution as u32;
    let mut data = Vec::with_capacity(t * 3 * resolution * resolution);
    let mut layouts = Vec::with_capacity(t);
    for layout in &record.frames[s..s + t] {
        let mut img = source.load(&record.video_id, layout.frame_index())?;
        let mut l = layout.clone();
        if center_crop {
            let (w, h) = img.dimensions();
            let side = w.min(h);
            img = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
            l = crop_layout(&l, |b| center_crop_box(b, record.width, record.height));
        }
        let img = image::imageops::resize(&img, r, r, image::imageops::FilterType::Triangle);
        data.extend(rgb8_to_chw(img.as_raw(), resolution, resolution));
        layouts.push(l);
    }
    let clip = VideoClip::from_f32(data, t, resolution, resolution)?;
    let start_frame = record.frames[s].frame_index();
    Ok(Some(ClipRecord::new(clip, layouts, record.video_id.clone(), start_frame)?))
}

/// Crops the central `fraction` of every frame and resizes back to the same
/// resolution with bilinear sampling; boxes are mapped into the crop and
/// instances leaving it are dropped.
pub fn center_crop_clip(record: &ClipRecord, fraction: f64) -> Result<ClipRecord> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("crop fraction must be in (0, 1], got {fraction}")));
    }
    let m = (1.0 - fraction) / 2.0;
    let region = BoundingBox::new(m, m, 1.0 - m, 1.0 - m)?;
    let (h, w) = (record.clip.height(), record.clip.width());
    let frames = (0..record.num_frames())
        .map(|t| stn_crop(&record.clip.frame(t)?, &region, h, w))
        .collect::<Result<Vec<_>>>()?;
    let clip = VideoClip::new(Tensor::stack(&frames, 0)?)?;
    let map = |b: &BoundingBox| {
        let f = |v: f64| ((v - m) / fraction).clamp(0.0, 1.0);
        BoundingBox::new(f(b.x0()), f(b.y0()), f(b.x1()), f(b.y1())).ok()
    };
    let layouts = record.layouts.iter().map(|l| crop_layout(l, map)).collect();
    ClipRecord::new(clip, layouts, record.source_id.clone(), record.start_frame)
}

/// Shapes of the synthetic dataset; the category id is the enum index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyShape {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl ToyShape {
    pub const ALL: [ToyShape; 4] = [ToyShape::Square, ToyShape::Circle, ToyShape::Triangle, ToyShape::Diamond];

    pub fn category_id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ToyShape::Square => "red_square",
            ToyShape::Circle => "green_circle",
            ToyShape::Triangle => "blue_triangle",
            ToyShape::Diamond => "yellow_diamond",
        }
    }

    /// RGB in `[-1, 1]`.
    pub fn color(self) -> [f32; 3] {
        match self {
            ToyShape::Square => [1.0, -1.0, -1.0],
            ToyShape::Circle => [-1.0, 1.0, -1.0],
            ToyShape::Triangle => [-1.0, -1.0, 1.0],
            ToyShape::Diamond => [1.0, 1.0, -1.0],
        }
    }

    /// Whether cell `(r, c)` of a `size × size` sprite belongs to the shape.
    pub fn contains(self, r: usize, c: usize, size: usize) -> bool {
        let s = size as f64;
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let (dx, dy) = (x - s / 2.0, y - s / 2.0);
        match self {
            ToyShape::Square => true,
            ToyShape::Circle => dx * dx + dy * dy <= s * s / 4.0,
            ToyShape::Triangle => dx.abs() <= y / 2.0,
            ToyShape::Diamond => dx.abs() + dy.abs() <= s / 2.0,
        }
    }
}

/// Category table of the synthetic dataset.
pub fn toy_categories() -> Vec<String> {
    ToyShape::ALL.iter().map(|s| s.name().to_string()).collect()
}

pub const TOY_BACKGROUND: [f32; 3] = [-1.0, -1.0, -1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_objects: usize,
    /// Sprite side as a fraction of the shorter frame side.
    pub min_size: f64,
    pub max_size: f64,
    /// Speed in pixels per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            clips: 128,
            frames: 8,
            height: 32,
            width: 32,
            max_objects: 3,
            min_size: 0.25,
            max_size: 0.4,
            min_speed: 0.5,
            max_speed: 1.5,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frames == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::Config("toy clips and frames must be positive, frames at least 4x4".into()));
        }
        if self.max_objects == 0 || self.max_objects > ToyShape::ALL.len() {
            return Err(Error::Config(format!(
                "toy max_objects must be in 1..={}",
                ToyShape::ALL.len()
            )));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(Error::Config("toy sizes must satisfy 0 < min <= max <= 1".into()));
        }
        if !(self.min_speed >= 0.0 && self.min_speed <= self.max_speed && self.max_speed.is_finite()) {
            return Err(Error::Config("toy speeds must satisfy 0 <= min <= max".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Sprite {
    shape: ToyShape,
    size: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

/// Reflects `p` into `[0, limit]` (elastic bounce), flipping `v` on odd
/// reflections.
fn bounce(p: f64, v: f64, limit: f64) -> (f64, f64) {
    if limit <= 0.0 {
        return (0.0, v);
    }
    let period = 2.0 * limit;
    let q = p.rem_euclid(period);
    if q <= limit {
        (q, v)
    } else {
        (period - q, -v)
    }
}

/// Renders sprites onto a `(3, H, W)` canvas (later sprites on top) and
/// returns the canvas with the exact pixel bounds of every sprite.
fn render(sprites: &[(ToyShape, usize, usize, usize)], h: usize, w: usize, out: &mut Vec<f32>) -> Vec<BoundingBox> {
    let start = out.len();
    out.resize(start + 3 * h * w, 0.0);
    let canvas = &mut out[start..];
    for c in 0..3 {
        canvas[c * h * w..(c + 1) * h * w].fill(TOY_BACKGROUND[c]);
    }
    let mut boxes = Vec::with_capacity(sprites.len());
    for &(shape, size, top, left) in sprites {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let color = shape.color();
        for r in 0..size {
            for c in 0..size {
                let (y, x) = (top + r, left + c);
                if y >= h || x >= w || !shape.contains(r, c, size) {
                    continue;
                }
                for (k, v) in color.iter().enumerate() {
                    canvas[k * h * w + y * w + x] = *v;
                }
                r0 = r0.min(y);
                c0 = c0.min(x);
                r1 = r1.max(y);
                c1 = c1.max(x);
            }
        }
        let b = BoundingBox::new(
            c0 as f64 / w as f64,
            r0 as f64 / h as f64,
            (c1 + 1) as f64 / w as f64,
            (r1 + 1) as f64 / h as f64,
        )
        .expect("sprites have at least one pixel");
        boxes.push(b);
    }
    boxes
}

/// Synthetic clips of colored shapes on black moving at constant velocity
/// with elastic wall bounces. Every clip uses distinct shapes; boxes are the
/// exact pixel bounds of each shape in every frame.
pub fn make_toy_dataset(config: &ToyConfig) -> Result<Vec<ClipRecord>> {
    config.validate()?;
    let (h, w, t) = (config.height, config.width, config.frames);
    let short = h.min(w) as f64;
    let mut clips = Vec::with_capacity(config.clips);
    for n in 0..config.clips {
        let mut rng = stream(config.seed, &[tag("toy"), n as u64]);
        let count = rng.random_range(1..=config.max_objects);
        let mut shapes = ToyShape::ALL.to_vec();
        shapes.shuffle(&mut rng);
        let sprites: Vec<Sprite> = shapes[..count]
            .iter()
            .map(|&shape| {
                let lo = (config.min_size * short).round().max(1.0) as usize;
                let hi = (config.max_size * short).round().max(lo as f64) as usize;
                let size = rng.random_range(lo..=hi).min(h).min(w);
                let speed = rng.random_range(config.min_speed..=config.max_speed);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                Sprite {
                    shape,
                    size,
                    x: rng.random_range(0.0..=(w - size) as f64),
                    y: rng.random_range(0.0..=(h - size) as f64),
                    vx: speed * angle.cos(),
                    vy: speed * angle.sin(),
                }
            })
            .collect();
        let mut data = Vec::with_capacity(t * 3 * h * w);
        let mut layouts = Vec::with_capacity(t);
        for k in 0..t {
            let placed: Vec<_> = sprites
                .iter()
                .map(|s| {
                    let (x, _) = bounce(s.x + s.vx * k as f64, s.vx, (w - s.size) as f64);
                    let (y, _) = bounce(s.y + s.vy * k as f64, s.vy, (h - s.size) as f64);
                    (s.shape, s.size, y.round() as usize, x.round() as usize)
                })
                .collect();
            let boxes = render(&placed, h, w, &mut data);
            let instances = sprites
                .iter()
                .zip(boxes)
                .enumerate()
                .map(|(i, (s, b))| LayoutInstance::new(s.shape.category_id(), i as u32, b))
                .collect();
            layouts.push(FrameLayout::new(k, instances)?);
        }
        let clip = VideoClip::from_f32(data, t, h, w)?;
        clips.push(ClipRecord::new(clip, layouts, format!("toy_{n:05}"), 0)?);
    }
    Ok(clips)
}

const CACHE_MAGIC: &[u8; 8] = b"MOVGCLIP";
pub const CACHE_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Writes clips to the binary cache: magic, version, clip count, then per
/// clip the source id, start frame, dimensions, `f32` pixels and layouts.
pub fn write_cache(path: &Path, clips: &[ClipRecord]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(clips.len() as u64).to_le_bytes());
    for c in clips {
        put_u32(&mut out, c.source_id.len());
        out.extend_from_slice(c.source_id.as_bytes());
        out.extend_from_slice(&(c.start_frame as u64).to_le_bytes());
        put_u32(&mut out, c.num_frames());
        put_u32(&mut out, c.clip.height());
        put_u32(&mut out, c.clip.width());
        for v in c.clip.to_f32_vec()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &c.layouts {
            put_u32(&mut out, l.len());
            for i in l.instances() {
                put_u32(&mut out, i.category_id);
                out.extend_from_slice(&i.instance_id.to_le_bytes());
                for v in [i.bbox.x0(), i.bbox.y0(), i.bbox.x1(), i.bbox.y1()] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Input(format!("clip cache {} is truncated", self.path.display()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_cache(path: &Path) -> Result<Vec<ClipRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(8)? != CACHE_MAGIC {
        return Err(Error::Input(format!("{} is not a clip cache", path.display())));
    }
    let version = cur.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Input(format!(
            "clip cache version {version} is not supported (expected {CACHE_VERSION})"
        )));
    }
    let count = cur.u64()? as usize;
    let mut clips = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = cur.u32()? as usize;
        let source_id = String::from_utf8(cur.take(n)?.to_vec())
            .map_err(|_| Error::Input("clip cache holds a non-UTF-8 id".into()))?;
        let start_frame = cur.u64()? as usize;
        let (t, h, w) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        let raw = cur.take(t * 3 * h * w * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let clip = VideoClip::from_f32(data, t, h, w)?;
        let mut layouts = Vec::with_capacity(t);
        for k in 0..t {
            let m = cur.u32()? as usize;
            let mut instances = Vec::with_capacity(m.min(1024));
            for _ in 0..m {
                let category = cur.u32()? as usize;
                let id = cur.u32()?;
                let b = BoundingBox::new(cur.f64()?, cur.f64()?, cur.f64()?, cur.f64()?)?;
                instances.push(LayoutInstance::new(category, id, b));
            }
            layouts.push(FrameLayout::new(k, instances)?);
        }
        clips.push(ClipRecord::new(clip, layouts, source_id, start_frame)?);
    }
    Ok(clips)
}
