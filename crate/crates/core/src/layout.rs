//! Layout geometry: boxes, per-frame layouts, label rasterization and
//! spatial-transformer placement/cropping.
//!
//! Conventions shared by everything in this module:
//!
//! * Boxes are axis-aligned in normalized frame coordinates, `x` to the right
//!   and `y` downwards, both in `[0, 1]`.
//! * A pixel `(r, c)` of an `h × w` canvas is *covered* by a box when its
//!   center `((c + 0.5) / w, (r + 0.5) / h)` lies in `[x0, x1) × [y0, y1)`.
//! * Sampling grids use `[-1, 1]` coordinates with pixel centers at
//!   `(2i + 1) / n - 1` (the "align corners off" convention).
//! * Feature maps are channel-first: `(channels, height, width)`.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor_from_f64;

/// Axis-aligned box in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let all_finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::validation("box", "coordinates must be finite"));
        }
        if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0) {
            return Err(Error::validation(
                "box",
                format!("need 0 <= x0 < x1 <= 1, got x0={x0}, x1={x1}"),
            ));
        }
        if !(0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
            return Err(Error::validation(
                "box",
                format!("need 0 <= y0 < y1 <= 1, got y0={y0}, y1={y1}"),
            ));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// The whole frame.
    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    /// Converts a pixel-space box `[x0, x1) × [y0, y1)` on a `width × height`
    /// frame, clamping it into the frame first. Returns the box and whether
    /// clamping changed anything.
    pub fn from_pixels(
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        width: f64,
        height: f64,
    ) -> Result<(Self, bool)> {
        let cx0 = x0.clamp(0.0, width);
        let cx1 = x1.clamp(0.0, width);
        let cy0 = y0.clamp(0.0, height);
        let cy1 = y1.clamp(0.0, height);
        let clamped = (cx0, cx1, cy0, cy1) != (x0, x1, y0, y1);
        let b = Self::new(cx0 / width, cy0 / height, cx1 / width, cy1 / height)?;
        Ok((b, clamped))
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }
    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Pixel-center coverage test on an `h × w` canvas.
    pub fn covers(&self, row: usize, col: usize, height: usize, width: usize) -> bool {
        let cx = (col as f64 + 0.5) / width as f64;
        let cy = (row as f64 + 0.5) / height as f64;
        self.x0 <= cx && cx < self.x1 && self.y0 <= cy && cy < self.y1
    }

    /// Whether the pixel square `(row, col)` shares positive area with the box.
    pub fn overlaps_pixel(&self, row: usize, col: usize, height: usize, width: usize) -> bool {
        let (w, h) = (width as f64, height as f64);
        let (px0, px1) = (col as f64 / w, (col + 1) as f64 / w);
        let (py0, py1) = (row as f64 / h, (row + 1) as f64 / h);
        px1 > self.x0 && px0 < self.x1 && py1 > self.y0 && py0 < self.y1
    }

    /// Pixel-center coverage mask, row-major `h × w`.
    pub fn coverage_mask(&self, height: usize, width: usize) -> Vec<bool> {
        let mut mask = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                mask.push(self.covers(r, c, height, width));
            }
        }
        mask
    }

    fn key(&self) -> [u64; 4] {
        [
            self.x0.to_bits(),
            self.y0.to_bits(),
            self.x1.to_bits(),
            self.y1.to_bits(),
        ]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// One object in a frame: category, clip-unique identity and box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutInstance {
    pub category_id: usize,
    pub instance_id: u32,
    pub bbox: BoundingBox,
}

impl LayoutInstance {
    pub fn new(category_id: usize, instance_id: u32, bbox: BoundingBox) -> Self {
        Self {
            category_id,
            instance_id,
            bbox,
        }
    }
}

/// Size limits a layout must respect for a given model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutLimits {
    pub num_categories: usize,
    pub max_instances: usize,
}

impl LayoutLimits {
    pub const VIDVRD: Self = Self {
        num_categories: 36,
        max_instances: 11,
    };
    pub const VIDVOR: Self = Self {
        num_categories: 80,
        max_instances: 20,
    };
}

/// The conditioning layout of a single frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    frame_index: usize,
    instances: Vec<LayoutInstance>,
}

impl FrameLayout {
    /// Builds a layout, rejecting repeated instance ids.
    pub fn new(frame_index: usize, instances: Vec<LayoutInstance>) -> Result<Self> {
        let mut ids: Vec<u32> = instances.iter().map(|i| i.instance_id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::validation(
                "layout",
                format!("instance id {} appears more than once", w[0]),
            ));
        }
        Ok(Self {
            frame_index,
            instances,
        })
    }

    pub fn empty(frame_index: usize) -> Self {
        Self {
            frame_index,
            instances: Vec::new(),
        }
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn with_frame_index(mut self, frame_index: usize) -> Self {
        self.frame_index = frame_index;
        self
    }

    pub fn instances(&self) -> &[LayoutInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn find(&self, instance_id: u32) -> Option<&LayoutInstance> {
        self.instances.iter().find(|i| i.instance_id == instance_id)
    }

    /// Checks category range and instance count against model limits.
    pub fn validate(&self, limits: &LayoutLimits) -> Result<()> {
        if self.instances.len() > limits.max_instances {
            return Err(Error::validation(
                "layout",
                format!(
                    "{} instances exceed the maximum of {}",
                    self.instances.len(),
                    limits.max_instances
                ),
            ));
        }
        if let Some(bad) = self
            .instances
            .iter()
            .find(|i| i.category_id >= limits.num_categories)
        {
            return Err(Error::validation(
                "layout",
                format!(
                    "category {} out of range (num_categories = {})",
                    bad.category_id, limits.num_categories
                ),
            ));
        }
        Ok(())
    }

    /// Instances in a canonical order (category, box, id). Order-dependent
    /// floating point reductions iterate in this order, which makes every
    /// layout-consuming operation bitwise invariant to list permutations.
    pub fn canonical_instances(&self) -> Vec<LayoutInstance> {
        let mut v = self.instances.clone();
        v.sort_by_key(|i| (i.category_id, i.bbox.key(), i.instance_id));
        v
    }
}

/// Learnable label embeddings, one row per category: a `(C, E)` tensor.
#[derive(Debug, Clone)]
pub struct LabelEmbeddingTable(Tensor);

impl LabelEmbeddingTable {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::Config(format!(
                "label table must be (categories, dim), got {:?}",
                table.dims()
            )));
        }
        Ok(Self(table))
    }

    pub fn num_categories(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn row(&self, category: usize) -> Result<Tensor> {
        if category >= self.num_categories() {
            return Err(Error::Config(format!(
                "category {category} has no embedding (table has {} rows)",
                self.num_categories()
            )));
        }
        Ok(self.0.get(category)?)
    }
}

/// Paints label embeddings onto an `(E, height, width)` canvas.
///
/// Each pixel receives the sum of the embeddings of all instances covering
/// it; uncovered pixels are exactly zero. The sum is accumulated category by
/// category in ascending order.
pub fn rasterize_layout(
    layout: &FrameLayout,
    table: &LabelEmbeddingTable,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    if height < 4 || width < 4 {
        return Err(Error::Config(format!(
            "raster canvas must be at least 4x4, got {height}x{width}"
        )));
    }
    let dim = table.dim();
    let dtype = table.tensor().dtype();
    let mut canvas = Tensor::zeros((dim, height, width), dtype, &Device::Cpu)?;
    let instances = layout.canonical_instances();
    let mut start = 0;
    while start < instances.len() {
        let category = instances[start].category_id;
        let end = start
            + instances[start..]
                .iter()
                .take_while(|i| i.category_id == category)
                .count();
        let mut counts = vec![0.0f64; height * width];
        for inst in &instances[start..end] {
            for (k, covered) in inst.bbox.coverage_mask(height, width).into_iter().enumerate() {
                if covered {
                    counts[k] += 1.0;
                }
            }
        }
        let counts = tensor_from_f64(counts, &[1, height, width], dtype)?;
        let emb = table.row(category)?.reshape((dim, 1, 1))?;
        canvas = (canvas + counts.broadcast_mul(&emb)?)?;
        start = end;
    }
    Ok(canvas)
}

/// Batched [`rasterize_layout`]: `(N, E, height, width)`.
pub fn rasterize_batch(
    layouts: &[FrameLayout],
    table: &LabelEmbeddingTable,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let canvases = layouts
        .iter()
        .map(|l| rasterize_layout(l, table, height, width))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&canvases, 0)?)
}

/// Diagonal affine transform mapping the unit sampling grid of a source map
/// onto a canvas region: `canvas = scale * source + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub scale_x: f64,
    pub scale_y: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            scale_x: 1.0,
            scale_y: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
        }
    }

    /// The transform as a 2×3 matrix `[[sx, 0, tx], [0, sy, ty]]`.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [
            [self.scale_x, 0.0, self.shift_x],
            [0.0, self.scale_y, self.shift_y],
        ]
    }

    fn forward(&self, u: f64, v: f64) -> (f64, f64) {
        (
            self.scale_x * u + self.shift_x,
            self.scale_y * v + self.shift_y,
        )
    }

    fn inverse(&self, gx: f64, gy: f64) -> (f64, f64) {
        (
            (gx - self.shift_x) / self.scale_x,
            (gy - self.shift_y) / self.scale_y,
        )
    }
}

/// Affine placing a full source grid exactly onto `bbox` (scale = box extent,
/// translation = box center, both in `[-1, 1]` grid units).
pub fn box_to_affine(bbox: &BoundingBox) -> Affine {
    Affine {
        scale_x: bbox.width(),
        scale_y: bbox.height(),
        shift_x: bbox.x0 + bbox.x1 - 1.0,
        shift_y: bbox.y0 + bbox.y1 - 1.0,
    }
}

#[derive(Clone, Copy)]
enum Padding {
    Zeros,
    Border,
}

fn grid_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Linear interpolation taps along one axis of length `n` at grid coordinate
/// `u`.
fn taps(u: f64, n: usize, padding: Padding) -> [(Option<usize>, f64); 2] {
    let mut x = ((u + 1.0) * n as f64 - 1.0) / 2.0;
    if let Padding::Border = padding {
        x = x.clamp(0.0, (n - 1) as f64);
    }
    let lo = x.floor();
    let frac = x - lo;
    let idx = |k: f64| (k >= 0.0 && k < n as f64).then_some(k as usize);
    [(idx(lo), 1.0 - frac), (idx(lo + 1.0), frac)]
}

fn bilinear_into(
    row: &mut [f64],
    u: f64,
    v: f64,
    src_h: usize,
    src_w: usize,
    padding: Padding,
) {
    for (iy, wy) in taps(v, src_h, padding) {
        let Some(iy) = iy else { continue };
        for (ix, wx) in taps(u, src_w, padding) {
            let Some(ix) = ix else { continue };
            let w = wy * wx;
            if w != 0.0 {
                row[iy * src_w + ix] += w;
            }
        }
    }
}

/// Transposed placement operator, shape `(h*w, H*W)`: column `p` holds the
/// bilinear weights canvas pixel `p` draws from the `h × w` source.
///
/// Every pixel sharing area with the box samples the source (clamped at the
/// source border); all other pixels get an all-zero column.
fn placement_operator(
    bbox: &BoundingBox,
    src_h: usize,
    src_w: usize,
    height: usize,
    width: usize,
) -> Vec<f64> {
    let affine = box_to_affine(bbox);
    let src = src_h * src_w;
    let dst = height * width;
    let mut op = vec![0.0; src * dst];
    let mut row = vec![0.0; src];
    for r in 0..height {
        for c in 0..width {
            if !bbox.overlaps_pixel(r, c, height, width) {
                continue;
            }
            row.iter_mut().for_each(|x| *x = 0.0);
            let (u, v) = affine.inverse(grid_coord(c, width), grid_coord(r, height));
            bilinear_into(&mut row, u, v, src_h, src_w, Padding::Border);
            let p = r * width + c;
            for (s, &w) in row.iter().enumerate() {
                op[s * dst + p] = w;
            }
        }
    }
    op
}

/// Transposed crop operator, shape `(H*W, out_h*out_w)`.
fn crop_operator(
    bbox: &BoundingBox,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let affine = box_to_affine(bbox);
    let src = height * width;
    let dst = out_h * out_w;
    let mut op = vec![0.0; src * dst];
    let mut row = vec![0.0; src];
    for i in 0..out_h {
        for j in 0..out_w {
            row.iter_mut().for_each(|x| *x = 0.0);
            let (gx, gy) = affine.forward(grid_coord(j, out_w), grid_coord(i, out_h));
            bilinear_into(&mut row, gx, gy, height, width, Padding::Zeros);
            let p = i * out_w + j;
            for (s, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    op[s * dst + p] = w;
                }
            }
        }
    }
    op
}

fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    t.dims3()
        .map_err(|_| Error::Input(format!("{what} must be (channels, h, w), got {:?}", t.dims())))
}

/// Resamples an `(F, h, w)` feature map into `bbox` on an `(F, H, W)` zero
/// canvas. Linear in `feature`, hence differentiable with respect to it.
pub fn stn_place(feature: &Tensor, bbox: &BoundingBox, height: usize, width: usize) -> Result<Tensor> {
    let (f, h, w) = chw(feature, "feature")?;
    let op = placement_operator(bbox, h, w, height, width);
    let op = tensor_from_f64(op, &[h * w, height * width], feature.dtype())?;
    Ok(feature
        .reshape((f, h * w))?
        .matmul(&op)?
        .reshape((f, height, width))?)
}

/// Places several `(F, h, w)` features (stacked as `(n, F, h, w)`) into their
/// boxes and sums the results. Summation follows the order of `boxes`.
pub fn stn_place_sum(
    features: &Tensor,
    boxes: &[BoundingBox],
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (n, f, h, w) = features.dims4()?;
    if n != boxes.len() {
        return Err(Error::Input(format!(
            "{n} feature maps for {} boxes",
            boxes.len()
        )));
    }
    if n == 0 {
        return Ok(Tensor::zeros(
            (f, height, width),
            features.dtype(),
            &Device::Cpu,
        )?);
    }
    let mut ops = Vec::with_capacity(n * h * w * height * width);
    for b in boxes {
        ops.extend(placement_operator(b, h, w, height, width));
    }
    let op = tensor_from_f64(ops, &[n * h * w, height * width], features.dtype())?;
    // (F, n*h*w) @ (n*h*w, H*W)
    let stacked = features
        .permute((1, 0, 2, 3))?
        .contiguous()?
        .reshape((f, n * h * w))?;
    Ok(stacked.matmul(&op)?.reshape((f, height, width))?)
}

/// Bilinear crop-and-resize of the `bbox` region of an `(F, H, W)` map to
/// `(F, out_h, out_w)`, zero padded beyond the map.
pub fn stn_crop(image: &Tensor, bbox: &BoundingBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (f, h, w) = chw(image, "image")?;
    let op = crop_operator(bbox, h, w, out_h, out_w);
    let op = tensor_from_f64(op, &[h * w, out_h * out_w], image.dtype())?;
    Ok(image
        .reshape((f, h * w))?
        .matmul(&op)?
        .reshape((f, out_h, out_w))?)
}

/// Crops every box from the same `(F, H, W)` map: `(n, F, out_h, out_w)`.
pub fn stn_crop_many(
    image: &Tensor,
    boxes: &[BoundingBox],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let (f, h, w) = chw(image, "image")?;
    let n = boxes.len();
    if n == 0 {
        return Ok(Tensor::zeros((0, f, out_h, out_w), image.dtype(), &Device::Cpu)?);
    }
    let dst = out_h * out_w;
    // Concatenate the per-box operators column-wise: (H*W, n*dst).
    let mut op = vec![0.0; h * w * n * dst];
    for (k, b) in boxes.iter().enumerate() {
        let single = crop_operator(b, h, w, out_h, out_w);
        for s in 0..h * w {
            op[s * n * dst + k * dst..s * n * dst + (k + 1) * dst]
                .copy_from_slice(&single[s * dst..(s + 1) * dst]);
        }
    }
    let op = tensor_from_f64(op, &[h * w, n * dst], image.dtype())?;
    Ok(image
        .reshape((f, h * w))?
        .matmul(&op)?
        .reshape((f, n, out_h, out_w))?
        .permute((1, 0, 2, 3))?
        .contiguous()?)
}

/// Coverage fraction of a set of boxes on an `h × w` grid (pixel-center rule).
pub fn union_coverage(boxes: &[BoundingBox], height: usize, width: usize) -> Vec<bool> {
    let mut mask = vec![false; height * width];
    for b in boxes {
        for (m, c) in mask.iter_mut().zip(b.coverage_mask(height, width)) {
            *m |= c;
        }
    }
    mask
}

/// Parses the plain-text layout format: one instance per line,
/// `category_id x0 y0 x1 y1` in normalized coordinates. Blank lines and
/// `#` comments are skipped; instance ids follow line order from 0.
pub fn parse_layout_text(text: &str) -> Result<FrameLayout> {
    let mut instances = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| Error::validation("layout text", format!("line {}: {reason}", n + 1));
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        let category: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad category `{}`", fields[0])))?;
        let mut c = [0.0; 4];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad(format!("bad coordinate `{f}`")))?;
        }
        let bbox = BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string()))?;
        instances.push(LayoutInstance::new(category, instances.len() as u32, bbox));
    }
    FrameLayout::new(0, instances)
}

/// Inverse of [`parse_layout_text`] (instance ids are not written).
pub fn format_layout_text(layout: &FrameLayout) -> String {
    layout
        .instances()
        .iter()
        .map(|i| {
            let b = i.bbox;
            format!("{} {} {} {} {}\n", i.category_id, b.x0(), b.y0(), b.x1(), b.y1())
        })
        .collect()
}
