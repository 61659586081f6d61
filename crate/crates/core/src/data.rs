//! Synthetic captioned video corpus: geometric shapes translating with
//! wraparound over plain backgrounds, paired with 4× area-downsampled
//! low-resolution clips.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array5, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{TextTokens, VideoBatch};
use crate::diffusion::SR_FACTOR;
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;
/// Captions are padded with id 0 to this many tokens.
pub const CAPTION_LEN: usize = 8;
pub const CORPUS_FORMAT: &str = "vsr-corpus-v1";
pub const CLIPSET_FORMAT: &str = "vsr-clips-v1";
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.15],
            Color::Green => [0.15, 0.8, 0.2],
            Color::Blue => [0.2, 0.3, 0.95],
            Color::Yellow => [0.95, 0.9, 0.2],
            Color::Cyan => [0.2, 0.85, 0.9],
            Color::Magenta => [0.85, 0.2, 0.85],
        }
    }
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Unit step in (x, y) image coordinates, y pointing down.
    pub fn step(self) -> (f64, f64) {
        match self {
            Direction::Left => (-1.0, 0.0),
            Direction::Right => (1.0, 0.0),
            Direction::Up => (0.0, -1.0),
            Direction::Down => (0.0, 1.0),
        }
    }
}

/// Caption vocabulary: padding, the word "moving", colors, shapes, directions.
pub mod vocab {
    use super::*;

    pub const PAD: u32 = 0;
    pub const MOVING: u32 = 1;
    const COLOR_BASE: u32 = 2;
    const SHAPE_BASE: u32 = COLOR_BASE + 6;
    const DIRECTION_BASE: u32 = SHAPE_BASE + 3;
    pub const SIZE: usize = DIRECTION_BASE as usize + 4;

    pub fn color(c: Color) -> u32 {
        COLOR_BASE + Color::ALL.iter().position(|&x| x == c).expect("listed") as u32
    }

    pub fn shape(s: ShapeKind) -> u32 {
        SHAPE_BASE + ShapeKind::ALL.iter().position(|&x| x == s).expect("listed") as u32
    }

    pub fn direction(d: Direction) -> u32 {
        DIRECTION_BASE + Direction::ALL.iter().position(|&x| x == d).expect("listed") as u32
    }

    pub fn word(id: u32) -> Option<String> {
        let json = |v: serde_json::Value| v.as_str().map(str::to_string);
        match id {
            PAD => None,
            MOVING => Some("moving".into()),
            i if (COLOR_BASE..SHAPE_BASE).contains(&i) => {
                json(serde_json::to_value(Color::ALL[(i - COLOR_BASE) as usize]).ok()?)
            }
            i if (SHAPE_BASE..DIRECTION_BASE).contains(&i) => {
                json(serde_json::to_value(ShapeKind::ALL[(i - SHAPE_BASE) as usize]).ok()?)
            }
            i if (DIRECTION_BASE..SIZE as u32).contains(&i) => {
                json(serde_json::to_value(Direction::ALL[(i - DIRECTION_BASE) as usize]).ok()?)
            }
            _ => None,
        }
    }

    pub(super) fn decode(ids: &[u32]) -> Option<(Color, ShapeKind, Direction)> {
        let words: Vec<u32> = ids.iter().copied().filter(|&i| i != PAD).collect();
        let [c, s, m, d] = words[..] else { return None };
        if m != MOVING {
            return None;
        }
        let color = Color::ALL.into_iter().find(|&x| color(x) == c)?;
        let shape = ShapeKind::ALL.into_iter().find(|&x| shape(x) == s)?;
        let dir = Direction::ALL.into_iter().find(|&x| direction(x) == d)?;
        Some((color, shape, dir))
    }
}

/// Everything needed to render a clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub shape: ShapeKind,
    pub color: Color,
    pub direction: Direction,
    /// Pixels per frame at high resolution.
    pub speed: f64,
    /// Half-extent in pixels.
    pub size: f64,
    pub start: [f64; 2],
    pub background: [f32; 3],
}

impl MotionSpec {
    pub fn random(r: &mut impl Rng, height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        MotionSpec {
            shape: ShapeKind::ALL[r.random_range(0..3)],
            color: Color::ALL[r.random_range(0..6)],
            direction: Direction::ALL[r.random_range(0..4)],
            speed: r.random_range(0.5..2.0),
            size: side * r.random_range(0.12..0.22),
            start: [r.random_range(0.0..width as f64), r.random_range(0.0..height as f64)],
            background: [r.random_range(0.0..0.35), r.random_range(0.0..0.35), r.random_range(0.0..0.35)],
        }
    }

    /// `"<color> <shape> moving <direction>"` padded to [`CAPTION_LEN`].
    pub fn caption(&self) -> Vec<u32> {
        let mut ids = vec![
            vocab::color(self.color),
            vocab::shape(self.shape),
            vocab::MOVING,
            vocab::direction(self.direction),
        ];
        ids.resize(CAPTION_LEN, vocab::PAD);
        ids
    }

    pub fn caption_text(&self) -> String {
        self.caption().iter().filter_map(|&i| vocab::word(i)).collect::<Vec<_>>().join(" ")
    }

    fn covers(&self, dx: f64, dy: f64) -> bool {
        let r = self.size;
        match self.shape {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Parses a caption back into (color, shape, direction).
pub fn decode_caption(ids: &[u32]) -> Option<(Color, ShapeKind, Direction)> {
    vocab::decode(ids)
}

fn wrap(d: f64, period: f64) -> f64 {
    let m = d.rem_euclid(period);
    if m >= period / 2.0 {
        m - period
    } else {
        m
    }
}

/// Renders `(1, F, 3, H, W)` with supersampled coverage.
pub fn render_clip(spec: &MotionSpec, frames: usize, height: usize, width: usize) -> VideoBatch<f32> {
    let color = spec.color.rgb();
    let (sx, sy) = spec.direction.step();
    let mut data = Array5::<f32>::zeros((1, frames, CHANNELS, height, width));
    let n = SUPERSAMPLE as f64;
    for f in 0..frames {
        let cx = spec.start[0] + sx * spec.speed * f as f64;
        let cy = spec.start[1] + sy * spec.speed * f as f64;
        for y in 0..height {
            for x in 0..width {
                let mut hits = 0usize;
                for sy_ in 0..SUPERSAMPLE {
                    for sx_ in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx_ as f64 + 0.5) / n;
                        let py = y as f64 + (sy_ as f64 + 0.5) / n;
                        if spec.covers(wrap(px - cx, width as f64), wrap(py - cy, height as f64)) {
                            hits += 1;
                        }
                    }
                }
                let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for c in 0..CHANNELS {
                    data[[0, f, c, y, x]] = spec.background[c] * (1.0 - cov) + color[c] * cov;
                }
            }
        }
    }
    VideoBatch { data }
}

/// Area-average pooling over `factor × factor` blocks.
pub fn downsample_lr<T: Scalar>(hr: &VideoBatch<T>, factor: usize) -> Result<VideoBatch<T>> {
    let (b, f, c, h, w) = hr.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!("{h}x{w} is not divisible by {factor}")));
    }
    let inv = T::of(1.0 / (factor * factor) as f64);
    let data = Array5::from_shape_fn((b, f, c, h / factor, w / factor), |(bi, fi, ci, y, x)| {
        let mut acc = T::zero();
        for dy in 0..factor {
            for dx in 0..factor {
                acc += hr.data[[bi, fi, ci, y * factor + dy, x * factor + dx]];
            }
        }
        acc * inv
    });
    Ok(VideoBatch { data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub hr: VideoBatch<f32>,
    pub lr: VideoBatch<f32>,
    pub caption: Vec<u32>,
    pub motion: MotionSpec,
}

impl ClipRecord {
    pub fn render(id: String, motion: MotionSpec, frames: usize, height: usize, width: usize) -> Self {
        let hr = render_clip(&motion, frames, height, width);
        let lr = downsample_lr(&hr, SR_FACTOR).expect("dimensions checked by the caller");
        ClipRecord {
            id,
            caption: motion.caption(),
            hr,
            lr,
            motion,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub clips: Vec<ClipRecord>,
}

pub fn clip_id(index: usize) -> String {
    format!("clip-{index:05}")
}

/// Deterministic corpus of `n_clips` clips of `frames` frames at `height × width`.
pub fn generate_corpus(n_clips: usize, frames: usize, height: usize, width: usize, seed: u64) -> Result<Corpus> {
    if frames < 2 {
        return Err(Error::config(format!("frames must be at least 2, got {frames}")));
    }
    if height == 0 || width == 0 || !height.is_multiple_of(16) || !width.is_multiple_of(16) {
        return Err(Error::config(format!("height and width must be positive multiples of 16, got {height}x{width}")));
    }
    let clips = (0..n_clips)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::derived_rng(seed, &clip_id(i));
            let motion = MotionSpec::random(&mut r, height, width);
            ClipRecord::render(clip_id(i), motion, frames, height, width)
        })
        .collect();
    Ok(Corpus {
        frames,
        height,
        width,
        seed,
        clips,
    })
}

/// Disjoint slices of a seeded shuffle of `0..n`, sized `floor(fraction · n)`.
pub fn split(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.iter().any(|&f| !(f > 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::config(format!("split fractions must be positive and sum to at most 1: {fractions:?}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::derived_rng(seed, "split"));
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for &f in fractions {
        let len = ((f * n as f64) + 1e-9).floor() as usize;
        let end = (start + len).min(n);
        out.push(order[start..end].to_vec());
        start = end;
    }
    Ok(out)
}

/// A source of `(hr, lr, caption)` training examples.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Example `i` as single-clip batches plus its caption.
    fn example(&self, i: usize) -> (VideoBatch<f32>, VideoBatch<f32>, Vec<u32>);
}

/// Stacks examples into batches of element type `T`.
pub fn collate<T: Scalar, D: Dataset + ?Sized>(ds: &D, indices: &[usize]) -> Result<(VideoBatch<T>, VideoBatch<T>, TextTokens)> {
    let mut hr = Vec::with_capacity(indices.len());
    let mut lr = Vec::with_capacity(indices.len());
    let mut caps = Vec::with_capacity(indices.len());
    for &i in indices {
        let (h, l, c) = ds.example(i);
        hr.push(h.cast::<T>());
        lr.push(l.cast::<T>());
        caps.push(c);
    }
    let width = caps.iter().map(Vec::len).max().unwrap_or(0);
    let ids = Array2::from_shape_fn((caps.len(), width), |(r, c)| caps[r].get(c).copied().unwrap_or(vocab::PAD));
    Ok((VideoBatch::stack(&hr)?, VideoBatch::stack(&lr)?, TextTokens { ids }))
}

impl Dataset for Corpus {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn example(&self, i: usize) -> (VideoBatch<f32>, VideoBatch<f32>, Vec<u32>) {
        let c = &self.clips[i];
        (c.hr.clone(), c.lr.clone(), c.caption.clone())
    }
}

/// A subset of a corpus's clips.
pub struct CorpusView<'a> {
    pub corpus: &'a Corpus,
    pub indices: Vec<usize>,
}

impl Dataset for CorpusView<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn example(&self, i: usize) -> (VideoBatch<f32>, VideoBatch<f32>, Vec<u32>) {
        self.corpus.example(self.indices[i])
    }
}

/// Individual frames of a clip subset, each as a one-frame clip (image training).
pub struct FrameDataset<'a> {
    pub corpus: &'a Corpus,
    pub indices: Vec<usize>,
}

impl Dataset for FrameDataset<'_> {
    fn len(&self) -> usize {
        self.indices.len() * self.corpus.frames
    }

    fn example(&self, i: usize) -> (VideoBatch<f32>, VideoBatch<f32>, Vec<u32>) {
        let clip = &self.corpus.clips[self.indices[i / self.corpus.frames]];
        let f = i % self.corpus.frames;
        let take = |v: &VideoBatch<f32>| VideoBatch {
            data: v.data.slice_axis(Axis(1), (f..f + 1).into()).to_owned(),
        };
        (take(&clip.hr), take(&clip.lr), clip.caption.clone())
    }
}

impl Corpus {
    pub fn view(&self, indices: Vec<usize>) -> CorpusView<'_> {
        CorpusView { corpus: self, indices }
    }

    pub fn frames_of(&self, indices: Vec<usize>) -> FrameDataset<'_> {
        FrameDataset { corpus: self, indices }
    }

    pub fn find(&self, id: &str) -> Option<&ClipRecord> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Checks that every stored low-resolution clip equals the downsampled original.
    pub fn verify_pairs(&self) -> Result<()> {
        for c in &self.clips {
            let expected = downsample_lr(&c.hr, SR_FACTOR)?;
            let same = expected.data.iter().zip(c.lr.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same || expected.dim() != c.lr.dim() {
                return Err(Error::Data(format!("{}: low-resolution frames do not match the downsampled clip", c.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.clips.len());
        for c in &self.clips {
            let hr_offset = blob.len();
            push_f32(&mut blob, c.hr.data.iter());
            let lr_offset = blob.len();
            push_f32(&mut blob, c.lr.data.iter());
            entries.push(CorpusEntry {
                id: c.id.clone(),
                motion_spec: c.motion.clone(),
                caption: c.caption.clone(),
                hr_offset,
                hr_length: lr_offset - hr_offset,
                lr_offset,
                lr_length: blob.len() - lr_offset,
            });
        }
        let manifest = CorpusManifest {
            format: CORPUS_FORMAT.into(),
            frames: self.frames,
            channels: CHANNELS,
            height: self.height,
            width: self.width,
            factor: SR_FACTOR,
            seed: self.seed,
            blob: "frames.bin".into(),
            clips: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::File::create(dir.join("frames.bin"))?.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        let text = fs::read(&manifest_path)
            .map_err(|e| Error::Data(format!("cannot read corpus manifest {}: {e}", manifest_path.display())))?;
        let m: CorpusManifest =
            serde_json::from_slice(&text).map_err(|e| Error::Format(format!("corpus manifest: {e}")))?;
        if m.format != CORPUS_FORMAT || m.channels != CHANNELS || m.factor != SR_FACTOR {
            return Err(Error::Format(format!(
                "unsupported corpus ({}, {} channels, factor {})",
                m.format, m.channels, m.factor
            )));
        }
        let blob = fs::read(dir.join(&m.blob))?;
        let (lh, lw) = (m.height / m.factor, m.width / m.factor);
        let clips = m
            .clips
            .into_iter()
            .map(|e| {
                let hr = read_f32(&blob, e.hr_offset, e.hr_length, (1, m.frames, m.channels, m.height, m.width), &e.id)?;
                let lr = read_f32(&blob, e.lr_offset, e.lr_length, (1, m.frames, m.channels, lh, lw), &e.id)?;
                Ok(ClipRecord {
                    id: e.id,
                    hr,
                    lr,
                    caption: e.caption,
                    motion: e.motion_spec,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus {
            frames: m.frames,
            height: m.height,
            width: m.width,
            seed: m.seed,
            clips,
        })
    }
}

fn push_f32<'a>(blob: &mut Vec<u8>, values: impl Iterator<Item = &'a f32>) {
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32(
    blob: &[u8],
    offset: usize,
    length: usize,
    shape: (usize, usize, usize, usize, usize),
    id: &str,
) -> Result<VideoBatch<f32>> {
    let numel = shape.0 * shape.1 * shape.2 * shape.3 * shape.4;
    if length != numel * 4 || offset + length > blob.len() {
        return Err(Error::Format(format!("{id}: byte range does not match shape {shape:?}")));
    }
    let values = blob[offset..offset + length]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array5::from_shape_vec(shape, values).map_err(|e| Error::Format(format!("{id}: {e}")))?;
    Ok(VideoBatch { data })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusEntry {
    id: String,
    motion_spec: MotionSpec,
    caption: Vec<u32>,
    hr_offset: usize,
    hr_length: usize,
    lr_offset: usize,
    lr_length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusManifest {
    format: String,
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    factor: usize,
    seed: u64,
    blob: String,
    clips: Vec<CorpusEntry>,
}

/// Named clips of arbitrary shape, e.g. generated samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSet {
    pub clips: Vec<(String, VideoBatch<f32>)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipSetEntry {
    id: String,
    shape: [usize; 4],
    byte_offset: usize,
    byte_length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipSetManifest {
    format: String,
    blob: String,
    clips: Vec<ClipSetEntry>,
}

impl ClipSet {
    pub fn get(&self, id: &str) -> Option<&VideoBatch<f32>> {
        self.clips.iter().find(|(i, _)| i == id).map(|(_, v)| v)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (id, v) in &self.clips {
            let (b, f, c, h, w) = v.dim();
            if b != 1 {
                return Err(Error::shape(format!("{id}: clip sets store single clips, got batch {b}")));
            }
            let byte_offset = blob.len();
            push_f32(&mut blob, v.data.iter());
            entries.push(ClipSetEntry {
                id: id.clone(),
                shape: [f, c, h, w],
                byte_offset,
                byte_length: blob.len() - byte_offset,
            });
        }
        let manifest = ClipSetManifest {
            format: CLIPSET_FORMAT.into(),
            blob: "clips.bin".into(),
            clips: entries,
        };
        fs::write(dir.join("clips.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::File::create(dir.join("clips.bin"))?.write_all(&blob)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<ClipSet> {
        let dir = dir.as_ref();
        let path = dir.join("clips.json");
        let text = fs::read(&path).map_err(|e| Error::Data(format!("cannot read clip set {}: {e}", path.display())))?;
        let m: ClipSetManifest = serde_json::from_slice(&text).map_err(|e| Error::Format(format!("clip set manifest: {e}")))?;
        if m.format != CLIPSET_FORMAT {
            return Err(Error::Format(format!("unsupported clip set format {}", m.format)));
        }
        let blob = fs::read(dir.join(&m.blob))?;
        let clips = m
            .clips
            .into_iter()
            .map(|e| {
                let [f, c, h, w] = e.shape;
                Ok((e.id.clone(), read_f32(&blob, e.byte_offset, e.byte_length, (1, f, c, h, w), &e.id)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipSet { clips })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_downsamples_to_same_constant() {
        let v = VideoBatch::new(Array5::from_elem((1, 2, 3, 8, 8), 0.37f64)).unwrap();
        let lr = downsample_lr(&v, 4).unwrap();
        assert_eq!(lr.dim(), (1, 2, 3, 2, 2));
        assert!(lr.data.iter().all(|&x| (x - 0.37).abs() < 1e-15));
    }

    #[test]
    fn block_mean_of_distinct_values() {
        let v = VideoBatch::new(Array5::from_shape_fn((1, 1, 1, 4, 4), |(.., y, x)| (y * 4 + x) as f64)).unwrap();
        let lr = downsample_lr(&v, 4).unwrap();
        assert_eq!(lr.data[[0, 0, 0, 0, 0]], 7.5);
    }

    #[test]
    fn indivisible_downsample_is_a_shape_error() {
        let v = VideoBatch::new(Array5::<f64>::zeros((1, 1, 1, 6, 8))).unwrap();
        assert!(matches!(downsample_lr(&v, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn stationary_clip_has_identical_frames() {
        let mut r = rng::rng(3);
        let mut spec = MotionSpec::random(&mut r, 32, 32);
        spec.speed = 0.0;
        let clip = render_clip(&spec, 4, 32, 32);
        for f in 1..4 {
            assert_eq!(clip.data.index_axis(Axis(1), f), clip.data.index_axis(Axis(1), 0));
        }
    }

    #[test]
    fn moving_clip_frames_differ() {
        let mut r = rng::rng(4);
        let spec = MotionSpec::random(&mut r, 32, 32);
        let clip = render_clip(&spec, 3, 32, 32);
        assert_ne!(clip.data.index_axis(Axis(1), 0), clip.data.index_axis(Axis(1), 1));
    }

    #[test]
    fn captions_decode_to_motion_fields() {
        let corpus = generate_corpus(40, 2, 16, 16, 11).unwrap();
        for c in &corpus.clips {
            let (color, shape, dir) = decode_caption(&c.caption).unwrap();
            assert_eq!((color, shape, dir), (c.motion.color, c.motion.shape, c.motion.direction));
            assert_eq!(c.caption.len(), CAPTION_LEN);
            assert!(c.caption.iter().all(|&i| (i as usize) < vocab::SIZE));
        }
        let text = corpus.clips[0].motion.caption_text();
        assert_eq!(text.split(' ').nth(2), Some("moving"));
    }

    #[test]
    fn corpus_dimensions_are_validated() {
        assert!(matches!(generate_corpus(1, 1, 32, 32, 0), Err(Error::Config(_))));
        assert!(matches!(generate_corpus(1, 2, 20, 32, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_fractions() {
        let all = split(10, &[1.0], 5).unwrap();
        let mut sorted = all[0].clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let halves = split(10, &[0.5, 0.5], 5).unwrap();
        assert_eq!(halves[0].len() + halves[1].len(), 10);
        assert!(halves[0].iter().all(|i| !halves[1].contains(i)));
        assert_eq!(split(10, &[0.5, 0.5], 5).unwrap(), halves);
        assert!(split(10, &[0.7, 0.5], 5).is_err());
        assert!(split(10, &[0.0], 5).is_err());
    }

    #[test]
    fn frame_dataset_yields_single_frames() {
        let corpus = generate_corpus(2, 3, 16, 16, 1).unwrap();
        let ds = corpus.frames_of(vec![1]);
        assert_eq!(ds.len(), 3);
        let (hr, lr, _) = ds.example(2);
        assert_eq!(hr.dim(), (1, 1, 3, 16, 16));
        assert_eq!(lr.dim(), (1, 1, 3, 4, 4));
        assert_eq!(hr.data.index_axis(Axis(1), 0), corpus.clips[1].hr.data.index_axis(Axis(1), 2));
    }
}
