//! Captioned moving-shapes clips: generation, the manifest, and batch loading.
//!
//! Shapes are axis-aligned squares or discs with hard edges on a black
//! background. Each moves with a constant integer velocity and bounces
//! elastically off the canvas borders, so every pixel of every frame follows
//! from the [`SceneSpec`] exactly.

use std::fs;
use std::path::{Path, PathBuf};

use crossvae_core::config::{SPATIAL_FACTOR, TEMPORAL_FACTOR};
use crossvae_core::rng::SeededRng;
use crossvae_core::{Tensor, VideoTensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vten;

pub const MANIFEST: &str = "manifest.json";
pub const MAX_SHAPES: usize = 4;
pub const MAX_SPEED: i64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 2] = [ShapeKind::Square, ShapeKind::Circle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
        }
    }
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
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Cyan, Color::Magenta, Color::White, Color::Orange];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speed {
    Slow,
    Medium,
    Fast,
}

impl Speed {
    /// Classifies by the larger velocity component.
    pub fn of(vx: i64, vy: i64) -> Speed {
        match vx.abs().max(vy.abs()) {
            0..=1 => Speed::Slow,
            2 => Speed::Medium,
            _ => Speed::Fast,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Speed::Slow => "slow",
            Speed::Medium => "medium",
            Speed::Fast => "fast",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    /// Side length, or diameter for circles, in pixels.
    pub size: usize,
    /// Top-left corner in frame 0.
    pub x: i64,
    pub y: i64,
    /// Pixels per frame; positive y points down.
    pub vx: i64,
    pub vy: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Painted in order; later shapes cover earlier ones.
    pub shapes: Vec<ShapeSpec>,
}

/// Position and velocity after `t` frames of motion on `[0, max]` with elastic walls.
pub fn reflect(p0: i64, v: i64, max: i64, t: usize) -> (i64, i64) {
    let (mut p, mut v) = (p0, v);
    if max == 0 {
        return (0, v);
    }
    for _ in 0..t {
        p += v;
        loop {
            if p < 0 {
                p = -p;
                v = -v;
            } else if p > max {
                p = 2 * max - p;
                v = -v;
            } else {
                break;
            }
        }
    }
    (p, v)
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Dataset(format!("invalid scene spec: {}", msg.into()))
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % SPATIAL_FACTOR != 0 || self.width % SPATIAL_FACTOR != 0 {
            return Err(invalid(format!("canvas {}x{} must be divisible by {SPATIAL_FACTOR}", self.height, self.width)));
        }
        if self.frames == 0 || self.frames % TEMPORAL_FACTOR != 0 {
            return Err(invalid(format!("frame count {} must be divisible by {TEMPORAL_FACTOR}", self.frames)));
        }
        if self.shapes.is_empty() || self.shapes.len() > MAX_SHAPES {
            return Err(invalid(format!("{} shapes, expected 1 to {MAX_SHAPES}", self.shapes.len())));
        }
        for s in &self.shapes {
            if s.size == 0 || s.size > self.height.min(self.width) {
                return Err(invalid(format!("shape size {} does not fit the canvas", s.size)));
            }
            if s.vx.abs() > MAX_SPEED || s.vy.abs() > MAX_SPEED {
                return Err(invalid(format!("velocity ({}, {}) outside [-{MAX_SPEED}, {MAX_SPEED}]", s.vx, s.vy)));
            }
            let (mx, my) = self.limits(s);
            if !(0..=mx).contains(&s.x) || !(0..=my).contains(&s.y) {
                return Err(invalid(format!("start ({}, {}) outside the canvas", s.x, s.y)));
            }
        }
        Ok(())
    }

    fn limits(&self, s: &ShapeSpec) -> (i64, i64) {
        ((self.width - s.size) as i64, (self.height - s.size) as i64)
    }

    /// Top-left corner and velocity of shape `i` in frame `t`.
    pub fn state(&self, i: usize, t: usize) -> ((i64, i64), (i64, i64)) {
        let s = &self.shapes[i];
        let (mx, my) = self.limits(s);
        let (x, vx) = reflect(s.x, s.vx, mx, t);
        let (y, vy) = reflect(s.y, s.vy, my, t);
        ((x, y), (vx, vy))
    }

    /// Rendered clip in [0, 1], shape (3, T, H, W).
    pub fn render_unit(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut data = vec![0.0f32; 3 * self.frames * plane];
        for (i, s) in self.shapes.iter().enumerate() {
            let rgb = s.color.rgb();
            let size = s.size as i64;
            for t in 0..self.frames {
                let ((x, y), _) = self.state(i, t);
                for py in y..y + size {
                    for px in x..x + size {
                        if s.kind == ShapeKind::Circle {
                            // Pixel centres and the disc centre in doubled coordinates.
                            let dx = 2 * px + 1 - (2 * x + size);
                            let dy = 2 * py + 1 - (2 * y + size);
                            if dx * dx + dy * dy > size * size {
                                continue;
                            }
                        }
                        let at = t * plane + py as usize * w + px as usize;
                        for (c, &v) in rgb.iter().enumerate() {
                            data[c * self.frames * plane + at] = v;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[3, self.frames, h, w], data).expect("sized")
    }

    pub fn render(&self) -> Result<VideoTensor<f32>> {
        self.validate()?;
        VideoTensor::from_unit(self.render_unit()).map_err(|e| Error::Dataset(e.to_string()))
    }

    /// e.g. "red square moving right fast, blue circle moving down slow".
    pub fn caption(&self) -> String {
        self.shapes.iter().map(describe).collect::<Vec<_>>().join(", ")
    }

    /// Draws a random scene within `template`'s bounds.
    pub fn sample(template: &DatasetTemplate, seed: u64) -> SceneSpec {
        let mut rng = SeededRng::new(seed);
        let n = rng.int_range(template.shapes[0] as i64, template.shapes[1] as i64) as usize;
        let shapes = (0..n)
            .map(|_| {
                let kind = ShapeKind::ALL[rng.int_range(0, 1) as usize];
                let color = Color::ALL[rng.int_range(0, 7) as usize];
                let size = rng.int_range(template.size[0] as i64, template.size[1] as i64) as usize;
                let x = rng.int_range(0, (template.width - size) as i64);
                let y = rng.int_range(0, (template.height - size) as i64);
                let vx = rng.int_range(-MAX_SPEED, MAX_SPEED);
                let vy = rng.int_range(-MAX_SPEED, MAX_SPEED);
                ShapeSpec { kind, color, size, x, y, vx, vy }
            })
            .collect();
        SceneSpec { frames: template.frames, height: template.height, width: template.width, seed, shapes }
    }
}

fn direction(vx: i64, vy: i64) -> String {
    let vertical = match vy.signum() {
        -1 => Some("up"),
        1 => Some("down"),
        _ => None,
    };
    let horizontal = match vx.signum() {
        -1 => Some("left"),
        1 => Some("right"),
        _ => None,
    };
    match (vertical, horizontal) {
        (Some(v), Some(h)) => format!("{v}-{h}"),
        (Some(v), None) => v.to_string(),
        (None, Some(h)) => h.to_string(),
        (None, None) => unreachable!("caller handles still shapes"),
    }
}

fn describe(s: &ShapeSpec) -> String {
    if s.vx == 0 && s.vy == 0 {
        return format!("{} {} standing still", s.color.name(), s.kind.name());
    }
    format!("{} {} moving {} {}", s.color.name(), s.kind.name(), direction(s.vx, s.vy), Speed::of(s.vx, s.vy).name())
}

/// What a caption says about one shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionShape {
    pub color: Color,
    pub kind: ShapeKind,
    /// Signs of (vx, vy).
    pub heading: (i64, i64),
    /// `None` for still shapes.
    pub speed: Option<Speed>,
}

/// Parses a generated caption back into per-shape motion claims.
pub fn parse_caption(caption: &str) -> Result<Vec<CaptionShape>> {
    let bad = || Error::Dataset(format!("unparseable caption {caption:?}"));
    caption
        .split(", ")
        .map(|clause| {
            let words: Vec<&str> = clause.split(' ').collect();
            let color = Color::ALL.into_iter().find(|c| Some(&c.name()) == words.first()).ok_or_else(bad)?;
            let kind = ShapeKind::ALL.into_iter().find(|k| Some(&k.name()) == words.get(1)).ok_or_else(bad)?;
            match &words[2..] {
                ["standing", "still"] => Ok(CaptionShape { color, kind, heading: (0, 0), speed: None }),
                ["moving", dir, speed] => {
                    let mut heading = (0, 0);
                    for part in dir.split('-') {
                        match part {
                            "up" => heading.1 = -1,
                            "down" => heading.1 = 1,
                            "left" => heading.0 = -1,
                            "right" => heading.0 = 1,
                            _ => return Err(bad()),
                        }
                    }
                    let speed = [Speed::Slow, Speed::Medium, Speed::Fast].into_iter().find(|s| s.name() == *speed).ok_or_else(bad)?;
                    Ok(CaptionShape { color, kind, heading, speed: Some(speed) })
                }
                _ => Err(bad()),
            }
        })
        .collect()
}

/// Whether `caption` describes the initial motion of `spec`'s shapes.
pub fn caption_matches(caption: &str, spec: &SceneSpec) -> bool {
    let Ok(parsed) = parse_caption(caption) else { return false };
    parsed.len() == spec.shapes.len()
        && parsed.iter().zip(&spec.shapes).all(|(p, s)| {
            let still = s.vx == 0 && s.vy == 0;
            p.color == s.color
                && p.kind == s.kind
                && p.heading == (s.vx.signum(), s.vy.signum())
                && p.speed == if still { None } else { Some(Speed::of(s.vx, s.vy)) }
        })
}

/// Bounds for randomly drawn scenes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTemplate {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of the shape count.
    pub shapes: [usize; 2],
    /// Inclusive range of shape sizes in pixels.
    pub size: [usize; 2],
}

impl DatasetTemplate {
    /// One or two shapes between an eighth and a third of the shorter side.
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        let side = height.min(width);
        let lo = (side / 8).max(1);
        DatasetTemplate { frames, height, width, shapes: [1, 2], size: [lo, (side / 3).max(lo)] }
    }

    pub fn validate(&self) -> Result<()> {
        let probe = SceneSpec { frames: self.frames, height: self.height, width: self.width, seed: 0, shapes: Vec::new() };
        let [lo, hi] = self.shapes;
        if lo == 0 || lo > hi || hi > MAX_SHAPES {
            return Err(invalid(format!("shape count range {lo}..={hi} must lie within 1..={MAX_SHAPES}")));
        }
        let [slo, shi] = self.size;
        if slo == 0 || slo > shi || shi > self.height.min(self.width) {
            return Err(invalid(format!("size range {slo}..={shi} does not fit the canvas")));
        }
        match probe.validate() {
            Err(e) if !e.to_string().contains("shapes, expected") => Err(e),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub caption: String,
    pub spec: SceneSpec,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(Error::io(path))
}

/// Renders `n` scenes drawn from `template` into `out` (created atomically:
/// everything is written to a sibling temporary directory that is then renamed).
pub fn generate_dataset(out: &Path, template: &DatasetTemplate, n: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    template.validate()?;
    if out.exists() {
        let empty = fs::read_dir(out).map_err(Error::io(out))?.next().is_none();
        if !empty {
            return Err(Error::Dataset(format!("output directory {} exists and is not empty", out.display())));
        }
        fs::remove_dir(out).map_err(Error::io(out))?;
    }
    let name = out.file_name().ok_or_else(|| Error::Dataset(format!("invalid output path {}", out.display())))?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(Error::io(parent))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(Error::io(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(Error::io(&tmp))?;
    let result = (|| {
        let root = SeededRng::new(seed);
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let spec = SceneSpec::sample(template, root.fork(i as u64 + 1).next_u64());
            let file = format!("video_{i:04}.vten");
            vten::write_video(tmp.join(&file), &spec.render()?)?;
            entries.push(ManifestEntry { file, caption: spec.caption(), spec });
        }
        write_json(&tmp.join(MANIFEST), &entries)?;
        Ok(entries)
    })();
    match result {
        Ok(entries) => {
            fs::rename(&tmp, out).map_err(Error::io(out))?;
            Ok(entries)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

/// Clips plus the caption of the video each came from.
#[derive(Clone, Debug)]
pub struct LoadedBatch {
    pub videos: Vec<VideoTensor<f32>>,
    pub captions: Vec<String>,
}

impl LoadedBatch {
    /// Stacks the clips into (B, C, T, H, W).
    pub fn stacked(&self) -> Result<Tensor<f32>> {
        let first = self.videos.first().ok_or_else(|| Error::Dataset("empty batch".into()))?.shape();
        let mut data = Vec::new();
        for v in &self.videos {
            if v.shape() != first {
                return Err(Error::Dataset(format!("cannot stack clips of shapes {first:?} and {:?}", v.shape())));
            }
            data.extend_from_slice(v.tensor().data());
        }
        let mut shape = vec![self.videos.len()];
        shape.extend(first);
        Tensor::from_vec(&shape, data).map_err(|e| Error::Dataset(e.to_string()))
    }
}

/// A generated dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let entries = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        Ok(Dataset { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, i: usize) -> Result<&ManifestEntry> {
        self.entries.get(i).ok_or_else(|| Error::Dataset(format!("index {i} out of range for {} videos", self.entries.len())))
    }

    pub fn video_path(&self, i: usize) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(i)?.file))
    }

    pub fn load_video(&self, i: usize) -> Result<VideoTensor<f32>> {
        vten::read_video(self.video_path(i)?)
    }

    /// Loads the selected clips; with `as_images` every frame becomes its own
    /// T = 1 sample carrying its clip's caption.
    pub fn load_batch(&self, indices: &[usize], as_images: bool) -> Result<LoadedBatch> {
        let mut batch = LoadedBatch { videos: Vec::new(), captions: Vec::new() };
        for &i in indices {
            let caption = self.entry(i)?.caption.clone();
            let video = self.load_video(i)?;
            if as_images {
                for t in 0..video.frames() {
                    batch.videos.push(video.frame(t).map_err(|e| Error::Dataset(e.to_string()))?);
                    batch.captions.push(caption.clone());
                }
            } else {
                batch.videos.push(video);
                batch.captions.push(caption);
            }
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: i64, vx: i64) -> SceneSpec {
        let shape = ShapeSpec { kind: ShapeKind::Square, color: Color::Red, size: 4, x, y: 8, vx, vy: 0 };
        SceneSpec { frames: 8, height: 32, width: 32, seed: 0, shapes: vec![shape] }
    }

    #[test]
    fn linear_motion_before_any_wall() {
        let spec = square(4, 2);
        assert_eq!(spec.state(0, 3).0, (10, 8));
        let u = spec.render_unit();
        let at = |c: usize, t: usize, y: usize, x: usize| u.data()[((c * 8 + t) * 32 + y) * 32 + x];
        assert_eq!(at(0, 3, 8, 10), 1.0);
        assert_eq!(at(0, 3, 8, 13), 1.0);
        assert_eq!(at(0, 3, 8, 9), 0.0);
        assert_eq!(at(0, 3, 8, 14), 0.0);
        assert_eq!(at(1, 3, 8, 10), 0.0);
    }

    #[test]
    fn wall_hit_flips_velocity() {
        // max x is 28: 26 -> 30 reflects to 26 with velocity -4.
        let spec = square(26, 4);
        assert_eq!(spec.state(0, 1), ((26, 8), (-4, 0)));
        for t in 0..8 {
            let ((x, _), _) = spec.state(0, t);
            assert!((0..=28).contains(&x));
        }
        assert_eq!(spec.state(0, 2), ((22, 8), (-4, 0)));
    }

    #[test]
    fn circle_edges_are_hard() {
        let shape = ShapeSpec { kind: ShapeKind::Circle, color: Color::White, size: 8, x: 0, y: 0, vx: 0, vy: 0 };
        let spec = SceneSpec { frames: 4, height: 16, width: 16, seed: 0, shapes: vec![shape] };
        let u = spec.render_unit();
        assert!(u.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let on = |y: usize, x: usize| u.data()[y * 16 + x] == 1.0;
        assert!(on(3, 3) && on(0, 3) && on(3, 0));
        assert!(!on(0, 0) && !on(7, 7) && !on(8, 3));
    }

    #[test]
    fn captions_name_motion() {
        let mut spec = square(4, 4);
        let blue = ShapeSpec { kind: ShapeKind::Circle, color: Color::Blue, size: 4, x: 0, y: 0, vx: 0, vy: 1 };
        spec.shapes.push(blue);
        assert_eq!(spec.caption(), "red square moving right fast, blue circle moving down slow");
        spec.shapes[1].vx = -2;
        spec.shapes[1].vy = -1;
        assert_eq!(spec.caption(), "red square moving right fast, blue circle moving up-left medium");
        spec.shapes[0].vx = 0;
        assert!(spec.caption().starts_with("red square standing still"));
        assert!(caption_matches(&spec.caption(), &spec));
        assert!(!caption_matches("red square moving left fast, blue circle moving up-left medium", &spec));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(square(4, 2).validate().is_ok());
        assert!(square(4, 5).validate().is_err());
        assert!(square(29, 1).validate().is_err());
        assert!(SceneSpec { frames: 6, ..square(4, 2) }.validate().is_err());
        assert!(SceneSpec { width: 36, ..square(4, 2) }.validate().is_err());
        assert!(SceneSpec { shapes: vec![], ..square(4, 2) }.validate().is_err());
        assert!(DatasetTemplate { shapes: [1, 5], ..DatasetTemplate::new(8, 32, 32) }.validate().is_err());
        assert!(DatasetTemplate::new(6, 32, 32).validate().is_err());
    }
}
