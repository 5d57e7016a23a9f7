//! Synthetic occluded stick figures.
//!
//! Each image shows one articulated figure. Its left/right limb pairs can
//! be rendered identically, in which case only the figure's facing marker
//! (a short stroke on the head pointing to the figure's left side) says
//! which limb is which. Occluder rectangles hide keypoints and clear their
//! visibility flags.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{Reader, Writer};
use crate::error::{invalid, Error, Result};
use crate::pgm;
use crate::tensor::{Dims, Tensor};

/// Joint names in keypoint order; the first `n_keypoints` are used.
/// Mirrored pairs come first.
pub const JOINT_NAMES: [&str; 10] = [
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
    "left_elbow",
    "right_elbow",
    "left_knee",
    "right_knee",
    "head",
    "pelvis",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_keypoints: usize,
    pub occlusion_rate: f64,
    /// Probability that mirrored limbs share one appearance.
    pub ambiguity: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 100,
            image_size: 56,
            n_keypoints: 4,
            occlusion_rate: 0.3,
            ambiguity: 1.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("occlusion_rate", self.occlusion_rate),
            ("ambiguity", self.ambiguity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return invalid(format!("{name} must be a probability, got {p}"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return invalid(format!(
                "noise_std must be nonnegative, got {}",
                self.noise_std
            ));
        }
        if self.n_keypoints == 0 || self.n_keypoints > JOINT_NAMES.len() {
            return invalid(format!(
                "n_keypoints must be in 1..={}, got {}",
                JOINT_NAMES.len(),
                self.n_keypoints
            ));
        }
        if self.image_size < 40 {
            return invalid(format!(
                "image_size must be at least 40 to fit a figure, got {}",
                self.image_size
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1 x S x S`, values representable in f32.
    pub image: Tensor,
    /// `(x, y)` pixel coordinates, in `[0, S)`.
    pub keypoints: Vec<(f64, f64)>,
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    gray: f64,
}

impl Segment {
    fn distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (cx, cy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    gray: f64,
}

impl Rect {
    fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= self.x0 && p.0 <= self.x1 && p.1 >= self.y0 && p.1 <= self.y1
    }
}

struct Figure {
    segments: Vec<Segment>,
    joints: [(f64, f64); 10],
}

fn rotate(v: (f64, f64), a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

fn add(p: (f64, f64), v: (f64, f64), len: f64) -> (f64, f64) {
    (p.0 + v.0 * len, p.1 + v.1 * len)
}

/// Samples a pose. `left_side` is +1 when the figure's left limbs attach on
/// the image-right side, -1 otherwise.
fn pose(rng: &mut ChaCha8Rng, size: f64, distinct: bool) -> Figure {
    let left_side: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let c = size / 2.0;
    let pelvis = (
        c + rng.random_range(-6.0..6.0),
        c + rng.random_range(2.0..6.0),
    );
    let tilt = rng.random_range(-0.25..0.25);
    let up = rotate((0.0, -1.0), tilt);
    let across = (-up.1, up.0);
    let torso = rng.random_range(10.0..12.5);
    let neck = add(pelvis, up, torso);
    let head = add(neck, up, 4.5);

    let limb_gray = |left: bool| {
        if distinct && left {
            1.0
        } else if distinct {
            0.55
        } else {
            1.0
        }
    };
    let mut segments = vec![Segment {
        a: pelvis,
        b: neck,
        gray: 1.0,
    }];
    // Head ring plus the facing marker.
    for k in 0..12 {
        let a0 = k as f64 * std::f64::consts::TAU / 12.0;
        let a1 = (k + 1) as f64 * std::f64::consts::TAU / 12.0;
        segments.push(Segment {
            a: (head.0 + 3.0 * a0.cos(), head.1 + 3.0 * a0.sin()),
            b: (head.0 + 3.0 * a1.cos(), head.1 + 3.0 * a1.sin()),
            gray: 1.0,
        });
    }
    segments.push(Segment {
        a: head,
        b: add(head, across, 5.5 * left_side),
        gray: 1.0,
    });
    for t in [0.1, 0.7] {
        let p = add(pelvis, up, torso * t);
        segments.push(Segment {
            a: p,
            b: add(p, across, 4.0 * left_side),
            gray: 1.0,
        });
    }

    let down = (-up.0, -up.1);
    let mut limb = |root: (f64, f64), side: f64, left: bool, arm: bool| {
        let (spread, bend, l1, l2) = if arm {
            (
                rng.random_range(0.25..2.3),
                rng.random_range(-1.3..1.3),
                rng.random_range(7.0..8.5),
                rng.random_range(7.0..8.5),
            )
        } else {
            (
                rng.random_range(0.0..0.3),
                rng.random_range(-0.5..0.5),
                rng.random_range(8.0..9.5),
                rng.random_range(8.0..9.5),
            )
        };
        // Positive rotation turns "down" towards +x in image coordinates.
        let dir1 = rotate(down, -side * spread);
        let mid = add(root, dir1, l1);
        let end = add(mid, rotate(dir1, bend), l2);
        let gray = limb_gray(left);
        segments.push(Segment {
            a: root,
            b: mid,
            gray,
        });
        segments.push(Segment {
            a: mid,
            b: end,
            gray,
        });
        (mid, end)
    };
    let mut joints = [(0.0, 0.0); 10];
    for (left, side) in [(true, left_side), (false, -left_side)] {
        let shoulder = add(neck, across, 4.0 * side);
        let hip = add(pelvis, across, 2.0 * side);
        let (elbow, hand) = limb(shoulder, side_in_image(side, across), left, true);
        let (knee, foot) = limb(hip, side_in_image(side, across), left, false);
        let o = usize::from(!left);
        joints[o] = hand;
        joints[2 + o] = foot;
        joints[4 + o] = elbow;
        joints[6 + o] = knee;
    }
    joints[8] = head;
    joints[9] = pelvis;
    Figure { segments, joints }
}

/// Sign of the image-x direction of `across * side`.
fn side_in_image(side: f64, across: (f64, f64)) -> f64 {
    if across.0 * side >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn stream_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders sample `index` of the dataset described by `spec`.
pub fn generate_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    if index >= spec.n_samples {
        return invalid(format!(
            "sample index {index} out of range for {} samples",
            spec.n_samples
        ));
    }
    let mut rng = stream_rng(spec.seed, index);
    let size = spec.image_size as f64;
    let distinct = !rng.random_bool(spec.ambiguity);
    let figure = loop {
        let f = pose(&mut rng, size, distinct);
        let inside = f
            .joints
            .iter()
            .all(|&(x, y)| x >= 1.0 && y >= 1.0 && x <= size - 2.0 && y <= size - 2.0);
        if inside {
            break f;
        }
    };
    let m = spec.n_keypoints;
    let keypoints: Vec<(f64, f64)> = figure.joints[..m]
        .iter()
        .map(|&(x, y)| (x as f32 as f64, y as f32 as f64))
        .collect();

    let mut occluders = Vec::new();
    for &(kx, ky) in &keypoints {
        if !rng.random_bool(spec.occlusion_rate) {
            continue;
        }
        let w = rng.random_range(7.0..12.0);
        let h = rng.random_range(7.0..12.0);
        // Keep the keypoint at least 2 px inside the rectangle.
        let x0 = kx - rng.random_range(2.0..w - 2.0);
        let y0 = ky - rng.random_range(2.0..h - 2.0);
        occluders.push(Rect {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
            gray: rng.random_range(0.3..0.8),
        });
    }
    let visible = keypoints
        .iter()
        .map(|&p| !occluders.iter().any(|r| r.contains(p)))
        .collect();

    let s = spec.image_size;
    let mut img = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let p = (x as f64, y as f64);
            let mut v: f64 = 0.0;
            for seg in &figure.segments {
                // 2 px wide stroke, one pixel of linear falloff.
                let cover = (1.5 - seg.distance(p)).clamp(0.0, 1.0);
                v = v.max(cover * seg.gray);
            }
            for r in &occluders {
                if r.contains(p) {
                    v = r.gray;
                }
            }
            img[y * s + x] = v;
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise std");
        for v in &mut img {
            *v += noise.sample(&mut rng);
        }
    }
    let img = img.into_iter().map(|v| v as f32 as f64).collect();
    Ok(Sample {
        image: Tensor::from_vec(Dims::new(1, s, s), img)?,
        keypoints,
        visible,
    })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.n_samples)
        .map(|i| generate_sample(spec, i))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Image coordinate to the nearest pixel of an `out`-sized map covering an
/// `image`-sized frame (pixel centres aligned).
pub fn to_heatmap_coord(v: f64, image: usize, out: usize) -> f64 {
    (v + 0.5) * out as f64 / image as f64 - 0.5
}

pub fn from_heatmap_coord(v: f64, image: usize, out: usize) -> f64 {
    (v + 0.5) * image as f64 / out as f64 - 0.5
}

/// Binary targets: channel `m` is 1 within Euclidean distance `radius` of
/// keypoint `m`'s rounded heatmap position, all zero if it is invisible.
pub fn make_target(sample: &Sample, heatmap: (usize, usize), radius: f64) -> Result<Tensor> {
    if !(radius >= 0.0) {
        return invalid(format!("radius must be nonnegative, got {radius}"));
    }
    let (h, w) = heatmap;
    let s = sample.image.height();
    let sw = sample.image.width();
    let m = sample.keypoints.len();
    let mut t = Tensor::zeros(Dims::new(m, h, w));
    for (c, (&(kx, ky), &vis)) in sample.keypoints.iter().zip(&sample.visible).enumerate() {
        if !vis {
            continue;
        }
        let cx = to_heatmap_coord(kx, sw, w).round();
        let cy = to_heatmap_coord(ky, s, h).round();
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 <= radius * radius {
                    t.set(c, y, x, 1.0);
                }
            }
        }
    }
    Ok(t)
}

const DATASET_MAGIC: &[u8; 4] = b"RGDS";
pub const DATASET_VERSION: u16 = 1;

pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    let sp = &d.spec;
    w.usize(d.samples.len());
    w.usize(sp.image_size);
    w.usize(1);
    w.usize(sp.n_keypoints);
    w.f64(sp.occlusion_rate);
    w.f64(sp.ambiguity);
    w.f64(sp.noise_std);
    w.u64(sp.seed);
    for s in &d.samples {
        for &v in s.image.data() {
            w.f32(v as f32);
        }
        for &(x, y) in &s.keypoints {
            w.f32(x as f32);
            w.f32(y as f32);
        }
        for &v in &s.visible {
            w.u8(u8::from(v));
        }
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, "dataset");
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n = r.usize("header")?;
    let size = r.usize("header")?;
    let channels = r.usize("header")?;
    let m = r.usize("header")?;
    let spec = DatasetSpec {
        n_samples: n,
        image_size: size,
        n_keypoints: m,
        occlusion_rate: r.f64("header")?,
        ambiguity: r.f64("header")?,
        noise_std: r.f64("header")?,
        seed: r.u64("header")?,
    };
    if channels != 1 {
        return Err(r.error(format!("unsupported channel count {channels}")));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let img = r.f32s(size * size, &format!("sample {i} image"))?;
        let kp = r.f32s(2 * m, &format!("sample {i} keypoints"))?;
        let vis = r.take(m, &format!("sample {i} visibility"))?;
        let mut visible = Vec::with_capacity(m);
        for &b in vis {
            match b {
                0 => visible.push(false),
                1 => visible.push(true),
                _ => return Err(r.error(format!("sample {i}: visibility byte {b} is not 0/1"))),
            }
        }
        samples.push(Sample {
            image: Tensor::from_vec(
                Dims::new(1, size, size),
                img.into_iter().map(f64::from).collect(),
            )?,
            keypoints: kp
                .chunks_exact(2)
                .map(|c| (c[0] as f64, c[1] as f64))
                .collect(),
            visible,
        });
    }
    r.finish()?;
    Ok(Dataset { spec, samples })
}

pub fn write_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// Writes each image as `images/sample_NNNNN.pgm` under `dir` plus a
/// `manifest.txt` with one line per sample: `path x0 y0 v0 x1 y1 v1 ...`.
pub fn write_manifest(d: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    let mut manifest = String::new();
    for (i, s) in d.samples.iter().enumerate() {
        let rel = format!("images/sample_{i:05}.pgm");
        let pixels: Vec<u8> = s
            .image
            .data()
            .iter()
            .map(|&v| pgm::unit_to_byte(v))
            .collect();
        pgm::write_pgm(&dir.join(&rel), s.image.width(), s.image.height(), &pixels)?;
        manifest.push_str(&rel);
        for (&(x, y), &v) in s.keypoints.iter().zip(&s.visible) {
            manifest.push_str(&format!(" {x} {y} {}", u8::from(v)));
        }
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads a manifest written by [`write_manifest`]; image paths are
/// relative to the manifest's directory. Pixels are scaled to `[0, 1]`.
pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len();
        let bad = |msg: String| Error::Format {
            what: "manifest",
            offset: at,
            msg,
        };
        let mut parts = line.split_whitespace();
        let Some(rel) = parts.next() else { continue };
        let fields: Vec<&str> = parts.collect();
        if fields.len() % 3 != 0 {
            return Err(bad("expected (x y visible) triples after the path".into()));
        }
        let (w, h, px) = pgm::read_pgm(&dir.join(rel))?;
        let image = Tensor::from_vec(
            Dims::new(1, h, w),
            px.into_iter().map(|b| b as f64 / 255.0).collect(),
        )?;
        let mut keypoints = Vec::new();
        let mut visible = Vec::new();
        for t in fields.chunks_exact(3) {
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("bad number {s:?}")))
            };
            keypoints.push((num(t[0])?, num(t[1])?));
            visible.push(match t[2] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("bad visibility flag {other:?}"))),
            });
        }
        samples.push(Sample {
            image,
            keypoints,
            visible,
        });
    }
    Ok(samples)
}
