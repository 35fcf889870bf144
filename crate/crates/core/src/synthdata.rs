//! Deterministic synthetic shape scenes.
//!
//! Scenes are small RGB canvases with a noisy gray background and a few
//! colored geometric objects.  Class identity is carried by *shape*, not
//! color — every color in the palette is shared by several classes — so a
//! model must learn spatial structure.  Later objects occlude earlier ones;
//! a scene is resampled whenever occlusion hides too much of any object.
//!
//! Everything is driven by a seeded ChaCha stream: the same seed always
//! reproduces the same scenes bit for bit, on any platform.
//!
//! Class ids map to shapes as: 1 disk, 2 square, 3 triangle, 4 ring,
//! 5 cross, 6 bar, 7 diamond, 8 corner.  The lower ids are blob-like, the
//! higher ids thin and angular, which makes the later increments of the
//! standard protocols genuinely harder.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::label::{LabelMap, BACKGROUND};
use crate::tensor::{Shape, Tensor};

/// Number of shape painters, and therefore the largest usable class id.
pub const MAX_CLASSES: usize = 8;

/// How the class inventory is split across training steps: `initial`
/// classes first, then `increment` new classes in each of the remaining
/// steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskProtocol {
    initial: usize,
    increment: usize,
    steps: usize,
}

impl TaskProtocol {
    pub fn new(initial: usize, increment: usize, steps: usize) -> Result<TaskProtocol> {
        if initial == 0 || steps == 0 {
            return Err(Error::Config(format!(
                "protocol requires at least one initial class and one step, \
                 got {initial} and {steps}"
            )));
        }
        if steps > 1 && increment == 0 {
            return Err(Error::Config(
                "protocol with multiple steps requires a positive increment".into(),
            ));
        }
        let total = initial + increment * (steps - 1);
        if total > MAX_CLASSES {
            return Err(Error::Config(format!(
                "protocol defines {total} classes but only {MAX_CLASSES} shapes exist"
            )));
        }
        Ok(TaskProtocol {
            initial,
            increment,
            steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn increment(&self) -> usize {
        self.increment
    }

    /// All class ids over the full sequence.
    pub fn total_classes(&self) -> usize {
        self.initial + self.increment * (self.steps - 1)
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step == 0 || step > self.steps {
            return Err(Error::Config(format!(
                "step {step} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// The class ids introduced at `step` (1-based).
    pub fn classes_at(&self, step: usize) -> Result<Vec<u16>> {
        self.check_step(step)?;
        let (lo, hi) = if step == 1 {
            (1, self.initial)
        } else {
            let lo = self.initial + self.increment * (step - 2) + 1;
            (lo, lo + self.increment - 1)
        };
        Ok((lo as u16..=hi as u16).collect())
    }

    /// Every class id known once `step` has been trained.
    pub fn known_through(&self, step: usize) -> Result<Vec<u16>> {
        self.check_step(step)?;
        let hi = self.initial + self.increment * (step - 1);
        Ok((1..=hi as u16).collect())
    }

    /// Number of classes known once `step` has been trained.
    pub fn num_known(&self, step: usize) -> Result<usize> {
        Ok(self.known_through(step)?.len())
    }
}

/// Canvas and object-sampling parameters.
#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Inclusive bounds on the half-extent of an object, in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Per-channel Gaussian pixel noise.
    pub noise_sigma: f32,
    /// Attempts at drawing a scene that keeps every object visible enough.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 32,
            width: 32,
            min_objects: 2,
            max_objects: 4,
            min_size: 6,
            max_size: 12,
            noise_sigma: 0.08,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    /// Reject canvases and object bounds the painters cannot honor.
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "canvas {}x{} is too small",
                self.height, self.width
            )));
        }
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!(
                "canvas {}x{} must have even sides",
                self.height, self.width
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("invalid object count bounds".into()));
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return Err(Error::Config("invalid object size bounds".into()));
        }
        if 2 * self.max_size + 2 >= self.height.min(self.width) {
            return Err(Error::Config(
                "objects of the maximum size cannot fit the canvas".into(),
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// One RGB image and its full annotation (every class labeled, regardless
/// of step).
#[derive(Clone, Debug)]
pub struct Scene {
    /// `3 x h x w`, values in `[0, 1]`, no gradient tracking.
    pub image: Tensor,
    pub labels: LabelMap,
}

/// Which portion of the data a scene belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

const PALETTE: [[f32; 3]; 4] = [
    [0.85, 0.15, 0.15], // red
    [0.15, 0.75, 0.20], // green
    [0.15, 0.25, 0.85], // blue
    [0.85, 0.80, 0.15], // yellow
];

/// Two palette entries per class; every color serves four classes so color
/// alone never identifies a class.
const CLASS_COLORS: [[usize; 2]; MAX_CLASSES] = [
    [0, 1], // disk
    [1, 2], // square
    [2, 3], // triangle
    [3, 0], // ring
    [0, 2], // cross
    [1, 3], // bar
    [2, 0], // diamond
    [3, 1], // corner
];

struct ObjectSpec {
    class: u16,
    cy: isize,
    cx: isize,
    size: isize,
    color: [f32; 3],
    /// Orientation bit for the anisotropic shapes.
    flip: bool,
}

fn covers(spec: &ObjectSpec, y: usize, x: usize) -> bool {
    let dy = y as isize - spec.cy;
    let dx = x as isize - spec.cx;
    let s = spec.size;
    let thick = (s / 3).max(1);
    match spec.class {
        1 => dy * dy + dx * dx <= s * s,
        2 => dy.abs() <= s && dx.abs() <= s,
        3 => {
            // Triangle with the apex on top.
            let r = dy + s; // 0 at the apex row, 2s at the base
            r >= 0 && dy <= s && 2 * dx.abs() <= r
        }
        4 => {
            let d2 = dy * dy + dx * dx;
            let inner = (s * 55 / 100).max(1);
            d2 <= s * s && d2 >= inner * inner
        }
        5 => {
            (dy.abs() <= thick && dx.abs() <= s) || (dx.abs() <= thick && dy.abs() <= s)
        }
        6 => {
            let slim = (s / 4).max(1);
            if spec.flip {
                dy.abs() <= s && dx.abs() <= slim
            } else {
                dy.abs() <= slim && dx.abs() <= s
            }
        }
        7 => dy.abs() + dx.abs() <= s,
        8 => {
            // Two strokes meeting in a corner.
            let vertical = dx >= -s && dx <= -s + thick && dy.abs() <= s;
            let horizontal = dy >= s - thick && dy <= s && dx.abs() <= s;
            if spec.flip {
                // Mirrored corner.
                let v = dx <= s && dx >= s - thick && dy.abs() <= s;
                let h = dy >= s - thick && dy <= s && dx.abs() <= s;
                v || h
            } else {
                vertical || horizontal
            }
        }
        _ => false,
    }
}

/// Draw one candidate scene; `None` when occlusion hid too much of some
/// object.
fn try_scene(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    class_pool: &[u16],
    forced: Option<u16>,
) -> Option<Scene> {
    let (h, w) = (cfg.height, cfg.width);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let class = match (i, forced) {
            (0, Some(c)) => c,
            _ => class_pool[rng.gen_range(0..class_pool.len())],
        };
        let size = rng.gen_range(cfg.min_size..=cfg.max_size) as isize;
        let margin = size as usize + 1;
        let cy = rng.gen_range(margin..h - margin) as isize;
        let cx = rng.gen_range(margin..w - margin) as isize;
        let base = PALETTE[CLASS_COLORS[class as usize - 1][rng.gen_range(0..2)]];
        let jitter: [f32; 3] = [
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        ];
        let color = [
            (base[0] + jitter[0]).clamp(0.05, 0.95),
            (base[1] + jitter[1]).clamp(0.05, 0.95),
            (base[2] + jitter[2]).clamp(0.05, 0.95),
        ];
        specs.push(ObjectSpec {
            class,
            cy,
            cx,
            size,
            color,
            flip: rng.gen_bool(0.5),
        });
    }

    // Owner grid: which object ends up on top of each pixel.
    const NOBODY: u8 = u8::MAX;
    let mut owner = vec![NOBODY; h * w];
    let mut painted = vec![0usize; count];
    for (i, spec) in specs.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if covers(spec, y, x) {
                    owner[y * w + x] = i as u8;
                    painted[i] += 1;
                }
            }
        }
    }
    let mut visible = vec![0usize; count];
    for &o in &owner {
        if o != NOBODY {
            visible[o as usize] += 1;
        }
    }
    for i in 0..count {
        if painted[i] == 0 || visible[i] < 8 || 4 * visible[i] < painted[i] {
            return None;
        }
    }

    // Compose the image: noisy gray ground, then object colors, then
    // per-pixel noise everywhere.
    let gray = rng.gen_range(0.35f32..0.65);
    let noise = Normal::new(0.0f32, cfg.noise_sigma).expect("valid sigma");
    let mut image = vec![0.0f32; 3 * h * w];
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    for y in 0..h {
        for x in 0..w {
            let o = owner[y * w + x];
            let base = if o == NOBODY {
                [gray, gray, gray]
            } else {
                let spec = &specs[o as usize];
                labels.set(y, x, spec.class);
                spec.color
            };
            for ch in 0..3 {
                let v = base[ch] + noise.sample(rng);
                image[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Some(Scene {
        image: Tensor::from_vec(Shape::chw(3, h, w), image).expect("image shape"),
        labels,
    })
}

/// Generate one scene, retrying until the visibility rule is met.
pub fn generate_scene(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    class_pool: &[u16],
    forced: Option<u16>,
) -> Result<Scene> {
    cfg.validate()?;
    if class_pool.is_empty() {
        return Err(Error::Config("empty class pool".into()));
    }
    for &c in class_pool {
        if c == 0 || c as usize > MAX_CLASSES {
            return Err(Error::Config(format!("class id {c} has no shape")));
        }
    }
    if let Some(c) = forced {
        if !class_pool.contains(&c) {
            return Err(Error::Config(format!(
                "forced class {c} is not in the pool"
            )));
        }
    }
    for _ in 0..cfg.max_retries {
        if let Some(scene) = try_scene(rng, cfg, class_pool, forced) {
            return Ok(scene);
        }
    }
    Err(Error::Config(format!(
        "no acceptable scene after {} attempts",
        cfg.max_retries
    )))
}

fn split_stream(seed: u64, step: usize, split: Split) -> ChaCha8Rng {
    let tag = match split {
        Split::Train => 0x5eed_0001u64,
        Split::Val => 0x5eed_0002u64,
    };
    ChaCha8Rng::seed_from_u64(
        seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03),
    )
}

/// Build `count` scenes for one step of a protocol.
///
/// All scenes draw objects from the *full* class inventory — future and
/// past classes appear with their true pixels even when the step's
/// annotation will not name them.  Training scenes always contain at least
/// one object of a class introduced at this step (cycling through them);
/// validation scenes cycle a guaranteed object through every class so each
/// id occurs regularly.
pub fn build_split(
    protocol: &TaskProtocol,
    step: usize,
    split: Split,
    count: usize,
    seed: u64,
    cfg: &SceneConfig,
) -> Result<Vec<Scene>> {
    let pool: Vec<u16> = (1..=protocol.total_classes() as u16).collect();
    let forced_cycle: Vec<u16> = match split {
        Split::Train => protocol.classes_at(step)?,
        Split::Val => pool.clone(),
    };
    let mut rng = split_stream(seed, step, split);
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let forced = forced_cycle[i % forced_cycle.len()];
        scenes.push(generate_scene(&mut rng, cfg, &pool, Some(forced))?);
    }
    Ok(scenes)
}

/// Collapse a scene's full annotation to the view a given step trains on:
/// only that step's new classes stay labeled.
pub fn training_labels(protocol: &TaskProtocol, step: usize, scene: &Scene) -> Result<LabelMap> {
    Ok(scene.labels.remap_keep(&protocol.classes_at(step)?))
}

/// Collapse a scene's full annotation to everything known by `step`, for
/// evaluation: classes from later steps fall back to background.
pub fn eval_labels(protocol: &TaskProtocol, step: usize, scene: &Scene) -> Result<LabelMap> {
    Ok(scene.labels.remap_keep(&protocol.known_through(step)?))
}

// --- dataset files -----------------------------------------------------

const DATASET_MAGIC: &[u8; 8] = b"SHAPSEG1";
const DATASET_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn take_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Dataset("truncated header".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Serialize scenes to a flat binary file (little-endian, versioned).
pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Dataset("refusing to write an empty dataset".into()));
    }
    let (_, h, w) = scenes[0].image.shape().as_chw("write_dataset")?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    put_u32(&mut out, DATASET_VERSION)?;
    put_u32(&mut out, scenes.len() as u32)?;
    put_u32(&mut out, h as u32)?;
    put_u32(&mut out, w as u32)?;
    for scene in scenes {
        let (c, sh, sw) = scene.image.shape().as_chw("write_dataset")?;
        if c != 3 || sh != h || sw != w {
            return Err(Error::Dataset(format!(
                "inconsistent scene shape {} in dataset of {h}x{w}",
                scene.image.shape()
            )));
        }
        if scene.labels.height() != h || scene.labels.width() != w {
            return Err(Error::Dataset("label grid does not match image".into()));
        }
        for v in scene.image.values().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        for &id in scene.labels.data() {
            out.write_all(&id.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Read back a dataset file, validating structure.
pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let mut input = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Dataset("file too short for magic".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Dataset("bad magic; not a dataset file".into()));
    }
    let version = take_u32(&mut input)?;
    if version != DATASET_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset version {version}"
        )));
    }
    let count = take_u32(&mut input)? as usize;
    let h = take_u32(&mut input)? as usize;
    let w = take_u32(&mut input)? as usize;
    if count == 0 || h == 0 || w == 0 || h > 4096 || w > 4096 {
        return Err(Error::Dataset(format!(
            "implausible dataset dimensions: {count} scenes of {h}x{w}"
        )));
    }
    let mut scenes = Vec::with_capacity(count);
    for i in 0..count {
        let mut image = vec![0.0f32; 3 * h * w];
        let mut buf4 = [0u8; 4];
        for v in image.iter_mut() {
            input
                .read_exact(&mut buf4)
                .map_err(|_| Error::Dataset(format!("truncated image in scene {i}")))?;
            *v = f32::from_le_bytes(buf4);
            if !v.is_finite() {
                return Err(Error::Dataset(format!(
                    "non-finite pixel in scene {i}"
                )));
            }
        }
        let mut data = vec![0u16; h * w];
        let mut buf2 = [0u8; 2];
        for d in data.iter_mut() {
            input
                .read_exact(&mut buf2)
                .map_err(|_| Error::Dataset(format!("truncated labels in scene {i}")))?;
            *d = u16::from_le_bytes(buf2);
        }
        scenes.push(Scene {
            image: Tensor::from_vec(Shape::chw(3, h, w), image)?,
            labels: LabelMap::new(h, w, data)?,
        });
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Dataset("trailing bytes after last scene".into()));
    }
    Ok(scenes)
}
