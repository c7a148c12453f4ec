//! Synthetic two-camera video re-identification data.
//!
//! Every identity is a procedurally drawn figure (head, patterned torso,
//! legs, optional bag) with an alpha mask. A rendered sequence composites
//! the figure over a per-sequence smooth-noise background, moves it by a
//! small random walk, applies the camera's color transform and then the
//! per-frame corruptions: brightness jitter, box blur and occluding patches.
//!
//! All randomness is derived from `(seed, identity, camera, sequence
//! index)`, so any sequence can be regenerated independently of the
//! others.
//!
//! Real datasets can be read from frame directories with
//! [`load_frame_dirs`].

mod frames;

pub use frames::{load_frame, load_frame_dirs, parse_split, FrameDataset, FrameSequence, LoadOptions, Split};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5354_524d, |h, &p| mix64(h ^ mix64(p)))
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

const TAG_TEMPLATE: u64 = 1;
const TAG_CAMERA: u64 = 2;
const TAG_SEQUENCE: u64 = 3;
const TAG_BATCH: u64 = 4;

/// Sequence indices at or above this value are reserved for evaluation, so
/// held-out renders never coincide with training renders.
pub const EVAL_INDEX_BASE: u64 = 1 << 40;

/// Per-frame corruptions.
#[derive(Clone, Debug, PartialEq)]
pub struct Corruption {
    pub occlusion_prob: f64,
    /// Inclusive range of occluder side lengths in pixels (clipped to the
    /// image).
    pub occlusion_size: (usize, usize),
    /// Odd box-filter width; 1 disables blur.
    pub blur_kernel: usize,
    /// Each frame's intensities are scaled by a factor drawn from
    /// `[1 - j, 1 + j]`.
    pub brightness_jitter: f64,
}

impl Corruption {
    pub fn none() -> Self {
        Self {
            occlusion_prob: 0.0,
            occlusion_size: (1, 1),
            blur_kernel: 1,
            brightness_jitter: 0.0,
        }
    }

    pub fn moderate() -> Self {
        Self {
            occlusion_prob: 0.2,
            occlusion_size: (12, 28),
            blur_kernel: 3,
            brightness_jitter: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub num_cameras: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub corruption: Corruption,
    /// Bound on each camera's per-channel gain deviation and offset.
    pub camera_shift: f64,
    /// Largest per-frame step of the figure's random walk, in pixels.
    pub motion: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 8,
            num_cameras: 2,
            frames: 4,
            height: 64,
            width: 32,
            corruption: Corruption::moderate(),
            camera_shift: 0.25,
            motion: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.corruption;
        if self.num_identities == 0 || self.num_cameras == 0 || self.frames == 0 {
            return Err(Error::Config("identities, cameras and frames must be positive".into()));
        }
        if self.height < 8 || self.width < 4 {
            return Err(Error::Config(format!("image {}x{} is too small", self.height, self.width)));
        }
        if !(0.0..=1.0).contains(&c.occlusion_prob) {
            return Err(Error::Config(format!("occlusion probability {} not in [0, 1]", c.occlusion_prob)));
        }
        let (lo, hi) = c.occlusion_size;
        if lo == 0 || lo > hi || lo > self.height.max(self.width) {
            return Err(Error::Config(format!("occlusion size range {lo}..={hi} does not fit the image")));
        }
        if c.blur_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("blur kernel {} must be odd", c.blur_kernel)));
        }
        if !(0.0..1.0).contains(&c.brightness_jitter) || !(0.0..1.0).contains(&self.camera_shift) {
            return Err(Error::Config("brightness jitter and camera shift must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Appearance of one identity: an RGB figure `[3, h, w]` and its coverage
/// `[h, w]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub image: Tensor,
    pub alpha: Vec<f64>,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.15, 0.3, 0.85],
    [0.9, 0.8, 0.15],
    [0.65, 0.2, 0.75],
    [0.1, 0.75, 0.75],
    [0.95, 0.95, 0.95],
    [0.12, 0.12, 0.12],
];

fn pick_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    PALETTE[rng.random_range(0..PALETTE.len())]
}

fn fill(
    image: &mut Tensor,
    alpha: &mut [f64],
    (h, w): (usize, usize),
    rows: std::ops::Range<f64>,
    cols: std::ops::Range<f64>,
    ellipse: bool,
    color: impl Fn(usize, usize) -> [f64; 3],
) {
    let (r0, r1) = ((rows.start * h as f64) as usize, (rows.end * h as f64).ceil() as usize);
    let (c0, c1) = ((cols.start * w as f64) as usize, (cols.end * w as f64).ceil() as usize);
    let (cy, cx) = ((r0 + r1) as f64 / 2.0, (c0 + c1) as f64 / 2.0);
    let (ry, rx) = ((r1 - r0) as f64 / 2.0, (c1 - c0) as f64 / 2.0);
    for y in r0..r1.min(h) {
        for x in c0..c1.min(w) {
            if ellipse {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                if dy * dy + dx * dx > 1.0 {
                    continue;
                }
            }
            let c = color(y - r0, x - c0);
            for (ch, v) in c.iter().enumerate() {
                image.data_mut()[(ch * h + y) * w + x] = *v;
            }
            alpha[y * w + x] = 1.0;
        }
    }
}

/// Deterministic appearance of identity `id`.
pub fn gen_identity(cfg: &SynthConfig, id: usize) -> Result<Template> {
    if id >= cfg.num_identities {
        return Err(Error::InvalidArgument(format!(
            "identity {id} out of range for {} identities",
            cfg.num_identities
        )));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng_for(&[cfg.seed, TAG_TEMPLATE, id as u64]);
    let mut image = Tensor::zeros([3, h, w]);
    let mut alpha = vec![0.0; h * w];
    let hw = (h, w);

    let skin = [0.55 + 0.35 * rng.random::<f64>(), 0.45 + 0.25 * rng.random::<f64>(), 0.35 + 0.2 * rng.random::<f64>()];
    let hair = pick_color(&mut rng);
    let torso = pick_color(&mut rng);
    let stripe = pick_color(&mut rng);
    let legs = pick_color(&mut rng);
    let pattern = rng.random_range(0..4);
    let period = rng.random_range(2..5);
    let half = 0.26 + 0.1 * rng.random::<f64>();
    let torso_end = 0.52 + 0.1 * rng.random::<f64>();

    fill(&mut image, &mut alpha, hw, 0.04..0.2, 0.32..0.68, true, |_, _| skin);
    fill(&mut image, &mut alpha, hw, 0.03..0.09, 0.3..0.7, false, |_, _| hair);
    fill(&mut image, &mut alpha, hw, 0.2..torso_end, (0.5 - half)..(0.5 + half), false, |y, x| {
        let on = match pattern {
            0 => false,
            1 => (y / period) % 2 == 1,
            2 => (x / period) % 2 == 1,
            _ => (y / period + x / period) % 2 == 1,
        };
        if on {
            stripe
        } else {
            torso
        }
    });
    fill(&mut image, &mut alpha, hw, torso_end..0.96, 0.3..0.48, false, |_, _| legs);
    fill(&mut image, &mut alpha, hw, torso_end..0.96, 0.52..0.7, false, |_, _| legs);
    if rng.random_bool(0.5) {
        let bag = pick_color(&mut rng);
        let top = 0.3 + 0.25 * rng.random::<f64>();
        let cols = if rng.random_bool(0.5) { 0.04..0.26 } else { 0.74..0.96 };
        fill(&mut image, &mut alpha, hw, top..top + 0.2, cols, false, |_, _| bag);
    }
    Ok(Template { image, alpha })
}

/// One rendered sequence with the per-frame occlusion masks (`true` where
/// an occluder covers the pixel), each of length `h·w`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSequence {
    /// `[T, 3, h, w]`
    pub frames: Tensor,
    pub occlusion: Vec<Vec<bool>>,
}

fn camera_transform(cfg: &SynthConfig, camera: usize) -> [(f64, f64); 3] {
    let mut rng = rng_for(&[cfg.seed, TAG_CAMERA, camera as u64]);
    let s = cfg.camera_shift;
    std::array::from_fn(|_| (1.0 + rng.random_range(-s..=s), rng.random_range(-s..=s)))
}

fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    // random 5×3 color lattice, bilinearly upsampled, plus fine grain
    let (gy, gx) = (5, 3);
    let lattice: Vec<f64> = (0..3 * gy * gx).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            let fy = y as f64 / (h - 1) as f64 * (gy - 1) as f64;
            let (y0, ty) = ((fy as usize).min(gy - 2), fy - (fy as usize).min(gy - 2) as f64);
            for x in 0..w {
                let fx = x as f64 / (w - 1) as f64 * (gx - 1) as f64;
                let (x0, tx) = ((fx as usize).min(gx - 2), fx - (fx as usize).min(gx - 2) as f64);
                let at = |yy: usize, xx: usize| lattice[(c * gy + yy) * gx + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[(c * h + y) * w + x] = top * (1.0 - ty) + bottom * ty + 0.08 * (rng.random::<f64>() - 0.5);
            }
        }
    }
    out
}

fn box_blur(plane: &mut [f64], h: usize, w: usize, k: usize) {
    let r = (k / 2) as isize;
    let src = plane.to_vec();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sum, mut n) = (0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if (0..h as isize).contains(&yy) && (0..w as isize).contains(&xx) {
                        sum += src[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
            }
            plane[y as usize * w + x as usize] = sum / n;
        }
    }
}

/// Renders sequence `index` of `identity` seen by `camera`, with `frames`
/// frames and the given corruption.
pub fn render_sequence(
    cfg: &SynthConfig,
    identity: usize,
    camera: usize,
    frames: usize,
    corruption: &Corruption,
    index: u64,
) -> Result<RenderedSequence> {
    if camera >= cfg.num_cameras {
        return Err(Error::InvalidArgument(format!("camera {camera} out of range")));
    }
    if frames == 0 {
        return Err(Error::InvalidArgument("a sequence needs at least one frame".into()));
    }
    let template = gen_identity(cfg, identity)?;
    let (h, w) = (cfg.height, cfg.width);
    let cam = camera_transform(cfg, camera);
    let mut rng = rng_for(&[cfg.seed, TAG_SEQUENCE, identity as u64, camera as u64, index]);
    let background = smooth_noise(&mut rng, h, w);
    let m = cfg.motion as i64;
    let (mut oy, mut ox) = (0i64, 0i64);
    let mut data = Vec::with_capacity(frames * 3 * h * w);
    let mut occlusion = Vec::with_capacity(frames);
    for _ in 0..frames {
        if m > 0 {
            oy = (oy + rng.random_range(-m..=m)).clamp(-2 * m, 2 * m);
            ox = (ox + rng.random_range(-m..=m)).clamp(-2 * m, 2 * m);
        }
        let mut frame = background.clone();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sy, sx) = (y - oy, x - ox);
                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                    continue;
                }
                let a = template.alpha[sy as usize * w + sx as usize];
                if a == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    let dst = (c * h + y as usize) * w + x as usize;
                    let src = template.image.data()[(c * h + sy as usize) * w + sx as usize];
                    frame[dst] = (1.0 - a) * frame[dst] + a * src;
                }
            }
        }
        let j = corruption.brightness_jitter;
        let gain = if j > 0.0 { 1.0 + rng.random_range(-j..=j) } else { 1.0 };
        for (c, &(g, o)) in cam.iter().enumerate() {
            for v in &mut frame[c * h * w..(c + 1) * h * w] {
                *v = (*v * g + o) * gain;
            }
        }
        if corruption.blur_kernel > 1 {
            for plane in frame.chunks_mut(h * w) {
                box_blur(plane, h, w, corruption.blur_kernel);
            }
        }
        let mut mask = vec![false; h * w];
        if corruption.occlusion_prob > 0.0 && rng.random_bool(corruption.occlusion_prob) {
            let (lo, hi) = corruption.occlusion_size;
            let ph = rng.random_range(lo..=hi).min(h);
            let pw = rng.random_range(lo..=hi).min(w);
            let y0 = rng.random_range(0..=h - ph);
            let x0 = rng.random_range(0..=w - pw);
            let color: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    mask[y * w + x] = true;
                    for (c, v) in color.iter().enumerate() {
                        frame[(c * h + y) * w + x] = *v;
                    }
                }
            }
        }
        data.extend(frame.iter().map(|v| v.clamp(0.0, 1.0)));
        occlusion.push(mask);
    }
    Ok(RenderedSequence {
        frames: Tensor::new([frames, 3, h, w], data)?,
        occlusion,
    })
}

/// A PK batch: `N` identities, `K` sequences each, identity-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch {
    /// `[N·K, T, 3, h, w]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
}

/// Draws `n` distinct identities and `k` training sequences of each (random
/// camera, fresh render), reproducibly from `epoch_seed`.
pub fn sample_batch(cfg: &SynthConfig, n: usize, k: usize, epoch_seed: u64) -> Result<VideoBatch> {
    cfg.validate()?;
    if n > cfg.num_identities || n == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} identities x {k} sequences from {} identities",
            cfg.num_identities
        )));
    }
    let mut rng = rng_for(&[cfg.seed, TAG_BATCH, epoch_seed]);
    let ids = sample(&mut rng, cfg.num_identities, n).into_vec();
    let mut data = Vec::new();
    let (mut labels, mut cameras) = (Vec::new(), Vec::new());
    for &id in &ids {
        for _ in 0..k {
            let camera = rng.random_range(0..cfg.num_cameras);
            let index = rng.random_range(0..EVAL_INDEX_BASE);
            let seq = render_sequence(cfg, id, camera, cfg.frames, &cfg.corruption, index)?;
            data.extend_from_slice(seq.frames.data());
            labels.push(id);
            cameras.push(camera);
        }
    }
    let images = Tensor::new([n * k, cfg.frames, 3, cfg.height, cfg.width], data)?;
    Ok(VideoBatch { images, labels, cameras })
}

/// Held-out sequences: for every identity, one render per camera. Camera
/// 0 renders form the probe set, the remaining cameras the gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequences {
    /// `[S, T, 3, h, w]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub cameras: Vec<usize>,
}

/// Evaluation split number `trial`, disjoint from every training render.
pub fn eval_sequences(cfg: &SynthConfig, trial: u64) -> Result<LabeledSequences> {
    cfg.validate()?;
    let mut data = Vec::new();
    let (mut labels, mut cameras) = (Vec::new(), Vec::new());
    for camera in 0..cfg.num_cameras {
        for id in 0..cfg.num_identities {
            let seq = render_sequence(cfg, id, camera, cfg.frames, &cfg.corruption, EVAL_INDEX_BASE + trial)?;
            data.extend_from_slice(seq.frames.data());
            labels.push(id);
            cameras.push(camera);
        }
    }
    let s = labels.len();
    Ok(LabeledSequences {
        images: Tensor::new([s, cfg.frames, 3, cfg.height, cfg.width], data)?,
        labels,
        cameras,
    })
}
