//! Synthetic keypoint data and augmentation.
//!
//! Samples are articulated stick figures: K joints placed by a random
//! chain walk, each drawn as a disc with a distinct palette color over
//! a smooth textured background, with limbs connecting consecutive
//! joints. Same seed, same sample.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::checkpoint::{read_record, write_record};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Ground-truth joint in input-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointGt {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// (1, 3, h, w) image with values in [0, 1].
    pub image: Tensor<f32>,
    pub keypoints: Vec<KeypointGt>,
    pub rng_seed: u64,
}

fn palette(k: usize, count: usize) -> (f32, f32, f32) {
    // evenly spaced hues, full saturation and value
    let h = 360.0 * k as f64 / count.max(1) as f64;
    let c = 1.0;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as usize % 6 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r as f32, g as f32, b as f32)
}

fn paint_disc(img: &mut Tensor<f32>, cx: f64, cy: f64, radius: f64, color: (f32, f32, f32)) {
    let s = img.shape();
    let y_lo = ((cy - radius).floor().max(0.0)) as usize;
    let y_hi = ((cy + radius).ceil() as usize).min(s.h - 1);
    let x_lo = ((cx - radius).floor().max(0.0)) as usize;
    let x_hi = ((cx + radius).ceil() as usize).min(s.w - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= radius * radius {
                img.set(0, 0, y, x, color.0);
                img.set(0, 1, y, x, color.1);
                img.set(0, 2, y, x, color.2);
            }
        }
    }
}

fn paint_segment(img: &mut Tensor<f32>, a: (f64, f64), b: (f64, f64), value: f32) {
    let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
    let steps = (len * 2.0).ceil() as usize + 1;
    let s = img.shape();
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        let (xi, yi) = (x.round() as isize, y.round() as isize);
        if xi >= 0 && yi >= 0 && (xi as usize) < s.w && (yi as usize) < s.h {
            for c in 0..3 {
                img.set(0, c, yi as usize, xi as usize, value);
            }
        }
    }
}

/// Deterministic articulated figure on a textured background.
pub fn generate_sample(k: usize, h: usize, w: usize, seed: u64) -> SyntheticSample {
    let mut rng = Rng::new(seed);
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));

    // smooth per-channel sinusoid texture
    let mut waves = Vec::new();
    for _ in 0..3 {
        waves.push((
            rng.uniform(0.05, 0.25),
            rng.uniform(0.05, 0.25),
            rng.uniform(0.0, std::f64::consts::TAU),
        ));
    }
    for (c, &(fy, fx, phase)) in waves.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = 0.3 + 0.1 * (fy * y as f64 + fx * x as f64 + phase).sin();
                image.set(0, c, y, x, v as f32);
            }
        }
    }

    // chain walk inside a safety margin; discs must stay resolvable
    // after the network's 4x stem downsampling
    let radius = (h as f64 / 12.0).max(2.5);
    let margin = radius + 1.0;
    let clamp = |v: f64, hi: usize| v.clamp(margin, hi as f64 - 1.0 - margin);
    let min_sep = 2.0 * radius + 2.0;
    let mut joints: Vec<(f64, f64)> = Vec::with_capacity(k);
    let mut x = rng.uniform(w as f64 * 0.3, w as f64 * 0.7);
    let mut y = rng.uniform(h as f64 * 0.3, h as f64 * 0.7);
    for _ in 0..k {
        // separated joints keep the heatmap channels unambiguous
        let mut px = clamp(x, w);
        let mut py = clamp(y, h);
        for _ in 0..64 {
            let sep_ok = joints
                .iter()
                .all(|&(jx, jy)| (jx - px).powi(2) + (jy - py).powi(2) >= min_sep * min_sep);
            if sep_ok {
                break;
            }
            let ang = rng.uniform(0.0, std::f64::consts::TAU);
            let step = rng.uniform(h as f64 / 5.0, h as f64 / 3.0);
            px = clamp(px + step * ang.cos(), w);
            py = clamp(py + step * ang.sin(), h);
        }
        joints.push((px, py));
        let ang = rng.uniform(0.0, std::f64::consts::TAU);
        let step = rng.uniform(h as f64 / 5.0, h as f64 / 3.0);
        x = px + step * ang.cos();
        y = py + step * ang.sin();
    }

    for pair in joints.windows(2) {
        paint_segment(&mut image, pair[0], pair[1], 0.15);
    }
    for (j, &(jx, jy)) in joints.iter().enumerate() {
        paint_disc(&mut image, jx, jy, radius, palette(j, k));
    }

    SyntheticSample {
        image,
        keypoints: joints
            .iter()
            .map(|&(jx, jy)| KeypointGt {
                x: jx,
                y: jy,
                visible: true,
            })
            .collect(),
        rng_seed: seed,
    }
}

pub fn generate_dataset(
    count: usize,
    k: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Vec<SyntheticSample> {
    let mut master = Rng::new(seed);
    (0..count)
        .map(|i| generate_sample(k, h, w, master.fork(i as u64).next_u64()))
        .collect()
}

// ── Augmentation ────────────────────────────────────────────────────

/// Horizontal mirror; paired keypoint indices swap roles.
pub fn apply_flip(sample: &SyntheticSample, flip_pairs: &[(usize, usize)]) -> SyntheticSample {
    let w = sample.image.shape().w as f64;
    let mut keypoints: Vec<KeypointGt> = sample
        .keypoints
        .iter()
        .map(|kp| KeypointGt {
            x: (w - 1.0) - kp.x,
            ..*kp
        })
        .collect();
    for &(a, b) in flip_pairs {
        keypoints.swap(a, b);
    }
    SyntheticSample {
        image: sample.image.hflip(),
        keypoints,
        rng_seed: sample.rng_seed,
    }
}

/// Rotation (degrees) and isotropic scale about the image center;
/// bilinear resampling, zero fill outside. Keypoints mapped by the same
/// affine transform; out-of-bounds keypoints become invisible.
pub fn apply_affine(sample: &SyntheticSample, angle_deg: f64, scale: f64) -> SyntheticSample {
    let s = sample.image.shape();
    let (h, w) = (s.h, s.w);
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;

    let mut image = Tensor::zeros(s);
    // inverse map: rotate by -theta, scale by 1/scale
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let v = sample.image.at(0, c, y0, x0) as f64 * (1.0 - fy) * (1.0 - fx)
                    + sample.image.at(0, c, y0, x1) as f64 * (1.0 - fy) * fx
                    + sample.image.at(0, c, y1, x0) as f64 * fy * (1.0 - fx)
                    + sample.image.at(0, c, y1, x1) as f64 * fy * fx;
                image.set(0, c, y, x, v as f32);
            }
        }
    }

    let keypoints = sample
        .keypoints
        .iter()
        .map(|kp| {
            let dx = kp.x - cx;
            let dy = kp.y - cy;
            let nx = scale * (cos * dx - sin * dy) + cx;
            let ny = scale * (sin * dx + cos * dy) + cy;
            let inside = nx >= 0.0 && ny >= 0.0 && nx <= (w - 1) as f64 && ny <= (h - 1) as f64;
            KeypointGt {
                x: nx,
                y: ny,
                visible: kp.visible && inside,
            }
        })
        .collect();

    SyntheticSample {
        image,
        keypoints,
        rng_seed: sample.rng_seed,
    }
}

/// Zero out square regions of the image; keypoint coordinates are
/// not modified (holes may cover joints).
pub fn apply_cutout(
    sample: &SyntheticSample,
    n_holes: usize,
    hole_size: usize,
    rng: &mut Rng,
) -> SyntheticSample {
    let s = sample.image.shape();
    let mut image = sample.image.clone();
    for _ in 0..n_holes {
        let cy = rng.next_usize(s.h);
        let cx = rng.next_usize(s.w);
        let half = hole_size / 2;
        let y_lo = cy.saturating_sub(half);
        let x_lo = cx.saturating_sub(half);
        let y_hi = (cy + half).min(s.h - 1);
        let x_hi = (cx + half).min(s.w - 1);
        for c in 0..3 {
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    image.set(0, c, y, x, 0.0);
                }
            }
        }
    }
    SyntheticSample {
        image,
        keypoints: sample.keypoints.clone(),
        rng_seed: sample.rng_seed,
    }
}

/// Augmentation policy knobs (a slice of the full training config).
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale_jitter: f64,
    pub rotation_max: f64,
    pub cutout: bool,
    pub cutout_holes: usize,
    pub cutout_size: usize,
    pub flip_pairs: Vec<(usize, usize)>,
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip: false,
            scale_jitter: 0.0,
            rotation_max: 0.0,
            cutout: false,
            cutout_holes: 0,
            cutout_size: 0,
            flip_pairs: Vec::new(),
        }
    }
}

/// Flip, then rotate/scale, then cutout; everything disabled is the
/// identity.
pub fn augment(sample: &SyntheticSample, cfg: &AugmentConfig, rng: &mut Rng) -> SyntheticSample {
    let mut out = sample.clone();
    if cfg.flip && rng.next_bool() {
        out = apply_flip(&out, &cfg.flip_pairs);
    }
    if cfg.rotation_max != 0.0 || cfg.scale_jitter != 0.0 {
        let angle = rng.uniform(-cfg.rotation_max, cfg.rotation_max);
        let scale = 1.0 + rng.uniform(-cfg.scale_jitter, cfg.scale_jitter);
        out = apply_affine(&out, angle, scale);
    }
    if cfg.cutout && cfg.cutout_holes > 0 {
        out = apply_cutout(&out, cfg.cutout_holes, cfg.cutout_size, rng);
    }
    out
}

// ── Disk cache (checkpoint container format) ────────────────────────

pub fn save_dataset(samples: &[SyntheticSample], path: impl AsRef<Path>) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    use std::io::Write;
    out.write_all(b"RGPR")?;
    out.write_all(&2u32.to_le_bytes())?;
    let meta = format!("kind=dataset\ncount={}\n", samples.len());
    out.write_all(&(meta.len() as u32).to_le_bytes())?;
    out.write_all(meta.as_bytes())?;
    for (i, s) in samples.iter().enumerate() {
        write_record(&mut out, &format!("sample{i}.image"), &s.image)?;
        let k = s.keypoints.len();
        let mut kp = Tensor::<f32>::zeros(Shape::new(1, 1, k, 3));
        for (j, p) in s.keypoints.iter().enumerate() {
            kp.set(0, 0, j, 0, p.x as f32);
            kp.set(0, 0, j, 1, p.y as f32);
            kp.set(0, 0, j, 2, if p.visible { 1.0 } else { 0.0 });
        }
        write_record(&mut out, &format!("sample{i}.keypoints"), &kp)?;
        // seed halves stored bit-for-bit through the f32 container
        let seed = Tensor::<f32>::new(
            Shape::new(1, 1, 1, 2),
            vec![
                f32::from_bits((s.rng_seed >> 32) as u32),
                f32::from_bits(s.rng_seed as u32),
            ],
        )?;
        write_record(&mut out, &format!("sample{i}.seed"), &seed)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SyntheticSample>> {
    let bytes = std::fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"RGPR" {
        return Err(Error::Checkpoint("bad dataset magic".to_string()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut meta = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta).map_err(|_| Error::Checkpoint("bad meta".into()))?;
    let count: usize = meta
        .lines()
        .find_map(|l| l.strip_prefix("count="))
        .ok_or_else(|| Error::Checkpoint("dataset meta missing count".into()))?
        .parse()
        .map_err(|_| Error::Checkpoint("bad count".into()))?;
    let mut records = HashMap::new();
    while !r.is_empty() {
        let (name, t) = read_record(&mut r)?;
        records.insert(name, t);
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let image = records
            .remove(&format!("sample{i}.image"))
            .ok_or_else(|| Error::Checkpoint(format!("dataset missing sample{i}.image")))?;
        let kp = records
            .remove(&format!("sample{i}.keypoints"))
            .ok_or_else(|| Error::Checkpoint(format!("dataset missing sample{i}.keypoints")))?;
        let seed_t = records
            .remove(&format!("sample{i}.seed"))
            .ok_or_else(|| Error::Checkpoint(format!("dataset missing sample{i}.seed")))?;
        let k = kp.shape().h;
        let keypoints = (0..k)
            .map(|j| KeypointGt {
                x: kp.at(0, 0, j, 0) as f64,
                y: kp.at(0, 0, j, 1) as f64,
                visible: kp.at(0, 0, j, 2) > 0.5,
            })
            .collect();
        let rng_seed = ((seed_t.at(0, 0, 0, 0).to_bits() as u64) << 32)
            | seed_t.at(0, 0, 0, 1).to_bits() as u64;
        samples.push(SyntheticSample {
            image,
            keypoints,
            rng_seed,
        });
    }
    Ok(samples)
}
