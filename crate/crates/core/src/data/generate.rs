use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Which part of the radius range tumors favour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeSkew {
    /// 70% of radii from the upper half of the range.
    LargeSkew,
    /// 70% of radii from the lower half of the range.
    SmallSkew,
    Uniform,
}

/// Tumor radius distribution as fractions of the image width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusDist {
    pub min_frac: f32,
    pub max_frac: f32,
    pub mode: SizeSkew,
}

const SKEW_SHARE: f64 = 0.7;

impl RadiusDist {
    pub fn sample(&self, rng: &mut Rng) -> f32 {
        let (lo, hi) = (self.min_frac as f64, self.max_frac as f64);
        let mid = 0.5 * (lo + hi);
        let upper = match self.mode {
            SizeSkew::Uniform => return rng.random_range(lo..hi) as f32,
            SizeSkew::LargeSkew => rng.random_bool(SKEW_SHARE),
            SizeSkew::SmallSkew => !rng.random_bool(SKEW_SHARE),
        };
        let r = if upper {
            rng.random_range(mid..hi)
        } else {
            rng.random_range(lo..mid)
        };
        r as f32
    }

    pub fn in_upper_half(&self, r: f32) -> bool {
        r >= 0.5 * (self.min_frac + self.max_frac)
    }
}

/// Generation parameters of one client site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub client_id: u8,
    /// Training slices; a validation set of `n_train / 4` (20% of the
    /// client's data) is generated on top.
    pub n_train: usize,
    pub tumor_radius: RadiusDist,
    /// Std of the additive Gaussian scanner noise.
    pub noise_sigma: f32,
    /// Tumor intensity offset over surrounding tissue.
    pub contrast_delta: f32,
}

impl ClientSpec {
    pub fn validate(&self) -> Result<()> {
        let r = &self.tumor_radius;
        if !(0.0 < r.min_frac && r.min_frac < r.max_frac && r.max_frac < 0.5) {
            return Err(Error::Config(format!(
                "client {}: radius range [{}, {}] must satisfy 0 < min < max < 0.5",
                self.client_id, r.min_frac, r.max_frac
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "client {}: noise_sigma must be >= 0",
                self.client_id
            )));
        }
        Ok(())
    }

    /// `(train, val)` counts, an 80/20 split with validation rounded down.
    pub fn split_counts(&self) -> (usize, usize) {
        (self.n_train, self.n_train / 4)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceMeta {
    pub client_id: u8,
    pub sample_index: u32,
    pub seed_used: u64,
    pub n_tumors: u8,
    /// Major radii as width fractions. Generation-time only, not persisted.
    pub radii: Vec<f32>,
}

/// One slice: intensities in `[0, 1]` and a binary tumor mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub meta: SliceMeta,
}

impl SliceSample {
    pub fn tumor_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    /// Low-frequency tissue texture; off gives flat intensities for checks.
    pub texture: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { texture: true }
    }
}

const BASE_INTENSITY: f32 = 0.35;
const TEXTURE_AMPLITUDE: f32 = 0.05;
const MAX_ATTEMPTS: usize = 100;

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn pixels(&self, h: usize, w: usize) -> impl Iterator<Item = usize> + '_ {
        (0..h * w).filter(move |i| self.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
    }
}

/// Bilinearly upsampled coarse noise in `[-1, 1]`.
fn smooth_texture(rng: &mut Rng, h: usize, w: usize) -> Vec<f32> {
    let gh = (h / 8).max(2) + 1;
    let gw = (w / 8).max(2) + 1;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let fy = y as f32 / (h - 1) as f32 * (gh - 1) as f32;
        let y0 = (fy.floor() as usize).min(gh - 2);
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = x as f32 / (w - 1) as f32 * (gw - 1) as f32;
            let x0 = (fx.floor() as usize).min(gw - 2);
            let tx = fx - x0 as f32;
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Draws one slice from `rng`:
/// body ellipse with textured tissue, 1–3 tumor ellipses inside it,
/// additive Gaussian noise, clamp to `[0, 1]`.
pub fn generate_slice(
    rng: &mut Rng,
    spec: &ClientSpec,
    size: (usize, usize),
    opts: GenOptions,
) -> Result<SliceSample> {
    let (h, w) = size;
    if h < 16 || w < 16 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!(
            "slice size {h}x{w} must be >= 16 and divisible by 4"
        )));
    }
    spec.validate()?;
    let (hf, wf) = (h as f64, w as f64);
    let body = Ellipse {
        cx: wf / 2.0 + rng.random_range(-0.05..0.05) * wf,
        cy: hf / 2.0 + rng.random_range(-0.05..0.05) * hf,
        a: rng.random_range(0.35..0.45) * wf,
        b: rng.random_range(0.35..0.45) * hf,
        cos: 1.0,
        sin: 0.0,
    };
    let texture = if opts.texture {
        smooth_texture(rng, h, w)
    } else {
        vec![0.0; h * w]
    };
    let mut image = vec![0.0f32; h * w];
    for i in body.pixels(h, w) {
        image[i] = BASE_INTENSITY + TEXTURE_AMPLITUDE * texture[i];
    }

    let n_tumors = rng.random_range(1..=3u8);
    let mut mask = vec![0u8; h * w];
    let mut radii = Vec::with_capacity(n_tumors as usize);
    let mut layout_attempts = 0;
    'layout: loop {
        layout_attempts += 1;
        if layout_attempts > MAX_ATTEMPTS {
            return Err(Error::Generation(
                "could not place tumors covering less than half the slice".into(),
            ));
        }
        mask.fill(0);
        radii.clear();
        for _ in 0..n_tumors {
            let mut placed = false;
            for _ in 0..MAX_ATTEMPTS {
                let r_frac = spec.tumor_radius.sample(rng);
                let a = r_frac as f64 * wf;
                let b = a * rng.random_range(0.6..1.0);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let cx = rng.random_range(body.cx - body.a..body.cx + body.a);
                let cy = rng.random_range(body.cy - body.b..body.cy + body.b);
                let inner = Ellipse {
                    a: body.a * 0.8,
                    b: body.b * 0.8,
                    ..body
                };
                if !inner.contains(cx, cy) {
                    continue;
                }
                let tumor = Ellipse {
                    cx,
                    cy,
                    a,
                    b,
                    cos: theta.cos(),
                    sin: theta.sin(),
                };
                let pix: Vec<usize> = tumor.pixels(h, w).collect();
                if pix.is_empty() {
                    continue;
                }
                pix.into_iter().for_each(|i| mask[i] = 1);
                radii.push(r_frac);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "tumor center sampling failed {MAX_ATTEMPTS} times"
                )));
            }
        }
        let covered = mask.iter().filter(|&&m| m != 0).count();
        if covered * 2 < h * w {
            break 'layout;
        }
    }

    for (i, px) in image.iter_mut().enumerate() {
        if mask[i] != 0 {
            *px = BASE_INTENSITY + TEXTURE_AMPLITUDE * texture[i] + spec.contrast_delta;
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0f32, spec.noise_sigma)
            .map_err(|e| Error::Config(format!("noise: {e}")))?;
        for px in image.iter_mut() {
            *px += noise.sample(rng);
        }
    }
    image.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));

    Ok(SliceSample {
        height: h,
        width: w,
        image,
        mask,
        meta: SliceMeta {
            client_id: spec.client_id,
            sample_index: 0,
            seed_used: 0,
            n_tumors,
            radii,
        },
    })
}

/// Generates the slice whose private stream is seeded with `seed`, and
/// stamps the provenance metadata.
pub fn generate_sample(
    seed: u64,
    spec: &ClientSpec,
    size: (usize, usize),
    sample_index: u32,
    opts: GenOptions,
) -> Result<SliceSample> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut s = generate_slice(&mut rng, spec, size, opts)?;
    s.meta.sample_index = sample_index;
    s.meta.seed_used = seed;
    Ok(s)
}
