//! Deterministic multi-person scene generator.
//!
//! Each person is a vertical stack of `k_parts - 1` rounded slabs, one per
//! part category, each painted in its category colour with a per-person
//! tint and per-pixel noise. People drawn later occlude earlier ones.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::LabelRaster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Number of part categories including background.
    pub k_parts: usize,
    pub n_instances_min: usize,
    pub n_instances_max: usize,
    pub overlap_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { image_size: 128, k_parts: 7, n_instances_min: 1, n_instances_max: 4, overlap_prob: 0.5 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_parts < 2 || self.k_parts > 255 {
            return Err(Error::Config(format!("k_parts must be in 2..=255, got {}", self.k_parts)));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!("image_size must be at least 32, got {}", self.image_size)));
        }
        if self.n_instances_min == 0 || self.n_instances_min > self.n_instances_max {
            return Err(Error::Config(format!(
                "instance range {}..={} is empty",
                self.n_instances_min, self.n_instances_max
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::Config(format!("overlap_prob must be in [0, 1], got {}", self.overlap_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub bbox: BBox,
    /// Full-image raster, nonzero only on this person's visible pixels.
    pub parsing: LabelRaster,
    pub part_ids: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub instances: Vec<GroundTruthInstance>,
    pub global_parsing: LabelRaster,
    pub seed: u64,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    /// Planar CHW pixel values in `[0, 1]`.
    pub fn image_chw(&self) -> Vec<f32> {
        let (w, h) = (self.width(), self.height());
        let mut out = vec![0f32; 3 * w * h];
        for (x, y, px) in self.image.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                out[c * w * h + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

/// Smallest share of a person's drawn area that must stay visible.
const MIN_VISIBLE_FRACTION: f64 = 0.4;
const MIN_VISIBLE_PIXELS: usize = 24;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone)]
struct Slab {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    radius: f64,
}

impl Slab {
    fn contains(&self, x: f64, y: f64) -> bool {
        if x < self.x0 || x >= self.x1 || y < self.y0 || y >= self.y1 {
            return false;
        }
        let cx = x.clamp(self.x0 + self.radius, self.x1 - self.radius);
        let cy = y.clamp(self.y0 + self.radius, self.y1 - self.radius);
        (x - cx).powi(2) + (y - cy).powi(2) <= self.radius * self.radius
    }
}

#[derive(Debug, Clone)]
struct Figure {
    x0: f64,
    y0: f64,
    width: f64,
    height: f64,
    slabs: Vec<Slab>,
    tint: [f64; 3],
}

fn palette(part: usize, k_parts: usize) -> [f64; 3] {
    let hue = ((part - 1) as f64 / (k_parts - 1) as f64) * 360.0 + 15.0;
    hsv_to_rgb(hue % 360.0, 0.75, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn sample_figure(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, placed: &[Figure]) -> Figure {
    let size = cfg.image_size as f64;
    let n_parts = cfg.k_parts - 1;
    let height = rng.gen_range(0.3..0.7) * size;
    let width = (height * rng.gen_range(0.35..0.6)).max(6.0);
    let (x0, y0) = if !placed.is_empty() && rng.gen_bool(cfg.overlap_prob) {
        let other = &placed[rng.gen_range(0..placed.len())];
        let cx = other.x0 + other.width / 2.0 + rng.gen_range(-0.6..0.6) * other.width;
        let cy = other.y0 + other.height / 2.0 + rng.gen_range(-0.4..0.4) * other.height;
        (
            (cx - width / 2.0).clamp(0.0, size - width),
            (cy - height / 2.0).clamp(0.0, size - height),
        )
    } else {
        (rng.gen_range(0.0..size - width), rng.gen_range(0.0..size - height))
    };

    let weights: Vec<f64> = (0..n_parts).map(|_| rng.gen_range(0.7..1.3)).collect();
    let total: f64 = weights.iter().sum();
    let mut slabs = Vec::with_capacity(n_parts);
    let mut top = y0;
    for (i, wgt) in weights.iter().enumerate() {
        let band_h = height * wgt / total;
        let band_w = width * rng.gen_range(0.45..1.0);
        let cx = x0 + width / 2.0 + rng.gen_range(-0.1..0.1) * width;
        let bx0 = (cx - band_w / 2.0).max(x0);
        let bx1 = (cx + band_w / 2.0).min(x0 + width);
        // slabs overlap their successor by one pixel so neighbours touch
        let bottom = if i + 1 == n_parts { y0 + height } else { top + band_h + 1.0 };
        let radius = 0.35 * (bx1 - bx0).min(bottom - top);
        slabs.push(Slab { x0: bx0, y0: top, x1: bx1, y1: bottom, radius });
        top += band_h;
    }
    let tint = [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)];
    Figure { x0, y0, width, height, slabs, tint }
}

/// Owner index and part label per pixel, plus per-figure drawn areas.
fn rasterize(figures: &[Figure], size: usize) -> (Vec<i16>, Vec<u8>, Vec<usize>) {
    let mut owner = vec![-1i16; size * size];
    let mut part = vec![0u8; size * size];
    let mut drawn = vec![0usize; figures.len()];
    for (idx, fig) in figures.iter().enumerate() {
        let ys = fig.y0.floor().max(0.0) as usize;
        let ye = ((fig.y0 + fig.height).ceil() as usize).min(size);
        let xs = fig.x0.floor().max(0.0) as usize;
        let xe = ((fig.x0 + fig.width).ceil() as usize).min(size);
        for y in ys..ye {
            for x in xs..xe {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // later slabs win where neighbours overlap
                if let Some(p) = fig.slabs.iter().rposition(|s| s.contains(px, py)) {
                    owner[y * size + x] = idx as i16;
                    part[y * size + x] = (p + 1) as u8;
                    drawn[idx] += 1;
                }
            }
        }
    }
    (owner, part, drawn)
}

fn visible_counts(owner: &[i16], n: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n];
    for &o in owner {
        if o >= 0 {
            counts[o as usize] += 1;
        }
    }
    counts
}

fn acceptable(drawn: &[usize], visible: &[usize]) -> bool {
    drawn.iter().zip(visible).all(|(&d, &v)| {
        d > 0 && v >= MIN_VISIBLE_PIXELS && v as f64 >= MIN_VISIBLE_FRACTION * d as f64
    })
}

/// Generate one scene; a pure function of `(seed, cfg)`.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<Scene> {
    cfg.validate()?;
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = rng.gen_range(cfg.n_instances_min..=cfg.n_instances_max);

    let (figures, owner, part) = loop {
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut figures: Vec<Figure> = Vec::with_capacity(n);
            for _ in 0..n {
                let f = sample_figure(&mut rng, cfg, &figures);
                figures.push(f);
            }
            let (owner, part, drawn) = rasterize(&figures, size);
            if acceptable(&drawn, &visible_counts(&owner, n)) {
                found = Some((figures, owner, part));
                break;
            }
        }
        match found {
            Some(f) => break f,
            // crowded draw: give up one person rather than loop forever
            None if n > 1 => n -= 1,
            None => return Err(Error::Config(format!("cannot place a person in a {size}x{size} image"))),
        }
    };

    let background = {
        let base = rng.gen_range(0.15..0.55);
        [
            base + rng.gen_range(-0.06..0.06),
            base + rng.gen_range(-0.06..0.06),
            base + rng.gen_range(-0.06..0.06),
        ]
    };
    let gradient = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let noise = Normal::new(0.0, 0.03).expect("valid normal");
    let colors: Vec<[f64; 3]> = (1..cfg.k_parts).map(|p| palette(p, cfg.k_parts)).collect();

    let mut image = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let rgb = if owner[i] >= 0 {
                let fig = &figures[owner[i] as usize];
                let c = colors[part[i] as usize - 1];
                [c[0] + fig.tint[0], c[1] + fig.tint[1], c[2] + fig.tint[2]]
            } else {
                let g = gradient[0] * (x as f64 / size as f64 - 0.5) + gradient[1] * (y as f64 / size as f64 - 0.5);
                [background[0] + g, background[1] + g, background[2] + g]
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = (rgb[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                px[c] = (v * 255.0).round() as u8;
            }
            image.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }

    let instances = (0..figures.len())
        .map(|idx| {
            let data = owner
                .iter()
                .zip(&part)
                .map(|(&o, &p)| if o == idx as i16 { p } else { 0 })
                .collect();
            let parsing = LabelRaster::from_vec(size, size, data);
            let bbox = parsing.foreground_bounds().expect("visible instance");
            let part_ids = parsing.present_labels();
            GroundTruthInstance { bbox, parsing, part_ids }
        })
        .collect();

    Ok(Scene { image, instances, global_parsing: LabelRaster::from_vec(size, size, part), seed })
}
