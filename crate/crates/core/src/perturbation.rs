//! The 7-parameter Gaussian patch genome, its feasible set, and the renderer.
//!
//! A genome `(c_x, c_y, r, alpha_ratio, delta_b, delta_g, delta_r)` describes one
//! circular patch. Inside the disk of radius `r` every channel is shifted by its
//! delta weighted by `exp(-d^2 / (2 sigma^2))` with `sigma = alpha_ratio * r`; outside
//! the disk the image is left untouched. `alpha_ratio` (the spread ratio) and the
//! per-pixel mask weight are distinct quantities.

use image::RgbImage;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RoiRegion;

/// Random stream owned by a single search run.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub const GENOME_LEN: usize = 7;

pub const GENOME_COLUMNS: [&str; GENOME_LEN] = [
    "c_x",
    "c_y",
    "r",
    "alpha_ratio",
    "delta_b",
    "delta_g",
    "delta_r",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationGenome {
    pub c_x: f64,
    pub c_y: f64,
    pub radius: f64,
    pub alpha_ratio: f64,
    pub delta_b: f64,
    pub delta_g: f64,
    pub delta_r: f64,
}

impl PerturbationGenome {
    pub fn from_array(v: [f64; GENOME_LEN]) -> Self {
        PerturbationGenome {
            c_x: v[0],
            c_y: v[1],
            radius: v[2],
            alpha_ratio: v[3],
            delta_b: v[4],
            delta_g: v[5],
            delta_r: v[6],
        }
    }

    pub fn to_array(&self) -> [f64; GENOME_LEN] {
        [
            self.c_x,
            self.c_y,
            self.radius,
            self.alpha_ratio,
            self.delta_b,
            self.delta_g,
            self.delta_r,
        ]
    }

    pub fn sigma(&self) -> f64 {
        self.alpha_ratio * self.radius
    }

    /// Largest absolute channel shift.
    pub fn max_abs_delta(&self) -> f64 {
        self.delta_b
            .abs()
            .max(self.delta_g.abs())
            .max(self.delta_r.abs())
    }

    /// Same spatial footprint with every channel shift multiplied by `k`.
    pub fn scaled_deltas(&self, k: f64) -> Self {
        PerturbationGenome {
            delta_b: self.delta_b * k,
            delta_g: self.delta_g * k,
            delta_r: self.delta_r * k,
            ..*self
        }
    }

    /// The replay wire format: seven values with 6 decimals, in column order.
    pub fn csv_fields(&self) -> Vec<String> {
        self.to_array().iter().map(|v| format!("{v:.6}")).collect()
    }

    pub fn parse_fields<S: AsRef<str>>(fields: &[S]) -> Result<Self> {
        if fields.len() != GENOME_LEN {
            return Err(Error::Config(format!(
                "genome needs {GENOME_LEN} fields, got {}",
                fields.len()
            )));
        }
        let mut v = [0.0; GENOME_LEN];
        for (slot, f) in v.iter_mut().zip(fields) {
            let s = f.as_ref().trim();
            *slot = s
                .parse()
                .map_err(|_| Error::Config(format!("bad genome value `{s}`")))?;
        }
        Ok(Self::from_array(v))
    }
}

/// The feasible genome set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeBounds {
    pub r_min: f64,
    pub r_max: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Maximum channel shift magnitude, the `epsilon` normalizer of the budget objective.
    pub delta_abs_max: f64,
    pub roi: RoiRegion,
}

/// Scalar bounds without a region, as supplied by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub delta_abs_max: f64,
    pub roi_margin: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            r_min: 8.0,
            r_max: 80.0,
            alpha_min: 0.15,
            alpha_max: 0.80,
            delta_abs_max: 48.0,
            roi_margin: 5.0,
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.r_min > 0.0
            && self.r_min <= self.r_max
            && self.alpha_min > 0.0
            && self.alpha_min <= self.alpha_max
            && self.delta_abs_max > 0.0
            && self.roi_margin >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent genome bounds {self:?}")))
        }
    }

    pub fn with_roi(&self, roi: RoiRegion) -> GenomeBounds {
        GenomeBounds {
            r_min: self.r_min,
            r_max: self.r_max,
            alpha_min: self.alpha_min,
            alpha_max: self.alpha_max,
            delta_abs_max: self.delta_abs_max,
            roi,
        }
    }
}

impl GenomeBounds {
    /// Box bounds used by the variation operators. The center is boxed by the
    /// ROI bounding rectangle; repair handles the finer ROI constraint.
    pub fn search_box(&self) -> Result<([f64; GENOME_LEN], [f64; GENOME_LEN])> {
        let rect = self.roi.bounding_rect().ok_or(Error::EmptyRoi)?;
        let d = self.delta_abs_max;
        Ok((
            [rect.x_min, rect.y_min, self.r_min, self.alpha_min, -d, -d, -d],
            [rect.x_max, rect.y_max, self.r_max, self.alpha_max, d, d, d],
        ))
    }

    pub fn contains(&self, g: &PerturbationGenome) -> bool {
        let d = self.delta_abs_max;
        (self.r_min..=self.r_max).contains(&g.radius)
            && (self.alpha_min..=self.alpha_max).contains(&g.alpha_ratio)
            && [g.delta_b, g.delta_g, g.delta_r]
                .iter()
                .all(|v| (-d..=d).contains(v))
            && self.roi.contains(g.c_x, g.c_y)
    }
}

/// Per-pixel patch weights. Only a window around the disk is stored; every
/// pixel outside the window has weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    pub genome: PerturbationGenome,
    pub image_size: (u32, u32),
    x0: u32,
    y0: u32,
    win_w: u32,
    win_h: u32,
    weights: Vec<f64>,
}

impl MaskGrid {
    pub fn weight(&self, x: u32, y: u32) -> f64 {
        if x < self.x0 || y < self.y0 || x >= self.x0 + self.win_w || y >= self.y0 + self.win_h {
            return 0.0;
        }
        self.weights[((y - self.y0) * self.win_w + (x - self.x0)) as usize]
    }

    /// `(x, y, weight)` for every pixel with positive weight, row-major.
    pub fn nonzero(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|&(_, &w)| w > 0.0)
            .map(move |(k, &w)| {
                let k = k as u32;
                (self.x0 + k % self.win_w, self.y0 + k / self.win_w, w)
            })
    }
}

/// Integer pixel range `[lo, hi]` covered by `[c - r, c + r]` within `0..n`.
fn pixel_span(c: f64, r: f64, n: u32) -> Option<(u32, u32)> {
    if n == 0 {
        return None;
    }
    let lo = (c - r).ceil().max(0.0);
    let hi = (c + r).floor().min((n - 1) as f64);
    (lo <= hi).then_some((lo as u32, hi as u32))
}

pub fn gaussian_mask(genome: &PerturbationGenome, image_size: (u32, u32)) -> MaskGrid {
    let (w, h) = image_size;
    let r = genome.radius;
    let two_sigma_sq = 2.0 * genome.sigma() * genome.sigma();
    let ((x0, x1), (y0, y1)) = match (pixel_span(genome.c_x, r, w), pixel_span(genome.c_y, r, h)) {
        (Some(xs), Some(ys)) => (xs, ys),
        _ => {
            return MaskGrid {
                genome: *genome,
                image_size,
                x0: 0,
                y0: 0,
                win_w: 0,
                win_h: 0,
                weights: Vec::new(),
            }
        }
    };
    let (win_w, win_h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut weights = Vec::with_capacity((win_w * win_h) as usize);
    for y in y0..=y1 {
        let dy = y as f64 - genome.c_y;
        for x in x0..=x1 {
            let dx = x as f64 - genome.c_x;
            let d2 = dx * dx + dy * dy;
            weights.push(if d2 <= r * r {
                (-d2 / two_sigma_sq).exp()
            } else {
                0.0
            });
        }
    }
    MaskGrid {
        genome: *genome,
        image_size,
        x0,
        y0,
        win_w,
        win_h,
        weights,
    }
}

fn shift_channel(value: u8, weight: f64, delta: f64) -> u8 {
    (value as f64 + weight * delta).round().clamp(0.0, 255.0) as u8
}

/// Renders a precomputed mask onto a copy of `image`.
pub fn apply_mask(image: &RgbImage, mask: &MaskGrid) -> RgbImage {
    let mut out = image.clone();
    let g = &mask.genome;
    // image::Rgb channel order is R, G, B
    let deltas = [g.delta_r, g.delta_g, g.delta_b];
    for (x, y, w) in mask.nonzero() {
        if x >= out.width() || y >= out.height() {
            continue;
        }
        let px = out.get_pixel_mut(x, y);
        for (c, d) in deltas.iter().enumerate() {
            px.0[c] = shift_channel(px.0[c], w, *d);
        }
    }
    out
}

pub fn apply_perturbation(image: &RgbImage, genome: &PerturbationGenome) -> RgbImage {
    apply_mask(image, &gaussian_mask(genome, image.dimensions()))
}

fn lerp(lo: f64, hi: f64, u: f64) -> f64 {
    lo + (hi - lo) * u
}

/// Uniform sample from the feasible set: the center is a uniform point in a
/// uniformly chosen ROI box.
pub fn sample_genome<R: Rng + ?Sized>(rng: &mut R, bounds: &GenomeBounds) -> Result<PerturbationGenome> {
    if bounds.roi.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let b = bounds.roi.boxes[rng.gen_range(0..bounds.roi.boxes.len())];
    let c_x = lerp(b.x_min, b.x_max, rng.gen::<f64>());
    let c_y = lerp(b.y_min, b.y_max, rng.gen::<f64>());
    let radius = lerp(bounds.r_min, bounds.r_max, rng.gen::<f64>());
    let alpha_ratio = lerp(bounds.alpha_min, bounds.alpha_max, rng.gen::<f64>());
    let d = bounds.delta_abs_max;
    let delta_b = lerp(-d, d, rng.gen::<f64>());
    let delta_g = lerp(-d, d, rng.gen::<f64>());
    let delta_r = lerp(-d, d, rng.gen::<f64>());
    Ok(PerturbationGenome {
        c_x,
        c_y,
        radius,
        alpha_ratio,
        delta_b,
        delta_g,
        delta_r,
    })
}

fn clip_or(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

/// Maps an arbitrary 7-vector onto the feasible set: scalars are clipped and
/// the center is projected onto the nearest ROI box.
pub fn repair_genome(raw: [f64; GENOME_LEN], bounds: &GenomeBounds) -> Result<PerturbationGenome> {
    let first = bounds.roi.boxes.first().ok_or(Error::EmptyRoi)?;
    let (mut cx, mut cy) = (raw[0], raw[1]);
    if !cx.is_finite() || !cy.is_finite() {
        (cx, cy) = first.center();
    }
    let (c_x, c_y) = bounds.roi.project(cx, cy).ok_or(Error::EmptyRoi)?;
    let d = bounds.delta_abs_max;
    Ok(PerturbationGenome {
        c_x,
        c_y,
        radius: clip_or(raw[2], bounds.r_min, bounds.r_max),
        alpha_ratio: clip_or(raw[3], bounds.alpha_min, bounds.alpha_max),
        delta_b: clip_or(raw[4], -d, d),
        delta_g: clip_or(raw[5], -d, d),
        delta_r: clip_or(raw[6], -d, d),
    })
}
