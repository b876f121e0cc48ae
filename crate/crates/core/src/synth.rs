//! Synthetic scene generation with exact ground truth.
//!
//! Ground surfaces are multi-octave value noise; clouds are soft-edged blobs
//! whose alpha tapers to zero at the rim (so thresholding near the edge sees
//! the same semi-transparent regime real thin clouds produce) and saturates
//! to one in the core. A pixel is labeled cloud exactly when its alpha
//! exceeds `alpha_threshold`. Everything is a pure function of the
//! parameters, so regeneration is bit-identical.

use fcd_tensor::rng::Rng;

use crate::data::{DataError, Scene, SynthSpec};

/// Multi-octave value noise in [0, 1].
fn value_noise(rng: &mut Rng, h: usize, w: usize, base_cells: usize, octaves: usize) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    let mut amplitude = 1.0f32;
    let mut cells = base_cells.max(2);
    for _ in 0..octaves {
        let gh = cells + 1;
        let gw = cells + 1;
        let grid: Vec<f32> = (0..gh * gw).map(|_| rng.uniform_f32()).collect();
        for y in 0..h {
            let fy = y as f32 / h as f32 * cells as f32;
            let gy = (fy as usize).min(cells - 1);
            let ty = smooth(fy - gy as f32);
            for x in 0..w {
                let fx = x as f32 / w as f32 * cells as f32;
                let gx = (fx as usize).min(cells - 1);
                let tx = smooth(fx - gx as f32);
                let v00 = grid[gy * gw + gx];
                let v01 = grid[gy * gw + gx + 1];
                let v10 = grid[(gy + 1) * gw + gx];
                let v11 = grid[(gy + 1) * gw + gx + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                field[y * w + x] += amplitude * (top + (bot - top) * ty);
            }
        }
        amplitude *= 0.5;
        cells *= 2;
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &field {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-6);
    field.iter_mut().for_each(|v| *v = (*v - lo) / span);
    field
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

struct Blob {
    cy: f32,
    cx: f32,
    r: f32,
}

struct Streak {
    y0: f32,
    x0: f32,
    y1: f32,
    x1: f32,
    r: f32,
}

impl Streak {
    fn dist2(&self, y: f32, x: f32) -> f32 {
        let (vy, vx) = (self.y1 - self.y0, self.x1 - self.x0);
        let (wy, wx) = (y - self.y0, x - self.x0);
        let len2 = vy * vy + vx * vx;
        let t = if len2 > 0.0 { ((wy * vy + wx * vx) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (py, px) = (self.y0 + t * vy, self.x0 + t * vx);
        (y - py) * (y - py) + (x - px) * (x - px)
    }
}

/// Cloud alpha field in [0, 1] built from two primitives: compact blobs
/// (cumulus-like cores) and thin elongated streaks a few pixels wide
/// (cirrus-like wisps, mostly semi-transparent). Profiles are quadratic
/// falloffs boosted so blob cores saturate at exactly 1; overlaps combine by
/// screen blending, and a noise field roughens the blob rims.
fn cloud_alpha(rng: &mut Rng, h: usize, w: usize, density: f32) -> Vec<f32> {
    let mut alpha = vec![0.0f32; h * w];
    if density <= 0.0 {
        return alpha;
    }
    let min_dim = h.min(w) as f32;
    let r_lo = 0.05 * min_dim;
    let r_hi = 0.15 * min_dim;
    let mean_area = std::f32::consts::PI * ((r_lo + r_hi) / 2.0).powi(2);
    // Per-scene coverage jitter in [0.25, 1.75] of the nominal density, so a
    // corpus contains everything from fully clear to heavily clouded scenes.
    let scene_factor = 0.25 + 1.5 * rng.uniform_f32();
    let expected = density * scene_factor * (h * w) as f32 / mean_area;
    let n_blobs = expected.round() as usize;
    let edge_noise = value_noise(rng, h, w, 8, 3);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cy: rng.uniform_f32() * h as f32,
            cx: rng.uniform_f32() * w as f32,
            r: r_lo + (r_hi - r_lo) * rng.uniform_f32(),
        })
        .collect();
    // a comparable number of wisps, thin enough to vanish below the
    // resolution of coarse localization maps
    let streaks: Vec<Streak> = (0..n_blobs.div_ceil(2) * 3)
        .map(|_| {
            let y0 = rng.uniform_f32() * h as f32;
            let x0 = rng.uniform_f32() * w as f32;
            let angle = rng.uniform_f32() * std::f32::consts::PI;
            let len = (0.12 + 0.18 * rng.uniform_f32()) * min_dim;
            Streak {
                y0,
                x0,
                y1: y0 + len * angle.sin(),
                x1: x0 + len * angle.cos(),
                r: 1.5 + 3.0 * rng.uniform_f32(),
            }
        })
        .collect();
    for b in &blobs {
        let reach = b.r * 1.3;
        let y0 = (b.cy - reach).floor().max(0.0) as usize;
        let y1 = ((b.cy + reach).ceil() as usize).min(h);
        let x0 = (b.cx - reach).floor().max(0.0) as usize;
        let x1 = ((b.cx + reach).ceil() as usize).min(w);
        let inv_r2 = 1.0 / (b.r * b.r);
        for y in y0..y1 {
            let dy = y as f32 + 0.5 - b.cy;
            for x in x0..x1 {
                let dx = x as f32 + 0.5 - b.cx;
                // local radius grows/shrinks with the noise field: ragged rim
                let wobble = 0.7 + 0.6 * edge_noise[y * w + x];
                let falloff = 1.0 - (dy * dy + dx * dx) * inv_r2 / (wobble * wobble);
                if falloff <= 0.0 {
                    continue;
                }
                let a = (1.6 * falloff).min(1.0);
                let slot = &mut alpha[y * w + x];
                *slot = 1.0 - (1.0 - *slot) * (1.0 - a);
            }
        }
    }
    for st in &streaks {
        let y_lo = (st.y0.min(st.y1) - st.r).floor().max(0.0) as usize;
        let y_hi = ((st.y0.max(st.y1) + st.r).ceil() as usize).min(h);
        let x_lo = (st.x0.min(st.x1) - st.r).floor().max(0.0) as usize;
        let x_hi = ((st.x0.max(st.x1) + st.r).ceil() as usize).min(w);
        let inv_r2 = 1.0 / (st.r * st.r);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let d2 = st.dist2(y as f32 + 0.5, x as f32 + 0.5);
                let falloff = 1.0 - d2 * inv_r2;
                if falloff <= 0.0 {
                    continue;
                }
                // mostly opaque core, semi-transparent fringe
                let a = (1.1 * falloff).min(0.9);
                let slot = &mut alpha[y * w + x];
                *slot = 1.0 - (1.0 - *slot) * (1.0 - a);
            }
        }
    }
    alpha
}

/// Generate scene `index` of the corpus described by `spec`.
pub fn generate_synthetic_scene(spec: &SynthSpec, index: usize) -> Result<Scene, DataError> {
    spec.validate()?;
    let (h, w) = spec.scene_size;
    let mut rng = Rng::seed_stream(spec.seed, index as u64);

    let alpha = cloud_alpha(&mut rng, h, w, spec.cloud_density);

    let mut bands = Vec::with_capacity(spec.channels * h * w);
    for _ in 0..spec.channels {
        // Cloud brightness sits near the top of the range in every band;
        // ground noise fields are independent per band and their upper tail
        // reaches toward cloud levels, so single-band brightness is an
        // ambiguous cue (bright ground is colored, clouds are white).
        let ground_lo = 0.05 + 0.05 * rng.uniform_f32();
        let ground_hi = 0.35 + 0.2 * rng.uniform_f32();
        let brightness = 0.85 + 0.12 * rng.uniform_f32();
        let ground = value_noise(&mut rng, h, w, 4, 3);
        for (g, &a) in ground.iter().zip(&alpha) {
            let ground_val = ground_lo + (ground_hi - ground_lo) * g;
            bands.push((1.0 - a) * ground_val + a * brightness);
        }
    }

    let raw_labels: Vec<u8> = alpha
        .iter()
        .map(|&a| if a > spec.alpha_threshold { 2u8 } else { 0u8 })
        .collect();

    Scene::new(
        format!("synth-{index:04}"),
        Some("synthetic".into()),
        spec.channels,
        h,
        w,
        bands,
        Some(raw_labels),
        None,
    )
}

pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<Vec<Scene>, DataError> {
    (0..spec.num_scenes).map(|i| generate_synthetic_scene(spec, i)).collect()
}
