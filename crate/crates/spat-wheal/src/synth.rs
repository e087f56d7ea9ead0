//! Deterministic synthetic case generator.
//!
//! Each case is a rendered forearm patch: a low-frequency skin albedo with
//! fine grain, raised wheals as smooth height-field bumps planted at the
//! prick layout under a random rigid transform, and 33 renders of that
//! geometry — 32 directional lights (two banks of 16, low side angles to
//! top light) shaded Lambertian with cast-shadow darkening, plus one
//! near-vertical full-light image where the same wheals show only faint
//! contrast. Ground truth is the exact boundary polygon of every bump.
//!
//! Directional shading is the cue the pipeline exploits: a side-lit bump is
//! bright on the facing edge and dark on the far edge, while the full-light
//! render carries just a slight whitening. Everything is a pure function of
//! `(config, seed)`.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{save_case, AnnotationSet, Case, Corpus, CorpusCaseEntry, CorpusManifest, ImageStack};
use crate::detect::{PrickLayout, RigidTransform2D};
use crate::{DIRECTIONAL_IMAGES, PRICK_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Generator parameters. Lengths are millimeters unless the name says
/// pixels; intensities are in [0, 1] before 8-bit quantization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub mm_per_px: f64,
    /// Probability each of the 12 pricks develops a wheal.
    pub presence_prob: f64,
    /// Wheal diameter range (uniform).
    pub diameter_mm: [f64; 2],
    /// Peak bump height; drives shading contrast.
    pub wheal_height_mm: f64,
    /// Amplitude of the harmonic boundary perturbation (0 = smooth ellipse).
    pub boundary_irregularity: f64,
    /// Ellipse axis jitter (0 = circle).
    pub aspect_jitter: f64,
    /// Planted transform bounds.
    pub max_shift_mm: f64,
    pub max_rot_deg: f64,
    /// Wheal center jitter around the transformed prick location.
    pub center_jitter_mm: f64,
    /// Base skin color (linear RGB).
    pub base_albedo: [f64; 3],
    /// Low-frequency background modulation amplitude.
    pub background_wave_amp: f64,
    /// Per-case skin grain (shared by all images of a case).
    pub grain_sigma: f64,
    /// Per-image sensor noise.
    pub sensor_noise_sigma: f64,
    /// Albedo whitening inside a wheal; the faint cue visible in full light.
    pub wheal_whitening: f64,
    /// Per-image lateral intensity falloff toward the light's side.
    pub lateral_falloff: f64,
    /// Cast-shadow darkening strength.
    pub shadow_strength: f64,
    /// Site keys cycled round-robin across a corpus.
    pub sites: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 192,
            height: 128,
            mm_per_px: 0.25,
            presence_prob: 0.75,
            diameter_mm: [3.0, 7.0],
            wheal_height_mm: 0.55,
            boundary_irregularity: 0.08,
            aspect_jitter: 0.12,
            max_shift_mm: 2.5,
            max_rot_deg: 3.0,
            center_jitter_mm: 0.4,
            base_albedo: [0.78, 0.60, 0.50],
            background_wave_amp: 0.035,
            grain_sigma: 0.02,
            sensor_noise_sigma: 0.015,
            wheal_whitening: 0.022,
            lateral_falloff: 0.08,
            shadow_strength: 0.55,
            sites: vec![
                "site_a".to_string(),
                "site_b".to_string(),
                "site_c".to_string(),
                "site_d".to_string(),
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(SynthError::Config(format!(
                "dims {}x{} must be divisible by 16 (model pooling levels)",
                self.width, self.height
            )));
        }
        if !(self.mm_per_px > 0.0) {
            return Err(SynthError::Config("mm_per_px must be positive".into()));
        }
        if self.diameter_mm[0] > self.diameter_mm[1] || self.diameter_mm[0] <= 0.0 {
            return Err(SynthError::Config(format!(
                "bad diameter range {:?}",
                self.diameter_mm
            )));
        }
        if self.diameter_mm[0] / self.mm_per_px < 1.0 {
            return Err(SynthError::Config(format!(
                "minimum diameter {} mm is below one pixel at {} mm/px",
                self.diameter_mm[0], self.mm_per_px
            )));
        }
        if !(0.0..=1.0).contains(&self.presence_prob) {
            return Err(SynthError::Config("presence_prob must be in [0,1]".into()));
        }
        if self.sites.is_empty() {
            return Err(SynthError::Config("need at least one site key".into()));
        }
        // every planted wheal must stay inside the frame; harmonics j=2..5
        // scale as 2/j, so the boundary factor tops out at the partial sum
        let layout = PrickLayout::standard(self.mm_per_px);
        let half_w = self.width as f64 * self.mm_per_px / 2.0;
        let half_h = self.height as f64 * self.mm_per_px / 2.0;
        let harmonic_max = 1.0
            + self.boundary_irregularity * 2.0 * (1.0 / 2.0 + 1.0 / 3.0 + 1.0 / 4.0 + 1.0 / 5.0);
        let reach = self.diameter_mm[1] / 2.0
            * (1.0 + self.aspect_jitter).sqrt()
            * harmonic_max
            + self.max_shift_mm
            + self.center_jitter_mm;
        for p in &layout.points_mm {
            if p[0].abs() + reach > half_w || p[1].abs() + reach > half_h {
                return Err(SynthError::Config(format!(
                    "layout point {p:?} plus wheal reach {reach:.1} mm exceeds the {half_w:.0}x{half_h:.0} mm half-extent; enlarge the image or shrink diameters/shifts",
                )));
            }
        }
        Ok(())
    }
}

/// Direction (unit vector, z up) of light `k` in 1..=32. Two banks of 16:
/// 1–16 climb the left arc from low side light to top, 17–32 descend the
/// right arc; 14–19 are the top six used for the full-light render. Within
/// a bank the along-arm azimuth cycles a few degrees for diversity.
pub fn light_direction(k: usize) -> [f64; 3] {
    assert!((1..=DIRECTIONAL_IMAGES).contains(&k));
    let (base_az, t) = if k <= 16 {
        (180.0, (k - 1) as f64 / 15.0)
    } else {
        (0.0, (32 - k) as f64 / 15.0)
    };
    let elev = (25.0 + 55.0 * t).to_radians();
    let along = f64::from((k as u32 - 1) % 4) * 12.0 - 18.0;
    let az = (base_az + along).to_radians();
    [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()]
}

struct Bump {
    center_mm: [f64; 2],
    r0_mm: f64,
    aspect: f64,
    orientation: f64,
    harmonics: Vec<(f64, f64)>, // (amplitude, phase), order j = 2..
    prick: usize,
}

impl Bump {
    /// Boundary radius at polar angle `phi` (mm).
    fn radius(&self, phi: f64) -> f64 {
        let q = self.aspect.sqrt();
        let (sa, sb) = (self.r0_mm * q, self.r0_mm / q);
        let p = phi - self.orientation;
        let (s, c) = p.sin_cos();
        let ell = sa * sb / ((sb * c).powi(2) + (sa * s).powi(2)).sqrt();
        let mut f = 1.0;
        for (j, &(a, psi)) in self.harmonics.iter().enumerate() {
            f += a * ((j as f64 + 2.0) * phi + psi).cos();
        }
        ell * f
    }

    fn polygon_px(&self, cfg: &SynthConfig, vertices: usize) -> Vec<[f64; 2]> {
        let s = cfg.mm_per_px;
        (0..vertices)
            .map(|i| {
                let phi = i as f64 / vertices as f64 * std::f64::consts::TAU;
                let r = self.radius(phi);
                [
                    (self.center_mm[0] + r * phi.cos()) / s + cfg.width as f64 / 2.0,
                    (self.center_mm[1] + r * phi.sin()) / s + cfg.height as f64 / 2.0,
                ]
            })
            .collect()
    }
}

struct Scene {
    height_mm: Vec<f64>,
    grad_x: Vec<f64>, // dh/dx in mm per mm
    grad_y: Vec<f64>,
    /// Smooth in-wheal profile in [0, 1], for albedo whitening.
    profile: Vec<f64>,
    albedo: Vec<[f64; 3]>,
}

fn render_height_field(cfg: &SynthConfig, bumps: &[Bump]) -> (Vec<f64>, Vec<f64>) {
    let (w, h, s) = (cfg.width, cfg.height, cfg.mm_per_px);
    let mut height = vec![0.0; w * h];
    let mut profile = vec![0.0f64; w * h];
    for b in bumps {
        let max_r = b.r0_mm * (1.0 + cfg.boundary_irregularity + cfg.aspect_jitter) + s;
        let cx = b.center_mm[0] / s + w as f64 / 2.0;
        let cy = b.center_mm[1] / s + h as f64 / 2.0;
        let r_px = max_r / s;
        let x0 = ((cx - r_px).floor().max(0.0)) as usize;
        let x1 = ((cx + r_px).ceil().min(w as f64 - 1.0)) as usize;
        let y0 = ((cy - r_px).floor().max(0.0)) as usize;
        let y1 = ((cy + r_px).ceil().min(h as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 + 0.5 - cx) * s;
                let dy = (y as f64 + 0.5 - cy) * s;
                let dist = (dx * dx + dy * dy).sqrt();
                let phi = dy.atan2(dx);
                let rb = b.radius(phi);
                if dist < rb {
                    let rho = dist / rb;
                    let bump = (1.0 - rho * rho).powi(2);
                    height[y * w + x] += cfg.wheal_height_mm * bump;
                    profile[y * w + x] = profile[y * w + x].max(bump);
                }
            }
        }
    }
    (height, profile)
}

fn build_scene(cfg: &SynthConfig, bumps: &[Bump], rng: &mut ChaCha8Rng) -> Scene {
    let (w, h, s) = (cfg.width, cfg.height, cfg.mm_per_px);
    let (height_mm, profile) = render_height_field(cfg, bumps);

    let mut grad_x = vec![0.0; w * h];
    let mut grad_y = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            grad_x[y * w + x] = (height_mm[y * w + xp] - height_mm[y * w + xm])
                / ((xp - xm) as f64 * s);
            grad_y[y * w + x] = (height_mm[yp * w + x] - height_mm[ym * w + x])
                / ((yp - ym) as f64 * s);
        }
    }

    // low-frequency skin tone waves + grain, shared by all renders
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let wavelength = rng.random_range(15.0..50.0);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = cfg.background_wave_amp * rng.random_range(0.5..1.0);
            (std::f64::consts::TAU / wavelength, dir, phase, amp)
        })
        .collect();
    let grain_dist = Normal::new(0.0, cfg.grain_sigma).expect("sigma is finite");
    let mut albedo = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let mm_x = (x as f64 + 0.5 - w as f64 / 2.0) * s;
            let mm_y = (y as f64 + 0.5 - h as f64 / 2.0) * s;
            let mut level = 0.0;
            for &(freq, dir, phase, amp) in &waves {
                level += amp * (freq * (mm_x * dir.cos() + mm_y * dir.sin()) + phase).cos();
            }
            level += grain_dist.sample(rng);
            level += cfg.wheal_whitening * profile[y * w + x];
            let i = y * w + x;
            for ch in 0..3 {
                albedo[i][ch] = (cfg.base_albedo[ch] * (1.0 + level)).clamp(0.0, 1.0);
            }
        }
    }

    Scene {
        height_mm,
        grad_x,
        grad_y,
        profile,
        albedo,
    }
}

fn sample_height(scene: &Scene, w: usize, h: usize, x: f64, y: f64) -> f64 {
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let a = scene.height_mm[y0 * w + x0];
    let b = scene.height_mm[y0 * w + x1];
    let c = scene.height_mm[y1 * w + x0];
    let d = scene.height_mm[y1 * w + x1];
    a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
}

/// Lambertian shade of one pixel under light `l`, normalized so flat skin
/// has factor 1.
fn shade_factor(scene: &Scene, w: usize, i: usize, l: [f64; 3]) -> f64 {
    let (gx, gy) = (scene.grad_x[i], scene.grad_y[i]);
    let inv_norm = 1.0 / (1.0 + gx * gx + gy * gy).sqrt();
    let ndotl = (-gx * l[0] - gy * l[1] + l[2]) * inv_norm;
    (ndotl / l[2]).clamp(0.0, 1.8)
}

fn render_directional(
    cfg: &SynthConfig,
    scene: &Scene,
    l: [f64; 3],
    cast_shadows: bool,
    noise: &[f64],
) -> RgbImage {
    let (w, h, s) = (cfg.width, cfg.height, cfg.mm_per_px);
    let horiz = (l[0] * l[0] + l[1] * l[1]).sqrt();
    let (ux, uy) = if horiz > 1e-9 {
        (l[0] / horiz, l[1] / horiz)
    } else {
        (0.0, 0.0)
    };
    let tan_e = l[2] / horiz.max(1e-9);
    let max_h = cfg.wheal_height_mm;
    let steps = if cast_shadows && horiz > 1e-9 {
        ((max_h / (s * tan_e)).ceil() as usize).clamp(1, 40)
    } else {
        0
    };
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut factor = shade_factor(scene, w, i, l);
            if steps > 0 {
                // march toward the light; any terrain above the light ray
                // throws this pixel into (soft) shadow
                let base = scene.height_mm[i];
                let mut occl: f64 = 0.0;
                for t in 1..=steps {
                    let tf = t as f64;
                    let hh = sample_height(scene, w, h, x as f64 + tf * ux, y as f64 + tf * uy);
                    occl = occl.max(hh - base - tf * s * tan_e);
                }
                let shadow = (occl / (0.5 * max_h)).clamp(0.0, 1.0);
                factor *= 1.0 - cfg.shadow_strength * shadow;
            }
            // lights sit on one side; intensity falls off across the arm
            let mm_x = (x as f64 + 0.5 - w as f64 / 2.0) * s;
            let mm_y = (y as f64 + 0.5 - h as f64 / 2.0) * s;
            let half_w = w as f64 * s / 2.0;
            let lateral = 1.0 + cfg.lateral_falloff * (mm_x * ux + mm_y * uy) / half_w;
            let n = noise[i];
            let px = img.get_pixel_mut(x as u32, y as u32);
            for ch in 0..3 {
                let v = scene.albedo[i][ch] * factor * lateral + n;
                px.0[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img
}

fn render_full_light(cfg: &SynthConfig, scene: &Scene, noise: &[f64]) -> RgbImage {
    let (w, h) = (cfg.width, cfg.height);
    // uniform lighting: the top six sources average out directionality
    let top: Vec<[f64; 3]> = (14..=19).map(light_direction).collect();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let factor: f64 =
                top.iter().map(|&l| shade_factor(scene, w, i, l)).sum::<f64>() / top.len() as f64;
            let n = noise[i];
            let px = img.get_pixel_mut(x as u32, y as u32);
            for ch in 0..3 {
                let v = scene.albedo[i][ch] * factor + n;
                px.0[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img
}

/// Generates one case deterministically from `(config, seed)`.
pub fn generate_case(cfg: &SynthConfig, seed: u64) -> Result<Case, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = PrickLayout::standard(cfg.mm_per_px);

    let transform = RigidTransform2D {
        tx_mm: rng.random_range(-cfg.max_shift_mm..=cfg.max_shift_mm),
        ty_mm: rng.random_range(-cfg.max_shift_mm..=cfg.max_shift_mm),
        theta_deg: rng.random_range(-cfg.max_rot_deg..=cfg.max_rot_deg),
    };

    let mut bumps = Vec::new();
    for (prick, &p) in layout.points_mm.iter().enumerate() {
        // draw per-prick randomness unconditionally so one prick's presence
        // does not shift every later wheal's shape
        let present = rng.random_bool(cfg.presence_prob);
        let diameter = rng.random_range(cfg.diameter_mm[0]..=cfg.diameter_mm[1]);
        let aspect = rng.random_range(1.0 - cfg.aspect_jitter..=1.0 + cfg.aspect_jitter);
        let orientation = rng.random_range(0.0..std::f64::consts::TAU);
        let harmonics: Vec<(f64, f64)> = (2..=5)
            .map(|j| {
                (
                    cfg.boundary_irregularity * rng.random_range(0.3..1.0) * 2.0 / f64::from(j),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let jr = cfg.center_jitter_mm * rng.random_range(0.0f64..1.0).sqrt();
        let ja = rng.random_range(0.0..std::f64::consts::TAU);
        if present {
            let q = transform.apply_mm(p);
            bumps.push(Bump {
                center_mm: [q[0] + jr * ja.cos(), q[1] + jr * ja.sin()],
                r0_mm: diameter / 2.0,
                aspect,
                orientation,
                harmonics,
                prick,
            });
        }
    }

    let scene = build_scene(cfg, &bumps, &mut rng);

    let (w, h) = (cfg.width, cfg.height);
    let noise_dist = Normal::new(0.0, cfg.sensor_noise_sigma).expect("sigma is finite");
    let mut sensor_noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..w * h).map(|_| noise_dist.sample(rng)).collect()
    };
    let directional_noise: Vec<Vec<f64>> =
        (0..DIRECTIONAL_IMAGES).map(|_| sensor_noise(&mut rng)).collect();
    let full_noise = sensor_noise(&mut rng);

    // rendering is pure given the scene and noise fields
    let directional: Vec<RgbImage> = (1..=DIRECTIONAL_IMAGES)
        .into_par_iter()
        .map(|k| {
            render_directional(
                cfg,
                &scene,
                light_direction(k),
                true,
                &directional_noise[k - 1],
            )
        })
        .collect();
    let full_light = render_full_light(cfg, &scene, &full_noise);

    let mut polygons: Vec<Option<Vec<[f64; 2]>>> = vec![None; PRICK_COUNT];
    let mut true_areas: Vec<Option<f64>> = vec![None; PRICK_COUNT];
    for b in &bumps {
        let poly = b.polygon_px(cfg, 64);
        let area_px2 = crate::detect::shoelace_area(&poly).abs();
        true_areas[b.prick] = Some(area_px2 * cfg.mm_per_px * cfg.mm_per_px);
        polygons[b.prick] = Some(poly);
    }

    let site = cfg.sites[(seed as usize) % cfg.sites.len()].clone();
    let stack = ImageStack {
        case_id: format!("case_{seed:06}"),
        site,
        mm_per_px: cfg.mm_per_px,
        directional,
        full_light,
        dark: None, // control-image slot stays reserved
    };
    Ok(Case {
        stack,
        annotations: AnnotationSet { polygons, layout },
        planted_transform: Some(transform),
        true_areas_mm2: true_areas,
    })
}

/// Generates `n` cases (seeds `seed..seed+n`, sites round-robin) into
/// `out`, writes the corpus manifest with the generator config embedded,
/// and returns the manifest hash.
pub fn generate_corpus(
    cfg: &SynthConfig,
    n: usize,
    seed: u64,
    out: &std::path::Path,
) -> Result<(Corpus, String), SynthError> {
    if n == 0 {
        return Err(SynthError::Config("corpus needs at least one case".into()));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(crate::data::DataError::Io)?;

    let entries: Vec<CorpusCaseEntry> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<CorpusCaseEntry, SynthError> {
            let case_seed = seed + i as u64;
            let case = generate_case(cfg, case_seed)?;
            let dir_name = format!("case_{:04}", i);
            let dir = out.join(&dir_name);
            save_case(&case, &dir, serde_json::Map::new())?;
            let sha256 = crate::data::case_content_hash(&dir)?;
            Ok(CorpusCaseEntry {
                case_id: case.stack.case_id.clone(),
                site: case.stack.site.clone(),
                dir: dir_name,
                sha256,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let manifest = CorpusManifest {
        format_version: crate::data::FORMAT_VERSION,
        seed,
        cases: entries,
        generator: Some(
            serde_json::to_value(cfg)
                .map_err(|e| SynthError::Config(format!("config serialization: {e}")))?,
        ),
        extra: serde_json::Map::new(),
    };
    let bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| SynthError::Config(format!("manifest serialization: {e}")))?;
    std::fs::write(out.join("manifest.json"), bytes).map_err(crate::data::DataError::Io)?;
    let corpus = Corpus {
        root: out.to_path_buf(),
        manifest,
    };
    let hash = corpus.manifest_hash()?;
    Ok((corpus, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rasterize_polygon, union_gt_mask};

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_case(&cfg, 7).unwrap();
        let b = generate_case(&cfg, 7).unwrap();
        for k in 0..DIRECTIONAL_IMAGES {
            assert_eq!(
                a.stack.directional[k].as_raw(),
                b.stack.directional[k].as_raw(),
                "image {k} differs between same-seed runs"
            );
        }
        assert_eq!(a.stack.full_light.as_raw(), b.stack.full_light.as_raw());
        assert_eq!(a.annotations.polygons, b.annotations.polygons);
        assert_eq!(a.planted_transform, b.planted_transform);
        let c = generate_case(&cfg, 8).unwrap();
        assert_ne!(a.stack.full_light.as_raw(), c.stack.full_light.as_raw());
    }

    #[test]
    fn zero_presence_gives_textured_background_only() {
        let cfg = SynthConfig {
            presence_prob: 0.0,
            ..SynthConfig::default()
        };
        let case = generate_case(&cfg, 3).unwrap();
        assert!(case.annotations.polygons.iter().all(Option::is_none));
        // background still has texture (not a constant image)
        let img = &case.stack.directional[0];
        let vals: Vec<u8> = img.pixels().map(|p| p.0[0]).collect();
        let mean: f64 = vals.iter().map(|&v| f64::from(v)).sum::<f64>() / vals.len() as f64;
        let var: f64 = vals
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / vals.len() as f64;
        assert!(var > 1.0, "background variance {var} too low");
    }

    #[test]
    fn planted_disc_area_matches_clinical_threshold_anchor() {
        // a 4.5 mm circle rasterizes to ~15.9 mm^2 (within 5%)
        let cfg = SynthConfig {
            diameter_mm: [4.5, 4.5],
            boundary_irregularity: 0.0,
            aspect_jitter: 0.0,
            center_jitter_mm: 0.0,
            presence_prob: 1.0,
            ..SynthConfig::default()
        };
        let case = generate_case(&cfg, 11).unwrap();
        let poly = case.annotations.polygons[0].as_ref().unwrap();
        let mask = rasterize_polygon(poly, cfg.width, cfg.height).unwrap();
        let area_mm2 = mask.count() as f64 * cfg.mm_per_px * cfg.mm_per_px;
        let expected = 15.904; // pi * (4.5/2)^2
        assert!(
            (area_mm2 - expected).abs() / expected < 0.05,
            "rasterized {area_mm2} vs {expected}"
        );
        // analytic area recorded in the manifest agrees too
        let true_area = case.true_areas_mm2[0].unwrap();
        assert!((true_area - expected).abs() / expected < 0.02);
    }

    #[test]
    fn polygon_centroid_stays_at_planted_center() {
        let cfg = SynthConfig {
            presence_prob: 1.0,
            center_jitter_mm: 0.0,
            ..SynthConfig::default()
        };
        let case = generate_case(&cfg, 5).unwrap();
        let t = case.planted_transform.unwrap();
        let layout = &case.annotations.layout;
        for (k, poly) in case.annotations.polygons.iter().enumerate() {
            let poly = poly.as_ref().unwrap();
            let n = poly.len() as f64;
            let cx: f64 = poly.iter().map(|v| v[0]).sum::<f64>() / n;
            let cy: f64 = poly.iter().map(|v| v[1]).sum::<f64>() / n;
            let q = t.apply_mm(layout.points_mm[k]);
            let ex = q[0] / cfg.mm_per_px + cfg.width as f64 / 2.0;
            let ey = q[1] / cfg.mm_per_px + cfg.height as f64 / 2.0;
            let dist = ((cx - ex).powi(2) + (cy - ey).powi(2)).sqrt();
            assert!(dist <= 1.0, "wheal {k} centroid off by {dist} px");
        }
    }

    #[test]
    fn directional_edge_asymmetry_beats_full_light() {
        // the paper's premise: side lights produce bright/dark wheal edges
        // that the uniform image lacks
        let cfg = SynthConfig {
            presence_prob: 1.0,
            ..SynthConfig::default()
        };
        let case = generate_case(&cfg, 21).unwrap();
        let gt = union_gt_mask(&case.annotations, cfg.width, cfg.height).unwrap();
        // edge band: gt pixels whose 8-neighborhood leaves the mask, dilated
        // inward a little via the wheal profile
        let luminance = |img: &RgbImage, x: u32, y: u32| -> f64 {
            let p = img.get_pixel(x, y).0;
            (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / (3.0 * 255.0)
        };
        let mut wins = 0;
        for k in 1..=DIRECTIONAL_IMAGES {
            let l = light_direction(k);
            let horiz = (l[0] * l[0] + l[1] * l[1]).sqrt();
            let (ux, uy) = (l[0] / horiz, l[1] / horiz);
            let split_mean = |img: &RgbImage, poly: &[[f64; 2]]| -> f64 {
                // mean(facing half) - mean(away half) over the wheal's edge band
                let n = poly.len() as f64;
                let cx: f64 = poly.iter().map(|v| v[0]).sum::<f64>() / n;
                let cy: f64 = poly.iter().map(|v| v[1]).sum::<f64>() / n;
                let (mut sf, mut nf, mut sa, mut na) = (0.0, 0.0, 0.0, 0.0);
                for y in 0..cfg.height {
                    for x in 0..cfg.width {
                        if !gt.get(x, y) {
                            continue;
                        }
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        let r = (dx * dx + dy * dy).sqrt();
                        if r < 2.0 || r > 14.5 {
                            continue; // keep to this wheal's edge band
                        }
                        let v = luminance(img, x as u32, y as u32);
                        if dx * ux + dy * uy > 0.0 {
                            sf += v;
                            nf += 1.0;
                        } else {
                            sa += v;
                            na += 1.0;
                        }
                    }
                }
                if nf == 0.0 || na == 0.0 {
                    return 0.0;
                }
                (sf / nf - sa / na).abs()
            };
            let poly = case.annotations.polygons[5].as_ref().unwrap();
            let dir_stat = split_mean(&case.stack.directional[k - 1], poly);
            let full_stat = split_mean(&case.stack.full_light, poly);
            if dir_stat > full_stat {
                wins += 1;
            }
        }
        assert!(wins >= 24, "directional asymmetry won only {wins}/32 images");
    }

    #[test]
    fn corpus_round_robin_and_hash_stability() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            width: 96,
            height: 64,
            mm_per_px: 0.5,
            diameter_mm: [3.0, 4.0],
            max_shift_mm: 1.0,
            ..SynthConfig::default()
        };
        let (corpus, hash1) = generate_corpus(&cfg, 20, 0, &dir.path().join("c1")).unwrap();
        let mut per_site = std::collections::HashMap::new();
        for e in &corpus.manifest.cases {
            *per_site.entry(e.site.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(per_site.len(), 4);
        assert!(per_site.values().all(|&c| c == 5), "{per_site:?}");
        let (_, hash2) = generate_corpus(&cfg, 20, 0, &dir.path().join("c2")).unwrap();
        assert_eq!(hash1, hash2, "same seed must give the same manifest hash");
        let (_, hash3) = generate_corpus(&cfg, 20, 1, &dir.path().join("c3")).unwrap();
        assert_ne!(hash1, hash3);
    }

    #[test]
    fn mean_wheal_count_tracks_presence_probability() {
        let cfg = SynthConfig::default();
        let n = 40;
        let mut total = 0usize;
        for seed in 0..n {
            let case = generate_case(&cfg, seed).unwrap();
            total += case
                .annotations
                .polygons
                .iter()
                .filter(|p| p.is_some())
                .count();
        }
        let mean = total as f64 / n as f64;
        let expected = 12.0 * cfg.presence_prob;
        let sigma = (12.0 * cfg.presence_prob * (1.0 - cfg.presence_prob)).sqrt()
            / (n as f64).sqrt();
        assert!(
            (mean - expected).abs() <= 3.0 * sigma,
            "mean {mean} vs {expected} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn subpixel_diameter_is_a_config_error() {
        let cfg = SynthConfig {
            diameter_mm: [0.1, 5.0],
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_case(&cfg, 0),
            Err(SynthError::Config(_))
        ));
    }

    #[test]
    fn corpus_loads_back_through_dataset_io() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            width: 96,
            height: 64,
            mm_per_px: 0.5,
            diameter_mm: [3.0, 4.0],
            max_shift_mm: 1.0,
            ..SynthConfig::default()
        };
        let (corpus, _) = generate_corpus(&cfg, 3, 5, dir.path()).unwrap();
        let reopened = Corpus::open(dir.path()).unwrap();
        assert_eq!(reopened.len(), 3);
        for i in 0..3 {
            let case = reopened.load_case(i).unwrap();
            assert_eq!(case.stack.case_id, corpus.manifest.cases[i].case_id);
            assert!(case.planted_transform.is_some());
        }
    }
}
