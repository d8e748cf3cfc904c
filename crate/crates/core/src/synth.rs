//! Synthetic statues: parametric faces with known proportions, posed in 3D,
//! plus catalog records and embeddings whose structure follows the style.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{
    BaseMaterial, ColorTexture, ConstructionMethod, DateEvidence, DateKind, StatueRecord, StatueType, StoneType,
    Style, WoodType,
};
use crate::iconometry::{ProportionVector, THEORETICAL_CANON};
use crate::landmarks::{rotation_from_angles, synthetic_frontal_template, LandmarkSet, Point3};

/// Width of the template forehead in template units.
const FOREHEAD: f64 = 12.0;

/// Frontal face whose eyelid, eye, nose and lower-face proportions are
/// `[el, e, n, lf]`, in the template frame. Brows and face width follow the
/// template, so `lh = rh = 0.5`.
pub fn synthetic_face(image_id: &str, proportions: [f64; 4]) -> LandmarkSet {
    let [el, e, n, lf] = proportions.map(|p| p * FOREHEAD);
    let template = synthetic_frontal_template();
    let eye_top = -el;
    let eye_bottom = -(el + e);
    let dx = (0.6 * n).min(1.2);
    let dy = (n * n - dx * dx).sqrt();
    let nose_bottom = eye_bottom - dy;
    let nose_x = (6.0 - dx) / 4.8;
    let nose_y = nose_bottom / -3.6;
    let points = template
        .points
        .iter()
        .enumerate()
        .map(|(i, &[x, y, z])| {
            let number = i + 1;
            match number {
                37..=48 => [x, (e - el) + e * y, z],
                28..=31 => [x, y * nose_y, z],
                32..=36 => [x * nose_x, y * nose_y, z],
                7 | 11 => [x.signum() * (6.0 - dx), nose_bottom - lf, z],
                _ if y < -3.6 => [x, nose_bottom + (y + 3.6) * lf / 4.0, z],
                _ => [x, y, z],
            }
        })
        .collect();
    debug_assert!(eye_top > eye_bottom);
    LandmarkSet {
        image_id: image_id.to_string(),
        points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl Pose {
    /// Yaw within ±30°, pitch ±15°, roll ±10°, scale 0.5–3, translation ±50.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            yaw: rng.random_range(-30.0..30.0) * deg,
            pitch: rng.random_range(-15.0..15.0) * deg,
            roll: rng.random_range(-10.0..10.0) * deg,
            scale: rng.random_range(0.5..3.0),
            translation: [
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ],
        }
    }

    pub fn apply(&self, lm: &LandmarkSet) -> LandmarkSet {
        lm.transformed(
            &rotation_from_angles(self.yaw, self.pitch, self.roll),
            self.scale,
            self.translation,
        )
    }
}

/// Adds isotropic Gaussian noise of standard deviation `sigma` to every
/// coordinate.
pub fn jitter<R: Rng + ?Sized>(lm: &LandmarkSet, sigma: f64, rng: &mut R) -> LandmarkSet {
    if sigma == 0.0 {
        return lm.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let points: Vec<Point3> = lm
        .points
        .iter()
        .map(|p| p.map(|c| c + noise.sample(rng)))
        .collect();
    LandmarkSet {
        image_id: lm.image_id.clone(),
        points,
    }
}

// ---------------------------------------------------------------------------
// Cohorts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub statues_per_style: usize,
    pub max_images_per_statue: usize,
    /// Offset added to China's nose proportion.
    pub china_nose_offset: f64,
    /// Standard deviation of each statue's proportions around its style mean.
    pub proportion_noise: f64,
    /// Standard deviation of per-image landmark noise, in template units.
    pub landmark_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            statues_per_style: 20,
            max_images_per_statue: 4,
            china_nose_offset: 0.05,
            proportion_noise: 0.01,
            landmark_noise: 0.01,
            seed: 7,
        }
    }
}

/// Style mean of `[el, e, n, lf]`.
pub fn style_proportions(style: Style, china_nose_offset: f64) -> [f64; 4] {
    let [_, _, el, e, n, lf] = THEORETICAL_CANON;
    match style {
        Style::China => [el - 0.01, e, n + china_nose_offset, lf - 0.02],
        Style::Heian => [el, e + 0.006, n, lf],
        Style::Kamakura => [el + 0.01, e - 0.006, n, lf + 0.02],
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<StatueRecord>,
    pub landmarks: Vec<LandmarkSet>,
    /// Generating proportions of each image, before landmark noise and pose.
    pub truth: Vec<ProportionVector>,
}

fn pick<T: Copy, R: Rng + ?Sized>(rng: &mut R, items: &[T]) -> T {
    *items.choose(rng).expect("non-empty choice")
}

fn some_of<T: Copy + Ord, R: Rng + ?Sized>(rng: &mut R, items: &[T], max: usize) -> BTreeSet<T> {
    let count = rng.random_range(1..=max.min(items.len()));
    items.choose_multiple(rng, count).copied().collect()
}

fn dates<R: Rng + ?Sized>(rng: &mut R, lo: i32, hi: i32) -> Vec<DateEvidence> {
    match rng.random_range(0..10) {
        0 => Vec::new(),
        1..=3 => vec![DateEvidence::exact(rng.random_range(lo..=hi))],
        4..=7 => {
            let start = rng.random_range(lo..hi - 20);
            let end = (start + rng.random_range(20..120)).min(hi);
            vec![DateEvidence::new(DateKind::YearRange, start, end).expect("ordered range")]
        }
        _ => {
            let year = rng.random_range(lo..=hi);
            let century = crate::catalog::century_of(year);
            let (c_lo, c_hi) = (100 * (century - 1) + 1, 100 * century);
            let start = (year - rng.random_range(0..40)).max(c_lo);
            let end = (year + rng.random_range(0..40)).min(c_hi);
            vec![
                DateEvidence::new(DateKind::Century, c_lo, c_hi).expect("ordered century"),
                DateEvidence::new(DateKind::Era, start, end).expect("ordered era"),
            ]
        }
    }
}

/// Metadata whose attributes depend on the style, as in a real collection
/// where period, workshop and material go together.
fn style_record<R: Rng + ?Sized>(rng: &mut R, style: Style, statue_id: String, images: Vec<String>) -> StatueRecord {
    let mut r = StatueRecord::new(statue_id, style, images);
    r.statue_type = Some(if rng.random_bool(match style {
        Style::China => 0.7,
        Style::Heian => 0.5,
        Style::Kamakura => 0.3,
    }) {
        StatueType::Buddha
    } else {
        StatueType::Bodhisattva
    });
    match style {
        Style::China => {
            r.height_cm = Some(rng.random_range(60.0..450.0f64).round());
            r.date_evidence = dates(rng, 400, 1279);
            if rng.random_bool(0.3) {
                r.base_material = Some(some_of(rng, &[BaseMaterial::Iron, BaseMaterial::Brick], 1));
            }
            r.stone_type = Some(some_of(rng, StoneType::ALL, 2));
            if rng.random_bool(0.4) {
                r.color_texture = Some(some_of(rng, &[ColorTexture::Pigment, ColorTexture::Plating], 2));
            }
        }
        Style::Heian => {
            r.height_cm = Some(rng.random_range(40.0..300.0f64).round());
            r.date_evidence = dates(rng, 794, 1185);
            r.base_material = Some(BTreeSet::from([BaseMaterial::Wood]));
            r.wood_type = Some(some_of(
                rng,
                &[WoodType::JapaneseCypress, WoodType::Katsura, WoodType::CherryWood, WoodType::JapaneseTorreya],
                2,
            ));
            r.construction_method = Some(pick(rng, &[ConstructionMethod::OnePiece, ConstructionMethod::OnePieceCut]));
            r.color_texture = Some(some_of(rng, &[ColorTexture::GoldLeaves, ColorTexture::Pigment], 2));
        }
        Style::Kamakura => {
            r.height_cm = Some(rng.random_range(30.0..260.0f64).round());
            r.date_evidence = dates(rng, 1185, 1333);
            r.base_material = Some(some_of(rng, &[BaseMaterial::Wood, BaseMaterial::WoodLacquer], 2));
            r.wood_type = Some(some_of(rng, &[WoodType::JapaneseCypress, WoodType::CamphorTree, WoodType::Coniferous], 2));
            r.construction_method = Some(ConstructionMethod::SeparatePieces);
            r.color_texture = Some(some_of(
                rng,
                &[ColorTexture::LacqueredFoil, ColorTexture::GoldPaint, ColorTexture::DryLacquerFinish, ColorTexture::Lacquer],
                2,
            ));
        }
    }
    r
}

fn style_code(style: Style) -> &'static str {
    match style {
        Style::China => "chn",
        Style::Heian => "hei",
        Style::Kamakura => "kam",
    }
}

/// Generates a catalog and posed landmarks for the three styles. China's
/// nose proportion is raised by `china_nose_offset`.
pub fn generate_dataset(cfg: &SyntheticConfig) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let statue_noise = Normal::new(0.0, cfg.proportion_noise.max(0.0)).expect("finite noise");
    let mut records = Vec::new();
    let mut landmarks = Vec::new();
    let mut truth = Vec::new();
    for style in Style::ALL.iter().copied() {
        let mean = style_proportions(style, cfg.china_nose_offset);
        for s in 0..cfg.statues_per_style {
            let statue_id = format!("{}_s{s:03}", style_code(style));
            let n_images = rng.random_range(1..=cfg.max_images_per_statue.max(1));
            let images: Vec<String> = (0..n_images).map(|k| format!("{statue_id}_i{k}")).collect();
            let target = mean.map(|m| (m + statue_noise.sample(&mut rng)).max(0.02));
            for image in &images {
                let face = synthetic_face(image, target);
                let noisy = jitter(&face, cfg.landmark_noise, &mut rng);
                landmarks.push(Pose::random(&mut rng).apply(&noisy));
                let [el, e, n, lf] = target;
                truth.push(ProportionVector::from_array(image.clone(), [0.5, 0.5, el, e, n, lf]));
            }
            records.push(style_record(&mut rng, style, statue_id, images));
        }
    }
    SyntheticDataset {
        records,
        landmarks,
        truth,
    }
}

/// Precomputed-embedding stand-ins: each style gets a random mean direction
/// of length `separation`, and every image adds unit Gaussian noise.
pub fn synthetic_image_embeddings(
    records: &[StatueRecord],
    dim: usize,
    separation: f64,
    seed: u64,
) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = Style::ALL
        .iter()
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * separation / norm).collect()
        })
        .collect();
    let mut rows = Vec::new();
    for r in records {
        let s = Style::ALL.iter().position(|&s| s == r.style).expect("known style");
        for image in &r.image_ids {
            let v = means[s].iter().map(|m| m + unit.sample(&mut rng)).collect();
            rows.push((image.clone(), v));
        }
    }
    rows
}

/// Two cohorts of statues that share no attribute value: China statues that
/// are small stone Bodhisattvas, Heian statues that are big wooden Buddhas.
pub fn disjoint_cohorts(statues_per_cohort: usize, images_per_statue: usize) -> Vec<StatueRecord> {
    let mut records = Vec::new();
    for (style, code) in [(Style::China, "a"), (Style::Heian, "b")] {
        for s in 0..statues_per_cohort {
            let id = format!("{code}{s:03}");
            let images = (0..images_per_statue).map(|k| format!("{id}_{k}")).collect();
            let mut r = StatueRecord::new(id, style, images);
            if style == Style::China {
                r.height_cm = Some(50.0);
                r.statue_type = Some(StatueType::Bodhisattva);
                r.base_material = Some(BTreeSet::from([BaseMaterial::Brick]));
                r.stone_type = Some(BTreeSet::from([StoneType::Limestone]));
                r.construction_method = Some(ConstructionMethod::OnePiece);
            } else {
                r.height_cm = Some(300.0);
                r.statue_type = Some(StatueType::Buddha);
                r.base_material = Some(BTreeSet::from([BaseMaterial::Wood]));
                r.wood_type = Some(BTreeSet::from([WoodType::JapaneseCypress]));
                r.construction_method = Some(ConstructionMethod::SeparatePieces);
            }
            records.push(r);
        }
    }
    records
}
