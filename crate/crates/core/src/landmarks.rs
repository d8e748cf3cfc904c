//! 68-point 3D facial landmarks and pose normalization.
//!
//! Point numbering is 1-based and follows the common 68-point annotation:
//! jaw 1–17, brows 18–27, nose 28–36, eyes 37–48, mouth 49–68. The canonical
//! frame is right-handed with x to the image right, y up and z towards the
//! viewer.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const NUM_POINTS: usize = 68;

pub type Point3 = [f64; 3];
pub type Point2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub image_id: String,
    pub points: Vec<Point3>,
}

impl LandmarkSet {
    pub fn new(image_id: impl Into<String>, points: Vec<Point3>) -> Result<Self> {
        let set = Self {
            image_id: image_id.into(),
            points,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != NUM_POINTS {
            return Err(Error::Validation(format!(
                "image {}: expected {NUM_POINTS}, got {}",
                self.image_id,
                self.points.len()
            )));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::Validation(format!(
                "image {}: point {} has a non-finite coordinate",
                self.image_id,
                i + 1
            )));
        }
        let first = self.points[0];
        if self.points.iter().all(|p| *p == first) {
            return Err(Error::Validation(format!(
                "image {}: all points coincide",
                self.image_id
            )));
        }
        Ok(())
    }

    /// Point by 1-based landmark number.
    pub fn point(&self, number: usize) -> Point3 {
        self.points[number - 1]
    }

    /// Applies `scale * rotation * p + translation` to every point.
    pub fn transformed(&self, rotation: &Matrix3<f64>, scale: f64, translation: [f64; 3]) -> Self {
        let t = Vector3::from(translation);
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = rotation * Vector3::from(*p) * scale + t;
                [q.x, q.y, q.z]
            })
            .collect();
        Self {
            image_id: self.image_id.clone(),
            points,
        }
    }
}

/// Orthographic frontal projection of aligned landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontalLandmarks {
    pub image_id: String,
    pub points2d: Vec<Point2>,
    /// Forehead width after alignment, the length iconometry normalizes by.
    pub scale_ref: f64,
}

impl FrontalLandmarks {
    /// Point by 1-based landmark number.
    pub fn point(&self, number: usize) -> Point2 {
        self.points2d[number - 1]
    }

    /// Mean of the listed 1-based landmarks.
    pub fn mean_of(&self, numbers: &[usize]) -> Point2 {
        let n = numbers.len() as f64;
        let (x, y) = numbers.iter().fold((0.0, 0.0), |(x, y), &k| {
            let p = self.point(k);
            (x + p[0], y + p[1])
        });
        [x / n, y / n]
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &self.points2d {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        distance2(&lo, &hi)
    }
}

pub fn distance2(a: &Point2, b: &Point2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Left-right mirror partner of a 1-based landmark number.
pub fn mirror_index(number: usize) -> usize {
    match number {
        1..=17 => 18 - number,
        18..=27 => 45 - number,
        28..=31 | 34 | 52 | 58 | 63 | 67 => number,
        32..=36 => 68 - number,
        37..=40 => 83 - number,
        41 | 42 => 89 - number,
        43..=46 => 83 - number,
        47 | 48 => 89 - number,
        49..=55 => 104 - number,
        56..=60 => 116 - number,
        61..=65 => 126 - number,
        66 | 68 => 134 - number,
        _ => panic!("landmark number {number} out of range"),
    }
}

/// Forehead width: from the left brow anchor to the brow center and on to the
/// right brow anchor.
pub fn forehead_width(points2d: &[Point2]) -> f64 {
    let mean = |a: usize, b: usize| {
        let (p, q) = (points2d[a - 1], points2d[b - 1]);
        [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]
    };
    let left = mean(19, 21);
    let center = mean(22, 23);
    let right = mean(24, 26);
    distance2(&left, &center) + distance2(&center, &right)
}

// ---------------------------------------------------------------------------
// Canonical template

pub const TEMPLATE_ID: &str = "canonical_frontal_template";

/// Right half and midline of the synthetic template, in canon units where the
/// forehead spans 12. Right eyebrow anchor mean(24,26) = (6,0), top and bottom
/// eye anchors at (6,-1) and (6,-2), nose side 36 at (4.8,-3.6) and jaw point
/// 11 at (4.8,-7.6): lengths 6, 6, 1, 1, 2, 4.
const TEMPLATE_HALF: [(usize, Point3); 39] = [
    (9, [0.0, -9.0, 2.0]),
    (10, [2.8, -8.6, 1.7]),
    (11, [4.8, -7.6, 1.2]),
    (12, [6.0, -7.0, 0.8]),
    (13, [6.9, -6.0, 0.5]),
    (14, [7.7, -4.8, 0.2]),
    (15, [8.3, -3.4, 0.0]),
    (16, [8.7, -1.9, -0.2]),
    (17, [8.9, -0.4, -0.4]),
    (23, [1.0, 0.0, 1.2]),
    (24, [4.2, 0.3, 1.1]),
    (25, [6.0, 0.5, 0.9]),
    (26, [7.8, -0.3, 0.6]),
    (27, [8.6, -0.8, 0.3]),
    (28, [0.0, -0.4, 1.6]),
    (29, [0.0, -1.3, 2.1]),
    (30, [0.0, -2.2, 2.6]),
    (31, [0.0, -3.1, 3.1]),
    (34, [0.0, -3.5, 2.6]),
    (35, [2.4, -3.55, 2.2]),
    (36, [4.8, -3.6, 1.6]),
    (43, [4.3, -1.5, 0.9]),
    (44, [5.3, -0.95, 1.0]),
    (45, [6.7, -1.05, 1.0]),
    (46, [7.6, -1.5, 0.8]),
    (47, [6.7, -1.95, 1.0]),
    (48, [5.3, -2.05, 1.0]),
    (52, [0.0, -5.2, 2.3]),
    (53, [1.0, -5.1, 2.2]),
    (54, [2.2, -5.3, 2.0]),
    (55, [3.2, -5.8, 1.7]),
    (56, [2.3, -6.4, 2.0]),
    (57, [1.1, -6.7, 2.2]),
    (58, [0.0, -6.8, 2.3]),
    (63, [0.0, -5.7, 2.2]),
    (64, [1.0, -5.65, 2.1]),
    (65, [2.8, -5.8, 1.8]),
    (66, [1.0, -6.0, 2.1]),
    (67, [0.0, -6.05, 2.2]),
];

/// Builds a bilaterally symmetric frontal template whose guideline lengths are
/// exactly the canon's 6, 6, 1, 1, 2 and 4 units.
pub fn synthetic_frontal_template() -> LandmarkSet {
    let mut points: Vec<Option<Point3>> = vec![None; NUM_POINTS];
    for &(n, p) in &TEMPLATE_HALF {
        points[n - 1] = Some(p);
    }
    for n in 1..=NUM_POINTS {
        if points[n - 1].is_none() {
            let [x, y, z] = points[mirror_index(n) - 1].expect("template half covers every pair");
            points[n - 1] = Some([-x, y, z]);
        }
    }
    LandmarkSet {
        image_id: TEMPLATE_ID.to_string(),
        points: points.into_iter().map(|p| p.expect("filled")).collect(),
    }
}

const BUNDLED_TEMPLATE: &str = include_str!("../data/canonical_template.json");

/// The template shipped with the crate.
pub fn bundled_template() -> LandmarkSet {
    let (mut sets, rejected) =
        parse_landmarks(BUNDLED_TEMPLATE.as_bytes(), "bundled template").expect("bundled template parses");
    assert!(rejected.is_empty(), "bundled template is valid");
    sets.remove(0)
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkRejection {
    /// 0-based position of the entry in the file.
    pub index: usize,
    pub image_id: String,
    pub reason: String,
}

pub fn load_landmarks(path: &Path) -> Result<(Vec<LandmarkSet>, Vec<LandmarkRejection>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(file, &path.display().to_string())
}

fn coordinate(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| format!("bad number {n}")),
        // NaN and infinities have no JSON literal; writers emit null or a string.
        Value::Null => Ok(f64::NAN),
        Value::String(s) => s.trim().parse::<f64>().map_err(|_| format!("bad coordinate {s:?}")),
        other => Err(format!("bad coordinate {other}")),
    }
}

fn parse_entry(entry: &Value) -> std::result::Result<LandmarkSet, (String, String)> {
    let obj = entry
        .as_object()
        .ok_or_else(|| (String::new(), "entry is not an object".to_string()))?;
    let image_id = match obj.get("image_id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        _ => return Err((String::new(), "missing image_id".to_string())),
    };
    let fail = |reason: String| (image_id.clone(), reason);
    let points = obj
        .get("points")
        .and_then(Value::as_array)
        .ok_or_else(|| fail("missing points array".into()))?;
    if points.len() != NUM_POINTS {
        return Err(fail(format!("expected {NUM_POINTS}, got {}", points.len())));
    }
    let mut out = Vec::with_capacity(NUM_POINTS);
    for (i, p) in points.iter().enumerate() {
        let triple = p
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| fail(format!("point {} is not an [x,y,z] triple", i + 1)))?;
        let mut xyz = [0.0; 3];
        for (slot, v) in xyz.iter_mut().zip(triple) {
            *slot = coordinate(v).map_err(|e| fail(format!("point {}: {e}", i + 1)))?;
        }
        out.push(xyz);
    }
    let set = LandmarkSet {
        image_id: image_id.clone(),
        points: out,
    };
    set.validate().map_err(|e| match e {
        Error::Validation(m) => fail(m),
        other => fail(other.to_string()),
    })?;
    Ok(set)
}

/// Parses landmark JSON. Malformed JSON fails as a whole; invalid entries are
/// rejected one by one.
pub fn parse_landmarks<R: Read>(
    reader: R,
    source: &str,
) -> Result<(Vec<LandmarkSet>, Vec<LandmarkRejection>)> {
    let value: Value = serde_json::from_reader(reader).map_err(|e| Error::Parse {
        location: format!("{source}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Array(entries) = value else {
        return Err(Error::parse(source, "expected a JSON array of landmark entries"));
    };
    let mut sets = Vec::new();
    let mut rejected = Vec::new();
    for (index, entry) in entries.iter().enumerate() {
        match parse_entry(entry) {
            Ok(s) => sets.push(s),
            Err((image_id, reason)) => {
                log::warn!("landmark entry {index} ({image_id}) rejected: {reason}");
                rejected.push(LandmarkRejection {
                    index,
                    image_id,
                    reason,
                })
            }
        }
    }
    Ok((sets, rejected))
}

pub fn write_landmarks<W: Write>(sets: &[LandmarkSet], writer: W) -> Result<()> {
    serde_json::to_writer(writer, sets)
        .map_err(|e| Error::Validation(format!("landmark write failed: {e}")))
}

// ---------------------------------------------------------------------------
// Alignment

/// `scale * rotation * p + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, p: &Point3) -> Point3 {
        let q = self.rotation * Vector3::from(*p) * self.scale + self.translation;
        [q.x, q.y, q.z]
    }
}

fn centroid(points: &[Point3]) -> Vector3<f64> {
    let n = points.len() as f64;
    points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p))
        / n
}

/// Least-squares similarity transform taking `source` onto `target`
/// (Kabsch/Umeyama with uniform scale). Reflections are excluded.
pub fn fit_similarity(
    source: &[Point3],
    target: &[Point3],
    image_id: &str,
) -> Result<SimilarityTransform> {
    let fail = |reason: &str| Error::Alignment {
        image_id: image_id.to_string(),
        reason: reason.to_string(),
    };
    if source.len() != target.len() || source.is_empty() {
        return Err(fail("point sets differ in size"));
    }
    let (mu_s, mu_t) = (centroid(source), centroid(target));
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (p, q) in source.iter().zip(target) {
        let a = Vector3::from(*p) - mu_s;
        let b = Vector3::from(*q) - mu_t;
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    if var_s.is_nan() || var_s <= 0.0 {
        return Err(fail("source points have zero spread"));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let (s_max, s_mid) = (sv[order[0]], sv[order[1]]);
    if s_max.is_nan() || s_max <= 0.0 || s_mid <= 1e-12 * s_max {
        return Err(fail("rank-deficient covariance (collinear or degenerate landmarks)"));
    }
    // Flip the axis of the smallest singular value when the optimum is a reflection.
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|k| d[(k, k)] * sv[k]).sum();
    let scale = trace / var_s;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(fail("non-positive alignment scale"));
    }
    let translation = mu_t - rotation * mu_s * scale;
    Ok(SimilarityTransform {
        rotation,
        scale,
        translation,
    })
}

/// Aligns `lm` to `template` by a similarity transform, then drops depth.
pub fn normalize_pose(lm: &LandmarkSet, template: &LandmarkSet) -> Result<FrontalLandmarks> {
    normalize_pose_with_transform(lm, template).map(|(f, _)| f)
}

pub fn normalize_pose_with_transform(
    lm: &LandmarkSet,
    template: &LandmarkSet,
) -> Result<(FrontalLandmarks, SimilarityTransform)> {
    lm.validate()?;
    template.validate()?;
    let transform = fit_similarity(&lm.points, &template.points, &lm.image_id)?;
    let points2d: Vec<Point2> = lm
        .points
        .iter()
        .map(|p| {
            let [x, y, _] = transform.apply(p);
            [x, y]
        })
        .collect();
    let scale_ref = forehead_width(&points2d);
    Ok((
        FrontalLandmarks {
            image_id: lm.image_id.clone(),
            points2d,
            scale_ref,
        },
        transform,
    ))
}

/// Rotation from yaw (about y), pitch (about x) and roll (about z), in radians.
pub fn rotation_from_angles(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let ry = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let rx = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    let rz = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
    (rz * rx * ry).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn template() -> LandmarkSet {
        synthetic_frontal_template()
    }

    fn assert_close(a: &[Point2], b: &[Point2], tol: f64) {
        for (i, (p, q)) in a.iter().zip(b).enumerate() {
            let d = distance2(p, q);
            assert!(d <= tol, "point {} differs by {d}: {p:?} vs {q:?}", i + 1);
        }
    }

    fn template_xy() -> Vec<Point2> {
        template().points.iter().map(|p| [p[0], p[1]]).collect()
    }

    #[test]
    fn mirror_is_an_involution_and_template_is_symmetric() {
        let t = template();
        for n in 1..=NUM_POINTS {
            let m = mirror_index(n);
            assert_eq!(mirror_index(m), n);
            let (p, q) = (t.point(n), t.point(m));
            assert_eq!([p[0], p[1], p[2]], [-q[0], q[1], q[2]], "pair {n}/{m}");
        }
    }

    #[test]
    fn bundled_template_matches_generator() {
        assert_eq!(bundled_template(), synthetic_frontal_template());
    }

    #[test]
    fn template_is_a_fixed_point() {
        let (f, tr) = normalize_pose_with_transform(&template(), &template()).unwrap();
        assert_close(&f.points2d, &template_xy(), 1e-12);
        assert!((tr.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!((tr.scale - 1.0).abs() < 1e-12);
        assert!((f.scale_ref - 12.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_yaw_rotation() {
        let rot = rotation_from_angles(30f64.to_radians(), 0.0, 0.0);
        let moved = template().transformed(&rot, 1.0, [0.0; 3]);
        let f = normalize_pose(&moved, &template()).unwrap();
        assert_close(&f.points2d, &template_xy(), 1e-9);
    }

    #[test]
    fn recovers_scale_and_translation() {
        let moved = template().transformed(&Matrix3::identity(), 2.0, [10.0, -4.0, 7.0]);
        let f = normalize_pose(&moved, &template()).unwrap();
        assert_close(&f.points2d, &template_xy(), 1e-9);
    }

    #[test]
    fn mirrored_input_is_not_reflected_back() {
        let mut mirrored = template();
        for p in &mut mirrored.points {
            p[2] = -p[2];
        }
        let (_, tr) = normalize_pose_with_transform(&mirrored, &template()).unwrap();
        assert!((tr.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_fail_alignment() {
        let pts: Vec<Point3> = (0..NUM_POINTS).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect();
        let lm = LandmarkSet::new("line", pts).unwrap();
        let err = normalize_pose(&lm, &template()).unwrap_err();
        assert!(matches!(err, Error::Alignment { ref image_id, .. } if image_id == "line"), "{err}");
    }

    #[test]
    fn load_validates_entries() {
        let good = serde_json::to_value(template().points).unwrap();
        let mut short = template().points;
        short.pop();
        let json = serde_json::json!([
            {"image_id": "ok", "points": good},
            {"image_id": "short", "points": short},
            {"image_id": "nan", "points": good.as_array().unwrap().iter().enumerate().map(|(i, p)| {
                if i == 5 { serde_json::json!([null, 1.0, 2.0]) } else { p.clone() }
            }).collect::<Vec<_>>()},
        ]);
        let (sets, rej) = parse_landmarks(json.to_string().as_bytes(), "t").unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].image_id, "ok");
        assert_eq!(rej.len(), 2);
        assert_eq!(rej[0].image_id, "short");
        assert_eq!(rej[0].reason, "expected 68, got 67");
        assert_eq!(rej[1].image_id, "nan");
        assert!(parse_landmarks("{not json".as_bytes(), "t").is_err());
    }

    proptest! {
        #[test]
        fn alignment_is_similarity_invariant(
            yaw in -1.2f64..1.2, pitch in -0.8f64..0.8, roll in -3.0f64..3.0,
            scale in 0.05f64..50.0,
            tx in -100.0f64..100.0, ty in -100.0f64..100.0, tz in -100.0f64..100.0,
            jitter in proptest::collection::vec(-0.3f64..0.3, NUM_POINTS * 3),
        ) {
            let mut base = template();
            for (k, p) in base.points.iter_mut().enumerate() {
                for c in 0..3 {
                    p[c] += jitter[k * 3 + c];
                }
            }
            let reference = normalize_pose(&base, &template()).unwrap();
            let moved = base.transformed(&rotation_from_angles(yaw, pitch, roll), scale, [tx, ty, tz]);
            let f = normalize_pose(&moved, &template()).unwrap();
            let size = reference.bbox_diagonal();
            for (p, q) in f.points2d.iter().zip(&reference.points2d) {
                prop_assert!(distance2(p, q) <= 1e-6 * size);
            }
            prop_assert!((f.scale_ref - reference.scale_ref).abs() <= 1e-6 * reference.scale_ref);
        }
    }
}
