//! Canon guidelines and the six facial proportions measured from them.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::catalog::Style;
use crate::error::{Error, Result};
use crate::landmarks::{distance2, FrontalLandmarks, LandmarkSet, Point2};

pub const COMPONENTS: [&str; 6] = ["lh", "rh", "el", "e", "n", "lf"];

pub const LINE_NAMES: [&str; 8] = [
    "eyebrow",
    "top_eye",
    "bottom_eye",
    "nose_sides",
    "jaw",
    "center_nose",
    "left_face",
    "right_face",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point2,
    pub b: Point2,
}

impl Segment {
    pub fn slope_magnitude(&self) -> f64 {
        let dx = self.b[0] - self.a[0];
        let dy = self.b[1] - self.a[1];
        if dx == 0.0 {
            f64::INFINITY
        } else {
            (dy / dx).abs()
        }
    }

    /// Orthogonal projection of `p` onto the infinite line through the segment.
    pub fn project(&self, p: Point2) -> Point2 {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        let len2 = d[0] * d[0] + d[1] * d[1];
        if len2 == 0.0 {
            return self.a;
        }
        let t = ((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / len2;
        [self.a[0] + t * d[0], self.a[1] + t * d[1]]
    }

    fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.b).all(|c| c.is_finite())
    }
}

/// Guidelines L1..L8. L1–L5 run left to right (`a` left, `b` right); L6–L8
/// run top to bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineSet {
    pub image_id: String,
    pub lines: [Segment; 8],
    /// Bounding-box diagonal of the frontal landmarks.
    pub face_diagonal: f64,
}

impl GuidelineSet {
    /// Line by 1-based number, `line(1)` is L1.
    pub fn line(&self, number: usize) -> &Segment {
        &self.lines[number - 1]
    }

    /// Lines breaking the family rule: L1–L5 must have |slope| < 1, L6–L8 ≥ 1.
    pub fn family_violations(&self) -> Vec<usize> {
        (1..=8)
            .filter(|&k| {
                let horizontal = self.line(k).slope_magnitude() < 1.0;
                if k <= 5 {
                    !horizontal
                } else {
                    horizontal
                }
            })
            .collect()
    }
}

pub fn build_guidelines(fl: &FrontalLandmarks) -> Result<GuidelineSet> {
    if fl.points2d.len() != crate::landmarks::NUM_POINTS
        || fl.points2d.iter().flatten().any(|c| !c.is_finite())
    {
        return Err(Error::Validation(format!(
            "image {}: frontal landmarks must be 68 finite points",
            fl.image_id
        )));
    }
    let eyebrow = Segment {
        a: fl.mean_of(&[19, 21]),
        b: fl.mean_of(&[24, 26]),
    };
    let jaw = Segment {
        a: fl.point(7),
        b: fl.point(11),
    };
    let side = |anchor: usize| Segment {
        a: eyebrow.project(fl.point(anchor)),
        b: jaw.project(fl.point(anchor)),
    };
    let lines = [
        eyebrow,
        Segment {
            a: fl.mean_of(&[38, 39]),
            b: fl.mean_of(&[44, 45]),
        },
        Segment {
            a: fl.mean_of(&[41, 42]),
            b: fl.mean_of(&[47, 48]),
        },
        Segment {
            a: fl.point(32),
            b: fl.point(36),
        },
        jaw,
        Segment {
            a: fl.mean_of(&[22, 23]),
            b: fl.mean_of(&[28, 29, 30, 31]),
        },
        side(2),
        side(16),
    ];
    let g = GuidelineSet {
        image_id: fl.image_id.clone(),
        lines,
        face_diagonal: fl.bbox_diagonal(),
    };
    if !g.lines.iter().all(Segment::is_finite) {
        return Err(Error::DegenerateFace {
            image_id: fl.image_id.clone(),
            reason: "non-finite guideline".into(),
        });
    }
    Ok(g)
}

/// Six proportions normalized by the forehead width `LH + RH`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionVector {
    pub image_id: String,
    pub lh: f64,
    pub rh: f64,
    pub el: f64,
    pub e: f64,
    pub n: f64,
    pub lf: f64,
}

impl ProportionVector {
    pub fn from_array(image_id: impl Into<String>, v: [f64; 6]) -> Self {
        Self {
            image_id: image_id.into(),
            lh: v[0],
            rh: v[1],
            el: v[2],
            e: v[3],
            n: v[4],
            lf: v[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.lh, self.rh, self.el, self.e, self.n, self.lf]
    }
}

/// Raw (unnormalized) lengths LH, RH, EL, E, N, LF, all measured on the
/// right-hand endpoints of the horizontal lines.
pub fn raw_lengths(g: &GuidelineSet) -> [f64; 6] {
    let top = g.line(6).a;
    let right = |k: usize| g.line(k).b;
    [
        distance2(&g.line(1).a, &top),
        distance2(&top, &right(1)),
        distance2(&right(1), &right(2)),
        distance2(&right(2), &right(3)),
        distance2(&right(3), &right(4)),
        distance2(&right(4), &right(5)),
    ]
}

pub fn measure_proportions(g: &GuidelineSet) -> Result<ProportionVector> {
    let raw = raw_lengths(g);
    let width = raw[0] + raw[1];
    if !width.is_finite() || width <= 1e-9 * g.face_diagonal {
        return Err(Error::DegenerateFace {
            image_id: g.image_id.clone(),
            reason: format!("forehead width {width} is below tolerance"),
        });
    }
    // The larger half is divided, the smaller is its exact complement, so
    // lh + rh == 1.0 holds in floating point.
    let (lh, rh) = if raw[0] >= raw[1] {
        let lh = raw[0] / width;
        (lh, 1.0 - lh)
    } else {
        let rh = raw[1] / width;
        (1.0 - rh, rh)
    };
    Ok(ProportionVector {
        image_id: g.image_id.clone(),
        lh,
        rh,
        el: raw[2] / width,
        e: raw[3] / width,
        n: raw[4] / width,
        lf: raw[5] / width,
    })
}

/// Landmarks to proportions: alignment, projection, guidelines, measurement.
pub fn measure_landmarks(
    lm: &LandmarkSet,
    template: &LandmarkSet,
) -> Result<(GuidelineSet, ProportionVector)> {
    let frontal = crate::landmarks::normalize_pose(lm, template)?;
    let g = build_guidelines(&frontal)?;
    let violations = g.family_violations();
    if !violations.is_empty() {
        log::warn!(
            "image {}: guidelines {:?} break the horizontal/vertical family rule",
            g.image_id,
            violations
        );
    }
    let p = measure_proportions(&g)?;
    Ok((g, p))
}

// ---------------------------------------------------------------------------
// Canon baselines

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineName {
    TheoreticalTibetan,
    MeasuredTibetanModel,
}

impl BaselineName {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineName::TheoreticalTibetan => "theoretical_tibetan",
            BaselineName::MeasuredTibetanModel => "measured_tibetan_model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonBaseline {
    pub name: BaselineName,
    pub vector: ProportionVector,
}

/// Canon lengths 6, 6, 1, 1, 2, 4 over a width of 12, at three decimals.
pub const THEORETICAL_CANON: [f64; 6] = [0.500, 0.500, 0.083, 0.083, 0.167, 0.333];

pub fn theoretical_baseline() -> CanonBaseline {
    CanonBaseline {
        name: BaselineName::TheoreticalTibetan,
        vector: ProportionVector::from_array(BaselineName::TheoreticalTibetan.as_str(), THEORETICAL_CANON),
    }
}

/// Runs the measurement pipeline on the template itself.
pub fn measured_baseline(template: &LandmarkSet) -> Result<CanonBaseline> {
    let (_, mut p) = measure_landmarks(template, template)?;
    p.image_id = BaselineName::MeasuredTibetanModel.as_str().to_string();
    Ok(CanonBaseline {
        name: BaselineName::MeasuredTibetanModel,
        vector: p,
    })
}

const BUNDLED_BASELINES: &str = include_str!("../data/canon_baselines.json");

/// Both baselines as shipped with the crate.
pub fn bundled_baselines() -> Vec<CanonBaseline> {
    serde_json::from_str(BUNDLED_BASELINES).expect("bundled baselines parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub baseline: BaselineName,
    /// `p - baseline`, in component order lh, rh, el, e, n, lf.
    pub deltas: [f64; 6],
    pub l1: f64,
}

pub fn compare_to_canon(p: &ProportionVector, base: &CanonBaseline) -> DeviationReport {
    let (a, b) = (p.to_array(), base.vector.to_array());
    let deltas: [f64; 6] = std::array::from_fn(|k| a[k] - b[k]);
    DeviationReport {
        baseline: base.name,
        deltas,
        l1: deltas.iter().map(|d| d.abs()).sum(),
    }
}

// ---------------------------------------------------------------------------
// Per-style distributions

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub components: [ComponentSummary; 6],
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(values: &[f64]) -> ComponentSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    ComponentSummary {
        mean,
        std: var.sqrt(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[sorted.len() - 1],
    }
}

/// Summary statistics per style and component. Styles without vectors are
/// absent from the map. Summation order is fixed by sorting on image id.
pub fn aggregate_by_style(
    vectors: &[(Style, ProportionVector)],
) -> BTreeMap<Style, DistributionSummary> {
    let mut groups: BTreeMap<Style, Vec<&ProportionVector>> = BTreeMap::new();
    for (style, v) in vectors {
        groups.entry(*style).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(style, mut vs)| {
            vs.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            let components = std::array::from_fn(|k| {
                let col: Vec<f64> = vs.iter().map(|v| v.to_array()[k]).collect();
                summarize(&col)
            });
            (
                style,
                DistributionSummary {
                    count: vs.len(),
                    components,
                },
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// File formats

pub fn write_proportions_csv<W: Write>(vectors: &[ProportionVector], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    w.write_record(["image_id", "lh", "rh", "el", "e", "n", "lf"])
        .map_err(wrap)?;
    for v in vectors {
        let mut row = vec![v.image_id.clone()];
        row.extend(v.to_array().iter().map(|x| format!("{x:.6}")));
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush()
        .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
}

pub fn read_proportions_csv<R: Read>(reader: R, source: &str) -> Result<Vec<ProportionVector>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(format!("{source}:1"), e.to_string()))?
        .clone();
    let expected = ["image_id", "lh", "rh", "el", "e", "n", "lf"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            format!("{source}:1"),
            format!("expected header {}", expected.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let loc = format!("{source}:{}", i + 2);
        let rec = rec.map_err(|e| Error::parse(&loc, e.to_string()))?;
        let mut vals = [0.0; 6];
        for (k, slot) in vals.iter_mut().enumerate() {
            let s = rec.get(k + 1).unwrap_or("");
            *slot = s
                .trim()
                .parse()
                .map_err(|_| Error::parse(&loc, format!("bad value {s:?} for {}", COMPONENTS[k])))?;
        }
        out.push(ProportionVector::from_array(rec.get(0).unwrap_or("").to_string(), vals));
    }
    Ok(out)
}

#[derive(Serialize)]
struct OverlayEntry<'a> {
    image_id: &'a str,
    lines: BTreeMap<String, OverlayLine<'a>>,
}

#[derive(Serialize)]
struct OverlayLine<'a> {
    name: &'a str,
    a: Point2,
    b: Point2,
}

/// Guideline overlay export: per image, segments keyed `L1`..`L8`.
pub fn write_guidelines_json<W: Write>(sets: &[GuidelineSet], writer: W) -> Result<()> {
    let entries: Vec<OverlayEntry> = sets
        .iter()
        .map(|g| OverlayEntry {
            image_id: &g.image_id,
            lines: g
                .lines
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    (
                        format!("L{}", k + 1),
                        OverlayLine {
                            name: LINE_NAMES[k],
                            a: s.a,
                            b: s.b,
                        },
                    )
                })
                .collect(),
        })
        .collect();
    serde_json::to_writer_pretty(writer, &entries)
        .map_err(|e| Error::Validation(format!("json write failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::{normalize_pose, synthetic_frontal_template, NUM_POINTS};

    fn frontal_template() -> FrontalLandmarks {
        let t = synthetic_frontal_template();
        normalize_pose(&t, &t).unwrap()
    }

    fn frontal_from(points: &[[f64; 3]]) -> FrontalLandmarks {
        let points2d: Vec<Point2> = points.iter().map(|p| [p[0], p[1]]).collect();
        FrontalLandmarks {
            image_id: "x".into(),
            scale_ref: crate::landmarks::forehead_width(&points2d),
            points2d,
        }
    }

    #[test]
    fn canon_template_measures_to_theoretical_values() {
        let g = build_guidelines(&frontal_template()).unwrap();
        let p = measure_proportions(&g).unwrap();
        for (got, want) in p.to_array().iter().zip(THEORETICAL_CANON) {
            assert!((got - want).abs() <= 1e-3, "{got} vs {want}");
        }
        let raw = raw_lengths(&g);
        for (got, want) in raw.iter().zip([6.0, 6.0, 1.0, 1.0, 2.0, 4.0]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn symmetric_template_has_vertical_center_line() {
        let g = build_guidelines(&frontal_template()).unwrap();
        approx::assert_abs_diff_eq!(g.line(6).a[0], g.line(6).b[0], epsilon = 1e-12);
        assert!(g.family_violations().is_empty());
    }

    #[test]
    fn horizontal_lines_are_ordered_top_to_bottom() {
        let g = build_guidelines(&frontal_template()).unwrap();
        let ys: Vec<f64> = (1..=5).map(|k| (g.line(k).a[1] + g.line(k).b[1]) / 2.0).collect();
        assert!(ys.windows(2).all(|w| w[0] > w[1]), "{ys:?}");
    }

    #[test]
    fn guidelines_are_translation_equivariant() {
        let base = frontal_template();
        let mut moved = base.clone();
        for p in &mut moved.points2d {
            p[0] += 10.0;
            p[1] -= 4.0;
        }
        let (g0, g1) = (build_guidelines(&base).unwrap(), build_guidelines(&moved).unwrap());
        for (s0, s1) in g0.lines.iter().zip(&g1.lines) {
            for (p0, p1) in [(s0.a, s1.a), (s0.b, s1.b)] {
                assert!((p1[0] - p0[0] - 10.0).abs() < 1e-12);
                assert!((p1[1] - p0[1] + 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn side_lines_connect_eyebrow_and_jaw_through_anchor() {
        let g = build_guidelines(&frontal_template()).unwrap();
        let t = synthetic_frontal_template();
        // L1 and L5 are horizontal on the template, so the connectors drop
        // vertically through points 2 and 16.
        assert!((g.line(7).a[0] - t.point(2)[0]).abs() < 1e-12);
        assert!((g.line(8).b[0] - t.point(16)[0]).abs() < 1e-12);
        assert!((g.line(7).a[1] - g.line(1).a[1]).abs() < 1e-12);
        assert!((g.line(8).b[1] - g.line(5).b[1]).abs() < 1e-12);
    }

    #[test]
    fn lowering_the_nose_line_doubles_n_only() {
        let t = synthetic_frontal_template();
        let base = measure_proportions(&build_guidelines(&frontal_from(&t.points)).unwrap()).unwrap();
        // Brute-force construction: N = |(6,-2) - (4.8,y)| = 4 needs y = -2 - sqrt(16 - 1.44).
        let new_y = -2.0 - (16.0f64 - 1.44).sqrt();
        let mut pts = t.points.clone();
        let dy = new_y - pts[35][1];
        for k in [32usize, 36] {
            pts[k - 1][1] += dy;
        }
        // keep LF by moving the jaw anchors with the nose line
        for k in [7usize, 11] {
            pts[k - 1][1] += dy;
        }
        let p = measure_proportions(&build_guidelines(&frontal_from(&pts)).unwrap()).unwrap();
        assert!((p.n - 2.0 * base.n).abs() < 1e-12, "{} vs {}", p.n, base.n);
        assert_eq!(p.lh, base.lh);
        assert_eq!(p.rh, base.rh);
        assert!((p.lf - base.lf).abs() < 1e-12);
    }

    #[test]
    fn lh_plus_rh_is_exactly_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = synthetic_frontal_template();
        for _ in 0..2000 {
            let pts: Vec<[f64; 3]> = t
                .points
                .iter()
                .map(|p| {
                    [
                        p[0] * rng.random_range(0.5..2.0) + rng.random_range(-1.0..1.0),
                        p[1] + rng.random_range(-1.0..1.0),
                        p[2],
                    ]
                })
                .collect();
            let p = measure_proportions(&build_guidelines(&frontal_from(&pts)).unwrap()).unwrap();
            assert_eq!(p.lh + p.rh, 1.0);
            assert!(p.to_array().iter().all(|c| *c >= 0.0));
        }
    }

    #[test]
    fn collapsed_forehead_is_degenerate() {
        let mut pts = synthetic_frontal_template().points;
        for k in [19usize, 21, 22, 23, 24, 26] {
            pts[k - 1] = [0.0, 0.0, 0.0];
        }
        let err = measure_proportions(&build_guidelines(&frontal_from(&pts)).unwrap()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFace { .. }));
    }

    #[test]
    fn rejects_short_frontal_sets() {
        let mut f = frontal_template();
        f.points2d.truncate(NUM_POINTS - 1);
        assert!(build_guidelines(&f).is_err());
    }

    #[test]
    fn canon_comparison() {
        let theo = theoretical_baseline();
        let same = compare_to_canon(&theo.vector, &theo);
        assert_eq!(same.deltas, [0.0; 6]);
        assert_eq!(same.l1, 0.0);

        let mut bumped = theo.vector.clone();
        bumped.n += 0.01;
        let d = compare_to_canon(&bumped, &theo);
        assert!((d.deltas[4] - 0.01).abs() < 1e-15);
        assert!(d.deltas.iter().enumerate().all(|(k, v)| k == 4 || *v == 0.0));
        assert!((d.l1 - 0.01).abs() < 1e-15);

        let measured = measured_baseline(&synthetic_frontal_template()).unwrap();
        let d = compare_to_canon(&measured.vector, &theo);
        assert!(d.l1 > 0.0 && d.l1 < 6e-3, "{}", d.l1);
    }

    #[test]
    fn bundled_baselines_match_pipeline() {
        let shipped = bundled_baselines();
        assert_eq!(shipped.len(), 2);
        assert_eq!(shipped[0], theoretical_baseline());
        let measured = measured_baseline(&crate::landmarks::bundled_template()).unwrap();
        let d = compare_to_canon(&shipped[1].vector, &measured);
        assert_eq!(shipped[1].name, BaselineName::MeasuredTibetanModel);
        assert!(d.l1 < 1e-12, "{d:?}");
    }

    #[test]
    fn aggregation_statistics() {
        let v = |id: &str, n: f64| ProportionVector::from_array(id, [0.5, 0.5, 0.08, 0.08, n, 0.33]);
        let single = aggregate_by_style(&[(Style::China, v("a", 0.2))]);
        let s = &single[&Style::China];
        assert_eq!(s.count, 1);
        assert_eq!(s.components[4].mean, 0.2);
        assert_eq!(s.components[4].std, 0.0);
        assert!(!single.contains_key(&Style::Heian));

        let two = aggregate_by_style(&[(Style::Heian, v("a", 0.1)), (Style::Heian, v("b", 0.3))]);
        let s = &two[&Style::Heian];
        assert!((s.components[4].mean - 0.2).abs() < 1e-15);
        assert!((s.components[4].median - 0.2).abs() < 1e-15);
        assert!((s.components[4].q1 - 0.15).abs() < 1e-15);
    }

    #[test]
    fn larger_noses_raise_the_group_mean() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut cohort = Vec::new();
        for i in 0..200 {
            let (style, offset) = if i % 2 == 0 { (Style::China, 0.05) } else { (Style::Heian, 0.0) };
            let n = 0.167 + offset + rng.random_range(-0.02..0.02);
            cohort.push((style, ProportionVector::from_array(format!("i{i}"), [0.5, 0.5, 0.083, 0.083, n, 0.333])));
        }
        let agg = aggregate_by_style(&cohort);
        assert!(agg[&Style::China].components[4].mean > agg[&Style::Heian].components[4].mean);
    }

    #[test]
    fn proportions_csv_round_trip_at_six_decimals() {
        let v = vec![ProportionVector::from_array("img", [0.5, 0.5, 1.0 / 12.0, 1.0 / 12.0, 1.0 / 6.0, 1.0 / 3.0])];
        let mut buf = Vec::new();
        write_proportions_csv(&v, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "image_id,lh,rh,el,e,n,lf\nimg,0.500000,0.500000,0.083333,0.083333,0.166667,0.333333\n"
        );
        let back = read_proportions_csv(buf.as_slice(), "t").unwrap();
        assert!((back[0].n - 1.0 / 6.0).abs() < 1e-6);
    }
}
