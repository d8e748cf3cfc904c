//! Statue metadata: ingestion, validation and derivation of task labels.
//!
//! Samples are images, not statues. Every image of a statue inherits the
//! statue's labels.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} value {:?} (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(Style {
    China => "China",
    Heian => "Heian",
    Kamakura => "Kamakura",
});

string_enum!(StatueType {
    Bodhisattva => "Bodhisattva",
    Buddha => "Buddha",
});

string_enum!(BaseMaterial {
    Wood => "wood",
    WoodLacquer => "wood_lacquer",
    Iron => "iron",
    Brick => "brick",
});

string_enum!(ColorTexture {
    Pigment => "pigment",
    LacqueredFoil => "lacquered_foil",
    GoldLeaves => "gold_leaves",
    GoldPaint => "gold_paint",
    Plating => "plating",
    DryLacquerFinish => "dry_lacquer_finish",
    Lacquer => "lacquer",
});

string_enum!(StoneType {
    Limestone => "limestone",
    SandStone => "sand_stone",
    WhiteMarble => "white_marble",
    Marble => "marble",
});

string_enum!(WoodType {
    JapaneseCypress => "japanese_cypress",
    Katsura => "katsura",
    JapaneseTorreya => "japanese_torreya",
    CherryWood => "cherry_wood",
    Coniferous => "coniferous",
    CamphorTree => "camphor_tree",
});

string_enum!(ConstructionMethod {
    SeparatePieces => "separate_pieces",
    OnePieceCut => "one_piece_cut",
    OnePiece => "one_piece",
});

string_enum!(DateKind {
    ExactYear => "exact_year",
    YearRange => "year_range",
    Century => "century",
    Era => "era",
});

string_enum!(
    /// Height class of a statue.
    DimensionBucket {
        Small => "small",
        Medium => "medium",
        Big => "big",
    }
);

/// One piece of dating evidence, already resolved to the international calendar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateEvidence {
    pub kind: DateKind,
    pub start_year: i32,
    pub end_year: i32,
}

impl DateEvidence {
    pub fn new(kind: DateKind, start_year: i32, end_year: i32) -> Result<Self> {
        if end_year < start_year {
            return Err(Error::Validation(format!(
                "date end {end_year} precedes start {start_year}"
            )));
        }
        if kind == DateKind::ExactYear && start_year != end_year {
            return Err(Error::Validation(format!(
                "exact_year evidence must have start == end, got {start_year}..{end_year}"
            )));
        }
        Ok(Self {
            kind,
            start_year,
            end_year,
        })
    }

    pub fn exact(year: i32) -> Self {
        Self {
            kind: DateKind::ExactYear,
            start_year: year,
            end_year: year,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatueRecord {
    pub statue_id: String,
    pub style: Style,
    pub height_cm: Option<f64>,
    pub statue_type: Option<StatueType>,
    pub date_evidence: Vec<DateEvidence>,
    pub base_material: Option<BTreeSet<BaseMaterial>>,
    pub color_texture: Option<BTreeSet<ColorTexture>>,
    pub stone_type: Option<BTreeSet<StoneType>>,
    pub wood_type: Option<BTreeSet<WoodType>>,
    pub construction_method: Option<ConstructionMethod>,
    pub image_ids: Vec<String>,
}

impl StatueRecord {
    /// Minimal record with only the mandatory fields set.
    pub fn new(statue_id: impl Into<String>, style: Style, image_ids: Vec<String>) -> Self {
        Self {
            statue_id: statue_id.into(),
            style,
            height_cm: None,
            statue_type: None,
            date_evidence: Vec::new(),
            base_material: None,
            color_texture: None,
            stone_type: None,
            wood_type: None,
            construction_method: None,
            image_ids,
        }
    }

    pub fn dimension(&self) -> Option<DimensionBucket> {
        self.height_cm.and_then(|h| bucket_dimension(h).ok())
    }

    pub fn aligned_date(&self) -> Option<AlignedDate> {
        align_temporal(&self.date_evidence)
    }

    /// Checks the record-level invariants (not cross-record uniqueness).
    pub fn validate(&self) -> Result<()> {
        if self.statue_id.trim().is_empty() {
            return Err(Error::Validation("empty statue_id".into()));
        }
        if self.image_ids.is_empty() {
            return Err(Error::Validation(format!(
                "statue {} has no image_ids",
                self.statue_id
            )));
        }
        if self.image_ids.iter().any(|id| id.trim().is_empty()) {
            return Err(Error::Validation(format!(
                "statue {} has an empty image_id",
                self.statue_id
            )));
        }
        if let Some(h) = self.height_cm {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Validation(format!(
                    "statue {} has non-positive height {h}",
                    self.statue_id
                )));
            }
        }
        let empty_set = self.base_material.as_ref().is_some_and(BTreeSet::is_empty)
            || self.color_texture.as_ref().is_some_and(BTreeSet::is_empty)
            || self.stone_type.as_ref().is_some_and(BTreeSet::is_empty)
            || self.wood_type.as_ref().is_some_and(BTreeSet::is_empty);
        if empty_set {
            return Err(Error::Validation(format!(
                "statue {} has an empty material set",
                self.statue_id
            )));
        }
        for d in &self.date_evidence {
            DateEvidence::new(d.kind, d.start_year, d.end_year)?;
        }
        Ok(())
    }
}

/// Height buckets over half-open intervals `[0,100)`, `[100,250)`, `[250,∞)`.
pub fn bucket_dimension(height_cm: f64) -> Result<DimensionBucket> {
    if !(height_cm.is_finite() && height_cm > 0.0) {
        return Err(Error::Domain(format!(
            "height must be a positive finite number of centimeters, got {height_cm}"
        )));
    }
    Ok(if height_cm < 100.0 {
        DimensionBucket::Small
    } else if height_cm < 250.0 {
        DimensionBucket::Medium
    } else {
        DimensionBucket::Big
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedDate {
    pub year: i32,
    pub century: i32,
}

/// Century of a year, `ceil(year / 100)`; year 800 is in the 8th century.
pub fn century_of(year: i32) -> i32 {
    -((-year).div_euclid(100))
}

/// Intersects all evidence intervals and returns the lower median year of the
/// intersection with its century. Empty evidence or an empty intersection
/// yields `None`.
pub fn align_temporal(evidence: &[DateEvidence]) -> Option<AlignedDate> {
    let lo = evidence.iter().map(|d| d.start_year).max()?;
    let hi = evidence.iter().map(|d| d.end_year).min()?;
    if lo > hi {
        return None;
    }
    let year = (lo + hi).div_euclid(2);
    Some(AlignedDate {
        year,
        century: century_of(year),
    })
}

/// Maps each image id to the statue it depicts.
pub fn image_to_statue(records: &[StatueRecord]) -> BTreeMap<String, String> {
    records
        .iter()
        .flat_map(|r| r.image_ids.iter().map(|i| (i.clone(), r.statue_id.clone())))
        .collect()
}

// ---------------------------------------------------------------------------
// Task labelings

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "T1_style")]
    T1Style,
    #[serde(rename = "T2_dimensions")]
    T2Dimensions,
    #[serde(rename = "T3_century")]
    T3Century,
    #[serde(rename = "T4_statue_type")]
    T4StatueType,
    #[serde(rename = "T5_1_base_material")]
    T5_1BaseMaterial,
    #[serde(rename = "T5_2_color_texture")]
    T5_2ColorTexture,
    #[serde(rename = "T5_3_stone_type")]
    T5_3StoneType,
    #[serde(rename = "T5_4_wood_type")]
    T5_4WoodType,
    #[serde(rename = "T5_5_construction")]
    T5_5Construction,
}

impl TaskId {
    pub const ALL: [TaskId; 9] = [
        TaskId::T1Style,
        TaskId::T2Dimensions,
        TaskId::T3Century,
        TaskId::T4StatueType,
        TaskId::T5_1BaseMaterial,
        TaskId::T5_2ColorTexture,
        TaskId::T5_3StoneType,
        TaskId::T5_4WoodType,
        TaskId::T5_5Construction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::T1Style => "T1_style",
            TaskId::T2Dimensions => "T2_dimensions",
            TaskId::T3Century => "T3_century",
            TaskId::T4StatueType => "T4_statue_type",
            TaskId::T5_1BaseMaterial => "T5_1_base_material",
            TaskId::T5_2ColorTexture => "T5_2_color_texture",
            TaskId::T5_3StoneType => "T5_3_stone_type",
            TaskId::T5_4WoodType => "T5_4_wood_type",
            TaskId::T5_5Construction => "T5_5_construction",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            TaskId::T1Style => "T1",
            TaskId::T2Dimensions => "T2",
            TaskId::T3Century => "T3",
            TaskId::T4StatueType => "T4",
            TaskId::T5_1BaseMaterial => "T5.1",
            TaskId::T5_2ColorTexture => "T5.2",
            TaskId::T5_3StoneType => "T5.3",
            TaskId::T5_4WoodType => "T5.4",
            TaskId::T5_5Construction => "T5.5",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            TaskId::T1Style => "Style",
            TaskId::T2Dimensions => "Dimensions",
            TaskId::T3Century => "Century",
            TaskId::T4StatueType => "Statue type",
            TaskId::T5_1BaseMaterial => "Base material",
            TaskId::T5_2ColorTexture => "Color/texture",
            TaskId::T5_3StoneType => "Type of stone",
            TaskId::T5_4WoodType => "Type of wood",
            TaskId::T5_5Construction => "Construction",
        }
    }

    pub fn mode(self) -> LabelMode {
        match self {
            TaskId::T5_1BaseMaterial
            | TaskId::T5_2ColorTexture
            | TaskId::T5_3StoneType
            | TaskId::T5_4WoodType => LabelMode::MultiLabel,
            _ => LabelMode::SingleLabel,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        TaskId::ALL
            .iter()
            .copied()
            .find(|t| t.as_str().eq_ignore_ascii_case(s) || t.short().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    SingleLabel,
    MultiLabel,
}

/// Labels of one task for every eligible sample (image id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLabeling {
    pub task: TaskId,
    pub mode: LabelMode,
    pub labels: BTreeMap<String, BTreeSet<String>>,
}

impl TaskLabeling {
    /// Distinct labels in a stable order; numeric labels sort numerically.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.labels.values().flatten().collect();
        let mut classes: Vec<String> = set.into_iter().cloned().collect();
        classes.sort_by(|a, b| compare_labels(a, b));
        classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn compare_labels(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

fn set_labels<T: fmt::Display>(set: &Option<BTreeSet<T>>) -> Option<BTreeSet<String>> {
    set.as_ref()
        .filter(|s| !s.is_empty())
        .map(|s| s.iter().map(ToString::to_string).collect())
}

fn single<T: fmt::Display>(v: Option<T>) -> Option<BTreeSet<String>> {
    v.map(|v| BTreeSet::from([v.to_string()]))
}

/// The labels a statue carries for a task, or `None` when it is not eligible.
pub fn statue_labels(record: &StatueRecord, task: TaskId) -> Option<BTreeSet<String>> {
    match task {
        TaskId::T1Style => single(Some(record.style)),
        TaskId::T2Dimensions => single(record.dimension()),
        TaskId::T3Century => single(record.aligned_date().map(|d| d.century)),
        TaskId::T4StatueType => single(record.statue_type),
        TaskId::T5_1BaseMaterial => set_labels(&record.base_material),
        TaskId::T5_2ColorTexture => set_labels(&record.color_texture),
        TaskId::T5_3StoneType => set_labels(&record.stone_type),
        TaskId::T5_4WoodType => set_labels(&record.wood_type),
        TaskId::T5_5Construction => single(record.construction_method),
    }
}

pub fn build_labeling(records: &[StatueRecord], task: TaskId) -> TaskLabeling {
    let mut labels = BTreeMap::new();
    for r in records {
        if let Some(set) = statue_labels(r, task) {
            for image in &r.image_ids {
                labels.insert(image.clone(), set.clone());
            }
        }
    }
    TaskLabeling {
        task,
        mode: task.mode(),
        labels,
    }
}

/// One labeling per task, T1 through T5.5.
pub fn build_labelings(records: &[StatueRecord]) -> Vec<TaskLabeling> {
    TaskId::ALL
        .iter()
        .map(|&t| build_labeling(records, t))
        .collect()
}

// ---------------------------------------------------------------------------
// Ingestion

pub const CSV_HEADER: [&str; 13] = [
    "statue_id",
    "style",
    "height_cm",
    "statue_type",
    "date_kind",
    "date_start",
    "date_end",
    "base_material",
    "color_texture",
    "stone_type",
    "wood_type",
    "construction_method",
    "image_ids",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogFormat {
    Csv,
    Json,
}

impl CatalogFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

impl FromStr for CatalogFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown catalog format {other:?}")),
        }
    }
}

/// A row (CSV data line, or JSON object index, both 1-based) that failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub row: usize,
    pub field: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct CatalogIngest {
    pub records: Vec<StatueRecord>,
    pub rejections: Vec<Rejection>,
}

pub fn ingest_catalog(path: &Path, format: CatalogFormat) -> Result<CatalogIngest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    match format {
        CatalogFormat::Csv => read_catalog_csv(file, &source),
        CatalogFormat::Json => read_catalog_json(file, &source),
    }
}

#[derive(Debug, Default)]
struct RawDate {
    row: usize,
    kind: String,
    start: String,
    end: String,
}

/// Untyped statue, shared by the CSV and JSON readers before validation.
#[derive(Debug, Default)]
struct RawStatue {
    row: usize,
    statue_id: String,
    style: String,
    height_cm: String,
    statue_type: String,
    dates: Vec<RawDate>,
    base_material: Option<Vec<String>>,
    color_texture: Option<Vec<String>>,
    stone_type: Option<Vec<String>>,
    wood_type: Option<Vec<String>>,
    construction_method: String,
    image_ids: Vec<String>,
}

struct Validator {
    row: usize,
    rejections: Vec<Rejection>,
}

impl Validator {
    fn reject(&mut self, field: &str, reason: impl Into<String>) {
        self.rejections.push(Rejection {
            row: self.row,
            field: field.to_string(),
            reason: reason.into(),
        });
    }

    fn optional<T: FromStr<Err = String>>(&mut self, field: &str, value: &str) -> Option<T> {
        let value = value.trim();
        if value.is_empty() {
            return None;
        }
        match value.parse() {
            Ok(v) => Some(v),
            Err(e) => {
                self.reject(field, e);
                None
            }
        }
    }

    fn set<T: FromStr<Err = String> + Ord>(
        &mut self,
        field: &str,
        values: &Option<Vec<String>>,
    ) -> Option<BTreeSet<T>> {
        let values = values.as_ref()?;
        let mut out = BTreeSet::new();
        let mut invalid = false;
        for v in values {
            if v.trim().is_empty() {
                continue;
            }
            match v.parse() {
                Ok(x) => {
                    out.insert(x);
                }
                Err(e) => {
                    invalid = true;
                    self.reject(field, e);
                }
            }
        }
        if out.is_empty() {
            if !invalid {
                self.reject(field, "set-valued field present but empty");
            }
            return None;
        }
        Some(out)
    }
}

fn validate_raw(raw: &RawStatue) -> std::result::Result<StatueRecord, Vec<Rejection>> {
    let mut v = Validator {
        row: raw.row,
        rejections: Vec::new(),
    };
    let statue_id = raw.statue_id.trim().to_string();
    if statue_id.is_empty() {
        v.reject("statue_id", "empty statue_id");
    }
    let style = match raw.style.trim() {
        "" => {
            v.reject("style", "missing style");
            None
        }
        s => match s.parse::<Style>() {
            Ok(s) => Some(s),
            Err(e) => {
                v.reject("style", e);
                None
            }
        },
    };
    let height_cm = match raw.height_cm.trim() {
        "" => None,
        s => match s.parse::<f64>() {
            Ok(h) if h.is_finite() && h > 0.0 => Some(h),
            Ok(h) => {
                v.reject("height_cm", format!("height must be positive, got {h}"));
                None
            }
            Err(e) => {
                v.reject("height_cm", format!("invalid number {s:?}: {e}"));
                None
            }
        },
    };
    let statue_type = v.optional::<StatueType>("statue_type", &raw.statue_type);
    let mut date_evidence = Vec::new();
    for d in &raw.dates {
        let (kind, start, end) = (d.kind.trim(), d.start.trim(), d.end.trim());
        if kind.is_empty() && start.is_empty() && end.is_empty() {
            continue;
        }
        let row = v.row;
        v.row = d.row;
        let kind = match kind.parse::<DateKind>() {
            Ok(k) => Some(k),
            Err(e) => {
                v.reject("date_kind", e);
                None
            }
        };
        let mut year = |field: &str, s: &str| match s.parse::<i32>() {
            Ok(y) => Some(y),
            Err(_) => {
                v.reject(field, format!("invalid year {s:?}"));
                None
            }
        };
        let start = year("date_start", start);
        let end = year("date_end", end);
        if let (Some(kind), Some(start), Some(end)) = (kind, start, end) {
            match DateEvidence::new(kind, start, end) {
                Ok(d) => date_evidence.push(d),
                Err(e) => v.reject("date_end", e.to_string()),
            }
        }
        v.row = row;
    }
    let base_material = v.set::<BaseMaterial>("base_material", &raw.base_material);
    let color_texture = v.set::<ColorTexture>("color_texture", &raw.color_texture);
    let stone_type = v.set::<StoneType>("stone_type", &raw.stone_type);
    let wood_type = v.set::<WoodType>("wood_type", &raw.wood_type);
    let construction_method =
        v.optional::<ConstructionMethod>("construction_method", &raw.construction_method);
    let image_ids: Vec<String> = raw
        .image_ids
        .iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if image_ids.is_empty() {
        v.reject("image_ids", "statue has no image ids");
    }
    let mut seen = BTreeSet::new();
    for id in &image_ids {
        if !seen.insert(id) {
            v.reject("image_ids", format!("image id {id} listed twice"));
        }
    }
    match style {
        Some(style) if v.rejections.is_empty() => Ok(StatueRecord {
            statue_id,
            style,
            height_cm,
            statue_type,
            date_evidence,
            base_material,
            color_texture,
            stone_type,
            wood_type,
            construction_method,
            image_ids,
        }),
        _ => Err(v.rejections),
    }
}

/// Validates raw statues, collects per-row rejections and enforces global
/// uniqueness of statue ids and image ids.
fn finish(raws: Vec<RawStatue>) -> Result<CatalogIngest> {
    let mut seen_statues: HashMap<String, usize> = HashMap::new();
    for raw in &raws {
        let id = raw.statue_id.trim();
        if id.is_empty() {
            continue;
        }
        if let Some(first) = seen_statues.insert(id.to_string(), raw.row) {
            return Err(Error::Validation(format!(
                "duplicate statue_id {id} (rows {first} and {})",
                raw.row
            )));
        }
    }
    let mut out = CatalogIngest::default();
    let mut image_owner: HashMap<String, String> = HashMap::new();
    for raw in &raws {
        for image in raw.image_ids.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
            let statue = raw.statue_id.trim();
            if let Some(other) = image_owner.get(image) {
                if other != statue {
                    return Err(Error::Validation(format!(
                        "image_id {image} is shared by statues {other} and {statue}"
                    )));
                }
            } else {
                image_owner.insert(image.to_string(), statue.to_string());
            }
        }
        match validate_raw(raw) {
            Ok(rec) => out.records.push(rec),
            Err(rej) => out.rejections.extend(rej),
        }
    }
    Ok(out)
}

fn split_set(s: &str) -> Option<Vec<String>> {
    let s = s.trim();
    if s.is_empty() {
        None
    } else {
        Some(s.split('|').map(|t| t.trim().to_string()).collect())
    }
}

/// Reads the catalog CSV. Rows sharing a `statue_id` must be contiguous; the
/// continuation rows contribute further date evidence and may leave the other
/// fields empty or repeat them verbatim.
pub fn read_catalog_csv<R: Read>(reader: R, source: &str) -> Result<CatalogIngest> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(format!("{source}:1"), e.to_string()))?
        .clone();
    let mut index = [0usize; CSV_HEADER.len()];
    for (slot, name) in index.iter_mut().zip(CSV_HEADER) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::parse(format!("{source}:1"), format!("missing column {name:?}"))
        })?;
    }

    let mut raws: Vec<RawStatue> = Vec::new();
    let mut closed: BTreeSet<String> = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(format!("{source}:{line}"), e.to_string()))?;
        let field = |k: usize| rec.get(index[k]).unwrap_or("").to_string();
        let statue_id = field(0);
        let date = RawDate {
            row: line,
            kind: field(4),
            start: field(5),
            end: field(6),
        };
        if let Some(cur) = raws.last_mut().filter(|r| r.statue_id == statue_id) {
            let conflicts = [
                ("style", &cur.style, field(1)),
                ("height_cm", &cur.height_cm, field(2)),
                ("statue_type", &cur.statue_type, field(3)),
                ("construction_method", &cur.construction_method, field(11)),
                ("image_ids", &cur.image_ids.join("|"), field(12)),
            ];
            for (name, first, this) in conflicts {
                if !this.is_empty() && this != *first {
                    return Err(Error::parse(
                        format!("{source}:{line}"),
                        format!(
                            "field {name} of statue {statue_id} conflicts with its first row ({first:?} vs {this:?})"
                        ),
                    ));
                }
            }
            cur.dates.push(date);
            continue;
        }
        if let Some(prev) = raws.last() {
            closed.insert(prev.statue_id.clone());
        }
        if closed.contains(&statue_id) {
            return Err(Error::Validation(format!(
                "duplicate statue_id {statue_id} at line {line} (rows of a statue must be contiguous)"
            )));
        }
        raws.push(RawStatue {
            row: line,
            statue_id: statue_id.clone(),
            style: field(1),
            height_cm: field(2),
            statue_type: field(3),
            dates: vec![date],
            base_material: split_set(&field(7)),
            color_texture: split_set(&field(8)),
            stone_type: split_set(&field(9)),
            wood_type: split_set(&field(10)),
            construction_method: field(11),
            image_ids: split_set(&field(12)).unwrap_or_default(),
        });
    }
    finish(raws)
}

fn json_scalar(obj: &Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(format!("field {key} must be a string or number, got {other}")),
    }
}

fn json_list(obj: &Map<String, Value>, key: &str) -> std::result::Result<Option<Vec<String>>, String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.clone()),
                other => Err(format!("field {key} must contain strings, got {other}")),
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Some),
        Some(other) => Err(format!("field {key} must be an array, got {other}")),
    }
}

/// Reads the JSON mirror: an array of statue objects with the CSV field names,
/// set-valued fields as string arrays and dates under `date_evidence` as
/// objects with `date_kind`, `date_start`, `date_end`.
pub fn read_catalog_json<R: Read>(reader: R, source: &str) -> Result<CatalogIngest> {
    let value: Value = serde_json::from_reader(reader)
        .map_err(|e| Error::parse(format!("{source}:{}:{}", e.line(), e.column()), e.to_string()))?;
    let Value::Array(items) = value else {
        return Err(Error::parse(source, "expected a JSON array of statues"));
    };
    let mut raws = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let row = i + 1;
        let loc = format!("{source}[{row}]");
        let obj = item
            .as_object()
            .ok_or_else(|| Error::parse(&loc, "expected an object"))?;
        let p = |r: std::result::Result<String, String>| r.map_err(|m| Error::parse(&loc, m));
        let l = |r: std::result::Result<Option<Vec<String>>, String>| {
            r.map_err(|m| Error::parse(&loc, m))
        };
        let mut dates = Vec::new();
        match obj.get("date_evidence") {
            None | Some(Value::Null) => {}
            Some(Value::Array(ds)) => {
                for d in ds {
                    let d = d
                        .as_object()
                        .ok_or_else(|| Error::parse(&loc, "date_evidence entries must be objects"))?;
                    dates.push(RawDate {
                        row,
                        kind: p(json_scalar(d, "date_kind"))?,
                        start: p(json_scalar(d, "date_start"))?,
                        end: p(json_scalar(d, "date_end"))?,
                    });
                }
            }
            Some(_) => return Err(Error::parse(&loc, "date_evidence must be an array")),
        }
        raws.push(RawStatue {
            row,
            statue_id: p(json_scalar(obj, "statue_id"))?,
            style: p(json_scalar(obj, "style"))?,
            height_cm: p(json_scalar(obj, "height_cm"))?,
            statue_type: p(json_scalar(obj, "statue_type"))?,
            dates,
            base_material: l(json_list(obj, "base_material"))?,
            color_texture: l(json_list(obj, "color_texture"))?,
            stone_type: l(json_list(obj, "stone_type"))?,
            wood_type: l(json_list(obj, "wood_type"))?,
            construction_method: p(json_scalar(obj, "construction_method"))?,
            image_ids: l(json_list(obj, "image_ids"))?.unwrap_or_default(),
        });
    }
    finish(raws)
}

fn join_set<T: fmt::Display>(set: &Option<BTreeSet<T>>) -> String {
    set.as_ref()
        .map(|s| s.iter().map(ToString::to_string).collect::<Vec<_>>().join("|"))
        .unwrap_or_default()
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes records in the catalog CSV layout, one row per date evidence
/// (at least one row per statue).
pub fn write_catalog_csv<W: Write>(records: &[StatueRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(wrap)?;
    for r in records {
        let base = [
            r.statue_id.clone(),
            r.style.to_string(),
            opt(&r.height_cm),
            opt(&r.statue_type),
        ];
        let tail = [
            join_set(&r.base_material),
            join_set(&r.color_texture),
            join_set(&r.stone_type),
            join_set(&r.wood_type),
            opt(&r.construction_method),
            r.image_ids.join("|"),
        ];
        let dates: Vec<[String; 3]> = if r.date_evidence.is_empty() {
            vec![Default::default()]
        } else {
            r.date_evidence
                .iter()
                .map(|d| {
                    [
                        d.kind.to_string(),
                        d.start_year.to_string(),
                        d.end_year.to_string(),
                    ]
                })
                .collect()
        };
        for d in dates {
            let row: Vec<&str> = base
                .iter()
                .chain(d.iter())
                .chain(tail.iter())
                .map(String::as_str)
                .collect();
            w.write_record(row).map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::Validation(format!("csv flush failed: {e}")))?;
    Ok(())
}

#[derive(Serialize)]
struct JsonDate {
    date_kind: DateKind,
    date_start: i32,
    date_end: i32,
}

#[derive(Serialize)]
struct JsonStatue<'a> {
    statue_id: &'a str,
    style: Style,
    height_cm: Option<f64>,
    statue_type: Option<StatueType>,
    date_evidence: Vec<JsonDate>,
    base_material: &'a Option<BTreeSet<BaseMaterial>>,
    color_texture: &'a Option<BTreeSet<ColorTexture>>,
    stone_type: &'a Option<BTreeSet<StoneType>>,
    wood_type: &'a Option<BTreeSet<WoodType>>,
    construction_method: Option<ConstructionMethod>,
    image_ids: &'a [String],
}

pub fn write_catalog_json<W: Write>(records: &[StatueRecord], writer: W) -> Result<()> {
    let items: Vec<JsonStatue> = records
        .iter()
        .map(|r| JsonStatue {
            statue_id: &r.statue_id,
            style: r.style,
            height_cm: r.height_cm,
            statue_type: r.statue_type,
            date_evidence: r
                .date_evidence
                .iter()
                .map(|d| JsonDate {
                    date_kind: d.kind,
                    date_start: d.start_year,
                    date_end: d.end_year,
                })
                .collect(),
            base_material: &r.base_material,
            color_texture: &r.color_texture,
            stone_type: &r.stone_type,
            wood_type: &r.wood_type,
            construction_method: r.construction_method,
            image_ids: &r.image_ids,
        })
        .collect();
    serde_json::to_writer_pretty(writer, &items)
        .map_err(|e| Error::Validation(format!("json write failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "statue_id,style,height_cm,statue_type,date_kind,date_start,date_end,base_material,color_texture,stone_type,wood_type,construction_method,image_ids\n";

    fn csv(body: &str) -> Result<CatalogIngest> {
        read_catalog_csv(format!("{HEADER}{body}").as_bytes(), "test.csv")
    }

    #[test]
    fn height_is_parsed_and_bucketed() {
        let out = csv("s1,Kamakura,312,Buddha,,,,,,,,,a|b\n").unwrap();
        assert!(out.rejections.is_empty());
        let r = &out.records[0];
        assert_eq!(r.height_cm, Some(312.0));
        assert_eq!(r.dimension(), Some(DimensionBucket::Big));
        assert_eq!(r.image_ids, vec!["a", "b"]);
    }

    #[test]
    fn empty_optional_fields_are_absent() {
        let out = csv("s1,China,,,,,,,,,,,a\n").unwrap();
        let r = &out.records[0];
        assert_eq!(r.height_cm, None);
        assert_eq!(r.statue_type, None);
        assert!(r.date_evidence.is_empty());
        assert!(r.base_material.is_none() && r.color_texture.is_none());
        assert!(r.stone_type.is_none() && r.wood_type.is_none());
        assert!(r.construction_method.is_none());
    }

    #[test]
    fn shared_image_id_names_both_statues() {
        let err = csv("s1,China,,,,,,,,,,,a|x\ns2,Heian,,,,,,,,,,,x\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s1") && msg.contains("s2"), "{msg}");
    }

    #[test]
    fn non_contiguous_statue_rows_are_duplicates() {
        let err = csv("s1,China,,,,,,,,,,,a\ns2,Heian,,,,,,,,,,,b\ns1,China,,,,,,,,,,,a\n")
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
        let err = read_catalog_json(
            r#"[{"statue_id":"s1","style":"China","image_ids":["a"]},
                {"statue_id":"s1","style":"China","image_ids":["b"]}]"#
                .as_bytes(),
            "t.json",
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate statue_id s1"));
    }

    #[test]
    fn multiple_date_rows_accumulate() {
        let out = csv(
            "s1,Heian,80,Buddha,year_range,700,800,wood|wood_lacquer,,,,one_piece,a\n\
             s1,,,,century,701,800,,,,,,\n",
        )
        .unwrap();
        let r = &out.records[0];
        assert_eq!(r.date_evidence.len(), 2);
        assert_eq!(r.aligned_date(), Some(AlignedDate { year: 750, century: 8 }));
        assert_eq!(r.base_material.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn invalid_rows_go_to_rejection_report() {
        let out = csv(
            "s1,China,-3,,,,,,,,,,a\n\
             s2,Tang,,,,,,,,,,,b\n\
             s3,Heian,,,exact_year,1200,1201,,,,,,c\n\
             s4,Heian,,,,,,marble,,,,,d\n\
             s5,Kamakura,120,,,,,,,,,,\n\
             s6,Kamakura,120,,,,,,,,,,e\n",
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].statue_id, "s6");
        let fields: Vec<&str> = out.rejections.iter().map(|r| r.field.as_str()).collect();
        assert_eq!(
            fields,
            vec!["height_cm", "style", "date_end", "base_material", "image_ids"]
        );
        assert_eq!(out.rejections[0].row, 2);
    }

    #[test]
    fn malformed_header_is_a_parse_error() {
        let err = read_catalog_csv("statue_id,style\ns1,China\n".as_bytes(), "x.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn bucket_examples() {
        assert_eq!(bucket_dimension(50.0).unwrap(), DimensionBucket::Small);
        assert_eq!(bucket_dimension(100.0).unwrap(), DimensionBucket::Medium);
        assert_eq!(bucket_dimension(250.0).unwrap(), DimensionBucket::Big);
        assert!(bucket_dimension(0.0).is_err());
        assert!(bucket_dimension(-1.0).is_err());
        assert!(bucket_dimension(f64::NAN).is_err());
    }

    #[test]
    fn bucket_matches_interval_oracle_on_grid() {
        // Oracle: membership in the half-open intervals, checked independently.
        let mut seen = BTreeSet::new();
        for i in 1..4000 {
            let h = i as f64 * 0.1;
            let expected = if (0.0..100.0).contains(&h) {
                DimensionBucket::Small
            } else if (100.0..250.0).contains(&h) {
                DimensionBucket::Medium
            } else {
                DimensionBucket::Big
            };
            let got = bucket_dimension(h).unwrap();
            assert_eq!(got, expected, "h = {h}");
            seen.insert(got);
        }
        assert_eq!(seen.len(), 3);
    }

    /// Brute force: enumerate every year, keep those inside all intervals.
    fn brute_align(ev: &[DateEvidence]) -> Option<(i32, i32)> {
        if ev.is_empty() {
            return None;
        }
        let years: Vec<i32> = (-500..2500)
            .filter(|y| ev.iter().all(|d| d.start_year <= *y && *y <= d.end_year))
            .collect();
        if years.is_empty() {
            return None;
        }
        // lower median of the sorted year list
        let y = years[(years.len() - 1) / 2];
        Some((y, (y as f64 / 100.0).ceil() as i32))
    }

    #[test]
    fn align_examples() {
        let ev = [
            DateEvidence::new(DateKind::YearRange, 700, 800).unwrap(),
            DateEvidence::new(DateKind::Century, 701, 800).unwrap(),
        ];
        assert_eq!(brute_align(&ev), Some((750, 8)));
        assert_eq!(align_temporal(&ev), Some(AlignedDate { year: 750, century: 8 }));
        assert_eq!(
            align_temporal(&[DateEvidence::exact(1203)]),
            Some(AlignedDate { year: 1203, century: 13 })
        );
        let disjoint = [
            DateEvidence::new(DateKind::YearRange, 700, 750).unwrap(),
            DateEvidence::new(DateKind::YearRange, 800, 850).unwrap(),
        ];
        assert_eq!(align_temporal(&disjoint), None);
        assert_eq!(align_temporal(&[]), None);
        assert_eq!(century_of(800), 8);
        assert_eq!(century_of(801), 9);
        assert_eq!(century_of(1), 1);
    }

    #[test]
    fn labelings_follow_eligibility_rules() {
        let mut a = StatueRecord::new("s1", Style::Heian, vec!["i1".into(), "i2".into()]);
        a.construction_method = Some(ConstructionMethod::OnePiece);
        a.base_material = Some(BTreeSet::from([BaseMaterial::Wood, BaseMaterial::WoodLacquer]));
        let mut b = StatueRecord::new("s2", Style::China, vec!["i3".into()]);
        b.date_evidence = vec![DateEvidence::exact(1203)];
        let labelings = build_labelings(&[a, b]);
        assert_eq!(labelings.len(), 9);
        let get = |t: TaskId| labelings.iter().find(|l| l.task == t).unwrap();

        let t55 = get(TaskId::T5_5Construction);
        assert_eq!(t55.mode, LabelMode::SingleLabel);
        assert_eq!(t55.labels["i1"], BTreeSet::from(["one_piece".to_string()]));
        assert!(!t55.labels.contains_key("i3"));

        let t51 = get(TaskId::T5_1BaseMaterial);
        assert_eq!(t51.mode, LabelMode::MultiLabel);
        assert_eq!(t51.labels["i2"].len(), 2);

        let t3 = get(TaskId::T3Century);
        assert!(!t3.labels.contains_key("i1"));
        assert_eq!(t3.labels["i3"], BTreeSet::from(["13".to_string()]));

        for l in &labelings {
            let multi = matches!(
                l.task,
                TaskId::T5_1BaseMaterial
                    | TaskId::T5_2ColorTexture
                    | TaskId::T5_3StoneType
                    | TaskId::T5_4WoodType
            );
            assert_eq!(l.mode == LabelMode::MultiLabel, multi);
            if l.mode == LabelMode::SingleLabel {
                assert!(l.labels.values().all(|s| s.len() == 1));
            }
        }
        assert_eq!(get(TaskId::T1Style).labels.len(), 3);
    }

    #[test]
    fn century_classes_sort_numerically() {
        let mut recs = Vec::new();
        for (i, y) in [1203, 850, 999].iter().enumerate() {
            let mut r = StatueRecord::new(format!("s{i}"), Style::Kamakura, vec![format!("i{i}")]);
            r.date_evidence = vec![DateEvidence::exact(*y)];
            recs.push(r);
        }
        let l = build_labeling(&recs, TaskId::T3Century);
        assert_eq!(l.classes(), vec!["9", "10", "13"]);
    }

    fn arb_record(idx: usize) -> impl Strategy<Value = StatueRecord> {
        (
            0usize..3,
            proptest::option::of(1.0f64..1000.0),
            proptest::option::of(0usize..2),
            proptest::collection::vec((0usize..4, 500i32..1400, 0i32..200), 0..3),
            proptest::option::of(proptest::collection::btree_set(0usize..4, 1..3)),
            proptest::option::of(proptest::collection::btree_set(0usize..6, 1..3)),
            proptest::option::of(0usize..3),
            1usize..4,
        )
            .prop_map(move |(style, h, st, dates, bm, wt, cm, n_img)| {
                let mut r = StatueRecord::new(
                    format!("statue{idx}"),
                    Style::ALL[style],
                    (0..n_img).map(|k| format!("img{idx}_{k}")).collect(),
                );
                r.height_cm = h;
                r.statue_type = st.map(|i| StatueType::ALL[i]);
                r.date_evidence = dates
                    .into_iter()
                    .map(|(k, s, len)| {
                        let kind = DateKind::ALL[k];
                        let end = if kind == DateKind::ExactYear { s } else { s + len };
                        DateEvidence::new(kind, s, end).unwrap()
                    })
                    .collect();
                r.base_material = bm.map(|s| s.into_iter().map(|i| BaseMaterial::ALL[i]).collect());
                r.wood_type = wt.map(|s| s.into_iter().map(|i| WoodType::ALL[i]).collect());
                r.construction_method = cm.map(|i| ConstructionMethod::ALL[i]);
                r
            })
    }

    fn arb_records() -> impl Strategy<Value = Vec<StatueRecord>> {
        (1usize..6).prop_flat_map(|n| (0..n).map(arb_record).collect::<Vec<_>>())
    }

    proptest! {
        #[test]
        fn csv_and_json_round_trip(records in arb_records()) {
            let mut buf = Vec::new();
            write_catalog_csv(&records, &mut buf).unwrap();
            let back = read_catalog_csv(buf.as_slice(), "rt.csv").unwrap();
            prop_assert!(back.rejections.is_empty(), "{:?}", back.rejections);
            prop_assert_eq!(&back.records, &records);

            let mut buf = Vec::new();
            write_catalog_json(&records, &mut buf).unwrap();
            let back = read_catalog_json(buf.as_slice(), "rt.json").unwrap();
            prop_assert_eq!(&back.records, &records);
        }

        #[test]
        fn bucket_is_monotone(a in 1e-6f64..1e5, b in 1e-6f64..1e5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bucket_dimension(lo).unwrap() <= bucket_dimension(hi).unwrap());
        }

        #[test]
        fn align_is_permutation_invariant(
            mut ev in proptest::collection::vec((600i32..1300, 0i32..300), 0..5),
            seed in any::<u64>(),
        ) {
            let mut ev: Vec<DateEvidence> = ev
                .drain(..)
                .map(|(s, l)| DateEvidence::new(DateKind::YearRange, s, s + l).unwrap())
                .collect();
            let expected = align_temporal(&ev);
            prop_assert_eq!(expected.map(|d| (d.year, d.century)), brute_align(&ev));
            use rand::{seq::SliceRandom, SeedableRng};
            ev.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(align_temporal(&ev), expected);
        }
    }
}
