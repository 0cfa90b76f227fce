//! Annotated person datasets: ingestion, filtering and demographic bucketing.
//!
//! Two on-disk layouts are supported. Facet-style exports are delimited
//! tables (comma, or tab for `.tsv`) with one row per annotated person image;
//! the column names are configurable through [`FacetColumns`]. UTKFace-style
//! directories encode the labels in each filename as
//! `<age>_<gender>_<race>_<timestamp>.<ext>`.
//!
//! Every demographic attribute is a closed partition: `Unknown` is a bucket of
//! its own, so per-attribute bucket counts always sum to the record count.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FORMAT: &str = "lvlm-fairness-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// The 13 occupation classes audited by default.
pub const DEFAULT_SELECTED_CLASSES: [&str; 13] = [
    "gardener",
    "craftsman",
    "laborer",
    "skateboarder",
    "prayer",
    "guitarist",
    "singer",
    "dancer",
    "retailer",
    "nurse",
    "student",
    "gymnast",
    "horseman",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited table: {0}")]
    Csv(#[from] csv::Error),
    #[error("annotation table is missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: class label `{label}` is not in the vocabulary")]
    UnknownClassLabel { row: usize, label: String },
    #[error("no admissible records")]
    EmptyDataset,
    #[error("value {value} is outside {expected}")]
    OutOfRange { value: i64, expected: &'static str },
    #[error("invalid class vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Facet,
    UtkFace,
    Custom,
}

macro_rules! bucket_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn label(self) -> &'static str {
                match self {
                    $($name::$variant => $label),+
                }
            }

            pub fn from_label(s: &str) -> Option<Self> {
                $name::ALL.iter().copied().find(|v| v.label().eq_ignore_ascii_case(s.trim()))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

bucket_enum!(
    /// Perceived gender presentation.
    Gender { Male => "Male", Female => "Female", Unknown => "Unknown" }
);
bucket_enum!(
    /// Monk skin-tone scale, bucketed into three groups.
    SkinTone { Light => "Light", Medium => "Medium", Dark => "Dark", Unknown => "Unknown" }
);
bucket_enum!(
    /// Perceived age group.
    AgeGroup { Young => "Young", Middle => "Middle", Old => "Old", Unknown => "Unknown" }
);
bucket_enum!(
    Race { White => "White", Black => "Black", Asian => "Asian", Indian => "Indian", Others => "Others", Unknown => "Unknown" }
);

/// A demographic attribute under analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Gender,
    SkinTone,
    Age,
    Race,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Gender, Attribute::SkinTone, Attribute::Age, Attribute::Race];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::SkinTone => "skin_tone",
            Attribute::Age => "age",
            Attribute::Race => "race",
        }
    }

    /// All buckets of this attribute, `Unknown` last.
    pub fn groups(self) -> Vec<Group> {
        match self {
            Attribute::Gender => Gender::ALL.iter().map(|&g| Group::Gender(g)).collect(),
            Attribute::SkinTone => SkinTone::ALL.iter().map(|&g| Group::SkinTone(g)).collect(),
            Attribute::Age => AgeGroup::ALL.iter().map(|&g| Group::Age(g)).collect(),
            Attribute::Race => Race::ALL.iter().map(|&g| Group::Race(g)).collect(),
        }
    }

    /// The pairs whose disparity is reported for this attribute.
    pub fn reported_pairs(self) -> Vec<(Group, Group)> {
        match self {
            Attribute::Gender => vec![(Group::Gender(Gender::Male), Group::Gender(Gender::Female))],
            Attribute::SkinTone => vec![(Group::SkinTone(SkinTone::Light), Group::SkinTone(SkinTone::Dark))],
            Attribute::Age => vec![(Group::Age(AgeGroup::Young), Group::Age(AgeGroup::Old))],
            Attribute::Race => vec![
                (Group::Race(Race::White), Group::Race(Race::Black)),
                (Group::Race(Race::Asian), Group::Race(Race::Indian)),
            ],
        }
    }

    pub fn parse_group(self, label: &str) -> Option<Group> {
        self.groups()
            .into_iter()
            .find(|g| g.label().eq_ignore_ascii_case(label.trim()))
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "gender" => Ok(Attribute::Gender),
            "skin_tone" | "skin" => Ok(Attribute::SkinTone),
            "age" => Ok(Attribute::Age),
            "race" => Ok(Attribute::Race),
            other => Err(format!("unknown attribute `{other}`")),
        }
    }
}

/// One bucket of one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Gender(Gender),
    SkinTone(SkinTone),
    Age(AgeGroup),
    Race(Race),
}

impl Group {
    pub fn attribute(self) -> Attribute {
        match self {
            Group::Gender(_) => Attribute::Gender,
            Group::SkinTone(_) => Attribute::SkinTone,
            Group::Age(_) => Attribute::Age,
            Group::Race(_) => Attribute::Race,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::Gender(g) => g.label(),
            Group::SkinTone(g) => g.label(),
            Group::Age(g) => g.label(),
            Group::Race(g) => g.label(),
        }
    }

    pub fn is_unknown(self) -> bool {
        self.label() == "Unknown"
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Map a Monk skin-tone point to its bucket: 1–3 light, 4–6 medium, 7–10 dark.
pub fn bucket_skin_tone(monk_point: i64) -> Result<SkinTone, DatasetError> {
    match monk_point {
        1..=3 => Ok(SkinTone::Light),
        4..=6 => Ok(SkinTone::Medium),
        7..=10 => Ok(SkinTone::Dark),
        _ => Err(DatasetError::OutOfRange {
            value: monk_point,
            expected: "Monk points 1..=10",
        }),
    }
}

/// Map an age in years to its bucket. The middle bucket is the closed
/// interval 25..=65.
pub fn bucket_age(age_years: u32) -> AgeGroup {
    match age_years {
        0..=24 => AgeGroup::Young,
        25..=65 => AgeGroup::Middle,
        _ => AgeGroup::Old,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Demographics {
    pub gender: Gender,
    pub skin_tone: SkinTone,
    pub age: AgeGroup,
    pub race: Race,
}

impl Default for Demographics {
    fn default() -> Self {
        Demographics {
            gender: Gender::Unknown,
            skin_tone: SkinTone::Unknown,
            age: AgeGroup::Unknown,
            race: Race::Unknown,
        }
    }
}

impl Demographics {
    pub fn group(&self, attribute: Attribute) -> Group {
        match attribute {
            Attribute::Gender => Group::Gender(self.gender),
            Attribute::SkinTone => Group::SkinTone(self.skin_tone),
            Attribute::Age => Group::Age(self.age),
            Attribute::Race => Group::Race(self.race),
        }
    }

    pub fn with_group(mut self, group: Group) -> Self {
        match group {
            Group::Gender(g) => self.gender = g,
            Group::SkinTone(g) => self.skin_tone = g,
            Group::Age(g) => self.age = g,
            Group::Race(g) => self.race = g,
        }
        self
    }
}

/// One annotated image admitted to (or considered for) evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_class: Option<String>,
    #[serde(flatten)]
    pub demographics: Demographics,
    pub person_count: u32,
}

impl PersonRecord {
    pub fn group(&self, attribute: Attribute) -> Group {
        self.demographics.group(attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    all_classes: Vec<String>,
    selected_classes: Vec<String>,
}

fn canonical_label(label: &str) -> String {
    label.trim().to_lowercase()
}

impl ClassVocabulary {
    pub fn new(all_classes: Vec<String>, selected_classes: Vec<String>) -> Result<Self, DatasetError> {
        let all: Vec<String> = all_classes.iter().map(|c| canonical_label(c)).collect();
        let selected: Vec<String> = selected_classes.iter().map(|c| canonical_label(c)).collect();
        if all.is_empty() || selected.is_empty() {
            return Err(DatasetError::InvalidVocabulary("empty class list".into()));
        }
        if let Some(blank) = all.iter().find(|c| c.is_empty()) {
            return Err(DatasetError::InvalidVocabulary(format!("blank class `{blank}`")));
        }
        for list in [&all, &selected] {
            let mut seen = HashSet::new();
            if let Some(dup) = list.iter().find(|c| !seen.insert(c.as_str())) {
                return Err(DatasetError::InvalidVocabulary(format!("duplicate class `{dup}`")));
            }
        }
        if let Some(stray) = selected.iter().find(|c| !all.contains(c)) {
            return Err(DatasetError::InvalidVocabulary(format!(
                "selected class `{stray}` is not in the full class list"
            )));
        }
        Ok(ClassVocabulary {
            all_classes: all,
            selected_classes: selected,
        })
    }

    /// The default audit vocabulary: the 13 selected occupations, which also
    /// serve as the full list unless a larger vocabulary is supplied.
    pub fn facet_default() -> Self {
        let classes: Vec<String> = DEFAULT_SELECTED_CLASSES.iter().map(|s| s.to_string()).collect();
        ClassVocabulary::new(classes.clone(), classes).expect("default vocabulary is valid")
    }

    /// Parse the vocabulary text format: one class per line, a leading `*`
    /// marks a selected class, `#` starts a comment. Without any `*` every
    /// class is selected.
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut all = Vec::new();
        let mut selected = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.strip_prefix('*') {
                Some(class) => {
                    all.push(class.trim().to_string());
                    selected.push(class.trim().to_string());
                }
                None => all.push(line.to_string()),
            }
        }
        if selected.is_empty() {
            selected = all.clone();
        }
        ClassVocabulary::new(all, selected)
    }

    pub fn from_file(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        ClassVocabulary::parse(&text)
    }

    pub fn all_classes(&self) -> &[String] {
        &self.all_classes
    }

    pub fn selected_classes(&self) -> &[String] {
        &self.selected_classes
    }

    pub fn contains(&self, label: &str) -> bool {
        let label = canonical_label(label);
        self.all_classes.contains(&label)
    }

    pub fn is_selected(&self, label: &str) -> bool {
        let label = canonical_label(label);
        self.selected_classes.contains(&label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RejectionReason {
    /// Zero or several people in the image.
    PersonCount {
        count: u32,
    },
    ClassNotSelected {
        label: String,
    },
    UnknownClassLabel {
        label: String,
    },
    Malformed {
        detail: String,
    },
    MalformedFilename,
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectionReason::PersonCount { count } => write!(f, "person_count {count} != 1"),
            RejectionReason::ClassNotSelected { label } => write!(f, "class `{label}` not selected"),
            RejectionReason::UnknownClassLabel { label } => {
                write!(f, "class `{label}` not in vocabulary")
            }
            RejectionReason::Malformed { detail } => write!(f, "malformed: {detail}"),
            RejectionReason::MalformedFilename => f.write_str("malformed filename"),
        }
    }
}

/// A row or file that was not admitted, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based data row (header excluded); 0 for directory entries.
    pub row: usize,
    pub key: String,
    pub reason: RejectionReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub source: Source,
    pub records: Vec<PersonRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<ClassVocabulary>,
    pub provenance: Vec<SourceDigest>,
    pub rejections: Vec<Rejection>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    admitted: usize,
    rejected: usize,
    #[serde(flatten)]
    dataset: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Bucket counts for one attribute, covering every bucket (zeros included).
    pub fn count_by(&self, attribute: Attribute) -> BTreeMap<Group, usize> {
        let mut counts: BTreeMap<Group, usize> = attribute.groups().into_iter().map(|g| (g, 0)).collect();
        for record in &self.records {
            *counts.entry(record.group(attribute)).or_default() += 1;
        }
        counts
    }

    pub fn count_of(&self, group: Group) -> usize {
        self.records
            .iter()
            .filter(|r| r.group(group.attribute()) == group)
            .count()
    }

    /// Canonical manifest text: every admitted record and every rejection.
    pub fn manifest_json(&self) -> String {
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            admitted: self.records.len(),
            rejected: self.rejections.len(),
            dataset: self.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        text
    }

    pub fn manifest_digest(&self) -> String {
        hex::encode(Sha256::digest(self.manifest_json().as_bytes()))
    }

    pub fn write_manifest(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.manifest_json()).map_err(io_err(path))
    }

    pub fn read_manifest(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::InvalidManifest(e.to_string()))?;
        if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
            return Err(DatasetError::InvalidManifest(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        Ok(manifest.dataset)
    }
}

/// Column names of a Facet-style annotation table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetColumns {
    pub image_id: String,
    pub class: String,
    pub person_count: String,
    pub gender: String,
    pub skin_tone: String,
    pub age: String,
    /// Optional; when absent the path is `<image_root>/<image_id>`.
    pub image_path: String,
}

impl Default for FacetColumns {
    fn default() -> Self {
        FacetColumns {
            image_id: "image_id".into(),
            class: "class".into(),
            person_count: "person_count".into(),
            gender: "gender".into(),
            skin_tone: "skin_tone".into(),
            age: "age".into(),
            image_path: "image_path".into(),
        }
    }
}

/// Loader for Facet-style annotation tables.
#[derive(Debug, Clone, Default)]
pub struct FacetLoader {
    pub columns: FacetColumns,
    /// Treat out-of-vocabulary class labels as a hard error.
    pub strict: bool,
    /// Base directory for image paths; defaults to the table's directory.
    pub image_root: Option<PathBuf>,
}

struct ColumnIndex {
    image_id: usize,
    class: usize,
    person_count: usize,
    gender: usize,
    skin_tone: usize,
    age: usize,
    image_path: Option<usize>,
}

fn parse_gender(raw: &str) -> Result<Gender, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "male" | "m" | "masc" | "masculine" | "man" => Ok(Gender::Male),
        "female" | "f" | "fem" | "feminine" | "woman" => Ok(Gender::Female),
        "" | "unknown" | "na" | "n/a" | "none" => Ok(Gender::Unknown),
        other => Err(format!("unrecognized gender `{other}`")),
    }
}

fn parse_skin_tone(raw: &str) -> Result<SkinTone, String> {
    let value = raw.trim();
    if let Ok(point) = value.parse::<i64>() {
        return bucket_skin_tone(point).map_err(|e| e.to_string());
    }
    match value.to_ascii_lowercase().as_str() {
        "" | "unknown" | "na" | "n/a" | "none" => Ok(SkinTone::Unknown),
        other => SkinTone::from_label(other).ok_or_else(|| format!("unrecognized skin tone `{other}`")),
    }
}

fn parse_age(raw: &str) -> Result<AgeGroup, String> {
    let value = raw.trim();
    if let Ok(years) = value.parse::<i64>() {
        return u32::try_from(years)
            .map(bucket_age)
            .map_err(|_| format!("negative age {years}"));
    }
    match value.to_ascii_lowercase().as_str() {
        "" | "unknown" | "na" | "n/a" | "none" => Ok(AgeGroup::Unknown),
        "young" | "younger" => Ok(AgeGroup::Young),
        "middle" | "middle-aged" | "middle_aged" => Ok(AgeGroup::Middle),
        "old" | "older" => Ok(AgeGroup::Old),
        other => Err(format!("unrecognized age `{other}`")),
    }
}

fn file_digest(path: &Path) -> Result<SourceDigest, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(SourceDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

impl FacetLoader {
    pub fn load(&self, path: &Path, vocabulary: &ClassVocabulary) -> Result<Dataset, DatasetError> {
        let provenance = vec![file_digest(path)?];
        let delimiter = match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") => b'\t',
            _ => b',',
        };
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(true)
            .from_path(path)?;
        let headers = reader.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let require = |name: &str| find(name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()));
        let cols = ColumnIndex {
            image_id: require(&self.columns.image_id)?,
            class: require(&self.columns.class)?,
            person_count: require(&self.columns.person_count)?,
            gender: require(&self.columns.gender)?,
            skin_tone: require(&self.columns.skin_tone)?,
            age: require(&self.columns.age)?,
            image_path: find(&self.columns.image_path),
        };
        let image_root = self
            .image_root
            .clone()
            .or_else(|| path.parent().map(Path::to_path_buf))
            .unwrap_or_default();

        let mut records = Vec::new();
        let mut rejections = Vec::new();
        for (index, row) in reader.records().enumerate() {
            let row_number = index + 1;
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("").trim();
            let image_id = field(cols.image_id).to_string();
            let reject = |reason| Rejection {
                row: row_number,
                key: image_id.clone(),
                reason,
            };

            let parsed = (|| -> Result<(u32, Demographics), String> {
                if image_id.is_empty() {
                    return Err("empty image id".into());
                }
                let count = field(cols.person_count)
                    .parse::<u32>()
                    .map_err(|_| format!("bad person_count `{}`", field(cols.person_count)))?;
                let demographics = Demographics {
                    gender: parse_gender(field(cols.gender))?,
                    skin_tone: parse_skin_tone(field(cols.skin_tone))?,
                    age: parse_age(field(cols.age))?,
                    race: Race::Unknown,
                };
                Ok((count, demographics))
            })();
            let (person_count, demographics) = match parsed {
                Ok(v) => v,
                Err(detail) => {
                    rejections.push(reject(RejectionReason::Malformed { detail }));
                    continue;
                }
            };
            if person_count != 1 {
                rejections.push(reject(RejectionReason::PersonCount { count: person_count }));
                continue;
            }
            let label = canonical_label(field(cols.class));
            if !vocabulary.contains(&label) {
                if self.strict {
                    return Err(DatasetError::UnknownClassLabel { row: row_number, label });
                }
                rejections.push(reject(RejectionReason::UnknownClassLabel { label }));
                continue;
            }
            if !vocabulary.is_selected(&label) {
                rejections.push(reject(RejectionReason::ClassNotSelected { label }));
                continue;
            }
            let image_path = match cols.image_path.map(field).filter(|p| !p.is_empty()) {
                Some(p) => image_root.join(p),
                None => image_root.join(&image_id),
            };
            records.push(PersonRecord {
                image_id,
                image_path,
                source: Source::Facet,
                person_class: Some(label),
                demographics,
                person_count,
            });
        }
        if records.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        Ok(Dataset {
            source: Source::Facet,
            records,
            vocabulary: Some(vocabulary.clone()),
            provenance,
            rejections,
        })
    }
}

/// Load a Facet-style annotation table with the default column names,
/// keeping single-person rows of the selected classes.
pub fn parse_facet_annotations(path: &Path, vocabulary: &ClassVocabulary) -> Result<Dataset, DatasetError> {
    FacetLoader::default().load(path, vocabulary)
}

/// Decode `<age>_<gender>_<race>_<timestamp>.<ext>`.
pub fn parse_utkface_name(file_name: &str) -> Option<Demographics> {
    let (stem, ext) = file_name.split_once('.')?;
    if ext.is_empty() {
        return None;
    }
    let mut parts = stem.split('_');
    let age: u32 = parts.next()?.parse().ok()?;
    let gender = match parts.next()? {
        "0" => Gender::Male,
        "1" => Gender::Female,
        _ => return None,
    };
    let race = match parts.next()? {
        "0" => Race::White,
        "1" => Race::Black,
        "2" => Race::Asian,
        "3" => Race::Indian,
        "4" => Race::Others,
        _ => return None,
    };
    let timestamp = parts.next()?;
    if timestamp.is_empty() || parts.next().is_some() {
        return None;
    }
    Some(Demographics {
        gender,
        skin_tone: SkinTone::Unknown,
        age: bucket_age(age),
        race,
    })
}

/// Build a dataset from a UTKFace-style directory. Entries are visited in
/// byte order of their file names; ill-formed names are reported as
/// rejections.
pub fn parse_utkface_filenames(directory: &Path) -> Result<Dataset, DatasetError> {
    let mut names: Vec<String> = fs::read_dir(directory)
        .map_err(io_err(directory))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();

    let mut listing = Sha256::new();
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    for name in names {
        listing.update(name.as_bytes());
        listing.update(b"\n");
        match parse_utkface_name(&name) {
            Some(demographics) => records.push(PersonRecord {
                image_id: name.clone(),
                image_path: directory.join(&name),
                source: Source::UtkFace,
                person_class: None,
                demographics,
                person_count: 1,
            }),
            None => rejections.push(Rejection {
                row: 0,
                key: name,
                reason: RejectionReason::MalformedFilename,
            }),
        }
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    Ok(Dataset {
        source: Source::UtkFace,
        records,
        vocabulary: None,
        provenance: vec![SourceDigest {
            path: directory.display().to_string(),
            sha256: hex::encode(listing.finalize()),
        }],
        rejections,
    })
}
