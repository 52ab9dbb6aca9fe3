//! Labeled manifests, class statistics, splits, class weights and samplers.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImageU8, ImagingError};
use crate::rng;

pub const NUM_CLASSES: usize = 8;

/// Header shared by ground-truth and prediction CSVs.
pub const CSV_HEADER: [&str; 9] = ["image", "MEL", "NV", "BCC", "AK", "BKL", "DF", "VASC", "SCC"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad header: expected `{}`, found `{found}`", CSV_HEADER.join(","))]
    BadHeader { found: String },
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("line {line}: row for `{image}` is not one-hot ({ones} ones)")]
    NotOneHot { line: usize, image: String, ones: usize },
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("class {0} has zero samples; weight mode divides by its count")]
    ZeroClassCount(ClassLabel),
    #[error("invalid custom weights: {0}")]
    InvalidWeights(String),
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("no samples to draw from")]
    NoSamples,
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error("split file references unknown image `{0}`")]
    UnknownImage(String),
    #[error("image `{0}` is missing from the split file")]
    UnassignedImage(String),
    #[error("no image file found for `{id}` in {dir}")]
    MissingImageFile { id: String, dir: String },
    #[error(transparent)]
    Image(#[from] ImagingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// The eight lesion classes, indexed in ground-truth CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    /// Melanoma
    MEL = 0,
    /// Melanocytic nevus
    NV = 1,
    /// Basal cell carcinoma
    BCC = 2,
    /// Actinic keratosis
    AK = 3,
    /// Benign keratosis
    BKL = 4,
    /// Dermatofibroma
    DF = 5,
    /// Vascular lesion
    VASC = 6,
    /// Squamous cell carcinoma
    SCC = 7,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::MEL,
        ClassLabel::NV,
        ClassLabel::BCC,
        ClassLabel::AK,
        ClassLabel::BKL,
        ClassLabel::DF,
        ClassLabel::VASC,
        ClassLabel::SCC,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        CSV_HEADER[self.index() + 1]
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        // the dataset tables spell the vascular class "VASV"
        let upper = if upper == "VASV" { "VASC".to_string() } else { upper };
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == upper)
            .ok_or_else(|| DataError::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub image_id: String,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub rows: Vec<Sample>,
    pub source_dir: PathBuf,
}

pub(crate) fn check_header(record: &csv::StringRecord) -> Result<()> {
    let ok = record.len() == CSV_HEADER.len()
        && record
            .iter()
            .zip(CSV_HEADER)
            .all(|(got, want)| got.trim().trim_start_matches('\u{feff}') == want);
    if ok {
        Ok(())
    } else {
        Err(DataError::BadHeader {
            found: record.iter().collect::<Vec<_>>().join(","),
        })
    }
}

pub(crate) fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader)
}

/// Parses an ISIC-style one-hot ground-truth CSV.
pub fn parse_manifest<R: Read>(reader: R, source_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let mut rdr = csv_reader(reader);
    let mut records = rdr.records();
    match records.next() {
        Some(header) => check_header(&header?)?,
        None => return Err(DataError::BadHeader { found: String::new() }),
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != CSV_HEADER.len() {
            return Err(DataError::BadRow {
                line,
                reason: format!("expected {} fields, found {}", CSV_HEADER.len(), record.len()),
            });
        }
        let image_id = record[0].trim().to_string();
        let mut hot = Vec::new();
        for (c, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::BadRow {
                line,
                reason: format!("`{field}` is not a number"),
            })?;
            if v == 1.0 {
                hot.push(c);
            } else if v != 0.0 {
                return Err(DataError::BadRow {
                    line,
                    reason: format!("label value `{field}` is neither 0 nor 1"),
                });
            }
        }
        if hot.len() != 1 {
            return Err(DataError::NotOneHot {
                line,
                image: image_id,
                ones: hot.len(),
            });
        }
        if !seen.insert(image_id.clone()) {
            return Err(DataError::DuplicateId(image_id));
        }
        rows.push(Sample {
            image_id,
            label: ClassLabel::ALL[hot[0]],
        });
    }
    Ok(Manifest {
        rows,
        source_dir: source_dir.into(),
    })
}

pub fn read_manifest(path: &Path, source_dir: impl Into<PathBuf>) -> Result<Manifest> {
    parse_manifest(std::fs::File::open(path)?, source_dir)
}

impl Manifest {
    pub fn new(rows: Vec<Sample>, source_dir: impl Into<PathBuf>) -> Result<Manifest> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.image_id.as_str()) {
                return Err(DataError::DuplicateId(r.image_id.clone()));
            }
        }
        Ok(Manifest {
            rows,
            source_dir: source_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.rows.iter().map(|r| r.label).collect()
    }

    fn with_rows(&self, rows: Vec<Sample>) -> Manifest {
        Manifest {
            rows,
            source_dir: self.source_dir.clone(),
        }
    }

    /// Writes the one-hot ground-truth CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![r.image_id.clone()];
            rec.extend((0..NUM_CLASSES).map(|c| if c == r.label.index() { "1.0" } else { "0.0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-class sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: [usize; NUM_CLASSES],
    pub total: usize,
}

impl ClassDistribution {
    pub fn from_counts(counts: [usize; NUM_CLASSES]) -> Self {
        ClassDistribution {
            counts,
            total: counts.iter().sum(),
        }
    }

    pub fn count(&self, c: ClassLabel) -> usize {
        self.counts[c.index()]
    }

    /// Classes with at least one sample.
    pub fn present(&self) -> impl Iterator<Item = ClassLabel> + '_ {
        ClassLabel::ALL.into_iter().filter(|c| self.count(*c) > 0)
    }
}

pub fn class_distribution(m: &Manifest) -> ClassDistribution {
    let mut counts = [0; NUM_CLASSES];
    for r in &m.rows {
        counts[r.label.index()] += 1;
    }
    ClassDistribution::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub train: Manifest,
    pub val: Manifest,
    pub seed: u64,
    pub val_fraction: f64,
}

/// Number of validation samples for a class of `n`: round-half-up of
/// `fraction * n`.
pub fn val_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

/// Per-class seeded shuffle; the first `round(val_fraction * n_c)` of each
/// class go to validation. Both halves keep the source file order.
pub fn stratified_split(m: &Manifest, val_fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::BadFraction(val_fraction));
    }
    let mut in_val = vec![false; m.len()];
    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = (0..m.len()).filter(|&i| m.rows[i].label == class).collect();
        let mut rng = rng::derived(seed, class.index() as u64);
        members.shuffle(&mut rng);
        for &i in &members[..val_count(members.len(), val_fraction)] {
            in_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = m.rows.iter().cloned().zip(&in_val).partition(|(_, &v)| v);
    Ok(SplitAssignment {
        train: m.with_rows(train.into_iter().map(|(r, _)| r).collect()),
        val: m.with_rows(val.into_iter().map(|(r, _)| r).collect()),
        seed,
        val_fraction,
    })
}

impl SplitAssignment {
    /// Classes that have samples but ended up with none in training.
    pub fn starved_classes(&self) -> Vec<ClassLabel> {
        let tr = class_distribution(&self.train);
        let va = class_distribution(&self.val);
        ClassLabel::ALL
            .into_iter()
            .filter(|c| tr.count(*c) == 0 && va.count(*c) > 0)
            .collect()
    }

    /// Writes `image,subset` rows in source order (train rows tagged `train`).
    pub fn write_csv<W: Write>(&self, source: &Manifest, writer: W) -> Result<()> {
        let val: HashSet<&str> = self.val.rows.iter().map(|r| r.image_id.as_str()).collect();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["image", "subset"])?;
        for r in &source.rows {
            let subset = if val.contains(r.image_id.as_str()) {
                "val"
            } else {
                "train"
            };
            w.write_record([r.image_id.as_str(), subset])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a split from an `image,subset` file.
    pub fn read_csv<R: Read>(source: &Manifest, reader: R) -> Result<SplitAssignment> {
        let mut rdr = csv_reader(reader);
        let mut records = rdr.records();
        match records.next() {
            Some(h) => {
                let h = h?;
                if h.len() != 2 || h[0].trim() != "image" || h[1].trim() != "subset" {
                    return Err(DataError::BadHeader {
                        found: h.iter().collect::<Vec<_>>().join(","),
                    });
                }
            }
            None => return Err(DataError::BadHeader { found: String::new() }),
        }
        let ids: HashSet<&str> = source.rows.iter().map(|r| r.image_id.as_str()).collect();
        let mut assigned = std::collections::HashMap::new();
        for (i, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(DataError::BadRow {
                    line: i + 2,
                    reason: "expected `image,subset`".into(),
                });
            }
            let id = rec[0].trim().to_string();
            if !ids.contains(id.as_str()) {
                return Err(DataError::UnknownImage(id));
            }
            let is_val = match rec[1].trim() {
                "val" => true,
                "train" => false,
                other => {
                    return Err(DataError::BadRow {
                        line: i + 2,
                        reason: format!("subset `{other}` is not train or val"),
                    })
                }
            };
            if assigned.insert(id.clone(), is_val).is_some() {
                return Err(DataError::DuplicateId(id));
            }
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for r in &source.rows {
            match assigned.get(&r.image_id) {
                Some(true) => val.push(r.clone()),
                Some(false) => train.push(r.clone()),
                None => return Err(DataError::UnassignedImage(r.image_id.clone())),
            }
        }
        let val_fraction = if source.is_empty() {
            0.0
        } else {
            val.len() as f64 / source.len() as f64
        };
        Ok(SplitAssignment {
            train: source.with_rows(train),
            val: source.with_rows(val),
            seed: 0,
            val_fraction,
        })
    }
}

/// Class-stratified subsample of roughly `limit` rows (at least one per
/// present class), keeping source order.
pub fn stratified_subsample(m: &Manifest, limit: usize, seed: u64) -> Manifest {
    if limit >= m.len() {
        return m.clone();
    }
    let keep_fraction = limit as f64 / m.len() as f64;
    let mut keep = vec![false; m.len()];
    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = (0..m.len()).filter(|&i| m.rows[i].label == class).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng::derived(seed, 100 + class.index() as u64));
        let k = val_count(members.len(), keep_fraction).max(1);
        for &i in &members[..k] {
            keep[i] = true;
        }
    }
    m.with_rows(
        m.rows
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w_c = min_i n_i / n_c`; the rarest class gets 1.0.
    #[default]
    MinOverCount,
    /// `w_c = min_i n_i / N` for every class, i.e. one shared constant.
    Literal,
    Uniform,
    Custom([f64; NUM_CLASSES]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: [f64; NUM_CLASSES],
    pub mode: WeightMode,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights {
            weights: [1.0; NUM_CLASSES],
            mode: WeightMode::Uniform,
        }
    }

    pub fn get(&self, c: ClassLabel) -> f64 {
        self.weights[c.index()]
    }

    /// Multiplies each weight by the matching factor (e.g. to push harder on
    /// melanoma false negatives).
    pub fn scaled(mut self, factors: &[f64; NUM_CLASSES]) -> Self {
        for (w, f) in self.weights.iter_mut().zip(factors) {
            *w *= f;
        }
        self
    }
}

fn weights_from(d: &ClassDistribution, mode: &WeightMode, skip_absent: bool) -> Result<ClassWeights> {
    let needs_counts = matches!(mode, WeightMode::MinOverCount | WeightMode::Literal);
    if needs_counts && !skip_absent {
        if let Some(c) = ClassLabel::ALL.into_iter().find(|c| d.count(*c) == 0) {
            return Err(DataError::ZeroClassCount(c));
        }
    }
    let min_count = d.present().map(|c| d.count(c)).min();
    let weights = match mode {
        WeightMode::MinOverCount => {
            let min = min_count.ok_or(DataError::NoSamples)? as f64;
            std::array::from_fn(|c| if d.counts[c] > 0 { min / d.counts[c] as f64 } else { 1.0 })
        }
        WeightMode::Literal => {
            let min = min_count.ok_or(DataError::NoSamples)? as f64;
            [min / d.total as f64; NUM_CLASSES]
        }
        WeightMode::Uniform => [1.0; NUM_CLASSES],
        WeightMode::Custom(w) => {
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(DataError::InvalidWeights(format!("{w:?}")));
            }
            *w
        }
    };
    Ok(ClassWeights {
        weights,
        mode: mode.clone(),
    })
}

/// Loss weights for each class. Count-based modes require every class to
/// be present.
pub fn class_weights(d: &ClassDistribution, mode: &WeightMode) -> Result<ClassWeights> {
    weights_from(d, mode, false)
}

/// Like [`class_weights`] but classes with zero samples are ignored when
/// taking the minimum and receive weight 1.0 (they never enter the loss).
pub fn class_weights_present(d: &ClassDistribution, mode: &WeightMode) -> Result<ClassWeights> {
    weights_from(d, mode, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Shuffled,
    Balanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub batch_size: usize,
    pub strategy: SamplerKind,
}

impl BatchPlan {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Seeded permutation of `0..n` chunked into batches; the last may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    if n == 0 {
        return Err(DataError::NoSamples);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    Ok(BatchPlan {
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        batch_size,
        strategy: SamplerKind::Shuffled,
    })
}

/// Class-balanced batches drawn with replacement.
///
/// `class_indices[c]` lists the sample indices of class `c`. Slots are dealt
/// round-robin over the non-empty classes (the cursor carries across
/// batches), then each slot draws uniformly from its class.
pub fn balanced_batches(
    class_indices: &[Vec<usize>],
    batch_size: usize,
    num_batches: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(DataError::ZeroBatchSize);
    }
    let active: Vec<&Vec<usize>> = class_indices.iter().filter(|v| !v.is_empty()).collect();
    if active.is_empty() {
        return Err(DataError::NoSamples);
    }
    let mut rng = rng::seeded(seed);
    let mut cursor = 0;
    let mut batches = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let pool = active[cursor % active.len()];
            cursor += 1;
            batch.push(pool[rng.random_range(0..pool.len())]);
        }
        batches.push(batch);
    }
    Ok(BatchPlan {
        batches,
        batch_size,
        strategy: SamplerKind::Balanced,
    })
}

/// Groups manifest row indices by class.
pub fn indices_by_class(m: &Manifest) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); NUM_CLASSES];
    for (i, r) in m.rows.iter().enumerate() {
        out[r.label.index()].push(i);
    }
    out
}

/// Where sample pixels come from.
pub trait ImageSource: Sync {
    fn load(&self, image_id: &str) -> Result<ImageU8>;
}

/// Resolves `<dir>/<id>` trying the id as given, then common extensions.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub dir: PathBuf,
}

impl DirSource {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DirSource { dir: dir.into() }
    }

    pub fn resolve(&self, image_id: &str) -> Option<PathBuf> {
        let direct = self.dir.join(image_id);
        if direct.is_file() {
            return Some(direct);
        }
        ["jpg", "jpeg", "png", "JPG", "JPEG", "PNG"]
            .iter()
            .map(|ext| self.dir.join(format!("{image_id}.{ext}")))
            .find(|p| p.is_file())
    }
}

impl ImageSource for DirSource {
    fn load(&self, image_id: &str) -> Result<ImageU8> {
        let path = self.resolve(image_id).ok_or_else(|| DataError::MissingImageFile {
            id: image_id.to_string(),
            dir: self.dir.display().to_string(),
        })?;
        Ok(imaging::load_image(&path)?)
    }
}

/// Images held in memory, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub images: std::collections::HashMap<String, ImageU8>,
}

impl ImageSource for MemorySource {
    fn load(&self, image_id: &str) -> Result<ImageU8> {
        self.images
            .get(image_id)
            .cloned()
            .ok_or_else(|| DataError::MissingImageFile {
                id: image_id.to_string(),
                dir: "<memory>".into(),
            })
    }
}

/// Renders per-class counts for the given rows as a table
/// (classes as columns, one row per subset, TOTAL last).
pub fn distribution_table(rows: &[(&str, ClassDistribution)]) -> String {
    let mut out = format!("{:<10}", "Type");
    for c in ClassLabel::ALL {
        out += &format!("{:>8}", c.name());
    }
    out += &format!("{:>8}\n", "TOTAL");
    for (name, d) in rows {
        out += &format!("{name:<10}");
        for n in d.counts {
            out += &format!("{n:>8}");
        }
        out += &format!("{:>8}\n", d.total);
    }
    out
}
