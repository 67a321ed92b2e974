//! Datasets with seen/unseen class splits: synthetic generation and the
//! three-file CSV bundle format.
//!
//! Bundle layout:
//!
//! - `features.csv`: `id,class_id,f0,...` one row per sample
//! - `descriptors.csv`: `class_id,a0,...` one row per class
//! - `split.csv`: `class_id,split` with `split` either `seen` or `unseen`
//!
//! Class order (and hence dense label indices) follows `descriptors.csv`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Matrix;
use crate::rng::{normal_matrix, stream};

pub const FEATURES_FILE: &str = "features.csv";
pub const DESCRIPTORS_FILE: &str = "descriptors.csv";
pub const SPLIT_FILE: &str = "split.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Seen,
    Unseen,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::Unseen => "unseen",
        }
    }
}

/// Immutable labelled feature set. Labels are dense indices into the class
/// table; `class_ids` keeps the identifiers used in the bundle files.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    row_ids: Vec<String>,
    features: Matrix,
    labels: Vec<usize>,
    class_ids: Vec<String>,
    descriptors: Matrix,
    split: Vec<Split>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        row_ids: Vec<String>,
        features: Matrix,
        labels: Vec<usize>,
        class_ids: Vec<String>,
        descriptors: Matrix,
        split: Vec<Split>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            row_ids,
            features,
            labels,
            class_ids,
            descriptors,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        let k = self.descriptors.rows();
        if self.labels.len() != n || self.row_ids.len() != n {
            return Err(Error::Dataset(format!(
                "{} feature rows but {} labels and {} ids",
                n,
                self.labels.len(),
                self.row_ids.len()
            )));
        }
        if self.class_ids.len() != k || self.split.len() != k {
            return Err(Error::Dataset(format!(
                "{} descriptor rows but {} class ids and {} split tags",
                k,
                self.class_ids.len(),
                self.split.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Dataset(format!("label {bad} has no descriptor ({k} classes)")));
        }
        if let Some(dup) = first_duplicate(&self.class_ids) {
            return Err(Error::Dataset(format!("class id {dup:?} listed twice")));
        }
        if let Some(dup) = first_duplicate(&self.row_ids) {
            return Err(Error::Dataset(format!("row id {dup:?} listed twice")));
        }
        if !self.features.is_finite() || !self.descriptors.is_finite() {
            return Err(Error::Dataset("non-finite feature or descriptor value".into()));
        }
        let seen = self.seen_classes().len();
        let unseen = k - seen;
        if seen < 2 {
            return Err(Error::Dataset(format!("need at least 2 seen classes, got {seen}")));
        }
        if unseen < 1 {
            return Err(Error::Dataset("need at least 1 unseen class, got 0".into()));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn num_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    /// All class descriptors, seen and unseen. Training code receives a
    /// [`TrainingView`] instead, which carries only the seen rows.
    pub fn descriptors(&self) -> &Matrix {
        &self.descriptors
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        self.classes_with(Split::Seen)
    }

    pub fn unseen_classes(&self) -> Vec<usize> {
        self.classes_with(Split::Unseen)
    }

    fn classes_with(&self, tag: Split) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| self.split[c] == tag).collect()
    }

    /// Row indices whose class is in `classes`, in file order.
    pub fn rows_of(&self, classes: &[usize]) -> Vec<usize> {
        let wanted: HashSet<usize> = classes.iter().copied().collect();
        (0..self.num_rows()).filter(|&r| wanted.contains(&self.labels[r])).collect()
    }
}

fn first_duplicate(ids: &[String]) -> Option<&String> {
    let mut seen = HashSet::new();
    ids.iter().find(|id| !seen.insert(id.as_str()))
}

/// Seeded split of the rows: seen rows divided into train and test, every
/// unseen row kept for testing only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Holdout {
    pub train: Vec<usize>,
    pub seen_test: Vec<usize>,
    pub unseen_test: Vec<usize>,
}

impl Holdout {
    /// Holds out `fraction` of each seen class (rounded, at least one row
    /// when the class has two or more). Every seen class keeps at least one
    /// training row.
    pub fn new(ds: &Dataset, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("holdout fraction must lie in [0, 1), got {fraction}")));
        }
        let mut rng = stream(seed, 0x401d);
        let mut train = Vec::new();
        let mut seen_test = Vec::new();
        for c in ds.seen_classes() {
            let mut rows = ds.rows_of(&[c]);
            if rows.is_empty() {
                return Err(Error::Dataset(format!("seen class {:?} has no rows", ds.class_ids[c])));
            }
            rows.shuffle(&mut rng);
            let mut n_test = (fraction * rows.len() as f64).round() as usize;
            if fraction > 0.0 && rows.len() >= 2 {
                n_test = n_test.max(1);
            }
            n_test = n_test.min(rows.len() - 1);
            seen_test.extend_from_slice(&rows[..n_test]);
            train.extend_from_slice(&rows[n_test..]);
        }
        train.sort_unstable();
        seen_test.sort_unstable();
        Ok(Holdout {
            train,
            seen_test,
            unseen_test: ds.rows_of(&ds.unseen_classes()),
        })
    }
}

/// What the trainer may read: seen training rows, labels local to the seen
/// classes (`0..num_seen`) and the seen descriptors. Unseen descriptors are
/// not reachable from here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingView {
    features: Matrix,
    labels: Vec<usize>,
    descriptors: Matrix,
    seen_classes: Vec<usize>,
}

impl TrainingView {
    pub fn new(ds: &Dataset, holdout: &Holdout) -> Result<Self> {
        let seen = ds.seen_classes();
        let local: HashMap<usize, usize> = seen.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut labels = Vec::with_capacity(holdout.train.len());
        for &r in &holdout.train {
            match local.get(&ds.labels[r]) {
                Some(&l) => labels.push(l),
                None => {
                    return Err(Error::Dataset(format!(
                        "training row {:?} belongs to an unseen class",
                        ds.row_ids[r]
                    )))
                }
            }
        }
        if labels.is_empty() {
            return Err(Error::Dataset("no training rows".into()));
        }
        Ok(TrainingView {
            features: ds.features.select_rows(&holdout.train)?,
            labels,
            descriptors: ds.descriptors.select_rows(&seen)?,
            seen_classes: seen,
        })
    }

    /// Every seen row, no holdout.
    pub fn all_seen(ds: &Dataset) -> Result<Self> {
        let holdout = Holdout {
            train: ds.rows_of(&ds.seen_classes()),
            seen_test: Vec::new(),
            unseen_test: Vec::new(),
        };
        TrainingView::new(ds, &holdout)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn seen_descriptors(&self) -> &Matrix {
        &self.descriptors
    }

    pub fn num_seen(&self) -> usize {
        self.descriptors.rows()
    }

    /// Dataset class index of each local seen label.
    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gaussian class clusters whose means are a fixed linear map of Gaussian
/// descriptors. The last `num_unseen` classes are unseen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub feature_dim: usize,
    pub descriptor_dim: usize,
    pub samples_per_class: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_seen: 10,
            num_unseen: 5,
            feature_dim: 16,
            descriptor_dim: 8,
            samples_per_class: 100,
            noise_scale: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || self.descriptor_dim < 2 {
            return Err(Error::Config(format!(
                "feature and descriptor dims must be at least 2, got {} and {}",
                self.feature_dim, self.descriptor_dim
            )));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale must be positive, got {}", self.noise_scale)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.num_seen < 2 {
            return Err(Error::Dataset(format!("need at least 2 seen classes, got {}", self.num_seen)));
        }
        if self.num_unseen < 1 {
            return Err(Error::Dataset("need at least 1 unseen class, got 0".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_unseen
    }

    /// Descriptor table and the class means it maps to.
    pub fn class_structure(&self) -> (Matrix, Matrix) {
        let k = self.num_classes();
        let descriptors = normal_matrix(&mut stream(self.seed, 1), k, self.descriptor_dim, 1.0);
        let projection = normal_matrix(
            &mut stream(self.seed, 2),
            self.descriptor_dim,
            self.feature_dim,
            1.0 / (self.descriptor_dim as f64).sqrt(),
        );
        let means = descriptors.matmul(&projection).expect("inner dims agree");
        (descriptors, means)
    }
}

pub fn synthesize(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes();
    let (descriptors, means) = spec.class_structure();
    let n = k * spec.samples_per_class;
    let noise = normal_matrix(&mut stream(spec.seed, 3), n, spec.feature_dim, spec.noise_scale);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    for c in 0..k {
        for s in 0..spec.samples_per_class {
            let r = c * spec.samples_per_class + s;
            labels.push(c);
            data.extend(means.row(c).iter().zip(noise.row(r)).map(|(m, e)| m + e));
        }
    }
    let split = (0..k)
        .map(|c| if c < spec.num_seen { Split::Seen } else { Split::Unseen })
        .collect();
    Dataset::new(
        format!("synthetic-{}", spec.seed),
        (0..n).map(|i| i.to_string()).collect(),
        Matrix::new(n, spec.feature_dim, data)?,
        labels,
        (0..k).map(|c| c.to_string()).collect(),
        descriptors,
        split,
    )
}

/// Writes `dataset` as a three-file bundle into `dir`, creating it if needed.
pub fn save_bundle(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut features = String::from("id,class_id");
    for j in 0..dataset.feature_dim() {
        features.push_str(&format!(",f{j}"));
    }
    features.push('\n');
    for (r, row) in dataset.features.iter_rows().enumerate() {
        features.push_str(&csv_field(&dataset.row_ids[r]));
        features.push(',');
        features.push_str(&csv_field(&dataset.class_ids[dataset.labels[r]]));
        push_values(&mut features, row);
    }

    let mut descriptors = String::from("class_id");
    for j in 0..dataset.descriptor_dim() {
        descriptors.push_str(&format!(",a{j}"));
    }
    descriptors.push('\n');
    for (c, row) in dataset.descriptors.iter_rows().enumerate() {
        descriptors.push_str(&csv_field(&dataset.class_ids[c]));
        push_values(&mut descriptors, row);
    }

    let mut split = String::from("class_id,split\n");
    for (c, tag) in dataset.split.iter().enumerate() {
        split.push_str(&format!("{},{}\n", csv_field(&dataset.class_ids[c]), tag.as_str()));
    }

    write_file(&dir.join(FEATURES_FILE), &features)?;
    write_file(&dir.join(DESCRIPTORS_FILE), &descriptors)?;
    write_file(&dir.join(SPLIT_FILE), &split)
}

fn push_values(out: &mut String, row: &[f64]) {
    for v in row {
        out.push_str(&format!(",{v:.16e}"));
    }
    out.push('\n');
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.trim() != s {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads and validates a bundle. The dataset is named after the directory.
pub fn load_bundle(dir: &Path) -> Result<Dataset> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bundle".to_string());

    let desc_path = dir.join(DESCRIPTORS_FILE);
    let desc = read_table(&desc_path, &["class_id"])?;
    if desc.width == 0 {
        return Err(parse_error(&desc_path, 1, 2, "no descriptor columns"));
    }
    let mut class_ids = Vec::with_capacity(desc.rows.len());
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut desc_data = Vec::new();
    for row in &desc.rows {
        if class_index.insert(row.key[0].clone(), class_ids.len()).is_some() {
            return Err(parse_error(&desc_path, row.line, 1, &format!("duplicate class id {:?}", row.key[0])));
        }
        class_ids.push(row.key[0].clone());
        desc_data.extend_from_slice(&row.values);
    }
    if class_ids.is_empty() {
        return Err(parse_error(&desc_path, 2, 1, "no classes"));
    }
    let descriptors = Matrix::new(class_ids.len(), desc.width, desc_data)?;

    let split_path = dir.join(SPLIT_FILE);
    let split_rows = read_text_table(&split_path, &["class_id", "split"])?;
    let mut split: Vec<Option<Split>> = vec![None; class_ids.len()];
    for (line, cells) in &split_rows {
        let Some(&c) = class_index.get(&cells[0]) else {
            return Err(parse_error(&split_path, *line, 1, &format!("class {:?} has no descriptor", cells[0])));
        };
        let tag = match cells[1].as_str() {
            "seen" => Split::Seen,
            "unseen" => Split::Unseen,
            other => {
                return Err(parse_error(
                    &split_path,
                    *line,
                    2,
                    &format!("expected \"seen\" or \"unseen\", got {other:?}"),
                ))
            }
        };
        match split[c] {
            Some(prev) if prev != tag => {
                return Err(parse_error(
                    &split_path,
                    *line,
                    1,
                    &format!("class {:?} is both seen and unseen; S ∩ U = ∅ is required", cells[0]),
                ))
            }
            Some(_) => {
                return Err(parse_error(&split_path, *line, 1, &format!("class {:?} listed twice", cells[0])))
            }
            None => split[c] = Some(tag),
        }
    }
    let mut tags = Vec::with_capacity(split.len());
    for (c, tag) in split.into_iter().enumerate() {
        match tag {
            Some(t) => tags.push(t),
            None => {
                return Err(Error::Dataset(format!(
                    "{}: class {:?} has no split entry",
                    split_path.display(),
                    class_ids[c]
                )))
            }
        }
    }

    let feat_path = dir.join(FEATURES_FILE);
    let feat = read_table(&feat_path, &["id", "class_id"])?;
    if feat.width == 0 {
        return Err(parse_error(&feat_path, 1, 3, "no feature columns"));
    }
    let mut row_ids = Vec::with_capacity(feat.rows.len());
    let mut labels = Vec::with_capacity(feat.rows.len());
    let mut ids_seen = HashSet::new();
    let mut data = Vec::new();
    for row in &feat.rows {
        if !ids_seen.insert(row.key[0].clone()) {
            return Err(parse_error(&feat_path, row.line, 1, &format!("duplicate row id {:?}", row.key[0])));
        }
        let Some(&c) = class_index.get(&row.key[1]) else {
            return Err(parse_error(&feat_path, row.line, 2, &format!("class {:?} has no descriptor", row.key[1])));
        };
        row_ids.push(row.key[0].clone());
        labels.push(c);
        data.extend_from_slice(&row.values);
    }
    if row_ids.is_empty() {
        return Err(parse_error(&feat_path, 2, 1, "no feature rows"));
    }
    let features = Matrix::new(row_ids.len(), feat.width, data)?;

    Dataset::new(name, row_ids, features, labels, class_ids, descriptors, tags)
        .map_err(|e| match e {
            Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", dir.display())),
            other => other,
        })
}

struct NumericRow {
    line: u64,
    key: Vec<String>,
    values: Vec<f64>,
}

struct NumericTable {
    width: usize,
    rows: Vec<NumericRow>,
}

fn parse_error(path: &Path, line: u64, column: usize, message: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message: message.to_string(),
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => parse_error(path, line, 0, &format!("{other:?}")),
    }
}

fn check_header(path: &Path, header: &csv::StringRecord, leading: &[&str]) -> Result<()> {
    for (j, want) in leading.iter().enumerate() {
        match header.get(j) {
            Some(got) if got == *want => {}
            got => {
                return Err(parse_error(
                    path,
                    1,
                    j + 1,
                    &format!("expected header {want:?}, got {:?}", got.unwrap_or("")),
                ))
            }
        }
    }
    Ok(())
}

/// Rows of `leading.len()` identifier cells followed by numeric cells, with
/// the numeric width fixed by the header.
fn read_table(path: &Path, leading: &[&str]) -> Result<NumericTable> {
    let mut reader = open_reader(path)?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    check_header(path, &header, leading)?;
    let expected = header.len();
    let width = expected - leading.len();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != expected {
            return Err(parse_error(
                path,
                line,
                record.len().min(expected) + 1,
                &format!("expected {expected} cells, got {}", record.len()),
            ));
        }
        let mut key = Vec::with_capacity(leading.len());
        for j in 0..leading.len() {
            let cell = &record[j];
            if cell.is_empty() {
                return Err(parse_error(path, line, j + 1, "empty identifier"));
            }
            key.push(cell.to_string());
        }
        let mut values = Vec::with_capacity(width);
        for j in leading.len()..expected {
            let cell = record[j].trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(parse_error(path, line, j + 1, &format!("non-numeric cell {:?}", &record[j])))
                }
            }
        }
        rows.push(NumericRow { line, key, values });
    }
    Ok(NumericTable { width, rows })
}

fn read_text_table(path: &Path, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = open_reader(path)?;
    let head = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    check_header(path, &head, header)?;
    if head.len() != header.len() {
        return Err(parse_error(path, 1, header.len() + 1, "unexpected extra header columns"));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(parse_error(
                path,
                line,
                record.len().min(header.len()) + 1,
                &format!("expected {} cells, got {}", header.len(), record.len()),
            ));
        }
        if let Some(j) = record.iter().position(str::is_empty) {
            return Err(parse_error(path, line, j + 1, "empty cell"));
        }
        out.push((line, record.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

/// Paths of the three bundle files under `dir`.
pub fn bundle_files(dir: &Path) -> [PathBuf; 3] {
    [dir.join(FEATURES_FILE), dir.join(DESCRIPTORS_FILE), dir.join(SPLIT_FILE)]
}
