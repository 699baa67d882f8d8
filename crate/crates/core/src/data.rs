//! Datasets: pinwheel generation, CSV ingestion, standardisation and
//! stratified splitting.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CmnError, Result};

/// Features below this standard deviation are centred but not scaled.
pub const CONSTANT_FEATURE_SD: f64 = 1e-12;

/// Per-feature `(mean, sd)` recorded from a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    /// Population mean and standard deviation of every column.
    pub fn fit(features: &DMatrix<f64>) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(CmnError::EmptyDataset);
        }
        let mut mean = Vec::with_capacity(features.ncols());
        let mut sd = Vec::with_capacity(features.ncols());
        for col in features.column_iter() {
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean.push(m);
            sd.push(var.sqrt());
        }
        Ok(Standardization { mean, sd })
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if features.ncols() != self.mean.len() {
            return Err(CmnError::shape(format!(
                "standardisation has {} features, data has {}",
                self.mean.len(),
                features.ncols()
            )));
        }
        Ok(DMatrix::from_fn(features.nrows(), features.ncols(), |i, j| {
            let centred = features[(i, j)] - self.mean[j];
            if self.sd[j] < CONSTANT_FEATURE_SD {
                centred
            } else {
                centred / self.sd[j]
            }
        }))
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &v)| {
                let centred = v - self.mean[j];
                if self.sd[j] < CONSTANT_FEATURE_SD {
                    centred
                } else {
                    centred / self.sd[j]
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × d`, one datapoint per row.
    pub features: DMatrix<f64>,
    /// Class indices in `0..num_classes`.
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(CmnError::shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&y| y >= num_classes) {
            return Err(CmnError::domain(format!(
                "row {bad}: label {} out of range for {num_classes} classes",
                labels[bad]
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(CmnError::domain("features contain non-finite values"));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            class_names: None,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, n: usize) -> Vec<f64> {
        self.features.row(n).iter().copied().collect()
    }

    /// Rows `indices`, in that order, keeping class metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = DMatrix::from_fn(indices.len(), self.dim(), |i, j| self.features[(indices[i], j)]);
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Renumbers labels to follow `names`, e.g. the class order of a fitted
    /// model. Classes missing from this dataset are allowed.
    pub fn with_class_order(&self, names: &[String]) -> Result<Dataset> {
        let own = self
            .class_names
            .as_ref()
            .ok_or_else(|| CmnError::domain("dataset has no class names to match"))?;
        let map = own
            .iter()
            .map(|name| {
                names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| CmnError::domain(format!("class {name:?} is not known to the model")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(Dataset {
            features: self.features.clone(),
            labels: self.labels.iter().map(|&y| map[y]).collect(),
            num_classes: names.len(),
            class_names: Some(names.to_vec()),
            standardization: self.standardization.clone(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn manifest(&self, seed: Option<u64>) -> DatasetManifest {
        DatasetManifest {
            n: self.len(),
            d: self.dim(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            standardization: self.standardization.clone(),
            seed,
        }
    }

    /// Writes `x1,…,xd,label`, using class names when present.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for n in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(n).iter().map(|v| format!("{v:?}")).collect();
            rec.push(match &self.class_names {
                Some(names) => names[self.labels[n]].clone(),
                None => self.labels[n].to_string(),
            });
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| CmnError::io(path, e))
    }
}

/// Summary written next to results: `{n, d, L, class_names, standardization, seed}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub d: usize,
    #[serde(rename = "L")]
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
    pub standardization: Option<Standardization>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinwheelParams {
    pub num_clusters: usize,
    pub radial_deviation: f64,
    pub tangential_deviation: f64,
    pub angular_rate: f64,
    pub points_per_cluster: usize,
    pub seed: u64,
}

impl Default for PinwheelParams {
    fn default() -> Self {
        PinwheelParams {
            num_clusters: 5,
            radial_deviation: 0.7,
            tangential_deviation: 0.3,
            angular_rate: 0.2,
            points_per_cluster: 420,
            seed: 0,
        }
    }
}

/// Spiral-armed clusters in the plane.
///
/// Each point starts at `(1 + e₁·radial, e₂·tangential)` with standard normal
/// `e`, and is rotated by `2πc/C + rate·exp(1 + e₁·radial)`. Points are
/// emitted cluster by cluster.
pub fn generate_pinwheel(p: &PinwheelParams) -> Result<Dataset> {
    if p.num_clusters < 2 {
        return Err(CmnError::domain("a pinwheel needs at least two clusters"));
    }
    if !(p.radial_deviation >= 0.0) || !(p.tangential_deviation >= 0.0) || !p.angular_rate.is_finite() {
        return Err(CmnError::domain("pinwheel deviations must be non-negative and the rate finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let n = p.num_clusters * p.points_per_cluster;
    let mut features = DMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for c in 0..p.num_clusters {
        let base = 2.0 * std::f64::consts::PI * c as f64 / p.num_clusters as f64;
        for _ in 0..p.points_per_cluster {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let r = 1.0 + e1 * p.radial_deviation;
            let t = e2 * p.tangential_deviation;
            let phi = base + p.angular_rate * r.exp();
            let (s, co) = phi.sin_cos();
            features[(row, 0)] = co * r - s * t;
            features[(row, 1)] = s * r + co * t;
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(features, labels, p.num_clusters)
}

/// Which CSV column holds the label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelColumn {
    Last,
    Named(String),
}

fn csv_error(path: &Path, e: csv::Error) -> CmnError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    CmnError::Parse {
        path: path.to_path_buf(),
        row,
        message: e.to_string(),
    }
}

/// Reads numeric features and a string or integer label per row.
///
/// Labels are numbered in order of first appearance and the names kept in
/// `class_names`. Row numbers in errors are 1-based file lines.
pub fn load_csv(path: &Path, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CmnError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let named = match label {
        LabelColumn::Last => None,
        LabelColumn::Named(name) => {
            if !has_header {
                return Err(CmnError::domain("a named label column needs a header row"));
            }
            let headers = reader.headers().map_err(|e| csv_error(path, e))?;
            Some(headers.iter().position(|h| h == name).ok_or_else(|| CmnError::Parse {
                path: path.to_path_buf(),
                row: 1,
                message: format!("no column named {name:?}"),
            })?)
        }
    };
    let mut width = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let cols = record.len();
        match width {
            None => width = Some(cols),
            Some(w) if w != cols => {
                return Err(CmnError::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    message: format!("expected {w} fields, found {cols}"),
                })
            }
            _ => {}
        }
        if cols < 2 {
            return Err(CmnError::Parse {
                path: path.to_path_buf(),
                row: line,
                message: "need at least one feature and a label".into(),
            });
        }
        let label_col = named.unwrap_or(cols - 1);
        for (j, field) in record.iter().enumerate() {
            if j == label_col {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| CmnError::Parse {
                path: path.to_path_buf(),
                row: line,
                message: format!("column {}: {field:?} is not a number", j + 1),
            })?;
            if !v.is_finite() {
                return Err(CmnError::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    message: format!("column {}: non-finite value", j + 1),
                });
            }
            values.push(v);
        }
        let name = record[label_col].to_string();
        let next = names.len();
        let y = *index.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            next
        });
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(CmnError::EmptyDataset);
    }
    let d = width.unwrap_or(1) - 1;
    let features = DMatrix::from_row_slice(labels.len(), d, &values);
    let num_classes = names.len();
    let mut ds = Dataset::new(features, labels, num_classes)?;
    ds.class_names = Some(names);
    Ok(ds)
}

/// Z-scores `train` and every dataset in `others` with the training statistics.
pub fn standardize(train: &Dataset, others: &[Dataset]) -> Result<(Dataset, Vec<Dataset>)> {
    let st = Standardization::fit(&train.features)?;
    let transform = |ds: &Dataset| -> Result<Dataset> {
        let mut out = ds.clone();
        out.features = st.apply(&ds.features)?;
        out.standardization = Some(st.clone());
        Ok(out)
    };
    let t = transform(train)?;
    let rest = others.iter().map(transform).collect::<Result<Vec<_>>>()?;
    Ok((t, rest))
}

fn indices_by_class(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    by_class
}

/// Integer quotas `≈ weights·total/Σweights` summing to `total`; leftover
/// units go to the largest fractional parts, ties to the lower index.
fn largest_remainder(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| w as f64 * total as f64 / sum as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if quota[c] < weights[c] {
            quota[c] += 1;
            left -= 1;
        }
    }
    quota
}

/// Index-level stratified split with exactly `test_size` test points.
pub fn stratified_split_indices(
    labels: &[usize],
    num_classes: usize,
    test_size: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let by_class = indices_by_class(labels, num_classes);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() == 1 {
            return Err(CmnError::Stratification(format!("class {c} has a single member")));
        }
    }
    if test_size >= labels.len() {
        return Err(CmnError::Stratification(format!(
            "test size {test_size} leaves no training data out of {}",
            labels.len()
        )));
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let quotas = largest_remainder(&counts, test_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (members, &q) in by_class.iter().zip(&quotas) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        test.extend_from_slice(&shuffled[..q]);
        train.extend_from_slice(&shuffled[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified split holding out `round(test_fraction·N)` points.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CmnError::domain("test fraction must lie in [0, 1)"));
    }
    let test_size = (test_fraction * ds.len() as f64).round() as usize;
    stratified_split_count(ds, test_size, seed)
}

/// Stratified split holding out exactly `test_size` points.
pub fn stratified_split_count(ds: &Dataset, test_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = stratified_split_indices(&ds.labels, ds.num_classes, test_size, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Nested, class-balanced prefixes of a seeded per-class ordering.
///
/// Points are added one at a time from the class whose count lags its
/// proportional share the most, so every prefix is within one point per
/// class of exact proportionality and each subset contains the previous.
pub fn doubling_schedule_indices(
    labels: &[usize],
    num_classes: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if largest > n {
        return Err(CmnError::domain(format!("schedule size {largest} exceeds the {n} available points")));
    }
    let mut by_class = indices_by_class(labels, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let mut taken = vec![0usize; num_classes];
    let mut order = Vec::with_capacity(largest);
    for t in 1..=largest {
        let mut best = None;
        let mut best_deficit = f64::NEG_INFINITY;
        for c in 0..num_classes {
            if taken[c] == by_class[c].len() {
                continue;
            }
            let deficit = by_class[c].len() as f64 * t as f64 / n as f64 - taken[c] as f64;
            if deficit > best_deficit + 1e-12 {
                best_deficit = deficit;
                best = Some(c);
            }
        }
        let c = best.expect("largest ≤ n leaves a class with points");
        order.push(by_class[c][taken[c]]);
        taken[c] += 1;
    }
    Ok(sizes.iter().map(|&s| order[..s].to_vec()).collect())
}

pub fn doubling_schedule(train: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<Dataset>> {
    Ok(doubling_schedule_indices(&train.labels, train.num_classes, sizes, seed)?
        .iter()
        .map(|idx| train.subset(idx))
        .collect())
}

/// `start, 2·start, …` up to and including `end`.
pub fn doubling_sizes(start: usize, end: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut s = start.max(1);
    while s <= end {
        out.push(s);
        s *= 2;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn class_order_remapping() {
        let f = write_tmp("a,b,label\n1,2,cat\n3,4,dog\n5,6,cat\n");
        let ds = load_csv(f.path(), &LabelColumn::Last, true).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 0]);
        let names: Vec<String> = ["bird", "dog", "cat"].iter().map(|s| s.to_string()).collect();
        let re = ds.with_class_order(&names).unwrap();
        assert_eq!(re.labels, vec![2, 1, 2]);
        assert_eq!(re.num_classes, 3);
        assert!(ds.with_class_order(&names[..2]).is_err());
    }

    #[test]
    fn degenerate_pinwheel_sits_on_the_unit_circle() {
        let p = PinwheelParams {
            radial_deviation: 0.0,
            tangential_deviation: 0.0,
            angular_rate: 0.0,
            points_per_cluster: 4,
            ..Default::default()
        };
        let ds = generate_pinwheel(&p).unwrap();
        for n in 0..ds.len() {
            let theta = 2.0 * std::f64::consts::PI * ds.labels[n] as f64 / 5.0;
            assert!((ds.features[(n, 0)] - theta.cos()).abs() < 1e-15);
            assert!((ds.features[(n, 1)] - theta.sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn pinwheel_is_seeded_and_balanced() {
        let p = PinwheelParams {
            points_per_cluster: 30,
            seed: 9,
            ..Default::default()
        };
        let a = generate_pinwheel(&p).unwrap();
        assert_eq!(a, generate_pinwheel(&p).unwrap());
        assert_eq!(a.class_counts(), vec![30; 5]);
        let b = generate_pinwheel(&PinwheelParams { seed: 10, ..p }).unwrap();
        assert_ne!(a.features, b.features);
    }

    #[test]
    fn hand_written_csv() {
        let f = write_tmp("a,b,species\n1.5,2,cat\n-3,4e-1,dog\n0,0,cat\n");
        let ds = load_csv(f.path(), &LabelColumn::Last, true).unwrap();
        assert_eq!(ds.features, DMatrix::from_row_slice(3, 2, &[1.5, 2.0, -3.0, 0.4, 0.0, 0.0]));
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.class_names, Some(vec!["cat".to_string(), "dog".to_string()]));
    }

    #[test]
    fn named_label_column() {
        let f = write_tmp("y,x\n2,0.5\n1,0.25\n");
        let ds = load_csv(f.path(), &LabelColumn::Named("y".into()), true).unwrap();
        assert_eq!(ds.features, DMatrix::from_row_slice(2, 1, &[0.5, 0.25]));
        assert_eq!(ds.class_names.unwrap(), vec!["2", "1"]);
    }

    #[test]
    fn csv_errors() {
        let f = write_tmp("a,b,label\n");
        assert!(matches!(load_csv(f.path(), &LabelColumn::Last, true), Err(CmnError::EmptyDataset)));
        let f = write_tmp("a,b,label\n1,2,x\n1,y\n");
        match load_csv(f.path(), &LabelColumn::Last, true) {
            Err(CmnError::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let f = write_tmp("1,oops,x\n");
        match load_csv(f.path(), &LabelColumn::Last, false) {
            Err(CmnError::Parse { row, message, .. }) => {
                assert_eq!(row, 1);
                assert!(message.contains("column 2"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            load_csv(Path::new("/nonexistent/file.csv"), &LabelColumn::Last, true),
            Err(CmnError::Io { .. })
        ));
    }

    #[test]
    fn iris_file_shape() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/iris.csv");
        let ds = load_csv(&path, &LabelColumn::Last, true).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.num_classes), (150, 4, 3));
        assert_eq!(ds.class_counts(), vec![50, 50, 50]);
    }

    #[test]
    fn standardisation_properties() {
        let train = Dataset::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 6.0, 5.0]),
            vec![0, 1, 0, 1],
            2,
        )
        .unwrap();
        let test = Dataset::new(DMatrix::from_row_slice(2, 2, &[10.0, 7.0, 12.0, 9.0]), vec![0, 1], 2).unwrap();
        let (t, rest) = standardize(&train, std::slice::from_ref(&test)).unwrap();
        let st = Standardization::fit(&t.features).unwrap();
        assert!(st.mean[0].abs() < 1e-9 && (st.sd[0] - 1.0).abs() < 1e-9);
        // constant column: centred only
        assert!(t.features.column(1).iter().all(|&v| v == 0.0));
        assert_eq!(rest[0].features[(0, 1)], 2.0);
        // test uses the training statistics, not its own
        let own = Standardization::fit(&rest[0].features).unwrap();
        assert!(own.mean[0] > 1.0);
        let (again, _) = standardize(&t, &[]).unwrap();
        assert!((again.features.clone() - &t.features).abs().max() < 1e-9);
    }

    #[test]
    fn balanced_split_by_hand() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let ds = Dataset::new(DMatrix::from_fn(100, 1, |i, _| i as f64), labels, 2).unwrap();
        let (train, test) = stratified_split(&ds, 0.2, 3).unwrap();
        assert_eq!(train.class_counts(), vec![40, 40]);
        assert_eq!(test.class_counts(), vec![10, 10]);
    }

    #[test]
    fn singleton_class_cannot_be_stratified() {
        let ds = Dataset::new(DMatrix::zeros(3, 1), vec![0, 0, 1], 2).unwrap();
        assert!(matches!(stratified_split(&ds, 0.3, 0), Err(CmnError::Stratification(_))));
    }

    #[test]
    fn largest_remainder_by_hand() {
        assert_eq!(largest_remainder(&[5, 3, 2], 5), vec![3, 1, 1]);
        assert_eq!(largest_remainder(&[420; 5], 500), vec![100; 5]);
    }

    #[test]
    fn schedule_sizes_and_nesting() {
        let p = PinwheelParams {
            points_per_cluster: 60,
            ..Default::default()
        };
        let ds = generate_pinwheel(&p).unwrap();
        let subsets = doubling_schedule_indices(&ds.labels, 5, &[50, 100, 200], 1).unwrap();
        assert_eq!(subsets.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 100, 200]);
        for w in subsets.windows(2) {
            let big: HashSet<_> = w[1].iter().collect();
            assert!(w[0].iter().all(|i| big.contains(i)));
        }
        assert_eq!(doubling_sizes(50, 1600), vec![50, 100, 200, 400, 800, 1600]);
    }

    proptest! {
        #[test]
        fn split_partitions_the_indices(
            counts in proptest::collection::vec(2usize..40, 2..6),
            frac in 0.05f64..0.6,
            seed in any::<u64>(),
        ) {
            let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
            let n = labels.len();
            let test_size = ((frac * n as f64).round() as usize).min(n - 1);
            let (train, test) = stratified_split_indices(&labels, counts.len(), test_size, seed).unwrap();
            prop_assert_eq!(test.len(), test_size);
            let all: HashSet<_> = train.iter().chain(&test).copied().collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(train.len() + test.len(), n);
        }

        #[test]
        fn schedule_prefixes_stay_proportional(
            counts in proptest::collection::vec(1usize..50, 2..6),
            seed in any::<u64>(),
        ) {
            let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
            let n = labels.len();
            let sizes: Vec<usize> = doubling_sizes(1, n);
            let subsets = doubling_schedule_indices(&labels, counts.len(), &sizes, seed).unwrap();
            for (s, idx) in sizes.iter().zip(&subsets) {
                let mut got = vec![0usize; counts.len()];
                for &i in idx {
                    got[labels[i]] += 1;
                }
                for c in 0..counts.len() {
                    let target = counts[c] as f64 * *s as f64 / n as f64;
                    prop_assert!((got[c] as f64 - target).abs() <= 1.0 + 1e-9);
                }
            }
            for w in subsets.windows(2) {
                prop_assert_eq!(&w[1][..w[0].len()], &w[0][..]);
            }
        }
    }
}
