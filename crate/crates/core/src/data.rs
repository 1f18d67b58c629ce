//! Dataset ingestion, standardization, fold rotation, synthetic generators.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Error, Result};
use crate::kernel::{pnorm_unchecked, Matrix, SeededRng};

pub const NUM_FOLDS: usize = 10;

/// Feature rows `Psi(x_i)` with labels in {-1, +1}.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<f64>,
    column_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(invalid_input(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(invalid_input(format!(
                "label {} at row {i} is not in {{-1, +1}}",
                labels[i]
            )));
        }
        Ok(Self {
            features,
            labels,
            column_names: None,
        })
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Self {
        self.column_names = Some(names);
        self
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    /// Number of examples m.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension n0.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            column_names: self.column_names.clone(),
        }
    }

    /// Same features with every label negated.
    pub fn flipped(&self) -> Dataset {
        Dataset {
            features: self.features.clone(),
            labels: self.labels.iter().map(|y| -y).collect(),
            column_names: self.column_names.clone(),
        }
    }

    /// Writes the CSV layout read by [`load_csv`]: label first, no header.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            out.push_str(if self.labels[i] > 0.0 { "1" } else { "-1" });
            for v in self.x(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, has_header)
}

/// Parses `label,f1,...,fn` rows. Labels in {0, 1} are mapped to {-1, +1}.
pub fn read_csv<R: Read>(reader: R, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let column_names = if has_header {
        let headers = rdr.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        Some(
            headers
                .iter()
                .skip(1)
                .map(str::to_owned)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut arity: Option<usize> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse { line, message };
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_err(
                "expected a label and at least one feature".into(),
            ));
        }
        match arity {
            None => arity = Some(record.len()),
            Some(a) if a != record.len() => {
                return Err(parse_err(format!(
                    "row has {} fields, expected {a}",
                    record.len()
                )))
            }
            _ => {}
        }
        let label: f64 = record[0]
            .parse()
            .map_err(|_| parse_err(format!("label `{}` is not numeric", &record[0])))?;
        let label = match label {
            1.0 => 1.0,
            -1.0 | 0.0 => -1.0,
            other => return Err(parse_err(format!("label {other} not in {{-1, 0, 1}}"))),
        };
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("field `{field}` is not numeric")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("field `{field}` is not finite")));
            }
            data.push(v);
        }
    }
    let cols = arity.map_or(0, |a| a - 1);
    if labels.is_empty() {
        return Err(invalid_input("dataset has no rows"));
    }
    let features = Matrix::new(labels.len(), cols, data)?;
    let d = Dataset::new(features, labels)?;
    Ok(match column_names {
        Some(names) if names.len() == cols => d.with_column_names(names),
        _ => d,
    })
}

/// Per-feature mean and population stdev, plus r_inf of the transformed data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    pub r_infinity: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl DatasetStats {
    /// Applies the stored transform; zero-variance columns map to 0.
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.dim() != self.means.len() {
            return Err(invalid_input(format!(
                "dataset has {} features, standardization expects {}",
                d.dim(),
                self.means.len()
            )));
        }
        let mut features = d.features.clone();
        for i in 0..features.rows() {
            let row = features.row_mut(i);
            self.apply_row(row);
        }
        Ok(Dataset {
            features,
            labels: d.labels.clone(),
            column_names: d.column_names.clone(),
        })
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, mu), sd) in row.iter_mut().zip(&self.means).zip(&self.stds) {
            *v = if *sd > 0.0 { (*v - mu) / sd } else { 0.0 };
        }
    }
}

/// Centers and scales every column (population stdev convention).
pub fn standardize(d: &Dataset) -> Result<(Dataset, DatasetStats)> {
    let m = d.len();
    if m < 2 {
        return Err(invalid_input("standardize needs at least 2 examples"));
    }
    let n = d.dim();
    let mut means = vec![0.0; n];
    let mut stds = vec![0.0; n];
    for j in 0..n {
        let col = d.features.column(j);
        let mu = col.iter().sum::<f64>() / m as f64;
        let var = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m as f64;
        means[j] = mu;
        // Treat float-noise variance of a constant column as zero.
        stds[j] = if var.sqrt() <= 1e-12 * mu.abs().max(1.0) {
            0.0
        } else {
            var.sqrt()
        };
    }
    let mut stats = DatasetStats {
        r_infinity: 0.0,
        means,
        stds,
    };
    let out = stats.apply(d)?;
    stats.r_infinity = r_infinity(&out);
    Ok((out, stats))
}

/// `max_i ||Psi(x_i)||_inf`.
pub fn r_infinity(d: &Dataset) -> f64 {
    (0..d.len())
        .map(|i| pnorm_unchecked(d.x(i), f64::INFINITY))
        .fold(0.0, f64::max)
}

/// A 10-way partition with test fold i and validation fold i+1 (mod 10).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub test_fold: usize,
    pub validation_fold: usize,
}

impl FoldAssignment {
    fn members(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| pred(self.fold_of[i]))
            .collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.members(|f| f == self.test_fold)
    }

    pub fn validation_indices(&self) -> Vec<usize> {
        self.members(|f| f == self.validation_fold)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.members(|f| f != self.test_fold && f != self.validation_fold)
    }

    pub fn train_folds(&self) -> Vec<usize> {
        (0..NUM_FOLDS)
            .filter(|&f| f != self.test_fold && f != self.validation_fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> [usize; NUM_FOLDS] {
        let mut sizes = [0; NUM_FOLDS];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffled round-robin partition into 10 folds. The partition depends only
/// on `seed` and `m`; `test_fold` selects the roles.
pub fn make_folds(d: &Dataset, test_fold: usize, seed: u64) -> Result<FoldAssignment> {
    make_folds_for_len(d.len(), test_fold, seed)
}

pub fn make_folds_for_len(m: usize, test_fold: usize, seed: u64) -> Result<FoldAssignment> {
    if m < NUM_FOLDS {
        return Err(invalid_input(format!(
            "fold rotation needs at least {NUM_FOLDS} examples, got {m}"
        )));
    }
    if test_fold >= NUM_FOLDS {
        return Err(invalid_param(format!(
            "test fold {test_fold} out of range 0..9"
        )));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    SeededRng::derive(seed, &[0xF01D]).shuffle(&mut perm);
    let mut fold_of = vec![0; m];
    for (k, &i) in perm.iter().enumerate() {
        fold_of[i] = k % NUM_FOLDS;
    }
    Ok(FoldAssignment {
        fold_of,
        test_fold,
        validation_fold: (test_fold + 1) % NUM_FOLDS,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Circles,
    Linear,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circles" => Ok(SynthKind::Circles),
            "linear" => Ok(SynthKind::Linear),
            other => Err(invalid_param(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

pub const LINEAR_DIM: usize = 4;

/// Synthetic binary problems.
///
/// * `circles`: inner annulus (radius 0.5..1.0, label -1) and outer annulus
///   (radius 1.5..2.0, label +1) in R^2.
/// * `linear`: two blobs on either side of a random affine hyperplane in R^4,
///   at distance >= 0.5 from it before noise.
///
/// `noise` is the stdev of isotropic Gaussian noise added to every point.
pub fn synth(kind: SynthKind, m: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if m < 4 {
        return Err(invalid_input("synthetic datasets need m >= 4"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid_param("noise must be a finite non-negative number"));
    }
    let mut rng = SeededRng::derive(seed, &[kind as u64]);
    let (rows, labels) = match kind {
        SynthKind::Circles => {
            let mut rows = Vec::with_capacity(m);
            let mut labels = Vec::with_capacity(m);
            for _ in 0..m {
                let y = rng.sign();
                let r = if y < 0.0 {
                    rng.uniform_range(0.5, 1.0)
                } else {
                    rng.uniform_range(1.5, 2.0)
                };
                let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                rows.push(vec![
                    r * theta.cos() + noise * rng.normal(),
                    r * theta.sin() + noise * rng.normal(),
                ]);
                labels.push(y);
            }
            (rows, labels)
        }
        SynthKind::Linear => {
            let mut normal: Vec<f64> = (0..LINEAR_DIM).map(|_| rng.normal()).collect();
            let len = pnorm_unchecked(&normal, 2.0);
            normal.iter_mut().for_each(|v| *v /= len);
            let center: Vec<f64> = (0..LINEAR_DIM).map(|_| 0.5 * rng.normal()).collect();
            let mut rows = Vec::with_capacity(m);
            let mut labels = Vec::with_capacity(m);
            for _ in 0..m {
                let y = rng.sign();
                let z: Vec<f64> = (0..LINEAR_DIM).map(|_| rng.normal()).collect();
                let along = crate::kernel::dot(&z, &normal);
                let dist = y * (0.5 + rng.normal().abs());
                let x: Vec<f64> = (0..LINEAR_DIM)
                    .map(|j| {
                        center[j] + z[j] - along * normal[j]
                            + dist * normal[j]
                            + noise * rng.normal()
                    })
                    .collect();
                rows.push(x);
                labels.push(y);
            }
            (rows, labels)
        }
    };
    Dataset::new(Matrix::from_rows(&rows)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(s: &str) -> Result<Dataset> {
        read_csv(s.as_bytes(), false)
    }

    #[test]
    fn csv_two_rows() {
        let d = csv("1,0.5,0.25\n-1,0.0,1.0").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.x(0), &[0.5, 0.25]);
    }

    #[test]
    fn csv_zero_one_labels_are_remapped() {
        let d = csv("0,1.0\n1,2.0").unwrap();
        assert_eq!(d.labels(), &[-1.0, 1.0]);
    }

    #[test]
    fn csv_errors_name_the_line() {
        match csv("1,abc") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match csv("1,1.0\n1,2.0,3.0") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match csv("1,1.0\n2,2.0") {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("label"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_header_and_crlf() {
        let d = read_csv("y,a,b\r\n1,1,2\r\n-1,3,4\r\n".as_bytes(), true).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(
            d.column_names().unwrap(),
            &["a".to_string(), "b".to_string()]
        );
        assert_eq!(d.x(1), &[3.0, 4.0]);
    }

    fn column(vals: &[f64]) -> Dataset {
        let labels = vec![1.0; vals.len()];
        let rows: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
        Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn standardize_population_convention() {
        let (s, stats) = standardize(&column(&[1.0, 3.0])).unwrap();
        assert_eq!(s.features().column(0), vec![-1.0, 1.0]);
        assert_eq!(stats.means, vec![2.0]);
        assert_eq!(stats.stds, vec![1.0]);
    }

    #[test]
    fn standardize_constant_column_is_zeroed() {
        let (s, _) = standardize(&column(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(s.features().column(0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let (s1, _) = standardize(&column(&[0.3, 1.7, -2.0, 4.0])).unwrap();
        let (s2, _) = standardize(&s1).unwrap();
        for (a, b) in s1
            .features()
            .as_slice()
            .iter()
            .zip(s2.features().as_slice())
        {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn standardize_rejects_single_row() {
        assert!(standardize(&column(&[1.0])).is_err());
    }

    #[test]
    fn r_infinity_examples() {
        let d = Dataset::new(
            Matrix::from_rows(&[vec![0.5, -2.0], vec![1.0, 1.0]]).unwrap(),
            vec![1.0, -1.0],
        )
        .unwrap();
        assert_eq!(r_infinity(&d), 2.0);
        assert_eq!(r_infinity(&column(&[0.0, 0.0])), 0.0);
        assert_eq!(r_infinity(&column(&[3.0])), 3.0);
    }

    #[test]
    fn standardized_r_infinity_positive() {
        let d = synth(SynthKind::Circles, 50, 0.1, 3).unwrap();
        let (_, stats) = standardize(&d).unwrap();
        assert!(stats.r_infinity.is_finite() && stats.r_infinity > 0.0);
    }

    #[test]
    fn fold_rotation_roles() {
        let d = column(&(0..37).map(f64::from).collect::<Vec<_>>());
        let f = make_folds(&d, 9, 1).unwrap();
        assert_eq!(f.validation_fold, 0);
        assert_eq!(f.train_folds(), (1..9).collect::<Vec<_>>());
        let sizes = f.fold_sizes();
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1);

        let mut all: Vec<usize> = f.test_indices();
        all.extend(f.validation_indices());
        all.extend(f.train_indices());
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn folds_minimal_and_deterministic() {
        let d = column(&[0.0; 10]);
        let f = make_folds(&d, 0, 5).unwrap();
        assert_eq!(f.fold_sizes(), [1; 10]);
        assert_eq!(f, make_folds(&d, 0, 5).unwrap());
        assert!(make_folds(&column(&[0.0; 9]), 0, 5).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        for kind in [SynthKind::Circles, SynthKind::Linear] {
            assert_eq!(
                synth(kind, 40, 0.1, 9).unwrap(),
                synth(kind, 40, 0.1, 9).unwrap()
            );
        }
        assert!("spirals".parse::<SynthKind>().is_err());
    }

    /// Perceptron with bias on noiseless linear data reaches zero training
    /// errors, which witnesses separability.
    #[test]
    fn synth_linear_is_separable() {
        let d = synth(SynthKind::Linear, 300, 0.0, 11).unwrap();
        let mut w = vec![0.0; d.dim() + 1];
        let mut converged = false;
        for _ in 0..10_000 {
            let mut mistakes = 0;
            for i in 0..d.len() {
                let x = d.x(i);
                let y = d.labels()[i];
                let s: f64 =
                    w[..d.dim()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d.dim()];
                if y * s <= 0.0 {
                    mistakes += 1;
                    for j in 0..d.dim() {
                        w[j] += y * x[j];
                    }
                    w[d.dim()] += y;
                }
            }
            if mistakes == 0 {
                converged = true;
                break;
            }
        }
        assert!(converged);
    }

    /// Brute force over 10^4 random affine classifiers: none beats 0.75 on
    /// noiseless circles.
    #[test]
    fn synth_circles_not_linearly_separable() {
        let d = synth(SynthKind::Circles, 400, 0.0, 4).unwrap();
        let mut rng = SeededRng::new(99);
        let mut best: f64 = 0.0;
        for _ in 0..10_000 {
            let (a, b, c) = (rng.normal(), rng.normal(), rng.uniform_range(-2.5, 2.5));
            let correct = (0..d.len())
                .filter(|&i| {
                    let x = d.x(i);
                    d.labels()[i] * (a * x[0] + b * x[1] + c) > 0.0
                })
                .count();
            best = best.max(correct as f64 / d.len() as f64);
        }
        assert!(best <= 0.75, "best linear accuracy {best}");
    }
}
