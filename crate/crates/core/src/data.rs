//! The observations-by-features table and its preprocessing.
//!
//! Sample variances here always use the `n - 1` denominator.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// An `n x p` table of finite reals, one row per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Array2<f64>,
    feature_ids: Vec<String>,
}

impl DataMatrix {
    pub fn new(values: Array2<f64>, feature_ids: Vec<String>) -> Result<Self> {
        let (n, p) = values.dim();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 observations, got {n}"
            )));
        }
        if p < 1 {
            return Err(Error::InvalidInput("need at least 1 feature".into()));
        }
        if feature_ids.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "{} feature ids for {p} columns",
                feature_ids.len()
            )));
        }
        let mut seen = HashMap::with_capacity(p);
        for (j, id) in feature_ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), j) {
                return Err(Error::InvalidInput(format!(
                    "duplicate feature id '{id}' (columns {prev} and {j})"
                )));
            }
        }
        if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(DataMatrix {
            values,
            feature_ids,
        })
    }

    /// Features named `f1..fp`.
    pub fn with_default_ids(values: Array2<f64>) -> Result<Self> {
        let ids = (1..=values.ncols()).map(|j| format!("f{j}")).collect();
        Self::new(values, ids)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn feature_index(&self, id: &str) -> Option<usize> {
        self.feature_ids.iter().position(|f| f == id)
    }

    /// Column subset by position, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::NoFeaturesSelected);
        }
        let values = self.values.select(Axis(1), cols);
        let ids = cols.iter().map(|&j| self.feature_ids[j].clone()).collect();
        Ok(DataMatrix {
            values,
            feature_ids: ids,
        })
    }

    pub fn from_csv_reader<R: Read>(reader: R, delimiter: u8) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let ids: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let p = ids.len();
        let mut flat = Vec::new();
        let mut n = 0;
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != p {
                return Err(Error::Csv(format!(
                    "row {i} has {} fields, header has {p}",
                    record.len()
                )));
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Csv(format!("row {i}, column '{}': cannot parse '{field}'", ids[j]))
                })?;
                flat.push(v);
            }
            n += 1;
        }
        let values = Array2::from_shape_vec((n, p), flat)
            .map_err(|e| Error::Csv(e.to_string()))?;
        DataMatrix::new(values, ids)
    }

    pub fn read_csv(path: impl AsRef<Path>, delimiter: u8) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(std::io::BufReader::new(file), delimiter)
    }

    pub fn write_csv<W: Write>(&self, writer: W, delimiter: u8) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(writer);
        wtr.write_record(&self.feature_ids)?;
        for row in self.values.rows() {
            wtr.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads a one-column label file (header row, then one label per
/// observation). The two distinct labels are mapped to 0 and 1 in order
/// of first appearance.
pub fn read_labels_csv<R: Read>(reader: R) -> Result<Vec<u8>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut distinct: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let raw = record
            .get(0)
            .ok_or_else(|| Error::Csv("empty label row".into()))?
            .to_owned();
        let code = match distinct.iter().position(|d| *d == raw) {
            Some(c) => c,
            None => {
                distinct.push(raw);
                distinct.len() - 1
            }
        };
        if code > 1 {
            return Err(Error::InvalidInput(
                "label file has more than two distinct labels".into(),
            ));
        }
        labels.push(code as u8);
    }
    if distinct.len() != 2 {
        return Err(Error::InvalidInput(format!(
            "label file needs exactly two distinct labels, found {}",
            distinct.len()
        )));
    }
    Ok(labels)
}

/// A centered (and possibly unit-variance) copy of a [`DataMatrix`],
/// carrying what is needed to undo the transformation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledMatrix {
    data: DataMatrix,
    column_means: Array1<f64>,
    column_sds: Array1<f64>,
    unit_variance: bool,
}

impl ScaledMatrix {
    pub fn matrix(&self) -> &DataMatrix {
        &self.data
    }

    pub fn into_matrix(self) -> DataMatrix {
        self.data
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.data.values
    }

    pub fn column_means(&self) -> &Array1<f64> {
        &self.column_means
    }

    /// Sample standard deviations of the original columns.
    pub fn column_sds(&self) -> &Array1<f64> {
        &self.column_sds
    }

    pub fn is_unit_variance(&self) -> bool {
        self.unit_variance
    }
}

/// Mean with one refinement pass, so a constant column centers to exact
/// zeros more often than a single naive sum would.
pub(crate) fn mean(xs: ArrayView1<'_, f64>) -> f64 {
    let n = xs.len() as f64;
    let m = xs.sum() / n;
    m + xs.iter().map(|x| x - m).sum::<f64>() / n
}

pub(crate) fn sample_variance(xs: ArrayView1<'_, f64>) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

pub fn center(x: &DataMatrix) -> ScaledMatrix {
    let mut values = x.values.clone();
    let p = x.p();
    let mut means = Array1::zeros(p);
    let mut sds = Array1::zeros(p);
    for (j, mut col) in values.columns_mut().into_iter().enumerate() {
        let m = mean(col.view());
        col.mapv_inplace(|v| v - m);
        means[j] = m;
        sds[j] = sample_variance(col.view()).sqrt();
    }
    ScaledMatrix {
        data: DataMatrix {
            values,
            feature_ids: x.feature_ids.clone(),
        },
        column_means: means,
        column_sds: sds,
        unit_variance: false,
    }
}

pub fn scale_unit_variance(x: &ScaledMatrix) -> Result<ScaledMatrix> {
    let mut values = x.data.values.clone();
    for (j, mut col) in values.columns_mut().into_iter().enumerate() {
        let sd = sample_variance(col.view()).sqrt();
        let magnitude = col
            .iter()
            .fold(x.column_means[j].abs(), |acc, v| acc.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        if !(sd > 1e-12 * magnitude) {
            return Err(Error::DegenerateFeature(x.data.feature_ids[j].clone()));
        }
        col.mapv_inplace(|v| v / sd);
    }
    Ok(ScaledMatrix {
        data: DataMatrix {
            values,
            feature_ids: x.data.feature_ids.clone(),
        },
        column_means: x.column_means.clone(),
        column_sds: x.column_sds.clone(),
        unit_variance: true,
    })
}

/// Keeps the named features, in their original column order.
pub fn subset_features<S: AsRef<str>>(x: &DataMatrix, keep: &[S]) -> Result<DataMatrix> {
    if keep.is_empty() {
        return Err(Error::NoFeaturesSelected);
    }
    let mut cols = Vec::with_capacity(keep.len());
    for id in keep {
        let id = id.as_ref();
        let j = x
            .feature_index(id)
            .ok_or_else(|| Error::UnknownFeature(id.to_owned()))?;
        cols.push(j);
    }
    cols.sort_unstable();
    cols.dedup();
    x.select_columns(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dm(values: Array2<f64>) -> DataMatrix {
        DataMatrix::with_default_ids(values).unwrap()
    }

    #[test]
    fn center_simple_column() {
        let c = center(&dm(array![[1.0], [2.0], [3.0]]));
        assert_eq!(c.values().column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(c.column_means()[0], 2.0);
        assert_eq!(c.column_sds()[0], 1.0);
        assert!(!c.is_unit_variance());
    }

    #[test]
    fn center_already_centered() {
        let c = center(&dm(array![[-1.0], [1.0]]));
        assert_eq!(c.values().column(0).to_vec(), vec![-1.0, 1.0]);
    }

    #[test]
    fn nan_rejected_with_location() {
        let err = DataMatrix::with_default_ids(array![[1.0, 2.0], [3.0, f64::NAN]]).unwrap_err();
        assert_eq!(err, Error::NonFinite { row: 1, col: 1 });
        let err = DataMatrix::with_default_ids(array![[f64::INFINITY], [0.0]]).unwrap_err();
        assert_eq!(err, Error::NonFinite { row: 0, col: 0 });
    }

    #[test]
    fn shape_preconditions() {
        assert!(DataMatrix::with_default_ids(Array2::zeros((1, 3))).is_err());
        assert!(DataMatrix::with_default_ids(Array2::zeros((3, 0))).is_err());
        assert!(DataMatrix::new(Array2::zeros((3, 2)), vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn scale_cases() {
        let s = scale_unit_variance(&center(&dm(array![[-1.0], [0.0], [1.0]]))).unwrap();
        assert_eq!(s.values().column(0).to_vec(), vec![-1.0, 0.0, 1.0]);

        let s = scale_unit_variance(&center(&dm(array![[-2.0], [0.0], [2.0]]))).unwrap();
        assert_eq!(s.values().column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(s.column_sds()[0], 2.0);
        assert!(s.is_unit_variance());
    }

    #[test]
    fn constant_column_is_degenerate() {
        let x = DataMatrix::new(
            array![[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]],
            vec!["a".into(), "flat".into()],
        )
        .unwrap();
        let err = scale_unit_variance(&center(&x)).unwrap_err();
        assert_eq!(err, Error::DegenerateFeature("flat".into()));

        let tenths = dm(Array2::from_elem((7, 1), 0.1));
        assert!(scale_unit_variance(&center(&tenths)).is_err());
    }

    #[test]
    fn scaled_columns_have_unit_variance() {
        let x = dm(array![[1.0, 10.0], [4.0, -3.0], [2.5, 7.0], [9.0, 0.5]]);
        let s = scale_unit_variance(&center(&x)).unwrap();
        for col in s.values().columns() {
            assert!(mean(col).abs() < 1e-12);
            assert!((sample_variance(col) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn subset_cases() {
        let x = dm(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(subset_features(&x, &["f1", "f2", "f3"]).unwrap(), x);
        let one = subset_features(&x, &["f1"]).unwrap();
        assert_eq!(one.values(), &array![[1.0], [4.0]]);
        assert_eq!(one.feature_ids(), &["f1".to_string()]);
        assert_eq!(
            subset_features(&x, &["nope"]).unwrap_err(),
            Error::UnknownFeature("nope".into())
        );
        let empty: [&str; 0] = [];
        assert_eq!(subset_features(&x, &empty).unwrap_err(), Error::NoFeaturesSelected);
    }

    #[test]
    fn csv_round_trip_and_delimiter() {
        let text = "a;b\n1.5;2\n-3e-1; 4\n";
        let x = DataMatrix::from_csv_reader(text.as_bytes(), b';').unwrap();
        assert_eq!(x.values(), &array![[1.5, 2.0], [-0.3, 4.0]]);
        assert_eq!(x.feature_ids(), &["a".to_string(), "b".to_string()]);

        let mut buf = Vec::new();
        x.write_csv(&mut buf, b',').unwrap();
        let back = DataMatrix::from_csv_reader(buf.as_slice(), b',').unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn csv_errors() {
        assert!(DataMatrix::from_csv_reader("a,b\n1,x\n2,3\n".as_bytes(), b',').is_err());
        assert!(DataMatrix::from_csv_reader("a,b\n1,NaN\n2,3\n".as_bytes(), b',').is_err());
        assert!(DataMatrix::from_csv_reader("a,b\n1\n2,3\n".as_bytes(), b',').is_err());
    }

    #[test]
    fn label_file() {
        let l = read_labels_csv("cluster\nB\nA\nB\nA\n".as_bytes()).unwrap();
        assert_eq!(l, vec![0, 1, 0, 1]);
        assert!(read_labels_csv("cluster\n1\n1\n".as_bytes()).is_err());
        assert!(read_labels_csv("cluster\n1\n2\n3\n".as_bytes()).is_err());
    }
}
