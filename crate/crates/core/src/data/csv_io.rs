use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use super::{DataError, Dataset};
use crate::ad::Tensor;

/// Reads a headed, comma-separated file. Every column other than
/// `label_column` must be numeric. Labels are mapped to `0..C` in sorted
/// order (numeric order when every label parses as a number).
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    read_csv(file, label_column, name)
}

pub(crate) fn read_csv(reader: impl std::io::Read, label_column: &str, name: String) -> Result<Dataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateHeader(h.clone()));
        }
    }
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(label_column.to_string()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let row = r + 1;
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| DataError::NonNumeric {
                    row,
                    column: header[c].clone(),
                    value: cell.to_string(),
                })?;
            values.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(DataError::Empty);
    }

    let class_labels = sorted_labels(&raw_labels);
    let y = raw_labels
        .iter()
        .map(|l| class_labels.iter().position(|c| c == l).expect("label collected"))
        .collect();
    let x = Tensor::matrix(raw_labels.len(), feature_names.len(), values).map_err(|e| DataError::Csv(e.to_string()))?;
    Ok(Dataset {
        name,
        x,
        y,
        feature_names,
        class_labels,
    })
}

fn sorted_labels(raw: &[String]) -> Vec<String> {
    let unique: BTreeSet<&String> = raw.iter().collect();
    let mut labels: Vec<String> = unique.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(labels).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        labels = pairs.into_iter().map(|(_, l)| l).collect();
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, label: &str) -> Result<Dataset, DataError> {
        read_csv(text.as_bytes(), label, "t".into())
    }

    #[test]
    fn three_rows_recovered_exactly() {
        let ds = parse("lsat,gpa,pass\n30.5,3.1,1\n41,2.25,0\n-2e1,4,1\n", "pass").unwrap();
        assert_eq!(ds.feature_names, ["lsat", "gpa"]);
        assert_eq!(ds.x.data(), &[30.5, 3.1, 41.0, 2.25, -20.0, 4.0]);
        assert_eq!(ds.y, [1, 0, 1]);
        assert_eq!(ds.class_labels, ["0", "1"]);
    }

    #[test]
    fn text_cell_reports_row_and_column() {
        let err = parse("lsat,gpa,pass\n30,3.1,1\n41,high,0\n", "pass").unwrap_err();
        match err {
            DataError::NonNumeric { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "gpa");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            parse("a,b\n1,2\n", "y"),
            Err(DataError::MissingLabelColumn(_))
        ));
        assert!(matches!(
            parse("a,a,y\n1,2,0\n", "y"),
            Err(DataError::DuplicateHeader(_))
        ));
    }

    #[test]
    fn numeric_labels_sort_numerically() {
        let ds = parse("f,y\n1,10\n2,9\n3,10\n", "y").unwrap();
        assert_eq!(ds.class_labels, ["9", "10"]);
        assert_eq!(ds.y, [1, 0, 1]);
    }
}
