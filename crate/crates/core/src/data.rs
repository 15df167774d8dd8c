//! CSV data loading.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::GroupInfo;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    /// n×k numeric cells, columns ordered as `names`.
    pub values: DMatrix<f64>,
    /// 0-based group level of each row.
    pub group: Vec<usize>,
    pub group_column: Option<String>,
    /// Group labels in order of first appearance.
    pub levels: Vec<String>,
    /// Rows removed because a required cell was missing.
    pub dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "NaN" | "nan" | ".")
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn group_info(&self) -> GroupInfo {
        let mut sizes = vec![0; self.levels.len()];
        for &g in &self.group {
            sizes[g] += 1;
        }
        GroupInfo {
            group_variable: self.group_column.clone(),
            levels: self.levels.clone(),
            sizes,
        }
    }

    /// Per-group n_g×p matrices with columns in the order of `vars`.
    pub fn group_matrices(&self, vars: &[String]) -> Result<Vec<DMatrix<f64>>> {
        let idx: Vec<usize> = vars
            .iter()
            .map(|v| {
                self.names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| Error::Data(format!("column `{v}` not found")))
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(self.levels.len());
        for g in 0..self.levels.len() {
            let rows: Vec<usize> = (0..self.n()).filter(|&i| self.group[i] == g).collect();
            out.push(DMatrix::from_fn(rows.len(), idx.len(), |i, j| {
                self.values[(rows[i], idx[j])]
            }));
        }
        Ok(out)
    }

    /// Builds a single-group dataset from a matrix.
    pub fn from_matrix(names: Vec<String>, values: DMatrix<f64>) -> Self {
        let n = values.nrows();
        Dataset {
            names,
            values,
            group: vec![0; n],
            group_column: None,
            levels: vec!["1".into()],
            dropped: 0,
        }
    }
}

/// Reads a CSV file with a header row.
///
/// `required` lists the columns that must be present and numeric; rows with
/// a missing cell in any of them are dropped and counted. When `required`
/// is `None` every non-group column is required.
pub fn load_csv(
    path: &Path,
    group_column: Option<&str>,
    required: Option<&[String]>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let group_idx = match group_column {
        Some(g) => Some(header.iter().position(|h| h == g).ok_or_else(|| {
            Error::Data(format!(
                "group column `{g}` not found in {}",
                path.display()
            ))
        })?),
        None => None,
    };
    let names: Vec<String> = match required {
        Some(req) => req.to_vec(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != group_idx)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    let cols: Vec<usize> = names
        .iter()
        .map(|v| {
            header
                .iter()
                .position(|h| h == v)
                .ok_or_else(|| Error::Data(format!("column `{v}` not found in {}", path.display())))
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut group = Vec::new();
    let mut levels: Vec<String> = Vec::new();
    let mut dropped = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row_no = line + 2;
        let mut row = Vec::with_capacity(cols.len());
        let mut missing = false;
        for (&c, name) in cols.iter().zip(&names) {
            let cell = rec.get(c).unwrap_or("");
            if is_missing(cell) {
                missing = true;
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "row {row_no}, column `{name}`: non-numeric value `{cell}`"
                ))
            })?;
            row.push(v);
        }
        let label = group_idx.map(|g| rec.get(g).unwrap_or("").to_string());
        if missing || label.as_deref().is_some_and(is_missing) {
            dropped += 1;
            continue;
        }
        let g = match label {
            None => 0,
            Some(l) => match levels.iter().position(|x| *x == l) {
                Some(i) => i,
                None => {
                    levels.push(l);
                    levels.len() - 1
                }
            },
        };
        group.push(g);
        cells.extend(row);
    }
    if group_idx.is_none() {
        levels.push("1".into());
    }
    let n = group.len();
    if n == 0 {
        return Err(Error::Data(format!("{}: no complete rows", path.display())));
    }
    Ok(Dataset {
        values: DMatrix::from_row_slice(n, names.len(), &cells),
        names,
        group,
        group_column: group_column.map(str::to_string),
        levels,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_groups_in_first_appearance_order() {
        let f = write("g,a,b\nz,1,2\ny,3,4\nz,5,6\n");
        let d = load_csv(f.path(), Some("g"), None).unwrap();
        assert_eq!(d.levels, ["z", "y"]);
        assert_eq!(d.group, [0, 1, 0]);
        assert_eq!(d.names, ["a", "b"]);
        let mats = d.group_matrices(&["b".into(), "a".into()]).unwrap();
        assert_eq!(
            mats[0],
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 6.0, 5.0])
        );
        assert_eq!(d.group_info().sizes, [2, 1]);
    }

    #[test]
    fn drops_missing_rows_and_rejects_text() {
        let f = write("a,b,c\n1,2,x\n,3,4\n5,NA,6\n7,8,9\n");
        let req = ["a".to_string(), "b".to_string()];
        let d = load_csv(f.path(), None, Some(&req)).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.dropped, 2);

        let f = write("y1,y2\n1,2\nabc,3\n");
        let err = load_csv(f.path(), None, None).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("y1"), "{err}");

        let f = write("y1\n1\n");
        assert!(load_csv(f.path(), None, Some(&["y9".to_string()])).is_err());
        let f = write("y1\nNA\n");
        assert!(load_csv(f.path(), None, None).is_err());
    }
}
