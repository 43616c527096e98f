//! Covariate tables and formula-based design matrices.
//!
//! Formulas combine column names with `+` (add terms) and `*` (all main
//! effects and interactions of the factors). An intercept is always present
//! and the first level of each categorical column is dropped.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Categorical(Vec<String>),
    Numeric(Vec<f64>),
}

impl Column {
    fn len(&self) -> usize {
        match self {
            Column::Categorical(v) => v.len(),
            Column::Numeric(v) => v.len(),
        }
    }
}

/// Typed covariate columns, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub ids: Vec<String>,
    pub columns: Vec<(String, Column)>,
}

impl CovariateTable {
    pub fn new(ids: Vec<String>, columns: Vec<(String, Column)>) -> Result<Self> {
        for (name, col) in &columns {
            if col.len() != ids.len() {
                return Err(Error::InvalidInput(format!(
                    "column {name} has {} rows, expected {}",
                    col.len(),
                    ids.len()
                )));
            }
        }
        Ok(CovariateTable { ids, columns })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    /// Rows reordered to follow `ids`.
    pub fn align_to(&self, ids: &[String]) -> Result<CovariateTable> {
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        if index.len() != self.ids.len() {
            return Err(Error::InvalidInput("covariate ids are not unique".into()));
        }
        let rows: Vec<usize> = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidInput(format!("no covariate row for image id {id:?}")))
            })
            .collect::<Result<_>>()?;
        let columns = self
            .columns
            .iter()
            .map(|(n, c)| {
                let c = match c {
                    Column::Categorical(v) => Column::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
                    Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
                };
                (n.clone(), c)
            })
            .collect();
        Ok(CovariateTable {
            ids: ids.to_vec(),
            columns,
        })
    }
}

/// Reads a headed CSV. Columns named in `categorical`, and any column with a
/// value that does not parse as a number, are categorical.
pub fn read_covariates(path: &Path, id_column: &str, categorical: &[String]) -> Result<CovariateTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let id_pos = headers
        .iter()
        .position(|h| h == id_column)
        .ok_or_else(|| Error::InvalidInput(format!("covariate file has no {id_column:?} column")))?;
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in reader.records() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            raw[j].push(field.trim().to_owned());
        }
    }
    let ids = std::mem::take(&mut raw[id_pos]);
    let mut columns = Vec::new();
    for (j, values) in raw.into_iter().enumerate() {
        if j == id_pos {
            continue;
        }
        let name = headers[j].clone();
        let parsed: Option<Vec<f64>> = if categorical.contains(&name) {
            None
        } else {
            values.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect()
        };
        let col = match parsed {
            Some(v) => Column::Numeric(v),
            None => {
                if values.iter().any(|v| v.is_empty()) {
                    return Err(Error::InvalidInput(format!("column {name} has an empty category")));
                }
                Column::Categorical(values)
            }
        };
        columns.push((name, col));
    }
    CovariateTable::new(ids, columns)
}

/// Parsed formula: terms in expansion order, each a list of column names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaSpec {
    pub expression: String,
    pub terms: Vec<Vec<String>>,
}

impl FormulaSpec {
    pub fn parse(expression: &str) -> Result<Self> {
        let mut terms: Vec<Vec<String>> = Vec::new();
        let trimmed = expression.trim();
        if trimmed.is_empty() || trimmed == "1" {
            return Ok(FormulaSpec {
                expression: expression.to_owned(),
                terms,
            });
        }
        for part in trimmed.split('+') {
            let factors: Vec<String> = part.split('*').map(|f| f.trim().to_owned()).collect();
            for f in &factors {
                let valid = !f.is_empty()
                    && f.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.');
                if !valid {
                    return Err(Error::InvalidInput(format!(
                        "bad formula term {f:?}: only column names joined by + and * are supported"
                    )));
                }
            }
            let mut seen = BTreeSet::new();
            if factors.iter().any(|f| !seen.insert(f)) {
                return Err(Error::InvalidInput(format!("repeated factor in {:?}", part.trim())));
            }
            // every nonempty subset, by degree then position
            let m = factors.len();
            let mut subsets: Vec<Vec<usize>> = (1u32..(1 << m))
                .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
                .collect();
            subsets.sort_by(|a: &Vec<usize>, b| a.len().cmp(&b.len()).then(a.cmp(b)));
            for s in subsets {
                let term: Vec<String> = s.iter().map(|&i| factors[i].clone()).collect();
                let key: BTreeSet<&String> = term.iter().collect();
                if !terms.iter().any(|t| t.iter().collect::<BTreeSet<_>>() == key) {
                    terms.push(term);
                }
            }
        }
        Ok(FormulaSpec {
            expression: expression.to_owned(),
            terms,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnCoding {
    /// Sorted levels; the first is the baseline.
    Categorical(Vec<String>),
    Numeric,
}

/// Reusable encoding: the formula plus the level sets seen when fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEncoder {
    pub formula: FormulaSpec,
    pub codings: Vec<(String, ColumnCoding)>,
    pub column_names: Vec<String>,
}

impl DesignEncoder {
    pub fn fit(table: &CovariateTable, formula: &FormulaSpec) -> Result<Self> {
        let mut codings: Vec<(String, ColumnCoding)> = Vec::new();
        for term in &formula.terms {
            for name in term {
                if codings.iter().any(|(n, _)| n == name) {
                    continue;
                }
                let col = table
                    .column(name)
                    .ok_or_else(|| Error::InvalidInput(format!("formula references unknown column {name:?}")))?;
                let coding = match col {
                    Column::Numeric(_) => ColumnCoding::Numeric,
                    Column::Categorical(v) => {
                        let levels: BTreeSet<&String> = v.iter().collect();
                        if levels.is_empty() {
                            return Err(Error::InvalidInput(format!("column {name} has no levels")));
                        }
                        ColumnCoding::Categorical(levels.into_iter().cloned().collect())
                    }
                };
                codings.push((name.clone(), coding));
            }
        }
        let mut enc = DesignEncoder {
            formula: formula.clone(),
            codings,
            column_names: Vec::new(),
        };
        enc.column_names = enc.names();
        Ok(enc)
    }

    fn coding(&self, name: &str) -> &ColumnCoding {
        &self.codings.iter().find(|(n, _)| n == name).expect("coding exists for every factor").1
    }

    /// Names of the indicator/value columns a single factor contributes.
    fn factor_names(&self, name: &str) -> Vec<String> {
        match self.coding(name) {
            ColumnCoding::Numeric => vec![name.to_owned()],
            ColumnCoding::Categorical(levels) => levels[1..].iter().map(|l| format!("{name}[{l}]")).collect(),
        }
    }

    fn names(&self) -> Vec<String> {
        let mut out = vec!["(Intercept)".to_owned()];
        for term in &self.formula.terms {
            let mut combos = vec![String::new()];
            for name in term {
                let parts = self.factor_names(name);
                combos = combos
                    .iter()
                    .flat_map(|c| {
                        parts.iter().map(move |p| if c.is_empty() { p.clone() } else { format!("{c}:{p}") })
                    })
                    .collect();
            }
            out.extend(combos);
        }
        out
    }

    pub fn width(&self) -> usize {
        self.column_names.len()
    }

    /// Values of one factor for row `i`, one entry per factor column.
    fn factor_values(&self, table: &CovariateTable, name: &str, i: usize) -> Result<Vec<f64>> {
        let col = table
            .column(name)
            .ok_or_else(|| Error::InvalidInput(format!("covariates lack column {name:?}")))?;
        match (self.coding(name), col) {
            (ColumnCoding::Numeric, Column::Numeric(v)) => Ok(vec![v[i]]),
            (ColumnCoding::Categorical(levels), Column::Categorical(v)) => {
                let pos = levels
                    .iter()
                    .position(|l| *l == v[i])
                    .ok_or_else(|| Error::InvalidInput(format!("unseen category {:?} in column {name}", v[i])))?;
                Ok((1..levels.len()).map(|j| if j == pos { 1.0 } else { 0.0 }).collect())
            }
            (ColumnCoding::Categorical(levels), Column::Numeric(v)) => {
                // a level set such as years may be read back as numbers
                let s = format_level(v[i]);
                let pos = levels
                    .iter()
                    .position(|l| *l == s)
                    .ok_or_else(|| Error::InvalidInput(format!("unseen category {s:?} in column {name}")))?;
                Ok((1..levels.len()).map(|j| if j == pos { 1.0 } else { 0.0 }).collect())
            }
            (ColumnCoding::Numeric, Column::Categorical(_)) => {
                Err(Error::InvalidInput(format!("column {name} must be numeric")))
            }
        }
    }

    pub fn encode(&self, table: &CovariateTable) -> Result<Array2<f64>> {
        let n = table.len();
        let mut out = Array2::zeros((n, self.width()));
        for i in 0..n {
            let mut row = vec![1.0];
            for term in &self.formula.terms {
                let mut combos = vec![1.0];
                for name in term {
                    let vals = self.factor_values(table, name, i)?;
                    combos = combos.iter().flat_map(|c| vals.iter().map(move |v| c * v)).collect();
                }
                row.extend(combos);
            }
            debug_assert_eq!(row.len(), self.width());
            out.row_mut(i).assign(&ndarray::Array1::from(row));
        }
        Ok(out)
    }
}

fn format_level(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Design matrix and column names for `table` under `formula`.
pub fn build_design_matrix(table: &CovariateTable, formula: &FormulaSpec) -> Result<(Array2<f64>, DesignEncoder)> {
    let encoder = DesignEncoder::fit(table, formula)?;
    let x = encoder.encode(table)?;
    Ok((x, encoder))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> CovariateTable {
        let a = ["x", "y", "z", "x", "y", "z"].map(String::from).to_vec();
        let b = ["u", "u", "u", "w", "w", "w"].map(String::from).to_vec();
        CovariateTable::new(
            (0..6).map(|i| format!("img{i}")).collect(),
            vec![
                ("a".into(), Column::Categorical(a)),
                ("b".into(), Column::Categorical(b)),
                ("score".into(), Column::Numeric(vec![0.5, 1.5, -2.0, 0.0, 3.25, 1.0])),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_categorical() {
        let (x, enc) = build_design_matrix(&table(), &FormulaSpec::parse("a").unwrap()).unwrap();
        assert_eq!(enc.column_names, vec!["(Intercept)", "a[y]", "a[z]"]);
        assert_eq!(x.row(1).to_vec(), vec![1.0, 1.0, 0.0]);
        assert_eq!(x.row(3).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn interaction_expansion() {
        let f = FormulaSpec::parse("a*b").unwrap();
        assert_eq!(f.terms, vec![vec!["a"], vec!["b"], vec!["a", "b"]]);
        let (x, enc) = build_design_matrix(&table(), &f).unwrap();
        assert_eq!(enc.width(), 6);
        assert_eq!(enc.column_names[5], "a[z]:b[w]");
        assert_eq!(x.row(5).to_vec(), vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn numeric_passes_through() {
        let (x, _) = build_design_matrix(&table(), &FormulaSpec::parse("score + a").unwrap()).unwrap();
        assert_eq!(x.column(1).to_vec(), vec![0.5, 1.5, -2.0, 0.0, 3.25, 1.0]);
    }

    #[test]
    fn errors() {
        assert!(build_design_matrix(&table(), &FormulaSpec::parse("missing").unwrap()).is_err());
        assert!(FormulaSpec::parse("a:b").is_err());
        assert!(FormulaSpec::parse("log(a)").is_err());
        assert!(FormulaSpec::parse("a*a").is_err());
        let (_, enc) = build_design_matrix(&table(), &FormulaSpec::parse("a").unwrap()).unwrap();
        let other = CovariateTable::new(
            vec!["q".into()],
            vec![("a".into(), Column::Categorical(vec!["new".into()]))],
        )
        .unwrap();
        assert!(enc.encode(&other).unwrap_err().to_string().contains("unseen"));
    }

    #[test]
    fn intercept_only() {
        let (x, enc) = build_design_matrix(&table(), &FormulaSpec::parse("1").unwrap()).unwrap();
        assert_eq!(enc.width(), 1);
        assert!(x.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn alignment_follows_ids() {
        let t = table();
        let ids = vec!["img2".to_string(), "img0".to_string()];
        let aligned = t.align_to(&ids).unwrap();
        assert_eq!(aligned.column("score"), Some(&Column::Numeric(vec![-2.0, 0.5])));
        assert!(t.align_to(&["nope".to_string()]).is_err());
    }
}
