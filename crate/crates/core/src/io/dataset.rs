use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use super::IoError;
use crate::data::{Compound, HitDirection, TaskDataset};
use crate::featurize::{featurize, FeaturizedGraph};
use crate::metrics::pchembl;
use crate::smiles::parse_smiles;

const SMILES_COLUMN: &str = "smiles";
const IC50_SUFFIX: &str = "_ic50_molar";

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Direction of plain task columns without an override.
    pub default_direction: HitDirection,
    pub directions: HashMap<String, HitDirection>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            default_direction: HitDirection::LowerIsBetter,
            directions: HashMap::new(),
        }
    }
}

/// A rejected data row. `line` counts from 1 with the header on line 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowError {
    pub line: usize,
    pub smiles: String,
    pub message: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub dataset: Option<TaskDataset>,
    pub rows: usize,
    pub accepted: usize,
    pub rejected: Vec<RowError>,
    /// Distinct compounds after merging duplicate SMILES.
    pub compounds: usize,
}

#[derive(Debug, Clone)]
struct TaskColumn {
    column: usize,
    name: String,
    ic50: bool,
}

fn header_layout(headers: &csv::StringRecord) -> Result<(usize, Vec<TaskColumn>), IoError> {
    let smiles = headers
        .iter()
        .position(|h| h.trim() == SMILES_COLUMN)
        .ok_or_else(|| IoError::Schema(format!("missing `{SMILES_COLUMN}` column")))?;
    let mut tasks: Vec<TaskColumn> = Vec::new();
    for (column, h) in headers.iter().enumerate() {
        if column == smiles {
            continue;
        }
        let h = h.trim();
        let (name, ic50) = match h.strip_suffix(IC50_SUFFIX) {
            Some(prefix) if !prefix.is_empty() => (prefix.to_string(), true),
            _ => (h.to_string(), false),
        };
        if name.is_empty() {
            return Err(IoError::Schema(format!("column {} has an empty name", column + 1)));
        }
        if tasks.iter().any(|t| t.name == name) {
            return Err(IoError::Schema(format!("task {name:?} appears twice")));
        }
        tasks.push(TaskColumn { column, name, ic50 });
    }
    if tasks.is_empty() {
        return Err(IoError::Schema("no task columns".into()));
    }
    Ok((smiles, tasks))
}

type ParsedRow = Result<(String, FeaturizedGraph, Vec<Option<f64>>), String>;

fn parse_row(record: &csv::StringRecord, smiles_col: usize, tasks: &[TaskColumn]) -> ParsedRow {
    let smiles = record.get(smiles_col).unwrap_or("").trim().to_string();
    if smiles.is_empty() {
        return Err("empty SMILES".into());
    }
    let graph = parse_smiles(&smiles).map_err(|e| format!("SMILES: {e}"))?;
    let mut labels = Vec::with_capacity(tasks.len());
    for t in tasks {
        let cell = record.get(t.column).unwrap_or("").trim();
        if cell.is_empty() {
            labels.push(None);
            continue;
        }
        let v: f64 = cell
            .parse()
            .map_err(|_| format!("task {}: {cell:?} is not a number", t.name))?;
        if !v.is_finite() {
            return Err(format!("task {}: non-finite value", t.name));
        }
        labels.push(Some(if t.ic50 {
            pchembl(v).map_err(|e| format!("task {}: {e}", t.name))?
        } else {
            v
        }));
    }
    if labels.iter().all(Option::is_none) {
        return Err("row has no labels".into());
    }
    Ok((smiles, featurize(&graph), labels))
}

/// Read a labelled dataset. Every data row is either accepted or reported
/// with its line number; rows sharing a SMILES string are merged by
/// averaging each task's labels.
pub fn ingest_csv<R: Read>(reader: R, options: &IngestOptions) -> Result<IngestReport, IoError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (smiles_col, tasks) = header_layout(&headers)?;
    let records: Vec<(usize, Result<csv::StringRecord, String>)> = rdr
        .records()
        .enumerate()
        .map(|(i, r)| (i + 2, r.map_err(|e| format!("CSV: {e}"))))
        .collect();
    let parsed: Vec<(usize, String, ParsedRow)> = records
        .into_par_iter()
        .map(|(line, rec)| match rec {
            Ok(rec) => {
                let raw = rec.get(smiles_col).unwrap_or("").to_string();
                (line, raw, parse_row(&rec, smiles_col, &tasks))
            }
            Err(e) => (line, String::new(), Err(e)),
        })
        .collect();

    let rows = parsed.len();
    let mut rejected = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut merged: BTreeMap<String, (FeaturizedGraph, Vec<(f64, usize)>)> = BTreeMap::new();
    for (line, raw, row) in parsed {
        match row {
            Ok((smiles, graph, labels)) => {
                let entry = merged.entry(smiles.clone()).or_insert_with(|| {
                    order.push(smiles);
                    (graph, vec![(0.0, 0); tasks.len()])
                });
                for (acc, v) in entry.1.iter_mut().zip(labels) {
                    if let Some(v) = v {
                        acc.0 += v;
                        acc.1 += 1;
                    }
                }
            }
            Err(message) => rejected.push(RowError {
                line,
                smiles: raw,
                message,
            }),
        }
    }
    let accepted = rows - rejected.len();
    let compounds_n = order.len();
    let dataset = if order.is_empty() {
        None
    } else {
        let mut compounds = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        for smiles in order {
            let (graph, sums) = merged.remove(&smiles).expect("inserted above");
            labels.push(
                sums.iter()
                    .map(|&(s, n)| (n > 0).then(|| s / n as f64))
                    .collect(),
            );
            compounds.push(Compound { smiles, graph });
        }
        let directions = tasks
            .iter()
            .map(|t| {
                options.directions.get(&t.name).copied().unwrap_or(if t.ic50 {
                    HitDirection::HigherIsBetter
                } else {
                    options.default_direction
                })
            })
            .collect();
        Some(TaskDataset::new(
            compounds,
            tasks.iter().map(|t| t.name.clone()).collect(),
            directions,
            labels,
        )?)
    };
    Ok(IngestReport {
        dataset,
        rows,
        accepted,
        rejected,
        compounds: compounds_n,
    })
}

/// One row of a screening library.
#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub line: usize,
    pub smiles: String,
    pub graph: Result<FeaturizedGraph, String>,
}

/// Read a CSV whose `smiles` column lists compounds to score; other columns
/// are ignored.
pub fn read_library<R: Read>(reader: R) -> Result<Vec<LibraryEntry>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == SMILES_COLUMN)
        .ok_or_else(|| IoError::Schema(format!("missing `{SMILES_COLUMN}` column")))?;
    let records: Vec<(usize, String)> = rdr
        .records()
        .enumerate()
        .map(|(i, r)| Ok((i + 2, r?.get(col).unwrap_or("").trim().to_string())))
        .collect::<Result<_, csv::Error>>()?;
    Ok(records
        .into_par_iter()
        .map(|(line, smiles)| {
            let graph = parse_smiles(&smiles)
                .map(|g| featurize(&g))
                .map_err(|e| e.to_string());
            LibraryEntry { line, smiles, graph }
        })
        .collect())
}

/// Write a dataset table: `smiles`, then one column per task with empty
/// cells for missing labels.
pub fn write_dataset_csv<W: Write>(
    writer: W,
    task_names: &[String],
    rows: impl IntoIterator<Item = (String, Vec<Option<f64>>)>,
) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![SMILES_COLUMN.to_string()];
    header.extend(task_names.iter().cloned());
    w.write_record(&header)?;
    for (smiles, labels) in rows {
        let mut rec = vec![smiles];
        rec.extend(labels.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn dataset_rows(ds: &TaskDataset) -> impl Iterator<Item = (String, Vec<Option<f64>>)> + '_ {
    (0..ds.len()).map(move |i| {
        (
            ds.compound(i).smiles.clone(),
            (0..ds.num_tasks()).map(|t| ds.label(i, t)).collect(),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingests_labels_and_gaps() {
        let csv = "smiles,T0,T1\nCCO,-7.5,\nc1ccccc1,,-6\nCCN,-5,-4\n";
        let r = ingest_csv(csv.as_bytes(), &IngestOptions::default()).unwrap();
        let ds = r.dataset.unwrap();
        assert_eq!((r.rows, r.accepted, r.rejected.len()), (3, 3, 0));
        assert_eq!(ds.label(0, 0), Some(-7.5));
        assert_eq!(ds.label(0, 1), None);
        assert_eq!(ds.label(1, 1), Some(-6.0));
        assert_eq!(ds.task_names(), ["T0", "T1"]);
    }

    #[test]
    fn rejects_rows_with_line_numbers() {
        let csv = "smiles,T0\nCCO,-7\nC1CC,-3\nCC,abc\n,1\nCC,\nCCC,-2\n";
        let r = ingest_csv(csv.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(r.rows, 6);
        assert_eq!(r.accepted + r.rejected.len(), r.rows);
        let lines: Vec<usize> = r.rejected.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6]);
        assert!(r.rejected[0].message.contains("SMILES"));
    }

    #[test]
    fn ic50_columns_become_pchembl() {
        let csv = "smiles,EGFR_ic50_molar\nCCO,1e-5\nCCN,0\n";
        let r = ingest_csv(csv.as_bytes(), &IngestOptions::default()).unwrap();
        let ds = r.dataset.unwrap();
        assert_eq!(ds.task_names(), ["EGFR"]);
        assert_eq!(ds.label(0, 0), Some(5.0));
        assert_eq!(ds.directions()[0], HitDirection::HigherIsBetter);
        assert_eq!(r.rejected.len(), 1);
    }

    #[test]
    fn duplicates_are_averaged() {
        let csv = "smiles,T0,T1\nCCO,1,\nCCO,3,5\nCC,2,\n";
        let r = ingest_csv(csv.as_bytes(), &IngestOptions::default()).unwrap();
        let ds = r.dataset.unwrap();
        assert_eq!(r.accepted, 3);
        assert_eq!(r.compounds, 2);
        assert_eq!(ds.label(0, 0), Some(2.0));
        assert_eq!(ds.label(0, 1), Some(5.0));
    }

    #[test]
    fn header_errors() {
        let opts = IngestOptions::default();
        assert!(matches!(ingest_csv("mol,T0\nC,1\n".as_bytes(), &opts), Err(IoError::Schema(_))));
        assert!(matches!(ingest_csv("smiles\nC\n".as_bytes(), &opts), Err(IoError::Schema(_))));
        assert!(matches!(
            ingest_csv("smiles,A,A_ic50_molar\nC,1,1\n".as_bytes(), &opts),
            Err(IoError::Schema(_))
        ));
    }

    #[test]
    fn write_then_ingest() {
        let mut buf = Vec::new();
        write_dataset_csv(
            &mut buf,
            &["a".into(), "b".into()],
            vec![("CCO".to_string(), vec![Some(1.5), None])],
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "smiles,a,b\nCCO,1.5,\n");
        let ds = ingest_csv(buf.as_slice(), &IngestOptions::default()).unwrap().dataset.unwrap();
        assert_eq!(ds.label(0, 0), Some(1.5));
    }

    #[test]
    fn library_keeps_failures_in_place() {
        let lib = read_library("id,smiles\n1,CCO\n2,C1C\n".as_bytes()).unwrap();
        assert_eq!(lib.len(), 2);
        assert!(lib[0].graph.is_ok());
        assert!(lib[1].graph.is_err());
        assert_eq!(lib[1].line, 3);
    }
}
