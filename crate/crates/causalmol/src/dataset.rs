//! Multi-task dataset files: TSV with per-task binary labels (blank = missing),
//! train/test task splits, and ground-truth atom annotations.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

/// Header `smiles<TAB>task_0<TAB>...`; each row a SMILES string followed by
/// `1`, `0`, or empty per task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub smiles: Vec<String>,
    pub labels: Vec<Vec<Option<bool>>>,
    pub task_names: Vec<String>,
}

impl Dataset {
    pub fn num_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn num_molecules(&self) -> usize {
        self.smiles.len()
    }

    pub fn label(&self, molecule: usize, task: usize) -> Option<bool> {
        self.labels[molecule][task]
    }

    /// Molecules with a known label for `task`, in id order.
    pub fn labeled_molecules(&self, task: usize) -> impl Iterator<Item = (usize, bool)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(move |(m, row)| row[task].map(|l| (m, l)))
    }

    pub fn load_tsv(path: &Path) -> Result<Dataset, DatasetError> {
        let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| DatasetError::Format {
                path: path.display().to_string(),
                line: 1,
                message: "empty file".into(),
            })?
            .1
            .map_err(|e| io_err(path, e))
            .map(|h| (0, h))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.first() != Some(&"smiles") {
            return Err(DatasetError::Format {
                path: path.display().to_string(),
                line: 1,
                message: format!("header must start with `smiles`, got `{header}`"),
            });
        }
        let task_names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut smiles = Vec::new();
        let mut labels = Vec::new();
        for (idx, line) in lines {
            let line = line.map_err(|e| io_err(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != task_names.len() + 1 {
                return Err(DatasetError::Format {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: format!(
                        "expected {} fields, got {}",
                        task_names.len() + 1,
                        fields.len()
                    ),
                });
            }
            smiles.push(fields[0].to_string());
            let row: Result<Vec<Option<bool>>, DatasetError> = fields[1..]
                .iter()
                .map(|f| match *f {
                    "" => Ok(None),
                    "1" => Ok(Some(true)),
                    "0" => Ok(Some(false)),
                    other => Err(DatasetError::Format {
                        path: path.display().to_string(),
                        line: idx + 1,
                        message: format!("label must be 1, 0, or empty, got `{other}`"),
                    }),
                })
                .collect();
            labels.push(row?);
        }
        Ok(Dataset { smiles, labels, task_names })
    }

    pub fn save_tsv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::new();
        out.push_str("smiles");
        for t in &self.task_names {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
        for (s, row) in self.smiles.iter().zip(&self.labels) {
            out.push_str(s);
            for l in row {
                out.push('\t');
                match l {
                    Some(true) => out.push('1'),
                    Some(false) => out.push('0'),
                    None => {}
                }
            }
            out.push('\n');
        }
        let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train_tasks: Vec<usize>,
    pub test_tasks: Vec<usize>,
}

impl Splits {
    pub fn load(path: &Path) -> Result<Splits, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| DatasetError::Json { path: path.display().to_string(), source: e })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// One JSON record per line: molecule id, its SMILES, and the atom indices of
/// the planted causal motif (empty for negatives).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub molecule_id: usize,
    pub smiles: String,
    pub atoms: Vec<usize>,
}

pub fn load_groundtruth(path: &Path) -> Result<BTreeMap<usize, Vec<usize>>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec: GroundTruthRecord = serde_json::from_str(line).map_err(|e| DatasetError::Format {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.insert(rec.molecule_id, rec.atoms);
    }
    Ok(out)
}

pub fn save_groundtruth(path: &Path, records: &[GroundTruthRecord]) -> Result<(), DatasetError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("serializable"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}
