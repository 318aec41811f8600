use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, Label, Profile, Provenance, Sex, Visit};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 5] = ["subject_id", "label", "sex", "visit_index", "age_offset_months"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortFormat {
    Csv,
    Jsonl,
}

impl CohortFormat {
    /// `.jsonl` / `.ndjson` select JSONL, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => CohortFormat::Jsonl,
            _ => CohortFormat::Csv,
        }
    }
}

/// Reads a cohort file. Rows are grouped by `subject_id` in order of first
/// appearance and each subject's visits are sorted by `visit_index`.
pub fn load_cohort(path: &Path, format: CohortFormat) -> Result<Cohort> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let meta = file.metadata().map_err(|e| Error::io(path, e))?;
    if meta.len() == 0 {
        return Err(Error::Schema {
            row: 0,
            message: "empty file".into(),
        });
    }
    match format {
        CohortFormat::Csv => load_csv(BufReader::new(file)),
        CohortFormat::Jsonl => load_jsonl(BufReader::new(file)),
    }
}

struct Builder {
    order: Vec<String>,
    by_id: HashMap<String, Profile>,
}

impl Builder {
    fn new() -> Self {
        Self {
            order: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    fn add_visit(&mut self, row: usize, id: &str, label: Label, sex: Sex, visit: Visit) -> Result<()> {
        let prof = self.by_id.entry(id.to_string()).or_insert_with(|| {
            self.order.push(id.to_string());
            Profile {
                subject_id: id.to_string(),
                label,
                sex,
                visits: Vec::new(),
            }
        });
        if prof.label != label {
            return Err(Error::Schema {
                row,
                message: format!("subject {id} changes label from {} to {label}", prof.label),
            });
        }
        if prof.visits.iter().any(|v| v.visit_index == visit.visit_index) {
            return Err(Error::Duplicate {
                subject_id: id.to_string(),
                visit_index: visit.visit_index,
            });
        }
        prof.visits.push(visit);
        Ok(())
    }

    fn finish(mut self, feature_names: Vec<String>) -> Result<Cohort> {
        let profiles = self
            .order
            .iter()
            .map(|id| {
                let mut p = self.by_id.remove(id).expect("ordered id present");
                p.visits.sort_by_key(|v| v.visit_index);
                p
            })
            .collect();
        Cohort::new(profiles, feature_names, Provenance::Ingested)
    }
}

fn load_csv(reader: impl std::io::Read) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() <= FIXED_COLUMNS.len() || header.iter().zip(FIXED_COLUMNS).any(|(h, want)| h != want) {
        return Err(Error::Schema {
            row: 1,
            message: format!(
                "header must start with {} followed by at least one feature column",
                FIXED_COLUMNS.join(",")
            ),
        });
    }
    let feature_names: Vec<String> = header.iter().skip(FIXED_COLUMNS.len()).map(str::to_string).collect();
    let p = feature_names.len();
    let mut builder = Builder::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != FIXED_COLUMNS.len() + p {
            return Err(Error::Schema {
                row,
                message: format!("expected {} columns, found {}", FIXED_COLUMNS.len() + p, rec.len()),
            });
        }
        let schema = |message: String| Error::Schema { row, message };
        let label: Label = rec[1].parse().map_err(schema)?;
        let sex: Sex = rec[2].parse().map_err(schema)?;
        let visit_index: u32 = rec[3]
            .parse()
            .map_err(|e| schema(format!("visit_index {:?}: {e}", &rec[3])))?;
        let age_offset_months = parse_f64(&rec[4]).map_err(schema)?;
        let features = rec
            .iter()
            .skip(FIXED_COLUMNS.len())
            .map(parse_f64)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(schema)?;
        if rec[0].is_empty() {
            return Err(schema("empty subject_id".into()));
        }
        builder.add_visit(
            row,
            &rec[0],
            label,
            sex,
            Visit {
                visit_index,
                age_offset_months,
                features,
            },
        )?;
    }
    builder.finish(feature_names)
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("not a finite number: {s:?}"))
}

fn load_jsonl(reader: impl BufRead) -> Result<Cohort> {
    let mut builder = Builder::new();
    let mut p: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|e| Error::Schema {
            row,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let prof: Profile = serde_json::from_str(&line).map_err(|e| Error::Schema {
            row,
            message: e.to_string(),
        })?;
        for v in &prof.visits {
            let width = *p.get_or_insert(v.features.len());
            if v.features.len() != width {
                return Err(Error::Schema {
                    row,
                    message: format!(
                        "visit {} has {} features, expected {width}",
                        v.visit_index,
                        v.features.len()
                    ),
                });
            }
        }
        for v in prof.visits {
            builder.add_visit(row, &prof.subject_id, prof.label, prof.sex, v)?;
        }
    }
    let p = p.ok_or(Error::Schema {
        row: 0,
        message: "no profiles".into(),
    })?;
    builder.finish((1..=p).map(|i| format!("feature_{i}")).collect())
}

/// Writes a cohort. Files are written to a temporary sibling and renamed
/// into place.
pub fn write_cohort(cohort: &Cohort, path: &Path, format: CohortFormat) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        match format {
            CohortFormat::Csv => write_csv(cohort, &mut w)?,
            CohortFormat::Jsonl => {
                for prof in &cohort.profiles {
                    serde_json::to_writer(&mut w, prof)?;
                    writeln!(w).map_err(|e| Error::io(&tmp, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_csv(cohort: &Cohort, w: impl Write) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let header: Vec<&str> = FIXED_COLUMNS
        .iter()
        .copied()
        .chain(cohort.feature_names.iter().map(String::as_str))
        .collect();
    wr.write_record(&header)?;
    for prof in &cohort.profiles {
        for v in &prof.visits {
            let mut rec = vec![
                prof.subject_id.clone(),
                prof.label.to_string(),
                prof.sex.as_str().to_string(),
                v.visit_index.to_string(),
                v.age_offset_months.to_string(),
            ];
            rec.extend(v.features.iter().map(f64::to_string));
            wr.write_record(&rec)?;
        }
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
