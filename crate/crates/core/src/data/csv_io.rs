use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, EpisodeBatch, SplitFractions};
use crate::diffcore::RngStream;
use crate::error::{Error, Result};

pub const CSV_VERSION_LINE: &str = "# tpamtl-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub num_features: usize,
    pub num_tasks: usize,
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["instance_id".to_string(), "timestep".to_string()];
        h.extend((1..=self.num_features).map(|i| format!("feature_{i}")));
        h.extend((1..=self.num_tasks).map(|i| format!("label_task_{i}")));
        h.extend((1..=self.num_tasks).map(|i| format!("mask_task_{i}")));
        h
    }

    /// Reads the feature and task counts off a header row.
    pub fn infer(header: &[&str]) -> Self {
        let count = |prefix: &str| {
            (1..)
                .take_while(|i| header.contains(&format!("{prefix}{i}").as_str()))
                .count()
        };
        CsvSchema {
            num_features: count("feature_"),
            num_tasks: count("label_task_"),
        }
    }
}

/// Row accounting for one ingested file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub instances: usize,
    /// Feature cells that were empty and read as 0.0.
    pub imputed_cells: usize,
    /// Rows attributed to each instance, in instance order.
    pub rows_per_instance: Vec<usize>,
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        v.to_string()
    }
}

/// Writes `batch` in the wide CSV layout, one row per valid timestep.
/// Labels of masked tasks are left empty.
pub fn write_csv<W: Write>(batch: &EpisodeBatch, mut w: W) -> Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}").map_err(|e| Error::io("<csv>", e))?;
    let schema = CsvSchema {
        num_features: batch.num_features,
        num_tasks: batch.num_tasks,
    };
    let mut out = csv::Writer::from_writer(w);
    out.write_record(schema.header())?;
    for b in 0..batch.len() {
        for t in 0..batch.lengths[b] {
            let mut row = Vec::with_capacity(2 + batch.num_features + 2 * batch.num_tasks);
            row.push(batch.ids[b].clone());
            row.push(t.to_string());
            row.extend((0..batch.num_features).map(|f| fmt(batch.feature(b, t, f))));
            row.extend((0..batch.num_tasks).map(|d| {
                if batch.is_labeled(b, d) {
                    fmt(batch.label(b, d))
                } else {
                    String::new()
                }
            }));
            row.extend((0..batch.num_tasks).map(|d| u8::from(batch.is_labeled(b, d)).to_string()));
            out.write_record(&row)?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

struct Pending {
    id: String,
    rows: Vec<(usize, Vec<f64>)>,
    labels: Vec<Option<f64>>,
    mask: Vec<Option<bool>>,
}

/// Parses a wide CSV. Instances keep the order of their first row; the
/// timestep column indexes each instance's rows and gaps are zero-filled.
pub fn parse_csv<R: Read>(reader: R, origin: &Path, schema: &CsvSchema) -> Result<(EpisodeBatch, IngestReport)> {
    let err = |row: usize, message: String| Error::Ingest {
        path: origin.to_path_buf(),
        row,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let mut cols = Vec::new();
    for name in schema.header() {
        cols.push(col(&name).ok_or_else(|| err(1, format!("missing required column {name}")))?);
    }
    let (m, dn) = (schema.num_features, schema.num_tasks);
    let mut order: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut report = IngestReport::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        report.rows += 1;
        let cell = |i: usize| rec.get(cols[i]).unwrap_or("").trim();
        let id = cell(0).to_string();
        if id.is_empty() {
            return Err(err(line, "empty instance_id".into()));
        }
        let t: usize = cell(1)
            .parse()
            .map_err(|_| err(line, format!("timestep {:?} is not a non-negative integer", cell(1))))?;
        let mut feats = Vec::with_capacity(m);
        for f in 0..m {
            let s = cell(2 + f);
            if s.is_empty() {
                report.imputed_cells += 1;
                feats.push(0.0);
            } else {
                let v: f64 = s
                    .parse()
                    .map_err(|_| err(line, format!("feature_{} value {s:?} is not a number", f + 1)))?;
                feats.push(v);
            }
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(Pending {
                id: id.clone(),
                rows: Vec::new(),
                labels: vec![None; dn],
                mask: vec![None; dn],
            });
            order.len() - 1
        });
        let inst = &mut order[slot];
        if let Some(&(prev, _)) = inst.rows.last() {
            if t == prev {
                return Err(err(line, format!("duplicate timestep {t} for instance {id}")));
            }
            if t < prev {
                return Err(err(line, format!("timestep {t} after {prev} for instance {id}")));
            }
        }
        for d in 0..dn {
            let ls = cell(2 + m + d);
            if !ls.is_empty() {
                let y = match ls {
                    "0" | "0.0" => 0.0,
                    "1" | "1.0" => 1.0,
                    _ => return Err(err(line, format!("label_task_{} must be 0 or 1, got {ls:?}", d + 1))),
                };
                if inst.labels[d].is_some_and(|prev| prev != y) {
                    return Err(err(line, format!("label_task_{} changes within instance {id}", d + 1)));
                }
                inst.labels[d] = Some(y);
            }
            let ms = cell(2 + m + dn + d);
            if !ms.is_empty() {
                let k = match ms {
                    "0" => false,
                    "1" => true,
                    _ => return Err(err(line, format!("mask_task_{} must be 0 or 1, got {ms:?}", d + 1))),
                };
                if inst.mask[d].is_some_and(|prev| prev != k) {
                    return Err(err(line, format!("mask_task_{} changes within instance {id}", d + 1)));
                }
                inst.mask[d] = Some(k);
            }
        }
        inst.rows.push((t, feats));
    }
    let steps = order
        .iter()
        .map(|p| p.rows.last().map_or(0, |r| r.0 + 1))
        .max()
        .unwrap_or(1)
        .max(1);
    let mut ids = Vec::with_capacity(order.len());
    let mut inputs = vec![0.0; order.len() * steps * m];
    let mut lengths = Vec::with_capacity(order.len());
    let mut labels = vec![0.0; order.len() * dn];
    let mut mask = vec![false; order.len() * dn];
    for (b, p) in order.iter().enumerate() {
        for (t, feats) in &p.rows {
            let base = (b * steps + t) * m;
            inputs[base..base + m].copy_from_slice(feats);
        }
        for d in 0..dn {
            let labelled = p.mask[d].unwrap_or(false);
            mask[b * dn + d] = labelled;
            if labelled {
                labels[b * dn + d] = p.labels[d].ok_or_else(|| {
                    err(
                        0,
                        format!("instance {} is masked in for task {} but has no label", p.id, d + 1),
                    )
                })?;
            }
        }
        lengths.push(p.rows.last().map_or(1, |r| r.0 + 1));
        report.rows_per_instance.push(p.rows.len());
        ids.push(p.id.clone());
    }
    report.instances = ids.len();
    let batch = EpisodeBatch::new(ids, m, dn, steps, inputs, lengths, labels, mask)?;
    Ok((batch, report))
}

pub fn read_csv(path: &Path, schema: &CsvSchema) -> Result<(EpisodeBatch, IngestReport)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(std::io::BufReader::new(f), path, schema)
}

/// Reads one CSV and splits its instances at random into train, valid and
/// test.
pub fn ingest_csv(
    path: &Path,
    schema: &CsvSchema,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(DatasetSplit, IngestReport)> {
    fractions.validate()?;
    let (all, report) = read_csv(path, schema)?;
    let mut idx: Vec<usize> = (0..all.len()).collect();
    RngStream::new(seed).child("split").shuffle(&mut idx);
    let [a, b, _] = fractions.sizes(idx.len());
    let split = DatasetSplit {
        train: all.select(&idx[..a]),
        valid: all.select(&idx[a..a + b]),
        test: all.select(&idx[a + b..]),
        fractions,
        seed,
    };
    Ok((split, report))
}
