//! Append-only CSV metrics, one file per seed, flushed per row so a killed
//! run still leaves parseable output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use staclab_core::harness::StepEvent;

use crate::CliError;

pub struct MetricsWriter {
    writer: BufWriter<File>,
    heads: usize,
    single_alpha: bool,
}

pub fn header(heads: usize, single_alpha: bool) -> String {
    let mut cols = vec![
        "meta_step".to_string(),
        "env_steps".to_string(),
        "episodes".to_string(),
        "return_recent".to_string(),
        "inner_loss".to_string(),
        "outer_loss".to_string(),
        "kl".to_string(),
        "mean_is".to_string(),
        "staleness".to_string(),
        "wall_clock_s".to_string(),
    ];
    for h in 0..heads {
        for name in ["gamma", "lambda", "alpha_rho", "alpha_c", "g_v", "g_p", "g_e"] {
            if single_alpha && name == "alpha_c" {
                continue;
            }
            cols.push(format!("h{h}_{name}"));
        }
    }
    cols.join(",")
}

impl MetricsWriter {
    pub fn create(path: &Path, heads: usize, single_alpha: bool) -> Result<Self, CliError> {
        let file = File::create(path)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{}", header(heads, single_alpha))
            .map_err(|e| CliError::Config(format!("write {}: {e}", path.display())))?;
        writer.flush().ok();
        Ok(MetricsWriter {
            writer,
            heads,
            single_alpha,
        })
    }

    pub fn write_row(&mut self, ev: &StepEvent) -> std::io::Result<()> {
        let mut row = format!(
            "{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.3}",
            ev.meta_steps,
            ev.env_steps,
            ev.episodes_completed,
            ev.recent_return
                .map(|r| format!("{r:.6}"))
                .unwrap_or_default(),
            ev.diagnostics.inner_loss,
            ev.diagnostics.outer_loss,
            ev.diagnostics.kl,
            ev.diagnostics.mean_is,
            ev.staleness_max,
            ev.elapsed_secs,
        );
        for h in 0..self.heads {
            let tr = &ev.diagnostics.heads[h].transformed;
            let values = if self.single_alpha {
                vec![tr.gamma, tr.lambda, tr.alpha_rho, tr.g_v, tr.g_p, tr.g_e]
            } else {
                vec![
                    tr.gamma, tr.lambda, tr.alpha_rho, tr.alpha_c, tr.g_v, tr.g_p, tr.g_e,
                ]
            };
            for v in values {
                row.push_str(&format!(",{v:.9}"));
            }
        }
        writeln!(self.writer, "{row}")?;
        // One row per log period; flushing keeps the file crash-consistent.
        self.writer.flush()
    }
}

/// A parsed metrics file: header columns plus complete numeric rows.
/// Truncated trailing lines (from an interrupted run) are skipped.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsTable {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let header_line = lines
            .next()
            .transpose()
            .map_err(|e| CliError::Config(format!("read {}: {e}", path.display())))?
            .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?;
        let columns: Vec<String> = header_line.split(',').map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            let line = match line {
                Ok(l) => l,
                Err(_) => break,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                continue; // incomplete row from an interrupted run
            }
            let parsed: Vec<Option<f64>> = fields
                .iter()
                .map(|f| if f.is_empty() { None } else { f.parse().ok() })
                .collect();
            if parsed
                .iter()
                .zip(&fields)
                .any(|(p, f)| p.is_none() && !f.is_empty())
            {
                continue;
            }
            rows.push(parsed);
        }
        Ok(MetricsTable { columns, rows })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}
