//! Output files: CSV/JSON renderers and atomic writes (temp file + rename,
//! so no partial file survives an error).

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::runner::{ConvergenceRow, QqPoint, ScoreEvalRow, TrialSummary};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(&self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Write `content` to `path` via a sibling temp file and rename.
pub fn atomic_write(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    fs::write(&tmp_path, content)?;
    fs::rename(&tmp_path, path)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn coverage_csv(summary: &TrialSummary) -> String {
    let mut out = String::from("policy,n,t,coverage_t,coverage_ps,se,mean_width,mean_lambda\n");
    for c in &summary.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.policy, c.n, c.t, c.coverage_t, c.coverage_ps, c.se, c.mean_width, c.mean_lambda
        ));
    }
    out
}

pub fn qq_csv(points: &[QqPoint]) -> String {
    let mut out = String::from("rank,observed_m2,chi2_quantile\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            p.rank, p.observed_m2, p.chi2_quantile
        ));
    }
    out
}

pub fn score_eval_csv(rows: &[ScoreEvalRow]) -> String {
    let mut out = String::from("n,t,j_psi,var_err\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.n,
            r.t,
            fmt_opt(r.j_psi),
            r.var_err
        ));
    }
    out
}

pub fn convergence_csv(rows: &[ConvergenceRow]) -> String {
    let mut out = String::from("t,dist_to_ps,bound\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.t, r.dist_to_ps, r.bound));
    }
    out
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// Render per the selected format, for the row types whose CSV schema is
/// documented on the CLI.
pub fn render_coverage(summary: &TrialSummary, format: Format) -> Result<String> {
    match format {
        Format::Csv => Ok(coverage_csv(summary)),
        Format::Json => to_json(summary),
    }
}

pub fn render_qq(points: &[QqPoint], format: Format) -> Result<String> {
    match format {
        Format::Csv => Ok(qq_csv(points)),
        Format::Json => to_json(&points),
    }
}

pub fn render_score_eval(rows: &[ScoreEvalRow], format: Format) -> Result<String> {
    match format {
        Format::Csv => Ok(score_eval_csv(rows)),
        Format::Json => to_json(&rows),
    }
}

pub fn render_convergence(rows: &[ConvergenceRow], format: Format) -> Result<String> {
    match format {
        Format::Csv => Ok(convergence_csv(rows)),
        Format::Json => to_json(&rows),
    }
}
