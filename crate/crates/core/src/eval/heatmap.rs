//! Attention-weight export as CSV and 8-bit greyscale PGM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-stochastic matrix: one row per decoding step, one column per source
/// position.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl AttentionWeights {
    /// Entries must lie in `[0, 1]` and rows must sum to one within `1e-9`.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::shape("attention weights", &[values.len()], &[rows, cols]));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("attention weight outside [0, 1]"));
        }
        for r in values.chunks(cols) {
            if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("attention row does not sum to 1"));
            }
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

/// Grey level of a probability: `round(255 · p)`.
pub fn pixel(p: f64) -> u8 {
    (255.0 * p).round().clamp(0.0, 255.0) as u8
}

fn check_label(label: &str) -> Result<()> {
    if label.contains([',', '\n', '\r', '"']) {
        return Err(Error::invalid(format!("label {label:?} cannot be written to CSV")));
    }
    Ok(())
}

/// CSV text: a header `step,<source labels>`, then per decoding step its
/// output label followed by the weights with six decimals.
pub fn heatmap_csv(w: &AttentionWeights, source: &[String], output: &[String]) -> Result<String> {
    if source.len() != w.cols || output.len() != w.rows {
        return Err(Error::shape("heatmap labels", &[output.len(), source.len()], &[w.rows, w.cols]));
    }
    source.iter().chain(output).try_for_each(|l| check_label(l))?;
    let mut out = String::from("step");
    for s in source {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for (r, label) in output.iter().enumerate() {
        out.push_str(label);
        for p in w.row(r) {
            out.push_str(&format!(",{p:.6}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary PGM (`P5`): width = source positions, height = decoding steps.
pub fn heatmap_pgm(w: &AttentionWeights) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", w.cols, w.rows).into_bytes();
    out.extend(w.values.iter().map(|&p| pixel(p)));
    out
}

/// Writes `<stem>.csv` and `<stem>.pgm`.
pub fn export_heatmap(w: &AttentionWeights, source: &[String], output: &[String], stem: &Path) -> Result<()> {
    let csv = heatmap_csv(w, source, output)?;
    fs::write(stem.with_extension("csv"), csv)?;
    fs::write(stem.with_extension("pgm"), heatmap_pgm(w))?;
    Ok(())
}

/// Parses CSV written by [`heatmap_csv`] back into weights and labels.
pub fn parse_heatmap_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<String>, Vec<String>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty heatmap CSV".into()))?;
    let source: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    let mut output = Vec::new();
    for line in lines {
        let mut fields = line.split(',');
        output.push(fields.next().unwrap_or("").to_string());
        let row = fields
            .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("bad weight {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if row.len() != source.len() {
            return Err(Error::Format("ragged heatmap row".into()));
        }
        rows.push(row);
    }
    Ok((rows, source, output))
}

/// Parses a binary PGM into (width, height, pixels).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("malformed PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}
