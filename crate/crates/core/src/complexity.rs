//! Structural parameter and FLOP accounting.
//!
//! Convolutions cost `out_voxels·C_out·(C_in/groups)·k³` multiply-accumulates,
//! matrix products `m·n·k`, and attention `n²·width` per group for both the
//! score and the weighted-sum products. Normalization, softmax, activation,
//! interpolation and residual adds are tallied separately as auxiliary
//! element ops and only enter the totals on request.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Encoder,
    Embedding,
    Transformer,
    Dbm,
    Decoder,
}

impl Section {
    pub const ALL: [Section; 5] = [
        Self::Encoder,
        Self::Embedding,
        Self::Transformer,
        Self::Dbm,
        Self::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Embedding => "embedding",
            Self::Transformer => "transformer",
            Self::Dbm => "dbm",
            Self::Decoder => "decoder",
        }
    }
}

impl std::str::FromStr for Section {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Report(format!("unknown section '{s}'")))
    }
}

/// Raw cost of one layer as produced by the network walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub section: Section,
    pub params: u64,
    pub macs: u64,
    pub aux_ops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// One multiply-accumulate counts as one FLOP.
    Mac,
    /// One multiply-accumulate counts as two FLOPs.
    Flops2,
}

impl Convention {
    pub fn factor(self) -> u64 {
        match self {
            Convention::Mac => 1,
            Convention::Flops2 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Convention::Mac => "mac",
            Convention::Flops2 => "flops2",
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac" => Ok(Convention::Mac),
            "flops2" => Ok(Convention::Flops2),
            other => Err(Error::Config(format!(
                "unknown FLOP convention '{other}' (expected mac or flops2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub section: Section,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionTotals {
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
    pub sections: BTreeMap<Section, SectionTotals>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    /// `C×H×W×D`.
    pub input_shape: [usize; 4],
    pub convention: Convention,
    pub include_aux: bool,
    pub rows: Vec<ReportRow>,
    pub totals: Totals,
    /// Per-case FLOPs divided by the depth extent `D`.
    pub per_slice: f64,
}

impl ComplexityReport {
    pub fn from_costs(
        model: &str,
        input_shape: [usize; 4],
        convention: Convention,
        include_aux: bool,
        costs: &[LayerCost],
    ) -> Self {
        let rows: Vec<ReportRow> = costs
            .iter()
            .map(|c| ReportRow {
                name: c.name.clone(),
                section: c.section,
                params: c.params,
                flops: c.macs * convention.factor() + if include_aux { c.aux_ops } else { 0 },
            })
            .collect();
        let totals = Totals::of(&rows);
        let per_slice = totals.flops as f64 / input_shape[3] as f64;
        Self {
            model: model.to_string(),
            input_shape,
            convention,
            include_aux,
            rows,
            totals,
            per_slice,
        }
    }

    /// Per-slice FLOPs when they divide evenly.
    pub fn per_slice_exact(&self) -> Option<u64> {
        let d = self.input_shape[3] as u64;
        self.totals
            .flops
            .is_multiple_of(d)
            .then(|| self.totals.flops / d)
    }

    pub fn section_params(&self, section: Section) -> u64 {
        self.totals.sections.get(&section).map_or(0, |s| s.params)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Report(format!("bad report document: {e}")))
    }

    const CSV_HEADER: &'static str = "model,input_shape,convention,name,section,params,flops";

    /// One row per layer followed by a `TOTAL` row, all carrying the report
    /// metadata so the file stands alone.
    pub fn to_csv(&self) -> String {
        let shape = self.input_shape.map(|v| v.to_string()).join("x");
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let total = ReportRow {
            name: "TOTAL".into(),
            section: Section::Encoder,
            params: self.totals.params,
            flops: self.totals.flops,
        };
        for (row, section) in self
            .rows
            .iter()
            .map(|r| (r, r.section.as_str()))
            .chain(std::iter::once((&total, "all")))
        {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.model,
                shape,
                self.convention.as_str(),
                row.name,
                section,
                row.params,
                row.flops
            );
        }
        out
    }

    /// Parses [`to_csv`](Self::to_csv) output; totals are recomputed from
    /// the rows and checked against the `TOTAL` line.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Report("missing or unexpected CSV header".into()));
        }
        let mut rows = Vec::new();
        let mut meta = None;
        let mut stated = None;
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Report(format!(
                    "CSV line {} has {} fields",
                    i + 2,
                    f.len()
                )));
            }
            let num = |s: &str| {
                s.parse::<u64>()
                    .map_err(|e| Error::Report(format!("line {}: {e}", i + 2)))
            };
            let shape: Vec<usize> = f[1]
                .split('x')
                .map(|v| {
                    v.parse()
                        .map_err(|e| Error::Report(format!("line {}: {e}", i + 2)))
                })
                .collect::<Result<_>>()?;
            let shape: [usize; 4] = shape
                .try_into()
                .map_err(|_| Error::Report(format!("line {}: shape needs 4 dims", i + 2)))?;
            meta = Some((f[0].to_string(), shape, f[2].parse::<Convention>()?));
            if f[3] == "TOTAL" && f[4] == "all" {
                stated = Some((num(f[5])?, num(f[6])?));
                continue;
            }
            rows.push(ReportRow {
                name: f[3].into(),
                section: f[4].parse()?,
                params: num(f[5])?,
                flops: num(f[6])?,
            });
        }
        let (model, input_shape, convention) =
            meta.ok_or_else(|| Error::Report("empty CSV report".into()))?;
        let totals = Totals::of(&rows);
        if let Some((p, fl)) = stated {
            if (p, fl) != (totals.params, totals.flops) {
                return Err(Error::Report(format!(
                    "TOTAL row ({p}, {fl}) disagrees with column sums ({}, {})",
                    totals.params, totals.flops
                )));
            }
        }
        let per_slice = totals.flops as f64 / input_shape[3] as f64;
        Ok(Self {
            model,
            input_shape,
            convention,
            include_aux: false,
            rows,
            totals,
            per_slice,
        })
    }

    /// Aligned text table with section subtotals.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(12);
        let mut out = String::new();
        let shape = self.input_shape.map(|v| v.to_string()).join("×");
        let _ = writeln!(
            out,
            "model {}  input {}  convention {}",
            self.model,
            shape,
            self.convention.as_str()
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:<11}  {:>12}  {:>16}",
            "layer", "section", "params", "flops"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<11}  {:>12}  {:>16}",
                r.name,
                r.section.as_str(),
                r.params,
                r.flops
            );
        }
        let _ = writeln!(out, "{}", "-".repeat(width + 45));
        for (s, t) in &self.totals.sections {
            let _ = writeln!(
                out,
                "{:<width$}  {:<11}  {:>12}  {:>16}",
                "subtotal",
                s.as_str(),
                t.params,
                t.flops
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<11}  {:>12}  {:>16}",
            "total", "", self.totals.params, self.totals.flops
        );
        let _ = writeln!(
            out,
            "params {:.3} M   per case {:.2} G   per slice {:.3} G",
            self.totals.params as f64 / 1e6,
            self.totals.flops as f64 / 1e9,
            self.per_slice / 1e9
        );
        out
    }

    /// Compact key-value summary; the `json-like` output format.
    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "model": self.model,
            "input_shape": self.input_shape,
            "convention": self.convention,
            "params": self.totals.params,
            "flops": self.totals.flops,
            "per_slice": self.per_slice,
        })
        .to_string()
    }
}

impl Totals {
    fn of(rows: &[ReportRow]) -> Self {
        let mut sections: BTreeMap<Section, SectionTotals> = BTreeMap::new();
        for r in rows {
            let e = sections.entry(r.section).or_insert(SectionTotals {
                params: 0,
                flops: 0,
            });
            e.params += r.params;
            e.flops += r.flops;
        }
        Self {
            params: rows.iter().map(|r| r.params).sum(),
            flops: rows.iter().map(|r| r.flops).sum(),
            sections,
        }
    }
}

/// Signed relative reductions `(a − b)/a`, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub params_pct: f64,
    pub flops_pct: f64,
}

pub fn compare(a: &ComplexityReport, b: &ComplexityReport) -> Result<Reduction> {
    if a.convention != b.convention || a.include_aux != b.include_aux {
        return Err(Error::Report(format!(
            "cannot compare reports with different conventions ({} vs {})",
            a.convention.as_str(),
            b.convention.as_str()
        )));
    }
    if a.input_shape != b.input_shape {
        return Err(Error::Report(format!(
            "cannot compare reports at different input shapes ({:?} vs {:?})",
            a.input_shape, b.input_shape
        )));
    }
    let pct = |x: u64, y: u64| {
        if x == 0 {
            0.0
        } else {
            100.0 * (x as f64 - y as f64) / x as f64
        }
    };
    Ok(Reduction {
        params_pct: pct(a.totals.params, b.totals.params),
        flops_pct: pct(a.totals.flops, b.totals.flops),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ComplexityReport {
        let costs = vec![
            LayerCost {
                name: "a.conv".into(),
                section: Section::Encoder,
                params: 10,
                macs: 256,
                aux_ops: 4,
            },
            LayerCost {
                name: "b.fc".into(),
                section: Section::Transformer,
                params: 5,
                macs: 512,
                aux_ops: 0,
            },
        ];
        ComplexityReport::from_costs("toy", [1, 4, 4, 4], Convention::Flops2, false, &costs)
    }

    #[test]
    fn totals_are_column_sums() {
        let r = sample();
        assert_eq!(r.totals.params, 15);
        assert_eq!(r.totals.flops, 2 * 768);
        assert_eq!(r.per_slice_exact(), Some(384));
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = sample();
        let back = ComplexityReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.totals, r.totals);
        assert_eq!(back.rows, r.rows);
        assert_eq!(ComplexityReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn compare_refuses_mixed_conventions() {
        let a = sample();
        let mut b = sample();
        b.convention = Convention::Mac;
        assert!(compare(&a, &b).is_err());
        let same = compare(&a, &a).unwrap();
        assert_eq!((same.params_pct, same.flops_pct), (0.0, 0.0));
    }
}
