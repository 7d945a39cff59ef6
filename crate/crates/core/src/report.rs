//! Plain-text comparison table (renderer and parser) plus versioned JSON
//! envelopes for reports.

use serde::{Deserialize, Serialize};

use crate::decision::{Cell, Decision, DecisionTables};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::oracle::EstimatorTriple;

const LABEL_WIDTH: usize = 25;
const COL_WIDTH: usize = 34;
const COLUMN_HEADS: [&str; 3] = ["No Match", "Match on X", "Match on X and Y^T"];
const ROW_BIAS: &str = "Estimated Bias";
const ROW_SV: &str = "Estimated S.V";
const ROW_MSE: &str = "Estimated MSE";
const ROW_SIZE: &str = "Used Sample Size";
const ROW_MATCH: &str = "Match Decision";
const ROW_FINAL: &str = "Suggested Final Decision";

fn fmt_cell(cell: &Cell) -> String {
    match cell.se {
        Some(se) => format!("{:.5} ({:.5})", cell.value, se),
        None => format!("{:.5} (—)", cell.value),
    }
}

fn pad(s: &str, width: usize) -> String {
    let len = s.chars().count();
    if len >= width {
        s.to_string()
    } else {
        format!("{s}{}", " ".repeat(width - len))
    }
}

fn row(label: &str, cells: [String; 3]) -> String {
    let mut line = pad(label, LABEL_WIDTH);
    for c in &cells {
        line.push_str(&pad(c, COL_WIDTH));
    }
    line.trim_end().to_string()
}

/// Which of the three criteria each strategy wins outright (smallest
/// |bias|, smallest S.V, smallest MSE).
fn criteria_wins(tables: &DecisionTables) -> [Vec<&'static str>; 3] {
    let argmin = |v: [f64; 3]| -> usize {
        let mut best = 0;
        for j in 1..3 {
            if v[j] < v[best] {
                best = j;
            }
        }
        best
    };
    let bias_win = argmin([
        tables.bias.classic.value.abs(),
        tables.bias.matched_x.value.abs(),
        tables.bias.matched_xy.value.abs(),
    ]);
    let sv_win = argmin([
        tables.sv.classic.value,
        tables.sv.matched_x.value,
        tables.sv.matched_xy.value,
    ]);
    let mse_win = argmin([
        tables.mse.classic.value,
        tables.mse.matched_x.value,
        tables.mse.matched_xy.value,
    ]);
    let mut wins: [Vec<&'static str>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    wins[bias_win].push("|Bias|");
    wins[sv_win].push("Var (S.V)");
    wins[mse_win].push("MSE");
    wins
}

/// Renders the decision as the fixed-layout comparison table.
pub fn render_table(decision: &Decision) -> String {
    let t = &decision.tables;
    let mut out = String::new();
    out.push_str(&row(
        "",
        [
            COLUMN_HEADS[0].to_string(),
            COLUMN_HEADS[1].to_string(),
            COLUMN_HEADS[2].to_string(),
        ],
    ));
    out.push('\n');
    let triple_cells = |tr: &EstimatorTriple<Cell>| {
        [
            fmt_cell(&tr.classic),
            fmt_cell(&tr.matched_x),
            fmt_cell(&tr.matched_xy),
        ]
    };
    out.push_str(&row(ROW_BIAS, triple_cells(&t.bias)));
    out.push('\n');
    out.push_str(&row(ROW_SV, triple_cells(&t.sv)));
    out.push('\n');
    out.push_str(&row(ROW_MSE, triple_cells(&t.mse)));
    out.push('\n');
    out.push_str(&row(
        ROW_SIZE,
        [
            t.used_sample_size(EstimatorKind::ClassicDid).to_string(),
            t.used_sample_size(EstimatorKind::MatchedX).to_string(),
            t.used_sample_size(EstimatorKind::MatchedXY).to_string(),
        ],
    ));
    out.push('\n');
    let wins = criteria_wins(t);
    let match_cells = [0, 1, 2].map(|j| {
        if wins[j].is_empty() {
            "✗".to_string()
        } else if wins[j].len() == 3 {
            "✓ on all criteria".to_string()
        } else {
            format!("✓ on {} criteria", wins[j].join(" & "))
        }
    });
    out.push_str(&row(ROW_MATCH, match_cells));
    out.push('\n');
    let chosen_col = match decision.chosen {
        EstimatorKind::ClassicDid => 0,
        EstimatorKind::MatchedX => 1,
        EstimatorKind::MatchedXY => 2,
    };
    let final_cells =
        [0, 1, 2].map(|j| if j == chosen_col { "✓" } else { "✗" }.to_string());
    out.push_str(&row(ROW_FINAL, final_cells));
    out.push('\n');
    out
}

/// Numeric content recovered from a rendered table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedTable {
    pub bias: EstimatorTriple<Cell>,
    pub sv: EstimatorTriple<Cell>,
    pub mse: EstimatorTriple<Cell>,
    pub used_sample_size: [usize; 3],
    pub chosen: EstimatorKind,
}

fn parse_cell_tokens(tokens: &[&str]) -> Result<Cell> {
    if tokens.len() != 2 {
        return Err(Error::InvalidData(format!(
            "expected 'value (se)' cell, got {tokens:?}"
        )));
    }
    let value: f64 = tokens[0]
        .parse()
        .map_err(|_| Error::InvalidData(format!("bad cell value '{}'", tokens[0])))?;
    let inner = tokens[1]
        .strip_prefix('(')
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(|| Error::InvalidData(format!("bad cell SE '{}'", tokens[1])))?;
    let se = if inner == "—" {
        None
    } else {
        Some(inner.parse().map_err(|_| {
            Error::InvalidData(format!("bad cell SE '{inner}'"))
        })?)
    };
    Ok(Cell { value, se })
}

fn parse_value_row(text: &str, label: &str) -> Result<EstimatorTriple<Cell>> {
    let line = text
        .lines()
        .find(|l| l.starts_with(label))
        .ok_or_else(|| Error::InvalidData(format!("table is missing the '{label}' row")))?;
    let rest = &line[label.len()..];
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    if tokens.len() != 6 {
        return Err(Error::InvalidData(format!(
            "'{label}' row should hold three 'value (se)' cells, got {tokens:?}"
        )));
    }
    Ok(EstimatorTriple {
        classic: parse_cell_tokens(&tokens[0..2])?,
        matched_x: parse_cell_tokens(&tokens[2..4])?,
        matched_xy: parse_cell_tokens(&tokens[4..6])?,
    })
}

/// Parses a rendered table back into its numeric content (values at the
/// rendered 5-decimal precision).
pub fn parse_table(text: &str) -> Result<ParsedTable> {
    let bias = parse_value_row(text, ROW_BIAS)?;
    let sv = parse_value_row(text, ROW_SV)?;
    let mse = parse_value_row(text, ROW_MSE)?;
    let size_line = text
        .lines()
        .find(|l| l.starts_with(ROW_SIZE))
        .ok_or_else(|| Error::InvalidData("table is missing the sample-size row".into()))?;
    let sizes: Vec<usize> = size_line[ROW_SIZE.len()..]
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::InvalidData(format!("bad sample size '{s}'")))
        })
        .collect::<Result<_>>()?;
    if sizes.len() != 3 {
        return Err(Error::InvalidData(
            "sample-size row should hold three integers".into(),
        ));
    }
    let final_line = text
        .lines()
        .find(|l| l.starts_with(ROW_FINAL))
        .ok_or_else(|| Error::InvalidData("table is missing the final-decision row".into()))?;
    let marks: Vec<&str> = final_line[ROW_FINAL.len()..].split_whitespace().collect();
    if marks.len() != 3 || marks.iter().filter(|m| **m == "✓").count() != 1 {
        return Err(Error::InvalidData(
            "final-decision row should mark exactly one strategy".into(),
        ));
    }
    let chosen = match marks.iter().position(|m| *m == "✓").unwrap() {
        0 => EstimatorKind::ClassicDid,
        1 => EstimatorKind::MatchedX,
        _ => EstimatorKind::MatchedXY,
    };
    Ok(ParsedTable {
        bias,
        sv,
        mse,
        used_sample_size: [sizes[0], sizes[1], sizes[2]],
        chosen,
    })
}

/// JSON rendering with the embedded schema version (the version lives in
/// the Decision itself).
pub fn decision_to_json(decision: &Decision) -> Result<String> {
    serde_json::to_string_pretty(decision)
        .map_err(|e| Error::Config(format!("cannot serialize decision: {e}")))
}

pub fn decision_from_json(text: &str) -> Result<Decision> {
    let decision: Decision = serde_json::from_str(text)
        .map_err(|e| Error::InvalidData(format!("cannot parse decision JSON: {e}")))?;
    if decision.schema_version != crate::REPORT_SCHEMA_VERSION {
        return Err(Error::InvalidData(format!(
            "unsupported report schema version {} (expected {})",
            decision.schema_version,
            crate::REPORT_SCHEMA_VERSION
        )));
    }
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::{decide_from_tables, GuidelineConfig};

    fn sample_tables() -> DecisionTables {
        let cell = |v: f64, s: f64| Cell {
            value: v,
            se: Some(s),
        };
        DecisionTables {
            bias: EstimatorTriple {
                classic: cell(-0.03384, 0.03112),
                matched_x: cell(0.02695, 0.02830),
                matched_xy: cell(0.02404, 0.02827),
            },
            sv: EstimatorTriple {
                classic: cell(0.01628, 0.00059),
                matched_x: cell(0.03321, 0.00067),
                matched_xy: cell(0.03289, 0.00065),
            },
            mse: EstimatorTriple {
                classic: cell(0.00323, 0.00247),
                matched_x: cell(0.00267, 0.00196),
                matched_xy: cell(0.00247, 0.00178),
            },
            n1: 1296,
            n0: 2545,
            n_tilde_x: 1296,
            n_tilde_xy: 1296,
            tau_hat: None,
        }
    }

    #[test]
    fn renderer_round_trips_through_parser() {
        let decision =
            decide_from_tables(sample_tables(), &GuidelineConfig::default(), Vec::new()).unwrap();
        let text = render_table(&decision);
        let parsed = parse_table(&text).unwrap();
        assert_eq!(parsed.chosen, decision.chosen);
        assert_eq!(parsed.used_sample_size, [3841, 2592, 2592]);
        // Values round-trip exactly at the rendered 5-decimal precision.
        assert_eq!(parsed.bias.classic.value, -0.03384);
        assert_eq!(parsed.bias.matched_xy.se, Some(0.02827));
        assert_eq!(parsed.mse.matched_x.value, 0.00267);
        assert_eq!(parsed.sv.classic.value, 0.01628);
    }

    #[test]
    fn missing_ses_render_as_dashes() {
        let mut tables = sample_tables();
        tables.bias = tables.bias.map(|c| Cell {
            value: c.value,
            se: None,
        });
        tables.sv = tables.sv.map(|c| Cell {
            value: c.value,
            se: None,
        });
        tables.mse = tables.mse.map(|c| Cell {
            value: c.value,
            se: None,
        });
        let decision =
            decide_from_tables(tables, &GuidelineConfig::default(), Vec::new()).unwrap();
        let text = render_table(&decision);
        assert!(text.contains("(—)"));
        let parsed = parse_table(&text).unwrap();
        assert_eq!(parsed.bias.classic.se, None);
    }

    #[test]
    fn match_decision_row_marks_criteria_winners() {
        let decision =
            decide_from_tables(sample_tables(), &GuidelineConfig::default(), Vec::new()).unwrap();
        let text = render_table(&decision);
        let match_line = text
            .lines()
            .find(|l| l.starts_with("Match Decision"))
            .unwrap();
        // Smallest S.V belongs to the unmatched column, smallest |bias|
        // and MSE to the matched-on-both column.
        assert!(match_line.contains("✓ on Var (S.V) criteria"));
        assert!(match_line.contains("✓ on |Bias| & MSE criteria"));
        assert!(match_line.contains("✗"));
    }

    #[test]
    fn json_round_trip_rejects_other_versions() {
        let decision =
            decide_from_tables(sample_tables(), &GuidelineConfig::default(), Vec::new()).unwrap();
        let json = decision_to_json(&decision).unwrap();
        let back = decision_from_json(&json).unwrap();
        assert_eq!(back.chosen, decision.chosen);
        let tampered = json.replacen("\"schema_version\": 1", "\"schema_version\": 9", 1);
        assert!(decision_from_json(&tampered).is_err());
    }
}
