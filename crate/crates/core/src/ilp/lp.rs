//! CPLEX LP text export.

use std::fmt::Write;

use super::model::{Cmp, IlpModel, RowKind, VarId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LpStyle {
    /// Subquery rows weight the order variable by the subquery group size,
    /// requiring every partitioning variant of the subquery.
    #[default]
    Aggregated,
    /// Subquery rows as solved: one variant per input suffices.
    Binding,
}

const TERMS_PER_LINE: usize = 8;

pub fn export_lp(model: &IlpModel, style: LpStyle) -> String {
    let mut out = String::new();
    out.push_str("\\ probe order selection\n");
    out.push_str("Minimize\n obj:");
    if model.goal.is_empty() {
        out.push_str(" 0");
    }
    write_terms(&mut out, model, &model.goal);
    out.push_str("\nSubject To\n");
    for (i, row) in model.rows.iter().enumerate() {
        let name = match row.kind {
            RowKind::OneOf { group } => format!("one_of_{}_{i}", group.0),
            RowKind::Subquery {
                candidate, group, ..
            } => format!("sub_{}_{}_{i}", candidate.0, group.0),
            RowKind::Cost { candidate } => format!("cost_{}_{i}", candidate.0),
        };
        let coeffs = match style {
            LpStyle::Aggregated => row.aggregated_coeffs(),
            LpStyle::Binding => row.coeffs.clone(),
        };
        let _ = write!(out, " {name}:");
        write_terms(&mut out, model, &coeffs);
        let op = match row.cmp {
            Cmp::Ge => ">=",
            Cmp::Eq => "=",
        };
        let _ = writeln!(out, " {op} {}", num(row.rhs));
    }
    out.push_str("Binary\n");
    for v in &model.vars {
        let _ = writeln!(out, " {}", v.name);
    }
    out.push_str("End\n");
    out
}

fn write_terms(out: &mut String, model: &IlpModel, terms: &[(VarId, f64)]) {
    for (i, (v, c)) in terms.iter().enumerate() {
        if i > 0 && i % TERMS_PER_LINE == 0 {
            out.push_str("\n   ");
        }
        let sign = if *c < 0.0 { '-' } else { '+' };
        let mag = c.abs();
        let name = &model.var(*v).name;
        if i == 0 && sign == '+' {
            if mag == 1.0 {
                let _ = write!(out, " {name}");
            } else {
                let _ = write!(out, " {} {name}", num(mag));
            }
        } else if mag == 1.0 {
            let _ = write!(out, " {sign} {name}");
        } else {
            let _ = write!(out, " {sign} {} {name}", num(mag));
        }
    }
}

fn num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}
