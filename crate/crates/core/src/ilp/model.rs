//! The 0-1 program over probe-order variables `x` and step variables `y`.

use std::collections::HashMap;

use serde::Serialize;

use crate::candidates::{CandId, CandidateSet, GroupId, GroupKey, StepId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct VarId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum VarKind {
    Order(CandId),
    Step(StepId),
}

#[derive(Clone, Debug, Serialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Cmp {
    Ge,
    Eq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RowKind {
    /// Exactly one candidate per (query, start).
    OneOf { group: GroupId },
    /// A candidate using a MIR needs an order for one of the MIR's inputs.
    /// Stored in binding form `-x + sum(x') >= 0`; `width` is the size of
    /// the subquery group, the coefficient of the all-variants form.
    Subquery {
        candidate: CandId,
        group: GroupId,
        width: usize,
    },
    /// `-PCost * x + sum(StepCost * y) >= 0`.
    Cost { candidate: CandId },
}

#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub kind: RowKind,
    pub coeffs: Vec<(VarId, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
}

impl Row {
    pub fn lhs(&self, values: &[bool]) -> f64 {
        self.coeffs
            .iter()
            .filter(|(v, _)| values[v.0])
            .map(|(_, c)| c)
            .sum()
    }

    pub fn satisfied(&self, values: &[bool]) -> bool {
        let lhs = self.lhs(values);
        let tol =
            1e-9 * (1.0 + self.rhs.abs() + self.coeffs.iter().map(|c| c.1.abs()).sum::<f64>());
        match self.cmp {
            Cmp::Ge => lhs >= self.rhs - tol,
            Cmp::Eq => (lhs - self.rhs).abs() <= tol,
        }
    }

    /// Coefficients in the all-variants shape: the order variable of a
    /// subquery row weighted by `-width`.
    pub fn aggregated_coeffs(&self) -> Vec<(VarId, f64)> {
        match self.kind {
            RowKind::Subquery { width, .. } => self
                .coeffs
                .iter()
                .map(|&(v, c)| {
                    if c < 0.0 {
                        (v, -(width as f64))
                    } else {
                        (v, c)
                    }
                })
                .collect(),
            _ => self.coeffs.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IlpModel {
    pub vars: Vec<Variable>,
    pub rows: Vec<Row>,
    /// Minimized; one term per step variable.
    pub goal: Vec<(VarId, f64)>,
    x_of: Vec<VarId>,
    y_of: Vec<VarId>,
}

impl IlpModel {
    pub fn empty() -> Self {
        Self {
            vars: Vec::new(),
            rows: Vec::new(),
            goal: Vec::new(),
            x_of: Vec::new(),
            y_of: Vec::new(),
        }
    }

    pub fn x(&self, c: CandId) -> VarId {
        self.x_of[c.0]
    }

    pub fn y(&self, s: StepId) -> VarId {
        self.y_of[s.0]
    }

    pub fn var(&self, v: VarId) -> &Variable {
        &self.vars[v.0]
    }

    pub fn order_var_count(&self) -> usize {
        self.x_of.len()
    }

    pub fn step_var_count(&self) -> usize {
        self.y_of.len()
    }

    pub fn objective(&self, values: &[bool]) -> f64 {
        self.goal
            .iter()
            .filter(|(v, _)| values[v.0])
            .map(|(_, c)| c)
            .sum()
    }

    pub fn violated_rows(&self, values: &[bool]) -> Vec<usize> {
        (0..self.rows.len())
            .filter(|i| !self.rows[*i].satisfied(values))
            .collect()
    }
}

/// One x per candidate, one y per distinct step, and the three row families.
pub fn build_ilp(set: &CandidateSet) -> IlpModel {
    let mut names = NameTable::default();
    let mut vars = Vec::with_capacity(set.candidates.len() + set.steps.len());

    let mut x_of = Vec::with_capacity(set.candidates.len());
    for g in &set.groups {
        for (idx, c) in g.candidates.iter().enumerate() {
            debug_assert_eq!(c.0, x_of.len());
            let base = match &g.key {
                GroupKey::Query { query, start } => {
                    format!("x({},{},{idx})", sanitize(query), sanitize(start))
                }
                GroupKey::Subquery { mir, start } => {
                    format!("x'({mir},{},{idx})", sanitize(start))
                }
            };
            x_of.push(VarId(vars.len()));
            vars.push(Variable {
                name: names.unique(base),
                kind: VarKind::Order(*c),
            });
        }
    }

    let mut y_of = Vec::with_capacity(set.steps.len());
    for (i, s) in set.steps.iter().enumerate() {
        let fingerprint = fnv1a(s.key.display(&set.mirs).as_bytes())
            ^ fnv1a(format!("{:?}", s.key.predicates).as_bytes()).rotate_left(17);
        y_of.push(VarId(vars.len()));
        vars.push(Variable {
            name: names.unique(format!("y({fingerprint:016x})")),
            kind: VarKind::Step(StepId(i)),
        });
    }

    let mut rows = Vec::new();
    for g in set.groups.iter().filter(|g| g.required) {
        rows.push(Row {
            kind: RowKind::OneOf { group: g.id },
            coeffs: g.candidates.iter().map(|c| (x_of[c.0], 1.0)).collect(),
            cmp: Cmp::Eq,
            rhs: 1.0,
        });
    }
    for c in &set.candidates {
        for h in &c.requires {
            let members = &set.group(*h).candidates;
            let mut coeffs = vec![(x_of[c.id.0], -1.0)];
            coeffs.extend(members.iter().map(|m| (x_of[m.0], 1.0)));
            rows.push(Row {
                kind: RowKind::Subquery {
                    candidate: c.id,
                    group: *h,
                    width: members.len(),
                },
                coeffs,
                cmp: Cmp::Ge,
                rhs: 0.0,
            });
        }
    }
    for c in &set.candidates {
        let mut coeffs = vec![(x_of[c.id.0], -c.pcost)];
        coeffs.extend(c.steps.iter().map(|s| (y_of[s.0], set.steps[s.0].cost)));
        rows.push(Row {
            kind: RowKind::Cost { candidate: c.id },
            coeffs,
            cmp: Cmp::Ge,
            rhs: 0.0,
        });
    }

    let goal = set
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| (y_of[i], s.cost))
        .collect();

    IlpModel {
        vars,
        rows,
        goal,
        x_of,
        y_of,
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Keeps characters LP readers accept in names.
fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "_.#$%&/;?@{}~'".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Default)]
struct NameTable {
    seen: HashMap<String, usize>,
}

impl NameTable {
    fn unique(&mut self, base: String) -> String {
        let n = self.seen.entry(base.clone()).or_insert(0);
        *n += 1;
        if *n == 1 {
            base
        } else {
            format!("{base}~{n}")
        }
    }
}
