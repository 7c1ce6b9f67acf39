//! Parameterized flow templates and their instantiation.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::lpn::{EventLabel, Lpn, LpnError, StatusRef, Transition};

/// Assignment of values to a template's declared parameters.
pub type Binding = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template `{template}`: parameter `{param}` is not bound")]
    Unbound { template: String, param: String },
    #[error("template `{template}`: value `{value}` is outside the domain of `{param}`")]
    OutOfDomain {
        template: String,
        param: String,
        value: String,
    },
    #[error("template `{template}`: binding {binding} violates `{constraint}`")]
    ConstraintViolated {
        template: String,
        binding: String,
        constraint: String,
    },
    #[error("template `{template}`: `{name}` is not a declared parameter")]
    UnknownParameter { template: String, name: String },
    #[error("template `{template}`: derived parameter `{name}` is not an integer expression here")]
    BadArithmetic { template: String, name: String },
    #[error(transparent)]
    Lpn(#[from] LpnError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub domain: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand {
    Param(String),
    Literal(String),
    Int(i64),
}

/// `let NAME = a + b - c` over integers and bound parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Derived {
    pub name: String,
    pub terms: Vec<(i64, Operand)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub lhs: Operand,
    pub op: CmpOp,
    pub rhs: Operand,
}

/// Disjunction of conjunctions. Empty means "always true".
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Constraint {
    pub any_of: Vec<Vec<Comparison>>,
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Param(p) | Operand::Literal(p) => write!(f, "{p}"),
            Operand::Int(i) => write!(f, "{i}"),
        }
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let clauses: Vec<String> = self
            .any_of
            .iter()
            .map(|c| {
                c.iter()
                    .map(|cmp| {
                        let op = if cmp.op == CmpOp::Eq { "==" } else { "!=" };
                        format!("{} {op} {}", cmp.lhs, cmp.rhs)
                    })
                    .collect::<Vec<_>>()
                    .join(" and ")
            })
            .collect();
        write!(f, "{}", clauses.join(" or "))
    }
}

/// A flow whose event fields may mention `{PARAM}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTemplate {
    pub name: String,
    pub params: Vec<Param>,
    pub derived: Vec<Derived>,
    pub constraint: Constraint,
    /// Net with symbolic labels; structure shared by every instance.
    pub base: Lpn,
}

pub fn format_binding(b: &Binding) -> String {
    b.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
}

impl FlowTemplate {
    fn err_unbound(&self, p: &str) -> TemplateError {
        TemplateError::Unbound {
            template: self.name.clone(),
            param: p.to_string(),
        }
    }

    /// Bound and derived values for `binding`, after checking domains and
    /// constraints.
    pub fn resolve(&self, binding: &Binding) -> Result<BTreeMap<String, String>, TemplateError> {
        for key in binding.keys() {
            if !self.params.iter().any(|p| &p.name == key) {
                return Err(TemplateError::UnknownParameter {
                    template: self.name.clone(),
                    name: key.clone(),
                });
            }
        }
        let mut env = BTreeMap::new();
        for p in &self.params {
            let v = binding.get(&p.name).ok_or_else(|| self.err_unbound(&p.name))?;
            if !p.domain.contains(v) {
                return Err(TemplateError::OutOfDomain {
                    template: self.name.clone(),
                    param: p.name.clone(),
                    value: v.clone(),
                });
            }
            env.insert(p.name.clone(), v.clone());
        }
        for d in &self.derived {
            let mut acc = 0i64;
            for (sign, term) in &d.terms {
                let v = match term {
                    Operand::Int(i) => *i,
                    Operand::Param(p) | Operand::Literal(p) => env
                        .get(p)
                        .and_then(|s| s.parse::<i64>().ok())
                        .ok_or_else(|| TemplateError::BadArithmetic {
                            template: self.name.clone(),
                            name: d.name.clone(),
                        })?,
                };
                acc += sign * v;
            }
            env.insert(d.name.clone(), acc.to_string());
        }
        if !self.satisfies(&env) {
            return Err(TemplateError::ConstraintViolated {
                template: self.name.clone(),
                binding: format_binding(binding),
                constraint: self.constraint.to_string(),
            });
        }
        Ok(env)
    }

    fn satisfies(&self, env: &BTreeMap<String, String>) -> bool {
        if self.constraint.any_of.is_empty() {
            return true;
        }
        let value = |o: &Operand| -> String {
            match o {
                Operand::Param(p) => env.get(p).cloned().unwrap_or_else(|| p.clone()),
                Operand::Literal(l) => env.get(l).cloned().unwrap_or_else(|| l.clone()),
                Operand::Int(i) => i.to_string(),
            }
        };
        self.constraint.any_of.iter().any(|clause| {
            clause.iter().all(|c| {
                let eq = value(&c.lhs) == value(&c.rhs);
                (c.op == CmpOp::Eq) == eq
            })
        })
    }

    /// Substitutes `binding` into every event field.
    pub fn instantiate(&self, binding: &Binding) -> Result<Lpn, TemplateError> {
        let env = self.resolve(binding)?;
        let subst = |s: &str| substitute(s, &env);
        let transitions = self
            .base
            .transitions()
            .iter()
            .map(|t| Transition {
                name: t.name.clone(),
                preset: t.preset,
                postset: t.postset,
                label: EventLabel::new(subst(&t.label.src), subst(&t.label.dest), subst(&t.label.cmd)),
                status: t.status.as_ref().map(|s| StatusRef {
                    component: subst(&s.component),
                    signal: subst(&s.signal),
                }),
            })
            .collect();
        let name = if binding.is_empty() {
            self.name.clone()
        } else {
            format!("{}[{}]", self.name, format_binding(binding))
        };
        Ok(Lpn::new(
            name,
            self.base.places().to_vec(),
            transitions,
            self.base.initial(),
        )?)
    }

    /// All bindings that satisfy the constraints, in lexicographic order of
    /// the value tuples (parameters taken in declaration order).
    pub fn legal_bindings(&self) -> Vec<Binding> {
        let mut tuples: Vec<Vec<String>> = vec![vec![]];
        for p in &self.params {
            let mut next = Vec::with_capacity(tuples.len() * p.domain.len());
            for t in &tuples {
                for v in &p.domain {
                    let mut t2 = t.clone();
                    t2.push(v.clone());
                    next.push(t2);
                }
            }
            tuples = next;
        }
        tuples.sort();
        tuples.dedup();
        tuples
            .into_iter()
            .map(|vals| {
                self.params
                    .iter()
                    .map(|p| p.name.clone())
                    .zip(vals)
                    .collect::<Binding>()
            })
            .filter(|b| self.resolve(b).is_ok())
            .collect()
    }

    /// Placeholder names appearing anywhere in the base net.
    pub fn placeholders(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in self.base.transitions() {
            let mut fields = vec![&t.label.src, &t.label.dest, &t.label.cmd];
            if let Some(s) = &t.status {
                fields.push(&s.component);
                fields.push(&s.signal);
            }
            for f in fields {
                for name in placeholders_in(f) {
                    if !out.contains(&name) {
                        out.push(name);
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn placeholders_in(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        out.push(rest[open + 1..open + close].to_string());
        rest = &rest[open + close + 1..];
    }
    out
}

fn substitute(s: &str, env: &BTreeMap<String, String>) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        match rest[open..].find('}') {
            Some(close) => {
                let key = &rest[open + 1..open + close];
                match env.get(key) {
                    Some(v) => out.push_str(v),
                    None => out.push_str(&rest[open..open + close + 1]),
                }
                rest = &rest[open + close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}
