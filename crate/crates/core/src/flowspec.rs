//! Text format for flow templates.
//!
//! ```text
//! flow mem_write ( X in {0,1} ) where X != 2
//! let Y = 1 - X
//! place p1 init
//! place p9 terminal
//! trans t1: p1 -> p2 emits (CPU_{X},Cache_{X},wr_req)
//! trans t2: p2 -> p3 emits (Cache_{X},Bus,rd_req) when Cache_{X}.miss
//! ```

use std::fmt;

use thiserror::Error;

use crate::lpn::{EventLabel, LpnBuilder, StatusRef};
use crate::template::{
    CmpOp, Comparison, Constraint, Derived, FlowTemplate, Operand, Param,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub file: String,
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}: {}", self.file, self.line, self.col, self.message)
    }
}

pub(crate) struct LineCtx<'a> {
    pub source: &'a str,
    pub line_no: usize,
    pub line: &'a str,
}

impl LineCtx<'_> {
    pub fn err_at(&self, needle: &str, message: impl Into<String>) -> ParseError {
        let col = if needle.is_empty() {
            1
        } else {
            self.line.find(needle).map(|c| c + 1).unwrap_or(1)
        };
        ParseError {
            file: self.source.to_string(),
            line: self.line_no,
            col,
            message: message.into(),
        }
    }
}

/// Strips `#` comments and surrounding whitespace.
pub(crate) fn clean(line: &str) -> &str {
    match line.find('#') {
        Some(i) => line[..i].trim(),
        None => line.trim(),
    }
}

pub(crate) fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '{' || c == '}' || c == '\'')
}

/// Parses one flow template from `text`. `source` names the input in errors.
pub fn parse_flow(source: &str, text: &str) -> Result<FlowTemplate, ParseError> {
    let mut header: Option<(String, Vec<Param>, Constraint)> = None;
    let mut derived = Vec::new();
    let mut builder: Option<LpnBuilder> = None;
    let mut terminals: Vec<(String, usize)> = Vec::new();
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = clean(raw);
        last_line = idx + 1;
        if line.is_empty() {
            continue;
        }
        let ctx = LineCtx {
            source,
            line_no: idx + 1,
            line: raw,
        };
        let (kw, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim();
        match kw {
            "flow" => {
                if header.is_some() {
                    return Err(ctx.err_at("flow", "duplicate `flow` header"));
                }
                let (name, params, constraint) = parse_header(&ctx, rest)?;
                builder = Some(LpnBuilder::new(name.clone()));
                header = Some((name, params, constraint));
            }
            "let" => {
                if header.is_none() {
                    return Err(ctx.err_at("let", "`let` before `flow` header"));
                }
                derived.push(parse_let(&ctx, rest)?);
            }
            "place" => {
                let b = builder
                    .as_mut()
                    .ok_or_else(|| ctx.err_at("place", "`place` before `flow` header"))?;
                let mut words = rest.split_whitespace();
                let name = words.next().ok_or_else(|| ctx.err_at("", "missing place name"))?;
                if !is_ident(name) {
                    return Err(ctx.err_at(name, format!("bad place name `{name}`")));
                }
                let mut init = false;
                for w in words {
                    match w {
                        "init" => init = true,
                        "terminal" => terminals.push((name.to_string(), idx + 1)),
                        other => return Err(ctx.err_at(other, format!("unknown place flag `{other}`"))),
                    }
                }
                b.add_place(name, init);
            }
            "trans" => {
                let b = builder
                    .as_mut()
                    .ok_or_else(|| ctx.err_at("trans", "`trans` before `flow` header"))?;
                parse_trans(&ctx, rest, b)?;
            }
            other => return Err(ctx.err_at(other, format!("unknown keyword `{other}`"))),
        }
    }

    let (name, params, constraint) = header.ok_or_else(|| ParseError {
        file: source.to_string(),
        line: last_line.max(1),
        col: 1,
        message: "missing `flow` header".into(),
    })?;
    let builder = builder.expect("set with header");
    let terminal_ids: Vec<usize> = terminals
        .iter()
        .map(|(p, _)| builder.place_id(p).expect("declared"))
        .collect();
    let base = builder.build().map_err(|e| ParseError {
        file: source.to_string(),
        line: 1,
        col: 1,
        message: e.to_string(),
    })?;

    // Declared terminals must be exactly the places with no outgoing arcs.
    for (p, line) in &terminals {
        let id = base.place_index(p).expect("declared");
        if !base.end_state().contains(id) {
            return Err(ParseError {
                file: source.to_string(),
                line: *line,
                col: 1,
                message: format!("terminal place `{p}` has outgoing transitions"),
            });
        }
    }
    for p in base.end_state().places() {
        if !terminal_ids.contains(&p) {
            return Err(ParseError {
                file: source.to_string(),
                line: 1,
                col: 1,
                message: format!(
                    "place `{}` has no outgoing transitions but is not declared terminal",
                    base.places()[p]
                ),
            });
        }
    }
    if let Err(e) = base.check_acyclic() {
        return Err(ParseError {
            file: source.to_string(),
            line: 1,
            col: 1,
            message: e.to_string(),
        });
    }

    let tmpl = FlowTemplate {
        name,
        params,
        derived,
        constraint,
        base,
    };
    let declared: Vec<&str> = tmpl
        .params
        .iter()
        .map(|p| p.name.as_str())
        .chain(tmpl.derived.iter().map(|d| d.name.as_str()))
        .collect();
    for ph in tmpl.placeholders() {
        if !declared.contains(&ph.as_str()) {
            return Err(ParseError {
                file: source.to_string(),
                line: 1,
                col: 1,
                message: format!("placeholder `{{{ph}}}` is not a declared parameter"),
            });
        }
    }
    Ok(tmpl)
}

fn parse_header(ctx: &LineCtx<'_>, rest: &str) -> Result<(String, Vec<Param>, Constraint), ParseError> {
    let name_end = rest
        .find(|c: char| c.is_whitespace() || c == '(')
        .unwrap_or(rest.len());
    let name = &rest[..name_end];
    if !is_ident(name) {
        return Err(ctx.err_at(name, format!("bad flow name `{name}`")));
    }
    let mut rest = rest[name_end..].trim();
    let mut params = Vec::new();
    if let Some(r) = rest.strip_prefix('(') {
        let close = r
            .rfind(')')
            .ok_or_else(|| ctx.err_at("(", "unclosed parameter list"))?;
        let inner = &r[..close];
        for item in split_top_level(inner) {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (pname, dom) = item
                .split_once(" in ")
                .ok_or_else(|| ctx.err_at(item, "expected `<param> in {v1,...}`"))?;
            let pname = pname.trim();
            let dom = dom.trim();
            let body = dom
                .strip_prefix('{')
                .and_then(|d| d.strip_suffix('}'))
                .ok_or_else(|| ctx.err_at(dom, "domain must be `{v1,v2,...}`"))?;
            let domain: Vec<String> = body
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            if domain.is_empty() {
                return Err(ctx.err_at(dom, format!("empty domain for `{pname}`")));
            }
            if params.iter().any(|p: &Param| p.name == pname) {
                return Err(ctx.err_at(pname, format!("duplicate parameter `{pname}`")));
            }
            params.push(Param {
                name: pname.to_string(),
                domain,
            });
        }
        rest = r[close + 1..].trim();
    }
    let constraint = if let Some(c) = rest.strip_prefix("where") {
        parse_constraint(ctx, c.trim(), &params)?
    } else if rest.is_empty() {
        Constraint::default()
    } else {
        return Err(ctx.err_at(rest, format!("unexpected `{rest}` in header")));
    };
    Ok((name.to_string(), params, constraint))
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

fn operand(word: &str, params: &[Param]) -> Operand {
    if let Ok(i) = word.parse::<i64>() {
        Operand::Int(i)
    } else if params.iter().any(|p| p.name == word) {
        Operand::Param(word.to_string())
    } else {
        Operand::Literal(word.to_string())
    }
}

fn parse_constraint(ctx: &LineCtx<'_>, text: &str, params: &[Param]) -> Result<Constraint, ParseError> {
    let mut any_of = Vec::new();
    for clause in text.split(" or ") {
        let mut all = Vec::new();
        for cmp in clause.split(" and ") {
            let cmp = cmp.trim();
            let (lhs, op, rhs) = if let Some((l, r)) = cmp.split_once("!=") {
                (l, CmpOp::Ne, r)
            } else if let Some((l, r)) = cmp.split_once("==") {
                (l, CmpOp::Eq, r)
            } else {
                return Err(ctx.err_at(cmp, format!("expected `a != b` or `a == b`, got `{cmp}`")));
            };
            let (lhs, rhs) = (lhs.trim(), rhs.trim());
            if lhs.is_empty() || rhs.is_empty() {
                return Err(ctx.err_at(cmp, "empty operand in constraint"));
            }
            all.push(Comparison {
                lhs: operand(lhs, params),
                op,
                rhs: operand(rhs, params),
            });
        }
        any_of.push(all);
    }
    Ok(Constraint { any_of })
}

fn parse_let(ctx: &LineCtx<'_>, rest: &str) -> Result<Derived, ParseError> {
    let (name, expr) = rest
        .split_once('=')
        .ok_or_else(|| ctx.err_at("let", "expected `let NAME = expr`"))?;
    let name = name.trim();
    if !is_ident(name) {
        return Err(ctx.err_at(name, format!("bad derived name `{name}`")));
    }
    let mut terms = Vec::new();
    let mut sign = 1i64;
    let mut expect_term = true;
    for tok in tokenize_arith(expr) {
        match tok.as_str() {
            "+" | "-" if !expect_term => {
                sign = if tok == "-" { -1 } else { 1 };
                expect_term = true;
            }
            t if expect_term => {
                let op = match t.parse::<i64>() {
                    Ok(i) => Operand::Int(i),
                    Err(_) => Operand::Param(t.to_string()),
                };
                terms.push((sign, op));
                expect_term = false;
            }
            t => return Err(ctx.err_at(t, format!("unexpected `{t}` in expression"))),
        }
    }
    if terms.is_empty() || expect_term {
        return Err(ctx.err_at(expr.trim(), "incomplete expression"));
    }
    Ok(Derived {
        name: name.to_string(),
        terms,
    })
}

fn tokenize_arith(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c == '+' || c == '-' {
            if !cur.trim().is_empty() {
                out.push(cur.trim().to_string());
            }
            cur.clear();
            out.push(c.to_string());
        } else if c.is_whitespace() {
            if !cur.trim().is_empty() {
                out.push(cur.trim().to_string());
            }
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_trans(ctx: &LineCtx<'_>, rest: &str, b: &mut LpnBuilder) -> Result<(), ParseError> {
    let (name, body) = rest
        .split_once(':')
        .ok_or_else(|| ctx.err_at("trans", "expected `trans <id>: ...`"))?;
    let name = name.trim();
    if !is_ident(name) {
        return Err(ctx.err_at(name, format!("bad transition name `{name}`")));
    }
    let (arcs, tail) = body
        .split_once("emits")
        .ok_or_else(|| ctx.err_at(name, "missing `emits (<src>,<dest>,<cmd>)`"))?;
    let (pre, post) = arcs
        .split_once("->")
        .ok_or_else(|| ctx.err_at(arcs.trim(), "expected `<places> -> <places>`"))?;
    let places = |s: &str| -> Result<Vec<String>, ParseError> {
        let v: Vec<String> = s
            .split(',')
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect();
        if v.is_empty() {
            return Err(ctx.err_at(name, format!("transition `{name}` has an empty preset or postset")));
        }
        for p in &v {
            if !is_ident(p) {
                return Err(ctx.err_at(p, format!("bad place name `{p}`")));
            }
        }
        Ok(v)
    };
    let pre = places(pre)?;
    let post = places(post)?;
    let tail = tail.trim();
    let close = tail
        .find(')')
        .ok_or_else(|| ctx.err_at("emits", "expected `(<src>,<dest>,<cmd>)`"))?;
    let label_text = &tail[..=close];
    let label = EventLabel::parse(label_text)
        .filter(|_| label_text.starts_with('('))
        .ok_or_else(|| ctx.err_at(label_text, format!("bad event `{label_text}`")))?;
    for f in [&label.src, &label.dest, &label.cmd] {
        if !is_ident(f) {
            return Err(ctx.err_at(f, format!("bad event field `{f}`")));
        }
    }
    if label.src == label.dest {
        return Err(ctx.err_at(label_text, "event source equals destination"));
    }
    let after = tail[close + 1..].trim();
    let status = if after.is_empty() {
        None
    } else if let Some(sig) = after.strip_prefix("when") {
        let sig = sig.trim();
        let (component, signal) = sig
            .rsplit_once('.')
            .ok_or_else(|| ctx.err_at(sig, "expected `when <component>.<signal>`"))?;
        Some(StatusRef {
            component: component.to_string(),
            signal: signal.to_string(),
        })
    } else {
        return Err(ctx.err_at(after, format!("unexpected `{after}`")));
    };
    let pre: Vec<&str> = pre.iter().map(String::as_str).collect();
    let post: Vec<&str> = post.iter().map(String::as_str).collect();
    for p in pre.iter().chain(post.iter()) {
        if b.place_id(p).is_none() {
            return Err(ctx.err_at(p, format!("undeclared place `{p}`")));
        }
    }
    b.add_transition(name, &pre, &post, label, status);
    Ok(())
}
