//! Parser for the lavaan-style model language.
//!
//! A model is a sequence of formulas separated by newlines or `;`. Each
//! formula has a left-hand variable, one operator and a `+`-separated list
//! of right-hand terms:
//!
//! ```text
//! visual =~ x1 + prior("dnorm(1,1)")*x2 + x3     # loadings
//! dem65  ~ ind60 + dem60                         # regressions
//! y2    ~~ y4 + y6                               # (co)variances
//! abstract ~ prior("dnorm(9,.25)T(0,18)") * 1    # intercept
//! ```
//!
//! Terms may carry `*`-prefixed modifiers: a number fixes the parameter, a
//! bare identifier is an equality label, `prior("...")` attaches a prior
//! and `start(x)` an initial value. Prior strings are kept verbatim and are
//! only interpreted by [`crate::priors`].

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    /// `=~`
    Loading,
    /// `~`
    Regression,
    /// `~~`
    Covariance,
    /// `~ 1`
    Intercept,
}

impl Operator {
    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Loading => "=~",
            Operator::Regression => "~",
            Operator::Covariance => "~~",
            Operator::Intercept => "~1",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// Modifiers attached to a single right-hand term. At most one of each kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Modifiers {
    pub fixed: Option<f64>,
    pub label: Option<String>,
    pub prior: Option<String>,
    pub start: Option<f64>,
}

impl Modifiers {
    pub fn is_empty(&self) -> bool {
        self.fixed.is_none() && self.label.is_none() && self.prior.is_none() && self.start.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    /// Variable name, or `"1"` for the intercept pseudo-term.
    pub name: String,
    pub modifiers: Modifiers,
}

impl Term {
    pub fn plain(name: &str) -> Self {
        Term {
            name: name.to_string(),
            modifiers: Modifiers::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FormulaSpec {
    pub lhs: String,
    pub op: Operator,
    pub terms: Vec<Term>,
    /// 1-based line of the first formula that contributed to this spec.
    pub line: usize,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.modifiers;
        if let Some(p) = &m.prior {
            write!(f, "prior(\"{p}\")*")?;
        }
        if let Some(s) = m.start {
            write!(f, "start({s:?})*")?;
        }
        if let Some(l) = &m.label {
            write!(f, "{l}*")?;
        }
        if let Some(v) = m.fixed {
            write!(f, "{v:?}*")?;
        }
        f.write_str(&self.name)
    }
}

impl fmt::Display for FormulaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            Operator::Intercept => "~",
            other => other.symbol(),
        };
        write!(f, "{} {} ", self.lhs, op)?;
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Renders a parsed model back to source text, one formula per line.
pub fn render(specs: &[FormulaSpec]) -> String {
    specs.iter().map(|s| format!("{s}\n")).collect()
}

/// Parses model text into formula specifications.
///
/// Formulas that repeat a left-hand side with the same operator are merged,
/// keeping the right-hand terms in order of appearance.
pub fn parse_model(text: &str) -> Result<Vec<FormulaSpec>> {
    let mut specs: Vec<FormulaSpec> = Vec::new();
    for (line_no, stmt) in statements(text)? {
        for spec in parse_statement(&stmt, line_no)? {
            match specs
                .iter_mut()
                .find(|s| s.lhs == spec.lhs && s.op == spec.op)
            {
                Some(existing) => existing.terms.extend(spec.terms),
                None => specs.push(spec),
            }
        }
    }
    if specs.is_empty() {
        return Err(Error::syntax(0, "empty model"));
    }
    Ok(specs)
}

/// Splits text into (line, statement) pairs with comments removed.
fn statements(text: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut current = String::new();
        let mut quote: Option<char> = None;
        for ch in raw.chars() {
            match quote {
                Some(q) => {
                    current.push(ch);
                    if ch == q {
                        quote = None;
                    }
                }
                None => match ch {
                    '"' | '\'' => {
                        quote = Some(ch);
                        current.push(ch);
                    }
                    '#' | '!' => break,
                    ';' => {
                        push_statement(&mut out, line_no, &mut current);
                    }
                    _ => current.push(ch),
                },
            }
        }
        if quote.is_some() {
            return Err(Error::syntax(line_no, "unterminated string literal"));
        }
        push_statement(&mut out, line_no, &mut current);
    }
    Ok(out)
}

fn push_statement(out: &mut Vec<(usize, String)>, line: usize, current: &mut String) {
    let trimmed = current.trim();
    if !trimmed.is_empty() {
        out.push((line, trimmed.to_string()));
    }
    current.clear();
}

/// Finds the operator in a statement, scanning outside quotes and parentheses.
fn find_operator(stmt: &str, line: usize) -> Result<(usize, usize, Operator)> {
    let bytes = stmt.as_bytes();
    let mut depth = 0i32;
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if let Some(q) = quote {
            if b == q {
                quote = None;
            }
            i += 1;
            continue;
        }
        match b {
            b'"' | b'\'' => quote = Some(b),
            b'(' => depth += 1,
            b')' => depth -= 1,
            b'=' if depth == 0 => {
                if bytes.get(i + 1) == Some(&b'~') {
                    return Ok((i, 2, Operator::Loading));
                }
                return Err(Error::syntax(line, format!("unknown operator in `{stmt}`")));
            }
            b'~' if depth == 0 => {
                if bytes.get(i + 1) == Some(&b'~') {
                    return Ok((i, 2, Operator::Covariance));
                }
                return Ok((i, 1, Operator::Regression));
            }
            b'<' | b'>' | b':' if depth == 0 => {
                return Err(Error::syntax(
                    line,
                    format!("unsupported operator in `{stmt}`"),
                ));
            }
            _ => {}
        }
        i += 1;
    }
    Err(Error::syntax(
        line,
        format!("no operator found in `{stmt}`"),
    ))
}

fn parse_statement(stmt: &str, line: usize) -> Result<Vec<FormulaSpec>> {
    let (pos, len, op) = find_operator(stmt, line)?;
    let lhs = stmt[..pos].trim();
    let rhs = stmt[pos + len..].trim();
    if !is_identifier(lhs) {
        return Err(Error::syntax(
            line,
            format!("invalid left-hand side `{lhs}`"),
        ));
    }
    if rhs.is_empty() {
        return Err(Error::syntax(line, "empty right-hand side"));
    }
    let mut terms = Vec::new();
    for piece in split_top_level(rhs, '+', line)? {
        terms.push(parse_term(piece.trim(), line)?);
    }

    if op != Operator::Regression {
        if let Some(t) = terms.iter().find(|t| t.name == "1") {
            return Err(Error::syntax(
                line,
                format!("intercept term `{t}` is only allowed with `~`"),
            ));
        }
        return Ok(vec![FormulaSpec {
            lhs: lhs.to_string(),
            op,
            terms,
            line,
        }]);
    }

    let (intercepts, slopes): (Vec<Term>, Vec<Term>) =
        terms.into_iter().partition(|t| t.name == "1");
    if intercepts.len() > 1 {
        return Err(Error::syntax(line, "intercept listed twice"));
    }
    let mut out = Vec::new();
    if !slopes.is_empty() {
        out.push(FormulaSpec {
            lhs: lhs.to_string(),
            op: Operator::Regression,
            terms: slopes,
            line,
        });
    }
    if !intercepts.is_empty() {
        out.push(FormulaSpec {
            lhs: lhs.to_string(),
            op: Operator::Intercept,
            terms: intercepts,
            line,
        });
    }
    Ok(out)
}

/// Splits on `sep` outside parentheses and quotes.
fn split_top_level(s: &str, sep: char, line: usize) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        if let Some(q) = quote {
            if ch == q {
                quote = None;
            }
            continue;
        }
        match ch {
            '"' | '\'' => quote = Some(ch),
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::syntax(
                        line,
                        format!("unbalanced parentheses in `{s}`"),
                    ));
                }
            }
            c if c == sep && depth == 0 => {
                parts.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    if quote.is_some() {
        return Err(Error::syntax(line, format!("unterminated string in `{s}`")));
    }
    if depth != 0 {
        return Err(Error::syntax(
            line,
            format!("unbalanced parentheses in `{s}`"),
        ));
    }
    parts.push(&s[start..]);
    Ok(parts)
}

fn parse_term(src: &str, line: usize) -> Result<Term> {
    if src.is_empty() {
        return Err(Error::syntax(line, "empty term"));
    }
    let factors = split_top_level(src, '*', line)?;
    let (name_part, mods) = factors
        .split_last()
        .expect("split yields at least one part");
    let name = name_part.trim();
    if name != "1" && !is_identifier(name) {
        return Err(Error::syntax(
            line,
            format!("invalid variable name `{name}`"),
        ));
    }
    let mut modifiers = Modifiers::default();
    for m in mods {
        apply_modifier(&mut modifiers, m.trim(), line)?;
    }
    if modifiers.fixed.is_some() && modifiers.label.is_some() {
        return Err(Error::syntax(
            line,
            format!("term `{src}` combines a fixed value with a label"),
        ));
    }
    Ok(Term {
        name: name.to_string(),
        modifiers,
    })
}

fn apply_modifier(mods: &mut Modifiers, m: &str, line: usize) -> Result<()> {
    fn set<T>(slot: &mut Option<T>, v: T, kind: &str, line: usize) -> Result<()> {
        if slot.is_some() {
            return Err(Error::syntax(line, format!("duplicate {kind} modifier")));
        }
        *slot = Some(v);
        Ok(())
    }

    if m.is_empty() {
        return Err(Error::syntax(line, "empty modifier before `*`"));
    }
    if let Some(arg) = call_argument(m, "prior") {
        let text = unquote(arg).ok_or_else(|| {
            Error::syntax(
                line,
                format!("prior() expects a quoted string, got `{arg}`"),
            )
        })?;
        return set(&mut mods.prior, text.to_string(), "prior", line);
    }
    if let Some(arg) = call_argument(m, "start") {
        let v = parse_number(arg.trim())
            .ok_or_else(|| Error::syntax(line, format!("start() expects a number, got `{arg}`")))?;
        return set(&mut mods.start, v, "start", line);
    }
    if let Some(arg) = call_argument(m, "label") {
        let text = unquote(arg).filter(|t| is_identifier(t)).ok_or_else(|| {
            Error::syntax(line, format!("label() expects a quoted name, got `{arg}`"))
        })?;
        return set(&mut mods.label, text.to_string(), "label", line);
    }
    if let Some(v) = parse_number(m) {
        return set(&mut mods.fixed, v, "fixed-value", line);
    }
    if is_identifier(m) {
        return set(&mut mods.label, m.to_string(), "label", line);
    }
    Err(Error::syntax(line, format!("unrecognized modifier `{m}`")))
}

/// Returns the argument text of `name(...)` if `m` has that shape.
fn call_argument<'a>(m: &'a str, name: &str) -> Option<&'a str> {
    let rest = m.strip_prefix(name)?.trim_start();
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    Some(inner.trim())
}

fn unquote(s: &str) -> Option<&str> {
    let s = s.trim();
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return Some(&s[1..s.len() - 1]);
        }
    }
    None
}

fn parse_number(s: &str) -> Option<f64> {
    let first = s.chars().next()?;
    if !(first.is_ascii_digit() || matches!(first, '-' | '+' | '.')) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}
