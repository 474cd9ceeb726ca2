//! Surface syntax of communication programs.
//!
//! ```text
//! file    := program+
//! program := "#dsl v1 features=" ("V1" | "V2") " rules=" INT NEWLINE rule{K}
//! rule    := "argmax(map(" affine ", filter(" pred ", l)))"
//!          | "random(filter(" pred ", l))"
//! pred    := primary [("&&" | "||") primary]
//! primary := "(" pred ")" | "true" | affine (">=" | "<=") affine
//! affine  := ["-"] term (("+" | "-") term)*
//! term    := NUMBER ["*" NAME] | NAME
//! ```
//!
//! One rule per line. Blank lines and lines starting with `#` (other than
//! headers) are ignored. `≥`, `≤` and `θ` are accepted as aliases.

use std::fmt::{self, Write};

use super::ast::{Affine, Pred, Program, Rule, MAX_PRED_DEPTH};
use super::features::FeatureVersion;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax(String),
    UnknownFeature(String),
    DepthExceeded(usize),
    Header(String),
    RuleCount { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: ", self.line, self.col)?;
        match &self.kind {
            ParseErrorKind::Syntax(m) => write!(f, "syntax error: {m}"),
            ParseErrorKind::UnknownFeature(n) => write!(f, "unknown feature `{n}`"),
            ParseErrorKind::DepthExceeded(d) => {
                write!(f, "predicate depth {d} exceeds the bound of {MAX_PRED_DEPTH}")
            }
            ParseErrorKind::Header(m) => write!(f, "bad header: {m}"),
            ParseErrorKind::RuleCount { expected, found } => {
                write!(f, "header declares {expected} rules but {found} follow")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Name(String),
    Num(f64),
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
    Ge,
    Le,
    And,
    Or,
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Name(n) => write!(f, "`{n}`"),
            Tok::Num(v) => write!(f, "`{v}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Plus => f.write_str("`+`"),
            Tok::Minus => f.write_str("`-`"),
            Tok::Star => f.write_str("`*`"),
            Tok::Ge => f.write_str("`>=`"),
            Tok::Le => f.write_str("`<=`"),
            Tok::And => f.write_str("`&&`"),
            Tok::Or => f.write_str("`||`"),
            Tok::End => f.write_str("end of line"),
        }
    }
}

fn lex(line: &str, line_no: usize) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |col: usize, m: String| ParseError { line: line_no, col, kind: ParseErrorKind::Syntax(m) };
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let two = |s: &str| chars[i..].iter().take(2).collect::<String>() == s;
        let tok = match c {
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            ',' => Tok::Comma,
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '*' => Tok::Star,
            '≥' => Tok::Ge,
            '≤' => Tok::Le,
            '>' if two(">=") => {
                i += 1;
                Tok::Ge
            }
            '<' if two("<=") => {
                i += 1;
                Tok::Le
            }
            '&' if two("&&") => {
                i += 1;
                Tok::And
            }
            '|' if two("||") => {
                i += 1;
                Tok::Or
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    let mut k = i + 1;
                    if k < chars.len() && (chars[k] == '+' || chars[k] == '-') {
                        k += 1;
                    }
                    if k < chars.len() && chars[k].is_ascii_digit() {
                        i = k;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let v: f64 = text.parse().map_err(|_| err(col, format!("bad number `{text}`")))?;
                out.push((Tok::Num(v), col));
                continue;
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push((Tok::Name(chars[start..i].iter().collect()), col));
                continue;
            }
            other => return Err(err(col, format!("unexpected character `{other}`"))),
        };
        out.push((tok, col));
        i += 1;
    }
    out.push((Tok::End, chars.len() + 1));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    version: FeatureVersion,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn col(&self) -> usize {
        self.toks[self.pos].1
    }

    fn error(&self, kind: ParseErrorKind) -> ParseError {
        ParseError { line: self.line, col: self.col(), kind }
    }

    fn syntax(&self, m: impl Into<String>) -> ParseError {
        self.error(ParseErrorKind::Syntax(m.into()))
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.pos].0.clone();
        if t != Tok::End {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok) -> Result<(), ParseError> {
        if *self.peek() == want {
            self.bump();
            Ok(())
        } else {
            Err(self.syntax(format!("expected {want}, found {}", self.peek())))
        }
    }

    fn keyword(&mut self, word: &str) -> Result<(), ParseError> {
        match self.peek() {
            Tok::Name(n) if n == word => {
                self.bump();
                Ok(())
            }
            other => Err(self.syntax(format!("expected `{word}`, found {other}"))),
        }
    }

    fn rule(&mut self) -> Result<Rule, ParseError> {
        let rule = match self.peek() {
            Tok::Name(n) if n == "argmax" => {
                self.bump();
                self.expect(Tok::LParen)?;
                self.keyword("map")?;
                self.expect(Tok::LParen)?;
                let score = self.affine()?;
                self.expect(Tok::Comma)?;
                let pred = self.filter()?;
                self.expect(Tok::RParen)?;
                self.expect(Tok::RParen)?;
                Rule::Det { score, pred }
            }
            Tok::Name(n) if n == "random" => {
                self.bump();
                self.expect(Tok::LParen)?;
                let pred = self.filter()?;
                self.expect(Tok::RParen)?;
                Rule::Rand { pred }
            }
            other => return Err(self.syntax(format!("expected `argmax` or `random`, found {other}"))),
        };
        if *self.peek() != Tok::End {
            return Err(self.syntax(format!("trailing input starting at {}", self.peek())));
        }
        Ok(rule)
    }

    fn filter(&mut self) -> Result<Pred, ParseError> {
        self.keyword("filter")?;
        self.expect(Tok::LParen)?;
        let start = self.col();
        let pred = self.pred()?;
        let depth = pred.depth();
        if depth > MAX_PRED_DEPTH {
            return Err(ParseError { line: self.line, col: start, kind: ParseErrorKind::DepthExceeded(depth) });
        }
        self.expect(Tok::Comma)?;
        self.keyword("l")?;
        self.expect(Tok::RParen)?;
        Ok(pred)
    }

    fn pred(&mut self) -> Result<Pred, ParseError> {
        let lhs = self.primary()?;
        match self.peek() {
            Tok::And => {
                self.bump();
                Ok(Pred::And(Box::new(lhs), Box::new(self.primary()?)))
            }
            Tok::Or => {
                self.bump();
                Ok(Pred::Or(Box::new(lhs), Box::new(self.primary()?)))
            }
            _ => Ok(lhs),
        }
    }

    fn primary(&mut self) -> Result<Pred, ParseError> {
        match self.peek() {
            Tok::LParen => {
                self.bump();
                let p = self.pred()?;
                self.expect(Tok::RParen)?;
                Ok(p)
            }
            Tok::Name(n) if n == "true" => {
                self.bump();
                Ok(Pred::always(self.version.dim()))
            }
            _ => {
                let lhs = self.affine()?;
                let flip = match self.bump() {
                    Tok::Ge => false,
                    Tok::Le => true,
                    other => {
                        self.pos -= usize::from(other != Tok::End);
                        return Err(self.syntax(format!("expected `>=` or `<=`, found {other}")));
                    }
                };
                let rhs = self.affine()?;
                let (pos, neg) = if flip { (rhs, lhs) } else { (lhs, rhs) };
                Ok(Pred::Atom(Affine(pos.0.iter().zip(&neg.0).map(|(a, b)| a - b).collect())))
            }
        }
    }

    fn affine(&mut self) -> Result<Affine, ParseError> {
        let mut acc = Affine::zeros(self.version.dim());
        let mut sign = 1.0;
        if *self.peek() == Tok::Minus {
            self.bump();
            sign = -1.0;
        }
        loop {
            self.term(sign, &mut acc)?;
            match self.peek() {
                Tok::Plus => sign = 1.0,
                Tok::Minus => sign = -1.0,
                _ => return Ok(acc),
            }
            self.bump();
        }
    }

    fn term(&mut self, sign: f64, acc: &mut Affine) -> Result<(), ParseError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                if *self.peek() == Tok::Star {
                    self.bump();
                    let idx = self.feature()?;
                    acc.0[idx] += sign * v;
                } else {
                    acc.0[self.version.const_index()] += sign * v;
                }
                Ok(())
            }
            Tok::Name(_) => {
                let idx = self.feature()?;
                acc.0[idx] += sign;
                Ok(())
            }
            other => Err(self.syntax(format!("expected a number or feature name, found {other}"))),
        }
    }

    fn feature(&mut self) -> Result<usize, ParseError> {
        match self.peek().clone() {
            Tok::Name(n) => match self.version.index_of(&n) {
                Some(idx) => {
                    self.bump();
                    Ok(idx)
                }
                None => Err(self.error(ParseErrorKind::UnknownFeature(n))),
            },
            other => Err(self.syntax(format!("expected a feature name, found {other}"))),
        }
    }
}

fn parse_header(line: &str, line_no: usize) -> Result<(FeatureVersion, usize), ParseError> {
    let bad = |m: String| ParseError { line: line_no, col: 1, kind: ParseErrorKind::Header(m) };
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#dsl") || parts.next() != Some("v1") {
        return Err(bad("expected `#dsl v1`".into()));
    }
    let mut version = None;
    let mut rules = None;
    for p in parts {
        if let Some(v) = p.strip_prefix("features=") {
            version = Some(v.parse::<FeatureVersion>().map_err(bad)?);
        } else if let Some(k) = p.strip_prefix("rules=") {
            rules = Some(k.parse::<usize>().map_err(|_| bad(format!("bad rule count `{k}`")))?);
        } else {
            return Err(bad(format!("unexpected field `{p}`")));
        }
    }
    let version = version.ok_or_else(|| bad("missing `features=`".into()))?;
    let rules = rules.ok_or_else(|| bad("missing `rules=`".into()))?;
    if rules == 0 {
        return Err(bad("a program needs at least one rule".into()));
    }
    Ok((version, rules))
}

/// Parses one or more consecutive programs (one per communication round).
pub fn parse_programs(text: &str) -> Result<Vec<Program>, ParseError> {
    let mut programs: Vec<(Program, usize, usize)> = Vec::new();
    let mut last_line = 0;
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with("#dsl") {
            if let Some((p, expected, hdr)) = programs.last() {
                if p.rules.len() != *expected {
                    return Err(ParseError {
                        line: *hdr,
                        col: 1,
                        kind: ParseErrorKind::RuleCount { expected: *expected, found: p.rules.len() },
                    });
                }
            }
            let (features, expected) = parse_header(line, line_no)?;
            programs.push((Program { features, rules: Vec::new() }, expected, line_no));
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let Some((program, _, _)) = programs.last_mut() else {
            return Err(ParseError {
                line: line_no,
                col: 1,
                kind: ParseErrorKind::Header("rule before `#dsl` header".into()),
            });
        };
        let offset = raw.len() - raw.trim_start().len();
        let mut toks = lex(line, line_no)?;
        for t in &mut toks {
            t.1 += offset;
        }
        let mut parser = Parser { toks, pos: 0, line: line_no, version: program.features };
        program.rules.push(parser.rule()?);
    }
    match programs.last() {
        None => Err(ParseError {
            line: last_line.max(1),
            col: 1,
            kind: ParseErrorKind::Header("no `#dsl` header".into()),
        }),
        Some((p, expected, hdr)) if p.rules.len() != *expected => Err(ParseError {
            line: *hdr,
            col: 1,
            kind: ParseErrorKind::RuleCount { expected: *expected, found: p.rules.len() },
        }),
        _ => Ok(programs.into_iter().map(|(p, _, _)| p).collect()),
    }
}

/// Parses a file holding exactly one program.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let mut all = parse_programs(text)?;
    if all.len() != 1 {
        return Err(ParseError {
            line: 1,
            col: 1,
            kind: ParseErrorKind::Header(format!("expected one program, found {}", all.len())),
        });
    }
    Ok(all.remove(0))
}

fn write_terms(out: &mut String, coeffs: &[f64], names: &[&str], constant: Option<f64>) {
    let mut first = true;
    let mut emit = |out: &mut String, c: f64, name: Option<&str>| {
        let neg = c < 0.0;
        let mag = c.abs();
        if first {
            if neg {
                out.push('-');
            }
        } else {
            out.push_str(if neg { " - " } else { " + " });
        }
        first = false;
        match name {
            Some(n) if mag == 1.0 => out.push_str(n),
            Some(n) => {
                let _ = write!(out, "{mag}*{n}");
            }
            None => {
                let _ = write!(out, "{mag}");
            }
        }
    };
    for (c, name) in coeffs.iter().zip(names) {
        if *c != 0.0 {
            emit(out, *c, Some(name));
        }
    }
    if let Some(c) = constant {
        if c != 0.0 {
            emit(out, c, None);
        }
    }
    if first {
        out.push('0');
    }
}

fn write_affine(out: &mut String, a: &Affine, version: FeatureVersion) {
    let ci = version.const_index();
    write_terms(out, &a.0[..ci], version.names(), Some(a.0[ci]));
}

fn write_pred(out: &mut String, p: &Pred, version: FeatureVersion) {
    match p {
        Pred::Atom(a) if a.is_zero() => out.push_str("true"),
        Pred::Atom(a) => {
            let ci = version.const_index();
            write_terms(out, &a.0[..ci], version.names(), None);
            let _ = write!(out, " >= {}", -a.0[ci]);
        }
        Pred::And(l, r) | Pred::Or(l, r) => {
            let op = if matches!(p, Pred::And(..)) { " && " } else { " || " };
            for (k, side) in [l, r].into_iter().enumerate() {
                if k == 1 {
                    out.push_str(op);
                }
                if matches!(**side, Pred::Atom(_)) {
                    write_pred(out, side, version);
                } else {
                    out.push('(');
                    write_pred(out, side, version);
                    out.push(')');
                }
            }
        }
    }
}

pub fn print_rule(rule: &Rule, version: FeatureVersion) -> String {
    let mut out = String::new();
    match rule {
        Rule::Det { score, pred } => {
            out.push_str("argmax(map(");
            write_affine(&mut out, score, version);
            out.push_str(", filter(");
            write_pred(&mut out, pred, version);
            out.push_str(", l)))");
        }
        Rule::Rand { pred } => {
            out.push_str("random(filter(");
            write_pred(&mut out, pred, version);
            out.push_str(", l))");
        }
    }
    out
}

pub fn print_program(p: &Program) -> String {
    let mut out = format!("#dsl v1 features={} rules={}\n", p.features.label(), p.rules.len());
    for r in &p.rules {
        out.push_str(&print_rule(r, p.features));
        out.push('\n');
    }
    out
}

pub fn print_programs(ps: &[Program]) -> String {
    ps.iter().map(print_program).collect()
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_program(self))
    }
}
