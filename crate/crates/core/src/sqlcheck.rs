//! Minimal SQL grammar checker: a recursive-descent recogniser for the
//! SELECT subset that templates use (joins, nested subqueries, aggregates,
//! grouping, ordering, set operations).
//!
//! `check_sql` rejects placeholder markers; `check_pattern` accepts
//! `${name}` wherever a literal may appear.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SqlSyntaxError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for SqlSyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "syntax error at byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for SqlSyntaxError {}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Number,
    Str,
    Placeholder,
    Sym(&'static str),
}

const KEYWORDS: &[&str] = &[
    "SELECT", "DISTINCT", "FROM", "WHERE", "GROUP", "BY", "HAVING", "ORDER", "LIMIT", "AS", "AND",
    "OR", "NOT", "IN", "LIKE", "BETWEEN", "IS", "NULL", "EXISTS", "JOIN", "INNER", "LEFT", "RIGHT",
    "OUTER", "ON", "ASC", "DESC", "UNION", "ALL", "INTERSECT", "EXCEPT",
];

const SYMBOLS: &[&str] = &["<>", "!=", "<=", ">=", "(", ")", ",", ".", "*", "=", "<", ">", "+", "-", "/", ";"];

fn lex(sql: &str, allow_placeholders: bool) -> Result<Vec<(usize, Tok)>, SqlSyntaxError> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |offset: usize, message: &str| SqlSyntaxError {
        offset,
        message: message.to_string(),
    };
    'outer: while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Word(sql[start..i].to_string())));
            continue;
        }
        if c.is_ascii_digit() {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            out.push((start, Tok::Number));
            continue;
        }
        if c == b'\'' {
            i += 1;
            loop {
                match bytes.get(i) {
                    None => return Err(err(start, "unterminated string literal")),
                    Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => i += 2,
                    Some(b'\'') => {
                        i += 1;
                        break;
                    }
                    Some(_) => i += 1,
                }
            }
            out.push((start, Tok::Str));
            continue;
        }
        if c == b'$' {
            if !allow_placeholders {
                return Err(err(start, "unsubstituted placeholder"));
            }
            if bytes.get(i + 1) != Some(&b'{') {
                return Err(err(start, "stray `$`"));
            }
            match sql[i..].find('}') {
                Some(end) => {
                    i += end + 1;
                    out.push((start, Tok::Placeholder));
                    continue;
                }
                None => return Err(err(start, "unterminated placeholder")),
            }
        }
        for s in SYMBOLS {
            if sql[i..].starts_with(s) {
                i += s.len();
                out.push((start, Tok::Sym(s)));
                continue 'outer;
            }
        }
        return Err(err(start, &format!("unexpected character `{}`", c as char)));
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

type PResult = Result<(), SqlSyntaxError>;

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T, SqlSyntaxError> {
        Err(SqlSyntaxError {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn is_kw_at(&self, ahead: usize, kw: &str) -> bool {
        matches!(self.toks.get(self.pos + ahead), Some((_, Tok::Word(w))) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.fail(format!("expected {kw}"))
        }
    }

    fn is_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(x)) if *x == s)
    }

    fn eat_sym(&mut self, s: &str) -> bool {
        if self.is_sym(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, s: &str) -> PResult {
        if self.eat_sym(s) {
            Ok(())
        } else {
            self.fail(format!("expected `{s}`"))
        }
    }

    fn ident(&mut self) -> PResult {
        match self.peek() {
            Some(Tok::Word(w)) if !KEYWORDS.iter().any(|k| w.eq_ignore_ascii_case(k)) => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail("expected identifier"),
        }
    }

    fn is_ident(&self) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if !KEYWORDS.iter().any(|k| w.eq_ignore_ascii_case(k)))
    }

    fn query(&mut self) -> PResult {
        self.select()?;
        while self.eat_kw("UNION") || self.eat_kw("INTERSECT") || self.eat_kw("EXCEPT") {
            self.eat_kw("ALL");
            self.select()?;
        }
        Ok(())
    }

    fn select(&mut self) -> PResult {
        if self.eat_sym("(") {
            self.query()?;
            return self.expect_sym(")");
        }
        self.expect_kw("SELECT")?;
        self.eat_kw("DISTINCT");
        if !self.eat_sym("*") {
            self.select_item()?;
            while self.eat_sym(",") {
                self.select_item()?;
            }
        }
        self.expect_kw("FROM")?;
        self.table_ref()?;
        loop {
            if self.eat_sym(",") {
                self.table_ref()?;
            } else if self.is_kw("JOIN") || self.is_kw("INNER") || self.is_kw("LEFT") || self.is_kw("RIGHT") {
                if self.eat_kw("LEFT") || self.eat_kw("RIGHT") {
                    self.eat_kw("OUTER");
                } else {
                    self.eat_kw("INNER");
                }
                self.expect_kw("JOIN")?;
                self.table_ref()?;
                self.expect_kw("ON")?;
                self.expr()?;
            } else {
                break;
            }
        }
        if self.eat_kw("WHERE") {
            self.expr()?;
        }
        if self.eat_kw("GROUP") {
            self.expect_kw("BY")?;
            self.expr_list()?;
            if self.eat_kw("HAVING") {
                self.expr()?;
            }
        }
        if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            loop {
                self.expr()?;
                if !self.eat_kw("ASC") {
                    self.eat_kw("DESC");
                }
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        if self.eat_kw("LIMIT") {
            match self.peek() {
                Some(Tok::Number) | Some(Tok::Placeholder) => self.pos += 1,
                _ => return self.fail("expected LIMIT count"),
            }
        }
        Ok(())
    }

    fn select_item(&mut self) -> PResult {
        self.expr()?;
        if self.eat_kw("AS") {
            self.ident()?;
        } else if self.is_ident() {
            self.ident()?;
        }
        Ok(())
    }

    fn table_ref(&mut self) -> PResult {
        if self.eat_sym("(") {
            self.query()?;
            self.expect_sym(")")?;
            self.eat_kw("AS");
            return self.ident();
        }
        self.ident()?;
        if self.eat_kw("AS") {
            self.ident()?;
        } else if self.is_ident() {
            self.ident()?;
        }
        Ok(())
    }

    fn expr_list(&mut self) -> PResult {
        self.expr()?;
        while self.eat_sym(",") {
            self.expr()?;
        }
        Ok(())
    }

    fn expr(&mut self) -> PResult {
        self.and_expr()?;
        while self.eat_kw("OR") {
            self.and_expr()?;
        }
        Ok(())
    }

    fn and_expr(&mut self) -> PResult {
        self.not_expr()?;
        while self.eat_kw("AND") {
            self.not_expr()?;
        }
        Ok(())
    }

    fn not_expr(&mut self) -> PResult {
        if self.eat_kw("NOT") {
            return self.not_expr();
        }
        self.predicate()
    }

    fn predicate(&mut self) -> PResult {
        if self.eat_kw("EXISTS") {
            self.expect_sym("(")?;
            self.query()?;
            return self.expect_sym(")");
        }
        self.additive()?;
        for op in ["=", "<>", "!=", "<=", ">=", "<", ">"] {
            if self.eat_sym(op) {
                return self.additive();
            }
        }
        if self.eat_kw("IS") {
            self.eat_kw("NOT");
            return self.expect_kw("NULL");
        }
        let negated = self.is_kw("NOT")
            && (self.is_kw_at(1, "IN") || self.is_kw_at(1, "LIKE") || self.is_kw_at(1, "BETWEEN"));
        if negated {
            self.pos += 1;
        }
        if self.eat_kw("IN") {
            self.expect_sym("(")?;
            if self.is_kw("SELECT") {
                self.query()?;
            } else {
                self.expr_list()?;
            }
            return self.expect_sym(")");
        }
        if self.eat_kw("LIKE") {
            return self.additive();
        }
        if self.eat_kw("BETWEEN") {
            self.additive()?;
            self.expect_kw("AND")?;
            return self.additive();
        }
        if negated {
            return self.fail("expected IN, LIKE or BETWEEN after NOT");
        }
        Ok(())
    }

    fn additive(&mut self) -> PResult {
        self.term()?;
        while self.eat_sym("+") || self.eat_sym("-") {
            self.term()?;
        }
        Ok(())
    }

    fn term(&mut self) -> PResult {
        self.factor()?;
        while self.eat_sym("*") || self.eat_sym("/") {
            self.factor()?;
        }
        Ok(())
    }

    fn factor(&mut self) -> PResult {
        match self.peek().cloned() {
            Some(Tok::Number) | Some(Tok::Str) | Some(Tok::Placeholder) => {
                self.pos += 1;
                Ok(())
            }
            Some(Tok::Sym("-")) => {
                self.pos += 1;
                self.factor()
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                if self.is_kw("SELECT") {
                    self.query()?;
                } else {
                    self.expr()?;
                }
                self.expect_sym(")")
            }
            Some(Tok::Word(w)) if w.eq_ignore_ascii_case("NULL") => {
                self.pos += 1;
                Ok(())
            }
            Some(Tok::Word(_)) if self.is_ident() => {
                self.pos += 1;
                if self.eat_sym("(") {
                    self.eat_kw("DISTINCT");
                    if !self.eat_sym("*") && !self.is_sym(")") {
                        self.expr_list()?;
                    }
                    return self.expect_sym(")");
                }
                if self.eat_sym(".") && !self.eat_sym("*") {
                    self.ident()?;
                }
                Ok(())
            }
            _ => self.fail("expected expression"),
        }
    }
}

fn check(sql: &str, allow_placeholders: bool) -> Result<(), SqlSyntaxError> {
    let toks = lex(sql, allow_placeholders)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: sql.len(),
    };
    p.query()?;
    p.eat_sym(";");
    if p.pos != p.toks.len() {
        return p.fail("trailing input");
    }
    Ok(())
}

/// Checks a fully rendered SQL string.
pub fn check_sql(sql: &str) -> Result<(), SqlSyntaxError> {
    check(sql, false)
}

/// Checks a template pattern, treating each `${name}` as a literal.
pub fn check_pattern(pattern: &str) -> Result<(), SqlSyntaxError> {
    check(pattern, true)
}

/// True when `value` can stand unquoted as an operand: a single number or
/// a single identifier that is not a keyword.
pub fn is_bare_operand(value: &str) -> bool {
    match lex(value, false).as_deref() {
        Ok([(_, Tok::Number)]) => true,
        Ok([(_, Tok::Word(w))]) => !KEYWORDS.iter().any(|k| w.eq_ignore_ascii_case(k)),
        _ => false,
    }
}
