//! Tokenizer and line parser for the model description language.
//!
//! A line holds one relation: `lhs op term (+ term)*`, where a term is
//! `[modifier *] name`. `y ~ 1` (or `y ~1`) declares an intercept.

use crate::error::{Result, SemError};

use super::Operator;

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Number(f64),
    Op(&'static str),
    Plus,
    Star,
}

#[derive(Debug, Clone)]
struct Spanned {
    token: Token,
    column: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Modifier {
    Fixed(f64),
    Label(String),
    Free,
}

#[derive(Debug, Clone)]
pub(crate) struct Term {
    pub modifier: Option<Modifier>,
    pub name: String,
}

#[derive(Debug, Clone)]
pub(crate) struct Relation {
    pub line: usize,
    pub lhs: String,
    pub op: Operator,
    pub terms: Vec<Term>,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> SemError {
    SemError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '.'
}

fn tokenize(text: &str, line: usize, offset: usize) -> Result<Vec<Spanned>> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = offset + i + 1;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let next = chars.get(i + 1).copied();
        match c {
            '=' if next == Some('~') => {
                tokens.push(Spanned { token: Token::Op("=~"), column });
                i += 2;
            }
            '~' if next == Some('~') => {
                tokens.push(Spanned { token: Token::Op("~~"), column });
                i += 2;
            }
            '~' => {
                tokens.push(Spanned { token: Token::Op("~"), column });
                i += 1;
            }
            '+' => {
                tokens.push(Spanned { token: Token::Plus, column });
                i += 1;
            }
            '*' => {
                tokens.push(Spanned { token: Token::Star, column });
                i += 1;
            }
            c if is_ident_start(c) => {
                let start = i;
                while i < chars.len() && is_ident_char(chars[i]) {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                tokens.push(Spanned { token: Token::Ident(word), column });
            }
            c if c.is_ascii_digit()
                || c == '.'
                || (c == '-' && next.is_some_and(|n| n.is_ascii_digit() || n == '.')) =>
            {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let exponent_sign =
                        (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exponent_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let literal: String = chars[start..i].iter().collect();
                let value: f64 = literal
                    .parse()
                    .map_err(|_| syntax(line, column, format!("malformed number `{literal}`")))?;
                if !value.is_finite() {
                    return Err(syntax(line, column, "non-finite number"));
                }
                tokens.push(Spanned { token: Token::Number(value), column });
            }
            '=' | '<' | '>' | ':' | '|' => {
                // catch `:=`, `==`, `<`, `|` and friends that belong to richer grammars
                let start = i;
                while i < chars.len() && "=<>:|~".contains(chars[i]) {
                    i += 1;
                }
                let op: String = chars[start..i].iter().collect();
                return Err(SemError::UnknownOperator { op, line });
            }
            other => {
                return Err(syntax(line, column, format!("unexpected character `{other}`")));
            }
        }
    }
    Ok(tokens)
}

fn parse_term(tokens: &[Spanned], pos: &mut usize, line: usize, end_column: usize) -> Result<Term> {
    let first = tokens
        .get(*pos)
        .ok_or_else(|| syntax(line, end_column, "expected a term"))?;
    *pos += 1;
    let starred = matches!(tokens.get(*pos).map(|t| &t.token), Some(Token::Star));
    if !starred {
        let name = term_name(first, line)?;
        return Ok(Term { modifier: None, name });
    }
    *pos += 1;
    let modifier = match &first.token {
        Token::Number(v) => Modifier::Fixed(*v),
        Token::Ident(s) if s == "NA" => Modifier::Free,
        Token::Ident(s) => Modifier::Label(s.clone()),
        _ => return Err(syntax(line, first.column, "expected a modifier before `*`")),
    };
    let name_token = tokens
        .get(*pos)
        .ok_or_else(|| syntax(line, end_column, "expected a name after `*`"))?;
    *pos += 1;
    let name = term_name(name_token, line)?;
    Ok(Term {
        modifier: Some(modifier),
        name,
    })
}

fn term_name(token: &Spanned, line: usize) -> Result<String> {
    match &token.token {
        Token::Ident(s) => Ok(s.clone()),
        // only the intercept pseudo-variable may be numeric
        Token::Number(v) if *v == 1.0 => Ok("1".to_string()),
        _ => Err(syntax(line, token.column, "expected a variable name")),
    }
}

fn parse_statement(text: &str, line: usize, offset: usize) -> Result<Option<Relation>> {
    let tokens = tokenize(text, line, offset)?;
    if tokens.is_empty() {
        return Ok(None);
    }
    let end_column = offset + text.chars().count() + 1;
    let lhs = match &tokens[0].token {
        Token::Ident(s) => s.clone(),
        _ => return Err(syntax(line, tokens[0].column, "expected a variable name")),
    };
    let op = match tokens.get(1).map(|t| &t.token) {
        Some(Token::Op("=~")) => Operator::Loading,
        Some(Token::Op("~~")) => Operator::Covariance,
        Some(Token::Op("~")) => Operator::Regression,
        Some(_) => return Err(syntax(line, tokens[1].column, "expected an operator")),
        None => return Err(syntax(line, end_column, "missing operator")),
    };
    let mut pos = 2;
    let mut terms = vec![parse_term(&tokens, &mut pos, line, end_column)?];
    while pos < tokens.len() {
        match tokens[pos].token {
            Token::Plus => {
                pos += 1;
                terms.push(parse_term(&tokens, &mut pos, line, end_column)?);
            }
            Token::Op(_) => {
                return Err(syntax(line, tokens[pos].column, "more than one operator on a line"))
            }
            _ => return Err(syntax(line, tokens[pos].column, "expected `+`")),
        }
    }
    for term in &terms {
        if term.name == "1" && op != Operator::Regression {
            return Err(syntax(line, offset + 1, "`1` is only valid on the right of `~`"));
        }
    }
    Ok(Some(Relation {
        line,
        lhs,
        op,
        terms,
    }))
}

/// Splits the source into statements and parses each one; blank lines and
/// `#` comments are skipped.
pub(crate) fn parse_relations(source: &str) -> Result<Vec<Relation>> {
    let mut relations = Vec::new();
    for (index, raw) in source.lines().enumerate() {
        let line = index + 1;
        let code = raw.split('#').next().unwrap_or("");
        let mut offset = 0;
        for segment in code.split(';') {
            if let Some(rel) = parse_statement(segment, line, offset)? {
                relations.push(rel);
            }
            offset += segment.chars().count() + 1;
        }
    }
    Ok(relations)
}
