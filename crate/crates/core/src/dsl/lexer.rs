use std::fmt;
use std::sync::Arc;

use crate::metamodel::Span;

use super::ParseError;

#[derive(Clone, Debug, PartialEq)]
pub enum TokenKind {
    Ident(String),
    /// Unsigned; the parser applies a leading minus.
    Int(u64),
    Real(f64),
    Str(String),
    /// `:name`
    Symbol(String),
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    LParen,
    RParen,
    Comma,
    Dot,
    Arrow,
    Assign,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Eof,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self {
            TokenKind::Ident(s) => return write!(f, "'{s}'"),
            TokenKind::Int(v) => return write!(f, "integer {v}"),
            TokenKind::Real(v) => return write!(f, "number {v}"),
            TokenKind::Str(_) => "string",
            TokenKind::Symbol(s) => return write!(f, "symbol :{s}"),
            TokenKind::LBrace => "'{'",
            TokenKind::RBrace => "'}'",
            TokenKind::LBracket => "'['",
            TokenKind::RBracket => "']'",
            TokenKind::LParen => "'('",
            TokenKind::RParen => "')'",
            TokenKind::Comma => "','",
            TokenKind::Dot => "'.'",
            TokenKind::Arrow => "'->'",
            TokenKind::Assign => "'='",
            TokenKind::EqEq => "'=='",
            TokenKind::NotEq => "'!='",
            TokenKind::Lt => "'<'",
            TokenKind::Le => "'<='",
            TokenKind::Gt => "'>'",
            TokenKind::Ge => "'>='",
            TokenKind::Plus => "'+'",
            TokenKind::Minus => "'-'",
            TokenKind::Star => "'*'",
            TokenKind::Slash => "'/'",
            TokenKind::Eof => "end of input",
        };
        f.write_str(p)
    }
}

#[derive(Clone, Debug)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Span,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    line: u32,
    column: u32,
    file: Option<Arc<str>>,
    tokens: Vec<Token>,
    errors: Vec<ParseError>,
}

/// Splits `src` into tokens. Unrecognized characters are reported and
/// skipped so that parsing can continue; the token list always ends with
/// `Eof`.
pub fn tokenize(src: &str, file: Option<Arc<str>>) -> (Vec<Token>, Vec<ParseError>) {
    let mut lx = Lexer { src, pos: 0, line: 1, column: 1, file, tokens: Vec::new(), errors: Vec::new() };
    lx.run();
    (lx.tokens, lx.errors)
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek2(&self) -> Option<char> {
        let mut it = self.src[self.pos..].chars();
        it.next();
        it.next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn mark(&self) -> (usize, u32, u32) {
        (self.pos, self.line, self.column)
    }

    fn span(&self, (start, line, column): (usize, u32, u32)) -> Span {
        Span {
            file: self.file.clone(),
            start,
            end: self.pos,
            line,
            column,
            end_line: self.line,
            end_column: self.column,
        }
    }

    fn push(&mut self, kind: TokenKind, mark: (usize, u32, u32)) {
        let span = self.span(mark);
        self.tokens.push(Token { kind, span });
    }

    fn error(&mut self, mark: (usize, u32, u32), found: String, message: String) {
        let span = self.span(mark);
        self.errors.push(ParseError { span, expected: Vec::new(), found, message });
    }

    fn run(&mut self) {
        while let Some(c) = self.peek() {
            let m = self.mark();
            if c.is_whitespace() {
                self.bump();
                continue;
            }
            if c == '#' {
                while let Some(c) = self.peek() {
                    if c == '\n' {
                        break;
                    }
                    self.bump();
                }
                continue;
            }
            if c.is_ascii_alphabetic() || c == '_' {
                let word = self.word();
                self.push(TokenKind::Ident(word), m);
                continue;
            }
            if c.is_ascii_digit() {
                self.number(m);
                continue;
            }
            if c == '"' {
                self.string(m);
                continue;
            }
            if c == ':' {
                self.bump();
                if self.peek().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
                    let word = self.word();
                    self.push(TokenKind::Symbol(word), m);
                } else {
                    self.error(m, "':'".into(), "expected a symbol name after ':'".into());
                }
                continue;
            }
            self.bump();
            let next = self.peek();
            let kind = match (c, next) {
                ('-', Some('>')) => {
                    self.bump();
                    TokenKind::Arrow
                }
                ('=', Some('=')) => {
                    self.bump();
                    TokenKind::EqEq
                }
                ('!', Some('=')) => {
                    self.bump();
                    TokenKind::NotEq
                }
                ('<', Some('=')) => {
                    self.bump();
                    TokenKind::Le
                }
                ('>', Some('=')) => {
                    self.bump();
                    TokenKind::Ge
                }
                ('{', _) => TokenKind::LBrace,
                ('}', _) => TokenKind::RBrace,
                ('[', _) => TokenKind::LBracket,
                (']', _) => TokenKind::RBracket,
                ('(', _) => TokenKind::LParen,
                (')', _) => TokenKind::RParen,
                (',', _) => TokenKind::Comma,
                ('.', _) => TokenKind::Dot,
                ('=', _) => TokenKind::Assign,
                ('<', _) => TokenKind::Lt,
                ('>', _) => TokenKind::Gt,
                ('+', _) => TokenKind::Plus,
                ('-', _) => TokenKind::Minus,
                ('*', _) => TokenKind::Star,
                ('/', _) => TokenKind::Slash,
                _ => {
                    self.error(m, format!("{c:?}"), format!("unexpected character {c:?}"));
                    continue;
                }
            };
            self.push(kind, m);
        }
        let m = self.mark();
        self.push(TokenKind::Eof, m);
    }

    fn word(&mut self) -> String {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.bump();
        }
        self.src[start..self.pos].to_string()
    }

    fn digits(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
        }
    }

    fn number(&mut self, m: (usize, u32, u32)) {
        let start = self.pos;
        self.digits();
        let is_real = self.peek() == Some('.') && self.peek2().is_some_and(|c| c.is_ascii_digit());
        if is_real {
            self.bump();
            self.digits();
        }
        if self.peek().is_some_and(|c| c.is_ascii_alphabetic() || c == '_') {
            let tail = self.word();
            let text = &self.src[start..self.pos];
            self.error(m, format!("'{text}'"), format!("malformed number '{text}' ({tail:?} is not allowed)"));
            return;
        }
        let text = &self.src[start..self.pos];
        if is_real {
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => self.push(TokenKind::Real(v), m),
                _ => {
                    let text = text.to_string();
                    self.error(m, text.clone(), format!("number {text} is out of range"))
                }
            }
        } else {
            match text.parse::<u64>() {
                Ok(v) => self.push(TokenKind::Int(v), m),
                Err(_) => {
                    let text = text.to_string();
                    self.error(m, text.clone(), format!("integer {text} is out of range"))
                }
            }
        }
    }

    fn string(&mut self, m: (usize, u32, u32)) {
        self.bump();
        let mut value = String::new();
        loop {
            match self.bump() {
                None | Some('\n') => {
                    self.error(m, "end of line".into(), "unterminated string".into());
                    return;
                }
                Some('"') => break,
                Some('\\') => match self.bump() {
                    Some('"') => value.push('"'),
                    Some('\\') => value.push('\\'),
                    Some('n') => value.push('\n'),
                    Some('t') => value.push('\t'),
                    other => {
                        let found = other.map(|c| format!("{c:?}")).unwrap_or_else(|| "end of input".into());
                        self.error(m, found.clone(), format!("invalid escape \\{}", found.trim_matches('\'')));
                        if other.is_none() {
                            return;
                        }
                    }
                },
                Some(c) => value.push(c),
            }
        }
        self.push(TokenKind::Str(value), m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        let (toks, errs) = tokenize(src, None);
        assert!(errs.is_empty(), "{errs:?}");
        toks.into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn operators_and_literals() {
        use TokenKind::*;
        assert_eq!(
            kinds("a->b <= 0.25 # note\n:red \"x\\\"y\" 7 self.age"),
            vec![
                Ident("a".into()),
                Arrow,
                Ident("b".into()),
                Le,
                Real(0.25),
                Symbol("red".into()),
                Str("x\"y".into()),
                Int(7),
                Ident("self".into()),
                Dot,
                Ident("age".into()),
                Eof
            ]
        );
    }

    #[test]
    fn spans_track_lines_and_columns() {
        let (toks, _) = tokenize("model\n  X", None);
        assert_eq!((toks[1].span.line, toks[1].span.column), (2, 3));
        assert_eq!(toks[1].span.end_column, 4);
    }

    #[test]
    fn bad_input_is_reported_not_fatal() {
        let (toks, errs) = tokenize("a $ b \"open", None);
        assert_eq!(errs.len(), 2);
        assert_eq!(toks.len(), 3);
        let (_, errs) = tokenize("99999999999999999999999", None);
        assert_eq!(errs.len(), 1);
        let (_, errs) = tokenize("12abc", None);
        assert_eq!(errs.len(), 1);
    }
}
