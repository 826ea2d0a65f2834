//! Textual concrete syntax: a keyword-block language parsed into a
//! [`Model`](crate::metamodel::Model) and printed back in canonical form.

mod format;
mod lexer;
mod parser;

use std::fmt;

use serde::Serialize;

use crate::metamodel::Span;

pub use format::format;
pub use lexer::{tokenize, Token, TokenKind};
pub use parser::{parse, parse_with_file};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParseError {
    pub span: Span,
    /// What would have been accepted at this point; empty for lexical errors.
    pub expected: Vec<String>,
    pub found: String,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.span, self.message)
    }
}

impl std::error::Error for ParseError {}
