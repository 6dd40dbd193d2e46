use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum TokenKind {
    /// Identifier or keyword, as written.
    Word(String),
    /// Numeric literal text, without sign.
    Number(String),
    Str(String),
    Hex(Vec<u8>),
    Comma,
    LParen,
    RParen,
    Star,
    Minus,
    Op(&'static str),
    Eof,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Byte offset of the token's first character.
    pub offset: usize,
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b',' => {
                i += 1;
                TokenKind::Comma
            }
            b'(' => {
                i += 1;
                TokenKind::LParen
            }
            b')' => {
                i += 1;
                TokenKind::RParen
            }
            b'*' => {
                i += 1;
                TokenKind::Star
            }
            b'-' => {
                i += 1;
                TokenKind::Minus
            }
            b'=' => {
                i += 1;
                TokenKind::Op("=")
            }
            b'!' if bytes.get(i + 1) == Some(&b'=') => {
                i += 2;
                TokenKind::Op("!=")
            }
            b'<' => match bytes.get(i + 1) {
                Some(b'=') => {
                    i += 2;
                    TokenKind::Op("<=")
                }
                Some(b'>') => {
                    i += 2;
                    TokenKind::Op("!=")
                }
                _ => {
                    i += 1;
                    TokenKind::Op("<")
                }
            },
            b'>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    i += 2;
                    TokenKind::Op(">=")
                } else {
                    i += 1;
                    TokenKind::Op(">")
                }
            }
            b'\'' => {
                let (s, end) = quoted(text, i)?;
                i = end;
                TokenKind::Str(s)
            }
            b'x' | b'X' if bytes.get(i + 1) == Some(&b'\'') => {
                let (s, end) = quoted(text, i + 1)?;
                if s.len() % 2 != 0 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(err(start, "bad hex literal"));
                }
                let v = (0..s.len()).step_by(2).map(|j| u8::from_str_radix(&s[j..j + 2], 16).expect("hex digits")).collect();
                i = end;
                TokenKind::Hex(v)
            }
            b'0'..=b'9' | b'.' => {
                i = number_end(bytes, i).ok_or_else(|| err(start, "malformed number"))?;
                TokenKind::Number(text[start..i].to_string())
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                TokenKind::Word(text[start..i].to_string())
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(err(start, format!("unexpected character {ch:?}")));
            }
        };
        out.push(Token { kind, offset: start });
    }
    out.push(Token { kind: TokenKind::Eof, offset: text.len() });
    Ok(out)
}

/// A single-quoted string starting at `i`, with `''` as an escaped quote.
/// Returns the contents and the offset just past the closing quote.
fn quoted(text: &str, i: usize) -> Result<(String, usize)> {
    let mut s = String::new();
    let mut chars = text[i + 1..].char_indices().peekable();
    while let Some((j, ch)) = chars.next() {
        if ch == '\'' {
            if matches!(chars.peek(), Some((_, '\''))) {
                chars.next();
                s.push('\'');
            } else {
                return Ok((s, i + 1 + j + 1));
            }
        } else {
            s.push(ch);
        }
    }
    Err(err(i, "unterminated string"))
}

fn number_end(b: &[u8], mut i: usize) -> Option<usize> {
    let digits = |i: &mut usize| {
        let s = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        *i > s
    };
    let int = digits(&mut i);
    let mut frac = false;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        frac = digits(&mut i);
    }
    if !int && !frac {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        if !digits(&mut i) {
            return None;
        }
    }
    if i < b.len() && (b[i].is_ascii_alphabetic() || b[i] == b'_') {
        return None;
    }
    Some(i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(s: &str) -> Vec<TokenKind> {
        tokenize(s).unwrap().into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn tokens_and_offsets() {
        let t = tokenize("a<=1.5e3 , 'it''s'").unwrap();
        assert_eq!(t.iter().map(|t| t.offset).collect::<Vec<_>>(), vec![0, 1, 3, 9, 11, 18]);
        assert_eq!(t[2].kind, TokenKind::Number("1.5e3".into()));
        assert_eq!(t[4].kind, TokenKind::Str("it's".into()));
        assert_eq!(kinds("x'0aff' <> -2"), vec![
            TokenKind::Hex(vec![10, 255]),
            TokenKind::Op("!="),
            TokenKind::Minus,
            TokenKind::Number("2".into()),
            TokenKind::Eof
        ]);
    }

    #[test]
    fn lexical_errors_carry_offsets() {
        for (s, off) in [("a = 'open", 4), ("a # b", 2), ("1e+", 0), ("12ab", 0), ("x'abc'", 0)] {
            match tokenize(s).unwrap_err() {
                Error::Parse { offset, .. } => assert_eq!(offset, off, "{s}"),
                e => panic!("{e}"),
            }
        }
    }
}
