use super::ast::Span;
use super::Diagnostic;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tok {
    Ident(String),
    /// Unsigned magnitude; the parser folds a leading `-`.
    Int(u64),
    Str(String),
    Bytes(Vec<u8>),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Lt,
    Gt,
    Le,
    Ge,
    EqEq,
    Ne,
    Assign,
    FatArrow,
    Colon,
    PathSep,
    Semi,
    Comma,
    Dot,
    Plus,
    PlusPlus,
    Minus,
    Star,
    Slash,
    Eof,
}

impl Tok {
    pub fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Int(n) => format!("integer `{n}`"),
            Tok::Str(_) => "string literal".into(),
            Tok::Bytes(_) => "byte literal".into(),
            Tok::Eof => "end of input".into(),
            other => format!("`{}`", other.symbol()),
        }
    }

    fn symbol(&self) -> &'static str {
        match self {
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::Lt => "<",
            Tok::Gt => ">",
            Tok::Le => "<=",
            Tok::Ge => ">=",
            Tok::EqEq => "==",
            Tok::Ne => "!=",
            Tok::Assign => "=",
            Tok::FatArrow => "=>",
            Tok::Colon => ":",
            Tok::PathSep => "::",
            Tok::Semi => ";",
            Tok::Comma => ",",
            Tok::Dot => ".",
            Tok::Plus => "+",
            Tok::PlusPlus => "++",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            _ => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub tok: Tok,
    pub span: Span,
}

pub fn lex(src: &str) -> Result<Vec<Token>, Diagnostic> {
    Lexer {
        src,
        pos: 0,
        line: 1,
        col: 1,
    }
    .run()
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    line: u32,
    col: u32,
}

impl Lexer<'_> {
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
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn error(&self, line: u32, col: u32, len: u32, msg: impl Into<String>) -> Diagnostic {
        Diagnostic::error(msg, Span::new(line, col, len.max(1)))
    }

    fn run(mut self) -> Result<Vec<Token>, Diagnostic> {
        let mut out = Vec::new();
        loop {
            self.skip_trivia();
            let (line, col, start) = (self.line, self.col, self.pos);
            let Some(c) = self.peek() else {
                out.push(Token {
                    tok: Tok::Eof,
                    span: Span::new(line, col, 0),
                });
                return Ok(out);
            };
            let tok = if c == 'b' && self.peek2() == Some('"') {
                self.bump();
                Tok::Bytes(self.string(line, col, true)?.into_bytes_lossless())
            } else if c.is_ascii_alphabetic() || c == '_' {
                while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
                    self.bump();
                }
                Tok::Ident(self.src[start..self.pos].to_string())
            } else if c.is_ascii_digit() {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.bump();
                }
                let text = &self.src[start..self.pos];
                if text.len() > 1 && text.starts_with('0') {
                    return Err(self.error(line, col, text.len() as u32, "leading zeros are not allowed"));
                }
                // Up to 2^63 so that `-9223372036854775808` can be folded.
                match text.parse::<u64>() {
                    Ok(n) if n <= 1 << 63 => Tok::Int(n),
                    _ => return Err(self.error(line, col, text.len() as u32, "integer literal out of range")),
                }
            } else if c == '"' {
                Tok::Str(self.string(line, col, false)?.into_string())
            } else {
                self.bump();
                let next = self.peek();
                let two = |lexer: &mut Self, t: Tok| {
                    lexer.bump();
                    t
                };
                match (c, next) {
                    ('(', _) => Tok::LParen,
                    (')', _) => Tok::RParen,
                    ('{', _) => Tok::LBrace,
                    ('}', _) => Tok::RBrace,
                    ('[', _) => Tok::LBracket,
                    (']', _) => Tok::RBracket,
                    ('<', Some('=')) => two(&mut self, Tok::Le),
                    ('<', _) => Tok::Lt,
                    ('>', Some('=')) => two(&mut self, Tok::Ge),
                    ('>', _) => Tok::Gt,
                    ('=', Some('=')) => two(&mut self, Tok::EqEq),
                    ('=', Some('>')) => two(&mut self, Tok::FatArrow),
                    ('=', _) => Tok::Assign,
                    ('!', Some('=')) => two(&mut self, Tok::Ne),
                    (':', Some(':')) => two(&mut self, Tok::PathSep),
                    (':', _) => Tok::Colon,
                    (';', _) => Tok::Semi,
                    (',', _) => Tok::Comma,
                    ('.', _) => Tok::Dot,
                    ('+', Some('+')) => two(&mut self, Tok::PlusPlus),
                    ('+', _) => Tok::Plus,
                    ('-', _) => Tok::Minus,
                    ('*', _) => Tok::Star,
                    ('/', _) => Tok::Slash,
                    _ => return Err(self.error(line, col, 1, format!("unexpected character `{c}`"))),
                }
            };
            let len = (self.pos - start) as u32;
            out.push(Token {
                tok,
                span: Span::new(line, col, if self.line == line { len } else { 1 }),
            });
        }
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('/') if self.peek2() == Some('/') => {
                    while self.peek().is_some_and(|c| c != '\n') {
                        self.bump();
                    }
                }
                _ => return,
            }
        }
    }

    /// Lexes a quoted literal; the opening quote is next. Byte literals take
    /// `\xHH` escapes and ASCII text only.
    fn string(&mut self, line: u32, col: u32, bytes: bool) -> Result<Lit, Diagnostic> {
        self.bump();
        let mut out = Lit::default();
        loop {
            let (l, c) = (self.line, self.col);
            match self.bump() {
                None | Some('\n') => return Err(self.error(line, col, 1, "unterminated string literal")),
                Some('"') => return Ok(out),
                Some('\\') => {
                    let esc = self.bump();
                    match esc {
                        Some('n') => out.push_byte(b'\n'),
                        Some('t') => out.push_byte(b'\t'),
                        Some('r') => out.push_byte(b'\r'),
                        Some('0') => out.push_byte(0),
                        Some('"') => out.push_byte(b'"'),
                        Some('\\') => out.push_byte(b'\\'),
                        Some('x') if bytes => {
                            let hex: String = [self.bump(), self.bump()].iter().flatten().collect();
                            let b = u8::from_str_radix(&hex, 16)
                                .ok()
                                .filter(|_| hex.len() == 2)
                                .ok_or_else(|| self.error(l, c, 4, "invalid \\x escape"))?;
                            out.push_byte(b);
                        }
                        Some('u') if !bytes => {
                            let ch = self.unicode_escape().ok_or_else(|| self.error(l, c, 2, "invalid \\u{...} escape"))?;
                            out.push_char(ch);
                        }
                        _ => return Err(self.error(l, c, 2, "unknown escape sequence")),
                    }
                }
                Some(ch) if bytes && !(ch.is_ascii() && !ch.is_ascii_control()) => {
                    return Err(self.error(l, c, 1, "byte literals take printable ASCII or \\x escapes"));
                }
                Some(ch) if ch.is_control() => {
                    return Err(self.error(l, c, 1, "control character in string literal"));
                }
                Some(ch) => out.push_char(ch),
            }
        }
    }

    fn unicode_escape(&mut self) -> Option<char> {
        if self.bump()? != '{' {
            return None;
        }
        let mut hex = String::new();
        loop {
            match self.bump()? {
                '}' => break,
                c if c.is_ascii_hexdigit() && hex.len() < 6 => hex.push(c),
                _ => return None,
            }
        }
        char::from_u32(u32::from_str_radix(&hex, 16).ok()?)
    }
}

#[derive(Default)]
struct Lit(Vec<u8>);

impl Lit {
    fn push_byte(&mut self, b: u8) {
        self.0.push(b);
    }

    fn push_char(&mut self, c: char) {
        let mut buf = [0u8; 4];
        self.0.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
    }

    fn into_string(self) -> String {
        // Only chars and ASCII escapes were pushed.
        String::from_utf8(self.0).expect("string literal is utf-8")
    }

    fn into_bytes_lossless(self) -> Vec<u8> {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(src: &str) -> Vec<Tok> {
        lex(src).unwrap().into_iter().map(|t| t.tok).collect()
    }

    #[test]
    fn operators_and_paths() {
        assert_eq!(
            toks("Task::run<Fs::ReadFile> => ++ <= != ==;"),
            vec![
                Tok::Ident("Task".into()),
                Tok::PathSep,
                Tok::Ident("run".into()),
                Tok::Lt,
                Tok::Ident("Fs".into()),
                Tok::PathSep,
                Tok::Ident("ReadFile".into()),
                Tok::Gt,
                Tok::FatArrow,
                Tok::PlusPlus,
                Tok::Le,
                Tok::Ne,
                Tok::EqEq,
                Tok::Semi,
                Tok::Eof
            ]
        );
    }

    #[test]
    fn literals() {
        assert_eq!(
            toks(r#""a\n\u{e9}" b"\x00z" 42 // note"#),
            vec![Tok::Str("a\né".into()), Tok::Bytes(vec![0, b'z']), Tok::Int(42), Tok::Eof]
        );
    }

    #[test]
    fn spans_are_one_based() {
        let t = lex("let\n  x").unwrap();
        assert_eq!((t[1].span.line, t[1].span.column, t[1].span.len), (2, 3, 1));
    }

    #[test]
    fn errors() {
        assert!(lex("\"open").is_err());
        assert!(lex("99999999999999999999").is_err());
        assert!(lex("a # b").is_err());
        assert!(lex("b\"é\"").is_err());
        assert!(lex("007").is_err());
    }
}
