use crate::engine::{AggFunc, AggSpec, Engine};
use crate::error::{Error, Result};
use crate::predicate::{CmpOp, Predicate};
use crate::value::Value;

use super::lexer::{tokenize, Token, TokenKind};
use super::{OrderBy, Projection, Query, SelectItem};

const KEYWORDS: &[&str] = &[
    "select", "from", "where", "group", "by", "order", "asc", "desc", "limit", "and", "or", "not", "true", "false", "null",
];

pub(super) struct Parsed {
    pub query: Query,
    from_offset: usize,
    star_offset: Option<usize>,
    item_offsets: Vec<usize>,
    filter_columns: Vec<(String, usize)>,
    group_offsets: Vec<usize>,
    order_offset: usize,
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

pub(super) fn parse(text: &str) -> Result<Parsed> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0, filter_columns: Vec::new() };
    p.query()
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    filter_columns: Vec<(String, usize)>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.kind != TokenKind::Eof {
            self.pos += 1;
        }
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().kind, TokenKind::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        let hit = self.is_keyword(kw);
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<()> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected {}", kw.to_ascii_uppercase())))
        }
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        let hit = &self.peek().kind == kind;
        if hit {
            self.pos += 1;
        }
        hit
    }

    fn expect(&mut self, kind: TokenKind, what: &str) -> Result<()> {
        if self.eat(&kind) {
            Ok(())
        } else {
            Err(self.unexpected(&format!("expected {what}")))
        }
    }

    fn unexpected(&self, msg: &str) -> Error {
        let t = self.peek();
        let found = match &t.kind {
            TokenKind::Eof => "end of input".to_string(),
            TokenKind::Word(w) => format!("{w:?}"),
            TokenKind::Number(n) => n.clone(),
            TokenKind::Str(s) => format!("'{s}'"),
            other => format!("{other:?}").to_lowercase(),
        };
        err(t.offset, format!("{msg}, found {found}"))
    }

    fn ident(&mut self) -> Result<(String, usize)> {
        let t = self.peek().clone();
        match t.kind {
            TokenKind::Word(w) if !KEYWORDS.contains(&w.to_ascii_lowercase().as_str()) => {
                self.pos += 1;
                Ok((w, t.offset))
            }
            _ => Err(self.unexpected("expected identifier")),
        }
    }

    fn query(&mut self) -> Result<Parsed> {
        self.expect_keyword("select")?;
        let mut star_offset = None;
        let mut items = Vec::new();
        let mut item_offsets = Vec::new();
        let projection = if self.peek().kind == TokenKind::Star {
            star_offset = Some(self.next().offset);
            Projection::Star
        } else {
            loop {
                let (item, off) = self.select_item()?;
                items.push(item);
                item_offsets.push(off);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
            Projection::Items(items)
        };
        self.expect_keyword("from")?;
        let (from, from_offset) = self.ident()?;
        let filter = if self.eat_keyword("where") { Some(self.or_expr()?) } else { None };
        let mut group_by = Vec::new();
        let mut group_offsets = Vec::new();
        if self.eat_keyword("group") {
            self.expect_keyword("by")?;
            loop {
                let (c, off) = self.ident()?;
                group_by.push(c);
                group_offsets.push(off);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        let mut order_by = None;
        let mut order_offset = 0;
        if self.eat_keyword("order") {
            self.expect_keyword("by")?;
            let (key, off) = self.select_item()?;
            order_offset = off;
            let descending = if self.eat_keyword("desc") {
                true
            } else {
                self.eat_keyword("asc");
                false
            };
            order_by = Some(OrderBy { key, descending });
        }
        let limit = if self.eat_keyword("limit") {
            let t = self.next();
            match t.kind {
                TokenKind::Number(n) => Some(n.parse::<usize>().map_err(|_| err(t.offset, "LIMIT needs a non-negative integer"))?),
                _ => return Err(err(t.offset, "LIMIT needs a non-negative integer")),
            }
        } else {
            None
        };
        if self.peek().kind != TokenKind::Eof {
            return Err(self.unexpected("expected end of query"));
        }
        Ok(Parsed {
            query: Query { projection, from, filter, group_by, order_by, limit },
            from_offset,
            star_offset,
            item_offsets,
            filter_columns: std::mem::take(&mut self.filter_columns),
            group_offsets,
            order_offset,
        })
    }

    fn select_item(&mut self) -> Result<(SelectItem, usize)> {
        let (name, off) = self.ident()?;
        if !self.eat(&TokenKind::LParen) {
            return Ok((SelectItem::Column(name), off));
        }
        let func = AggFunc::parse(&name).ok_or_else(|| err(off, format!("unknown aggregate {name:?}")))?;
        let column = if self.eat(&TokenKind::Star) {
            if func != AggFunc::Count {
                return Err(err(off, format!("{}(*) is not defined", func.name())));
            }
            None
        } else {
            Some(self.ident()?.0)
        };
        self.expect(TokenKind::RParen, "')'")?;
        Ok((SelectItem::Agg(AggSpec { func, column }), off))
    }

    fn or_expr(&mut self) -> Result<Predicate> {
        let mut p = self.and_expr()?;
        while self.eat_keyword("or") {
            p = Predicate::Or(Box::new(p), Box::new(self.and_expr()?));
        }
        Ok(p)
    }

    fn and_expr(&mut self) -> Result<Predicate> {
        let mut p = self.not_expr()?;
        while self.eat_keyword("and") {
            p = Predicate::And(Box::new(p), Box::new(self.not_expr()?));
        }
        Ok(p)
    }

    fn not_expr(&mut self) -> Result<Predicate> {
        if self.eat_keyword("not") {
            return Ok(Predicate::Not(Box::new(self.not_expr()?)));
        }
        if self.eat(&TokenKind::LParen) {
            let p = self.or_expr()?;
            self.expect(TokenKind::RParen, "')'")?;
            return Ok(p);
        }
        let (column, off) = self.ident()?;
        self.filter_columns.push((column.clone(), off));
        let t = self.next();
        let op = match t.kind {
            TokenKind::Op("=") => CmpOp::Eq,
            TokenKind::Op("!=") => CmpOp::Ne,
            TokenKind::Op("<") => CmpOp::Lt,
            TokenKind::Op("<=") => CmpOp::Le,
            TokenKind::Op(">") => CmpOp::Gt,
            TokenKind::Op(">=") => CmpOp::Ge,
            _ => {
                self.pos -= usize::from(t.kind != TokenKind::Eof);
                return Err(self.unexpected("expected comparison operator"));
            }
        };
        let value = self.literal()?;
        Ok(Predicate::Cmp { column, op, value })
    }

    fn literal(&mut self) -> Result<Value> {
        let t = self.next();
        match t.kind {
            TokenKind::Minus => {
                let n = self.next();
                match n.kind {
                    TokenKind::Number(s) => number(&format!("-{s}"), t.offset),
                    _ => Err(err(n.offset, "expected number after '-'")),
                }
            }
            TokenKind::Number(s) => number(&s, t.offset),
            TokenKind::Str(s) => Ok(Value::Text(s)),
            TokenKind::Hex(b) => Ok(Value::Bytes(b)),
            TokenKind::Word(w) => match w.to_ascii_lowercase().as_str() {
                "true" => Ok(Value::Bool(true)),
                "false" => Ok(Value::Bool(false)),
                "null" => Ok(Value::Null),
                "ts" if self.eat(&TokenKind::LParen) => {
                    let neg = self.eat(&TokenKind::Minus);
                    let n = self.next();
                    let TokenKind::Number(s) = n.kind else {
                        return Err(err(n.offset, "ts() needs an integer"));
                    };
                    let v: i64 = format!("{}{s}", if neg { "-" } else { "" })
                        .parse()
                        .map_err(|_| err(n.offset, "ts() needs an integer"))?;
                    self.expect(TokenKind::RParen, "')'")?;
                    Ok(Value::Timestamp(v))
                }
                _ => Err(err(t.offset, format!("expected literal, found {w:?}"))),
            },
            _ => {
                self.pos -= usize::from(t.kind != TokenKind::Eof);
                Err(self.unexpected("expected literal"))
            }
        }
    }
}

fn number(s: &str, offset: usize) -> Result<Value> {
    if s.contains(['.', 'e', 'E']) {
        s.parse::<f64>().map(Value::Float64).map_err(|_| err(offset, "malformed number"))
    } else {
        s.parse::<i64>().map(Value::Int64).map_err(|_| err(offset, "integer out of range"))
    }
}

impl Parsed {
    /// Resolves the source and every column, and checks grouping rules.
    pub fn check(&self, engine: &Engine) -> Result<()> {
        let q = &self.query;
        let cols = engine
            .source_columns(&q.from)
            .map_err(|_| err(self.from_offset, format!("unknown table {:?}", q.from)))?;
        let known = |c: &str, off: usize| {
            if cols.iter().any(|x| x == c) {
                Ok(())
            } else {
                Err(err(off, format!("unknown column {c:?} in {}", q.from)))
            }
        };
        let item_column = |item: &SelectItem| match item {
            SelectItem::Column(c) => Some(c.clone()),
            SelectItem::Agg(a) => a.column.clone(),
        };
        if let Projection::Items(items) = &q.projection {
            for (item, &off) in items.iter().zip(&self.item_offsets) {
                if let Some(c) = item_column(item) {
                    known(&c, off)?;
                }
            }
        }
        for (c, off) in &self.filter_columns {
            known(c, *off)?;
        }
        for (c, &off) in q.group_by.iter().zip(&self.group_offsets) {
            known(c, off)?;
        }
        if let Some(o) = &q.order_by {
            if let Some(c) = item_column(&o.key) {
                known(&c, self.order_offset)?;
            }
        }
        if q.is_aggregate() {
            if let Some(off) = self.star_offset {
                return Err(err(off, "SELECT * cannot be combined with grouping or aggregates"));
            }
            let grouped = |item: &SelectItem| match item {
                SelectItem::Column(c) => q.group_by.contains(c),
                SelectItem::Agg(_) => true,
            };
            if let Projection::Items(items) = &q.projection {
                for (item, &off) in items.iter().zip(&self.item_offsets) {
                    if !grouped(item) {
                        return Err(err(off, format!("{item} must appear in GROUP BY or be aggregated")));
                    }
                }
            }
            if let Some(o) = &q.order_by {
                if !grouped(&o.key) {
                    return Err(err(self.order_offset, format!("{} must appear in GROUP BY or be aggregated", o.key)));
                }
            }
        } else if let Some(OrderBy { key: SelectItem::Agg(_), .. }) = &q.order_by {
            return Err(err(self.order_offset, "ORDER BY an aggregate needs an aggregate query"));
        }
        Ok(())
    }
}
