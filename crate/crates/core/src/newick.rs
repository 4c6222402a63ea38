//! Newick reading and writing.
//!
//! Grammar accepted:
//!
//! ```text
//! tree    := subtree ";"
//! subtree := leaf | "(" subtree ("," subtree)+ ")" [label] [":" length]
//! leaf    := label [":" length]
//! ```
//!
//! Labels are either unquoted (underscores kept verbatim) or single-quoted
//! with `''` as an escaped quote. Whitespace between tokens is ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tree::{Node, NodeId, PhyloTree};

pub fn parse_newick(text: &str) -> Result<PhyloTree> {
    check_balance(text)?;
    let mut p = Parser {
        src: text.as_bytes(),
        text,
        pos: 0,
        nodes: Vec::new(),
    };
    p.skip_ws();
    let root = p.subtree(None)?;
    p.skip_ws();
    if p.peek() != Some(b';') {
        return Err(p.error("expected ';'"));
    }
    p.pos += 1;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("trailing text after ';'"));
    }
    let tree = PhyloTree::from_nodes(p.nodes, root);
    tree.validate_labels()?;
    Ok(tree)
}

/// Parenthesis depth scan outside quoted labels. An unclosed group is
/// reported at the terminating `;` (or the last byte when there is none).
fn check_balance(text: &str) -> Result<()> {
    let bytes = text.as_bytes();
    let mut depth = 0i64;
    let mut quoted = false;
    for (i, &c) in bytes.iter().enumerate() {
        match c {
            b'\'' => quoted = !quoted,
            _ if quoted => {}
            b'(' => depth += 1,
            b')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::NewickSyntax {
                        offset: i,
                        message: "unmatched ')'".into(),
                    });
                }
            }
            b';' if depth > 0 => {
                return Err(Error::NewickSyntax {
                    offset: i,
                    message: format!("{depth} unclosed '('"),
                });
            }
            _ => {}
        }
    }
    if depth > 0 {
        return Err(Error::NewickSyntax {
            offset: bytes.len().saturating_sub(1),
            message: format!("{depth} unclosed '('"),
        });
    }
    Ok(())
}

struct Parser<'a> {
    src: &'a [u8],
    text: &'a str,
    pos: usize,
    nodes: Vec<Node>,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::NewickSyntax {
            offset: self.pos.min(self.src.len().saturating_sub(1)),
            message: message.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(|c| c.is_ascii_whitespace()) {
            self.pos += 1;
        }
    }

    fn push(&mut self, parent: Option<NodeId>) -> NodeId {
        self.nodes.push(Node {
            label: None,
            length: None,
            parent,
            children: Vec::new(),
        });
        self.nodes.len() - 1
    }

    fn subtree(&mut self, parent: Option<NodeId>) -> Result<NodeId> {
        let id = self.push(parent);
        self.skip_ws();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                self.skip_ws();
                if matches!(self.peek(), Some(b',') | Some(b')')) {
                    return Err(self.error("empty subtree"));
                }
                let child = self.subtree(Some(id))?;
                self.nodes[id].children.push(child);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    None => return Err(self.error("unbalanced parentheses")),
                    Some(_) => return Err(self.error("expected ',' or ')'")),
                }
            }
            if self.nodes[id].children.len() < 2 {
                return Err(self.error("internal node needs at least two children"));
            }
            self.nodes[id].label = self.label()?;
        } else {
            match self.label()? {
                Some(l) => self.nodes[id].label = Some(l),
                None => return Err(self.error("empty subtree")),
            }
        }
        self.skip_ws();
        if self.peek() == Some(b':') {
            self.pos += 1;
            self.skip_ws();
            self.nodes[id].length = Some(self.length()?);
        }
        Ok(id)
    }

    fn label(&mut self) -> Result<Option<String>> {
        self.skip_ws();
        if self.peek() == Some(b'\'') {
            self.pos += 1;
            let mut out = String::new();
            let start = self.pos;
            loop {
                match self.peek() {
                    None => {
                        self.pos = start;
                        return Err(self.error("unterminated quoted label"));
                    }
                    Some(b'\'') if self.src.get(self.pos + 1) == Some(&b'\'') => {
                        out.push('\'');
                        self.pos += 2;
                    }
                    Some(b'\'') => {
                        self.pos += 1;
                        return Ok(Some(out));
                    }
                    Some(_) => {
                        let ch = self.text[self.pos..].chars().next().expect("in bounds");
                        out.push(ch);
                        self.pos += ch.len_utf8();
                    }
                }
            }
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if matches!(c, b'(' | b')' | b',' | b':' | b';' | b'\'' | b'[' | b']')
                || c.is_ascii_whitespace()
            {
                break;
            }
            self.pos += 1;
        }
        Ok((self.pos > start).then(|| self.text[start..self.pos].to_string()))
    }

    fn length(&mut self) -> Result<f64> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || matches!(c, b'.' | b'-' | b'+' | b'e' | b'E'))
        {
            self.pos += 1;
        }
        let s = &self.text[start..self.pos];
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| {
                self.pos = start;
                self.error("invalid branch length")
            })
    }
}

fn needs_quotes(label: &str) -> bool {
    label.is_empty()
        || label.chars().any(|c| {
            c.is_whitespace() || matches!(c, '(' | ')' | ',' | ':' | ';' | '\'' | '[' | ']')
        })
}

fn write_label(out: &mut String, label: &str) {
    if needs_quotes(label) {
        out.push('\'');
        out.push_str(&label.replace('\'', "''"));
        out.push('\'');
    } else {
        out.push_str(label);
    }
}

/// Serialises children in stored order; lengths use `precision` decimals.
pub fn write_newick(tree: &PhyloTree, precision: usize) -> String {
    let mut out = String::new();
    // iterative to cope with deep caterpillars
    enum Step {
        Enter(NodeId),
        Comma,
        Close(NodeId),
    }
    let mut stack = vec![Step::Enter(tree.root())];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(id) => {
                let node = tree.node(id);
                if node.children.is_empty() {
                    finish_node(&mut out, tree, id, precision);
                } else {
                    out.push('(');
                    stack.push(Step::Close(id));
                    for (i, &c) in node.children.iter().enumerate().rev() {
                        stack.push(Step::Enter(c));
                        if i > 0 {
                            stack.push(Step::Comma);
                        }
                    }
                }
            }
            Step::Comma => out.push(','),
            Step::Close(id) => {
                out.push(')');
                finish_node(&mut out, tree, id, precision);
            }
        }
    }
    out.push(';');
    out
}

fn finish_node(out: &mut String, tree: &PhyloTree, id: NodeId, precision: usize) {
    let node = tree.node(id);
    if let Some(l) = &node.label {
        write_label(out, l);
    }
    if let Some(len) = node.length {
        let _ = write!(out, ":{len:.precision$}");
    }
}

pub fn read_newick_file(path: &Path) -> Result<PhyloTree> {
    let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_newick(text.trim()).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_newick_file(path: &Path, tree: &PhyloTree, precision: usize) -> Result<()> {
    let mut text = write_newick(tree, precision);
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
