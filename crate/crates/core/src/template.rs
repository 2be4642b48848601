//! Small prompt template language.
//!
//! ```text
//! {question}                     value lookup
//! {#each knowledge}...{/each}    loop over a list; `{index}` is 1-based
//! {#if applications}...{/if}     render when the value is non-empty
//! {#unless external}...{/unless} render when the value is empty
//! {! comment !}                  dropped
//! {{ and }}                      literal braces
//! ```
//!
//! A block tag or comment alone on its line removes the whole line, so
//! templates can be laid out one tag per line without leaking blank lines.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Text(String),
    List(Vec<Scope>),
}

impl Value {
    fn is_empty(&self) -> bool {
        match self {
            Value::Text(s) => s.is_empty(),
            Value::List(l) => l.is_empty(),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<Vec<Scope>> for Value {
    fn from(l: Vec<Scope>) -> Self {
        Value::List(l)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scope(BTreeMap<String, Value>);

impl Scope {
    pub fn new() -> Self {
        Scope::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.insert(key.to_string(), value.into());
    }

    /// A list of scopes each holding a single `text` field.
    pub fn texts<S: AsRef<str>>(items: &[S]) -> Vec<Scope> {
        items
            .iter()
            .map(|t| Scope::new().with("text", t.as_ref()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Text(String),
    Var(String),
    Each(String, Vec<Node>),
    If {
        name: String,
        negate: bool,
        body: Vec<Node>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Text(String),
    Var(String),
    Open { kind: String, name: String },
    Close(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    id: String,
    nodes: Vec<Node>,
}

impl Template {
    pub fn parse(id: &str, source: &str) -> Result<Template> {
        let err = |message: String| Error::Template {
            template: id.to_string(),
            message,
        };
        let toks = lex(&strip_standalone(source)).map_err(err)?;
        let mut pos = 0;
        let nodes = build(&toks, &mut pos, None).map_err(err)?;
        Ok(Template {
            id: id.to_string(),
            nodes,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn render(&self, scope: &Scope) -> Result<String> {
        let mut out = String::new();
        render_nodes(&self.nodes, &[scope], &mut out).map_err(|message| Error::Template {
            template: self.id.clone(),
            message,
        })?;
        Ok(out)
    }
}

fn is_block_tag(tag: &str) -> bool {
    tag.starts_with("{#") || tag.starts_with("{/") || tag.starts_with("{!")
}

/// Lines holding only one block tag or comment keep the tag and lose the
/// surrounding whitespace and newline.
fn strip_standalone(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    for line in source.split_inclusive('\n') {
        let body = line.trim();
        let standalone = is_block_tag(body)
            && body.ends_with('}')
            && !body.starts_with("{{")
            && body[1..].find('{').is_none()
            && body.matches('}').count() == 1;
        if standalone {
            out.push_str(body);
        } else {
            out.push_str(line);
        }
    }
    out
}

fn lex(src: &str) -> std::result::Result<Vec<Tok>, String> {
    let mut toks = Vec::new();
    let mut text = String::new();
    let mut rest = src;
    while let Some(i) = rest.find(['{', '}']) {
        text.push_str(&rest[..i]);
        let tail = &rest[i..];
        if let Some(after) = tail.strip_prefix("{{") {
            text.push('{');
            rest = after;
            continue;
        }
        if let Some(after) = tail.strip_prefix("}}") {
            text.push('}');
            rest = after;
            continue;
        }
        if tail.starts_with('}') {
            return Err("unmatched `}` (write `}}` for a literal brace)".into());
        }
        if tail.starts_with("{!") {
            let end = tail
                .find("!}")
                .ok_or_else(|| "unterminated comment".to_string())?;
            rest = &tail[end + 2..];
            continue;
        }
        let end = tail
            .find('}')
            .ok_or_else(|| "unterminated tag".to_string())?;
        let inner = tail[1..end].trim();
        if !text.is_empty() {
            toks.push(Tok::Text(std::mem::take(&mut text)));
        }
        if let Some(open) = inner.strip_prefix('#') {
            let mut parts = open.split_whitespace();
            let kind = parts.next().unwrap_or_default().to_string();
            let name = parts
                .next()
                .ok_or_else(|| format!("block `{{#{kind}}}` needs a name"))?
                .to_string();
            if !matches!(kind.as_str(), "each" | "if" | "unless") {
                return Err(format!("unknown block `{kind}`"));
            }
            toks.push(Tok::Open { kind, name });
        } else if let Some(close) = inner.strip_prefix('/') {
            toks.push(Tok::Close(close.trim().to_string()));
        } else if inner.is_empty() || !inner.chars().all(|c| c.is_alphanumeric() || c == '_') {
            return Err(format!("invalid placeholder `{{{inner}}}`"));
        } else {
            toks.push(Tok::Var(inner.to_string()));
        }
        rest = &tail[end + 1..];
    }
    text.push_str(rest);
    if !text.is_empty() {
        toks.push(Tok::Text(text));
    }
    Ok(toks)
}

fn build(
    toks: &[Tok],
    pos: &mut usize,
    closing: Option<&str>,
) -> std::result::Result<Vec<Node>, String> {
    let mut nodes = Vec::new();
    while *pos < toks.len() {
        let tok = &toks[*pos];
        *pos += 1;
        match tok {
            Tok::Text(t) => nodes.push(Node::Text(t.clone())),
            Tok::Var(v) => nodes.push(Node::Var(v.clone())),
            Tok::Open { kind, name } => {
                let body = build(toks, pos, Some(kind))?;
                nodes.push(match kind.as_str() {
                    "each" => Node::Each(name.clone(), body),
                    k => Node::If {
                        name: name.clone(),
                        negate: k == "unless",
                        body,
                    },
                });
            }
            Tok::Close(kind) => {
                return match closing {
                    Some(open) if open == kind => Ok(nodes),
                    Some(open) => Err(format!("`{{/{kind}}}` closes `{{#{open}}}`")),
                    None => Err(format!("`{{/{kind}}}` without an opening block")),
                };
            }
        }
    }
    match closing {
        Some(open) => Err(format!("unclosed `{{#{open}}}`")),
        None => Ok(nodes),
    }
}

fn lookup<'a>(stack: &[&'a Scope], name: &str) -> Option<&'a Value> {
    stack.iter().rev().find_map(|s| s.0.get(name))
}

fn render_nodes(
    nodes: &[Node],
    stack: &[&Scope],
    out: &mut String,
) -> std::result::Result<(), String> {
    for node in nodes {
        match node {
            Node::Text(t) => out.push_str(t),
            Node::Var(name) => match lookup(stack, name) {
                Some(Value::Text(t)) => out.push_str(t),
                Some(Value::List(_)) => return Err(format!("`{name}` is a list, not text")),
                None => return Err(format!("missing value `{name}`")),
            },
            Node::If { name, negate, body } => {
                let present = lookup(stack, name).is_some_and(|v| !v.is_empty());
                if present != *negate {
                    render_nodes(body, stack, out)?;
                }
            }
            Node::Each(name, body) => {
                let items = match lookup(stack, name) {
                    Some(Value::List(items)) => items,
                    Some(Value::Text(_)) => return Err(format!("`{name}` is text, not a list")),
                    None => return Err(format!("missing list `{name}`")),
                };
                for (i, item) in items.iter().enumerate() {
                    let counter = Scope::new().with("index", (i + 1).to_string());
                    let mut inner: Vec<&Scope> = stack.to_vec();
                    inner.push(&counter);
                    inner.push(item);
                    render_nodes(body, &inner, out)?;
                }
            }
        }
    }
    Ok(())
}

pub const BUILTIN: &[(&str, &str)] = &[
    ("bare", include_str!("../templates/bare.tmpl")),
    ("rag", include_str!("../templates/rag.tmpl")),
    ("rag_plus", include_str!("../templates/rag_plus.tmpl")),
    (
        "rag_plus_grouped",
        include_str!("../templates/rag_plus_grouped.tmpl"),
    ),
    (
        "rag_app_only",
        include_str!("../templates/rag_app_only.tmpl"),
    ),
    ("graph", include_str!("../templates/graph.tmpl")),
    ("graph_plus", include_str!("../templates/graph_plus.tmpl")),
    (
        "graph_app_only",
        include_str!("../templates/graph_app_only.tmpl"),
    ),
    (
        "afrag_preliminary",
        include_str!("../templates/afrag_preliminary.tmpl"),
    ),
    ("rerank", include_str!("../templates/rerank.tmpl")),
    (
        "rerank_reminder",
        include_str!("../templates/rerank_reminder.tmpl"),
    ),
    (
        "classify_kind",
        include_str!("../templates/classify_kind.tmpl"),
    ),
    (
        "classify_reminder",
        include_str!("../templates/classify_reminder.tmpl"),
    ),
    (
        "generate_conceptual",
        include_str!("../templates/generate_conceptual.tmpl"),
    ),
    (
        "generate_procedural",
        include_str!("../templates/generate_procedural.tmpl"),
    ),
    (
        "generate_reminder",
        include_str!("../templates/generate_reminder.tmpl"),
    ),
    (
        "vote_category",
        include_str!("../templates/vote_category.tmpl"),
    ),
    (
        "select_relevant",
        include_str!("../templates/select_relevant.tmpl"),
    ),
];

/// Named templates. Starts from the built-in set; files named `<id>.tmpl`
/// in an override directory replace or extend it.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(id, src)| {
                let t = Template::parse(id, src).expect("built-in templates parse");
                (id.to_string(), t)
            })
            .collect();
        TemplateSet { templates }
    }

    pub fn empty() -> Self {
        TemplateSet {
            templates: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, source: &str) -> Result<()> {
        self.templates
            .insert(id.to_string(), Template::parse(id, source)?);
        Ok(())
    }

    pub fn with_overrides(mut self, dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tmpl"))
            .collect();
        paths.sort();
        for path in paths {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Invalid(format!("bad template name {}", path.display())))?
                .to_string();
            let src = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            self.insert(&id, &src)?;
        }
        Ok(self)
    }

    pub fn get(&self, id: &str) -> Result<&Template> {
        self.templates
            .get(id)
            .ok_or_else(|| Error::UnknownTemplate(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn render(&self, id: &str, scope: &Scope) -> Result<String> {
        self.get(id)?.render(scope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(src: &str, scope: &Scope) -> String {
        Template::parse("t", src).unwrap().render(scope).unwrap()
    }

    #[test]
    fn placeholders_and_escapes() {
        let s = Scope::new().with("name", "x");
        assert_eq!(render("a {name} {{b}}", &s), "a x {b}");
    }

    #[test]
    fn each_with_index_and_outer_lookup() {
        let s = Scope::new()
            .with("sep", ":")
            .with("items", Scope::texts(&["p", "q"]));
        assert_eq!(
            render("{#each items}{index}{sep}{text};{/each}", &s),
            "1:p;2:q;"
        );
    }

    #[test]
    fn standalone_tags_drop_their_lines() {
        let src = "Head\n{#if items}\nItems:\n{#each items}\n- {text}\n{/each}\n{/if}\nTail\n";
        let full = Scope::new().with("items", Scope::texts(&["a", "b"]));
        assert_eq!(render(src, &full), "Head\nItems:\n- a\n- b\nTail\n");
        let empty = Scope::new().with("items", Vec::<Scope>::new());
        assert_eq!(render(src, &empty), "Head\nTail\n");
    }

    #[test]
    fn unless_and_comments() {
        let src = "{! note !}\n{#unless xs}\nnone\n{/unless}\n";
        let s = Scope::new().with("xs", Vec::<Scope>::new());
        assert_eq!(render(src, &s), "none\n");
    }

    #[test]
    fn nested_loops() {
        let pairs = vec![
            Scope::new()
                .with("knowledge", "K1")
                .with("apps", Scope::texts(&["a", "b"])),
            Scope::new()
                .with("knowledge", "K2")
                .with("apps", Vec::<Scope>::new()),
        ];
        let s = Scope::new().with("pairs", pairs);
        let src = "{#each pairs}[{index}] {knowledge}\n{#each apps}\n  ({index}) {text}\n{/each}\n{/each}";
        assert_eq!(render(src, &s), "[1] K1\n  (1) a\n  (2) b\n[2] K2\n");
    }

    #[test]
    fn parse_errors() {
        assert!(Template::parse("t", "{#each xs}").is_err());
        assert!(Template::parse("t", "{/each}").is_err());
        assert!(Template::parse("t", "{#each xs}{/if}").is_err());
        assert!(Template::parse("t", "{#loop xs}{/loop}").is_err());
        assert!(Template::parse("t", "{bad name}").is_err());
        assert!(Template::parse("t", "stray }").is_err());
    }

    #[test]
    fn missing_value_is_an_error() {
        let t = Template::parse("t", "{nope}").unwrap();
        assert!(t.render(&Scope::new()).is_err());
    }

    #[test]
    fn unknown_template_names_id() {
        let set = TemplateSet::builtin();
        match set.render("does_not_exist", &Scope::new()) {
            Err(Error::UnknownTemplate(id)) => assert_eq!(id, "does_not_exist"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn builtins_parse_and_overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bare.tmpl"), "Q: {question}\n").unwrap();
        let set = TemplateSet::builtin().with_overrides(dir.path()).unwrap();
        assert_eq!(
            set.render("bare", &Scope::new().with("question", "why"))
                .unwrap(),
            "Q: why\n"
        );
        assert!(set.contains("rag_plus"));
    }
}
