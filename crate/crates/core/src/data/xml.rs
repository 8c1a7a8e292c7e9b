//! SemEval-style XML:
//!
//! ```xml
//! <data>
//!   <instance id="1">
//!     <text>passage ...</text>
//!     <questions>
//!       <question id="0" text="..." type="commonsense">
//!         <answer id="0" text="..." correct="True"/>
//!         <answer id="1" text="..." correct="False"/>
//!       </question>
//!     </questions>
//!   </instance>
//! </data>
//! ```
//!
//! Each question becomes one instance with id `<instance id>_<question id>`.
//! `correct` attributes may be absent (unlabelled test data) but not mixed.

use std::io::Write;

use roxmltree::{Document, Node};

use super::{check_unique, tokenize, CorpusMeta, Instance};
use crate::error::{Error, Result};

fn location(doc: &Document<'_>, node: Node<'_, '_>, source: &str) -> String {
    let pos = doc.text_pos_at(node.range().start);
    format!(
        "{source}:{}:{} <{}>",
        pos.row,
        pos.col,
        node.tag_name().name()
    )
}

fn children<'a, 'input>(
    node: Node<'a, 'input>,
    name: &'a str,
) -> impl Iterator<Item = Node<'a, 'input>> + 'a {
    node.children()
        .filter(move |c| c.is_element() && c.tag_name().name() == name)
}

pub fn parse_xml(text: &str, source: &str, meta: &CorpusMeta) -> Result<Vec<Instance>> {
    let doc = Document::parse(text).map_err(|e| Error::Parse {
        location: source.to_string(),
        message: e.to_string(),
    })?;
    let err = |node: Node<'_, '_>, message: String| Error::Parse {
        location: location(&doc, node, source),
        message,
    };
    let mut out = Vec::new();
    for inst in doc.descendants().filter(|n| n.has_tag_name("instance")) {
        let inst_id = inst
            .attribute("id")
            .ok_or_else(|| err(inst, "instance without id".into()))?;
        let passage = children(inst, "text")
            .next()
            .ok_or_else(|| err(inst, "instance without <text>".into()))?;
        let passage_text: String = passage
            .descendants()
            .filter(|n| n.is_text())
            .filter_map(|n| n.text())
            .collect();
        let passage_tokens = tokenize(&passage_text, meta.lowercase);
        for questions in children(inst, "questions") {
            for q in children(questions, "question") {
                let qid = q
                    .attribute("id")
                    .ok_or_else(|| err(q, "question without id".into()))?;
                let qtext = q
                    .attribute("text")
                    .ok_or_else(|| err(q, "question without text".into()))?;
                let mut choices = Vec::new();
                let mut correct = Vec::new();
                for a in children(q, "answer") {
                    let atext = a
                        .attribute("text")
                        .ok_or_else(|| err(a, "answer without text".into()))?;
                    choices.push(tokenize(atext, meta.lowercase));
                    correct.push(match a.attribute("correct") {
                        None => None,
                        Some(v) if v.eq_ignore_ascii_case("true") => Some(true),
                        Some(v) if v.eq_ignore_ascii_case("false") => Some(false),
                        Some(v) => {
                            return Err(err(a, format!("correct must be True or False, got {v:?}")))
                        }
                    });
                }
                let id = format!("{inst_id}_{qid}");
                if choices.len() != 2 {
                    return Err(Error::Data(format!(
                        "{}: instance {id} has {} choices, expected 2",
                        location(&doc, q, source),
                        choices.len()
                    )));
                }
                let label = match (correct[0], correct[1]) {
                    (None, None) => None,
                    (Some(true), Some(false)) => Some(0),
                    (Some(false), Some(true)) => Some(1),
                    _ => {
                        return Err(Error::Data(format!(
                            "{}: instance {id} needs exactly one correct answer",
                            location(&doc, q, source)
                        )))
                    }
                };
                let instance = Instance {
                    id,
                    passage: passage_tokens.clone(),
                    question: tokenize(qtext, meta.lowercase),
                    choices,
                    label,
                    kind: q.attribute("type").map(str::to_string),
                };
                instance
                    .validate()
                    .map_err(|e| Error::Data(format!("{}: {e}", location(&doc, q, source))))?;
                out.push(instance);
            }
        }
    }
    check_unique(&out, source)?;
    Ok(out)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn split_id(id: &str) -> (&str, &str) {
    id.rsplit_once('_').unwrap_or((id, "0"))
}

/// Writes instances back as XML. Consecutive instances whose ids share an
/// `<instance>_` prefix and whose passages match are grouped under one
/// `<instance>` element; ids without an underscore gain a `_0` suffix.
pub fn write_xml(instances: &[Instance], mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("writing xml", e);
    writeln!(out, "<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<data>").map_err(io)?;
    let mut i = 0;
    while i < instances.len() {
        let (prefix, _) = split_id(&instances[i].id);
        let mut j = i + 1;
        while j < instances.len()
            && split_id(&instances[j].id).0 == prefix
            && instances[j].passage == instances[i].passage
        {
            j += 1;
        }
        writeln!(out, "  <instance id=\"{}\">", escape(prefix)).map_err(io)?;
        writeln!(
            out,
            "    <text>{}</text>",
            escape(&instances[i].passage.join(" "))
        )
        .map_err(io)?;
        writeln!(out, "    <questions>").map_err(io)?;
        for inst in &instances[i..j] {
            let kind = inst
                .kind
                .as_deref()
                .map(|k| format!(" type=\"{}\"", escape(k)))
                .unwrap_or_default();
            writeln!(
                out,
                "      <question id=\"{}\" text=\"{}\"{kind}>",
                escape(split_id(&inst.id).1),
                escape(&inst.question.join(" "))
            )
            .map_err(io)?;
            for (k, choice) in inst.choices.iter().enumerate() {
                let correct = match inst.label {
                    Some(l) if l == k => " correct=\"True\"",
                    Some(_) => " correct=\"False\"",
                    None => "",
                };
                writeln!(
                    out,
                    "        <answer id=\"{k}\" text=\"{}\"{correct}/>",
                    escape(&choice.join(" "))
                )
                .map_err(io)?;
            }
            writeln!(out, "      </question>").map_err(io)?;
        }
        writeln!(out, "    </questions>\n  </instance>").map_err(io)?;
        i = j;
    }
    writeln!(out, "</data>").map_err(io)?;
    Ok(())
}
