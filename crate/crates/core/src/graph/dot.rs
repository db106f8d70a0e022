use std::fmt::Write;

use super::KnowledgeGraph;

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => {}
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn style(category: Option<&str>) -> (&'static str, &'static str) {
    match category.map(str::to_lowercase).as_deref() {
        Some("material") => ("box", "#cfe2f3"),
        Some("process") => ("ellipse", "#d9ead3"),
        Some("property") => ("note", "#fff2cc"),
        Some("result") => ("diamond", "#f4cccc"),
        Some("condition" | "parameter") => ("hexagon", "#ead1dc"),
        Some("microstructure" | "phase") => ("octagon", "#d0e0e3"),
        _ => ("ellipse", "#eeeeee"),
    }
}

pub fn export_dot(kg: &KnowledgeGraph) -> String {
    let mut out = String::from("digraph kg {\n  rankdir=LR;\n  node [fontname=\"Helvetica\", style=filled];\n");
    for node in kg.nodes() {
        let (shape, color) = style(node.category.as_deref());
        let _ = writeln!(
            out,
            "  {} [label={}, shape={shape}, fillcolor=\"{color}\"];",
            quote(&node.id),
            quote(&node.label)
        );
    }
    for edge in kg.edges() {
        let _ = writeln!(
            out,
            "  {} -> {} [label={}];",
            quote(&edge.head_id),
            quote(&edge.tail_id),
            quote(&edge.relation)
        );
    }
    out.push_str("}\n");
    out
}
