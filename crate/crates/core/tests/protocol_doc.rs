use txfreq_core::protocol::{COMMON_FIELDS, SCHEMA};

#[test]
fn protocol_doc_lists_every_tag_and_field() {
    let doc = include_str!("../../../PROTOCOL.md");
    for field in COMMON_FIELDS {
        assert!(doc.contains(&format!("`{field}`")), "common field {field} undocumented");
    }
    for (tag, fields) in SCHEMA {
        let row = doc
            .lines()
            .find(|l| l.starts_with(&format!("| `{tag}`")))
            .unwrap_or_else(|| panic!("no table row for {tag}"));
        for field in *fields {
            assert!(row.contains(&format!("`{field}`")), "{tag}.{field} undocumented");
        }
    }
}
