use std::io::BufRead;

use super::{EntityId, RelationId, Triple, Vocab};
use crate::error::{Error, Result};

/// Parses `head<TAB>relation<TAB>tail` lines, extending both vocabularies in
/// first-seen order. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_triples<R: BufRead>(
    reader: R,
    entities: &mut Vocab,
    relations: &mut Vocab,
) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(Error::Parse {
                line: lineno,
                message: "empty field".into(),
            });
        }
        let head = EntityId(entities.intern(fields[0]));
        let relation = RelationId(relations.intern(fields[1]));
        let tail = EntityId(entities.intern(fields[2]));
        out.push(Triple::new(head, relation, tail));
    }
    Ok(out)
}

pub fn parse_triples_str(
    text: &str,
    entities: &mut Vocab,
    relations: &mut Vocab,
) -> Result<Vec<Triple>> {
    parse_triples(text.as_bytes(), entities, relations)
}
