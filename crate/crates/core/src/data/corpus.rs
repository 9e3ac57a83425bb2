use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::Example;
use crate::domain::{DomainSchema, Token};
use crate::error::{Error, Result};

pub const CORPUS_HEADER: &str = "# true_domain\tassigned_domain\tsource\ttarget";

/// `train` minus every example whose (source, target) pair occurs in `test`,
/// survivors in their original order.
pub fn dedup_splits(train: &[Example], test: &[Example]) -> Vec<Example> {
    let seen: HashSet<(&[Token], &[Token])> = test.iter().map(|e| (e.source.as_slice(), e.target.as_slice())).collect();
    train
        .iter()
        .filter(|e| !seen.contains(&(e.source.as_slice(), e.target.as_slice())))
        .cloned()
        .collect()
}

fn join(tokens: &[Token]) -> String {
    tokens.iter().map(Token::to_string).collect::<Vec<_>>().join(" ")
}

/// Renders a corpus as tab-separated lines under [`CORPUS_HEADER`].
pub fn format_corpus(schema: &DomainSchema, examples: &[Example]) -> String {
    let mut out = String::from(CORPUS_HEADER);
    out.push('\n');
    for e in examples {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            schema.name(e.true_domain),
            schema.name(e.assigned_domain),
            join(&e.source),
            join(&e.target)
        ));
    }
    out
}

pub fn parse_corpus(schema: &DomainSchema, text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::data(format!("corpus line {}: {what}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(bad(&format!("expected 4 fields, found {}", fields.len())));
        }
        let tokens = |s: &str| -> Result<Vec<Token>> {
            s.split_whitespace()
                .map(|t| {
                    let v: Token = t.parse().map_err(|_| bad(&format!("bad token `{t}`")))?;
                    if v as usize >= schema.vocab_size() {
                        return Err(bad(&format!("token {v} outside vocabulary")));
                    }
                    Ok(v)
                })
                .collect()
        };
        out.push(Example {
            true_domain: schema.by_name(fields[0]).map_err(|_| bad(&format!("unknown domain `{}`", fields[0])))?,
            assigned_domain: schema.by_name(fields[1]).map_err(|_| bad(&format!("unknown domain `{}`", fields[1])))?,
            source: tokens(fields[2])?,
            target: tokens(fields[3])?,
        });
    }
    Ok(out)
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_corpus(path: &Path, schema: &DomainSchema, examples: &[Example]) -> Result<()> {
    write_atomic(path, format_corpus(schema, examples).as_bytes())
}

pub fn read_corpus(path: &Path, schema: &DomainSchema) -> Result<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(schema, &text)
}
