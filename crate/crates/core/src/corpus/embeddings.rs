use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::vocab::{TokenId, Vocab};
use crate::error::{AfaError, Result};

/// Reads `token<TAB>v1<TAB>...<TAB>vd` lines and keeps the rows for tokens in
/// `vocab`. Unknown tokens are skipped; vocabulary entries absent from the
/// file are simply not returned.
pub fn load_embeddings(path: &Path, vocab: &Vocab, dim: usize) -> Result<BTreeMap<TokenId, Vec<f64>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| AfaError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let mut fields = line.split('\t');
        let token = fields.next().unwrap_or_default();
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(parse_err(format!("expected {dim} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite embedding value".into()));
        }
        if let Some(id) = vocab.id(token) {
            rows.insert(id, values);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_known_tokens_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.tsv");
        std::fs::write(&p, "cat\t0.5\t-1\nzebra\t1\t1\n").unwrap();
        let vocab = Vocab::build(["cat dog"], 1).unwrap();
        let rows = load_embeddings(&p, &vocab, 2).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[&vocab.id("cat").unwrap()], vec![0.5, -1.0]);
    }

    #[test]
    fn wrong_width_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.tsv");
        std::fs::write(&p, "cat\t0.5\t-1\ndog\t1\n").unwrap();
        let vocab = Vocab::build(["cat dog"], 1).unwrap();
        assert!(matches!(
            load_embeddings(&p, &vocab, 2),
            Err(AfaError::Parse { line: 2, .. })
        ));
    }
}
