// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-lines corpus files: one file per split, each opening with a header
//! line that carries the vocabulary, its lexicon partition and the
//! generating config.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{Corpus, CorpusConfig, DialogueExample, Split};
use super::vocab::Vocab;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "ctxdetox-corpus/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    pub split: Split,
    pub vocab_size: usize,
    pub vocab: Vocab,
    pub config: CorpusConfig,
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Write one split file: the header line followed by one record per example.
pub fn write_split(
    path: &Path,
    split: Split,
    vocab: &Vocab,
    config: &CorpusConfig,
    examples: &[DialogueExample],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CorpusHeader {
        format: CORPUS_FORMAT.to_string(),
        split,
        vocab_size: vocab.len(),
        vocab: vocab.clone(),
        config: config.clone(),
    };
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    emit(serde_json::to_string(&header)?)?;
    for e in examples {
        emit(serde_json::to_string(e)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read one split file, validating the schema of every record.
pub fn read_split(path: &Path) -> Result<(CorpusHeader, Vec<DialogueExample>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: CorpusHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format != CORPUS_FORMAT {
        return Err(parse_err(1, format!("unknown format {:?}", header.format)));
    }
    if header.vocab_size != header.vocab.len() {
        return Err(Error::HeaderMismatch(format!(
            "{}: vocab_size {} but {} tokens listed",
            path.display(),
            header.vocab_size,
            header.vocab.len()
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: DialogueExample =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some(&t) =
            ex.c.iter()
                .chain(&ex.r)
                .find(|&&t| t as usize >= header.vocab_size)
        {
            return Err(parse_err(
                lineno,
                format!("token {t} outside vocabulary of {}", header.vocab_size),
            ));
        }
        out.push(ex);
    }
    Ok((header, out))
}

/// Write all four splits into `dir` (created if missing).
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in Split::ALL {
        write_split(
            &split_path(dir, s),
            s,
            &corpus.vocab,
            &corpus.config,
            corpus.split(s),
        )?;
    }
    Ok(())
}

/// Read all four splits back; every header must agree on vocabulary and config.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mut first: Option<CorpusHeader> = None;
    let mut splits: Vec<Vec<DialogueExample>> = Vec::new();
    for s in Split::ALL {
        let path = split_path(dir, s);
        let (header, examples) = read_split(&path)?;
        if header.split != s {
            return Err(Error::HeaderMismatch(format!(
                "{} declares split {:?}",
                path.display(),
                header.split
            )));
        }
        if let Some(h) = &first {
            if h.vocab != header.vocab || h.config != header.config {
                return Err(Error::HeaderMismatch(format!(
                    "{} disagrees with {} on vocabulary or config",
                    path.display(),
                    split_path(dir, Split::TrainPrefix).display()
                )));
            }
        } else {
            first = Some(header);
        }
        splits.push(examples);
    }
    let header = first.expect("four splits were read");
    let mut it = splits.into_iter();
    Ok(Corpus {
        vocab: header.vocab,
        config: header.config,
        train_prefix: it.next().unwrap_or_default(),
        train_classifier: it.next().unwrap_or_default(),
        dev: it.next().unwrap_or_default(),
        test: it.next().unwrap_or_default(),
    })
}
