use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, VeteError};
use crate::optim::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    /// `count dim` header, then `token v1 … vN` per vocabulary entry.
    WordVectorsText,
    /// `sentence<TAB>v1,…,vN` per input sentence.
    SentenceVectorsTsv,
}

impl FromStr for ExportFormat {
    type Err = VeteError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "word_vectors" | "word_vectors_text" | "words" => Ok(ExportFormat::WordVectorsText),
            "sentence_vectors" | "sentence_vectors_tsv" | "sentences" => {
                Ok(ExportFormat::SentenceVectorsTsv)
            }
            _ => Err(VeteError::Config(format!("unknown export format `{s}`"))),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::WordVectorsText => "word_vectors_text",
            ExportFormat::SentenceVectorsTsv => "sentence_vectors_tsv",
        })
    }
}

fn join(v: impl IntoIterator<Item = f64>, sep: &str) -> String {
    v.into_iter()
        .map(|x| (x as f32).to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

/// Writes the model's word embeddings or the embeddings of `sentences`.
/// Sentences that cannot be encoded are skipped with a warning.
pub fn export_embeddings(
    model: &Model,
    format: ExportFormat,
    path: impl AsRef<Path>,
    sentences: &[String],
) -> Result<()> {
    let path = path.as_ref();
    if model.steps == 0 {
        log::warn!("exporting an untrained model: vectors reflect initialization");
    }
    let io_err = |e| VeteError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    match format {
        ExportFormat::WordVectorsText => {
            let emb = &model.encoder.embedding;
            writeln!(w, "{} {}", emb.rows, emb.cols).map_err(io_err)?;
            for (id, token) in model.vocab.tokens().iter().enumerate() {
                writeln!(w, "{token} {}", join(emb.row(id).iter().copied(), " "))
                    .map_err(io_err)?;
            }
        }
        ExportFormat::SentenceVectorsTsv => {
            for s in sentences {
                match model.embed_text(s) {
                    Ok(v) => writeln!(w, "{s}\t{}", join(v, ",")).map_err(io_err)?,
                    Err(e) => log::warn!("skipping `{s}`: {e}"),
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Word vectors in the `count dim` text format, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub tokens: Vec<String>,
    pub vectors: Vec<Vec<f32>>,
}

impl WordVectors {
    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.tokens
            .iter()
            .position(|t| t == token)
            .map(|i| self.vectors[i].as_slice())
    }
}

pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<WordVectors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VeteError::io(path, e))?;
    let parse_err = |line: usize, message: String| VeteError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing `count dim` header".into()))?
        .map_err(|e| VeteError::io(path, e))?;
    let nums: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| parse_err(1, format!("bad header `{header}`")))?;
    let [count, dim] = nums[..] else {
        return Err(parse_err(1, format!("bad header `{header}`")));
    };

    let mut out = WordVectors {
        dim,
        tokens: Vec::with_capacity(count),
        vectors: Vec::with_capacity(count),
    };
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line.map_err(|e| VeteError::io(path, e))?;
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default().to_string();
        let v: Vec<f32> = fields
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(line_no, "bad vector component".into()))?;
        if v.len() != dim {
            return Err(parse_err(
                line_no,
                format!("expected {dim} components, found {}", v.len()),
            ));
        }
        out.tokens.push(token);
        out.vectors.push(v);
    }
    if out.tokens.len() != count {
        return Err(parse_err(
            out.tokens.len() + 1,
            format!(
                "header promises {count} vectors, found {}",
                out.tokens.len()
            ),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::encoders::{EncoderKind, EncoderSpec};
    use crate::seed::rng_from_seed;

    #[test]
    fn specials_only_vocab_gives_four_lines() {
        let spec = EncoderSpec::from_kind(EncoderKind::BowMean, 1, 2);
        let m = Model::init(
            &spec,
            build_vocabulary(&[], 1),
            2,
            3,
            0.1,
            &mut rng_from_seed(0),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.txt");
        export_embeddings(&m, ExportFormat::WordVectorsText, &path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "3 2");
        let back = load_word_vectors(&path).unwrap();
        assert_eq!(back.tokens, m.vocab.tokens());
    }

    #[test]
    fn format_names() {
        assert_eq!(
            "word-vectors".parse::<ExportFormat>().unwrap(),
            ExportFormat::WordVectorsText
        );
        assert_eq!(
            "sentence_vectors_tsv".parse::<ExportFormat>().unwrap(),
            ExportFormat::SentenceVectorsTsv
        );
        assert!("json".parse::<ExportFormat>().is_err());
    }
}
