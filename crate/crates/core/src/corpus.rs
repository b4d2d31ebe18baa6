//! Caption corpora, image feature tables, vocabularies and splits.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::error::{Result, VeteError};
use crate::seed::rng_from_seed;

pub const BOS: &str = "<S>";
pub const EOS: &str = "</S>";
pub const UNK: &str = "<UNK>";

pub const UNK_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

impl CaptionRecord {
    pub fn new(image_id: impl Into<String>, caption: impl Into<String>) -> Result<Self> {
        let image_id = image_id.into();
        let caption = caption.into();
        if image_id.is_empty() {
            return Err(VeteError::Data("empty image id".into()));
        }
        if caption.trim().is_empty() {
            return Err(VeteError::EmptyCaption);
        }
        Ok(Self { image_id, caption })
    }
}

/// A tokenized caption, always wrapped in `<S>` ... `</S>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokens between the sentence markers.
    pub fn content(&self) -> &[String] {
        &self.tokens[1..self.tokens.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn tokenize(raw: &str) -> Result<TokenSequence> {
    let lowered = raw.to_lowercase();
    let mut tokens = vec![BOS.to_string()];
    for chunk in lowered.split_whitespace() {
        let start = chunk.len() - chunk.trim_start_matches(PUNCTUATION).len();
        let end = chunk.trim_end_matches(PUNCTUATION).len().max(start);
        tokens.extend(chunk[..start].chars().map(String::from));
        if end > start {
            tokens.push(chunk[start..end].to_string());
        }
        tokens.extend(chunk[end..].chars().map(String::from));
    }
    if tokens.len() == 1 {
        return Err(VeteError::EmptyCaption);
    }
    tokens.push(EOS.to_string());
    Ok(TokenSequence { tokens })
}

/// Keeps the first caption seen for every image, preserving input order.
pub fn filter_one_caption_per_image(records: &[CaptionRecord]) -> Vec<CaptionRecord> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.image_id.as_str()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list whose first three
    /// entries are `<UNK>`, `<S>`, `</S>`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3
            || tokens[UNK_ID] != UNK
            || tokens[BOS_ID] != BOS
            || tokens[EOS_ID] != EOS
        {
            return Err(VeteError::Data(
                "vocabulary must start with <UNK>, <S>, </S>".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(VeteError::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Specials take ids 0..3; remaining tokens with at least `min_count`
/// occurrences follow by descending count, ties broken lexicographically.
pub fn build_vocabulary(sequences: &[TokenSequence], min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in sequences {
        for t in seq.tokens() {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && ![UNK, BOS, EOS].contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let tokens = [UNK, BOS, EOS]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .map(String::from)
        .collect();
    Vocabulary::from_tokens(tokens).expect("specials are unique and first")
}

pub fn encode_caption(vocab: &Vocabulary, seq: &TokenSequence) -> Vec<usize> {
    seq.tokens()
        .iter()
        .map(|t| vocab.id(t).unwrap_or(UNK_ID))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train,
            validation,
            test,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.train, self.validation, self.test];
        if fr.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(VeteError::Config(format!(
                "split fractions must be positive, got {fr:?}"
            )));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(VeteError::Config(format!(
                "split fractions must sum to 1, got {fr:?}"
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle then cut. Validation and test sizes are `floor(n·f)`; the
/// remainder goes to train.
pub fn split_dataset<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    spec.validate()?;
    let n = items.len();
    if n < 3 {
        return Err(VeteError::TooFewRecords(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(spec.seed));

    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let n_val = floor(spec.validation);
    let n_test = floor(spec.test);
    let n_train = n - n_val - n_test;

    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VeteError::io(path, e))?;
    parse_captions(BufReader::new(file), &path.display().to_string())
}

pub fn parse_captions<R: BufRead>(reader: R, source: &str) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| VeteError::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| VeteError::Parse {
            path: source.to_string(),
            line: i + 1,
            message: message.to_string(),
        };
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `image_id<TAB>caption`"))?;
        let record = CaptionRecord::new(id, caption).map_err(|e| parse_err(&e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_captions(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e| VeteError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        writeln!(w, "{}\t{}", r.image_id, r.caption).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

const FEATURE_MAGIC: &[u8; 4] = b"VETF";
const FEATURE_VERSION: u32 = 1;

/// Precomputed image feature vectors keyed by image id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(VeteError::Config(
                "feature dimension must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            entries: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, image_id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let image_id = image_id.into();
        if vector.len() != self.dim {
            return Err(VeteError::Shape {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(VeteError::Data(format!(
                "non-finite feature component for `{image_id}`"
            )));
        }
        if self.entries.contains_key(&image_id) {
            return Err(VeteError::Data(format!("duplicate image id `{image_id}`")));
        }
        self.entries.insert(image_id, vector);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.entries.get(image_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut r = CountingReader {
            inner: reader,
            pos: 0,
        };

        let mut magic = [0u8; 4];
        let at = r.pos;
        r.read_exact(&mut magic)
            .map_err(|e| truncated(at, "magic", e))?;
        if &magic != FEATURE_MAGIC {
            return Err(format_err(0, "bad magic, expected VETF"));
        }
        let at = r.pos;
        let version = r
            .read_u32::<LittleEndian>()
            .map_err(|e| truncated(at, "version", e))?;
        if version != FEATURE_VERSION {
            return Err(format_err(at, &format!("unsupported version {version}")));
        }
        let at = r.pos;
        let dim = r
            .read_u32::<LittleEndian>()
            .map_err(|e| truncated(at, "dim", e))? as usize;
        if dim == 0 {
            return Err(format_err(at, "dimension is zero"));
        }
        let at = r.pos;
        let count = r
            .read_u64::<LittleEndian>()
            .map_err(|e| truncated(at, "count", e))?;

        let mut table = FeatureTable::new(dim)?;
        let mut id_buf = Vec::new();
        for _ in 0..count {
            let record_at = r.pos;
            let id_len = r
                .read_u16::<LittleEndian>()
                .map_err(|e| truncated(record_at, "record id length", e))?
                as usize;
            id_buf.resize(id_len, 0);
            let at = r.pos;
            r.read_exact(&mut id_buf)
                .map_err(|e| truncated(at, "record id", e))?;
            let id = std::str::from_utf8(&id_buf)
                .map_err(|_| format_err(at, "record id is not UTF-8"))?
                .to_string();
            if id.is_empty() {
                return Err(format_err(record_at, "empty record id"));
            }
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                let at = r.pos;
                let x = r
                    .read_f32::<LittleEndian>()
                    .map_err(|e| truncated(at, "record vector", e))?;
                if !x.is_finite() {
                    return Err(format_err(at, &format!("non-finite component in `{id}`")));
                }
                vector.push(x);
            }
            if table.entries.contains_key(&id) {
                return Err(format_err(record_at, &format!("duplicate image id `{id}`")));
            }
            table.entries.insert(id, vector);
        }
        let mut probe = [0u8; 1];
        let at = r.pos;
        match r.read(&mut probe) {
            Ok(0) => Ok(table),
            Ok(_) => Err(format_err(at, "trailing bytes after last record")),
            Err(e) => Err(truncated(at, "end of file", e)),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_u32::<LittleEndian>(FEATURE_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        for (id, v) in &self.entries {
            let bytes = id.as_bytes();
            let len = u16::try_from(bytes.len())
                .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "image id too long"))?;
            w.write_u16::<LittleEndian>(len)?;
            w.write_all(bytes)?;
            for &x in v {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
        w.flush()
    }
}

pub fn load_image_features(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VeteError::io(path, e))?;
    FeatureTable::read_from(BufReader::new(file))
}

pub fn write_image_features(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| VeteError::io(path, e))?;
    table
        .write_to(BufWriter::new(file))
        .map_err(|e| VeteError::io(path, e))
}

struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

fn format_err(offset: u64, message: &str) -> VeteError {
    VeteError::Format {
        offset,
        message: message.to_string(),
    }
}

fn truncated(offset: u64, what: &str, e: io::Error) -> VeteError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        format_err(offset, &format!("truncated {what}"))
    } else {
        format_err(offset, &format!("reading {what}: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(seq: &TokenSequence) -> Vec<&str> {
        seq.tokens().iter().map(String::as_str).collect()
    }

    fn rec(id: &str, c: &str) -> CaptionRecord {
        CaptionRecord::new(id, c).unwrap()
    }

    #[test]
    fn tokenize_detaches_punctuation_and_lowercases() {
        let seq = tokenize("A Dog runs.").unwrap();
        assert_eq!(toks(&seq), ["<S>", "a", "dog", "runs", ".", "</S>"]);
        assert_eq!(toks(&tokenize("hi").unwrap()), ["<S>", "hi", "</S>"]);
        let seq = tokenize("(\"Wow!\") it's").unwrap();
        assert_eq!(
            toks(&seq),
            ["<S>", "(", "\"", "wow", "!", "\"", ")", "it's", "</S>"]
        );
        assert_eq!(
            toks(&tokenize("...").unwrap()),
            ["<S>", ".", ".", ".", "</S>"]
        );
    }

    #[test]
    fn tokenize_rejects_blank_input() {
        assert!(matches!(tokenize("   "), Err(VeteError::EmptyCaption)));
        assert!(matches!(tokenize(""), Err(VeteError::EmptyCaption)));
    }

    #[test]
    fn filter_keeps_first_caption() {
        let input = vec![rec("i1", "a"), rec("i1", "b"), rec("i2", "c")];
        assert_eq!(
            filter_one_caption_per_image(&input),
            vec![rec("i1", "a"), rec("i2", "c")]
        );
        assert_eq!(
            filter_one_caption_per_image(&[rec("i1", "a")]),
            vec![rec("i1", "a")]
        );
        assert!(filter_one_caption_per_image(&[]).is_empty());
    }

    #[test]
    fn vocabulary_threshold_and_ordering() {
        let seqs: Vec<_> = ["dog dog cat", "dog bird", "bird"]
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
        let v = build_vocabulary(&seqs, 2);
        assert_eq!(v.tokens(), ["<UNK>", "<S>", "</S>", "dog", "bird"]);
        let v = build_vocabulary(&seqs, 1);
        assert_eq!(v.tokens(), ["<UNK>", "<S>", "</S>", "dog", "bird", "cat"]);
        let v = build_vocabulary(&[], 1);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocabulary_counts_threshold_example() {
        let seqs: Vec<_> = ["dog cat", "dog", "dog"]
            .iter()
            .map(|s| tokenize(s).unwrap())
            .collect();
        let v = build_vocabulary(&seqs, 2);
        assert!(v.id("dog").is_some());
        assert!(v.id("cat").is_none());
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn encode_maps_oov_to_unk() {
        let v = build_vocabulary(&[tokenize("dog").unwrap()], 1);
        let dog = v.id("dog").unwrap();
        assert_eq!(
            encode_caption(&v, &tokenize("dog").unwrap()),
            vec![BOS_ID, dog, EOS_ID]
        );
        assert_eq!(
            encode_caption(&v, &tokenize("zebra").unwrap()),
            vec![BOS_ID, UNK_ID, EOS_ID]
        );
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<usize> = (0..10).collect();
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 7).unwrap();
        let (a, b, c) = split_dataset(&items, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert_eq!(split_dataset(&items, &spec).unwrap(), (a.clone(), b, c));

        let other = SplitSpec::new(0.8, 0.1, 0.1, 8).unwrap();
        let (a2, _, _) = split_dataset(&items, &other).unwrap();
        assert_eq!(a2.len(), 8);
    }

    #[test]
    fn split_rejects_tiny_inputs_and_bad_fractions() {
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 7).unwrap();
        assert!(matches!(
            split_dataset(&[1, 2], &spec),
            Err(VeteError::TooFewRecords(2))
        ));
        assert!(SplitSpec::new(0.8, 0.3, 0.1, 0).is_err());
        assert!(SplitSpec::new(1.0, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn caption_file_parsing_reports_line() {
        let text = "i1\ta dog\n\ni2 no tab\n";
        let err = parse_captions(text.as_bytes(), "caps.tsv").unwrap_err();
        assert!(matches!(err, VeteError::Parse { line: 3, .. }), "{err}");
        let ok = parse_captions("i1\ta dog\ni2\tcat\n".as_bytes(), "x").unwrap();
        assert_eq!(ok.len(), 2);
    }

    fn feature_bytes(dim: u32, records: &[(&str, Vec<f32>)]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"VETF");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&dim.to_le_bytes());
        buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
        for (id, v) in records {
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    #[test]
    fn feature_file_reads_records() {
        let bytes = feature_bytes(
            4,
            &[
                ("a", vec![1.0, 2.0, 3.0, 4.0]),
                ("b", vec![0.0, -1.0, 0.5, 2.0]),
            ],
        );
        let t = FeatureTable::read_from(bytes.as_slice()).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 4);
        assert_eq!(t.get("b").unwrap(), &[0.0, -1.0, 0.5, 2.0]);
        let mut out = Vec::new();
        t.write_to(&mut out).unwrap();
        assert_eq!(out, bytes);
    }

    #[test]
    fn feature_file_rejects_nan_with_offset() {
        let bytes = feature_bytes(2, &[("a", vec![1.0, f32::NAN])]);
        match FeatureTable::read_from(bytes.as_slice()) {
            // header 20 bytes, id_len 2, id 1, first float 4
            Err(VeteError::Format { offset, .. }) => assert_eq!(offset, 27),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn feature_file_rejects_truncation_and_bad_magic() {
        let mut bytes = feature_bytes(2048, &[("a", vec![0.5; 2048])]);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            FeatureTable::read_from(bytes.as_slice()),
            Err(VeteError::Format { .. })
        ));
        let mut bytes = feature_bytes(2, &[]);
        bytes[0] = b'X';
        assert!(matches!(
            FeatureTable::read_from(bytes.as_slice()),
            Err(VeteError::Format { offset: 0, .. })
        ));
        let mut bytes = feature_bytes(2, &[("a", vec![1.0, 2.0])]);
        bytes.push(0);
        assert!(FeatureTable::read_from(bytes.as_slice()).is_err());
    }

    #[test]
    fn feature_table_rejects_wrong_dimension() {
        let mut t = FeatureTable::new(3).unwrap();
        assert!(matches!(
            t.insert("x", vec![1.0, 2.0]),
            Err(VeteError::Shape {
                expected: 3,
                actual: 2
            })
        ));
    }
}
