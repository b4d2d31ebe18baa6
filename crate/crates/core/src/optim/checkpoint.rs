//! Binary model checkpoints, little-endian:
//!
//! ```text
//! "VETM" | version u32 = 1
//! encoder kind u8 | normalize u8
//!   RNN: layers u32, hidden u32
//!   CNN: hidden u32, n_widths u32, widths u32 × n_widths
//! embedding_dim u32 | image_dim u32 | steps u64
//! vocab count u32, then per token: len u16, UTF-8 bytes
//! tensor count u32, then per tensor: name len u16, name, rows u32, cols u32,
//!   rows·cols × f32
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::Model;
use crate::corpus::Vocabulary;
use crate::encoders::{Architecture, EncoderKind, EncoderSpec};
use crate::error::{Result, VeteError};
use crate::seed::rng_from_seed;

const MAGIC: &[u8; 4] = b"VETM";
const VERSION: u32 = 1;

fn kind_code(kind: EncoderKind) -> u8 {
    match kind {
        EncoderKind::BowSum => 0,
        EncoderKind::BowMean => 1,
        EncoderKind::RnnGru => 2,
        EncoderKind::RnnLstm => 3,
        EncoderKind::Cnn => 4,
    }
}

fn kind_from_code(code: u8) -> Option<EncoderKind> {
    EncoderKind::ALL.get(code as usize).copied()
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| {
        io::Error::new(
            io::ErrorKind::InvalidInput,
            "string longer than 65535 bytes",
        )
    })?;
    w.write_u16::<LittleEndian>(len)?;
    w.write_all(s.as_bytes())
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> io::Result<()> {
    let spec = model.spec();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(kind_code(spec.kind()))?;
    w.write_u8(u8::from(spec.normalize_output))?;
    match &spec.arch {
        Architecture::Bow(_) => {}
        Architecture::Rnn { layers, hidden, .. } => {
            w.write_u32::<LittleEndian>(*layers as u32)?;
            w.write_u32::<LittleEndian>(*hidden as u32)?;
        }
        Architecture::Cnn {
            hidden,
            filter_widths,
        } => {
            w.write_u32::<LittleEndian>(*hidden as u32)?;
            w.write_u32::<LittleEndian>(filter_widths.len() as u32)?;
            for &fw in filter_widths {
                w.write_u32::<LittleEndian>(fw as u32)?;
            }
        }
    }
    w.write_u32::<LittleEndian>(model.embedding_dim() as u32)?;
    w.write_u32::<LittleEndian>(model.image_dim() as u32)?;
    w.write_u64::<LittleEndian>(model.steps)?;

    w.write_u32::<LittleEndian>(model.vocab.len() as u32)?;
    for t in model.vocab.tokens() {
        write_str(&mut w, t)?;
    }
    let tensors = model.tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        write_str(&mut w, &t.name)?;
        w.write_u32::<LittleEndian>(t.rows as u32)?;
        w.write_u32::<LittleEndian>(t.cols as u32)?;
        for &x in &t.data {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
    }
    w.flush()
}

struct Cursor<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, message: impl Into<String>) -> VeteError {
        VeteError::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.fail(format!("truncated {what}")))?;
        self.pos += n as u64;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.bytes(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.bytes(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u16(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.bytes(n, what)?).map_err(|_| VeteError::Format {
            offset: at,
            message: format!("{what} is not UTF-8"),
        })
    }
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<Model> {
    let mut r = Cursor {
        inner: reader,
        pos: 0,
    };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(VeteError::Format {
            offset: 0,
            message: "bad magic, expected VETM".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let code = r.u8("encoder kind")?;
    let kind =
        kind_from_code(code).ok_or_else(|| r.fail(format!("unknown encoder kind {code}")))?;
    let normalize = r.u8("normalize flag")? != 0;
    let mut spec = match kind {
        EncoderKind::BowSum | EncoderKind::BowMean => EncoderSpec::from_kind(kind, 1, 1),
        EncoderKind::RnnGru | EncoderKind::RnnLstm => {
            let layers = r.u32("rnn layers")? as usize;
            let hidden = r.u32("rnn hidden")? as usize;
            EncoderSpec::from_kind(kind, layers, hidden)
        }
        EncoderKind::Cnn => {
            let hidden = r.u32("cnn hidden")? as usize;
            let n = r.u32("cnn width count")? as usize;
            let widths = (0..n)
                .map(|_| r.u32("cnn width").map(|w| w as usize))
                .collect::<Result<Vec<_>>>()?;
            EncoderSpec::cnn(hidden, widths)
        }
    };
    spec.normalize_output = normalize;
    spec.validate().map_err(|e| r.fail(e.to_string()))?;

    let dim = r.u32("embedding dim")? as usize;
    let image_dim = r.u32("image dim")? as usize;
    let steps = r.u64("steps")?;
    let n_vocab = r.u32("vocabulary size")? as usize;
    let tokens = (0..n_vocab)
        .map(|_| r.string("vocabulary token"))
        .collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens).map_err(|e| r.fail(e.to_string()))?;

    let mut model = Model::init(&spec, vocab, dim, image_dim, 0.0, &mut rng_from_seed(0))
        .map_err(|e| r.fail(e.to_string()))?;
    model.steps = steps;
    let n_tensors = r.u32("tensor count")? as usize;
    if n_tensors != model.tensors().len() {
        return Err(r.fail(format!(
            "expected {} tensors, found {n_tensors}",
            model.tensors().len()
        )));
    }
    for t in model.tensors_mut() {
        let at = r.pos;
        let name = r.string("tensor name")?;
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        if name != t.name || rows != t.rows || cols != t.cols {
            return Err(VeteError::Format {
                offset: at,
                message: format!(
                    "tensor `{name}` {rows}×{cols} does not match expected `{}` {}×{}",
                    t.name, t.rows, t.cols
                ),
            });
        }
        for x in t.data.iter_mut() {
            let v = r.f32("tensor data")?;
            if !v.is_finite() {
                return Err(r.fail(format!("non-finite value in `{name}`")));
            }
            *x = f64::from(v);
        }
    }
    let mut probe = [0u8; 1];
    match r.inner.read(&mut probe) {
        Ok(0) => Ok(model),
        _ => Err(r.fail("trailing bytes after last tensor")),
    }
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| VeteError::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file)).map_err(|e| VeteError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VeteError::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, tokenize};

    fn model(kind: EncoderKind) -> Model {
        let vocab = build_vocabulary(&[tokenize("a red car and a blue bike").unwrap()], 1);
        let mut spec = EncoderSpec::from_kind(kind, 2, 3);
        spec.normalize_output = kind == EncoderKind::Cnn;
        let mut m = Model::init(&spec, vocab, 4, 6, 0.3, &mut rng_from_seed(11)).unwrap();
        m.steps = 17;
        m
    }

    #[test]
    fn every_encoder_kind_survives_a_round_trip() {
        for kind in EncoderKind::ALL {
            let m = model(kind);
            let mut bytes = Vec::new();
            write_checkpoint(&m, &mut bytes).unwrap();
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            assert_eq!(back.spec(), m.spec());
            assert_eq!(back.vocab, m.vocab);
            assert_eq!(back.steps, 17);
            for (a, b) in back.flat_params().iter().zip(m.flat_params()) {
                assert_eq!(*a, f64::from(b as f32));
            }
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(bytes, again, "{kind}");
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut bytes = Vec::new();
        write_checkpoint(&model(EncoderKind::BowSum), &mut bytes).unwrap();
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 2]),
            Err(VeteError::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut long = bytes;
        long.push(1);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
