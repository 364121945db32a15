//! Binary model container and TSV export.
//!
//! Layout: magic `OEMB`, format version, model kind, dimensions, the
//! vocabulary with frequencies, then the row-major `f32` embedding matrix,
//! followed by optional tagged sections (bilinear matrix, optimizer state).
//! Everything is little-endian and written in a fixed order, so equal models
//! serialize to byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::Vocabulary;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::objectives::BilinearParams;
use crate::optim::{AdamConfig, AdamState};

const MAGIC: &[u8; 4] = b"OEMB";
const VERSION: u32 = 1;
const SECTION_BILINEAR: &[u8; 4] = b"BILW";
const SECTION_ADAM_EMB: &[u8; 4] = b"ADAM";
const SECTION_ADAM_BIL: &[u8; 4] = b"ADMW";

/// Which scoring family a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Order embeddings scored by violation energy (low = positive).
    Order,
    /// Bilinear baseline scored by `x . (W y)` (high = positive).
    Bilinear,
}

impl ModelKind {
    fn as_byte(self) -> u8 {
        match self {
            ModelKind::Order => 0,
            ModelKind::Bilinear => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ModelKind::Order),
            1 => Some(ModelKind::Bilinear),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Order => "order",
            ModelKind::Bilinear => "bilinear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "order" => Some(ModelKind::Order),
            "bilinear" => Some(ModelKind::Bilinear),
            _ => None,
        }
    }
}

/// Optimizer accumulators saved next to the parameters they drive.
#[derive(Debug, Clone)]
pub struct OptimizerCheckpoint {
    pub embeddings: AdamState,
    pub bilinear: Option<AdamState>,
}

/// A trained (or loadable) model: vocabulary, embeddings, and for the
/// baseline the bilinear form; optionally the optimizer state for resuming.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub bilinear: Option<BilinearParams>,
    pub optimizer: Option<OptimizerCheckpoint>,
}

impl Model {
    pub fn dim(&self) -> usize {
        self.table.dim()
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::ModelFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u8(model.kind.as_byte()).map_err(io)?;
    w.write_u32::<LittleEndian>(model.table.dim() as u32)
        .map_err(io)?;
    w.write_u32::<LittleEndian>(model.vocab.len() as u32)
        .map_err(io)?;
    w.write_u32::<LittleEndian>(model.vocab.num_ontology_tokens() as u32)
        .map_err(io)?;
    for (token, count) in model.vocab.iter() {
        let bytes = token.as_bytes();
        w.write_u32::<LittleEndian>(bytes.len() as u32)
            .map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        w.write_u64::<LittleEndian>(count).map_err(io)?;
    }
    for &v in model.table.data() {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }

    if let Some(bilinear) = &model.bilinear {
        write_section(&mut w, SECTION_BILINEAR, |out| {
            for &v in bilinear.data() {
                out.write_f32::<LittleEndian>(v)?;
            }
            Ok(())
        })
        .map_err(io)?;
    }
    if let Some(opt) = &model.optimizer {
        write_section(&mut w, SECTION_ADAM_EMB, |out| {
            write_adam(out, &opt.embeddings)
        })
        .map_err(io)?;
        if let Some(adam) = &opt.bilinear {
            write_section(&mut w, SECTION_ADAM_BIL, |out| write_adam(out, adam)).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn write_section<W: Write>(
    w: &mut W,
    tag: &[u8; 4],
    body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
) -> std::io::Result<()> {
    let mut payload = Vec::new();
    body(&mut payload)?;
    w.write_all(tag)?;
    w.write_u64::<LittleEndian>(payload.len() as u64)?;
    w.write_all(&payload)
}

fn write_adam<W: Write>(w: &mut W, adam: &AdamState) -> std::io::Result<()> {
    let cfg = adam.config();
    w.write_f32::<LittleEndian>(cfg.learning_rate)?;
    w.write_f32::<LittleEndian>(cfg.beta1)?;
    w.write_f32::<LittleEndian>(cfg.beta2)?;
    w.write_f32::<LittleEndian>(cfg.epsilon)?;
    w.write_u32::<LittleEndian>(adam.num_rows() as u32)?;
    w.write_u32::<LittleEndian>(adam.dim() as u32)?;
    let (m, v, b1p, b2p, steps) = adam.raw_parts();
    for &x in m {
        w.write_f32::<LittleEndian>(x)?;
    }
    for &x in v {
        w.write_f32::<LittleEndian>(x)?;
    }
    for &x in b1p {
        w.write_f32::<LittleEndian>(x)?;
    }
    for &x in b2p {
        w.write_f32::<LittleEndian>(x)?;
    }
    for &s in steps {
        w.write_u32::<LittleEndian>(s)?;
    }
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad(path, "not a model file (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(bad(path, format!("unsupported format version {version}")));
    }
    let kind_byte = r.read_u8().map_err(io)?;
    let kind = ModelKind::from_byte(kind_byte)
        .ok_or_else(|| bad(path, format!("unknown model kind byte {kind_byte}")))?;
    let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let vocab_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let ontology_tokens = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    if dim == 0 {
        return Err(bad(path, "zero embedding dimension"));
    }

    let mut rows = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        let token =
            String::from_utf8(buf).map_err(|_| bad(path, "vocabulary token is not UTF-8"))?;
        let count = r.read_u64::<LittleEndian>().map_err(io)?;
        rows.push((token, count));
    }
    let vocab = Vocabulary::from_rows(rows, ontology_tokens)
        .map_err(|e| bad(path, format!("invalid vocabulary: {e}")))?;

    let mut data = vec![0.0f32; vocab_len * dim];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
    let table = EmbeddingTable::from_data(dim, data)
        .map_err(|_| bad(path, "embedding matrix size mismatch"))?;

    let mut bilinear = None;
    let mut adam_emb = None;
    let mut adam_bil = None;
    loop {
        let mut tag = [0u8; 4];
        match r.read_exact(&mut tag) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io(e)),
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).map_err(io)?;
        let mut body = &payload[..];
        match &tag {
            t if t == SECTION_BILINEAR => {
                let mut w = vec![0.0f32; dim * dim];
                body.read_f32_into::<LittleEndian>(&mut w).map_err(io)?;
                bilinear = Some(
                    BilinearParams::from_data(dim, w)
                        .map_err(|_| bad(path, "bilinear section size mismatch"))?,
                );
            }
            t if t == SECTION_ADAM_EMB => adam_emb = Some(read_adam(&mut body).map_err(io)?),
            t if t == SECTION_ADAM_BIL => adam_bil = Some(read_adam(&mut body).map_err(io)?),
            t => {
                return Err(bad(
                    path,
                    format!("unknown section tag {:?}", String::from_utf8_lossy(t)),
                ))
            }
        }
    }

    if kind == ModelKind::Bilinear && bilinear.is_none() {
        return Err(bad(path, "bilinear model without a bilinear section"));
    }
    if kind == ModelKind::Order && bilinear.is_some() {
        return Err(bad(path, "order model carries a bilinear section"));
    }
    let optimizer = match (adam_emb, adam_bil) {
        (Some(embeddings), bil) => Some(OptimizerCheckpoint {
            embeddings,
            bilinear: bil,
        }),
        (None, Some(_)) => {
            return Err(bad(
                path,
                "bilinear optimizer section without embedding one",
            ))
        }
        (None, None) => None,
    };

    Ok(Model {
        kind,
        vocab,
        table,
        bilinear,
        optimizer,
    })
}

fn read_adam(r: &mut impl Read) -> std::io::Result<AdamState> {
    let cfg = AdamConfig {
        learning_rate: r.read_f32::<LittleEndian>()?,
        beta1: r.read_f32::<LittleEndian>()?,
        beta2: r.read_f32::<LittleEndian>()?,
        epsilon: r.read_f32::<LittleEndian>()?,
    };
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let mut m = vec![0.0f32; rows * dim];
    r.read_f32_into::<LittleEndian>(&mut m)?;
    let mut v = vec![0.0f32; rows * dim];
    r.read_f32_into::<LittleEndian>(&mut v)?;
    let mut b1p = vec![0.0f32; rows];
    r.read_f32_into::<LittleEndian>(&mut b1p)?;
    let mut b2p = vec![0.0f32; rows];
    r.read_f32_into::<LittleEndian>(&mut b2p)?;
    let mut steps = vec![0u32; rows];
    r.read_u32_into::<LittleEndian>(&mut steps)?;
    AdamState::from_raw_parts(cfg, dim, m, v, b1p, b2p, steps)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
}

/// Writes `token\tv1 v2 ... vN` per row, floats in shortest round-trip form.
pub fn export_tsv(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, (token, _)) in model.vocab.iter().enumerate() {
        write!(w, "{token}\t").map_err(|e| Error::io(path, e))?;
        for (i, &v) in model.table.row(id as u32).iter().enumerate() {
            if i > 0 {
                write!(w, " ").map_err(|e| Error::io(path, e))?;
            }
            write!(w, "{v}").map_err(|e| Error::io(path, e))?;
        }
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
