use std::fs;
use std::io::Write;
use std::path::Path;

use super::SpeakerEmbedding;
use crate::error::{Error, Result};

const TABLE_MAGIC: &[u8; 4] = b"YEMB";

fn check_dims(rows: &[SpeakerEmbedding]) -> Result<usize> {
    let dim = rows.first().map_or(0, |r| r.vector.len());
    if let Some(r) = rows.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::Shape(format!(
            "embedding {} has dimension {}, expected {dim}",
            r.utterance_id,
            r.vector.len()
        )));
    }
    Ok(dim)
}

pub fn write_embeddings_json(path: impl AsRef<Path>, rows: &[SpeakerEmbedding]) -> Result<()> {
    let path = path.as_ref();
    check_dims(rows)?;
    let text = serde_json::to_string(rows)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_json(path: impl AsRef<Path>) -> Result<Vec<SpeakerEmbedding>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `utterance_id,v0,v1,...` rows with a header line.
pub fn write_embeddings_csv(path: impl AsRef<Path>, rows: &[SpeakerEmbedding]) -> Result<()> {
    let path = path.as_ref();
    let dim = check_dims(rows)?;
    let mut out = String::from("utterance_id");
    for i in 0..dim {
        out.push_str(&format!(",v{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.utterance_id);
        for v in &r.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Binary table: `YEMB`, u32 count, u32 dim, then per row a u32-length id
/// followed by `dim` little-endian f32 values.
pub fn write_embedding_table(path: impl AsRef<Path>, rows: &[SpeakerEmbedding]) -> Result<()> {
    let path = path.as_ref();
    let dim = check_dims(rows)?;
    let mut buf = Vec::with_capacity(12 + rows.len() * (dim * 4 + 24));
    buf.extend_from_slice(TABLE_MAGIC);
    buf.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        buf.extend_from_slice(&(r.utterance_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(r.utterance_id.as_bytes());
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Shape(format!("embedding table truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn read_embedding_table(path: impl AsRef<Path>) -> Result<Vec<SpeakerEmbedding>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != TABLE_MAGIC {
        return Err(Error::Shape(format!("{} is not an embedding table", path.display())));
    }
    let count = c.u32()?;
    let dim = c.u32()?;
    let mut rows = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = c.u32()?;
        let id = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Shape("embedding id is not UTF-8".into()))?;
        let vector = c
            .take(dim * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        rows.push(SpeakerEmbedding { utterance_id: id, vector });
    }
    if c.pos != buf.len() {
        return Err(Error::Shape(format!("{} trailing bytes in embedding table", buf.len() - c.pos)));
    }
    Ok(rows)
}
