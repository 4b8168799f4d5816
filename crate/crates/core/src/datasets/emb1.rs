//! EMB1 embedding files.
//!
//! All integers little-endian:
//!
//! ```text
//! "EMB1" | version u32 = 1 | n_records u64 | d_img u32 | d_txt u32
//! n_records x [record_id u64 | task_id u16 | label_id u16 | pad u32 = 0 |
//!              d_img x f32 | d_txt x f32]
//! ```
//!
//! Prompt tables reuse the layout with `d_img = 0`; the prompt embedding
//! sits in the text slot and `label_id` names the candidate answer.

use crate::codec::{ByteReader, ByteWriter, CodecError};
use crate::embedding::{EmbeddingVector, PromptSet};

use super::{DatasetError, EmbeddingRecord};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

/// One row of an EMB1 payload before dimension rules are applied.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct RawRow {
    pub record_id: u64,
    pub task_id: u16,
    pub label_id: u16,
    pub image: Vec<f32>,
    pub text: Vec<f32>,
}

fn encode_rows<'a>(
    rows: impl ExactSizeIterator<Item = (u64, u16, u16, &'a [f32], &'a [f32])>,
    d_img: usize,
    d_txt: usize,
) -> Result<Vec<u8>, DatasetError> {
    let n = rows.len();
    let mut w = ByteWriter::with_capacity(HEADER_LEN + n * (16 + 4 * (d_img + d_txt)));
    w.bytes(EMB1_MAGIC);
    w.u32(EMB1_VERSION);
    w.u64(n as u64);
    w.u32(d_img as u32);
    w.u32(d_txt as u32);
    for (record_id, task_id, label_id, image, text) in rows {
        if image.len() != d_img {
            return Err(DatasetError::DimMismatch { record_id, expected: d_img, found: image.len() });
        }
        if text.len() != d_txt {
            return Err(DatasetError::DimMismatch { record_id, expected: d_txt, found: text.len() });
        }
        w.u64(record_id);
        w.u16(task_id);
        w.u16(label_id);
        w.u32(0);
        w.f32s(image);
        w.f32s(text);
    }
    Ok(w.into_inner())
}

pub(crate) fn decode_rows(bytes: &[u8]) -> Result<(usize, usize, Vec<RawRow>), DatasetError> {
    let mut r = ByteReader::new(bytes);
    r.magic(EMB1_MAGIC)?;
    r.version(EMB1_VERSION)?;
    let n = r.u64()?;
    let d_img = r.u32()? as usize;
    let d_txt = r.u32()? as usize;
    let row_len = 16 + 4 * (d_img + d_txt);
    // Check the declared size up front so a truncated file fails before any
    // allocation proportional to the header's claims.
    let needed = (n as u128) * row_len as u128;
    if needed > r.remaining() as u128 {
        return Err(CodecError::Truncated {
            offset: r.position(),
            needed: usize::try_from(needed).unwrap_or(usize::MAX),
            available: r.remaining(),
        }
        .into());
    }
    let mut rows = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let record_id = r.u64()?;
        let task_id = r.u16()?;
        let label_id = r.u16()?;
        let pad = r.u32()?;
        if pad != 0 {
            return Err(CodecError::Invalid(format!("record {record_id}: nonzero padding")).into());
        }
        let image = r.finite_f32s(d_img)?;
        let text = r.finite_f32s(d_txt)?;
        rows.push(RawRow { record_id, task_id, label_id, image, text });
    }
    r.finish()?;
    Ok((d_img, d_txt, rows))
}

/// Serializes records; every record must match the given widths.
pub fn encode_emb1(
    records: &[EmbeddingRecord],
    d_img: usize,
    d_txt: usize,
) -> Result<Vec<u8>, DatasetError> {
    encode_rows(
        records.iter().map(|r| {
            (r.record_id, r.task_id, r.label_id, r.image.as_slice(), r.text.as_slice())
        }),
        d_img,
        d_txt,
    )
}

/// Parses an EMB1 dataset payload, returning `(d_img, d_txt, records)`.
pub fn decode_emb1(bytes: &[u8]) -> Result<(usize, usize, Vec<EmbeddingRecord>), DatasetError> {
    let (d_img, d_txt, rows) = decode_rows(bytes)?;
    if d_img == 0 || d_txt == 0 {
        return Err(DatasetError::Manifest(format!(
            "dataset files need nonzero widths, found {d_img}/{d_txt}"
        )));
    }
    let records = rows
        .into_iter()
        .map(|row| {
            Ok(EmbeddingRecord {
                record_id: row.record_id,
                task_id: row.task_id,
                label_id: row.label_id,
                image: EmbeddingVector::new(row.image)?,
                text: EmbeddingVector::new(row.text)?,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok((d_img, d_txt, records))
}

/// Zero-shot prompt embeddings, one per (task, candidate label).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub task_id: u16,
    pub label_id: u16,
    pub embedding: EmbeddingVector,
}

pub fn encode_prompt_table(entries: &[PromptEntry]) -> Result<Vec<u8>, DatasetError> {
    let dim = entries.first().map_or(0, |e| e.embedding.dim());
    encode_rows(
        entries.iter().enumerate().map(|(i, e)| {
            (i as u64, e.task_id, e.label_id, &[][..], e.embedding.as_slice())
        }),
        0,
        dim,
    )
}

pub fn decode_prompt_table(bytes: &[u8]) -> Result<Vec<PromptEntry>, DatasetError> {
    let (d_img, _, rows) = decode_rows(bytes)?;
    if d_img != 0 {
        return Err(DatasetError::Manifest(format!(
            "prompt table must have an empty image slot, found width {d_img}"
        )));
    }
    rows.into_iter()
        .map(|row| {
            Ok(PromptEntry {
                task_id: row.task_id,
                label_id: row.label_id,
                embedding: EmbeddingVector::new(row.text)?,
            })
        })
        .collect()
}

/// Groups prompt entries by task, preserving file order within a task.
pub fn prompt_sets(entries: &[PromptEntry]) -> Result<Vec<PromptSet>, DatasetError> {
    let mut by_task: std::collections::BTreeMap<u16, Vec<(u16, EmbeddingVector)>> =
        Default::default();
    for e in entries {
        by_task.entry(e.task_id).or_default().push((e.label_id, e.embedding.clone()));
    }
    by_task
        .into_iter()
        .map(|(task, entries)| PromptSet::new(task, entries).map_err(DatasetError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, img: &[f32], txt: &[f32]) -> EmbeddingRecord {
        EmbeddingRecord {
            record_id: id,
            task_id: 1,
            label_id: 2,
            image: EmbeddingVector::new(img.to_vec()).unwrap(),
            text: EmbeddingVector::new(txt.to_vec()).unwrap(),
        }
    }

    #[test]
    fn byte_layout() {
        let bytes = encode_emb1(&[record(7, &[1.0, 2.0], &[3.0])], 2, 1).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 7);
        assert_eq!(u16::from_le_bytes(bytes[32..34].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[34..36].try_into().unwrap()), 2);
        assert_eq!(&bytes[36..40], &[0, 0, 0, 0]);
        assert_eq!(f32::from_le_bytes(bytes[40..44].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[48..52].try_into().unwrap()), 3.0);
        assert_eq!(bytes.len(), 52);
    }

    #[test]
    fn distinct_errors() {
        let good = encode_emb1(&[record(1, &[1.0], &[2.0]), record(2, &[3.0], &[4.0])], 1, 1).unwrap();

        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode_emb1(&bad), Err(DatasetError::Codec(CodecError::BadMagic { .. }))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_emb1(&bad), Err(DatasetError::Codec(CodecError::BadVersion { .. }))));

        assert!(matches!(
            decode_emb1(&good[..good.len() - 3]),
            Err(DatasetError::Codec(CodecError::Truncated { .. }))
        ));

        let mut bad = good.clone();
        let off = bad.len() - 4;
        bad[off..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_emb1(&bad), Err(DatasetError::Codec(CodecError::NonFinite { .. }))));

        assert!(matches!(
            encode_emb1(&[record(1, &[1.0, 2.0], &[2.0])], 1, 1),
            Err(DatasetError::DimMismatch { record_id: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = encode_emb1(&[], 4, 4).unwrap();
        let (d_img, d_txt, records) = decode_emb1(&bytes).unwrap();
        assert_eq!((d_img, d_txt, records.len()), (4, 4, 0));
    }

    #[test]
    fn prompt_table_round_trip() {
        let entries: Vec<PromptEntry> = (0..5)
            .map(|i| PromptEntry {
                task_id: (i % 2) as u16,
                label_id: i as u16,
                embedding: EmbeddingVector::new(vec![i as f32, 1.0, -0.5]).unwrap(),
            })
            .collect();
        let back = decode_prompt_table(&encode_prompt_table(&entries).unwrap()).unwrap();
        assert_eq!(back, entries);
        let sets = prompt_sets(&back).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].entries().iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 2, 4]);
        // A dataset payload is not a prompt table.
        let ds = encode_emb1(&[record(1, &[1.0], &[2.0])], 1, 1).unwrap();
        assert!(decode_prompt_table(&ds).is_err());
    }
}
