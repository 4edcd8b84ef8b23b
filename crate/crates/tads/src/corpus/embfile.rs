//! Binary embedding block format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "TADSEMB1"
//! offset 8   u32       n, row count
//! offset 12  u32       d, embedding dimension
//! offset 16  n*d f32   image embeddings, row-major
//! ...        n*d f32   text embeddings, row-major
//! ```
//!
//! Values are stored at f32 and widened to f64 on load; writers narrow with
//! rounding. Prototype files reuse the same layout with the image half
//! mirroring the text half, so any block file round-trips through one
//! reader.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::EmbeddingBlock;
use crate::error::{Result, TadsError};
use crate::numeric::DenseMatrix;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"TADSEMB1";

pub fn write_embedding_block(path: &Path, block: &EmbeddingBlock) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| TadsError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| TadsError::io(path, e);
    w.write_all(EMBEDDING_MAGIC).map_err(io_err)?;
    let n = u32::try_from(block.len())
        .map_err(|_| TadsError::InvalidConfig(format!("{} rows exceed u32", block.len())))?;
    let d = u32::try_from(block.dim())
        .map_err(|_| TadsError::InvalidConfig(format!("{} dims exceed u32", block.dim())))?;
    w.write_all(&n.to_le_bytes()).map_err(io_err)?;
    w.write_all(&d.to_le_bytes()).map_err(io_err)?;
    for half in [block.image(), block.text()] {
        for &v in half.as_slice() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_embedding_block(path: &Path) -> Result<EmbeddingBlock> {
    let (image, text) = read_halves(path)?;
    EmbeddingBlock::new(image, text)
}

/// Reads only the text half of a block file, validating only its norms.
/// Used for prototype and class-embedding files.
pub fn read_text_block(path: &Path) -> Result<DenseMatrix> {
    let (_, text) = read_halves(path)?;
    for (i, row) in text.iter_rows().enumerate() {
        let n = crate::numeric::norm(row);
        if (n - 1.0).abs() > super::NORM_TOLERANCE {
            return Err(TadsError::Norm(format!(
                "text embedding row {i} in {} has norm {n:.6}",
                path.display()
            )));
        }
    }
    Ok(text)
}

fn read_halves(path: &Path) -> Result<(DenseMatrix, DenseMatrix)> {
    let file = std::fs::File::open(path).map_err(|e| TadsError::io(path, e))?;
    let size = file.metadata().map_err(|e| TadsError::io(path, e))?.len();
    let mut r = BufReader::new(file);
    let io_err = |e| TadsError::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(TadsError::Parse {
            line: 0,
            message: format!("{}: bad magic {:?}, not an embedding block", path.display(), magic),
        });
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io_err)?;
    let n = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(io_err)?;
    let d = u32::from_le_bytes(word) as usize;

    let expected = 16 + 2 * n as u64 * d as u64 * 4;
    if size != expected {
        return Err(TadsError::Parse {
            line: 0,
            message: format!(
                "{}: header claims n={n} d={d} ({expected} bytes), file has {size}",
                path.display()
            ),
        });
    }

    let mut read_half = || -> Result<DenseMatrix> {
        let mut bytes = vec![0u8; n * d * 4];
        r.read_exact(&mut bytes).map_err(io_err)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        DenseMatrix::new(n, d, data)
    };
    let image = read_half()?;
    let text = read_half()?;
    Ok((image, text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::unit_rows;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("block.tdsemb");
        let block = EmbeddingBlock::new(unit_rows(5, 16, 21), unit_rows(5, 16, 22)).unwrap();
        write_embedding_block(&path, &block).unwrap();
        let loaded = read_embedding_block(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        assert_eq!(loaded.dim(), 16);
        for i in 0..5 {
            for (a, b) in loaded.text_row(i).unwrap().iter().zip(block.text_row(i).unwrap()) {
                assert_eq!(*a, f64::from(*b as f32));
            }
        }
    }

    #[test]
    fn writes_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let block = EmbeddingBlock::new(unit_rows(3, 8, 23), unit_rows(3, 8, 24)).unwrap();
        let p1 = dir.path().join("a.tdsemb");
        let p2 = dir.path().join("b.tdsemb");
        write_embedding_block(&p1, &block).unwrap();
        write_embedding_block(&p2, &block).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.tdsemb");
        std::fs::write(&path, b"NOTEMBED\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_embedding_block(&path), Err(TadsError::Parse { .. })));
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.tdsemb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(EMBEDDING_MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_embedding_block(&path), Err(TadsError::Parse { .. })));
    }

    #[test]
    fn header_endianness_is_little() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.tdsemb");
        let block = EmbeddingBlock::new(unit_rows(2, 3, 25), unit_rows(2, 3, 26)).unwrap();
        write_embedding_block(&path, &block).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], EMBEDDING_MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    }
}
