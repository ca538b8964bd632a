//! Table checkpoints: a short text header followed by row-major
//! little-endian weights.
//!
//! ```text
//! jagrec-table v1
//! name=<name>
//! rows=<rows>
//! dim=<dim>
//! precision=f32|f64|f16
//!
//! <rows * dim little-endian elements>
//! ```

use std::io::{BufRead, Read, Write};

use half::f16;

use super::{EmbeddingTable, Precision};
use crate::error::{ensure, Error, Result};
use crate::jagged::Scalar;

const MAGIC: &str = "jagrec-table v1";

pub trait TableElement: Scalar {
    const TAG: &'static str;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn width() -> usize;
}

impl TableElement for f32 {
    const TAG: &'static str = "f32";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
    fn width() -> usize {
        4
    }
}

impl TableElement for f64 {
    const TAG: &'static str = "f64";
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
    fn width() -> usize {
        8
    }
}

pub fn write_table<T: TableElement>(table: &EmbeddingTable<T>, mut out: impl Write) -> Result<()> {
    ensure!(!table.name.contains('\n'), Validation, "table names cannot contain newlines");
    let half = table.precision == Precision::Half;
    let tag = if half { "f16" } else { T::TAG };
    write!(out, "{MAGIC}\nname={}\nrows={}\ndim={}\nprecision={tag}\n\n", table.name, table.rows(), table.dim())?;
    let mut bytes = Vec::with_capacity(table.weights().len() * if half { 2 } else { T::width() });
    for &w in table.weights() {
        if half {
            let h = f16::from_f64(w.to_f64().unwrap());
            ensure!(
                h.to_f64() == w.to_f64().unwrap(),
                Validation,
                "table `{}` is marked half precision but holds {w:?}",
                table.name
            );
            bytes.extend_from_slice(&h.to_le_bytes());
        } else {
            w.write_le(&mut bytes);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

pub fn read_table<T: TableElement>(input: impl Read) -> Result<EmbeddingTable<T>> {
    let mut reader = std::io::BufReader::new(input);
    let mut line = String::new();
    let mut header = Vec::new();
    loop {
        line.clear();
        ensure!(reader.read_line(&mut line)? > 0, Validation, "checkpoint header is truncated");
        let l = line.trim_end_matches('\n');
        if l.is_empty() {
            break;
        }
        header.push(l.to_string());
    }
    ensure!(header.first().map(String::as_str) == Some(MAGIC), Validation, "not a table checkpoint");
    let field = |key: &str| -> Result<String> {
        header
            .iter()
            .find_map(|h| h.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| Error::Validation(format!("checkpoint header lacks `{key}`")))
    };
    let parse = |key: &str| -> Result<usize> {
        field(key)?.parse().map_err(|_| Error::Validation(format!("bad `{key}` in checkpoint header")))
    };
    let (name, rows, dim, tag) = (field("name")?, parse("rows")?, parse("dim")?, field("precision")?);
    let half = tag == "f16";
    ensure!(half || tag == T::TAG, Validation, "checkpoint holds {tag}, cannot load as {}", T::TAG);
    let width = if half { 2 } else { T::width() };
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    ensure!(bytes.len() == rows * dim * width, Shape, "checkpoint payload is {} bytes, expected {}", bytes.len(), rows * dim * width);
    let weights = bytes
        .chunks_exact(width)
        .map(|c| if half { T::from(f16::from_le_bytes([c[0], c[1]]).to_f64()).unwrap() } else { T::read_le(c) })
        .collect();
    let mut table = EmbeddingTable::from_weights(name, rows, dim, weights)?;
    table.precision = if half { Precision::Half } else { Precision::Full };
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trips_are_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t32 = EmbeddingTable::<f32>::random("items", 17, 5, 3.0, &mut rng);
        let mut buf = Vec::new();
        write_table(&t32, &mut buf).unwrap();
        let back: EmbeddingTable<f32> = read_table(buf.as_slice()).unwrap();
        assert!(back.weights().iter().zip(t32.weights()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.name, "items");

        let t64 = EmbeddingTable::<f64>::random("users", 3, 2, 1.0, &mut rng);
        let mut buf = Vec::new();
        write_table(&t64, &mut buf).unwrap();
        assert_eq!(read_table::<f64>(buf.as_slice()).unwrap(), t64);
        assert!(read_table::<f32>(buf.as_slice()).is_err());
    }

    #[test]
    fn half_tables_store_two_bytes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut t = EmbeddingTable::<f32>::random("neg", 4, 4, 1.0, &mut rng);
        t.quantize_to_half();
        let mut buf = Vec::new();
        write_table(&t, &mut buf).unwrap();
        let header_len = buf.len() - 32;
        assert!(String::from_utf8_lossy(&buf[..header_len]).contains("precision=f16"));
        assert_eq!(read_table::<f32>(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = EmbeddingTable::<f32>::zeros("x", 2, 2);
        let mut buf = Vec::new();
        write_table(&t, &mut buf).unwrap();
        buf.pop();
        assert!(read_table::<f32>(buf.as_slice()).is_err());
        assert!(read_table::<f32>(&b"garbage\n\n"[..]).is_err());
    }
}
