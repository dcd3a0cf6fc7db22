//! On-disk formats.
//!
//! Metadata: UTF-8 CSV with the header `utteranceId,speakerId,languageId,split`.
//!
//! Features: a sequence of records, each
//! `u32 id_len | id bytes (UTF-8) | u32 rows | u32 cols | rows·cols f64`,
//! all little-endian, values row-major. Records are written in id order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{check_unique_ids, FeatureStore, Split, UtteranceMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HEADER: [&str; 4] = ["utteranceId", "speakerId", "languageId", "split"];

pub fn write_metadata<W: Write>(w: W, metadata: &[UtteranceMeta]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let wrap = |e: csv::Error| Error::contract(format!("writing metadata: {e}"));
    out.write_record(HEADER).map_err(wrap)?;
    for m in metadata {
        out.write_record([
            m.utterance_id.as_str(),
            m.speaker_id.as_str(),
            m.language_id.as_str(),
            m.split.as_str(),
        ])
        .map_err(wrap)?;
    }
    out.flush().map_err(|e| Error::contract(format!("writing metadata: {e}")))?;
    Ok(())
}

/// Strict metadata parse. An empty input yields an empty list; otherwise
/// the header is required, every row has four fields and ids are unique.
pub fn read_metadata<R: Read>(r: R, source: &str) -> Result<Vec<UtteranceMeta>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
    let mut out = Vec::new();
    let mut header_seen = false;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse(source, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if !header_seen {
            if rec.iter().ne(HEADER.iter().copied()) {
                return Err(Error::parse(
                    source,
                    line,
                    format!("expected header `{}`", HEADER.join(",")),
                ));
            }
            header_seen = true;
            continue;
        }
        if rec.len() != 4 {
            return Err(Error::parse(source, line, format!("expected 4 fields, got {}", rec.len())));
        }
        for (i, field) in rec.iter().enumerate() {
            if field.is_empty() {
                return Err(Error::parse(source, line, format!("empty `{}`", HEADER[i])));
            }
        }
        let split: Split = rec[3].parse().map_err(|e: String| Error::parse(source, line, e))?;
        out.push(UtteranceMeta::new(&rec[0], &rec[1], &rec[2], split));
    }
    check_unique_ids(&out)?;
    Ok(out)
}

pub fn save_metadata(path: &Path, metadata: &[UtteranceMeta]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metadata(std::io::BufWriter::new(f), metadata)
}

pub fn load_metadata(path: &Path) -> Result<Vec<UtteranceMeta>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metadata(std::io::BufReader::new(f), &path.display().to_string())
}

pub fn write_features<W: Write>(mut w: W, features: &FeatureStore) -> std::io::Result<()> {
    for (id, t) in features {
        let id_len = u32::try_from(id.len()).expect("utterance id under 4 GiB");
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_features(bytes: &[u8], source: &str) -> Result<FeatureStore> {
    let mut store = FeatureStore::new();
    let mut pos = 0usize;
    let mut record = 0usize;
    let take = |pos: &mut usize, n: usize, record: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::parse(source, record, format!("record {record} truncated at byte {}", *pos)));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    while pos < bytes.len() {
        record += 1;
        let id_len = u32_at(take(&mut pos, 4, record)?);
        let id = std::str::from_utf8(take(&mut pos, id_len, record)?)
            .map_err(|_| Error::parse(source, record, format!("record {record}: id is not UTF-8")))?
            .to_owned();
        let rows = u32_at(take(&mut pos, 4, record)?);
        let cols = u32_at(take(&mut pos, 4, record)?);
        let raw = take(&mut pos, rows * cols * 8, record)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(rows, cols, data)?;
        if store.insert(id.clone(), t).is_some() {
            return Err(Error::contract(format!("duplicate utterance id `{id}` in features")));
        }
    }
    Ok(store)
}

pub fn save_features(path: &Path, features: &FeatureStore) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_features(std::io::BufWriter::new(f), features).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> Vec<UtteranceMeta> {
        vec![
            UtteranceMeta::new("u1", "A", "en", Split::Train),
            UtteranceMeta::new("u2", "A", "UNKNOWN", Split::Eval),
            UtteranceMeta::new("u3", "B", "fr", Split::Eval),
        ]
    }

    #[test]
    fn empty_metadata_file_is_empty_list() {
        assert!(read_metadata(&b""[..], "m").unwrap().is_empty());
    }

    #[test]
    fn metadata_roundtrip_and_exact_bytes() {
        let mut buf = Vec::new();
        write_metadata(&mut buf, &meta()).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "utteranceId,speakerId,languageId,split\nu1,A,en,train\nu2,A,UNKNOWN,eval\nu3,B,fr,eval\n"
        );
        assert_eq!(read_metadata(&buf[..], "m").unwrap(), meta());
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = "utteranceId,speakerId,languageId,split\nu1,A,en,train\nu1,B,fr,eval\n";
        match read_metadata(text.as_bytes(), "m") {
            Err(Error::Contract(msg)) => assert!(msg.contains("u1")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = "utteranceId,speakerId,languageId,split\nu1,A,en,train\nu2,A,en\n";
        assert!(matches!(read_metadata(text.as_bytes(), "m"), Err(Error::Parse { line: 3, .. })));
        let text = "utteranceId,speakerId,languageId,split\nu1,A,en,test\n";
        assert!(matches!(read_metadata(text.as_bytes(), "m"), Err(Error::Parse { line: 2, .. })));
        let text = "id,speaker,lang,split\n";
        assert!(matches!(read_metadata(text.as_bytes(), "m"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn feature_record_layout() {
        let mut store = FeatureStore::new();
        store.insert("ab".into(), Tensor::from_rows(&[[1.0, -2.5]]).unwrap());
        let mut buf = Vec::new();
        write_features(&mut buf, &store).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, want);
        assert!(matches!(read_features(&buf[..buf.len() - 1], "f"), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn features_roundtrip(
            recs in proptest::collection::btree_map("[a-z0-9_]{1,12}", (1usize..4, 1usize..4, proptest::collection::vec(any::<f64>(), 16)), 0..5)
        ) {
            let store: FeatureStore = recs
                .into_iter()
                .map(|(id, (r, c, vals))| (id, Tensor::new(r, c, vals[..r * c].to_vec()).unwrap()))
                .collect();
            let mut buf = Vec::new();
            write_features(&mut buf, &store).unwrap();
            let back = read_features(&buf, "p").unwrap();
            prop_assert_eq!(back.len(), store.len());
            for (k, v) in &store {
                prop_assert_eq!(back[k].to_bits(), v.to_bits());
                prop_assert_eq!(back[k].shape(), v.shape());
            }
        }
    }
}
