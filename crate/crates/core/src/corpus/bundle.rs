//! Prepared-dataset directory: vocab TSVs, a binary quad file, and
//! `stats.json`.

use std::fs;
use std::path::Path;

use super::{CorpusError, Quad, QuadStore, Vocab};

pub const BUNDLE_MAGIC: &[u8; 4] = b"TKGQ";
pub const BUNDLE_VERSION: u32 = 1;

const QUADS_FILE: &str = "quads.bin";

/// `id<TAB>name` per line.
pub fn write_vocab_tsv(names: &[String], path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for (i, n) in names.iter().enumerate() {
        out.push_str(&format!("{i}\t{n}\n"));
    }
    fs::write(path, out).map_err(|e| CorpusError::io(path, e))
}

fn read_vocab_tsv(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (id, name) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: "expected `id<TAB>name`".into(),
        })?;
        if id.parse::<usize>().ok() != Some(i) {
            return Err(CorpusError::Parse { path: path.to_path_buf(), line: i + 1, detail: format!("id {id} out of order") });
        }
        names.push(name.to_owned());
    }
    Ok(names)
}

pub fn save_bundle(store: &QuadStore, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    write_vocab_tsv(store.entities().names(), &dir.join("entities.tsv"))?;
    write_vocab_tsv(store.relations().names(), &dir.join("relations.tsv"))?;
    write_vocab_tsv(store.timestamps(), &dir.join("timestamps.tsv"))?;

    let mut buf = Vec::with_capacity(24 + 16 * store.quads().len());
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.quads().len() as u64).to_le_bytes());
    buf.extend_from_slice(&store.train_boundary().to_le_bytes());
    buf.extend_from_slice(&store.valid_boundary().to_le_bytes());
    for q in store.quads() {
        for v in [q.s, q.r, q.o, q.t] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let qpath = dir.join(QUADS_FILE);
    fs::write(&qpath, buf).map_err(|e| CorpusError::io(&qpath, e))?;

    let spath = dir.join("stats.json");
    let stats = serde_json::to_string_pretty(&store.stats()).expect("stats serialize");
    fs::write(&spath, stats + "\n").map_err(|e| CorpusError::io(&spath, e))
}

pub fn load_bundle(dir: &Path) -> Result<QuadStore, CorpusError> {
    let entities = read_vocab_tsv(&dir.join("entities.tsv"))?;
    let relations = read_vocab_tsv(&dir.join("relations.tsv"))?;
    let timestamps = read_vocab_tsv(&dir.join("timestamps.tsv"))?;
    let qpath = dir.join(QUADS_FILE);
    let bytes = fs::read(&qpath).map_err(|e| CorpusError::io(&qpath, e))?;
    let corrupt = |detail: &str| CorpusError::Bundle { path: qpath.clone(), detail: detail.to_owned() };
    if bytes.len() < 24 || &bytes[..4] != BUNDLE_MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != BUNDLE_VERSION {
        return Err(corrupt(&format!("version {version}, expected {BUNDLE_VERSION}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let (train_before, valid_before) = (u32_at(16), u32_at(20));
    if bytes.len() != 24 + 16 * n {
        return Err(corrupt("truncated quad records"));
    }
    let quads = (0..n)
        .map(|i| {
            let at = 24 + 16 * i;
            Quad::new(u32_at(at), u32_at(at + 4), u32_at(at + 8), u32_at(at + 12))
        })
        .collect();
    QuadStore::from_parts(
        quads,
        Vocab::from_ordered(entities),
        Vocab::from_ordered(relations),
        timestamps,
        train_before,
        valid_before,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::planted_period;

    #[test]
    fn round_trip_is_byte_stable() {
        let store = planted_period(3).store;
        let a = tempfile::tempdir().unwrap();
        save_bundle(&store, a.path()).unwrap();
        let loaded = load_bundle(a.path()).unwrap();
        assert_eq!(loaded, store);
        let b = tempfile::tempdir().unwrap();
        save_bundle(&loaded, b.path()).unwrap();
        for f in ["entities.tsv", "relations.tsv", "timestamps.tsv", QUADS_FILE, "stats.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let store = planted_period(3).store;
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&store, dir.path()).unwrap();
        let q = dir.path().join(QUADS_FILE);
        let mut bytes = fs::read(&q).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&q, &bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(CorpusError::Bundle { .. })));
        bytes[0] = b'X';
        fs::write(&q, &bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(CorpusError::Bundle { .. })));
    }
}
