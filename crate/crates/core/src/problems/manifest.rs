//! Dataset manifests: one `<role>,<path>,<seed>` line per instance.

use std::io::{Read, Write};
use std::path::PathBuf;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: String,
    pub path: PathBuf,
    pub seed: u64,
}

pub fn write_manifest<W: Write>(w: W, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for e in entries {
        let path = e.path.to_str().ok_or_else(|| Error::Format(format!("non UTF-8 path {:?}", e.path)))?;
        out.write_record([e.role.as_str(), path, &e.seed.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<ManifestEntry>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    rd.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(format!("manifest line has {} fields, expected 3", rec.len())));
            }
            let seed = rec[2].trim().parse().map_err(|_| Error::Format(format!("bad seed `{}`", &rec[2])))?;
            Ok(ManifestEntry { role: rec[0].trim().to_string(), path: PathBuf::from(rec[1].trim()), seed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let entries = vec![
            ManifestEntry { role: "train".into(), path: "data/a.pgm".into(), seed: 1 },
            ManifestEntry { role: "test".into(), path: "data/b.pgm".into(), seed: 2 },
        ];
        let mut buf = Vec::new();
        write_manifest(&mut buf, &entries).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "train,data/a.pgm,1\ntest,data/b.pgm,2\n");
        assert_eq!(read_manifest(&buf[..]).unwrap(), entries);
        assert!(read_manifest(&b"train,x\n"[..]).is_err());
    }
}
