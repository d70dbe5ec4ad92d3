//! Download and digest check of the MNIST IDX files.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use crate::data::MNIST_FILES;
use crate::error::{Error, Result};

/// npm package that ships the four raw IDX files under `package/data/`.
pub const DEFAULT_SOURCE: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";

/// SHA-256 of the uncompressed IDX files.
pub const DIGESTS: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn expected_digest(name: &str) -> &'static str {
    DIGESTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, d)| *d)
        .expect("known file")
}

/// Files in `dir` that are missing or fail their digest.
pub fn missing_or_bad(dir: &Path) -> Vec<&'static str> {
    MNIST_FILES
        .iter()
        .copied()
        .filter(|name| match std::fs::read(dir.join(name)) {
            Ok(b) => sha256_hex(&b) != expected_digest(name),
            Err(_) => true,
        })
        .collect()
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Fetch(format!("gzip: {e}")))?;
    Ok(out)
}

/// Pulls the IDX files (raw or `.gz`) out of a gzipped tarball.
pub fn extract_tarball(archive: &[u8]) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut found = Vec::new();
    let entries = tar.entries().map_err(|e| Error::Fetch(format!("tar: {e}")))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::Fetch(format!("tar: {e}")))?;
        let path = entry.path().map_err(|e| Error::Fetch(format!("tar: {e}")))?.into_owned();
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        let (stem, gz) = match file.strip_suffix(".gz") {
            Some(s) => (s.to_string(), true),
            None => (file, false),
        };
        if let Some(name) = MNIST_FILES.iter().copied().find(|n| *n == stem) {
            let mut buf = Vec::new();
            entry
                .read_to_end(&mut buf)
                .map_err(|e| Error::Fetch(format!("tar: {e}")))?;
            found.push((name, if gz { gunzip(&buf)? } else { buf }));
        }
    }
    Ok(found)
}

fn read_source(source: &str) -> Result<Vec<u8>> {
    if source.starts_with("http://") || source.starts_with("https://") {
        let mut resp = ureq::get(source)
            .call()
            .map_err(|e| Error::Fetch(format!("{source}: {e}")))?;
        resp.body_mut()
            .with_config()
            .limit(512 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| Error::Fetch(format!("{source}: {e}")))
    } else {
        std::fs::read(source).map_err(|e| Error::io(source, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchReport {
    pub written: Vec<PathBuf>,
    pub already_present: bool,
}

/// Ensures `dir` holds the four verified IDX files, downloading `source`
/// (URL or local tarball path) if needed.
pub fn fetch_mnist(source: &str, dir: &Path) -> Result<FetchReport> {
    if missing_or_bad(dir).is_empty() {
        return Ok(FetchReport {
            written: Vec::new(),
            already_present: true,
        });
    }
    let archive = read_source(source)?;
    let files = extract_tarball(&archive)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for name in MNIST_FILES {
        let bytes = &files
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Fetch(format!("{name} not found in {source}")))?
            .1;
        let got = sha256_hex(bytes);
        if got != expected_digest(name) {
            return Err(Error::Fetch(format!("{name}: digest {got} does not match")));
        }
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(FetchReport {
        written,
        already_present: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tarball(files: &[(&str, &[u8])]) -> Vec<u8> {
        let mut b = tar::Builder::new(flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast()));
        for (name, data) in files {
            let mut h = tar::Header::new_gnu();
            h.set_size(data.len() as u64);
            h.set_mode(0o644);
            h.set_cksum();
            b.append_data(&mut h, format!("package/data/{name}"), *data).unwrap();
        }
        b.into_inner().unwrap().finish().unwrap()
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn extracts_raw_and_gzipped_members() {
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        std::io::Write::write_all(&mut gz, b"abc").unwrap();
        let gz = gz.finish().unwrap();
        let t = tarball(&[("train-images-idx3-ubyte", b"xyz"), ("t10k-labels-idx1-ubyte.gz", &gz), ("README", b"r")]);
        let got = extract_tarball(&t).unwrap();
        assert_eq!(got.len(), 2);
        assert!(got.contains(&("train-images-idx3-ubyte", b"xyz".to_vec())));
        assert!(got.contains(&("t10k-labels-idx1-ubyte", b"abc".to_vec())));
    }

    #[test]
    fn wrong_digest_is_a_fetch_error() {
        let dir = tempfile::tempdir().unwrap();
        let files: Vec<(&str, &[u8])> = MNIST_FILES.iter().map(|n| (*n, &b"bogus"[..])).collect();
        let src = dir.path().join("m.tgz");
        std::fs::write(&src, tarball(&files)).unwrap();
        let out = dir.path().join("out");
        let err = fetch_mnist(src.to_str().unwrap(), &out).unwrap_err();
        assert!(matches!(err, Error::Fetch(_)));
        assert_eq!(missing_or_bad(&out).len(), 4);
    }
}
