//! Committed-output comparison. `MNEMO_BLESS=1` rewrites the files.
#![allow(dead_code)]

use std::path::PathBuf;

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("MNEMO_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(expected == actual, "{} differs from the current output", path.display());
}
