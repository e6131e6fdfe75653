//! Tiny key=value artifact files (machine-readable fit summaries).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::CliError;

pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (k, v) in pairs {
        writeln!(f, "{k} = {v}").map_err(|e| CliError::Core(e.into()))?;
    }
    Ok(())
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            out.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    Ok(out)
}
