use std::path::Path;

use rrdr_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Reads a JSON config file whose keys mirror the command's long flags
/// with `_` in place of `-`.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| with_path(e.into(), path))?;
    serde_json::from_str(&text).map_err(|e| Error::Spec(format!("config {}: {e}", path.display())))
}

/// Prefixes I/O errors with the offending path.
pub fn with_path(err: Error, path: &Path) -> Error {
    match err {
        Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))),
        other => other,
    }
}

/// Hex SHA-256 of the resolved configuration's JSON form.
pub fn hash<T: Serialize>(resolved: &T) -> String {
    let bytes = serde_json::to_vec(resolved).expect("configs serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Fills every `None` field of `$cli` from `$file`.
macro_rules! overlay {
    ($cli:expr, $file:expr; $($field:ident),+ $(,)?) => {
        $( if $cli.$field.is_none() { $cli.$field = $file.$field.take(); } )+
    };
}
pub(crate) use overlay;

pub fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Spec(format!("missing required setting --{flag}")))
}

/// Parses `"a,b,c"` or `"lo:hi:step"` into a list of numbers.
pub fn number_list(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Spec(format!("cannot read number list '{text}'"));
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    if text.contains(':') {
        let parts: Vec<f64> = text.split(':').map(parse).collect::<Result<_>>()?;
        let [lo, hi, step] = parts[..] else { return Err(bad()) };
        if !(step > 0.0 && hi >= lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(bad());
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        return Ok((0..count).map(|k| lo + k as f64 * step).collect());
    }
    text.split(',').filter(|s| !s.trim().is_empty()).map(parse).collect()
}
