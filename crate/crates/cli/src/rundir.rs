use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use euclidnet::io::write_atomic;
use euclidnet::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// First 8 bytes of the SHA-256 of the JSON form of `settings`, in hex.
pub fn settings_hash(settings: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(settings).expect("settings serialise");
    Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Output directory for one command: `explicit` if given, otherwise
/// `<root>/<command>-<hash>-<unix seconds>`.
pub fn prepare(command: &str, explicit: Option<&Path>, root: Option<&Path>, settings: &impl Serialize) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            root.unwrap_or(Path::new("runs"))
                .join(format!("{command}-{}-{ts}", settings_hash(settings)))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let p = dir.join(name);
    write_atomic(&p, contents.as_ref())?;
    Ok(p)
}
