//! Reproducibility header: every resolved flag, the seed and input hashes.

use std::fs::{self, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Command};
use sha2::{Digest, Sha256};

pub fn file_sha256(path: &Path) -> io::Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// `#`-prefixed lines naming the subcommand path, each flag's resolved value
/// and the SHA-256 of every flag value that names an existing file.
pub fn render(cmd: &Command, matches: &ArgMatches) -> String {
    let mut command = vec!["itemforge".to_string()];
    let mut flags = Vec::new();
    let (mut c, mut m) = (cmd, matches);
    loop {
        collect(c, m, &mut flags);
        match m.subcommand() {
            Some((name, sub)) => {
                command.push(name.to_string());
                c = c.find_subcommand(name).expect("matched subcommand exists");
                m = sub;
            }
            None => break,
        }
    }
    let mut out = format!("# {} {}\n# command: {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"), command.join(" "));
    for (k, v) in &flags {
        out.push_str(&format!("# flag --{k}={v}\n"));
    }
    for (k, v) in &flags {
        let path = Path::new(v);
        if path.is_file() {
            if let Ok(h) = file_sha256(path) {
                out.push_str(&format!("# sha256 --{k} {v} {h}\n"));
            }
        }
    }
    out
}

fn collect(cmd: &Command, m: &ArgMatches, flags: &mut Vec<(String, String)>) {
    for arg in cmd.get_arguments() {
        let (id, Some(long)) = (arg.get_id().as_str(), arg.get_long()) else { continue };
        if matches!(long, "help" | "version") {
            continue;
        }
        if let Ok(Some(values)) = m.try_get_raw(id) {
            let joined: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            flags.push((long.to_string(), joined.join(",")));
        }
    }
}

/// Writes the header to stderr and appends it to `log` when given.
pub fn emit(text: &str, log: Option<&Path>) -> io::Result<()> {
    eprint!("{text}");
    if let Some(path) = log {
        append(path, text)?;
    }
    Ok(())
}

pub fn append(path: &Path, text: &str) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    OpenOptions::new().create(true).append(true).open(path)?.write_all(text.as_bytes())
}

/// `run.log` inside `dir`.
pub fn log_in(dir: &Path) -> PathBuf {
    dir.join("run.log")
}

/// `run.log` next to the file `path`.
pub fn log_beside(path: &Path) -> PathBuf {
    log_in(path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")))
}
