#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lfmark_core::corpus;

pub fn lfmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfmark")).args(args).output().expect("spawn lfmark")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout_lines(out: &Output) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("bad json line {l}: {e}")))
        .collect()
}

pub fn stderr_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with("{\"error\"")).unwrap_or_else(|| panic!("no error record in {text}"));
    serde_json::from_str(line).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `n` 64×64 synthetic textures as PNGs into `dir`.
pub fn write_textures(dir: &Path, n: usize, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    corpus::synthetic_textures(n, 64, seed)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = dir.join(format!("tex{i:02}.png"));
            img.save(&path).unwrap();
            path
        })
        .collect()
}

pub fn write_config(path: &Path, body: &str) -> PathBuf {
    std::fs::write(path, format!("version = 1\n{body}")).unwrap();
    path.to_path_buf()
}

/// Identity codec, augmentations off.
pub const QUICK_CONFIG: &str = "[embed]\nsteps = 200\nlatent_noise_std = 0.0\npixel_noise_std = 0.0\n[backends]\ncodec = \"identity\"\n";

pub fn gen_key(path: &Path, bits: usize, extra: &[&str]) {
    let bits = bits.to_string();
    let mut args = vec!["gen-key", "--bits", bits.as_str(), "--out", p(path)];
    args.extend_from_slice(extra);
    let out = lfmark(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

pub fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

pub fn csv_headers(path: &Path) -> Vec<String> {
    csv::Reader::from_path(path).unwrap().headers().unwrap().iter().map(String::from).collect()
}

pub fn column(path: &Path, name: &str) -> Vec<String> {
    let idx = csv_headers(path).iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    read_csv(path).iter().map(|r| r[idx].to_string()).collect()
}
