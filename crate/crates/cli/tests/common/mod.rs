#![allow(dead_code)]

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

pub struct Run {
    pub code: i32,
    pub stderr: String,
    pub elapsed: Duration,
}

/// Runs the binary with `config` written to `<dir>/config.toml`.
pub fn run(cmd: &str, dir: &Path, config: &str, extra: &[&str]) -> Run {
    std::fs::create_dir_all(dir).unwrap();
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_common-agency"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        elapsed: start.elapsed(),
    }
}

pub struct Csv {
    pub header: String,
    pub rows: Vec<HashMap<String, String>>,
}

impl Csv {
    pub fn f(&self, row: usize, col: &str) -> f64 {
        let v = &self.rows[row][col];
        v.parse().unwrap_or_else(|_| panic!("{col} = {v} is not a float"))
    }

    pub fn column(&self, col: &str) -> Vec<f64> {
        (0..self.rows.len()).map(|r| self.f(r, col)).collect()
    }

    pub fn find(&self, col: &str, value: &str) -> usize {
        self.rows.iter().position(|r| r[col] == value).unwrap_or_else(|| panic!("no row with {col} = {value}"))
    }
}

pub fn read_csv(path: &Path) -> Csv {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let (header, body) = text.split_once('\n').unwrap();
    let mut rd = csv::Reader::from_reader(body.as_bytes());
    let cols: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    let rows = rd
        .records()
        .map(|r| cols.iter().cloned().zip(r.unwrap().iter().map(String::from)).collect())
        .collect();
    Csv {
        header: header.to_string(),
        rows,
    }
}
