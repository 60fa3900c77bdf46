//! Fixture pieces: tiny JSON programs interpreted by this same binary.
//!
//! A piece costs one exec of the test binary instead of an interpreter
//! start, which keeps thousands of graph runs affordable.

use std::io::{BufRead, Write};

use pieceforge_core::sandbox::RunnerProfile;
use pieceforge_core::CodeCandidate;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const PROFILE: &str = "fixture";
pub const MODULUS: i64 = 1_000_003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Program {
    /// `v = (c + sum k * input[path]) mod MODULUS`; prints `v`, or
    /// `{"v": v, "w": (31 v + 7) mod MODULUS}` when `pair`.
    Affine {
        terms: Vec<(String, i64)>,
        c: i64,
        #[serde(default)]
        pair: bool,
    },
    Sleep { secs: f64 },
    /// Prints this many bytes and exits.
    Spew { bytes: usize },
}

impl Program {
    pub fn affine(terms: &[(&str, i64)], c: i64, pair: bool) -> Self {
        Program::Affine { terms: terms.iter().map(|(p, k)| (p.to_string(), *k)).collect(), c, pair }
    }

    pub fn source(&self) -> String {
        format!("{}\n", serde_json::to_string(self).unwrap())
    }

    pub fn candidate(&self) -> CodeCandidate {
        CodeCandidate::new(self.source(), PROFILE, 1, "fixture")
    }

    /// Reply text a backend would send for this program.
    pub fn reply(&self) -> String {
        format!("```\n{}```\n", self.source())
    }

    /// The in-process meaning of the program, used as the oracle.
    pub fn eval(&self, input: &Value) -> Result<Value, String> {
        match self {
            Program::Affine { terms, c, pair } => {
                let mut v = *c;
                for (path, k) in terms {
                    let x = input.get(path).and_then(Value::as_i64).ok_or_else(|| format!("input {path} missing"))?;
                    v = (v + k * x).rem_euclid(MODULUS);
                }
                let v = v.rem_euclid(MODULUS);
                Ok(if *pair { json!({"v": v, "w": (31 * v + 7).rem_euclid(MODULUS)}) } else { json!(v) })
            }
            _ => Err("not a value program".into()),
        }
    }
}

pub fn profile() -> RunnerProfile {
    let exe = std::env::current_exe().expect("test binary path");
    RunnerProfile::new(PROFILE, &[exe.to_str().expect("utf-8 path"), "--piece", "{file}"], ".json")
}

/// Entry point when the binary is run as a piece.
pub fn interpret(file: &str) -> i32 {
    let program: Program = match std::fs::read_to_string(file).map_err(|e| e.to_string()).and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string())) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("bad program: {e}");
            return 2;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match program {
        Program::Sleep { secs } => {
            std::thread::sleep(std::time::Duration::from_secs_f64(secs));
            0
        }
        Program::Spew { bytes } => {
            let chunk = vec![b'x'; 64 * 1024];
            let mut left = bytes;
            while left > 0 {
                let n = left.min(chunk.len());
                if stdout.write_all(&chunk[..n]).is_err() {
                    return 0;
                }
                left -= n;
            }
            0
        }
        affine => {
            let mut line = String::new();
            if std::io::stdin().lock().read_line(&mut line).is_err() {
                return 2;
            }
            let input: Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(e) => {
                    eprintln!("bad input: {e}");
                    return 2;
                }
            };
            match affine.eval(&input) {
                Ok(v) => {
                    let _ = writeln!(stdout, "{v}");
                    0
                }
                Err(e) => {
                    eprintln!("{e}");
                    1
                }
            }
        }
    }
}
