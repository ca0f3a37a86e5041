//! Portable text container for named tensors.
//!
//! ```text
//! madation-checkpoint v1
//! meta <key> <value>
//! tensor <name> <d0>x<d1>...
//! <16-hex-digit IEEE-754 bit pattern> ...
//! end
//! ```
//!
//! Values are stored as raw `f64` bit patterns, so a save/load cycle is
//! bit-exact on every platform.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "madation-checkpoint v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(key, "missing metadata entry"))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta_str(key)?;
        raw.parse()
            .map_err(|_| Error::format(key, format!("cannot parse {raw:?}")))
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::format(name, "missing tensor block"))?;
        if t.shape() != shape {
            return Err(Error::format(
                name,
                format!("expected shape {shape:?}, found {:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            writeln!(out, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "tensor {name} {}", dims.join("x")).unwrap();
            let words: Vec<String> = t
                .data()
                .iter()
                .map(|v| format!("{:016x}", v.to_bits()))
                .collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::format("header", format!("expected {MAGIC:?}")));
        }
        let mut ckpt = Checkpoint::new();
        let mut finished = false;
        while let Some(line) = lines.next() {
            if line == "end" {
                finished = true;
                break;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "meta" => {
                    let (k, v) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::format(rest, "metadata line without value"))?;
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let (name, dims) = rest
                        .split_once(' ')
                        .ok_or_else(|| Error::format(rest, "tensor line without shape"))?;
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::format(name, format!("bad shape {dims:?}")))?;
                    let body = lines
                        .next()
                        .ok_or_else(|| Error::format(name, "missing data line"))?;
                    let data = body
                        .split_ascii_whitespace()
                        .map(|w| u64::from_str_radix(w, 16).map(f64::from_bits))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| Error::format(name, "non-hex value"))?;
                    let t = Tensor::new(shape, data)
                        .map_err(|e| Error::format(name, e.to_string()))?;
                    if ckpt.get(name).is_some() {
                        return Err(Error::format(name, "duplicate tensor block"));
                    }
                    ckpt.push(name, t);
                }
                other => return Err(Error::format(other, "unknown record kind")),
            }
        }
        if !finished {
            return Err(Error::format("end", "truncated checkpoint"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("width", 4);
        c.set_meta("note", "two words");
        c.push(
            "w",
            Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
        );
        c
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_text(&c.to_text()).unwrap();
        assert!(back.get("w").unwrap().bit_eq(c.get("w").unwrap()));
        assert_eq!(back.meta, c.meta);
    }

    #[test]
    fn corrupt_inputs_name_the_field() {
        let text = sample().to_text();
        let bad = text.replace("2x2", "2x3");
        let err = Checkpoint::from_text(&bad).unwrap_err();
        assert!(matches!(&err, Error::Format { field, .. } if field == "w"), "{err}");

        let truncated = text.replace("end\n", "");
        assert!(Checkpoint::from_text(&truncated).is_err());
        assert!(Checkpoint::from_text("not a checkpoint").is_err());
        let mut lines: Vec<&str> = text.lines().collect();
        let data_line = lines.iter().position(|l| l.starts_with("tensor")).unwrap() + 1;
        lines[data_line] = "zzzz 0 0 0";
        let err = Checkpoint::from_text(&lines.join("\n")).unwrap_err();
        assert!(err.to_string().contains("non-hex"), "{err}");
    }

    #[test]
    fn expect_checks_shape() {
        let c = sample();
        assert!(c.expect("w", &[2, 2]).is_ok());
        let err = c.expect("w", &[4]).unwrap_err();
        assert!(err.to_string().contains("w"));
        assert!(c.expect("missing", &[1]).is_err());
    }
}
