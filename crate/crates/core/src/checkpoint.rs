//! Plain-text header followed by raw little-endian `f64` data.
//!
//! ```text
//! DOCO-CHECKPOINT 1
//! meta <key> <value...>
//! tensor <name> <dim0> <dim1> ...
//! end
//! <binary payload: every tensor's data in header order>
//! ```
//!
//! A scalar tensor lists no dims. Meta values run to the end of the line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::objective::SourceStats;

pub const MAGIC: &str = "DOCO-CHECKPOINT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Format(format!("meta entry '{k}' not representable")));
            }
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("tensor name '{name}' contains whitespace")));
            }
            write!(w, "tensor {name}")?;
            for d in &t.shape {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
        }
        writeln!(w, "end")?;
        for (_, t) in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let next = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
            line.clear();
            if r.read_line(line)? == 0 {
                return Err(Error::Format("unexpected end of header".into()));
            }
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(())
        };
        next(&mut r, &mut line)?;
        if line != MAGIC {
            return Err(Error::Format(format!("bad magic line '{line}'")));
        }
        let mut ck = Checkpoint::default();
        let mut shapes = Vec::new();
        loop {
            next(&mut r, &mut line)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts.next().unwrap_or_default().to_string();
                let shape = parts
                    .map(|p| p.parse::<usize>().map_err(|_| Error::Format(format!("bad dim '{p}' for {name}"))))
                    .collect::<Result<Vec<_>>>()?;
                shapes.push((name, shape));
            } else {
                return Err(Error::Format(format!("unrecognised header line '{line}'")));
            }
        }
        let mut buf = [0u8; 8];
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("payload truncated in {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            ck.tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read_from(std::fs::File::open(path)?)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing meta '{key}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
    }
}

pub fn encoder_to_checkpoint(encoder: &Encoder, mut meta: BTreeMap<String, String>) -> Result<Checkpoint> {
    meta.insert("kind".into(), "encoder".into());
    meta.insert("encoder_config".into(), serde_json::to_string(&encoder.config)?);
    Ok(Checkpoint {
        meta,
        tensors: encoder
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, Tensor::new(t.shape.clone(), t.data.clone()).expect("valid")))
            .collect(),
    })
}

pub fn encoder_from_checkpoint(ck: &Checkpoint) -> Result<Encoder> {
    if ck.meta("kind")? != "encoder" {
        return Err(Error::Format("not an encoder checkpoint".into()));
    }
    let config: EncoderConfig = serde_json::from_str(ck.meta("encoder_config")?)?;
    let template = Encoder::init(config.clone(), &mut crate::rng::stream(0, "shape"))?;
    let mut params: EncoderParams<Tensor> = template.params;
    let mut missing = None;
    params.for_each_mut(|name, t| match ck.tensor(name) {
        Ok(src) => *t = src.clone(),
        Err(e) => missing = missing.take().or(Some(e)),
    });
    if let Some(e) = missing {
        return Err(e);
    }
    Encoder::from_params(config, params)
}

pub fn stats_to_checkpoint(stats: &SourceStats) -> Checkpoint {
    let d = stats.dim();
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), "source-stats".into());
    meta.insert("n_source".into(), stats.n_source.to_string());
    Checkpoint {
        meta,
        tensors: vec![
            ("mu_s".into(), Tensor::new(vec![d], stats.mu_s.clone()).expect("sized")),
            ("sigma_s".into(), Tensor::new(vec![d], stats.sigma_s.clone()).expect("sized")),
        ],
    }
}

pub fn stats_from_checkpoint(ck: &Checkpoint) -> Result<SourceStats> {
    if ck.meta("kind")? != "source-stats" {
        return Err(Error::Format("not a source-stats file".into()));
    }
    let n_source = ck
        .meta("n_source")?
        .parse()
        .map_err(|_| Error::Format("bad n_source".into()))?;
    Ok(SourceStats {
        mu_s: ck.tensor("mu_s")?.data.clone(),
        sigma_s: ck.tensor("sigma_s")?.data.clone(),
        n_source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bytes_and_values() {
        let mut meta = BTreeMap::new();
        meta.insert("note".into(), "two words".into());
        let ck = Checkpoint {
            meta,
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("s".into(), Tensor::scalar(0.1)),
            ],
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.meta["note"], "two words");
        assert_eq!(back.tensors[0].1.data[1].to_bits(), (-0.0f64).to_bits());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_damage() {
        let ck = Checkpoint {
            meta: BTreeMap::new(),
            tensors: vec![("a".into(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())],
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
        assert!(Checkpoint::read_from(&b"NOT-A-CHECKPOINT\nend\n"[..]).is_err());
    }

    #[test]
    fn encoder_and_stats_roundtrip() {
        let cfg = EncoderConfig {
            depth: 1,
            d_model: 8,
            n_heads: 2,
            n_patches: 3,
            patch_dim: 4,
            mlp_ratio: 2,
            n_classes: 3,
        };
        let enc = Encoder::init(cfg, &mut crate::rng::stream(4, "e")).unwrap();
        let ck = encoder_to_checkpoint(&enc, BTreeMap::new()).unwrap();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = encoder_from_checkpoint(&Checkpoint::read_from(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, enc);

        let stats = SourceStats {
            mu_s: vec![0.5, -1.0],
            sigma_s: vec![1.0, 2.0],
            n_source: 300,
        };
        let ck = stats_to_checkpoint(&stats);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(stats_from_checkpoint(&Checkpoint::read_from(bytes.as_slice()).unwrap()).unwrap(), stats);
        assert!(encoder_from_checkpoint(&ck).is_err());
    }
}
