//! Binary checkpoint container.
//!
//! Layout, little-endian: magic `SREC`, `u32` version, `u32` entry count,
//! then per entry `u32` name length, UTF-8 name, `u32` rank, `u32` extents
//! and an `f32` payload. Text metadata is stored as rank-1 tensors of byte
//! values.

use std::path::Path;

use crate::clip::{Backbone, EncoderConfig, TextTable};
use crate::ensemble::EnsembleState;
use crate::error::{Error, Result};
use crate::refocus::{Decoder, Refocuser};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SREC";
pub const VERSION: u32 = 1;

pub fn encode_entries(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("oversized entry".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn bytes_tensor(s: &[u8]) -> Tensor {
    // an empty string still needs a nonzero extent
    let mut data: Vec<f64> = s.iter().map(|&b| b as f64).collect();
    data.insert(0, s.len() as f64);
    Tensor::vector(data)
}

pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let d = t.data();
    let n = d[0] as usize;
    if d.len() != n + 1 {
        return Err(Error::Format("malformed byte entry".into()));
    }
    Ok(d[1..].iter().map(|&v| v as u8).collect())
}

fn text_entries(text: &TextTable) -> Vec<(String, Tensor)> {
    vec![
        ("text.embeddings".into(), text.embeddings.clone()),
        ("text.tau".into(), Tensor::scalar(text.tau)),
        ("text.classes".into(), bytes_tensor(text.class_names.join("\n").as_bytes())),
    ]
}

fn encoder_entry(cfg: &EncoderConfig) -> (String, Tensor) {
    let c = [cfg.image_size, cfg.patch_size, cfg.layers, cfg.width, cfg.heads, cfg.mlp_ratio];
    ("backbone.config".into(), Tensor::vector(c.iter().map(|&v| v as f64).collect()))
}

/// Serialization of the frozen parts alone.
pub fn frozen_bytes(backbone: &Backbone, text: &TextTable) -> Vec<u8> {
    let mut owned = vec![encoder_entry(&backbone.config)];
    owned.extend(text_entries(text));
    let mut entries: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    entries.extend(backbone.named());
    encode_entries(&entries)
}

/// Inverse of [`frozen_bytes`].
pub fn decode_frozen(bytes: &[u8]) -> Result<(Backbone, TextTable)> {
    let e = Entries(decode_entries(bytes)?);
    let backbone = Backbone::from_named(e.encoder_config()?, |n| e.get(n))?;
    Ok((backbone, e.text()?))
}

/// A trained model plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub text: TextTable,
    pub refocuser: Refocuser,
    pub ensemble: Option<EnsembleState>,
    /// Echo of the training configuration.
    pub config: String,
    /// Hex SHA-256 of the training log.
    pub log_digest: String,
}

struct Entries(Vec<(String, Tensor)>);

impl Entries {
    fn get(&self, name: &str) -> Result<Tensor> {
        self.0
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))
    }

    fn has(&self, name: &str) -> bool {
        self.0.iter().any(|(n, _)| n == name)
    }

    fn encoder_config(&self) -> Result<EncoderConfig> {
        let c = self.get("backbone.config")?;
        let c: Vec<usize> = c.data().iter().map(|&v| v as usize).collect();
        if c.len() != 6 {
            return Err(Error::Format("malformed encoder config".into()));
        }
        let cfg = EncoderConfig {
            image_size: c[0],
            patch_size: c[1],
            layers: c[2],
            width: c[3],
            heads: c[4],
            mlp_ratio: c[5],
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }

    fn text(&self) -> Result<TextTable> {
        Ok(TextTable {
            class_names: self.string("text.classes")?.split('\n').map(String::from).collect(),
            embeddings: self.get("text.embeddings")?,
            tau: self.get("text.tau")?.item(),
        })
    }

    fn string(&self, name: &str) -> Result<String> {
        String::from_utf8(tensor_bytes(&self.get(name)?)?).map_err(|_| Error::Format(format!("{name} not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut owned = vec![encoder_entry(&self.backbone.config)];
        owned.extend(text_entries(&self.text));
        owned.push(("refocus.sigma".into(), self.refocuser.sigma.clone()));
        for (n, t) in self.refocuser.decoder.names().into_iter().zip(self.refocuser.decoder.tensors()) {
            owned.push((format!("refocus.theta.{n}"), t.clone()));
        }
        if let Some(e) = &self.ensemble {
            owned.push(("ensemble.s_bar".into(), Tensor::scalar(e.s_bar)));
            owned.push(("ensemble.omega".into(), Tensor::scalar(e.omega)));
            owned.push(("ensemble.accept_count".into(), Tensor::scalar(e.accept_count as f64)));
            for (n, t) in self.refocuser.decoder.names().into_iter().zip(&e.theta_a) {
                owned.push((format!("ensemble.theta_a.{n}"), t.clone()));
            }
        }
        owned.push(("meta.config".into(), bytes_tensor(self.config.as_bytes())));
        owned.push(("meta.log_digest".into(), bytes_tensor(self.log_digest.as_bytes())));
        let mut entries: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        entries.extend(self.backbone.named());
        encode_entries(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let e = Entries(decode_entries(bytes)?);
        let cfg = e.encoder_config()?;
        let backbone = Backbone::from_named(cfg, |n| e.get(n))?;
        let text = e.text()?;
        let mut decoder = Decoder {
            layers: Vec::new(),
            residual: true,
        };
        let template = Refocuser::init(&cfg, 0).decoder;
        let names = template.names();
        let flat = names
            .iter()
            .map(|n| e.get(&format!("refocus.theta.{n}")))
            .collect::<Result<Vec<_>>>()?;
        decoder.layers = template.with_flat(&flat)?.layers;
        let refocuser = Refocuser {
            sigma: e.get("refocus.sigma")?,
            decoder,
        };
        let ensemble = if e.has("ensemble.s_bar") {
            Some(EnsembleState {
                s_bar: e.get("ensemble.s_bar")?.item(),
                omega: e.get("ensemble.omega")?.item(),
                accept_count: e.get("ensemble.accept_count")?.item() as u64,
                theta_a: names
                    .iter()
                    .map(|n| e.get(&format!("ensemble.theta_a.{n}")))
                    .collect::<Result<Vec<_>>>()?,
            })
        } else {
            None
        };
        Ok(Self {
            backbone,
            text,
            refocuser,
            ensemble,
            config: e.string("meta.config")?,
            log_digest: e.string("meta.log_digest")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Serializes then reloads, so in-memory values match a file round trip.
    pub fn canonical(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            layers: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn sample() -> Checkpoint {
        let cfg = tiny();
        let raw = Tensor::randn(&mut rng::stream(1, &[]), &[3, 8], 1.0);
        let refocuser = Refocuser::init(&cfg, 2);
        let mut ens = EnsembleState::for_decoder(&refocuser.decoder, 0.98);
        ens.maybe_ensemble(&refocuser.decoder.tensors(), 0.4, Default::default()).unwrap();
        Checkpoint {
            backbone: Backbone::init(cfg, 3).unwrap(),
            text: TextTable::from_raw(vec!["a".into(), "b".into(), "c".into()], &raw, 0.07).unwrap(),
            refocuser,
            ensemble: Some(ens),
            config: "mode = sre\n".into(),
            log_digest: "ab12".into(),
        }
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SREC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.config, "mode = sre\n");
        assert_eq!(back.text.class_names, vec!["a", "b", "c"]);
        assert_eq!(back.ensemble.as_ref().unwrap().accept_count, 1);
    }

    #[test]
    fn frozen_roundtrip() {
        let c = sample();
        let bytes = frozen_bytes(&c.backbone, &c.text);
        let (bb, text) = decode_frozen(&bytes).unwrap();
        assert_eq!(frozen_bytes(&bb, &text), bytes);
    }

    #[test]
    fn without_ensemble() {
        let mut c = sample();
        c.ensemble = None;
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.ensemble.is_none());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn entries_roundtrip(vals in proptest::collection::vec(-1e6f32..1e6f32, 1..40), name in "[a-z.]{1,12}") {
            let t = Tensor::vector(vals.iter().map(|&v| v as f64).collect());
            let bytes = encode_entries(&[(name.clone(), &t)]);
            let back = decode_entries(&bytes).unwrap();
            prop_assert_eq!(&back[0].0, &name);
            prop_assert_eq!(&back[0].1, &t);
        }

        #[test]
        fn byte_tensors_roundtrip(s in proptest::collection::vec(any::<u8>(), 0..50)) {
            prop_assert_eq!(tensor_bytes(&bytes_tensor(&s)).unwrap(), s);
        }
    }
}
