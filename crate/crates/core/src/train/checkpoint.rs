//! Checkpoint files.
//!
//! A short text header is followed by the model configuration as TOML and a
//! little-endian binary body:
//!
//! ```text
//! selfdepth-checkpoint 1
//! config-sha256 <64 hex digits>
//! step <n>
//! model-config <byte count>
//! <TOML>
//! depth_range f64 f64 | param count u32 | per param: name, dims, f64 data
//! | adam step u64 | adam m and v tensors in parameter order
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::networks::{ModelConfig, Models};
use crate::nn::{Adam, AdamConfig, Param};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "selfdepth-checkpoint";

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub model_config: ModelConfig,
    pub depth_range: [f64; 2],
    pub params: Vec<Param>,
    pub adam_step: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn capture(models: &Models, adam: &Adam, step: u64, config_hash: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            step,
            model_config: models.config.clone(),
            depth_range: models.depth_range,
            params: models.store.params().to_vec(),
            adam_step: adam.step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    pub fn models(&self) -> Result<Models> {
        let mut m = Models::new(&self.model_config, 0)?;
        m.store.load(&self.params)?;
        m.depth_range = self.depth_range;
        Ok(m)
    }

    pub fn adam(&self, cfg: AdamConfig) -> Adam {
        Adam { cfg, step: self.adam_step, m: self.adam_m.clone(), v: self.adam_v.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = toml::to_string(&self.model_config).expect("model config serialises");
        let mut out = format!(
            "{MAGIC} {CHECKPOINT_VERSION}\nconfig-sha256 {}\nstep {}\nmodel-config {}\n{cfg}",
            self.config_hash,
            self.step,
            cfg.len()
        )
        .into_bytes();
        let put_tensor = |out: &mut Vec<u8>, t: &Tensor| {
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend(v.to_le_bytes());
            }
        };
        out.extend(self.depth_range[0].to_le_bytes());
        out.extend(self.depth_range[1].to_le_bytes());
        out.extend((self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend((p.name.len() as u32).to_le_bytes());
            out.extend(p.name.as_bytes());
            put_tensor(&mut out, &p.value);
        }
        out.extend(self.adam_step.to_le_bytes());
        for t in self.adam_m.iter().chain(&self.adam_v) {
            put_tensor(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.line()?;
        let version = magic
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| Error::Contract("not a selfdepth checkpoint".into()))?;
        ensure!(
            version == CHECKPOINT_VERSION.to_string(),
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        );
        let config_hash = r.field("config-sha256")?.to_string();
        let step: u64 = r.field("step")?.parse().map_err(|_| Error::Contract("bad step".into()))?;
        let cfg_len: usize = r.field("model-config")?.parse().map_err(|_| Error::Contract("bad config length".into()))?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Contract("config is not UTF-8".into()))?;
        let model_config: ModelConfig = toml::from_str(cfg_text).map_err(|e| Error::Config(e.to_string()))?;
        let depth_range = [r.f64()?, r.f64()?];
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Contract("bad parameter name".into()))?;
            params.push(Param { name, value: r.tensor()? });
        }
        let adam_step = r.u64()?;
        let adam_m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let adam_v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        ensure!(r.pos == bytes.len(), "{} trailing bytes in checkpoint", bytes.len() - r.pos);
        Ok(Self { config_hash, step, model_config, depth_range, params, adam_step, adam_m, adam_v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(self.pos + n <= self.bytes.len(), "checkpoint truncated");
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().take(256).position(|&b| b == b'\n');
        let end = end.ok_or_else(|| Error::Contract("not a selfdepth checkpoint".into()))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Contract("header is not UTF-8".into()))?;
        self.pos += end + 1;
        Ok(s)
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .map(str::trim)
            .ok_or_else(|| Error::Contract(format!("expected header field `{key}`")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        ensure!(nd <= 8, "implausible tensor rank {nd}");
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        ensure!(self.pos + 8 * len <= self.bytes.len(), "checkpoint truncated");
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::new(shape, data))
    }
}
