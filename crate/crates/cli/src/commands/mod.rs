pub mod eval;
pub mod gradcheck;
pub mod nas;
pub mod prep;
pub mod synth;
pub mod train;

use std::path::PathBuf;

use baylm::RngStream;

use crate::config::RunConfig;
use crate::data::write;
use crate::error::{io, Result};

/// A resolved configuration and the directory every artifact goes to.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub rng: RngStream,
}

impl Ctx {
    /// Creates the output directory and writes the resolved config there.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
        write(&out, "config.toml", cfg.to_toml())?;
        let rng = RngStream::new(cfg.seed());
        Ok(Self { cfg, out, rng })
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        write(&self.out, name, contents)
    }

    pub fn write_json(&self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).expect("json values serialise");
        s.push('\n');
        self.write(name, s)
    }
}
