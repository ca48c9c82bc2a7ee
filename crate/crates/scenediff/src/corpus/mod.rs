//! Procedural ground-truth corpus: scenes, template captions, and
//! deterministic pseudo-image dense features.

mod build;
mod caption;
mod generate;
mod pseudo_image;
mod vocab;

pub use build::{build_corpus, load_manifest, load_record, CorpusManifest, CorpusRecord, Split};
pub use caption::{caption_scene, parse_caption, CaptionFacts};
pub use generate::{generate_scene, infer_template, TemplateKind};
pub use pseudo_image::{render_pseudo_image, DEPTH_MAX, D_DEPTH, D_FEAT, GRID_H, GRID_W, M_I};
pub use vocab::{Vocab, NUMBER_WORDS};

use crate::error::{Error, Result};
use crate::scene::DomainTag;
use serde::{Deserialize, Serialize};

/// Maximum prompt token count.
pub const MAX_PROMPT_LEN: usize = 64;

/// Parameters of the procedural generator. Deterministic per (seed, id).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusParams {
    pub templates: Vec<TemplateKind>,
    pub agent_count_min: usize,
    pub agent_count_max: usize,
    pub pedestrian_probability: f64,
    pub static_probability: f64,
    /// Hard cap on pedestrians per scene (keeps counts predictable from the
    /// pedestrian presence flag).
    pub max_pedestrians: usize,
    pub domains: Vec<DomainTag>,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            templates: vec![
                TemplateKind::Straight,
                TemplateKind::Curved,
                TemplateKind::TJunction,
                TemplateKind::FourWay,
            ],
            agent_count_min: 1,
            agent_count_max: 10,
            pedestrian_probability: 0.15,
            static_probability: 0.08,
            max_pedestrians: 2,
            domains: vec![DomainTag::Metro, DomainTag::Suburb],
            seed: 0,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("templates must be nonempty".into()));
        }
        if self.agent_count_max < self.agent_count_min {
            return Err(Error::Config("agent count range is empty".into()));
        }
        for p in [self.pedestrian_probability, self.static_probability] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0,1]")));
            }
        }
        if self.domains.is_empty() {
            return Err(Error::Config("domain tag set must be nonempty".into()));
        }
        Ok(())
    }
}

/// Caption as token ids over the fixed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
}

impl PromptTokens {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::Input("prompt must contain at least one token".into()));
        }
        if self.ids.len() > MAX_PROMPT_LEN {
            return Err(Error::Input(format!(
                "prompt length {} exceeds {MAX_PROMPT_LEN}",
                self.ids.len()
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i as usize >= vocab_size) {
            return Err(Error::Input(format!("token id {bad} out of vocabulary")));
        }
        Ok(())
    }
}

/// Dense pseudo-image tokens: a fixed grid of feature descriptors plus a
/// depth channel, standing in for frozen vision/depth encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseImageTokens {
    /// M_I x d_feat.
    pub feat: ndarray::Array2<f32>,
    /// M_I x d_depth, meters in [0, DEPTH_MAX].
    pub depth: ndarray::Array2<f32>,
}

impl DenseImageTokens {
    pub fn validate(&self) -> Result<()> {
        if self.feat.nrows() != M_I || self.feat.ncols() != D_FEAT {
            return Err(Error::Contract(format!(
                "feat grid must be {M_I} x {D_FEAT}, got {} x {}",
                self.feat.nrows(),
                self.feat.ncols()
            )));
        }
        if self.depth.nrows() != M_I || self.depth.ncols() != D_DEPTH {
            return Err(Error::Contract("depth grid shape mismatch".into()));
        }
        if !self.feat.iter().chain(self.depth.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "image tokens" });
        }
        if self.depth.iter().any(|&d| !(0.0..=DEPTH_MAX as f32 + 1e-3).contains(&d)) {
            return Err(Error::Contract("depth outside [0, depth_max]".into()));
        }
        Ok(())
    }

    const MAGIC: u32 = u32::from_le_bytes(*b"PSIM");

    /// Little-endian binary layout: 16-byte header (magic, M_I, d_feat,
    /// d_depth as u32), then feat rows, then depth rows, all f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 4 * (self.feat.len() + self.depth.len()));
        buf.extend_from_slice(&Self::MAGIC.to_le_bytes());
        buf.extend_from_slice(&(M_I as u32).to_le_bytes());
        buf.extend_from_slice(&(D_FEAT as u32).to_le_bytes());
        buf.extend_from_slice(&(D_DEPTH as u32).to_le_bytes());
        for x in self.feat.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        for x in self.depth.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<DenseImageTokens> {
        if buf.len() < 16 {
            return Err(Error::Input("image token payload truncated".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        if u32_at(0) != Self::MAGIC {
            return Err(Error::Input("bad image token magic".into()));
        }
        let (m, df, dd) = (u32_at(4) as usize, u32_at(8) as usize, u32_at(12) as usize);
        let need = 16 + 4 * (m * df + m * dd);
        if buf.len() != need {
            return Err(Error::Input(format!(
                "image token payload size {} != expected {need}",
                buf.len()
            )));
        }
        let mut off = 16;
        let mut read = |rows: usize, cols: usize| {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            ndarray::Array2::from_shape_vec((rows, cols), data).unwrap()
        };
        let feat = read(m, df);
        let depth = read(m, dd);
        Ok(DenseImageTokens { feat, depth })
    }
}
