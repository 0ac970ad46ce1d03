//! Model configuration and parameter layout.

use serde::{Deserialize, Serialize};
use streamtse_nn::{BlockParams, ParamInit, ParamSet};

use crate::codec::{CODEBOOK_SIZE, LATENT_DIM};
use crate::error::{Error, Result};

/// Reserved id emitted by the semantic model to signal a null output.
pub const END_TOKEN: u32 = CODEBOOK_SIZE as u32;
/// Semantic vocabulary: codebook ids plus the end token.
pub const VOCAB_SIZE: usize = CODEBOOK_SIZE + 1;
/// Initial bias of the end-token logit.
pub const END_LOGIT_INIT: f64 = -4.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub selm_layers: usize,
    pub arlm_layers: usize,
    pub n_mels: usize,
    pub conv_width: usize,
    /// Encoder self-attention look-back in frames; `None` is unbounded.
    pub encoder_window: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 1,
            d_ff: 64,
            encoder_layers: 1,
            selm_layers: 2,
            arlm_layers: 2,
            n_mels: 40,
            conv_width: 3,
            encoder_window: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The gradient-check configuration: `d_model = 8`, one layer per model.
    pub fn micro(seed: u64) -> Self {
        Self { d_model: 8, heads: 1, d_ff: 16, encoder_layers: 1, selm_layers: 1, arlm_layers: 1, seed, ..Self::default() }
    }

    /// Same layer count for the encoder and both language models.
    pub fn with_layers(mut self, layers: usize) -> Self {
        self.encoder_layers = layers;
        self.selm_layers = layers;
        self.arlm_layers = layers;
        self
    }

    pub fn with_dim(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.d_ff = 2 * d_model;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.conv_width == 0 || self.n_mels == 0 || self.d_ff == 0 {
            return Err(Error::Config("conv width, mel count and feed-forward width must be positive".into()));
        }
        if self.encoder_window == Some(0) {
            return Err(Error::Config("encoder window must be at least 1".into()));
        }
        Ok(())
    }

    /// Seeded initial parameters for the encoder and both language models.
    pub fn init_params(&self) -> Result<ParamSet> {
        self.validate()?;
        let d = self.d_model;
        let mut init = ParamInit::new(self.seed);
        init.constant("enc.in_ln.g", 1, self.n_mels, 1.0)?;
        init.constant("enc.in_ln.b", 1, self.n_mels, 0.0)?;
        init.uniform("enc.in.w", self.n_mels, d)?;
        init.constant("enc.in.b", 1, d, 0.0)?;
        for l in 0..self.encoder_layers {
            let p = format!("enc.l{l}");
            BlockParams::init(&mut init, &p, d, self.d_ff)?;
            init.constant(&format!("{p}.lnc.g"), 1, d, 1.0)?;
            init.constant(&format!("{p}.lnc.b"), 1, d, 0.0)?;
            init.uniform(&format!("{p}.conv.k"), self.conv_width, d)?;
            init.uniform(&format!("{p}.conv.w"), d, d)?;
            init.constant(&format!("{p}.conv.b"), 1, d, 0.0)?;
        }
        init.constant("enc.lnf.g", 1, d, 1.0)?;
        init.constant("enc.lnf.b", 1, d, 0.0)?;

        for (lm, layers) in [(LmKind::Selm, self.selm_layers), (LmKind::Arlm, self.arlm_layers)] {
            let p = lm.prefix();
            init.uniform(&format!("{p}.sep"), 1, d)?;
            if lm == LmKind::Selm {
                init.uniform(&format!("{p}.task"), 1, d)?;
            }
            init.uniform(&format!("{p}.tok_emb"), VOCAB_SIZE, d)?;
            for l in 0..layers {
                BlockParams::init(&mut init, &format!("{p}.l{l}"), d, self.d_ff)?;
            }
            init.constant(&format!("{p}.lnf.g"), 1, d, 1.0)?;
            init.constant(&format!("{p}.lnf.b"), 1, d, 0.0)?;
            match lm {
                LmKind::Selm => {
                    init.uniform(&format!("{p}.out.w"), d, VOCAB_SIZE)?;
                    init.constant(&format!("{p}.out.b"), 1, VOCAB_SIZE, 0.0)?;
                }
                LmKind::Arlm => {
                    init.uniform(&format!("{p}.proj.w"), d, LATENT_DIM)?;
                    init.constant(&format!("{p}.proj.b"), 1, LATENT_DIM, 0.0)?;
                }
            }
        }
        let mut ps = init.finish();
        ps.get_mut("selm.out.b")?.set(0, END_TOKEN as usize, END_LOGIT_INIT);
        Ok(ps)
    }
}

/// Which language model a parameter or cache belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LmKind {
    Selm,
    Arlm,
}

impl LmKind {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Selm => "selm",
            Self::Arlm => "arlm",
        }
    }

    pub fn layers(self, cfg: &ModelConfig) -> usize {
        match self {
            Self::Selm => cfg.selm_layers,
            Self::Arlm => cfg.arlm_layers,
        }
    }
}
