use crate::error::{Result, StellarError};

/// Hidden width of every MLP relative to its block width.
pub const MLP_RATIO: usize = 4;

/// Input channels; every loader produces RGB.
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub r: usize,
    pub projector_dim: usize,
    pub k_sparse: usize,
    pub k_cls: usize,
    pub tau_spatial: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            width: 128,
            depth: 6,
            heads: 4,
            r: 16,
            projector_dim: 64,
            k_sparse: 256,
            k_cls: 256,
            tau_spatial: 0.06,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count `n`.
    pub fn n(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per flattened patch.
    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(StellarError::invalid(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.r == 0 {
            return fail("r must be at least 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} must be divisible by heads {}", self.width, self.heads));
        }
        if self.projector_dim == 0 || self.k_sparse == 0 || self.k_cls == 0 {
            return fail("projector_dim, k_sparse and k_cls must be positive".into());
        }
        if !(self.tau_spatial > 0.0 && self.tau_spatial.is_finite()) {
            return fail(format!("tau_spatial must be positive, got {}", self.tau_spatial));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 6,
            heads: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(StellarError::invalid(format!(
                "decoder width {} must be divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.encoder.n(), 64);
        assert_eq!(c.encoder.patch_dim(), 48);
        assert_eq!(c.decoder.depth, 6);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = EncoderConfig {
            image_size: 30,
            ..EncoderConfig::default()
        };
        assert!(c.validate().is_err());
        c.image_size = 32;
        c.r = 0;
        assert!(c.validate().is_err());
        c.r = 4;
        c.tau_spatial = 0.0;
        assert!(c.validate().is_err());
        c.tau_spatial = 0.06;
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
