//! Interception points inside every self-attention layer.
//!
//! For a batch half at one step and layer the denoiser calls, in order:
//!
//! 1. [`AttentionHook::before_projection`] on the normalized inputs `z`
//! 2. [`AttentionHook::modify_components`] on the projected `Q, K, V`
//! 3. [`AttentionHook::extend_components`] once per image, which may return
//!    a longer key/value dictionary for that image
//! 4. [`AttentionHook::after_attention`] on the attention outputs `h`,
//!    before the output projection
//!
//! Every method defaults to a no-op, so an empty implementation leaves the
//! forward pass bitwise unchanged.

use super::config::LayerId;
use crate::error::Result;
use crate::tensor::Matrix;

/// Where in the sampling run a hook is being called.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HookSite {
    pub step: usize,
    pub total_steps: usize,
    pub layer: LayerId,
    /// Text-conditioned half of the guidance batch.
    pub guided: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageQkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub trait AttentionHook {
    fn before_projection(&mut self, _site: &HookSite, _latents: &mut [Matrix]) -> Result<()> {
        Ok(())
    }

    fn modify_components(&mut self, _site: &HookSite, _qkv: &mut [ImageQkv]) -> Result<()> {
        Ok(())
    }

    /// Returns `(K_ext, V_ext)` for `image`, or `None` to attend over its
    /// own keys and values.
    fn extend_components(
        &mut self,
        _site: &HookSite,
        _qkv: &[ImageQkv],
        _image: usize,
    ) -> Result<Option<(Matrix, Matrix)>> {
        Ok(None)
    }

    fn after_attention(&mut self, _site: &HookSite, _hidden: &mut [Matrix]) -> Result<()> {
        Ok(())
    }
}

/// Installs nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHook;

impl AttentionHook for NoHook {}

/// Runs hooks in order. The first hook returning an extended dictionary
/// wins; later hooks are not asked.
pub struct HookChain<'a> {
    hooks: Vec<&'a mut dyn AttentionHook>,
}

impl<'a> HookChain<'a> {
    pub fn new(hooks: Vec<&'a mut dyn AttentionHook>) -> Self {
        Self { hooks }
    }
}

impl AttentionHook for HookChain<'_> {
    fn before_projection(&mut self, site: &HookSite, latents: &mut [Matrix]) -> Result<()> {
        self.hooks
            .iter_mut()
            .try_for_each(|h| h.before_projection(site, latents))
    }

    fn modify_components(&mut self, site: &HookSite, qkv: &mut [ImageQkv]) -> Result<()> {
        self.hooks.iter_mut().try_for_each(|h| h.modify_components(site, qkv))
    }

    fn extend_components(
        &mut self,
        site: &HookSite,
        qkv: &[ImageQkv],
        image: usize,
    ) -> Result<Option<(Matrix, Matrix)>> {
        for h in &mut self.hooks {
            if let Some(ext) = h.extend_components(site, qkv, image)? {
                return Ok(Some(ext));
            }
        }
        Ok(None)
    }

    fn after_attention(&mut self, site: &HookSite, hidden: &mut [Matrix]) -> Result<()> {
        self.hooks.iter_mut().try_for_each(|h| h.after_attention(site, hidden))
    }
}

/// Adds `sigmas × σ(V)` per channel to one image's values at every
/// high-resolution layer, emulating a batch member with strongly biased
/// colour statistics.
#[derive(Clone, Copy, Debug)]
pub struct ValueShift {
    pub image: usize,
    pub sigmas: f32,
}

impl AttentionHook for ValueShift {
    fn modify_components(&mut self, site: &HookSite, qkv: &mut [ImageQkv]) -> Result<()> {
        if !site.layer.high_res || self.sigmas == 0.0 {
            return Ok(());
        }
        let Some(target) = qkv.get_mut(self.image) else {
            return Ok(());
        };
        let stats = crate::tensor::channel_stats(&target.v)?;
        for r in 0..target.v.rows() {
            for (x, &s) in target.v.row_mut(r).iter_mut().zip(&stats.std) {
                *x += self.sigmas * s;
            }
        }
        Ok(())
    }
}
