use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DenoiserConfig, LayerId};
use super::hooks::{AttentionHook, HookSite, ImageQkv};
use super::nn::{avg_pool2, gelu, layer_norm, silu, sinusoidal, upsample2, Conv3x3, Linear};
use super::prompt::PromptEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{multi_head_attention, softmax_rows, Matrix};

/// Gain on residual-branch output projections.
const RESIDUAL_GAIN: f32 = 0.5;

/// Gain on prompt-key projections; sharpens prompt attention so subject
/// tokens claim a region of the grid rather than all of it.
pub(crate) const CROSS_KEY_GAIN: f32 = 4.0;

struct TransformerBlock {
    layer: LayerId,
    heads: usize,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_out: Linear,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

impl TransformerBlock {
    fn new(rng: &mut ChaCha8Rng, layer: LayerId, width: usize, embed_dim: usize, heads: usize) -> Self {
        Self {
            layer,
            heads,
            self_q: Linear::he(rng, width, width, 1.0),
            self_k: Linear::he(rng, width, width, 1.0),
            self_v: Linear::he(rng, width, width, 1.0),
            self_out: Linear::he(rng, width, width, RESIDUAL_GAIN),
            cross_q: Linear::he(rng, width, width, 1.0),
            cross_k: Linear::he(rng, embed_dim, width, CROSS_KEY_GAIN),
            cross_v: Linear::he(rng, embed_dim, width, 1.0),
            cross_out: Linear::he(rng, width, width, RESIDUAL_GAIN),
            mlp_in: Linear::he(rng, width, 2 * width, 1.0),
            mlp_out: Linear::he(rng, 2 * width, width, RESIDUAL_GAIN),
        }
    }
}

/// What one forward pass should hand back besides the noise prediction.
#[derive(Clone, Copy, Debug, Default)]
pub struct TapRequest {
    /// Self-attention values after `modify_components`, at this layer.
    pub values: Option<LayerId>,
    /// Decoder features at full resolution, before the decoder block.
    pub decoder_features: bool,
    /// Output of the highest-resolution decoder block.
    pub hidden: bool,
    /// Subject-token cross-attention map at the decoder block.
    pub subject_maps: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Taps {
    pub values: Option<Vec<Matrix>>,
    pub decoder_features: Option<Vec<Matrix>>,
    pub hidden: Option<Vec<Matrix>>,
    pub subject_maps: Option<Vec<Vec<f32>>>,
}

/// Noise prediction and requested intermediates for a batch half.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub eps: Vec<Matrix>,
    pub taps: Taps,
}

/// Step-level context of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardCtx {
    pub step: usize,
    pub total_steps: usize,
    pub sigma: f32,
    pub guided: bool,
}

/// UNet-shaped toy denoiser: a full-resolution encoder block, a
/// half-resolution middle block, and a full-resolution decoder block with a
/// skip connection.
pub struct Denoiser {
    config: DenoiserConfig,
    conv_in: Conv3x3,
    time_proj: Linear,
    encoder: TransformerBlock,
    down: Linear,
    middle: TransformerBlock,
    up: Linear,
    decoder: TransformerBlock,
    out: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let [hi, lo] = config.channels;
        let (e, heads) = (config.embed_dim, config.heads);
        Ok(Self {
            conv_in: Conv3x3::he(&mut rng, config.latent_channels, hi),
            time_proj: Linear::he(&mut rng, hi, hi, 1.0),
            encoder: TransformerBlock::new(&mut rng, LayerId::ENCODER, hi, e, heads),
            down: Linear::he(&mut rng, hi, lo, 1.0),
            middle: TransformerBlock::new(&mut rng, LayerId::MIDDLE, lo, e, heads),
            up: Linear::he(&mut rng, lo, hi, 1.0),
            decoder: TransformerBlock::new(&mut rng, LayerId::DECODER, hi, e, heads),
            out: Linear::he(&mut rng, hi, config.latent_channels, 1.0),
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Predicts noise for every image of one guidance half.
    pub fn forward(
        &self,
        latents: &[Matrix],
        embeddings: &[&PromptEmbedding],
        ctx: ForwardCtx,
        hook: &mut dyn AttentionHook,
        request: TapRequest,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if embeddings.len() != latents.len() {
            return Err(Error::ShapeMismatch {
                op: "Denoiser::forward",
                lhs: vec![latents.len()],
                rhs: vec![embeddings.len()],
            });
        }
        for z in latents {
            if z.shape() != [cfg.patches(), cfg.latent_channels] {
                return Err(Error::ShapeMismatch {
                    op: "Denoiser::forward",
                    lhs: vec![cfg.patches(), cfg.latent_channels],
                    rhs: z.shape().to_vec(),
                });
            }
        }
        let mut taps = Taps::default();
        let c_in = 1.0 / (ctx.sigma * ctx.sigma + 1.0).sqrt();
        let temb: Vec<f32> = self
            .time_proj
            .forward_vec(&sinusoidal(ctx.sigma.ln() / 4.0, cfg.channels[0]))
            .into_iter()
            .map(silu)
            .collect();

        let mut x: Vec<Matrix> = latents
            .iter()
            .map(|z| {
                let mut h = self.conv_in.forward(&z.scale(c_in), cfg.grid);
                for r in 0..h.rows() {
                    for (v, &t) in h.row_mut(r).iter_mut().zip(&temb) {
                        *v += t;
                    }
                }
                h
            })
            .collect();

        self.block(&self.encoder, &mut x, embeddings, ctx, hook, request, &mut taps)?;
        let skip = x.clone();

        let mut low: Vec<Matrix> = x.iter().map(|h| self.down.forward(&avg_pool2(h, cfg.grid))).collect();
        self.block(&self.middle, &mut low, embeddings, ctx, hook, request, &mut taps)?;

        let mut x: Vec<Matrix> = low
            .iter()
            .zip(&skip)
            .map(|(l, s)| {
                self.up
                    .forward(&upsample2(l, cfg.low_grid()))
                    .add(s)
                    .expect("skip shapes agree")
            })
            .collect();
        if request.decoder_features {
            taps.decoder_features = Some(x.clone());
        }

        self.block(&self.decoder, &mut x, embeddings, ctx, hook, request, &mut taps)?;
        if request.hidden {
            taps.hidden = Some(x.clone());
        }

        let eps = x.iter().map(|h| self.out.forward(&layer_norm(h))).collect();
        Ok(ForwardOutput { eps, taps })
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        block: &TransformerBlock,
        x: &mut [Matrix],
        embeddings: &[&PromptEmbedding],
        ctx: ForwardCtx,
        hook: &mut dyn AttentionHook,
        request: TapRequest,
        taps: &mut Taps,
    ) -> Result<()> {
        let site = HookSite {
            step: ctx.step,
            total_steps: ctx.total_steps,
            layer: block.layer,
            guided: ctx.guided,
        };
        let wrap = |e: Error| Error::Hook {
            step: ctx.step,
            layer: block.layer.to_string(),
            source: Box::new(e),
        };

        // self-attention
        let mut latents: Vec<Matrix> = x.iter().map(layer_norm).collect();
        hook.before_projection(&site, &mut latents).map_err(wrap)?;
        let mut qkv: Vec<ImageQkv> = latents
            .iter()
            .map(|z| ImageQkv {
                q: block.self_q.forward(z),
                k: block.self_k.forward(z),
                v: block.self_v.forward(z),
            })
            .collect();
        hook.modify_components(&site, &mut qkv).map_err(wrap)?;
        if request.values == Some(block.layer) {
            taps.values = Some(qkv.iter().map(|c| c.v.clone()).collect());
        }
        let mut hidden = Vec::with_capacity(qkv.len());
        for i in 0..qkv.len() {
            let extended = hook.extend_components(&site, &qkv, i).map_err(wrap)?;
            let (k, v) = match &extended {
                Some((k, v)) => (k, v),
                None => (&qkv[i].k, &qkv[i].v),
            };
            hidden.push(multi_head_attention(&qkv[i].q, k, v, block.heads).map_err(wrap)?);
        }
        hook.after_attention(&site, &mut hidden).map_err(wrap)?;
        for (xi, h) in x.iter_mut().zip(&hidden) {
            *xi = xi.add(&block.self_out.forward(h))?;
        }

        // cross-attention over the prompt tokens
        let capture_maps = request.subject_maps && block.layer == LayerId::DECODER;
        let mut maps = Vec::new();
        for (xi, emb) in x.iter_mut().zip(embeddings) {
            let q = block.cross_q.forward(&layer_norm(xi));
            let k = block.cross_k.forward(&emb.vectors);
            let v = block.cross_v.forward(&emb.vectors);
            let attended = multi_head_attention(&q, &k, &v, block.heads)?;
            if capture_maps {
                maps.push(subject_map(&q, &k, block.heads, emb.subject_token_pos)?);
            }
            *xi = xi.add(&block.cross_out.forward(&attended))?;
        }
        if capture_maps {
            taps.subject_maps = Some(maps);
        }

        // feed-forward
        for xi in x.iter_mut() {
            let inner = block.mlp_in.forward(&layer_norm(xi)).map(gelu);
            *xi = xi.add(&block.mlp_out.forward(&inner))?;
        }
        Ok(())
    }
}

/// Head-averaged attention weight of every patch on one prompt token.
fn subject_map(q: &Matrix, k: &Matrix, heads: usize, token: usize) -> Result<Vec<f32>> {
    let head_dim = q.cols() / heads;
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut acc = vec![0.0f32; q.rows()];
    for h in 0..heads {
        let (c0, c1) = (h * head_dim, (h + 1) * head_dim);
        let logits = q
            .column_block(c0, c1)
            .matmul(&k.column_block(c0, c1).transpose())?
            .scale(scale);
        let probs = softmax_rows(&logits)?;
        for (a, p) in acc.iter_mut().enumerate() {
            *p += probs.get(a, token);
        }
    }
    Ok(acc.into_iter().map(|v| v / heads as f32).collect())
}
