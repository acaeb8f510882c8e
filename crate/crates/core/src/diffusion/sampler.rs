use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DenoiserConfig, LayerId};
use super::hooks::AttentionHook;
use super::model::{Denoiser, ForwardCtx, TapRequest};
use super::prompt::{splitmix64, unconditional, PromptEmbedding};
use super::scheduler::SchedulerState;
use crate::error::{Error, Result};
use crate::tensor::{FeatureTensor, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance_scale: f32,
    pub seed: u64,
}

/// Seed of the text-embedding table, derived from the weight seed.
pub fn embedding_seed(weight_seed: u64) -> u64 {
    splitmix64(weight_seed ^ 0x7465_7874_5f65_6d62)
}

/// Which intermediates [`sample`] records.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CapturePlan {
    /// Self-attention values at one layer, both guidance halves.
    pub values: Option<(LayerId, Range<usize>)>,
    /// Decoder features of the guided half at one step.
    pub decoder_features_step: Option<usize>,
    /// Subject cross-attention maps of the guided half.
    pub subject_maps: Option<Range<usize>>,
    /// Decoder-block output of the guided half at the last step.
    pub final_hidden: bool,
    /// Stop after this many steps; the returned latents are then only
    /// partially denoised. For callers that need early captures alone.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorKind {
    /// Batch of two: `[unguided, guided]`.
    Values,
    DecoderFeatures,
    SubjectMap,
    Hidden,
}

impl TensorKind {
    pub fn name(self) -> &'static str {
        match self {
            TensorKind::Values => "values",
            TensorKind::DecoderFeatures => "features",
            TensorKind::SubjectMap => "subject-map",
            TensorKind::Hidden => "hidden",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureRecord {
    pub step: usize,
    pub layer: LayerId,
    pub image: usize,
    pub kind: TensorKind,
    pub tensor: FeatureTensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CaptureLog {
    pub records: Vec<CaptureRecord>,
}

impl CaptureLog {
    pub fn of_kind(&self, kind: TensorKind) -> impl Iterator<Item = &CaptureRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Per-image tensors of one kind at one step, ordered by image.
    pub fn images_at(&self, kind: TensorKind, step: usize) -> Vec<Matrix> {
        let mut recs: Vec<_> = self.of_kind(kind).filter(|r| r.step == step).collect();
        recs.sort_by_key(|r| r.image);
        recs.into_iter().map(|r| r.tensor.image(0)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub latents: Vec<Matrix>,
    pub log: CaptureLog,
}

/// `uncond + scale · (cond − uncond)`.
pub fn cfg_combine(uncond: &Matrix, cond: &Matrix, scale: f32) -> Result<Matrix> {
    uncond.zip_with(cond, "cfg_combine", |u, c| u + scale * (c - u))
}

/// Starting noise for image `b`; independent of the batch size.
pub fn initial_latent(config: &DenoiserConfig, sigma: f32, seed: u64, b: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(b as u64 + 1)));
    let n = config.patches() * config.latent_channels;
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect();
    Matrix::new(config.patches(), config.latent_channels, data).expect("sized")
}

/// Deterministic (η = 0) sampling loop with classifier-free guidance.
///
/// Step `s` runs from 0 (noisiest) to `n − 1`. Each step evaluates the
/// unguided half, then the guided half, then moves every latent along the
/// guided noise estimate to the next noise level.
pub fn sample(
    model: &Denoiser,
    prompts: &[PromptEmbedding],
    settings: SamplerSettings,
    hook: &mut dyn AttentionHook,
    plan: &CapturePlan,
) -> Result<SampleOutput> {
    if prompts.is_empty() {
        return Err(Error::Precondition("sampling needs at least one prompt".into()));
    }
    let cfg = model.config();
    let schedule = SchedulerState::linear(settings.steps)?;
    let n = settings.steps;
    let grid = cfg.grid;
    let uncond = unconditional(cfg.embed_dim, embedding_seed(cfg.weight_seed));
    let uncond_refs: Vec<&PromptEmbedding> = prompts.iter().map(|_| &uncond).collect();
    let cond_refs: Vec<&PromptEmbedding> = prompts.iter().collect();

    let mut latents: Vec<Matrix> = (0..prompts.len())
        .map(|b| initial_latent(cfg, schedule.sigma(0), settings.seed, b))
        .collect();
    let mut log = CaptureLog::default();

    for step in 0..plan.stop_after.map_or(n, |k| k.min(n)) {
        let sigma = schedule.sigma(step);
        let values_layer = plan
            .values
            .as_ref()
            .filter(|(_, range)| range.contains(&step))
            .map(|(layer, _)| *layer);
        let guided_request = TapRequest {
            values: values_layer,
            decoder_features: plan.decoder_features_step == Some(step),
            hidden: plan.final_hidden && step == n - 1,
            subject_maps: plan.subject_maps.as_ref().is_some_and(|r| r.contains(&step)),
        };
        let unguided_request = TapRequest {
            values: values_layer,
            ..TapRequest::default()
        };

        let ctx = |guided| ForwardCtx {
            step,
            total_steps: n,
            sigma,
            guided,
        };
        let unguided = model.forward(&latents, &uncond_refs, ctx(false), hook, unguided_request)?;
        let guided = model.forward(&latents, &cond_refs, ctx(true), hook, guided_request)?;

        if let (Some(layer), Some(u), Some(g)) = (values_layer, &unguided.taps.values, &guided.taps.values) {
            for (image, (uv, gv)) in u.iter().zip(g).enumerate() {
                log.records.push(CaptureRecord {
                    step,
                    layer,
                    image,
                    kind: TensorKind::Values,
                    tensor: FeatureTensor::from_images(grid, &[uv.clone(), gv.clone()])?,
                });
            }
        }
        let singles = [
            (TensorKind::DecoderFeatures, &guided.taps.decoder_features),
            (TensorKind::Hidden, &guided.taps.hidden),
        ];
        for (kind, tap) in singles {
            if let Some(mats) = tap {
                for (image, m) in mats.iter().enumerate() {
                    log.records.push(CaptureRecord {
                        step,
                        layer: LayerId::DECODER,
                        image,
                        kind,
                        tensor: FeatureTensor::from_images(grid, std::slice::from_ref(m))?,
                    });
                }
            }
        }
        if let Some(maps) = &guided.taps.subject_maps {
            for (image, map) in maps.iter().enumerate() {
                log.records.push(CaptureRecord {
                    step,
                    layer: LayerId::DECODER,
                    image,
                    kind: TensorKind::SubjectMap,
                    tensor: FeatureTensor::new(1, grid, 1, map.clone())?,
                });
            }
        }

        let delta = schedule.next_sigma(step) - sigma;
        for (z, (u, c)) in latents.iter_mut().zip(unguided.eps.iter().zip(&guided.eps)) {
            let eps = cfg_combine(u, c, settings.guidance_scale)?;
            *z = z.zip_with(&eps, "sampler update", |x, e| x + delta * e)?;
            if let Some(row) = z.first_non_finite_row() {
                return Err(Error::NonFinite { op: "sample", row });
            }
        }
    }
    Ok(SampleOutput { latents, log })
}
