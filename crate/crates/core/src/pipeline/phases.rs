use std::collections::BTreeMap;

use super::config::RunConfig;
use super::store::ValueStore;
use crate::correspondence::{
    aggregate_attention, build_correspondence, extract_subject_mask, AnchorView, CorrespondenceMap, SubjectMask,
};
use crate::diffusion::{
    embed_prompt, embedding_seed, sample, AttentionHook, CaptureLog, CapturePlan, Denoiser, HookChain, LayerId, NoHook,
    PromptEmbedding, SampleOutput, TensorKind, ValueShift,
};
use crate::error::{Error, Result};
use crate::schemes::{InjectionEvent, Scheme, SchemeHook, SchemeOptions, SchemeSpec};
use crate::tensor::Matrix;

/// A validated configuration with its model and prompt embeddings built.
pub struct Session {
    config: RunConfig,
    model: Denoiser,
    prompts: Vec<PromptEmbedding>,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Denoiser::new(config.model.clone())?;
        let seed = embedding_seed(config.model.weight_seed);
        let prompts = config
            .prompt_tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| embed_prompt(t, config.subject_position(i), config.model.embed_dim, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, model, prompts })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    fn sample(&self, hook: &mut dyn AttentionHook, plan: &CapturePlan) -> Result<SampleOutput> {
        let settings = self.config.sampler_settings();
        if self.config.v_shift_sigma == 0.0 {
            return sample(&self.model, &self.prompts, settings, hook, plan);
        }
        let mut shift = ValueShift {
            image: self.config.v_shift_image,
            sigmas: self.config.v_shift_sigma,
        };
        let mut chain = HookChain::new(vec![&mut shift, hook]);
        sample(&self.model, &self.prompts, settings, &mut chain, plan)
    }

    fn grid(&self) -> (usize, usize) {
        self.config.model.grid
    }
}

fn final_hidden(log: &CaptureLog, steps: usize) -> Vec<Matrix> {
    log.images_at(TensorKind::Hidden, steps - 1)
}

#[derive(Clone, Debug)]
pub struct Phase1Output {
    pub store: ValueStore,
    pub latents: Vec<Matrix>,
    /// Final-step decoder output per image; the style reference.
    pub reference: Vec<Matrix>,
}

/// Vanilla sampling that records values in the replay window.
pub fn phase1_vanilla(session: &Session) -> Result<Phase1Output> {
    run_phase1(session).map_err(|e| e.in_phase("phase1"))
}

fn run_phase1(session: &Session) -> Result<Phase1Output> {
    let cfg = session.config();
    let window = cfg.options.vsd_steps(cfg.steps);
    let plan = CapturePlan {
        values: Some((ValueStore::layer(), window.steps())),
        final_hidden: true,
        ..CapturePlan::default()
    };
    let out = session.sample(&mut NoHook, &plan)?;
    let mut store = ValueStore::new(cfg.steps, window, cfg.batch_size);
    for rec in out.log.records.iter().filter(|r| r.kind == TensorKind::Values) {
        store.insert(rec.step, rec.layer, rec.image, rec.tensor.clone())?;
    }
    Ok(Phase1Output {
        store,
        reference: final_hidden(&out.log, cfg.steps),
        latents: out.latents,
    })
}

#[derive(Clone, Debug)]
pub struct Phase2Output {
    pub masks: Vec<SubjectMask>,
    /// One per non-anchor image, in image order.
    pub maps: Vec<CorrespondenceMap>,
    /// Decoder features per image at the correspondence step.
    pub features: Vec<Matrix>,
    /// Subject attention per image, averaged over the query/key window.
    pub attention: Vec<Vec<f32>>,
}

/// Crossing-only sampling with full-image masks, from which subject masks
/// and correspondences are derived. Never reads the value store.
pub fn phase2_correspondence(session: &Session) -> Result<Phase2Output> {
    run_phase2(session).map_err(|e| e.in_phase("phase2"))
}

fn run_phase2(session: &Session) -> Result<Phase2Output> {
    let cfg = session.config();
    let grid = session.grid();
    let batch = cfg.batch_size;
    let spec = SchemeSpec::new(
        Scheme::ConsiStyle,
        cfg.anchors.clone(),
        SchemeOptions::crossing_only(true),
    );
    let full: Vec<SubjectMask> = (0..batch).map(|b| SubjectMask::full(b, grid)).collect();
    let no_maps = BTreeMap::new();
    let qk_window = cfg.options.qk_steps(cfg.steps);
    let map_steps = if qk_window.is_empty() {
        0..cfg.steps
    } else {
        qk_window.steps()
    };
    // Nothing after the last captured step reaches the outputs.
    let plan = CapturePlan {
        decoder_features_step: Some(cfg.feature_step()),
        subject_maps: Some(map_steps.clone()),
        stop_after: Some(map_steps.end.max(cfg.feature_step() + 1)),
        ..CapturePlan::default()
    };
    let mut hook = SchemeHook::new(&spec, &full, &no_maps, None);
    let out = session.sample(&mut hook, &plan)?;

    let mut attention = Vec::with_capacity(batch);
    let mut masks = Vec::with_capacity(batch);
    for b in 0..batch {
        let per_step: Vec<&[f32]> = out
            .log
            .of_kind(TensorKind::SubjectMap)
            .filter(|r| r.image == b)
            .map(|r| r.tensor.data())
            .collect();
        let agg = aggregate_attention(&per_step)?;
        let mask = extract_subject_mask(b, &agg, grid, cfg.tau)?;
        if mask.is_empty() {
            return Err(Error::EmptySubjectMask {
                image: b,
                max_weight: agg.iter().copied().fold(0.0, f32::max),
            });
        }
        masks.push(mask);
        attention.push(agg);
    }

    let features = out.log.images_at(TensorKind::DecoderFeatures, cfg.feature_step());
    let anchors: Vec<AnchorView<'_>> = cfg
        .anchors
        .iter()
        .map(|&a| AnchorView {
            index: a,
            features: &features[a],
            mask: &masks[a],
        })
        .collect();
    let maps = (0..batch)
        .filter(|b| !cfg.anchors.contains(b))
        .map(|b| build_correspondence(&features[b], &masks[b], &anchors, cfg.search))
        .collect::<Result<Vec<_>>>()?;
    Ok(Phase2Output {
        masks,
        maps,
        features,
        attention,
    })
}

#[derive(Clone, Debug)]
pub struct Phase3Output {
    pub latents: Vec<Matrix>,
    pub hidden: Vec<Matrix>,
    pub events: Vec<InjectionEvent>,
    /// Values entering attention at the replay layer inside the replay
    /// window, when instrumentation was requested.
    pub values: CaptureLog,
}

/// Full sampling under the configured scheme.
pub fn phase3_final(
    session: &Session,
    store: &ValueStore,
    masks: &[SubjectMask],
    maps: &[CorrespondenceMap],
    instrument: bool,
) -> Result<Phase3Output> {
    run_phase3(session, store, masks, maps, instrument).map_err(|e| e.in_phase("phase3"))
}

fn run_phase3(
    session: &Session,
    store: &ValueStore,
    masks: &[SubjectMask],
    maps: &[CorrespondenceMap],
    instrument: bool,
) -> Result<Phase3Output> {
    let cfg = session.config();
    let window = cfg.options.vsd_steps(cfg.steps);
    if store.total_steps() != cfg.steps || store.window() != window || store.batch() != cfg.batch_size {
        return Err(Error::Precondition(format!(
            "value store was recorded for {} steps, window {}, batch {}; this run needs {} steps, window {}, batch {}",
            store.total_steps(),
            store.window(),
            store.batch(),
            cfg.steps,
            window,
            cfg.batch_size
        )));
    }
    if masks.len() != cfg.batch_size {
        return Err(Error::Precondition(format!(
            "{} subject masks for a batch of {}",
            masks.len(),
            cfg.batch_size
        )));
    }
    let spec = cfg.spec();
    let maps: BTreeMap<usize, CorrespondenceMap> = maps.iter().map(|m| (m.image_index, m.clone())).collect();
    let plan = CapturePlan {
        values: instrument.then(|| (LayerId::DECODER, window.steps())),
        final_hidden: true,
        ..CapturePlan::default()
    };
    let mut hook = SchemeHook::new(&spec, masks, &maps, Some(store));
    let out = session.sample(&mut hook, &plan)?;
    let events = hook.into_events();
    let hidden = final_hidden(&out.log, cfg.steps);
    let mut values = out.log;
    values.records.retain(|r| r.kind == TensorKind::Values);
    Ok(Phase3Output {
        latents: out.latents,
        hidden,
        events,
        values,
    })
}
