use std::collections::BTreeMap;

use super::{component_update, extension, hidden_update, latent_update, InterventionContext, Scheme, SchemeSpec};
use crate::correspondence::{CorrespondenceMap, SubjectMask};
use crate::diffusion::{AttentionHook, HookSite, ImageQkv, LayerId};
use crate::error::Result;
use crate::pipeline::ValueStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InjectionKind {
    Queries,
    Keys,
    Values,
}

/// One anchor-query/key or replayed-value injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InjectionEvent {
    pub step: usize,
    pub layer: LayerId,
    pub image: usize,
    pub guided: bool,
    pub kind: InjectionKind,
}

/// Runs a [`SchemeSpec`] inside the denoiser.
pub struct SchemeHook<'a> {
    spec: &'a SchemeSpec,
    masks: &'a [SubjectMask],
    maps: &'a BTreeMap<usize, CorrespondenceMap>,
    store: Option<&'a ValueStore>,
    events: Vec<InjectionEvent>,
}

impl<'a> SchemeHook<'a> {
    pub fn new(
        spec: &'a SchemeSpec,
        masks: &'a [SubjectMask],
        maps: &'a BTreeMap<usize, CorrespondenceMap>,
        store: Option<&'a ValueStore>,
    ) -> Self {
        Self {
            spec,
            masks,
            maps,
            store,
            events: Vec::new(),
        }
    }

    pub fn events(&self) -> &[InjectionEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<InjectionEvent> {
        self.events
    }

    fn ctx(&self, site: &HookSite) -> InterventionContext<'a> {
        InterventionContext {
            site: *site,
            spec: self.spec,
            masks: self.masks,
            maps: self.maps,
            store: self.store,
        }
    }

    fn idle(&self, site: &HookSite) -> bool {
        self.spec.scheme == Scheme::Vanilla || !site.layer.high_res
    }
}

impl AttentionHook for SchemeHook<'_> {
    fn before_projection(&mut self, site: &HookSite, latents: &mut [Matrix]) -> Result<()> {
        if self.spec.scheme != Scheme::CrossImage || !site.layer.high_res {
            return Ok(());
        }
        let ctx = self.ctx(site);
        let updates = (0..latents.len())
            .map(|i| latent_update(latents, &ctx, i))
            .collect::<Result<Vec<_>>>()?;
        for (slot, update) in latents.iter_mut().zip(updates) {
            if let Some(z) = update {
                *slot = z;
            }
        }
        Ok(())
    }

    fn modify_components(&mut self, site: &HookSite, qkv: &mut [ImageQkv]) -> Result<()> {
        if self.idle(site) || self.spec.scheme == Scheme::Consistory {
            return Ok(());
        }
        let ctx = self.ctx(site);
        if self.spec.scheme == Scheme::ConsiStyle && !ctx.qk_active() && !ctx.vsd_active() {
            return Ok(());
        }
        let snapshot = qkv.to_vec();
        let mut kinds = Vec::new();
        for (i, slot) in qkv.iter_mut().enumerate() {
            kinds.clear();
            if let Some(update) = component_update(&snapshot, &ctx, i, &mut kinds)? {
                *slot = update;
            }
            self.events.extend(kinds.iter().map(|&kind| InjectionEvent {
                step: site.step,
                layer: site.layer,
                image: i,
                guided: site.guided,
                kind,
            }));
        }
        Ok(())
    }

    fn extend_components(
        &mut self,
        site: &HookSite,
        qkv: &[ImageQkv],
        image: usize,
    ) -> Result<Option<(Matrix, Matrix)>> {
        if self.idle(site) {
            return Ok(None);
        }
        extension(qkv, &self.ctx(site), image)
    }

    fn after_attention(&mut self, site: &HookSite, hidden: &mut [Matrix]) -> Result<()> {
        if self.spec.scheme != Scheme::Consistory || !site.layer.high_res {
            return Ok(());
        }
        let ctx = self.ctx(site);
        let updates = (0..hidden.len())
            .map(|i| hidden_update(hidden, &ctx, i))
            .collect::<Result<Vec<_>>>()?;
        for (slot, update) in hidden.iter_mut().zip(updates) {
            if let Some(h) = update {
                *slot = h;
            }
        }
        Ok(())
    }
}
