//! Training-free self-attention interventions for a batch of images that
//! should share one style while keeping their subjects consistent.
//!
//! Each scheme is expressed as up to four per-image updates, one per hook
//! stage of the denoiser (see [`crate::diffusion::hooks`]). The same stage
//! functions back both [`SchemeHook`], which runs inside sampling, and
//! [`apply_scheme`], which evaluates a scheme on a hand-built fixture.

mod hook;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

pub use hook::{InjectionEvent, InjectionKind, SchemeHook};

use crate::correspondence::{CorrespondenceMap, SubjectMask};
use crate::diffusion::{HookSite, ImageQkv};
use crate::error::{Error, Result};
use crate::pipeline::ValueStore;
use crate::tensor::{adain, concat_rows, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    /// No intervention.
    Vanilla,
    /// Subject-masked cross-image attention with AdaIN-matched values, plus
    /// query/key injection from the anchors and replay of vanilla values.
    ConsiStyle,
    /// Subject-masked cross-image attention with raw values, plus output
    /// feature injection from the anchor.
    Consistory,
    /// Every image attends with its own queries over the anchor's keys and
    /// values, with inputs AdaIN-matched to the anchor.
    CrossImage,
    /// AdaIN-matched queries and keys, attending over own plus anchor
    /// dictionaries.
    StyleAligned,
    /// Half the anchor's queries mixed into every image's queries; keys and
    /// values taken from the anchor.
    IlluSign,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Vanilla,
        Scheme::ConsiStyle,
        Scheme::Consistory,
        Scheme::CrossImage,
        Scheme::StyleAligned,
        Scheme::IlluSign,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Scheme::Vanilla => "vanilla",
            Scheme::ConsiStyle => "consistyle",
            Scheme::Consistory => "consistory",
            Scheme::CrossImage => "cross-image",
            Scheme::StyleAligned => "style-aligned",
            Scheme::IlluSign => "illusign",
        }
    }

    /// Needs subject masks and correspondence maps.
    pub fn uses_subjects(self) -> bool {
        matches!(self, Scheme::ConsiStyle | Scheme::Consistory)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|x| x.token() == s).ok_or_else(|| {
            let known: Vec<_> = Self::ALL.iter().map(|x| x.token()).collect();
            format!("unknown scheme `{s}` (expected one of {})", known.join(", "))
        })
    }
}

/// Which of `Q`, `K` are copied from the anchors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum QkInject {
    #[default]
    Both,
    KeysOnly,
    QueriesOnly,
    None,
}

impl QkInject {
    pub fn queries(self) -> bool {
        matches!(self, QkInject::Both | QkInject::QueriesOnly)
    }

    pub fn keys(self) -> bool {
        matches!(self, QkInject::Both | QkInject::KeysOnly)
    }

    pub fn token(self) -> &'static str {
        match self {
            QkInject::Both => "both",
            QkInject::KeysOnly => "keys",
            QkInject::QueriesOnly => "queries",
            QkInject::None => "none",
        }
    }
}

impl FromStr for QkInject {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            QkInject::Both,
            QkInject::KeysOnly,
            QkInject::QueriesOnly,
            QkInject::None,
        ]
        .into_iter()
        .find(|x| x.token() == s)
        .ok_or_else(|| format!("unknown injection mode `{s}` (expected both, keys, queries or none)"))
    }
}

/// Half-open range of step indices, step 0 being the noisiest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StepWindow {
    pub start: usize,
    pub end: usize,
}

impl StepWindow {
    /// `[⌈lo·n⌉, ⌈hi·n⌉)`, clamped to `n`. Products within `1e-9` of an
    /// integer count as that integer.
    pub fn from_fractions(lo: f64, hi: f64, n: usize) -> Self {
        let edge = |f: f64| ((f * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
        Self {
            start: edge(lo),
            end: edge(hi).max(edge(lo)),
        }
    }

    pub fn contains(&self, step: usize) -> bool {
        (self.start..self.end).contains(&step)
    }

    pub fn steps(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

impl fmt::Display for StepWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Component switches and timing of the ConsiStyle scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchemeOptions {
    pub qk: QkInject,
    pub vsd: bool,
    pub crossing: bool,
    /// Match imported values to the receiving image's statistics.
    pub adain: bool,
    pub qk_window: (f64, f64),
    pub vsd_window: (f64, f64),
    /// Inject queries and keys into the text-conditioned half only.
    pub qk_guided_only: bool,
    pub vsd_both_halves: bool,
    pub crossing_both_halves: bool,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        Self {
            qk: QkInject::Both,
            vsd: true,
            crossing: true,
            adain: true,
            qk_window: (0.1, 0.3),
            vsd_window: (0.1, 0.3),
            qk_guided_only: true,
            vsd_both_halves: true,
            crossing_both_halves: true,
        }
    }
}

impl SchemeOptions {
    pub fn qk_steps(&self, n: usize) -> StepWindow {
        StepWindow::from_fractions(self.qk_window.0, self.qk_window.1, n)
    }

    pub fn vsd_steps(&self, n: usize) -> StepWindow {
        StepWindow::from_fractions(self.vsd_window.0, self.vsd_window.1, n)
    }

    /// Crossing only, as used to bootstrap subject masks.
    pub fn crossing_only(adain: bool) -> Self {
        Self {
            qk: QkInject::None,
            vsd: false,
            crossing: true,
            adain,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeSpec {
    pub scheme: Scheme,
    /// Sorted, unique image indices.
    pub anchors: Vec<usize>,
    pub options: SchemeOptions,
}

impl SchemeSpec {
    pub fn new(scheme: Scheme, anchors: Vec<usize>, options: SchemeOptions) -> Self {
        let mut anchors = anchors;
        anchors.sort_unstable();
        anchors.dedup();
        Self {
            scheme,
            anchors,
            options,
        }
    }

    pub fn vanilla() -> Self {
        Self::new(Scheme::Vanilla, vec![0], SchemeOptions::default())
    }

    /// Anchor used by the single-anchor schemes.
    pub fn primary_anchor(&self) -> usize {
        self.anchors.first().copied().unwrap_or(0)
    }

    pub fn is_anchor(&self, image: usize) -> bool {
        self.anchors.binary_search(&image).is_ok()
    }

    pub fn validate(&self, batch: usize) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::config("anchors", "at least one anchor is required"));
        }
        if let Some(&a) = self.anchors.iter().find(|&&a| a >= batch) {
            return Err(Error::config(
                "anchors",
                format!("anchor {a} is outside the batch of {batch}"),
            ));
        }
        for (key, (lo, hi)) in [
            ("qk_window", self.options.qk_window),
            ("vsd_window", self.options.vsd_window),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(Error::config(key, format!("need 0 <= lo < hi <= 1, got {lo},{hi}")));
            }
        }
        Ok(())
    }
}

/// Everything a stage function may read besides the attention state.
#[derive(Clone, Copy, Debug)]
pub struct InterventionContext<'a> {
    pub site: HookSite,
    pub spec: &'a SchemeSpec,
    /// One mask per image, in image order.
    pub masks: &'a [SubjectMask],
    /// Keyed by target image; anchors normally have no entry.
    pub maps: &'a BTreeMap<usize, CorrespondenceMap>,
    pub store: Option<&'a ValueStore>,
}

impl InterventionContext<'_> {
    fn options(&self) -> &SchemeOptions {
        &self.spec.options
    }

    fn half_allowed(&self, both_halves: bool) -> bool {
        self.site.guided || both_halves
    }

    pub fn qk_active(&self) -> bool {
        let o = self.options();
        o.qk != QkInject::None
            && self.site.layer.is_highest_resolution_decoder()
            && o.qk_steps(self.site.total_steps).contains(self.site.step)
            && self.half_allowed(!o.qk_guided_only)
    }

    pub fn vsd_active(&self) -> bool {
        let o = self.options();
        o.vsd
            && self.site.layer.is_highest_resolution_decoder()
            && o.vsd_steps(self.site.total_steps).contains(self.site.step)
            && self.half_allowed(o.vsd_both_halves)
    }

    pub fn crossing_active(&self) -> bool {
        self.options().crossing && self.site.layer.high_res && self.half_allowed(self.options().crossing_both_halves)
    }
}

fn check_batch(what: &'static str, got: usize, batch: usize) -> Result<()> {
    if got != batch {
        return Err(Error::ShapeMismatch {
            op: what,
            lhs: vec![batch],
            rhs: vec![got],
        });
    }
    Ok(())
}

fn mask_of(masks: &[SubjectMask], image: usize, rows: usize) -> Result<&SubjectMask> {
    let mask = masks.get(image).ok_or_else(|| {
        Error::Precondition(format!(
            "no subject mask for image {image} ({} masks given)",
            masks.len()
        ))
    })?;
    if mask.patches() != rows {
        return Err(Error::ShapeMismatch {
            op: "subject mask",
            lhs: vec![rows],
            rhs: vec![mask.patches()],
        });
    }
    Ok(mask)
}

/// Map of image `i`, checked against its mask. `None` for an anchor without
/// a map.
fn map_of<'m>(ctx: &InterventionContext<'m>, i: usize, mask: &SubjectMask) -> Result<Option<&'m CorrespondenceMap>> {
    match ctx.maps.get(&i) {
        Some(map) if map.covers(mask) => Ok(Some(map)),
        Some(_) => Err(Error::Precondition(format!(
            "correspondence map of image {i} does not cover its subject mask"
        ))),
        None if ctx.spec.is_anchor(i) => Ok(None),
        None => Err(Error::MissingCorrespondence { image: i }),
    }
}

/// Copies anchor rows into `dst` along the correspondence.
fn copy_matched_rows<'s>(
    dst: &mut Matrix,
    map: &CorrespondenceMap,
    source: impl Fn(usize) -> Option<&'s Matrix>,
) -> Result<()> {
    for e in &map.entries {
        let src = source(e.anchor).ok_or_else(|| {
            Error::Precondition(format!("correspondence points at image {} outside the batch", e.anchor))
        })?;
        if e.anchor_patch >= src.rows() || e.patch >= dst.rows() {
            return Err(Error::MaskOutOfRange {
                image: e.anchor,
                index: e.anchor_patch.max(e.patch),
                patches: src.rows(),
            });
        }
        dst.row_mut(e.patch).copy_from_slice(src.row(e.anchor_patch));
    }
    Ok(())
}

/// Replaces the subject rows of `Q_i` and/or `K_i` with the corresponding
/// anchor rows from `components`, which must be the unmodified state.
///
/// Returns `None` when nothing changes: outside the injection window, at
/// other layers, in an excluded guidance half, for an empty mask, or for an
/// anchor without a map.
pub fn inject_qk(components: &[ImageQkv], ctx: &InterventionContext<'_>, i: usize) -> Result<Option<ImageQkv>> {
    if !ctx.qk_active() {
        return Ok(None);
    }
    let mask = mask_of(ctx.masks, i, components[i].q.rows())?;
    if mask.is_empty() {
        log::warn!("image {i} has an empty subject mask; skipping query/key injection");
        return Ok(None);
    }
    let Some(map) = map_of(ctx, i, mask)? else {
        return Ok(None);
    };
    let mode = ctx.options().qk;
    let mut out = components[i].clone();
    if mode.queries() {
        copy_matched_rows(&mut out.q, map, |a| components.get(a).map(|c| &c.q))?;
    }
    if mode.keys() {
        copy_matched_rows(&mut out.k, map, |a| components.get(a).map(|c| &c.k))?;
    }
    Ok(Some(out))
}

/// Replaces `V_i` with the vanilla-pass values recorded for the same step,
/// layer, image and guidance half.
pub fn inject_vsd(components: &[ImageQkv], ctx: &InterventionContext<'_>, i: usize) -> Result<Option<Matrix>> {
    if !ctx.vsd_active() {
        return Ok(None);
    }
    let site = ctx.site;
    let store = ctx
        .store
        .ok_or_else(|| Error::Precondition("value replay needs a value store".into()))?;
    let missing = || Error::MissingStoreEntry {
        step: site.step,
        layer: site.layer.to_string(),
        image: i,
    };
    let entry = store.get(site.step, site.layer, i).ok_or_else(missing)?;
    let v = entry.image(usize::from(site.guided));
    if v.shape() != components[i].v.shape() {
        return Err(Error::ShapeMismatch {
            op: "inject_vsd",
            lhs: components[i].v.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    Ok(Some(v))
}

/// Placement of the receiving image's own keys in an extended dictionary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DictionaryLayout {
    /// Own keys at their batch position; others' subject blocks around them.
    BatchOrder,
    /// Own keys first, then others' subject blocks in batch order.
    OwnFirst,
}

/// Extended keys and values for image `i`: its full `K_i, V_i` plus the
/// subject rows of every other image. Imported values are AdaIN-matched to
/// `V_i` when `match_values` is set. A batch of one yields `(K_i, V_i)`.
pub fn cross_attention_components(
    components: &[ImageQkv],
    masks: &[SubjectMask],
    i: usize,
    layout: DictionaryLayout,
    match_values: bool,
) -> Result<(Matrix, Matrix)> {
    check_batch("cross_attention_components", masks.len(), components.len())?;
    let own = &components[i];
    if components.len() == 1 {
        return Ok((own.k.clone(), own.v.clone()));
    }
    let mut imported: Vec<(usize, Matrix, Matrix)> = Vec::with_capacity(components.len() - 1);
    for (j, c) in components.iter().enumerate() {
        if j == i {
            continue;
        }
        let mask = mask_of(masks, j, c.k.rows())?;
        if mask.is_empty() {
            continue;
        }
        let k = c.k.select_rows(mask.indices())?;
        let mut v = c.v.select_rows(mask.indices())?;
        if match_values {
            v = adain(&v, &own.v)?;
        }
        imported.push((j, k, v));
    }
    let mut keys: Vec<&Matrix> = Vec::with_capacity(components.len());
    let mut values: Vec<&Matrix> = Vec::with_capacity(components.len());
    let own_position = match layout {
        DictionaryLayout::OwnFirst => 0,
        DictionaryLayout::BatchOrder => imported.iter().take_while(|(j, _, _)| *j < i).count(),
    };
    for (slot, (_, k, v)) in imported.iter().enumerate() {
        if slot == own_position {
            keys.push(&own.k);
            values.push(&own.v);
        }
        keys.push(k);
        values.push(v);
    }
    if own_position == imported.len() {
        keys.push(&own.k);
        values.push(&own.v);
    }
    Ok((concat_rows(&keys)?, concat_rows(&values)?))
}

/// Stage 1: update of the normalized self-attention input of image `i`.
pub fn latent_update(latents: &[Matrix], ctx: &InterventionContext<'_>, i: usize) -> Result<Option<Matrix>> {
    let a = ctx.spec.primary_anchor();
    match ctx.spec.scheme {
        Scheme::CrossImage if ctx.site.layer.high_res && i != a => {
            let anchor = latents
                .get(a)
                .ok_or_else(|| Error::Precondition(format!("anchor {a} outside the batch")))?;
            Ok(Some(adain(&latents[i], anchor)?))
        }
        _ => Ok(None),
    }
}

/// Stage 2: update of `Q_i, K_i, V_i`, reading other images from the
/// unmodified `snapshot`. Injections performed are appended to `events`.
pub fn component_update(
    snapshot: &[ImageQkv],
    ctx: &InterventionContext<'_>,
    i: usize,
    events: &mut Vec<InjectionKind>,
) -> Result<Option<ImageQkv>> {
    if !ctx.site.layer.high_res {
        return Ok(None);
    }
    let a = ctx.spec.primary_anchor();
    let anchor = || {
        snapshot
            .get(a)
            .ok_or_else(|| Error::Precondition(format!("anchor {a} outside the batch")))
    };
    let own = &snapshot[i];
    match ctx.spec.scheme {
        Scheme::Vanilla | Scheme::Consistory => Ok(None),
        Scheme::ConsiStyle => {
            let mut updated = inject_qk(snapshot, ctx, i)?;
            if updated.is_some() {
                let mode = ctx.options().qk;
                if mode.queries() {
                    events.push(InjectionKind::Queries);
                }
                if mode.keys() {
                    events.push(InjectionKind::Keys);
                }
            }
            if let Some(v) = inject_vsd(snapshot, ctx, i)? {
                updated.get_or_insert_with(|| own.clone()).v = v;
                events.push(InjectionKind::Values);
            }
            Ok(updated)
        }
        _ if i == a => Ok(None),
        Scheme::CrossImage => {
            let anchor = anchor()?;
            Ok(Some(ImageQkv {
                q: own.q.clone(),
                k: anchor.k.clone(),
                v: anchor.v.clone(),
            }))
        }
        Scheme::StyleAligned => {
            let anchor = anchor()?;
            Ok(Some(ImageQkv {
                q: adain(&own.q, &anchor.q)?,
                k: adain(&own.k, &anchor.k)?,
                v: own.v.clone(),
            }))
        }
        Scheme::IlluSign => {
            let anchor = anchor()?;
            Ok(Some(ImageQkv {
                q: own.q.zip_with(&anchor.q, "illusign queries", |x, y| x + 0.5 * y)?,
                k: anchor.k.clone(),
                v: anchor.v.clone(),
            }))
        }
    }
}

/// Stage 3: extended dictionary of image `i`, reading the modified state.
pub fn extension(components: &[ImageQkv], ctx: &InterventionContext<'_>, i: usize) -> Result<Option<(Matrix, Matrix)>> {
    if !ctx.site.layer.high_res {
        return Ok(None);
    }
    match ctx.spec.scheme {
        Scheme::ConsiStyle if ctx.crossing_active() => cross_attention_components(
            components,
            ctx.masks,
            i,
            DictionaryLayout::BatchOrder,
            ctx.options().adain,
        )
        .map(Some),
        Scheme::Consistory => {
            cross_attention_components(components, ctx.masks, i, DictionaryLayout::OwnFirst, false).map(Some)
        }
        Scheme::StyleAligned if i != ctx.spec.primary_anchor() => {
            let anchor = &components[ctx.spec.primary_anchor()];
            let own = &components[i];
            Ok(Some((
                concat_rows(&[&own.k, &anchor.k])?,
                concat_rows(&[&own.v, &anchor.v])?,
            )))
        }
        _ => Ok(None),
    }
}

/// Stage 4: update of the attention output of image `i` before the output
/// projection, reading other images from the unmodified `hidden`.
pub fn hidden_update(hidden: &[Matrix], ctx: &InterventionContext<'_>, i: usize) -> Result<Option<Matrix>> {
    if ctx.spec.scheme != Scheme::Consistory || !ctx.site.layer.high_res {
        return Ok(None);
    }
    let mask = mask_of(ctx.masks, i, hidden[i].rows())?;
    if mask.is_empty() {
        return Ok(None);
    }
    let Some(map) = map_of(ctx, i, mask)? else {
        return Ok(None);
    };
    let mut out = hidden[i].clone();
    copy_matched_rows(&mut out, map, |a| hidden.get(a))?;
    Ok(Some(out))
}

/// Inputs of one self-attention layer for the whole batch, outside a model.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub latents: Vec<Matrix>,
    pub components: Vec<ImageQkv>,
    pub hidden: Vec<Matrix>,
}

/// What a scheme makes of one image: the queries and (possibly extended)
/// dictionary it attends with, and its updated latent and attention output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageState {
    pub latent: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub hidden: Matrix,
}

/// Runs all four stages for image `i`.
///
/// Stages act on the given tensors independently: a changed latent is not
/// re-projected, and `hidden` is taken as given rather than recomputed.
pub fn apply_scheme(state: &AttentionState, ctx: &InterventionContext<'_>, i: usize) -> Result<ImageState> {
    let batch = state.components.len();
    check_batch("apply_scheme latents", state.latents.len(), batch)?;
    check_batch("apply_scheme hidden", state.hidden.len(), batch)?;
    if i >= batch {
        return Err(Error::Precondition(format!("image {i} outside the batch of {batch}")));
    }
    let latent = latent_update(&state.latents, ctx, i)?.unwrap_or_else(|| state.latents[i].clone());
    let mut components = state.components.clone();
    let mut events = Vec::new();
    for (j, slot) in components.iter_mut().enumerate() {
        if let Some(c) = component_update(&state.components, ctx, j, &mut events)? {
            *slot = c;
        }
    }
    let (k, v) = extension(&components, ctx, i)?.unwrap_or_else(|| (components[i].k.clone(), components[i].v.clone()));
    let hidden = hidden_update(&state.hidden, ctx, i)?.unwrap_or_else(|| state.hidden[i].clone());
    Ok(ImageState {
        latent,
        q: components.swap_remove(i).q,
        k,
        v,
        hidden,
    })
}

#[cfg(test)]
mod tests;
