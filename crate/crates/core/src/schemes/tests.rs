use std::collections::BTreeMap;

use super::*;
use crate::correspondence::PatchMatch;
use crate::diffusion::LayerId;
use crate::tensor::{channel_stats, multi_head_attention, FeatureTensor};

fn filled(rows: usize, cols: usize, seed: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|k| ((k as f32 + 1.0) * 0.731 + seed * 2.17).sin() * (1.0 + seed))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn components(batch: usize, rows: usize, cols: usize) -> Vec<ImageQkv> {
    (0..batch)
        .map(|b| ImageQkv {
            q: filled(rows, cols, b as f32 * 3.0),
            k: filled(rows, cols, b as f32 * 3.0 + 1.0),
            v: filled(rows, cols, b as f32 * 3.0 + 2.0),
        })
        .collect()
}

fn site(step: usize, layer: LayerId, guided: bool) -> HookSite {
    HookSite {
        step,
        total_steps: 50,
        layer,
        guided,
    }
}

fn map(image: usize, pairs: &[(usize, usize, usize)]) -> CorrespondenceMap {
    let entries = pairs
        .iter()
        .map(|&(patch, anchor, anchor_patch)| PatchMatch {
            patch,
            anchor,
            anchor_patch,
            similarity: None,
        })
        .collect();
    CorrespondenceMap::new(image, entries).unwrap()
}

/// Two images on a 2×2 grid; image 1's subject is {0, 3} with
/// 0 → anchor patch 2 and 3 → anchor patch 1.
struct FourPatch {
    spec: SchemeSpec,
    masks: Vec<SubjectMask>,
    maps: BTreeMap<usize, CorrespondenceMap>,
    comps: Vec<ImageQkv>,
}

impl FourPatch {
    fn new(scheme: Scheme, options: SchemeOptions) -> Self {
        let masks = vec![
            SubjectMask::new(0, vec![1, 2], (2, 2)).unwrap(),
            SubjectMask::new(1, vec![0, 3], (2, 2)).unwrap(),
        ];
        let mut maps = BTreeMap::new();
        maps.insert(1, map(1, &[(0, 0, 2), (3, 0, 1)]));
        Self {
            spec: SchemeSpec::new(scheme, vec![0], options),
            masks,
            maps,
            comps: components(2, 4, 3),
        }
    }

    fn ctx(&self, site: HookSite) -> InterventionContext<'_> {
        InterventionContext {
            site,
            spec: &self.spec,
            masks: &self.masks,
            maps: &self.maps,
            store: None,
        }
    }
}

fn qk_only() -> SchemeOptions {
    SchemeOptions {
        vsd: false,
        crossing: false,
        ..SchemeOptions::default()
    }
}

#[test]
fn window_edges() {
    assert_eq!(
        StepWindow::from_fractions(0.1, 0.3, 50),
        StepWindow { start: 5, end: 15 }
    );
    assert_eq!(
        StepWindow::from_fractions(0.1, 0.3, 10),
        StepWindow { start: 1, end: 3 }
    );
    assert_eq!(StepWindow::from_fractions(0.0, 1.0, 20).steps(), 0..20);
    assert_eq!(StepWindow::from_fractions(0.25, 0.25, 20).len(), 0);
    let w = StepWindow::from_fractions(0.1, 0.3, 50);
    assert!(w.contains(5) && w.contains(14) && !w.contains(4) && !w.contains(15));
}

#[test]
fn tokens_round_trip() {
    for s in Scheme::ALL {
        assert_eq!(s.token().parse::<Scheme>().unwrap(), s);
    }
    assert!("consistyle2".parse::<Scheme>().is_err());
    for q in ["both", "keys", "queries", "none"] {
        assert_eq!(q.parse::<QkInject>().unwrap().token(), q);
    }
}

#[test]
fn qk_injection_copies_matched_anchor_rows() {
    let f = FourPatch::new(Scheme::ConsiStyle, qk_only());
    let ctx = f.ctx(site(5, LayerId::DECODER, true));
    let out = inject_qk(&f.comps, &ctx, 1).unwrap().unwrap();
    let (anchor, own) = (&f.comps[0], &f.comps[1]);
    assert_eq!(out.q.row(0), anchor.q.row(2));
    assert_eq!(out.q.row(3), anchor.q.row(1));
    assert_eq!(out.k.row(0), anchor.k.row(2));
    assert_eq!(out.k.row(3), anchor.k.row(1));
    for r in [1, 2] {
        assert_eq!(out.q.row(r), own.q.row(r));
        assert_eq!(out.k.row(r), own.k.row(r));
    }
    assert!(out.v.bits_eq(&own.v));
    // The anchor has no map and stays as it is.
    assert!(inject_qk(&f.comps, &ctx, 0).unwrap().is_none());
}

#[test]
fn qk_injection_respects_toggles_and_gating() {
    let f = FourPatch::new(
        Scheme::ConsiStyle,
        SchemeOptions {
            qk: QkInject::KeysOnly,
            ..qk_only()
        },
    );
    let out = inject_qk(&f.comps, &f.ctx(site(5, LayerId::DECODER, true)), 1)
        .unwrap()
        .unwrap();
    assert!(out.q.bits_eq(&f.comps[1].q));
    assert_eq!(out.k.row(0), f.comps[0].k.row(2));

    let f = FourPatch::new(Scheme::ConsiStyle, qk_only());
    for s in [
        site(4, LayerId::DECODER, true),
        site(15, LayerId::DECODER, true),
        site(5, LayerId::DECODER, false),
        site(5, LayerId::ENCODER, true),
        site(5, LayerId::MIDDLE, true),
    ] {
        assert!(inject_qk(&f.comps, &f.ctx(s), 1).unwrap().is_none(), "{s:?}");
    }
    let both_halves = FourPatch::new(
        Scheme::ConsiStyle,
        SchemeOptions {
            qk_guided_only: false,
            ..qk_only()
        },
    );
    assert!(inject_qk(
        &both_halves.comps,
        &both_halves.ctx(site(5, LayerId::DECODER, false)),
        1
    )
    .unwrap()
    .is_some());
}

#[test]
fn qk_injection_is_local_to_the_target() {
    let f = FourPatch::new(Scheme::ConsiStyle, qk_only());
    let state = AttentionState {
        latents: vec![filled(4, 3, 9.0), filled(4, 3, 10.0)],
        components: f.comps.clone(),
        hidden: vec![filled(4, 3, 11.0), filled(4, 3, 12.0)],
    };
    let ctx = f.ctx(site(6, LayerId::DECODER, true));
    let anchor = apply_scheme(&state, &ctx, 0).unwrap();
    assert!(anchor.q.bits_eq(&f.comps[0].q));
    assert!(anchor.k.bits_eq(&f.comps[0].k));
    assert!(anchor.v.bits_eq(&f.comps[0].v));
    assert!(anchor.hidden.bits_eq(&state.hidden[0]));
}

#[test]
fn identity_map_on_the_anchor_is_a_fixed_point() {
    let mut f = FourPatch::new(Scheme::ConsiStyle, qk_only());
    f.maps.insert(0, map(0, &[(1, 0, 1), (2, 0, 2)]));
    let out = inject_qk(&f.comps, &f.ctx(site(5, LayerId::DECODER, true)), 0)
        .unwrap()
        .unwrap();
    assert!(out.q.bits_eq(&f.comps[0].q));
    assert!(out.k.bits_eq(&f.comps[0].k));
}

#[test]
fn missing_or_mismatched_maps_are_errors() {
    let mut f = FourPatch::new(Scheme::ConsiStyle, qk_only());
    let ctx_site = site(5, LayerId::DECODER, true);
    f.maps.clear();
    assert!(matches!(
        inject_qk(&f.comps, &f.ctx(ctx_site), 1),
        Err(Error::MissingCorrespondence { image: 1 })
    ));
    f.maps.insert(1, map(1, &[(0, 0, 2)]));
    assert!(inject_qk(&f.comps, &f.ctx(ctx_site), 1).is_err());
}

#[test]
fn value_replay_uses_the_matching_half() {
    let f = FourPatch::new(
        Scheme::ConsiStyle,
        SchemeOptions {
            qk: QkInject::None,
            crossing: false,
            ..SchemeOptions::default()
        },
    );
    let window = f.spec.options.vsd_steps(50);
    let mut store = ValueStore::new(50, window, 2);
    let (unguided, guided) = (filled(4, 3, 20.0), filled(4, 3, 21.0));
    store
        .insert(
            5,
            LayerId::DECODER,
            1,
            FeatureTensor::from_images((2, 2), &[unguided.clone(), guided.clone()]).unwrap(),
        )
        .unwrap();
    let ctx = |s| InterventionContext {
        store: Some(&store),
        ..f.ctx(s)
    };
    let v = inject_vsd(&f.comps, &ctx(site(5, LayerId::DECODER, true)), 1)
        .unwrap()
        .unwrap();
    assert!(v.bits_eq(&guided));
    let v = inject_vsd(&f.comps, &ctx(site(5, LayerId::DECODER, false)), 1)
        .unwrap()
        .unwrap();
    assert!(v.bits_eq(&unguided));
    for s in [
        site(4, LayerId::DECODER, true),
        site(15, LayerId::DECODER, true),
        site(5, LayerId::ENCODER, true),
    ] {
        assert!(inject_vsd(&f.comps, &ctx(s), 1).unwrap().is_none());
    }
    match inject_vsd(&f.comps, &ctx(site(6, LayerId::DECODER, true)), 1) {
        Err(Error::MissingStoreEntry { step: 6, image: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
}

fn masks_16(subject: &[&[usize]]) -> Vec<SubjectMask> {
    subject
        .iter()
        .enumerate()
        .map(|(b, s)| SubjectMask::new(b, s.to_vec(), (4, 4)).unwrap())
        .collect()
}

#[test]
fn crossing_dictionary_layout() {
    let comps = components(2, 16, 4);
    let masks = masks_16(&[&[1, 5, 9], &[2, 3, 4]]);
    let (k, v) = cross_attention_components(&comps, &masks, 0, DictionaryLayout::BatchOrder, false).unwrap();
    assert_eq!(k.shape(), [19, 4]);
    assert_eq!(v.shape(), [19, 4]);
    assert_eq!(k.row(0), comps[0].k.row(0));
    assert_eq!(k.row(16), comps[1].k.row(2));
    assert_eq!(v.row(18), comps[1].v.row(4));

    let (k, _) = cross_attention_components(&comps, &masks, 1, DictionaryLayout::BatchOrder, false).unwrap();
    assert_eq!(k.row(0), comps[0].k.row(1));
    assert_eq!(k.row(2), comps[0].k.row(9));
    assert_eq!(k.row(3), comps[1].k.row(0));

    let (k, _) = cross_attention_components(&comps, &masks, 1, DictionaryLayout::OwnFirst, false).unwrap();
    assert_eq!(k.row(0), comps[1].k.row(0));
    assert_eq!(k.row(16), comps[0].k.row(1));
}

#[test]
fn crossing_with_one_image_is_plain_self_attention() {
    let comps = components(1, 16, 4);
    let masks = masks_16(&[&[0, 1]]);
    let (k, v) = cross_attention_components(&comps, &masks, 0, DictionaryLayout::BatchOrder, true).unwrap();
    assert!(k.bits_eq(&comps[0].k));
    assert!(v.bits_eq(&comps[0].v));
}

#[test]
fn crossing_skips_empty_masks_and_checks_grids() {
    let comps = components(3, 16, 4);
    let masks = masks_16(&[&[0], &[], &[7, 8]]);
    let (k, _) = cross_attention_components(&comps, &masks, 0, DictionaryLayout::BatchOrder, false).unwrap();
    assert_eq!(k.rows(), 18);
    let wrong_grid = vec![
        SubjectMask::full(0, (2, 2)),
        SubjectMask::full(1, (2, 2)),
        SubjectMask::full(2, (2, 2)),
    ];
    assert!(cross_attention_components(&comps, &wrong_grid, 0, DictionaryLayout::BatchOrder, false).is_err());
}

#[test]
fn adain_guard_matches_imported_values_to_the_receiver() {
    let mut comps = components(2, 16, 4);
    // Image 1 carries heavily shifted value statistics.
    let shift = channel_stats(&comps[1].v).unwrap();
    for r in 0..16 {
        for (x, s) in comps[1].v.row_mut(r).iter_mut().zip(&shift.std) {
            *x += 5.0 * s + 3.0;
        }
    }
    let masks = masks_16(&[&[0, 1, 2, 3], &[4, 5, 6, 7, 8]]);
    let own = channel_stats(&comps[0].v).unwrap();

    let (_, guarded) = cross_attention_components(&comps, &masks, 0, DictionaryLayout::BatchOrder, true).unwrap();
    let imported = channel_stats(&guarded.select_rows(&(16..21).collect::<Vec<_>>()).unwrap()).unwrap();
    for c in 0..4 {
        assert!((imported.mean[c] - own.mean[c]).abs() < 1e-4);
        assert!((imported.std[c] - own.std[c]).abs() < 1e-4);
    }

    let (_, raw) = cross_attention_components(&comps, &masks, 0, DictionaryLayout::BatchOrder, false).unwrap();
    let imported = channel_stats(&raw.select_rows(&(16..21).collect::<Vec<_>>()).unwrap()).unwrap();
    assert!((0..4).all(|c| (imported.mean[c] - own.mean[c]).abs() > 1.0));
}

fn baseline_state(batch: usize) -> AttentionState {
    AttentionState {
        latents: (0..batch).map(|b| filled(4, 3, 30.0 + b as f32)).collect(),
        components: components(batch, 4, 3),
        hidden: (0..batch).map(|b| filled(4, 3, 40.0 + b as f32)).collect(),
    }
}

#[test]
fn illusign_mixes_anchor_queries() {
    let f = FourPatch::new(Scheme::IlluSign, SchemeOptions::default());
    let state = baseline_state(2);
    let ctx = f.ctx(site(0, LayerId::ENCODER, false));
    let out = apply_scheme(&state, &ctx, 1).unwrap();
    let (anchor, own) = (&state.components[0], &state.components[1]);
    for (k, q) in out.q.data().iter().enumerate() {
        assert_eq!(*q, own.q.data()[k] + 0.5 * anchor.q.data()[k]);
    }
    assert!(out.k.bits_eq(&anchor.k));
    assert!(out.v.bits_eq(&anchor.v));
    let a = apply_scheme(&state, &ctx, 0).unwrap();
    assert!(a.q.bits_eq(&anchor.q) && a.k.bits_eq(&anchor.k));
    // Low-resolution layers are left alone.
    let low = apply_scheme(&state, &f.ctx(site(0, LayerId::MIDDLE, true)), 1).unwrap();
    assert!(low.q.bits_eq(&own.q));
}

#[test]
fn style_aligned_normalizes_and_shares_the_anchor_dictionary() {
    let f = FourPatch::new(Scheme::StyleAligned, SchemeOptions::default());
    let state = baseline_state(2);
    let out = apply_scheme(&state, &f.ctx(site(3, LayerId::DECODER, true)), 1).unwrap();
    let (anchor, own) = (&state.components[0], &state.components[1]);
    assert!(out.q.bits_eq(&adain(&own.q, &anchor.q).unwrap()));
    let k1 = adain(&own.k, &anchor.k).unwrap();
    assert_eq!(out.k.shape(), [8, 3]);
    assert!(out.k.bits_eq(&concat_rows(&[&k1, &anchor.k]).unwrap()));
    assert!(out.v.bits_eq(&concat_rows(&[&own.v, &anchor.v]).unwrap()));
}

#[test]
fn cross_image_attends_over_the_anchor() {
    let f = FourPatch::new(Scheme::CrossImage, SchemeOptions::default());
    let state = baseline_state(2);
    let out = apply_scheme(&state, &f.ctx(site(3, LayerId::ENCODER, false)), 1).unwrap();
    assert!(out
        .latent
        .bits_eq(&adain(&state.latents[1], &state.latents[0]).unwrap()));
    assert!(out.q.bits_eq(&state.components[1].q));
    assert!(out.k.bits_eq(&state.components[0].k));
    assert!(out.v.bits_eq(&state.components[0].v));
}

#[test]
fn consistory_injects_features_and_crosses_raw_values() {
    let f = FourPatch::new(Scheme::Consistory, SchemeOptions::default());
    let state = baseline_state(2);
    let out = apply_scheme(&state, &f.ctx(site(3, LayerId::DECODER, true)), 1).unwrap();
    assert_eq!(out.hidden.row(0), state.hidden[0].row(2));
    assert_eq!(out.hidden.row(3), state.hidden[0].row(1));
    assert_eq!(out.hidden.row(1), state.hidden[1].row(1));
    // Own keys first, then the anchor's subject rows {1, 2} with raw values.
    assert_eq!(out.k.rows(), 6);
    assert_eq!(out.k.row(0), state.components[1].k.row(0));
    assert_eq!(out.k.row(4), state.components[0].k.row(1));
    assert_eq!(out.v.row(5), state.components[0].v.row(2));
    assert!(out.q.bits_eq(&state.components[1].q));
}

#[test]
fn vanilla_changes_nothing() {
    let f = FourPatch::new(Scheme::Vanilla, SchemeOptions::default());
    let state = baseline_state(2);
    for i in 0..2 {
        let out = apply_scheme(&state, &f.ctx(site(7, LayerId::DECODER, true)), i).unwrap();
        assert!(out.q.bits_eq(&state.components[i].q));
        assert!(out.k.bits_eq(&state.components[i].k));
        assert!(out.v.bits_eq(&state.components[i].v));
        assert!(out.hidden.bits_eq(&state.hidden[i]));
        assert!(out.latent.bits_eq(&state.latents[i]));
    }
}

#[test]
fn reordering_the_batch_permutes_the_outputs() {
    // Three images on a 4×4 grid; swap images 1 and 2 and relabel masks and
    // maps accordingly.
    let comps = components(3, 16, 4);
    let subject: [&[usize]; 3] = [&[0, 1, 5], &[2, 6, 10], &[9, 13]];
    let masks = masks_16(&subject);
    let mut maps = BTreeMap::new();
    maps.insert(1, map(1, &[(2, 0, 1), (6, 0, 5), (10, 0, 0)]));
    maps.insert(2, map(2, &[(9, 0, 5), (13, 0, 0)]));
    let spec = SchemeSpec::new(Scheme::ConsiStyle, vec![0], qk_only());
    let spec = SchemeSpec {
        options: SchemeOptions {
            crossing: true,
            ..spec.options
        },
        ..spec
    };

    let perm = [0, 2, 1];
    let comps_p: Vec<_> = perm.iter().map(|&b| comps[b].clone()).collect();
    let masks_p = masks_16(&[subject[0], subject[2], subject[1]]);
    let mut maps_p = BTreeMap::new();
    maps_p.insert(
        1,
        CorrespondenceMap {
            image_index: 1,
            ..maps[&2].clone()
        },
    );
    maps_p.insert(
        2,
        CorrespondenceMap {
            image_index: 2,
            ..maps[&1].clone()
        },
    );

    let zero = |n: usize| vec![Matrix::zeros(16, 4); n];
    let state = AttentionState {
        latents: zero(3),
        components: comps,
        hidden: zero(3),
    };
    let state_p = AttentionState {
        latents: zero(3),
        components: comps_p,
        hidden: zero(3),
    };
    let s = site(6, LayerId::DECODER, true);
    let ctx = InterventionContext {
        site: s,
        spec: &spec,
        masks: &masks,
        maps: &maps,
        store: None,
    };
    let ctx_p = InterventionContext {
        masks: &masks_p,
        maps: &maps_p,
        ..ctx
    };
    for (i, &pi) in perm.iter().enumerate() {
        let a = apply_scheme(&state, &ctx, pi).unwrap();
        let b = apply_scheme(&state_p, &ctx_p, i).unwrap();
        let ha = multi_head_attention(&a.q, &a.k, &a.v, 2).unwrap();
        let hb = multi_head_attention(&b.q, &b.k, &b.v, 2).unwrap();
        for (x, y) in ha.data().iter().zip(hb.data()) {
            assert!((x - y).abs() < 1e-5, "image {i}: {x} vs {y}");
        }
    }
}
