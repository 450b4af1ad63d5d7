mod common;

use std::collections::BTreeMap;

use common::*;
use labelgs_core::occlusion::{analyze, annotate_view, find_adjacencies, OcclusionSettings};
use labelgs_core::{Camera, Image, Label, Mask, ViewRecord};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layered(seed: u64) -> LayeredScene {
    layered_scene(&mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn occluders_match_construction(seed in any::<u64>()) {
        let s = layered(seed);
        let settings = OcclusionSettings::default();
        let report = analyze(&s.labels, &s.depth, &settings).unwrap();
        let expected = expected_occluders(&s, settings.min_boundary);
        for (k, occ) in &expected {
            prop_assert_eq!(report.occluders.get(k), Some(occ), "label {}", k);
        }
    }

    #[test]
    fn unocclusion_is_complement_of_occluder_union(seed in any::<u64>()) {
        let s = layered(seed);
        let report = analyze(&s.labels, &s.depth, &OcclusionSettings::default()).unwrap();
        for (k, occ) in report.occluders.iter().filter(|(k, _)| **k != 0) {
            let u = &report.unocclusion[k];
            for (p, &id) in s.labels.ids.iter().enumerate() {
                prop_assert_eq!(u.data[p], !occ.contains(&id));
            }
            // a mask is never enlarged by its unocclusion mask
            let m = s.labels.mask_of(*k);
            prop_assert!(m.and(u).data.iter().zip(&m.data).all(|(a, b)| !a || *b));
        }
    }

    #[test]
    fn adjacency_matches_exhaustive_scan(seed in any::<u64>()) {
        let s = layered(seed);
        let pairs = find_adjacencies(&s.labels, &s.depth, &OcclusionSettings { min_boundary: 1, relative_tolerance: 0.0 }).unwrap();
        let found: BTreeMap<(Label, Label), usize> = pairs.iter().map(|p| ((p.label_a, p.label_b), p.shared_edges)).collect();
        let labels: Vec<Label> = s.labels.labels().into_iter().filter(|&k| k != 0).collect();
        for (i, &a) in labels.iter().enumerate() {
            for &b in &labels[i + 1..] {
                let n = shared_edges(&s.labels, a, b);
                prop_assert_eq!(found.get(&(a, b)).copied().unwrap_or(0), n, "pair {} {}", a, b);
            }
        }
        for p in &pairs {
            prop_assert!(!p.boundary_a.is_empty() && !p.boundary_b.is_empty());
            prop_assert!(p.boundary_a.iter().all(|x| !p.boundary_b.contains(x)));
            // distinct layer depths: exactly one direction is recorded
            let report = labelgs_core::occlusion::occlusion_lists(std::slice::from_ref(p), &OcclusionSettings::default());
            let ab = report.occluders[&p.label_a].contains(&p.label_b);
            let ba = report.occluders[&p.label_b].contains(&p.label_a);
            prop_assert!(ab != ba);
        }
    }
}

#[test]
fn views_without_depth_see_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let s = layered_scene(&mut rng);
    let (w, h) = s.labels.dims();
    let cam = Camera::new(
        20.0,
        20.0,
        w as f64 / 2.0,
        h as f64 / 2.0,
        w,
        h,
        nalgebra::Matrix3::identity(),
        nalgebra::Vector3::zeros(),
    )
    .unwrap();
    let mut view = ViewRecord::new("v", cam, Image::new(w, h), s.labels.clone()).unwrap();
    assert!(annotate_view(&mut view, &OcclusionSettings::default()).unwrap().is_none());
    for k in s.labels.labels() {
        assert_eq!(view.unocclusion_mask(k), Mask::new(w, h, true));
    }
    view.depth_map = Some(s.depth.clone());
    let report = annotate_view(&mut view, &OcclusionSettings::default()).unwrap().unwrap();
    assert_eq!(view.unocclusion, report.unocclusion);
}
