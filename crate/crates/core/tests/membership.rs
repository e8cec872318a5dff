//! Membership-inference pipeline contracts on small federations.

mod common;

use common::{quick_train, small_federation};
use fedseg_core::data::SliceSample;
use fedseg_core::mia::{attack_model, extract_features, prepare_attack, train_shadow, MiaTracker};
use fedseg_core::model::{build_model, ModelConfig};

#[test]
fn shadow_model_matches_target_layout() {
    let fed = small_federation(1, &[8, 8], 40);
    let shadow = train_shadow(&fed, ModelConfig::desk(), &quick_train(1, Some(1)), 3).unwrap();
    assert!(shadow.same_layout(&build_model(ModelConfig::desk(), 0).unwrap()));
}

#[test]
fn shadow_halves_and_panels_are_disjoint() {
    let fed = small_federation(2, &[40, 40, 20], 40);
    let (m, n) = fed.shadow_split();
    assert_eq!(m.len(), n.len());
    let seeds = |s: &[SliceSample]| s.iter().map(|x| x.meta.seed_used).collect::<Vec<_>>();
    assert!(seeds(m).iter().all(|s| !seeds(n).contains(s)));

    let attack = prepare_attack(&fed, ModelConfig::desk(), &quick_train(1, Some(1)), 4).unwrap();
    let tracker = MiaTracker::new(attack, &fed.clients, 20, 4, 1);
    assert_eq!(tracker.members.len(), 20);
    assert_eq!(tracker.nonmembers.len(), 20);
    let train_seeds: Vec<u64> = fed
        .clients
        .iter()
        .flat_map(|c| c.train.iter().map(|s| s.meta.seed_used))
        .collect();
    assert!(tracker.members.iter().all(|s| train_seeds.contains(&s.meta.seed_used)));
    assert!(tracker
        .nonmembers
        .iter()
        .all(|s| !train_seeds.contains(&s.meta.seed_used)));
}

#[test]
fn benchmark_panel_is_stratified_by_client_size() {
    let fed = small_federation(3, &[200, 200, 200, 100, 100], 40);
    let attack = prepare_attack(&fed, ModelConfig::desk(), &quick_train(1, Some(1)), 5).unwrap();
    let tracker = MiaTracker::new(attack, &fed.clients, 100, 5, 1);
    let per_client = |set: &[SliceSample]| {
        let mut c = [0usize; 5];
        for s in set {
            c[s.meta.client_id as usize - 1] += 1;
        }
        c
    };
    assert_eq!(per_client(&tracker.members), [25, 25, 25, 13, 12]);
    assert_eq!(per_client(&tracker.nonmembers), [25, 25, 25, 13, 12]);
}

#[test]
fn untrained_model_leaks_nothing() {
    let fed = small_federation(4, &[60, 60, 60], 60);
    let train = quick_train(2, Some(4));
    let report = attack_model(
        &build_model(ModelConfig::desk(), 6).unwrap(),
        &fed,
        ModelConfig::desk(),
        &train,
        90,
        6,
    )
    .unwrap();
    assert!((0.4..=0.6).contains(&report.auc), "AUC {}", report.auc);
    assert_eq!(report.members, 90);
}

#[test]
fn features_are_deterministic() {
    let fed = small_federation(5, &[8], 8);
    let model = build_model(ModelConfig::desk(), 1).unwrap();
    let set: Vec<&SliceSample> = fed.test.iter().collect();
    assert_eq!(
        extract_features(&model, &set).unwrap(),
        extract_features(&model, &set).unwrap()
    );
}

#[test]
fn mismatched_checkpoint_is_a_version_error() {
    let fed = small_federation(6, &[8], 40);
    let wrong = build_model(ModelConfig::with_base(4), 1).unwrap();
    let err = attack_model(&wrong, &fed, ModelConfig::desk(), &quick_train(1, Some(1)), 10, 1);
    assert!(matches!(err, Err(fedseg_core::Error::Version(_))));
}
