use std::collections::BTreeSet;

use classlist_core::aggregate::AggregationPolicy;
use classlist_core::ingest::{
    build_manifest, build_queries, harvest, image_gold_bank, manifest_jsonl, synth_corpus,
    verify_images, AmbiguousPost, CandidateImage, HarvestResult, ImageTruth, ManifestEntry,
    Verification, VerifyOptions,
};
use classlist_core::sim::{fig4_world, SimBackend, WorkerProfile};
use classlist_core::taxonomy::NodeId;
use classlist_core::{AggregationRule, Engine, EngineConfig, Money};

fn fixture(n_car: usize, n_not: usize) -> (HarvestResult, ImageTruth) {
    let mut truth = ImageTruth::default();
    let mut candidates = Vec::new();
    for i in 0..n_car + n_not {
        let img = format!("post{i}/0.jpg");
        if i < n_car {
            truth.cars.insert(img.clone());
        } else {
            truth.not_cars.insert(img.clone());
        }
        candidates.push(CandidateImage {
            image_ref: img,
            node_id: NodeId((i % 4) as u32),
            post_id: i as u64,
            verification: Verification::Unverified,
        });
    }
    candidates.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
    (
        HarvestResult {
            candidates,
            ambiguous: Vec::new(),
        },
        truth,
    )
}

fn noiseless_pool(n: usize) -> Vec<WorkerProfile> {
    (0..n).map(|i| WorkerProfile::noiseless(format!("w{i}"))).collect()
}

fn retained_set(h: &HarvestResult, backend: &mut SimBackend, seed: u64) -> BTreeSet<String> {
    let out = verify_images(
        h,
        backend,
        &AggregationPolicy::default(),
        &image_gold_bank(6, 6),
        &VerifyOptions {
            seed,
            ..VerifyOptions::default()
        },
    )
    .unwrap();
    assert!(out.stats.conserved(), "{:?}", out.stats);
    out.retained().map(|c| c.image_ref.clone()).collect()
}

#[test]
fn noiseless_keeps_exactly_the_cars() {
    let (h, truth) = fixture(10, 5);
    let mut backend = SimBackend::new(noiseless_pool(3), &truth, 1);
    let kept = retained_set(&h, &mut backend, 1);
    assert_eq!(kept, truth.cars);
}

#[test]
fn one_spammer_rarely_changes_the_result() {
    let (h, truth) = fixture(10, 5);
    let mut agree = 0;
    for seed in 0..20 {
        let mut pool = noiseless_pool(5);
        pool.push(WorkerProfile::spammer("spam"));
        let mut backend = SimBackend::new(pool, &truth, seed);
        if retained_set(&h, &mut backend, seed) == truth.cars {
            agree += 1;
        }
    }
    assert!(agree >= 19, "{agree}/20 seeds matched the noiseless result");
}

#[test]
fn conservation_counts_ambiguous_images() {
    let (mut h, truth) = fixture(4, 2);
    h.ambiguous.push(AmbiguousPost {
        post_id: 99,
        nodes: vec![NodeId(0), NodeId(1)],
        image_refs: vec!["amb/0.jpg".into(), "amb/1.jpg".into()],
    });
    let mut backend = SimBackend::new(noiseless_pool(2), &truth, 3);
    let out = verify_images(
        &h,
        &mut backend,
        &AggregationPolicy::default(),
        &image_gold_bank(4, 4),
        &VerifyOptions::default(),
    )
    .unwrap();
    let s = &out.stats;
    assert_eq!((s.total, s.retained, s.excluded, s.ambiguous_skipped), (8, 4, 2, 2));
    assert!(s.conserved());
    assert_eq!(s.unresolved, 0);
    assert_eq!(s.tasks_issued, s.tasks_accepted + s.tasks_rejected);
    assert_eq!(s.cost, Money::from_cents(10) * s.tasks_accepted);
}

#[test]
fn wave_cap_leaves_images_unresolved_but_conserved() {
    let (h, truth) = fixture(3, 3);
    let mut backend = SimBackend::new(vec![WorkerProfile::spammer("s")], &truth, 0);
    let out = verify_images(
        &h,
        &mut backend,
        &AggregationPolicy::default(),
        &image_gold_bank(4, 4),
        &VerifyOptions {
            max_waves: 1,
            ..VerifyOptions::default()
        },
    )
    .unwrap();
    // one wave can give at most one vote per image, short of k=3
    assert_eq!(out.stats.unresolved, 6);
    assert_eq!(out.stats.retained, 0);
    assert!(out.stats.conserved());
}

#[test]
fn quality_weighted_verification() {
    let (h, truth) = fixture(8, 4);
    let mut pool = noiseless_pool(4);
    pool.push(WorkerProfile::spammer("spam"));
    let mut backend = SimBackend::new(pool, &truth, 11);
    let policy = AggregationPolicy {
        rule: AggregationRule::QualityWeighted,
        ..AggregationPolicy::default()
    };
    let out = verify_images(&h, &mut backend, &policy, &image_gold_bank(6, 6), &VerifyOptions::default())
        .unwrap();
    assert!(out.stats.conserved());
    let kept: BTreeSet<String> = out.retained().map(|c| c.image_ref.clone()).collect();
    assert_eq!(kept, truth.cars);
}

#[test]
fn invalid_policy_is_rejected() {
    let (h, truth) = fixture(1, 1);
    let mut backend = SimBackend::new(noiseless_pool(1), &truth, 0);
    let policy = AggregationPolicy {
        redundancy_k: 2,
        ..AggregationPolicy::default()
    };
    assert!(verify_images(&h, &mut backend, &policy, &image_gold_bank(2, 2), &VerifyOptions::default()).is_err());
}

#[test]
fn harvested_corpus_to_manifest() {
    let world = fig4_world(false);
    let mut engine = Engine::new(world.forest.clone(), world.golds.clone(), EngineConfig::default()).unwrap();
    let mut backend = SimBackend::new(noiseless_pool(3), &world.truth, 0);
    engine.run(&mut backend, None, &mut |_| {}).unwrap();
    let classes = engine.class_list();

    let corpus = synth_corpus(&world.forest, 200, 7);
    let h = harvest(&corpus.posts, &build_queries(&world.forest));
    let mut img_backend = SimBackend::new(noiseless_pool(3), &corpus.truth, 7);
    let out = verify_images(
        &h,
        &mut img_backend,
        &AggregationPolicy::default(),
        &image_gold_bank(6, 6),
        &VerifyOptions::default(),
    )
    .unwrap();
    assert!(out.stats.conserved());
    for c in out.retained() {
        assert!(corpus.truth.cars.contains(&c.image_ref), "{} is not a car", c.image_ref);
    }

    let manifest = build_manifest(&out.candidates, &classes).unwrap();
    assert_eq!(manifest.len() as u64, out.stats.retained);
    for entry in &manifest {
        let class = classes.classes.iter().find(|c| c.id == entry.class_id).unwrap();
        let cand = out.candidates.iter().find(|c| c.image_ref == entry.image).unwrap();
        assert!(class.members.contains(&cand.node_id));
        assert_eq!(entry.class_name, class.name);
    }
    let text = manifest_jsonl(&manifest);
    let back: Vec<ManifestEntry> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(back, manifest);
}
