use std::collections::BTreeSet;

use proptest::prelude::*;

use classlist_core::graph::Pair;
use classlist_core::ingest::{build_queries, harvest, match_post, synth_corpus, ListingPost, QuerySpec};
use classlist_core::sim::{synth_world, WorldSpec};
use classlist_core::tasks::{build_tasks, GoldBank, QueryItem, Subject, ITEMS_PER_TASK, PAIR_PROMPT};
use classlist_core::taxonomy::NodeId;

fn post(title: String) -> ListingPost {
    ListingPost {
        post_id: 0,
        title,
        body: String::new(),
        image_refs: vec!["a.jpg".into()],
        source: "t".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // adding words to a title never loses a match
    #[test]
    fn match_is_monotone_in_title(query in prop::collection::vec("[a-z0-9]{1,4}", 1..5),
                                  extra in prop::collection::vec("[a-z0-9]{1,4}", 0..5)) {
        let q = QuerySpec { node_id: NodeId(0), tokens: query.clone() };
        let base = post(query.join(" "));
        prop_assert!(match_post(&q, &base));
        let mut words = query.clone();
        words.extend(extra);
        words.reverse();
        prop_assert!(match_post(&q, &post(words.join(" "))));
    }

    #[test]
    fn harvest_ignores_post_order(seed in 0u64..500, rot in 0usize..200) {
        let world = synth_world(&WorldSpec { seed, n_years: 3, ..WorldSpec::default() }).unwrap();
        let queries = build_queries(&world.forest);
        let corpus = synth_corpus(&world.forest, 200, seed);
        let a = harvest(&corpus.posts, &queries);
        let mut shuffled = corpus.posts.clone();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        shuffled.reverse();
        let b = harvest(&shuffled, &queries);
        prop_assert_eq!(&a, &b);
        // each image belongs to at most one node and one post
        let imgs: BTreeSet<&str> = a.candidates.iter().map(|c| c.image_ref.as_str()).collect();
        prop_assert_eq!(imgs.len(), a.candidates.len());
        let twice: Vec<ListingPost> = corpus.posts.iter().chain(corpus.posts.iter()).cloned().collect();
        prop_assert_eq!(&harvest(&twice, &queries), &a);
    }

    #[test]
    fn task_packing_invariants(n_items in 1usize..40, seed: u64, first in 0u64..1000) {
        let items: Vec<QueryItem> = (0..n_items)
            .map(|i| {
                let p = Pair::new(NodeId(i as u32), NodeId(i as u32 + 1));
                QueryItem {
                    subject: Subject::Pair(p),
                    left_images: vec![format!("{i}.jpg")],
                    right_images: vec![format!("{}.jpg", i + 1)],
                    attempt: 0,
                }
            })
            .collect();
        let golds = GoldBank::reference(5, 5);
        let tasks = build_tasks(&items, &golds, PAIR_PROMPT, seed, first, 0).unwrap();
        prop_assert_eq!(tasks.len(), n_items.div_ceil(ITEMS_PER_TASK));
        let mut covered = BTreeSet::new();
        for (i, t) in tasks.iter().enumerate() {
            prop_assert_eq!(t.task_id, first + i as u64);
            prop_assert!(t.check_invariants().is_ok());
            let subjects: Vec<&Subject> = t.non_gold().map(|(_, q)| &q.subject).collect();
            let distinct: BTreeSet<&Subject> = subjects.iter().copied().collect();
            if (i + 1) * ITEMS_PER_TASK <= n_items {
                prop_assert_eq!(distinct.len(), ITEMS_PER_TASK);
            }
            covered.extend(distinct.into_iter().cloned());
        }
        prop_assert_eq!(covered.len(), n_items);
        // the draws ignore the id offset
        let shifted = build_tasks(&items, &golds, PAIR_PROMPT, seed, first + 7, 0).unwrap();
        for (a, b) in tasks.iter().zip(&shifted) {
            prop_assert_eq!(a.gold_positions, b.gold_positions);
        }
    }
}
