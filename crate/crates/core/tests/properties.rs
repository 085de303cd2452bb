use ctxpipe::backend::{mock_embed, ChaosLlm, MockScript, ScriptedLlm};
use ctxpipe::eval::{eci, EciParams, EntryScore, ItemTally};
use ctxpipe::filter::filter_vector_embedded;
use ctxpipe::schema::{load_schema, serialize_schema};
use ctxpipe::{decompose, DecomposeOptions, DecompositionSchema, EmbeddingVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn group(rng: &mut ChaCha8Rng, depth: usize, max_depth: usize) -> Value {
    let n = rng.gen_range(2..=4);
    let fallback = rng.gen_range(0..n);
    let nodes: Vec<Value> = (0..n)
        .map(|i| {
            let mut node = json!({"id": format!("c{depth}_{i}"), "description": format!("Category {i} at level {depth}.")});
            if i == fallback {
                node["fallback"] = json!(true);
                return node;
            }
            if depth + 1 < max_depth && rng.gen_bool(0.5) {
                node["children"] = group(rng, depth + 1, max_depth);
                let fields: Vec<Value> = (0..rng.gen_range(0..3))
                    .map(|j| json!({"name": format!("f{depth}_{i}_{j}"), "description": "A detail.", "required": rng.gen_bool(0.3)}))
                    .collect();
                node["fields"] = json!(fields);
            }
            node
        })
        .collect();
    json!(nodes)
}

fn random_schema(seed: u64) -> DecompositionSchema {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_depth = rng.gen_range(1..=4);
    let root_fields: Vec<Value> =
        (0..rng.gen_range(0..3)).map(|j| json!({"name": format!("root_{j}"), "description": "Root detail."})).collect();
    let doc = json!({"name": "random", "fields": root_fields, "nodes": group(&mut rng, 0, max_depth)});
    load_schema(&doc.to_string()).expect("generated schemas are valid")
}

const PROMPTS: [&str; 4] = [
    "Create a new folder for the receipts.",
    "What is the tallest mountain in Europe?",
    "asdkWldqwlqwlej.",
    "Thanks, that was helpful. Could you also summarize it?",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decomposition_paths_stay_inside_the_schema(
        schema_seed in any::<u64>(),
        llm_seed in any::<u64>(),
        fault in prop::sample::select(vec![0.0, 0.3, 0.7, 1.0]),
        prompt in prop::sample::select(PROMPTS.to_vec()),
        repairs in 0u32..=2,
    ) {
        let schema = random_schema(schema_seed);
        let opts = DecomposeOptions { max_repairs: repairs, ..Default::default() };
        let rec = decompose(prompt, None, &schema, &ChaosLlm::new(llm_seed, fault), &opts).unwrap();
        prop_assert!(schema.is_valid_prefix(&rec.path));
        prop_assert!(schema.node_at(&rec.path).unwrap().is_leaf());
        prop_assert_eq!(rec.levels.len(), rec.path.len());
        prop_assert_eq!(rec.summaries.len(), rec.path.len());
        for (i, level) in rec.levels.iter().enumerate() {
            prop_assert_eq!(&level.category, &rec.path[i]);
            let names: Vec<&str> = schema.fields_at(&rec.path[..i]).unwrap().iter().map(|f| f.name.as_str()).collect();
            let got: Vec<&str> = level.field_values.keys().map(String::as_str).collect();
            prop_assert_eq!(got, names);
        }
        if rec.degraded {
            let (last, prefix) = rec.path.split_last().unwrap();
            prop_assert_eq!(last, schema.fallback_child(prefix).unwrap());
        }
    }

    #[test]
    fn unusable_replies_land_on_the_root_fallback(schema_seed in any::<u64>(), repairs in 0u32..=3) {
        let schema = random_schema(schema_seed);
        let llm = ScriptedLlm::new(MockScript::new("I cannot answer in JSON."));
        let opts = DecomposeOptions { max_repairs: repairs, ..Default::default() };
        let rec = decompose("Do the thing.", None, &schema, &llm, &opts).unwrap();
        prop_assert!(rec.degraded);
        prop_assert_eq!(rec.path, vec![schema.fallback_child(&[]).unwrap().clone()]);
    }

    #[test]
    fn schema_documents_round_trip(seed in any::<u64>()) {
        let schema = random_schema(seed);
        let again = load_schema(&serialize_schema(&schema)).unwrap();
        prop_assert_eq!(&again, &schema);
        let paths = schema.enumerate_paths();
        prop_assert_eq!(paths.len(), schema.leaf_count());
        for p in &paths {
            prop_assert!(schema.is_valid_prefix(p));
        }
    }
}

const VOCAB: [&str; 16] = [
    "garden", "tomato", "soil", "water", "chess", "opening", "bishop", "castle", "coffee", "roast", "bean", "grind",
    "river", "boat", "paddle", "fish",
];

fn texts_strategy(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::collection::vec(prop::sample::select(VOCAB.to_vec()), 1..6).prop_map(|w| w.join(" ")), 1..max)
}

fn embed_all(segments: &[String], query: &str) -> Vec<EmbeddingVector> {
    segments.iter().map(String::as_str).chain([query]).map(|t| mock_embed(t, 64, 1)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn higher_thresholds_keep_subsets(segs in texts_strategy(20), query in texts_strategy(2), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let vecs = embed_all(&segs, &query[0]);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let kept_lo = filter_vector_embedded(&vecs, lo, 0, "m").unwrap().kept_set();
        let kept_hi = filter_vector_embedded(&vecs, hi, 0, "m").unwrap().kept_set();
        prop_assert!(kept_hi.is_subset(&kept_lo));
        let all = filter_vector_embedded(&vecs, -1.0, 0, "m").unwrap();
        prop_assert_eq!(all.kept_indices.len(), segs.len());
    }

    #[test]
    fn positive_scaling_keeps_the_same_segments(segs in texts_strategy(20), query in texts_strategy(2), tau in -1.0f64..1.0, c in 0.001f64..1000.0) {
        let vecs = embed_all(&segs, &query[0]);
        let scaled: Vec<EmbeddingVector> = vecs.iter().map(|v| v.scaled(c)).collect();
        let a = filter_vector_embedded(&vecs, tau, 0, "m").unwrap();
        let b = filter_vector_embedded(&scaled, tau, 0, "m").unwrap();
        prop_assert_eq!(a.kept_indices, b.kept_indices);
    }

    #[test]
    fn permuting_segments_permutes_the_kept_set(segs in texts_strategy(20), query in texts_strategy(2), tau in -1.0f64..1.0, seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..segs.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<String> = order.iter().map(|i| segs[*i].clone()).collect();
        let a = filter_vector_embedded(&embed_all(&segs, &query[0]), tau, 0, "m").unwrap().kept_set();
        let b = filter_vector_embedded(&embed_all(&permuted, &query[0]), tau, 0, "m").unwrap();
        let mapped: std::collections::BTreeSet<usize> = b.kept_indices.iter().map(|j| order[*j]).collect();
        prop_assert_eq!(mapped, a);
    }
}

fn tallies_strategy() -> impl Strategy<Value = (u32, Vec<u32>)> {
    (1u32..=10).prop_flat_map(|k| (Just(k), prop::collection::vec(0..=k, 1..=20)))
}

fn to_tallies(k: u32, correct: &[u32]) -> Vec<ItemTally> {
    correct.iter().map(|c| ItemTally::new(*c, k).unwrap()).collect()
}

proptest! {
    #[test]
    fn eci_is_monotone_in_each_tally((k, correct) in tallies_strategy(), pick in any::<prop::sample::Index>(), alpha in 0.1f64..5.0) {
        let p = EciParams::new(alpha, k).unwrap();
        let i = pick.index(correct.len());
        prop_assume!(correct[i] < k);
        let base = eci(&to_tallies(k, &correct), &p).unwrap();
        let mut up = correct.clone();
        up[i] += 1;
        let raised = eci(&to_tallies(k, &up), &p).unwrap();
        prop_assert!(raised > base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn eci_decreases_in_alpha((k, correct) in tallies_strategy(), a in 0.1f64..5.0, b in 0.1f64..5.0) {
        prop_assume!(correct.iter().any(|c| *c > 0 && *c < k));
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let t = to_tallies(k, &correct);
        prop_assert!(eci(&t, &EciParams::new(lo, k).unwrap()).unwrap() > eci(&t, &EciParams::new(hi, k).unwrap()).unwrap());
    }

    #[test]
    fn linear_case_is_the_mean_ratio((k, correct) in tallies_strategy()) {
        let t = to_tallies(k, &correct);
        let mean = correct.iter().map(|c| f64::from(*c) / f64::from(k)).sum::<f64>() / correct.len() as f64;
        prop_assert!((eci(&t, &EciParams::new(1.0, k).unwrap()).unwrap() - mean).abs() < 1e-12);
    }

    #[test]
    fn entry_scores_recompute((k, correct) in tallies_strategy(), alpha in 0.1f64..5.0) {
        let p = EciParams::new(alpha, k).unwrap();
        let e = EntryScore::new("x", to_tallies(k, &correct), &p).unwrap();
        prop_assert_eq!(e.d, e.tallies.len());
        prop_assert!((eci(&e.tallies, &p).unwrap() - e.eci).abs() <= 1e-12);
    }
}
