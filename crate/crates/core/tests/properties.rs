use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use proptest::prelude::*;
use sentinel_core::detect::{detect_pattern, RuleSet};
use sentinel_core::domain::aggregate_levels;
use sentinel_core::eval::{score_binary, score_pairs};
use sentinel_core::rulebook::{RuleBook, RulebookStore};
use sentinel_core::table::{
    load_table_from_bytes, render_table_context, render_table_context_with, sample_from, split_grid_row,
    ParseOptions, RenderOptions, Table,
};
use sentinel_core::taxonomy::{binarize, SensitivityLevel, Taxonomy};

fn level() -> impl Strategy<Value = SensitivityLevel> {
    prop::sample::select(SensitivityLevel::ALL.to_vec())
}

fn cell() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z0-9 ]{0,12}",
        "[|\\\\\n\r a-z]{0,8}",
        any::<String>().prop_map(|s| s.chars().take(20).collect()),
    ]
}

fn table() -> impl Strategy<Value = Table> {
    (1usize..8, 0usize..7).prop_flat_map(|(cols, rows)| {
        (
            prop::collection::vec("[A-Za-z_ ]{0,10}", cols),
            prop::collection::vec(prop::collection::vec(cell(), cols), rows),
        )
            .prop_map(|(headers, rows)| Table::from_rows("t", headers, rows).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rendered_rows_split_back_to_column_count(t in table(), rows in 1usize..8) {
        let ctx = render_table_context(&t, rows);
        let lines: Vec<&str> = ctx.text.lines().collect();
        prop_assert_eq!(lines.len(), 2 + ctx.rows_rendered);
        prop_assert_eq!(ctx.rows_rendered, rows.min(t.row_count));
        for line in lines {
            prop_assert_eq!(split_grid_row(line).len(), t.column_count());
        }
    }

    #[test]
    fn render_honours_budget(t in table(), budget in 64usize..400) {
        let opts = RenderOptions { char_budget: budget, ..RenderOptions::default() };
        let ctx = render_table_context_with(&t, &opts);
        prop_assert!(ctx.text.chars().count() <= budget);
        if ctx.truncated {
            let grid: Vec<&str> = ctx.text.lines().filter(|l| l.starts_with('|')).collect();
            let kept = t.column_count() - ctx.elided_columns.len();
            for line in grid {
                prop_assert_eq!(split_grid_row(line).len(), kept);
            }
        } else {
            prop_assert!(ctx.elided_columns.is_empty());
        }
    }

    #[test]
    fn sampling_is_pure(values in prop::collection::vec("[a-c]{0,2}", 0..30), k in 1usize..8, seed in any::<u64>()) {
        let a = sample_from(&values, k, seed);
        prop_assert_eq!(&a, &sample_from(&values, k, seed));
        prop_assert_eq!(a.len(), k);
        let mut distinct: Vec<&String> = Vec::new();
        for v in values.iter().filter(|v| !v.is_empty()) {
            if !distinct.contains(&v) {
                distinct.push(v);
            }
        }
        for (i, d) in distinct.iter().take(k).enumerate() {
            prop_assert_eq!(&a[i], *d);
        }
    }

    #[test]
    fn loading_arbitrary_bytes_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        if let Ok(t) = load_table_from_bytes("fuzz", &bytes, &ParseOptions::default()) {
            let ctx = render_table_context(&t, 5);
            prop_assert!(!ctx.text.is_empty());
        }
    }

    #[test]
    fn binarize_is_monotone(a in level(), b in level()) {
        if a <= b {
            prop_assert!(binarize(a) <= binarize(b));
        }
    }

    #[test]
    fn retrieval_is_total(country in any::<Option<String>>()) {
        let store = RulebookStore::builtin();
        prop_assert!(store.retrieve(country.as_deref()).is_default());
    }

    #[test]
    fn raising_a_level_never_clears_a_table(levels in prop::collection::vec(level(), 1..10), idx in any::<prop::sample::Index>(), up in level()) {
        let cols: Vec<(usize, SensitivityLevel)> = levels.iter().copied().enumerate().collect();
        let before = aggregate_levels("t", &cols).unwrap();
        let i = idx.index(cols.len());
        let mut raised = cols.clone();
        raised[i].1 = raised[i].1.max(up);
        let after = aggregate_levels("t", &raised).unwrap();
        prop_assert!(!before.sensitive || after.sensitive);
        prop_assert_eq!(before.sensitive, before.max_level >= SensitivityLevel::ModerateSensitive);
    }

    #[test]
    fn metrics_ignore_example_order(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80), seed in any::<u64>()) {
        let classes: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let as_str: Vec<(&str, &str)> = pairs.iter().map(|(p, g)| (classes[*p].as_str(), classes[*g].as_str())).collect();
        let mut shuffled = as_str.clone();
        let mut rng = seed;
        for i in (1..shuffled.len()).rev() {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (rng >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(score_pairs(&as_str, &classes, &[]), score_pairs(&shuffled, &classes, &[]));
    }

    #[test]
    fn weighted_recall_is_accuracy(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..120)) {
        let classes: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let as_str: Vec<(&str, &str)> = pairs.iter().map(|(p, g)| (classes[*p].as_str(), classes[*g].as_str())).collect();
        let (per_class, weighted, _) = score_pairs(&as_str, &classes, &[]);
        let accuracy = pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64;
        prop_assert!((weighted.recall - accuracy).abs() < 1e-9);
        for m in per_class.values() {
            let h = if m.precision + m.recall == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / (m.precision + m.recall) };
            prop_assert!((m.f1 - h).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
    }

    #[test]
    fn gold_vocabulary_does_not_matter(pred in prop::collection::vec(level(), 1..30), use_low in prop::collection::vec(any::<bool>(), 30)) {
        let gold: Vec<SensitivityLevel> = pred.iter().rev().copied().collect();
        let aliased: Vec<SensitivityLevel> = gold
            .iter()
            .zip(&use_low)
            .map(|(g, low)| if *g == SensitivityLevel::NonSensitive && *low { "low".parse().unwrap() } else { *g })
            .collect();
        prop_assert_eq!(score_binary(&pred, &gold).unwrap(), score_binary(&pred, &aliased).unwrap());
    }

    #[test]
    fn pattern_detection_is_deterministic(t in table()) {
        let tax = Taxonomy::load_default();
        let rules = RuleSet::load_default(&tax).unwrap();
        for c in &t.columns {
            let v = detect_pattern(&t.id, c, &rules);
            prop_assert_eq!(&v, &detect_pattern(&t.id, c, &rules));
            prop_assert!(v.detected_type.is_none() || tax.contains(&v.detected_type));
        }
    }
}

#[test]
fn type_label_parsing_is_identity_on_ids() {
    let tax = Taxonomy::load_default();
    assert_eq!(tax.len(), 27);
    for id in tax.class_ids() {
        assert_eq!(tax.parse_type_label(id.as_str()).unwrap(), id);
    }
}

#[test]
fn rulebook_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("default.json");
    let book = RuleBook::load_default();
    book.save(&path).unwrap();
    assert_eq!(RuleBook::load(&path).unwrap(), book);
}

#[test]
fn extracted_provenance_is_always_in_the_body() {
    use sentinel_core::gateway::{Gateway, GatewayConfig, MockBackend};
    use sentinel_core::rulebook::{extract_rules, PolicyDocument};

    let body = "Protocol.\nNames are high.\nFacility lists are low.\nHousehold GPS is severe.";
    let sentences: Vec<&str> = body.lines().collect();
    let doc = PolicyDocument::new("d", Some("KE"), "P", body).unwrap();
    let mut rng = 7u64;
    for _ in 0..50 {
        let mut levels = HashMap::new();
        for key in ["low", "moderate", "high", "severe"] {
            let mut items = Vec::new();
            for _ in 0..3 {
                rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1);
                let r = (rng >> 33) as usize;
                let provenance = if r % 3 == 0 { "Invented passage.".to_string() } else { sentences[r % sentences.len()].to_string() };
                items.push(serde_json::json!({"text": "rule", "provenance": provenance}));
            }
            levels.insert(key, items);
        }
        let reply = serde_json::to_string(&levels).unwrap();
        let gw = Gateway::new(GatewayConfig::default()).with_backend("x", Arc::new(MockBackend::fixed(&reply)));
        if let Ok(ex) = extract_rules(&doc, &gw, "x") {
            let ids: BTreeSet<&str> = ex.rulebook.all_rules().map(|r| r.id.as_str()).collect();
            assert_eq!(ids.len(), ex.rulebook.rule_count());
            assert!(ex.rulebook.all_rules().all(|r| body.contains(&r.provenance)));
        }
    }
}
