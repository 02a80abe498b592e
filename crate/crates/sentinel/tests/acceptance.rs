//! Primary acceptance criteria. Each test writes one `PASS`/`FAIL` line to
//! stderr (uncaptured) before asserting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sentinel::config::SentinelConfig;
use sentinel::scan::{execute_scan, ScanRequest};
use sentinel_core::corpus::Manifest;
use sentinel_core::detect::{candidates, detect_pattern, DetectionMethod, DetectionVerdict, RuleSet};
use sentinel_core::domain::{all_sensitive_baseline, assess_columns, DomainConfig};
use sentinel_core::eval::{f1_score, score_table_sensitivity, score_types, GoldLabel, GoldSet, ScoreOptions};
use sentinel_core::gateway::{
    load_fixture, AbortTransport, ChatCompletionBackend, Gateway, GatewayConfig, MockBackend, MockScript, ReplayStore,
};
use sentinel_core::pipeline::{evaluate_scan, run_scan, Pipeline, ScanConfig, ScanResources};
use sentinel_core::reflect::{reflect, ReflectorConfig};
use sentinel_core::rulebook::{retrieve_rulebook, RuleBook, RulebookStore};
use sentinel_core::table::{ParseOptions, Table};
use sentinel_core::taxonomy::{PiiTypeId, SensitivityLevel, Taxonomy};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn verdict_line(criterion: &str, ok: bool, detail: &str) {
    let line = format!("{} acceptance: {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn check(criterion: &str, ok: bool, detail: String) {
    verdict_line(criterion, ok, &detail);
    assert!(ok, "{criterion}: {detail}");
}

fn quiet_gateway() -> Gateway {
    Gateway::new(GatewayConfig::default()).with_sleeper(Arc::new(|_| {}))
}

fn load_corpus(name: &str) -> (Manifest, Vec<Table>, GoldSet) {
    let manifest = Manifest::load(&fixtures().join(name).join("manifest.jsonl")).unwrap();
    let tables = manifest.load_tables(&ParseOptions::default()).unwrap();
    let gold = GoldSet::from_manifest(&manifest).unwrap();
    (manifest, tables, gold)
}

// ----------------------------------------------------------------------------
// 1. Metric oracle equivalence

struct Oracle {
    per_class: BTreeMap<String, (f64, f64, f64, usize)>,
    weighted: (f64, f64, f64),
    macro_avg: (f64, f64, f64),
}

/// Brute-force recount from raw pairs, written without reference to the
/// scorer: per-class counts by scanning, support-weighted and
/// present-class macro averages.
fn oracle(pairs: &[(String, String)], include_none: bool) -> Oracle {
    let mut labels: BTreeSet<String> = BTreeSet::new();
    for (p, g) in pairs {
        labels.insert(p.clone());
        labels.insert(g.clone());
    }
    let mut per_class = BTreeMap::new();
    for c in &labels {
        let tp = pairs.iter().filter(|(p, g)| p == c && g == c).count() as f64;
        let predicted = pairs.iter().filter(|(p, _)| p == c).count() as f64;
        let actual = pairs.iter().filter(|(_, g)| g == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        per_class.insert(c.clone(), (precision, recall, f1, actual as usize));
    }
    let counted: Vec<(&String, &(f64, f64, f64, usize))> =
        per_class.iter().filter(|(c, _)| include_none || c.as_str() != "none").collect();
    let total: usize = counted.iter().map(|(_, m)| m.3).sum();
    let wavg = |k: usize| {
        if total == 0 {
            return 0.0;
        }
        counted
            .iter()
            .map(|(_, m)| [m.0, m.1, m.2][k] * m.3 as f64)
            .sum::<f64>()
            / total as f64
    };
    let mavg = |k: usize| {
        if counted.is_empty() {
            return 0.0;
        }
        counted.iter().map(|(_, m)| [m.0, m.1, m.2][k]).sum::<f64>() / counted.len() as f64
    };
    let weighted = (wavg(0), wavg(1), wavg(2));
    let macro_avg = (mavg(0), mavg(1), mavg(2));
    Oracle {
        per_class,
        weighted,
        macro_avg,
    }
}

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let start = Instant::now();
    let tax = Taxonomy::load_default();
    let all: Vec<PiiTypeId> = tax.class_ids();
    let mut rng = StdRng::seed_from_u64(0x5eed_0001);
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    for trial in 0..1000 {
        let k = rng.random_range(1..=10);
        let mut classes = all.clone();
        for i in 0..k {
            let j = rng.random_range(i..classes.len());
            classes.swap(i, j);
        }
        classes.truncate(k);
        let n = rng.random_range(1..=200);
        let include_none = trial % 2 == 0;
        let mut preds = Vec::with_capacity(n);
        let mut gold = Vec::with_capacity(n);
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let p = classes[rng.random_range(0..k)].clone();
            let g = classes[rng.random_range(0..k)].clone();
            pairs.push((p.as_str().to_string(), g.as_str().to_string()));
            preds.push(DetectionVerdict {
                table_id: "t".into(),
                column_index: i,
                header: String::new(),
                detected_type: p,
                method: DetectionMethod::Pattern,
                raw_output: String::new(),
                signals: vec![],
            });
            gold.push(GoldLabel {
                table_id: "t".into(),
                column_index: i,
                gold_type: g,
                gold_level: SensitivityLevel::NonSensitive,
            });
        }
        let report = score_types(&preds, &gold, &tax, ScoreOptions { include_none }).unwrap();
        let o = oracle(&pairs, include_none);
        let mut diffs = vec![
            report.weighted.precision - o.weighted.0,
            report.weighted.recall - o.weighted.1,
            report.weighted.f1 - o.weighted.2,
            report.macro_avg.precision - o.macro_avg.0,
            report.macro_avg.recall - o.macro_avg.1,
            report.macro_avg.f1 - o.macro_avg.2,
        ];
        for (class, m) in &report.per_class {
            match o.per_class.get(class) {
                Some(e) => {
                    diffs.extend([m.precision - e.0, m.recall - e.1, m.f1 - e.2]);
                    if m.support != e.3 {
                        mismatches += 1;
                    }
                }
                None => diffs.extend([m.precision, m.recall, m.f1, m.support as f64]),
            }
        }
        let d = diffs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        worst = worst.max(d);
        if d > 1e-9 {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        "1 metric oracle equivalence",
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("1000 matrices, max |diff| {worst:.2e}, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    );
}

// ----------------------------------------------------------------------------
// 2. Harmonic-mean consistency on reference P/R pairs

#[test]
fn criterion_2_f1_from_precision_and_recall() {
    let a = f1_score(0.531, 0.628);
    let b = f1_score(0.732, 0.941);
    check(
        "2 F1 harmonic-mean consistency",
        (a - 0.576).abs() <= 0.001 && (b - 0.824).abs() <= 0.001,
        format!("F1(0.531, 0.628) = {a:.4} (want 0.576), F1(0.732, 0.941) = {b:.4} (want 0.824)"),
    );
}

// ----------------------------------------------------------------------------
// 3. All-tables-sensitive baseline arithmetic

#[test]
fn criterion_3_all_sensitive_baseline() {
    let (_, tables, gold) = load_corpus("humanitarian");
    let table_gold = gold.table_gold();
    let sensitive = table_gold.iter().filter(|t| t.sensitive).count();
    let report = score_table_sensitivity(&all_sensitive_baseline(&tables), &table_gold).unwrap();
    let m = report.binary_sensitive.unwrap();
    let got = format!("{:.3}/{:.3}/{:.3}", m.precision, m.recall, m.f1);
    check(
        "3 all-sensitive baseline",
        tables.len() == 24 && sensitive == 9 && got == "0.375/1.000/0.545",
        format!("{} tables, {sensitive} sensitive: P/R/F1 = {got} (want 0.375/1.000/0.545)", tables.len()),
    );
}

// ----------------------------------------------------------------------------
// 4. Reflection improves precision and never adds columns

fn reflection_run(gateway: &Gateway, tables: &[Table]) -> sentinel_core::pipeline::ScanOutput {
    let tax = Taxonomy::load_default();
    let rules = RuleSet::load_default(&tax).unwrap();
    let store = RulebookStore::builtin();
    let res = ScanResources {
        taxonomy: &tax,
        rules: &rules,
        store: &store,
        gateway,
    };
    run_scan(tables, Pipeline::DetectThenReflect, &ScanConfig::default(), &res).unwrap()
}

#[test]
fn criterion_4_reflection_precision_and_subset() {
    let (_, tables, gold) = load_corpus("reflection");
    let script = MockScript::load(&fixtures().join("reflection/mock.json")).unwrap();
    let gw = quiet_gateway().with_backend("reflect", Arc::new(MockBackend::scripted(script)));
    let out = reflection_run(&gw, &tables);
    let tax = Taxonomy::load_default();
    let eval = evaluate_scan(Pipeline::DetectThenReflect, "reflection", &out, &gold, &tax, ScoreOptions::default()).unwrap();
    let cmp = eval.comparison.unwrap();
    let before = cmp.rows[0].metrics.precision;
    let after = cmp.rows[1].metrics.precision;

    let cands: BTreeSet<(String, usize)> = candidates(&out.detections)
        .iter()
        .map(|d| (d.table_id.clone(), d.column_index))
        .collect();
    let gold_sensitive: BTreeSet<(String, usize)> = gold
        .columns
        .iter()
        .filter(|g| g.gold_level.is_sensitive())
        .map(|g| (g.table_id.clone(), g.column_index))
        .collect();
    let flagged = |o: &sentinel_core::pipeline::ScanOutput| -> BTreeSet<(String, usize)> {
        o.column_levels
            .iter()
            .filter(|c| c.level.is_sensitive())
            .map(|c| (c.table_id.clone(), c.column_index))
            .collect()
    };
    let fixture_subset = flagged(&out).is_subset(&cands);

    // Randomized reflection policies: any answer, including garbage.
    let mut rng = StdRng::seed_from_u64(0x5eed_0004);
    let mut violations = 0;
    for _ in 0..200 {
        let seed: u64 = rng.random();
        let gw = quiet_gateway().with_backend(
            "reflect",
            Arc::new(MockBackend::from_fn(move |req| {
                let h = req.user_prompt.bytes().fold(seed, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
                Ok(["non_sensitive", "moderate_sensitive", "high_sensitive", "severe", "low", "garbage", ""]
                    [(h % 7) as usize]
                    .to_string())
            })),
        );
        if !flagged(&reflection_run(&gw, &tables)).is_subset(&cands) {
            violations += 1;
        }
    }
    let ok = cands.len() == 10
        && cands.intersection(&gold_sensitive).count() == 6
        && (before - 0.600).abs() <= 0.001
        && (after - 0.857).abs() <= 0.001
        && fixture_subset
        && violations == 0;
    check(
        "4 reflection precision and subset",
        ok,
        format!(
            "{} candidates ({} gold-sensitive), precision {before:.3} -> {after:.3} (want 0.600 -> 0.857), subset violations {violations}/200",
            cands.len(),
            cands.intersection(&gold_sensitive).count()
        ),
    );
}

// ----------------------------------------------------------------------------
// 5. Replay determinism with zero network calls

#[test]
fn criterion_5_replay_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("reflection/manifest.jsonl");
    let fixture = fixtures().join("reflection/replay");
    let config = SentinelConfig::default();
    let abort = Arc::new(AbortTransport::default());
    let backends = vec![format!("replay:{}", fixture.display())];
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let m = execute_scan(
            &ScanRequest {
                manifest: &manifest,
                pipeline: Pipeline::DetectThenReflect,
                backends: &backends,
                out: &dir.path().join(run),
                config: &config,
            },
            abort.clone(),
        )
        .unwrap();
        digests.push(m.outputs);
    }
    let files = ["detections.jsonl", "reflections.jsonl", "column_levels.jsonl", "table_verdicts.jsonl", "run_manifest.json"];
    let identical = files
        .iter()
        .all(|f| std::fs::read(dir.path().join("a").join(f)).unwrap() == std::fs::read(dir.path().join("b").join(f)).unwrap());

    // A replay store wrapping a live backend on the abort transport still
    // never reaches it.
    let live = Arc::new(ChatCompletionBackend::new("http://127.0.0.1:9/v1/chat/completions", "m", None, abort.clone()));
    let store = ReplayStore::replay(&fixture.join("fixture.jsonl")).unwrap().with_inner(live);
    let gw = quiet_gateway().with_backend("reflect", Arc::new(store));
    let (_, tables, _) = load_corpus("reflection");
    let out = reflection_run(&gw, &tables);
    let same_as_cli = sentinel_core::pipeline::to_jsonl(&out.reflections)
        == std::fs::read(dir.path().join("a/reflections.jsonl")).unwrap();

    check(
        "5 replay determinism",
        identical && digests[0] == digests[1] && same_as_cli && abort.attempts() == 0,
        format!(
            "byte-identical: {identical}, engine matches CLI: {same_as_cli}, transport attempts: {}",
            abort.attempts()
        ),
    );
}

// ----------------------------------------------------------------------------
// 6. Retrieval totality, fallback, and rule ids in recorded prompts

#[test]
fn criterion_6_retrieval_and_grounded_prompts() {
    let books = fixtures().join("humanitarian/rulebooks");
    let ke = RuleBook::load(&books.join("ke.json")).unwrap();
    let default = RuleBook::load(&books.join("default.json")).unwrap();
    let store = RulebookStore::new(vec![ke.clone(), default.clone()]).unwrap();

    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    let mut codes: Vec<Option<String>> = vec![Some("KE".into()), None, Some(String::new())];
    while codes.len() < 100 {
        let a = rng.random_range(b'A'..=b'Z') as char;
        let b = rng.random_range(b'A'..=b'Z') as char;
        codes.push(Some(format!("{a}{b}")));
    }
    let wrong = codes
        .iter()
        .filter(|c| {
            let got = retrieve_rulebook(&store, c.as_deref());
            let want = if c.as_deref() == Some("KE") { "KE" } else { "default" };
            got.country != want
        })
        .count();

    // Record the assessment prompts for the corpus and look for rule ids.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("assess.jsonl");
    let script = MockScript::load(&fixtures().join("humanitarian/mock.json")).unwrap();
    let recorder = Arc::new(ReplayStore::record(&path, Arc::new(MockBackend::scripted(script))));
    let gw = quiet_gateway().with_backend("assess", recorder.clone());
    let (_, tables, _) = load_corpus("humanitarian");
    for t in &tables {
        assess_columns(t, retrieve_rulebook(&store, t.country.as_deref()), &gw, &DomainConfig::default()).unwrap();
    }
    recorder.flush().unwrap();
    let shipped = load_fixture(&fixtures().join("humanitarian/replay/fixture.jsonl")).unwrap();
    let mut grounded = 0;
    for fixture in [load_fixture(&path).unwrap(), shipped] {
        for t in &tables {
            let record = fixture
                .values()
                .find(|r| r.user_prompt.starts_with(&format!("Table: {}\n", t.title)))
                .expect("a recorded prompt per table");
            let (own, other) = if t.country.as_deref() == Some("KE") { (&ke, &default) } else { (&default, &ke) };
            if own.all_rules().all(|r| record.user_prompt.contains(&r.id))
                && !other.all_rules().any(|r| record.user_prompt.contains(&format!("- {}:", r.id)))
            {
                grounded += 1;
            }
        }
    }
    check(
        "6 retrieval totality and fallback",
        wrong == 0 && grounded == 2 * tables.len(),
        format!(
            "{} codes, {wrong} wrong retrievals; {grounded}/{} recorded prompts carry the retrieved rulebook's ids",
            codes.len(),
            2 * tables.len()
        ),
    );
}

// ----------------------------------------------------------------------------
// 7. Pattern detector on the clean corpus

#[test]
fn criterion_7_pattern_clean_corpus() {
    let start = Instant::now();
    let (_, tables, gold) = load_corpus("pattern_clean");
    let tax = Taxonomy::load_default();
    let rules = RuleSet::load_default(&tax).unwrap();
    let preds: Vec<DetectionVerdict> = tables
        .iter()
        .flat_map(|t| t.columns.iter().map(|c| detect_pattern(&t.id, c, &rules)))
        .collect();
    let report = score_types(&preds, &gold.columns, &tax, ScoreOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let types: BTreeSet<&str> = gold
        .columns
        .iter()
        .filter(|g| !g.gold_type.is_none())
        .map(|g| g.gold_type.as_str())
        .collect();
    check(
        "7 pattern detector sanity",
        preds.len() >= 200
            && types.len() >= 10
            && report.weighted.f1 == 1.0
            && report.macro_avg.f1 == 1.0
            && elapsed < Duration::from_secs(5),
        format!(
            "{} columns, {} types, weighted F1 {:.3}, macro F1 {:.3}, {:.2}s",
            preds.len(),
            types.len(),
            report.weighted.f1,
            report.macro_avg.f1,
            elapsed.as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------------------
// 8. Fail-closed contracts

const MALFORMED: [&str; 20] = [
    "",
    "   \n\n",
    "maybe",
    "sensitive?",
    "The column looks fine to me.",
    "Level: unknown",
    "{}",
    "[]",
    "null",
    "42",
    "{\"columns\": 5}",
    "{\"columns\": [{\"column_index\": 0}]}",
    "{\"columns\": [{\"level\": \"non_sensitive\"}, {\"level\": \"non_sensitive\"}]}",
    "{\"columns\": [{\"column_index\": 0, \"level\": \"tiny\"}]}",
    "```json\n{\"columns\": [\n```",
    "<html><body>502 Bad Gateway</body></html>",
    "non_sensitive or high_sensitive, hard to say",
    "N/A",
    "I cannot help with that.",
    "\u{0}\u{1}\u{2}",
];

#[test]
fn criterion_8_fail_closed() {
    let (_, tables, _) = load_corpus("reflection");
    let table = &tables[1];
    let tax = Taxonomy::load_default();
    let rules = RuleSet::load_default(&tax).unwrap();
    let detections: Vec<DetectionVerdict> = table.columns.iter().map(|c| detect_pattern(&table.id, c, &rules)).collect();
    let cands: Vec<DetectionVerdict> = candidates(&detections).into_iter().cloned().collect();
    let rulebook = RuleBook::load_default();
    let mut bad = Vec::new();
    let mut checked = 0;
    for (i, text) in MALFORMED.iter().enumerate() {
        let gw = quiet_gateway()
            .with_backend("reflect", Arc::new(MockBackend::fixed(text)))
            .with_backend("assess", Arc::new(MockBackend::fixed(text)));
        let reflections = reflect(table, &cands, &gw, &ReflectorConfig::default()).unwrap();
        let assessed = assess_columns(table, &rulebook, &gw, &DomainConfig::default()).unwrap();
        let levels: Vec<SensitivityLevel> = reflections
            .iter()
            .map(|r| r.level)
            .chain(assessed.iter().map(|d| d.level))
            .collect();
        checked += levels.len();
        if levels.iter().any(|l| *l != SensitivityLevel::ModerateSensitive)
            || reflections.len() != cands.len()
            || assessed.len() != table.column_count()
        {
            bad.push(i);
        }
    }
    check(
        "8 fail-closed contracts",
        bad.is_empty(),
        format!("{} malformed outputs, {checked} verdicts, non-moderate outputs at fixtures {bad:?}", MALFORMED.len()),
    );
}

// ----------------------------------------------------------------------------
// 9. Corpus-scale smoke

#[test]
fn criterion_9_corpus_scale_smoke() {
    use std::fmt::Write as _;
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(0x5eed_0009);
    let mut manifest = String::new();
    let headers = ["name", "email", "phone", "district", "age", "gps", "notes", "amount"];
    for t in 0..66 {
        let cols = if t < 15 { 32 } else { 31 };
        let mut csv = (0..cols)
            .map(|c| format!("{}_{c}", headers[c % headers.len()]))
            .collect::<Vec<_>>()
            .join(",");
        csv.push('\n');
        for _ in 0..rng.random_range(5..40) {
            let row: Vec<String> = (0..cols).map(|_| rng.random_range(0..10_000).to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        std::fs::write(dir.path().join(format!("t{t:02}.csv")), csv).unwrap();
        let _ = writeln!(
            manifest,
            "{}",
            serde_json::json!({"id": format!("t{t:02}"), "path": format!("t{t:02}.csv"), "title": format!("Table {t}")})
        );
    }
    let manifest_path = dir.path().join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest).unwrap();
    let out = dir.path().join("out");
    let m = execute_scan(
        &ScanRequest {
            manifest: &manifest_path,
            pipeline: Pipeline::PatternOnly,
            backends: &[],
            out: &out,
            config: &SentinelConfig::default(),
        },
        Arc::new(AbortTransport::default()),
    )
    .unwrap();
    let lines = |f: &str| std::fs::read_to_string(out.join(f)).unwrap().lines().count();
    let detections = lines("detections.jsonl");
    let levels = lines("column_levels.jsonl");
    let tables = lines("table_verdicts.jsonl");
    check(
        "9 corpus-scale smoke",
        m.tables == 66 && m.columns == 2061 && detections == 2061 && levels == 2061 && tables == 66,
        format!("{} tables, {} columns, {detections} detection verdicts, {levels} column levels", m.tables, m.columns),
    );
}
