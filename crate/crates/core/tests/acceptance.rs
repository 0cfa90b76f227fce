//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr,
//! uncaptured, and then asserts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use lvlm_fairness::audit::{bundle_answers, run_audit};
use lvlm_fairness::backends::{
    BackendConfig, BackendKind, BiasedOracleSpec, Dispatcher, MockEntry, MockTable, OracleCell, ResponseCache,
};
use lvlm_fairness::dataset::{
    parse_utkface_filenames, AgeGroup, Attribute, ClassVocabulary, Dataset, Demographics, FacetLoader, Gender, Group,
    PersonRecord, Race, SkinTone, Source, DEFAULT_SELECTED_CLASSES,
};
use lvlm_fairness::encoder::{BuiltinHashEmbedder, EmbeddingProvider, Encoder, EncoderError, Policy};
use lvlm_fairness::metrics::{
    balanced_resample, disparity, improvement_pct, response_shift, Aggregation, ChoiceAnswer, Outcome, RecallCell,
};
use lvlm_fairness::mitigation::{
    build_rationale_prompt, mitigate_all, mitigate_case, parse_rationale, MitigationOptions,
};
use lvlm_fairness::prompts::{render_for_audit, render_single_choice, PromptStyle, SingleChoiceVariant, RACE_LABELS};
use lvlm_fairness::report::{emit_tables, AuditReport, Formats, ModelAudit, RunMetadata};

const PUBLISHED_RECALLS: &str = include_str!("fixtures/published/recall_disparity.csv");
const PUBLISHED_MITIGATION: &str = include_str!("fixtures/published/mitigation.csv");
const PUBLISHED_SHIFT: &str = include_str!("fixtures/published/response_shift.csv");

const GYM_RAW: &str = include_str!("fixtures/transcripts/gymnast_raw_reply.txt");
const GYM_RATIONALE: &str = include_str!("fixtures/transcripts/gymnast_rationale_reply.txt");
const GYM_VISUAL: &str = include_str!("fixtures/transcripts/gymnast_visual_answers.txt");
const GYM_FINAL_PROMPT: &str = include_str!("fixtures/transcripts/gymnast_final_prompt.txt");
const GYM_FINAL: &str = include_str!("fixtures/transcripts/gymnast_final_reply.txt");

const GD_TOLERANCE: f64 = 5e-5;
const PCT_TOLERANCE: f64 = 0.01;

fn verdict(name: &str, failures: &[String], detail: &str) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{status} {name}: {detail}");
    for f in failures.iter().take(25) {
        let _ = writeln!(err, "    {f}");
    }
    drop(err);
    assert!(failures.is_empty(), "{name}: {} failing checks", failures.len());
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            headers
                .iter()
                .map(str::to_string)
                .zip(r.iter().map(str::to_string))
                .collect()
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key]
        .parse()
        .unwrap_or_else(|_| panic!("bad number in {key}: {}", row[key]))
}

fn facet_record(id: usize, class: &str, gender: Gender) -> PersonRecord {
    PersonRecord {
        image_id: format!("img{id:05}"),
        image_path: PathBuf::from(format!("/nonexistent/img{id:05}.jpg")),
        source: Source::Facet,
        person_class: Some(class.to_string()),
        demographics: Demographics {
            gender,
            ..Demographics::default()
        },
        person_count: 1,
    }
}

fn dataset_of(records: Vec<PersonRecord>) -> Dataset {
    Dataset {
        source: Source::Facet,
        records,
        vocabulary: None,
        provenance: Vec::new(),
        rejections: Vec::new(),
    }
}

fn mock_dispatcher(id: &str, table: MockTable, cache: Arc<ResponseCache>) -> Dispatcher {
    let config = BackendConfig::new(
        id,
        id,
        BackendKind::MockTable {
            table: None,
            entries: Vec::new(),
        },
    );
    Dispatcher::new(config, Arc::new(table), cache)
}

fn strip(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}

fn cell(recall: f64, group: &str) -> RecallCell {
    RecallCell {
        class: None,
        group: group.to_string(),
        n: 0,
        k: 0,
        recall,
    }
}

#[test]
fn metric_arithmetic_reproduces_published_disparities() {
    let start = Instant::now();
    let rows = csv_rows(PUBLISHED_RECALLS);
    let mut failures = Vec::new();
    for row in &rows {
        let gd = disparity(
            &cell(num(row, "r_first"), "first"),
            &cell(num(row, "r_second"), "second"),
        )
        .unwrap();
        let published = num(row, "gd");
        if (gd - published).abs() > GD_TOLERANCE {
            failures.push(format!(
                "{} {} {}: {:.4} - {:.4} = {gd:+.6}, published {published:+.4}",
                row["attribute"],
                row["model"],
                row["prompt_style"],
                num(row, "r_first"),
                num(row, "r_second")
            ));
        }
    }
    let anchors = [(0.7124, 0.7386, -0.0262), (0.7473, 0.6185, 0.1288)];
    for (a, b, want) in anchors {
        let gd = disparity(&cell(a, "first"), &cell(b, "second")).unwrap();
        if (gd - want).abs() > GD_TOLERANCE {
            failures.push(format!("anchor {a} - {b} = {gd}, want {want}"));
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(1) {
        failures.push(format!("took {elapsed:?}"));
    }
    let models: std::collections::BTreeSet<_> = rows.iter().map(|r| r["model"].clone()).collect();
    verdict(
        "metric arithmetic",
        &failures,
        &format!(
            "{} published GD cells over {} models, tolerance {GD_TOLERANCE:e}, {} off",
            rows.len(),
            models.len(),
            failures.len()
        ),
    );
}

#[test]
fn improvement_arithmetic_reproduces_published_percentages() {
    let rows = csv_rows(PUBLISHED_MITIGATION);
    let mut failures = Vec::new();
    for row in &rows {
        let pct = improvement_pct(num(row, "raw"), num(row, "with_rationale")).unwrap();
        let published = num(row, "improvement_pct");
        if (pct - published).abs() > PCT_TOLERANCE {
            failures.push(format!(
                "{} {}: {:.4} -> {:.4} gives {pct:.4}%, published {published:.2}%",
                row["model"],
                row["metric"],
                num(row, "raw"),
                num(row, "with_rationale")
            ));
        }
    }
    for (raw, after, want) in [(0.1086, 0.0719, -33.79), (0.8218, 0.9550, 16.21)] {
        let pct = improvement_pct(raw, after).unwrap();
        if (pct - want).abs() > PCT_TOLERANCE {
            failures.push(format!("anchor {raw} -> {after} = {pct}, want {want}"));
        }
    }
    verdict(
        "improvement arithmetic",
        &failures,
        &format!("{} published percentages, tolerance {PCT_TOLERANCE} pp", rows.len()),
    );
}

fn choice_reply(answer: ChoiceAnswer) -> &'static str {
    match answer {
        ChoiceAnswer::Yes => "A. Yes",
        ChoiceAnswer::No => "B. No",
        ChoiceAnswer::Unknown => "C. Unknown",
    }
}

#[test]
fn response_shift_identities_and_scripted_replay() {
    let rows = csv_rows(PUBLISHED_SHIFT);
    let mut failures = Vec::new();
    for row in &rows {
        let sum = num(row, "yes") + num(row, "no") + num(row, "unknown");
        if sum != num(row, "raw_total") {
            failures.push(format!(
                "{} {}: row sums to {sum}, published {}",
                row["model"], row["raw"], row["raw_total"]
            ));
        }
    }

    // One image per published transition, scripted through the whole
    // mitigation pipeline.
    let gimini: Vec<_> = rows.iter().filter(|r| r["model"].starts_with("Gimini")).collect();
    let vocabulary = ClassVocabulary::facet_default();
    let mut transitions = Vec::new();
    for row in &gimini {
        let from = ChoiceAnswer::from_label(Some(&row["raw"]));
        for (to, key) in [
            (ChoiceAnswer::Yes, "yes"),
            (ChoiceAnswer::No, "no"),
            (ChoiceAnswer::Unknown, "unknown"),
        ] {
            for _ in 0..num(row, key) as usize {
                transitions.push((from, to));
            }
        }
    }
    let records: Vec<PersonRecord> = (0..transitions.len())
        .map(|i| facet_record(i, "nurse", if i % 3 == 0 { Gender::Female } else { Gender::Male }))
        .collect();
    let prompt = render_single_choice(&vocabulary, &records[0], "nurse", SingleChoiceVariant::P2).unwrap();
    let rationale_prompt = build_rationale_prompt(prompt.question(), &prompt.candidate_labels);
    let rationale_reply =
        "Sub-questions:\n1. Is the person wearing scrubs?\nSub-answers:\n1. Uncertain\nAnswer: Unknown";
    let mut table = MockTable::new();
    table.insert("*", &rationale_prompt, rationale_reply);
    table.insert("*", "Is the person wearing scrubs?", "Possibly.");
    for (r, (from, to)) in records.iter().zip(&transitions) {
        table.insert(&r.image_id, &prompt.text, choice_reply(*from));
        table.insert_entry(MockEntry {
            image_id: r.image_id.clone(),
            text: Some(format!("Rationale: scripted.\nAnswer: {}", to.label())),
            ..MockEntry::default()
        });
    }
    let cache = Arc::new(ResponseCache::in_memory());
    let mut config = BackendConfig::new(
        "scripted",
        "scripted",
        BackendKind::MockTable {
            table: None,
            entries: Vec::new(),
        },
    );
    config.max_in_flight = 8;
    let backend = Arc::new(table);
    let target = Dispatcher::new(config.clone(), backend.clone(), cache.clone());
    let cases: Vec<_> = records
        .iter()
        .map(|r| {
            (
                r.clone(),
                render_for_audit(PromptStyle::SingleChoice, &vocabulary, r).unwrap(),
            )
        })
        .collect();
    let bundles: Vec<_> = mitigate_all(
        &target,
        &target,
        &cases,
        &Encoder::regex_only(),
        &MitigationOptions::default(),
    )
    .into_iter()
    .collect::<Result<_, _>>()
    .unwrap();
    let (before, after) = bundle_answers(&bundles);
    let matrix = response_shift(&before, &after).unwrap();
    for row in &gimini {
        let from = ChoiceAnswer::from_label(Some(&row["raw"]));
        if matrix.row_sum(from) as f64 != num(row, "raw_total") {
            failures.push(format!("row {from}: {} vs {}", matrix.row_sum(from), row["raw_total"]));
        }
        for (to, key) in [
            (ChoiceAnswer::Yes, "yes"),
            (ChoiceAnswer::No, "no"),
            (ChoiceAnswer::Unknown, "unknown"),
        ] {
            if matrix.get(from, to) as f64 != num(row, key) {
                failures.push(format!("{from} -> {to}: {} vs {}", matrix.get(from, to), row[key]));
            }
        }
    }
    verdict(
        "response shift",
        &failures,
        &format!(
            "{} published rows; scripted replay of {} images: {:?}",
            rows.len(),
            bundles.len(),
            matrix.counts
        ),
    );
}

fn write_facet_table(path: &Path, rows: &[[String; 6]]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(["image_id", "class", "person_count", "gender", "skin_tone", "age"])
        .unwrap();
    for r in rows {
        w.write_record(r).unwrap();
    }
    w.flush().unwrap();
}

/// Label for index `i` from consecutive blocks of the given sizes.
fn by_blocks<'a>(i: usize, blocks: &[(&'a str, usize)]) -> &'a str {
    let mut end = 0;
    for &(label, n) in blocks {
        end += n;
        if i < end {
            return label;
        }
    }
    panic!("index {i} beyond blocks");
}

#[test]
fn dataset_partitions_match_published_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut check = |what: &str, got: usize, want: usize| {
        if got != want {
            failures.push(format!("{what}: {got}, want {want}"));
        }
    };

    // Full-scale Facet-style table: the published marginals, each attribute
    // laid out independently, plus rows the filter must drop.
    let admitted = 5481;
    let gender = [("male", 3821), ("female", 1660)];
    let age = [("young", 1286), ("middle", 3145), ("old", 468), ("unknown", 582)];
    let skin = [("light", 2402), ("medium", 1641), ("dark", 325), ("", 1113)];
    let mut rows = Vec::new();
    for i in 0..admitted {
        rows.push([
            format!("f{i}"),
            DEFAULT_SELECTED_CLASSES[i % 13].to_string(),
            "1".into(),
            by_blocks(i, &gender).into(),
            by_blocks((i * 7919) % admitted, &skin).into(),
            by_blocks((i * 104_729) % admitted, &age).into(),
        ]);
    }
    for i in 0..400 {
        rows.push([
            format!("crowd{i}"),
            "nurse".into(),
            "2".into(),
            "female".into(),
            "".into(),
            "".into(),
        ]);
    }
    for i in 0..250 {
        rows.push([
            format!("other{i}"),
            "doctor".into(),
            "1".into(),
            "male".into(),
            "".into(),
            "".into(),
        ]);
    }
    let full = tmp.path().join("full.csv");
    write_facet_table(&full, &rows);
    let mut all: Vec<String> = DEFAULT_SELECTED_CLASSES.iter().map(|s| s.to_string()).collect();
    let selected = all.clone();
    all.push("doctor".into());
    let vocabulary = ClassVocabulary::new(all, selected).unwrap();
    let facet = FacetLoader::default().load(&full, &vocabulary).unwrap();
    check("facet admitted", facet.len(), 5481);
    check("facet rejected", facet.rejections.len(), 650);
    check("male", facet.count_of(Group::Gender(Gender::Male)), 3821);
    check("female", facet.count_of(Group::Gender(Gender::Female)), 1660);
    for (group, want) in [
        (Group::Age(AgeGroup::Young), 1286),
        (Group::Age(AgeGroup::Middle), 3145),
        (Group::Age(AgeGroup::Old), 468),
        (Group::Age(AgeGroup::Unknown), 582),
        (Group::SkinTone(SkinTone::Light), 2402),
        (Group::SkinTone(SkinTone::Medium), 1641),
        (Group::SkinTone(SkinTone::Dark), 325),
        (Group::SkinTone(SkinTone::Unknown), 1113),
    ] {
        check(&format!("facet {group}"), facet.count_of(group), want);
    }

    // Full-scale UTKFace-style directory.
    let dir = tmp.path().join("utk");
    fs::create_dir(&dir).unwrap();
    let races = [("0", 10_222), ("1", 4558), ("2", 4027), ("3", 3586), ("4", 1713)];
    let genders = [("0", 12_582), ("1", 11_524)];
    let total = 24_106;
    for i in 0..total {
        let name = format!(
            "{}_{}_{}_2017{i:010}.jpg.chip.jpg",
            1 + i % 90,
            by_blocks(i, &genders),
            by_blocks((i * 7919) % total, &races)
        );
        fs::File::create(dir.join(name)).unwrap();
    }
    for bad in [
        "61_1_20170109142408075.jpg.chip.jpg",
        "x_0_0_1.jpg",
        "39_1_20170116174525125.jpg.chip.jpg",
    ] {
        fs::File::create(dir.join(bad)).unwrap();
    }
    let utk = parse_utkface_filenames(&dir).unwrap();
    check("utk admitted", utk.len(), 24_106);
    check("utk rejected", utk.rejections.len(), 3);
    check("utk male", utk.count_of(Group::Gender(Gender::Male)), 12_582);
    check("utk female", utk.count_of(Group::Gender(Gender::Female)), 11_524);
    let race_total: usize = [Race::White, Race::Black, Race::Asian, Race::Indian, Race::Others]
        .iter()
        .zip(races)
        .map(|(&r, (_, want))| {
            let got = utk.count_of(Group::Race(r));
            check(&format!("utk {r}"), got, want);
            got
        })
        .sum();
    check("utk race total", race_total, 24_106);

    // 100-row table with a hand-counted outcome: rows 0..=59 valid, 60..=79
    // multi-person, 80..=89 non-selected class, 90..=94 missing person
    // count, 95..=99 unrecognized gender.
    let mut small = Vec::new();
    for i in 0..100 {
        let (class, count, gender) = match i {
            0..=59 => ("gymnast", "1", if i < 25 { "female" } else { "male" }),
            60..=79 => ("gymnast", "3", "male"),
            80..=89 => ("doctor", "1", "male"),
            90..=94 => ("nurse", "", "female"),
            _ => ("nurse", "1", "robot"),
        };
        small.push([
            format!("s{i}"),
            class.into(),
            count.into(),
            gender.into(),
            "5".into(),
            "40".into(),
        ]);
    }
    let small_path = tmp.path().join("small.csv");
    write_facet_table(&small_path, &small);
    let small = FacetLoader::default().load(&small_path, &vocabulary).unwrap();
    check("small admitted", small.len(), 60);
    check("small rejected", small.rejections.len(), 40);
    check("small female", small.count_of(Group::Gender(Gender::Female)), 25);
    check(
        "small medium skin",
        small.count_of(Group::SkinTone(SkinTone::Medium)),
        60,
    );

    verdict(
        "dataset partitions",
        &failures,
        &format!(
            "facet {} admitted, utk {} admitted, small {} admitted",
            facet.len(),
            utk.len(),
            small.len()
        ),
    );
}

const ORACLE_SEED: u64 = 20_240_917;

fn oracle_population(per_cell: usize) -> Vec<PersonRecord> {
    let mut records = Vec::new();
    for class in ["nurse", "skateboarder"] {
        for gender in [Gender::Male, Gender::Female] {
            for _ in 0..per_cell {
                let id = records.len();
                records.push(facet_record(id, class, gender));
            }
        }
    }
    records
}

fn oracle_spec() -> BiasedOracleSpec {
    let cell = |class: &str, group: &str, p: f64| OracleCell {
        class: Some(class.into()),
        group: group.into(),
        p,
    };
    BiasedOracleSpec {
        cells: vec![
            cell("nurse", "Male", 0.55),
            cell("nurse", "Female", 0.85),
            cell("skateboarder", "Male", 0.9),
            cell("skateboarder", "Female", 0.6),
        ],
        ..BiasedOracleSpec::new(ORACLE_SEED, Attribute::Gender)
    }
}

fn oracle_dispatcher(records: &[PersonRecord], cache: Arc<ResponseCache>) -> Dispatcher {
    let config = BackendConfig::new("oracle", "oracle", BackendKind::MockBiasedOracle(oracle_spec()));
    let backend = config.build(records).unwrap();
    Dispatcher::new(config, backend, cache)
}

/// The oracle's decision rule, written out from its definition.
fn brute_force_correct(image_id: &str, prompt: &str, p: f64) -> bool {
    let digest = hex::encode(Sha256::digest(prompt.as_bytes()));
    let mut bytes = b"biased-oracle/v1".to_vec();
    bytes.extend(ORACLE_SEED.to_le_bytes());
    bytes.push(0);
    bytes.extend(image_id.as_bytes());
    bytes.push(0);
    bytes.extend(digest.as_bytes());
    let hash = Sha256::digest(&bytes);
    let word = u64::from_be_bytes(hash[..8].try_into().unwrap());
    ((word >> 11) as f64) * (1.0 / (1u64 << 53) as f64) < p
}

fn cell_p(class: &str, gender: Gender) -> f64 {
    match (class, gender) {
        ("nurse", Gender::Male) => 0.55,
        ("nurse", Gender::Female) => 0.85,
        ("skateboarder", Gender::Male) => 0.9,
        ("skateboarder", Gender::Female) => 0.6,
        _ => unreachable!(),
    }
}

#[test]
fn oracle_audit_equals_brute_force_enumeration() {
    let start = Instant::now();
    let records = oracle_population(500);
    let dataset = dataset_of(records.clone());
    let vocabulary = ClassVocabulary::facet_default();
    let mut failures = Vec::new();
    for style in [PromptStyle::Direct, PromptStyle::SingleChoice] {
        let dispatcher = oracle_dispatcher(&records, Arc::new(ResponseCache::in_memory()));
        let run = run_audit(
            &dataset,
            &vocabulary,
            &dispatcher,
            &Encoder::builtin(),
            style,
            Policy::RegexThenEmbedding,
        );
        if !run.failures.is_empty() {
            failures.push(format!("{style}: {} audit failures", run.failures.len()));
        }

        // (class, male?) -> (k, n)
        let mut counts: BTreeMap<(String, bool), (usize, usize)> = BTreeMap::new();
        for r in &records {
            let class = r.person_class.clone().unwrap();
            let prompt = render_for_audit(style, &vocabulary, r).unwrap();
            let ok = brute_force_correct(&r.image_id, &prompt.text, cell_p(&class, r.demographics.gender));
            let e = counts
                .entry((class, r.demographics.gender == Gender::Male))
                .or_default();
            e.0 += usize::from(ok);
            e.1 += 1;
        }
        let recall = |(k, n): (usize, usize)| k as f64 / n as f64;
        let total = |male: bool| {
            counts
                .iter()
                .filter(|((_, m), _)| *m == male)
                .fold((0, 0), |(k, n), (_, &(a, b))| (k + a, n + b))
        };
        let expected_gd = recall(total(true)) - recall(total(false));

        let audit = ModelAudit::build("oracle", style.name(), &run.outcomes, Aggregation::Micro, false, None);
        let d = &audit.disparities[0];
        if d.overall_gd.to_bits() != expected_gd.to_bits()
            || d.first_recall.to_bits() != recall(total(true)).to_bits()
            || d.second_recall.to_bits() != recall(total(false)).to_bits()
        {
            failures.push(format!(
                "{style}: overall GD {} vs enumerated {expected_gd}",
                d.overall_gd
            ));
        }
        for c in &d.per_class {
            let want = recall(counts[&(c.class.clone(), true)]) - recall(counts[&(c.class.clone(), false)]);
            if c.gd.map(f64::to_bits) != Some(want.to_bits()) {
                failures.push(format!("{style} {}: GD {:?} vs enumerated {want}", c.class, c.gd));
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(10) {
        failures.push(format!("took {elapsed:?}"));
    }
    verdict(
        "oracle equivalence",
        &failures,
        &format!("2 classes x 2 groups x 500 images, 2 prompt styles, {elapsed:.2?}"),
    );
}

#[test]
fn resampling_properties_on_oracle_population() {
    let records = oracle_population(1000);
    let dataset = dataset_of(records.clone());
    let dispatcher = oracle_dispatcher(&records, Arc::new(ResponseCache::in_memory()));
    let run = run_audit(
        &dataset,
        &ClassVocabulary::facet_default(),
        &dispatcher,
        &Encoder::regex_only(),
        PromptStyle::Direct,
        Policy::RegexOnly,
    );
    let outcomes: Vec<Outcome> = run.outcomes;
    let male = Group::Gender(Gender::Male);
    let female = Group::Gender(Gender::Female);
    let full =
        ModelAudit::build("oracle", "direct", &outcomes, Aggregation::Micro, false, None).disparities[0].overall_gd;

    let mut failures = Vec::new();
    let mut detail = Vec::new();
    for n in [500, 1000, 1500] {
        let s = balanced_resample(&outcomes, male, female, n, 20, 0).unwrap();
        detail.push(format!("n={n} mean {:.4} se {:.4}", s.mean, s.standard_error));
        if (s.mean - full).abs() > 3.0 * s.standard_error {
            failures.push(format!(
                "n={n}: mean {} vs full {full}, se {}",
                s.mean, s.standard_error
            ));
        }
        let again = balanced_resample(&outcomes, male, female, n, 20, 0).unwrap();
        if again != s {
            failures.push(format!("n={n}: replay differs"));
        }
    }
    let shrinks = (0..20u64)
        .filter(|&seed| {
            let small = balanced_resample(&outcomes, male, female, 500, 20, seed).unwrap();
            let large = balanced_resample(&outcomes, male, female, 1500, 20, seed).unwrap();
            large.standard_error <= small.standard_error
        })
        .count();
    if shrinks < 19 {
        failures.push(format!("error(1500) <= error(500) for only {shrinks} of 20 seeds"));
    }
    verdict(
        "resampling",
        &failures,
        &format!(
            "full GD {full:.4}; {}; error shrinks for {shrinks}/20 seeds",
            detail.join(", ")
        ),
    );
}

/// The builtin embedder with every vector multiplied by a constant.
struct Scaled {
    inner: BuiltinHashEmbedder,
    factor: f64,
    id: String,
}

impl EmbeddingProvider for Scaled {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncoderError> {
        Ok(self
            .inner
            .embed_batch(texts)?
            .into_iter()
            .map(|v| v.into_iter().map(|x| x * self.factor).collect())
            .collect())
    }
}

#[test]
fn encoder_properties() {
    let mut failures = Vec::new();
    let occupations: Vec<String> = DEFAULT_SELECTED_CLASSES.iter().map(|s| s.to_string()).collect();
    let races: Vec<String> = RACE_LABELS.iter().map(|s| s.to_string()).collect();
    let builtin = Encoder::builtin();
    for (policy, encoder) in [(Policy::RegexOnly, &builtin), (Policy::EmbeddingOnly, &builtin)] {
        for set in [&occupations, &races] {
            for label in set.iter() {
                let got = encoder.normalize(label, set, policy).unwrap().label;
                if got.as_deref() != Some(label.as_str()) {
                    failures.push(format!("{policy:?}: `{label}` matched {got:?}"));
                }
            }
        }
    }

    let probes = [
        "a nurse in scrubs",
        "This person is riding a skateboard.",
        "Probably a gardener tending plants",
        "someone playing the guitar on stage",
        "The answer is: dancer",
        "an asian woman",
        "I think the person is Indian.",
        "looks like a horse rider",
        "student",
        "unsure",
    ];
    for factor in [1e-3, 0.5, 7.0, 1e4] {
        let scaled = Encoder::with_provider(Arc::new(Scaled {
            inner: BuiltinHashEmbedder::default(),
            factor,
            id: format!("scaled-{factor}"),
        }));
        for set in [&occupations, &races] {
            for probe in probes {
                let a = builtin.normalize(probe, set, Policy::EmbeddingOnly).unwrap().label;
                let b = scaled.normalize(probe, set, Policy::EmbeddingOnly).unwrap().label;
                if a != b {
                    failures.push(format!("x{factor} `{probe}`: {a:?} vs {b:?}"));
                }
            }
        }
    }

    let options: Vec<String> = ["Yes", "No", "Unknown"].iter().map(|s| s.to_string()).collect();
    let answer_line = GYM_FINAL.lines().rev().find(|l| !l.trim().is_empty()).unwrap();
    for (text, want) in [(answer_line, "Yes"), (strip(GYM_RAW), "Unknown")] {
        for policy in [Policy::RegexOnly, Policy::RegexThenEmbedding] {
            let got = builtin.normalize(text, &options, policy).unwrap().label;
            if got.as_deref() != Some(want) {
                failures.push(format!(
                    "{policy:?} `{}`: {got:?}, want {want}",
                    &text[..text.len().min(40)]
                ));
            }
        }
    }
    verdict(
        "encoder properties",
        &failures,
        "13 occupation and 5 race self-matches under 2 policies, 4 scale factors, 2 transcript answers",
    );
}

#[test]
fn mitigation_replays_transcripts() {
    let record = facet_record(1, "gymnast", Gender::Female);
    let vocabulary = ClassVocabulary::facet_default();
    let prompt = render_single_choice(&vocabulary, &record, "gymnast", SingleChoiceVariant::P2).unwrap();
    let rationale_prompt = build_rationale_prompt(prompt.question(), &prompt.candidate_labels);
    let mut generator = MockTable::new();
    generator.insert("*", &rationale_prompt, strip(GYM_RATIONALE));
    let mut target = MockTable::new();
    target.insert(&record.image_id, &prompt.text, strip(GYM_RAW));
    let questions = parse_rationale(GYM_RATIONALE).unwrap().sub_questions;
    for (q, a) in questions.iter().zip(GYM_VISUAL.lines()) {
        target.insert(&record.image_id, q, a);
    }
    target.insert(&record.image_id, strip(GYM_FINAL_PROMPT), strip(GYM_FINAL));
    let cache = Arc::new(ResponseCache::in_memory());
    let generator = mock_dispatcher("generator", generator, cache.clone());
    let target = mock_dispatcher("target", target, cache);

    let bundle = mitigate_case(
        &generator,
        &target,
        &record,
        &prompt,
        &Encoder::builtin(),
        &MitigationOptions::default(),
    )
    .unwrap();
    let mut failures = Vec::new();
    if bundle.raw_answer.as_deref() != Some("Unknown") {
        failures.push(format!("raw answer {:?}", bundle.raw_answer));
    }
    if bundle.final_answer.as_deref() != Some("Yes") {
        failures.push(format!("final answer {:?}", bundle.final_answer));
    }
    if bundle.final_prompt.as_deref() != Some(strip(GYM_FINAL_PROMPT)) {
        failures.push("final prompt differs from transcript".into());
    }
    let rerendered = bundle.rerender();
    if rerendered != bundle.requests {
        failures.push("re-rendered requests differ".into());
    }
    let json = serde_json::to_string(&bundle).unwrap();
    let restored: lvlm_fairness::mitigation::RationaleBundle = serde_json::from_str(&json).unwrap();
    if restored.rerender() != bundle.requests {
        failures.push("requests differ after a serialization round trip".into());
    }
    verdict(
        "mitigation replay",
        &failures,
        &format!(
            "{} requests re-rendered, flags {:?}",
            bundle.requests.len(),
            bundle.flags
        ),
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn audit_into(dataset: &Dataset, cache_path: &Path, out: &Path) -> (u64, AuditReport) {
    let cache = Arc::new(ResponseCache::open(cache_path).unwrap());
    let dispatcher = oracle_dispatcher(&dataset.records, cache);
    let vocabulary = ClassVocabulary::facet_default();
    let mut report = AuditReport::new(RunMetadata {
        dataset_digest: dataset.manifest_digest(),
        backend_ids: vec!["oracle".into()],
        models: vec!["oracle".into()],
        prompt_style: "single-choice".into(),
        template_ids: vec!["p2".into()],
        encoder_policy: Policy::RegexThenEmbedding,
        embed_provider: Some("builtin".into()),
        seed: 3,
        aggregation: Aggregation::Micro,
    });
    let run = run_audit(
        dataset,
        &vocabulary,
        &dispatcher,
        &Encoder::builtin(),
        PromptStyle::SingleChoice,
        Policy::RegexThenEmbedding,
    );
    report.models.push(ModelAudit::build(
        "oracle",
        "single-choice",
        &run.outcomes,
        Aggregation::Micro,
        true,
        Some((
            &lvlm_fairness::report::ResampleSpec {
                sizes: vec![100, 200],
                trials: 5,
            },
            3,
        )),
    ));
    emit_tables(&report, out, Formats::default()).unwrap();
    (dispatcher.network_calls(), report)
}

#[test]
fn warm_cache_rerun_is_silent_and_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = dataset_of(oracle_population(150));
    let cache = tmp.path().join("cache.jsonl");
    let (cold_calls, cold) = audit_into(&dataset, &cache, &tmp.path().join("cold"));
    let (warm_calls, warm) = audit_into(&dataset, &cache, &tmp.path().join("warm"));
    let mut failures = Vec::new();
    if cold_calls != 600 {
        failures.push(format!("cold run made {cold_calls} calls"));
    }
    if warm_calls != 0 {
        failures.push(format!("warm run made {warm_calls} calls"));
    }
    if cold != warm {
        failures.push("reports differ".into());
    }
    let (a, b) = (dir_bytes(&tmp.path().join("cold")), dir_bytes(&tmp.path().join("warm")));
    if a != b {
        failures.push("emitted files differ".into());
    }
    verdict(
        "cache determinism",
        &failures,
        &format!(
            "cold {cold_calls} calls, warm {warm_calls} calls, {} files compared",
            a.len()
        ),
    );
}
