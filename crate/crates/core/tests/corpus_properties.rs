use std::collections::BTreeSet;
use std::path::Path;

use ctiner::corpus::{
    build_vocab, extract_entities, load_conll, parse_conll, spans_to_bio, split_manifest, EntitySpan, LabelScheme,
    LabeledCorpus, PAD_INDEX, UNK_INDEX,
};
use ctiner::pos_tagger::RuleTagger;
use proptest::prelude::*;

/// Non-overlapping spans over `len` tokens, from (gap, length, type) triples.
fn spans_strategy() -> impl Strategy<Value = (Vec<EntitySpan>, usize)> {
    proptest::collection::vec((0usize..3, 1usize..4, 0usize..3), 0..8).prop_map(|parts| {
        let types = ["HackOrg", "Tool", "Time"];
        let mut spans = Vec::new();
        let mut pos = 0;
        for (gap, len, t) in parts {
            pos += gap;
            spans.push(EntitySpan::new(types[t], pos, pos + len - 1));
            pos += len;
        }
        let len = pos.max(1) + 1;
        (spans, len)
    })
}

fn corpus_of(n: usize) -> LabeledCorpus {
    let mut text = String::new();
    for i in 0..n {
        text.push_str(&format!("w{i} B-Tool\nx{} O\n\n", i % 7));
    }
    parse_conll(&text, Path::new("mem"), &LabelScheme::open(), &RuleTagger).unwrap()
}

proptest! {
    #[test]
    fn spans_survive_a_bio_roundtrip((spans, len) in spans_strategy()) {
        let bio = spans_to_bio(&spans, len);
        prop_assert_eq!(bio.len(), len);
        prop_assert_eq!(extract_entities(&bio), spans);
    }

    #[test]
    fn extraction_matches_interval_enumeration(labels in proptest::collection::vec(
        prop_oneof![Just("O"), Just("B-A"), Just("I-A"), Just("B-B"), Just("I-B")], 0..14)) {
        // Well-formed inputs only: repair happens at load time.
        let mut fixed: Vec<String> = Vec::new();
        for l in &labels {
            let prev_type = fixed.last().and_then(|p| p.get(2..)).map(str::to_string);
            match l.strip_prefix("I-") {
                Some(t) if prev_type.as_deref() != Some(t) => fixed.push(format!("B-{t}")),
                _ => fixed.push(l.to_string()),
            }
        }
        let n = fixed.len();
        let mut brute = BTreeSet::new();
        for i in 0..n {
            let Some(t) = fixed[i].strip_prefix("B-") else { continue };
            for j in i..n {
                let inside = (i + 1..=j).all(|x| fixed[x] == format!("I-{t}"));
                let closed = j + 1 == n || fixed[j + 1] != format!("I-{t}");
                if inside && closed {
                    brute.insert((t.to_string(), i, j));
                }
            }
        }
        let ours: BTreeSet<_> = extract_entities(&fixed).into_iter().map(|s| (s.entity_type, s.start, s.end)).collect();
        prop_assert_eq!(ours, brute);
    }

    #[test]
    fn splits_are_deterministic_disjoint_and_covering(n in 3usize..60, seed in any::<u64>()) {
        let c = corpus_of(n);
        let a = split_manifest(&c, (0.7, 0.15, 0.15), seed).unwrap();
        let b = split_manifest(&c, (0.7, 0.15, 0.15), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let all: Vec<&String> = a.train.iter().chain(&a.valid).chain(&a.test).collect();
        let unique: BTreeSet<&String> = all.iter().copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(unique.len(), n);
    }

    #[test]
    fn vocabulary_is_a_bijection_over_regular_indices(n in 3usize..30, min_count in 1usize..3) {
        let v = build_vocab(&corpus_of(n), min_count);
        for table in [&v.words, &v.chars, &v.pos] {
            prop_assert_eq!(table.symbol(PAD_INDEX), "<pad>");
            prop_assert_eq!(table.symbol(UNK_INDEX), "<unk>");
            for i in 2..table.len() {
                prop_assert_eq!(table.get(table.symbol(i)), Some(i));
            }
        }
    }
}

/// Runs when `CTINER_DNRTI` points at the full DNRTI file.
#[test]
fn dnrti_counts_when_available() {
    let Ok(path) = std::env::var("CTINER_DNRTI") else {
        eprintln!("CTINER_DNRTI not set; skipping");
        return;
    };
    let c = load_conll(Path::new(&path), &LabelScheme::dnrti()).unwrap();
    assert_eq!(c.label_inventory.len(), 13);
    let (sentences, entities) = (c.len(), c.entity_count());
    if (sentences, entities) != (6574, 36412) {
        eprintln!("DNRTI release differs from the published counts: {sentences} sentences, {entities} entities");
    }
}
