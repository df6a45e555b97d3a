//! Every closed-form statistic against the brute-force oracle on random synthetic datasets.

use value_probe::stats::{coref_head_stats, image_to_text_heads, mi_aggregate, relation_head_stats, Direction, PairStatsOptions};
use value_probe::synth::oracle::{brute_force_stats, OracleError, MAX_SAMPLES};
use value_probe::synth::{generate, ModelShape, PlantSpec, SynthConfig};
use value_probe::trace::{Architecture, CorefLabel};

fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: rows");
    for (l, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(x.len(), y.len(), "{what}: row {l} width");
        for (h, (p, q)) in x.iter().zip(y).enumerate() {
            assert!((p - q).abs() <= 1e-7, "{what} [{l}][{h}]: {p} vs oracle {q}");
        }
    }
}

fn config(seed: u64, architecture: Architecture) -> SynthConfig {
    SynthConfig {
        seed,
        samples: 30,
        model: ModelShape { architecture, ..ModelShape::default() },
        embeddings: false,
        plants: vec![
            PlantSpec::CorefHead { layer: 0, head: 1, label: CorefLabel::Clothing, strength: 0.7 },
            PlantSpec::RelationHead { layer: 1, head: 0, predicate: "wearing".into(), strength: 0.7 },
        ],
        ..SynthConfig::default()
    }
}

#[test]
fn tables_match_oracle_single_stream() {
    for seed in 0..4 {
        let (ds, _) = generate(&config(seed, Architecture::SingleStream)).unwrap();
        let oracle = brute_force_stats(&ds).unwrap();
        let mi = mi_aggregate(&ds).unwrap();
        assert_close(&mi.text, oracle.mi_text.as_ref().unwrap(), "mi text");
        assert_close(&mi.visual, oracle.mi_visual.as_ref().unwrap(), "mi visual");
        assert_close(&mi.special, oracle.mi_special.as_ref().unwrap(), "mi special");
        let i2t = image_to_text_heads(&ds).unwrap();
        assert_close(&i2t.probability, oracle.i2t_probability.as_ref().unwrap(), "i2t");
        check_pair_tables(&ds, &oracle);
    }
}

#[test]
fn tables_match_oracle_two_stream() {
    for seed in 0..4 {
        let (ds, _) = generate(&config(seed, Architecture::TwoStream)).unwrap();
        let oracle = brute_force_stats(&ds).unwrap();
        assert!(oracle.mi_text.is_none() && oracle.i2t_probability.is_none());
        check_pair_tables(&ds, &oracle);
    }
}

fn check_pair_tables(ds: &value_probe::trace::TraceDataset, oracle: &value_probe::synth::oracle::OracleStats) {
    let opts = PairStatsOptions::default();
    for (dir, grids) in [(Direction::VisualToText, &oracle.coref_vt), (Direction::TextToVisual, &oracle.coref_tv)] {
        let table = coref_head_stats(ds, dir, &opts).unwrap();
        assert_eq!(table.entries.keys().collect::<Vec<_>>(), grids.keys().collect::<Vec<_>>());
        for (key, entry) in &table.entries {
            assert_close(&entry.mean, &grids[key], &format!("coref {dir} {key}"));
        }
    }
    let table = relation_head_stats(ds, &opts).unwrap();
    assert_eq!(table.entries.keys().collect::<Vec<_>>(), oracle.relation.keys().collect::<Vec<_>>());
    for (key, entry) in &table.entries {
        assert_close(&entry.mean, &oracle.relation[key], &format!("relation {key}"));
    }
}

#[test]
fn oracle_refuses_large_datasets() {
    let cfg = SynthConfig { samples: MAX_SAMPLES + 1, embeddings: false, ..SynthConfig::default() };
    let (ds, _) = generate(&cfg).unwrap();
    assert_eq!(brute_force_stats(&ds), Err(OracleError::TooLarge(MAX_SAMPLES + 1)));
}
