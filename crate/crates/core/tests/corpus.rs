use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;

use motic::checkpoint::Checkpoint;
use motic::config::ExperimentConfig;
use motic::prototypes::PrototypeBank;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn checked_in_seeds_decode() {
    for s in seeds("checkpoint_decode") {
        let c = Checkpoint::from_bytes(&s).unwrap();
        assert_eq!(c.to_bytes(), s);
    }
    for s in seeds("bank_decode") {
        let b = PrototypeBank::from_bytes(&s).unwrap();
        assert_eq!(b.to_bytes(), s);
    }
    for s in seeds("config_parse") {
        let cfg = ExperimentConfig::parse(std::str::from_utf8(&s).unwrap()).unwrap();
        cfg.validate().unwrap();
    }
}

fn mutate(mut data: Vec<u8>, edits: &[(usize, u8)], cut: usize) -> Vec<u8> {
    if data.is_empty() {
        return data;
    }
    for &(i, b) in edits {
        let n = data.len();
        data[i % n] ^= b;
    }
    let keep = data.len() - cut % (data.len() + 1) / 4;
    data.truncate(keep);
    data
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn mutated_checkpoints_never_panic(pick in 0usize..8, edits in prop::collection::vec((any::<usize>(), 1u8..), 1..6), cut in any::<usize>()) {
        let all = seeds("checkpoint_decode");
        let data = mutate(all[pick % all.len()].clone(), &edits, cut);
        if let Ok(c) = Checkpoint::from_bytes(&data) {
            prop_assert_eq!(c.to_bytes(), data);
        }
    }

    #[test]
    fn mutated_banks_never_panic(pick in 0usize..8, edits in prop::collection::vec((any::<usize>(), 1u8..), 1..6), cut in any::<usize>()) {
        let all = seeds("bank_decode");
        let data = mutate(all[pick % all.len()].clone(), &edits, cut);
        if let Ok(b) = PrototypeBank::from_bytes(&data) {
            prop_assert_eq!(PrototypeBank::from_bytes(&b.to_bytes()).unwrap(), b);
        }
    }

    #[test]
    fn mutated_configs_never_panic(pick in 0usize..8, edits in prop::collection::vec((any::<usize>(), 1u8..128), 1..6), cut in any::<usize>()) {
        let all = seeds("config_parse");
        let data = mutate(all[pick % all.len()].clone(), &edits, cut);
        if let Ok(text) = std::str::from_utf8(&data) {
            if let Ok(cfg) = ExperimentConfig::parse(text) {
                let again = ExperimentConfig::parse(&cfg.render()).unwrap();
                prop_assert_eq!(again.render(), cfg.render());
            }
        }
    }
}
