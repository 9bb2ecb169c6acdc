#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use glyphdict::demo;
use glyphdict::encoder::HandcraftedEncoder;
use glyphdict::evaluation::{self, BenchmarkConfig, BenchmarkSets};
use glyphdict::retrieval::{self, Index};
use glyphdict::synthesis::{self, CharSpec, Dictionary, DictionaryConfig, ProceduralGenerator};

pub const K: usize = 8;
pub const SEED: u64 = 42;

/// The demo dictionary and its query sets, built once per test binary.
pub struct Demo {
    pub specs: Vec<CharSpec>,
    pub config: DictionaryConfig,
    pub dictionary: Dictionary,
    pub index: Index,
    pub sets: BenchmarkSets,
}

impl Demo {
    pub fn generator(&self) -> ProceduralGenerator {
        self.config.generator()
    }

    pub fn spec_map(&self) -> BTreeMap<char, CharSpec> {
        self.specs.iter().map(|s| (s.label, s.clone())).collect()
    }

    pub fn test_queries(&self) -> Vec<evaluation::Query> {
        self.sets
            .queries
            .iter()
            .filter(|q| self.sets.split.is_test(q.truth))
            .cloned()
            .collect()
    }
}

pub fn demo() -> &'static Demo {
    static DEMO: OnceLock<Demo> = OnceLock::new();
    DEMO.get_or_init(|| {
        let fonts = demo::procedural_fonts();
        let specs = synthesis::char_specs(&demo::charset(), &demo::ids_table(), &fonts).unwrap();
        let config = DictionaryConfig::new(K, SEED, &fonts);
        let (dictionary, _) = synthesis::build_dictionary(&specs, &config).unwrap();
        let index = retrieval::build_index(&dictionary, &HandcraftedEncoder::default()).unwrap();
        let sets = evaluation::benchmark_sets(&specs, &config.generator(), &config.schedule, K, &BenchmarkConfig::default())
            .unwrap();
        Demo {
            specs,
            config,
            dictionary,
            index,
            sets,
        }
    })
}

/// One line per criterion, greppable in the test log.
pub fn report(id: &str, what: &str, ok: bool, detail: &str) {
    println!("{id} {} — {what}: {detail}", if ok { "PASS" } else { "FAIL" });
}

pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = glyphdict::cli::run(args.iter().copied(), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
