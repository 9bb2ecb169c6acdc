//! The offline benchmark on the full demo: dictionary vs direct retrieval,
//! fidelity, and the degradation suite. Takes a few seconds in release mode.

use glyphdict::degradation::DegradationSpec;
use glyphdict::demo;
use glyphdict::encoder::HandcraftedEncoder;
use glyphdict::evaluation::{self, BenchmarkConfig, EvalConfig};
use glyphdict::retrieval;
use glyphdict::synthesis::{self, DictionaryConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fonts = demo::procedural_fonts();
    let specs = synthesis::char_specs(&demo::charset(), &demo::ids_table(), &fonts)?;
    let cfg = DictionaryConfig::new(8, 42, &fonts);
    let (dict, _) = synthesis::build_dictionary(&specs, &cfg)?;
    let sets = evaluation::benchmark_sets(&specs, &cfg.generator(), &cfg.schedule, 8, &BenchmarkConfig::default())?;
    let enc = HandcraftedEncoder::default();
    let ix = retrieval::build_index(&dict, &enc)?;
    let plain = evaluation::plain_renders(&fonts, &dict.charset)?;

    let eval = EvalConfig::default();
    let report = evaluation::run_benchmark(&dict, &ix, &enc, &plain, &sets.queries, &eval)?;
    print!("{}", report.to_tsv());
    if let Some(f) = &report.fidelity {
        println!(
            "{}: halves {:.4}, dictionary {:.4}, plain {:.4}",
            f.metric, f.query_halves, f.dictionary_vs_queries, f.plain_vs_queries
        );
    }
    let suite = evaluation::run_degradation_suite(&dict, &ix, &enc, &sets.queries, &DegradationSpec::grid(42), &eval)?;
    print!("{}", suite.to_tsv());
    Ok(())
}
