//! Support-guided regeneration with validation early stopping on a reduced
//! demo (K=4). Snapshots land in `target/example-refine`.

use std::collections::BTreeMap;

use glyphdict::demo;
use glyphdict::encoder::HandcraftedEncoder;
use glyphdict::evaluation::{self, BenchmarkConfig};
use glyphdict::refinement::{self, RefineConfig};
use glyphdict::retrieval;
use glyphdict::synthesis::{self, CharSpec, DictionaryConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let k = 4;
    let fonts = demo::procedural_fonts();
    let specs = synthesis::char_specs(&demo::charset(), &demo::ids_table(), &fonts)?;
    let cfg = DictionaryConfig::new(k, 42, &fonts);
    let (dict, _) = synthesis::build_dictionary(&specs, &cfg)?;
    let generator = cfg.generator();
    let sets = evaluation::benchmark_sets(&specs, &generator, &cfg.schedule, k, &BenchmarkConfig::default())?;
    let enc = HandcraftedEncoder::default();

    let ix = retrieval::build_index(&dict, &enc)?;
    let support = refinement::compute_support(&ix, &enc, &sets.exemplars, 50)?;
    println!("generation 0: {}/{} entries supported (median best cosine {:?})", support.supported_count(), dict.len(), support.median);

    let by_label: BTreeMap<char, CharSpec> = specs.into_iter().map(|s| (s.label, s)).collect();
    let mut rc = RefineConfig::new(4, k);
    rc.snapshot_dir = Some("target/example-refine".into());
    let (best, trace) = refinement::refine_loop(dict, &by_label, &generator, &enc, &sets.exemplars, &sets.validation, &rc)?;
    for it in &trace.iterations {
        println!(
            "iteration {} gen {}: supported {}, regenerated {}, validation Top-10 {:.3} Top-100 {:.3}{}",
            it.iteration,
            it.generation,
            it.supported,
            it.regenerated,
            it.validation.at(10).unwrap_or(0.0),
            it.validation.at(100).unwrap_or(0.0),
            if it.improved { " *" } else { "" }
        );
    }
    println!("kept generation {} ({}); {}", best.generation, trace.best_generation, trace.stop_reason);
    Ok(())
}
