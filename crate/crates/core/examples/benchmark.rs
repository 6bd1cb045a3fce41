//! Runs benchmark arms on the small synthetic preset and prints k-fold accuracy.
//!
//! ```text
//! cargo run --release --example benchmark -- --seeds 3 --arms scratch,lafs pretrain_steps=500
//! ```
//! Trailing `key=value` arguments override the preset.

use clap::Parser;
use lafs::config::{KvConfig, MetricsWriter};
use lafs::pipeline::{median, Arm, BenchConfig, Benchmark};

#[derive(Parser)]
struct Args {
    /// Comma-separated arms: scratch, scratch-grid, lafs, lafs-noshuffle, lafs-alpha0, dino, dino-shuffle.
    #[arg(long, default_value = "scratch,lafs")]
    arms: String,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Configuration overrides as `key=value`.
    overrides: Vec<String>,
}

fn arm(name: &str) -> Option<Arm> {
    Some(match name {
        "scratch" => Arm::Scratch,
        "scratch-grid" => Arm::ScratchGrid,
        "lafs" => Arm::Lafs { shuffle: true, alpha: 2.0 },
        "lafs-noshuffle" => Arm::Lafs { shuffle: false, alpha: 2.0 },
        "lafs-alpha0" => Arm::Lafs { shuffle: true, alpha: 0.0 },
        "dino" => Arm::DinoGrid { shuffle: false },
        "dino-shuffle" => Arm::DinoGrid { shuffle: true },
        _ => return None,
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let mut config = BenchConfig::small();
    config.apply(&KvConfig::parse(&args.overrides.join("\n"))?)?;
    let arms = args
        .arms
        .split(',')
        .map(|a| arm(a).ok_or_else(|| format!("unknown arm {a:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut metrics = MetricsWriter::in_memory();
    let bench = Benchmark::prepare(config, 0, &mut metrics)?;
    for a in arms {
        let mut acc = Vec::new();
        for seed in 0..args.seeds {
            let t = std::time::Instant::now();
            let r = bench.run(a, seed, &mut MetricsWriter::in_memory())?;
            println!("{:<32} seed {seed} accuracy {:.4} ({:.0}s)", a.name(), r.accuracy, t.elapsed().as_secs_f64());
            acc.push(r.accuracy);
        }
        println!("{:<32} median {:.4}", a.name(), median(&acc));
    }
    Ok(())
}
