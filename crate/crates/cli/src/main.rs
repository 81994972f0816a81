use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use efa_core::checkpoint::Checkpoint;
use efa_core::data::synthetic::generate_synthetic_ratings;
use efa_core::data::{Sequence, SequenceBatch};
use efa_core::dumps::{export_attention_weights, position_names, top_copurchase, Component};
use efa_core::experiment::{run_experiment, theory_probe, write_attention_dump, write_qkv_dump, ExperimentConfig};
use efa_core::Error;

#[derive(Parser)]
#[command(name = "efa", version, about = "Train and inspect exponential family attention models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComponentArg {
    Categorical,
    Value,
}

#[derive(Subcommand)]
enum Command {
    /// Fit and evaluate the model a config file describes.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the attention maps of one sequence as CSV.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated item names or indices.
        #[arg(long)]
        sequence: String,
        /// Comma-separated observed values, one per item.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, value_enum)]
        component: Option<ComponentArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write W^Q β, W^K β and W^V β of one head as CSV.
    DumpQkv {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the items most often bought with a given item.
    Copurchase {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        item: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Train two models from different seeds and compare their embeddings.
    TheoryProbe {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Directory for `theory_probe.json`; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic movie ratings as CSV (user, position, movie, rating).
    GenSynthetic {
        #[arg(long, default_value_t = 1000)]
        users: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Config(_) | Error::Contract(_) | Error::Index { .. } => 1,
        _ => 2,
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("cannot parse {what} {s:?}")))
        })
        .collect()
}

fn dump_attention(
    checkpoint: &Path,
    sequence: &str,
    values: Option<&str>,
    layer: usize,
    component: Option<ComponentArg>,
    out: &Path,
) -> Result<Vec<PathBuf>, Error> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.efa()?;
    let tokens = sequence.split(',').map(|s| ckpt.token(s.trim())).collect::<Result<Vec<_>, _>>()?;
    let seq = match values {
        Some(v) => Sequence::with_values(tokens, parse_list(v, "value")?),
        None => Sequence::tokens(tokens),
    };
    let mut batch = SequenceBatch::new(model.config.vocab, vec![seq])?;
    batch.attributes = ckpt.attributes.clone();
    batch.labels = ckpt.labels.clone();
    batch.validate()?;
    let component = match component {
        Some(ComponentArg::Categorical) => Component::Categorical,
        Some(ComponentArg::Value) => Component::Value,
        None if model.config.categorical.is_some() => Component::Categorical,
        None => Component::Value,
    };
    let dump = export_attention_weights(model, &batch, 0, layer, component)?;
    fs::create_dir_all(out)?;
    write_attention_dump(out, &format!("attention_layer{layer}"), &dump, &position_names(&batch, 0))
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, seed, out } => {
            let mut c = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            if out.is_some() {
                c.out = out;
            }
            let run = run_experiment(&c)?;
            println!("{}", serde_json::to_string_pretty(&run.metrics)?);
            eprintln!("wrote {}", run.out.display());
        }
        Command::DumpAttention {
            checkpoint,
            sequence,
            values,
            layer,
            component,
            out,
        } => {
            for p in dump_attention(&checkpoint, &sequence, values.as_deref(), layer, component, &out)? {
                println!("{}", p.display());
            }
        }
        Command::DumpQkv {
            checkpoint,
            layer,
            head,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            fs::create_dir_all(&out)?;
            for p in write_qkv_dump(&out, &ckpt, layer, head)? {
                println!("{}", p.display());
            }
        }
        Command::Copurchase { checkpoint, item, k } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let delta = ckpt.token(&item)?;
            let names = ckpt
                .labels
                .clone()
                .unwrap_or_else(|| (0..ckpt.vocab()).map(|t| t.to_string()).collect());
            println!("rank,item,score");
            for (rank, (g, score)) in top_copurchase(ckpt.efa()?, delta, k)?.into_iter().enumerate() {
                println!("{},{},{}", rank + 1, names[g], score);
            }
        }
        Command::TheoryProbe { seed, dim, epochs, out } => {
            let text = serde_json::to_string_pretty(&theory_probe(seed, dim, epochs)?)? + "\n";
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    let p = dir.join("theory_probe.json");
                    fs::write(&p, text)?;
                    println!("{}", p.display());
                }
                None => print!("{text}"),
            }
        }
        Command::GenSynthetic { users, seed, out } => {
            if users == 0 {
                return Err(Error::Config("--users must be positive".into()));
            }
            let batch = generate_synthetic_ratings(users, seed)?;
            let mut text = String::from("user,position,movie,rating\n");
            for (u, s) in batch.sequences.iter().enumerate() {
                let values = s.values.as_deref().unwrap_or_default();
                for (i, (&t, &y)) in s.tokens.iter().zip(values).enumerate() {
                    text.push_str(&format!("{u},{i},{},{y}\n", t + 1));
                }
            }
            fs::write(&out, text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
