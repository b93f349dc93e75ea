use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use glossnet::datagen::{self, DatasetConfig, FrameReader};
use glossnet::eval::{self, ScenarioKind, ScenarioSpec};
use glossnet::model::{Model, ModelConfig};
use glossnet::stream::StreamSession;
use glossnet::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "glossnet", version, about = "Fully convolutional continuous gloss recognition")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Architecture preset when no config file is given.
    #[arg(long, global = true, default_value = "tiny")]
    preset: String,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Model config file (key=value); defaults to the checkpoint's sibling `.cfg`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to load, or to write for `train`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Override the number of training sentences.
        #[arg(long)]
        train_sentences: Option<usize>,
        #[arg(long)]
        test_sentences: Option<usize>,
    },
    /// Train on the training split of a manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoint, config, metrics and proposals.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        no_gfe: bool,
        #[arg(long)]
        no_balance_ratio: bool,
        /// Use the published schedule instead of the desk-scale one.
        #[arg(long)]
        paper_schedule: bool,
        /// Train on the first N samples only.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Evaluate on the test split; writes `<out>.csv` and `<out>.json`.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode one frame file.
    Decode {
        file: PathBuf,
        /// Manifest to look up the reference for WER.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Build and evaluate real-world simulation scenarios on the test split.
    Scenario {
        #[arg(long)]
        data: PathBuf,
        /// Scenario kind; all of them when omitted.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Directory for per-scenario reports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recognize a frame stream incrementally; `-` reads standard input.
    Stream {
        #[arg(default_value = "-")]
        file: String,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData { out, train_sentences, test_sentences } => {
            let mut cfg = DatasetConfig::synth_v1(g.seed);
            if let Some(n) = train_sentences {
                cfg.train_sentences = *n;
            }
            if let Some(n) = test_sentences {
                cfg.test_sentences = *n;
            }
            let bench = datagen::gen_benchmark(&cfg)?;
            bench.write(out)?;
            println!(
                "wrote {} train, {} + {} test samples to {}",
                bench.train.len(),
                bench.test_unseen_sentences.len(),
                bench.test_unseen_signers.len(),
                out.display()
            );
        }
        Command::Train { data, out, epochs, lr, no_gfe, no_balance_ratio, paper_schedule, limit } => {
            let ds = datagen::load_dataset(data)?;
            let config = match &g.config {
                Some(p) => ModelConfig::load(p)?,
                None => ModelConfig::preset(&g.preset, ds.vocab.len())?,
            };
            let mut model = Model::<f32>::new(config, g.seed)?;
            let mut tc = if *paper_schedule { TrainConfig::paper(g.seed) } else { TrainConfig::desk(g.seed) };
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            if let Some(lr) = lr {
                tc.lr = *lr;
            }
            if *no_gfe {
                tc.gfe_start_epoch = None;
            }
            tc.balance_ratio = !no_balance_ratio;
            std::fs::create_dir_all(out)?;
            tc.proposal_cache = Some(out.join("proposals.gfa"));
            let samples = &ds.train[..limit.unwrap_or(ds.train.len()).min(ds.train.len())];
            let report = train::train_with(&mut model, samples, &tc, |_, m| eprintln!("{}", m.csv_row()))?;
            let ckpt = g.checkpoint.clone().unwrap_or_else(|| out.join("model.gfw"));
            model.save(&ckpt)?;
            model.config.save(&ckpt.with_extension("cfg"))?;
            train::save_metrics(&out.join("metrics.csv"), &report.metrics)?;
            println!("saved {}", ckpt.display());
        }
        Command::Eval { data, out } => {
            let ds = datagen::load_dataset(data)?;
            let model = load_model(g, ds.vocab.len())?;
            let items = eval::make_scenario(&ds.test, &ScenarioSpec::new(ScenarioKind::Original, g.seed), model.config.window)?;
            let report = eval::evaluate(&model, &items, "original")?;
            if let Some(stem) = out {
                report.save(stem, &ds.vocab)?;
            }
            println!("{}", serde_json::to_string(&report.summary())?);
        }
        Command::Decode { file, data } => {
            let frames = datagen::read_frames(file)?;
            let (model, vocab, reference) = match data {
                Some(manifest) => {
                    let m = datagen::DatasetManifest::load(manifest)?;
                    let model = load_model(g, m.header.vocab.len())?;
                    let name = file.file_name();
                    let reference = m.samples.iter().find(|r| Path::new(&r.file).file_name() == name).map(|r| r.labels.clone());
                    (model, m.header.vocab, reference)
                }
                None => {
                    let model = load_model(g, 0)?;
                    let vocab = datagen::vocab_names(model.config.vocab_size);
                    (model, vocab, None)
                }
            };
            let hyp = eval::decode(&model, &frames)?;
            println!("hypothesis: {}", words(&hyp, &vocab));
            if let Some(r) = reference {
                println!("reference: {}", words(&r, &vocab));
                println!("wer: {:.6}", eval::wer(&r, &hyp)?);
            }
        }
        Command::Scenario { data, kind, k, out } => {
            let ds = datagen::load_dataset(data)?;
            let model = load_model(g, ds.vocab.len())?;
            let specs = match kind {
                Some(kind) => vec![ScenarioSpec::new(ScenarioKind::parse(kind, *k)?, g.seed)],
                None => ScenarioSpec::battery(g.seed),
            };
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
            }
            for spec in specs {
                let report = eval::run_scenario(&model, &ds.test, &spec)?;
                if let Some(dir) = out {
                    report.save(&dir.join(spec.kind.to_string()), &ds.vocab)?;
                }
                println!("{}", serde_json::to_string(&report.summary())?);
            }
        }
        Command::Stream { file } => {
            let model = load_model(g, 0)?;
            let vocab = datagen::vocab_names(model.config.vocab_size);
            let input: Box<dyn Read> = if file == "-" {
                Box::new(io::stdin().lock())
            } else {
                Box::new(std::fs::File::open(file).with_context(|| format!("opening {file}"))?)
            };
            let mut reader = FrameReader::new(BufReader::new(input), file)?;
            let mut session = StreamSession::new(&model);
            let stdout = io::stdout();
            let mut out = stdout.lock();
            while let Some(frame) = reader.next_frame()? {
                for e in session.push(&frame)? {
                    print_emission(&mut out, &e, &vocab)?;
                }
            }
            let (tail, hyp) = session.finish()?;
            for e in tail {
                print_emission(&mut out, &e, &vocab)?;
            }
            writeln!(
                out,
                "final frames={} steps={} hypothesis={}",
                session.frames_seen(),
                session.emitted_steps(),
                words(&hyp, &vocab)
            )?;
        }
    }
    Ok(())
}

fn print_emission<W: Write>(out: &mut W, e: &glossnet::stream::Emission, vocab: &[String]) -> Result<()> {
    if let Some(w) = e.word {
        writeln!(out, "step={} frame={} word={}", e.step, e.frame, vocab[w])?;
    }
    Ok(())
}

fn words(seq: &[usize], vocab: &[String]) -> String {
    seq.iter().map(|&l| vocab.get(l).cloned().unwrap_or_else(|| l.to_string())).collect::<Vec<_>>().join(" ")
}

fn load_model(g: &Global, vocab: usize) -> Result<Model<f32>> {
    let Some(ckpt) = &g.checkpoint else { bail!("--checkpoint is required") };
    let sibling = ckpt.with_extension("cfg");
    let config = match &g.config {
        Some(p) => ModelConfig::load(p)?,
        None if sibling.exists() => ModelConfig::load(&sibling)?,
        None if vocab > 0 => ModelConfig::preset(&g.preset, vocab)?,
        None => bail!("no model config: pass --config or keep {} beside the checkpoint", sibling.display()),
    };
    if vocab > 0 && config.vocab_size != vocab {
        bail!("model vocabulary {} does not match dataset vocabulary {vocab}", config.vocab_size);
    }
    Ok(Model::load(config, ckpt)?)
}
