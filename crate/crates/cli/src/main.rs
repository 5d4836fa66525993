use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lightmt_core::batch::DecodeLimits;
use lightmt_core::engine::{bench, selftest, tiny_random_model, RunConfig, Translator, DEFAULT_SPLIT_LEN, SAMPLE_TEXT};
use lightmt_core::search::SearchConfig;
use lightmt_core::store;
use lightmt_core::text::{ChunkPlan, Lexicon, DEFAULT_CHUNK_LINES};
use lightmt_core::{Model, ModelConfig, NormVariant, Precision};

#[derive(Parser)]
#[command(name = "lightmt", version, about = "Fast CPU translation with small transformer models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Translate stdin to stdout, one line per line.
    Translate(RunArgs),
    /// Translate a corpus and report throughput as key=value lines.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Source corpus, one sentence per line.
        corpus: PathBuf,
    },
    /// Run the dirty-data / empty / long-line battery.
    Selftest {
        #[command(flatten)]
        run: SelftestArgs,
    },
    /// Print a model file's header and tensor directory.
    Inspect { model: PathBuf },
    /// Write a randomly initialised model, with a lexicon learned from text.
    RandomModel(RandomModelArgs),
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long, value_parser = parse_precision, default_value = "f32")]
    precision: Precision,
    /// Maximum sentences per batch.
    #[arg(long, default_value_t = 128)]
    sbatch: usize,
    /// Maximum padded tokens per batch.
    #[arg(long, default_value_t = 2048)]
    wbatch: usize,
    /// Worker threads; each takes whole chunks.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = DEFAULT_CHUNK_LINES)]
    chunk_lines: usize,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    /// Input is already tokenized; split on whitespace only.
    #[arg(long)]
    pretokenized: bool,
    #[arg(long, default_value_t = 1.5)]
    max_len_ratio: f64,
    #[arg(long, default_value_t = 5)]
    max_len_offset: usize,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args, Clone)]
struct SelftestArgs {
    /// Defaults to a tiny random model.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    L2,
    L1,
}

#[derive(Args)]
struct RandomModelArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    enc_layers: usize,
    #[arg(long, default_value_t = 1)]
    dec_layers: usize,
    #[arg(long, default_value_t = 512)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    heads_enc: usize,
    #[arg(long, default_value_t = 8)]
    heads_dec: usize,
    #[arg(long, default_value_t = 2048)]
    ffn_enc: usize,
    /// 0 drops the decoder feed-forward sub-layer.
    #[arg(long, default_value_t = 512)]
    ffn_dec: usize,
    /// Raised to the lexicon size if smaller.
    #[arg(long, default_value_t = 0)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1024)]
    max_positions: usize,
    #[arg(long, value_enum, default_value = "l2")]
    norm: NormArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Text to learn BPE merges from (built-in sample text if omitted).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    merges: usize,
    /// Storage precision of the weight matrices.
    #[arg(long, value_parser = parse_precision, default_value = "f32")]
    precision: Precision,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse()
}

impl DecodeArgs {
    fn run_config(&self, max_positions: usize) -> Result<RunConfig> {
        if self.beam == 0 {
            bail!("--beam must be at least 1");
        }
        if !(self.max_len_ratio.is_finite() && self.max_len_ratio >= 0.0) {
            bail!("--max-len-ratio must be a non-negative number");
        }
        Ok(RunConfig {
            limits: DecodeLimits::new(self.sbatch, self.wbatch)?,
            chunk: ChunkPlan::new(self.chunk_lines, self.workers)?,
            search: SearchConfig {
                beam_size: self.beam,
                len_ratio: self.max_len_ratio,
                len_offset: self.max_len_offset,
                ..SearchConfig::default()
            },
            pretokenized: self.pretokenized,
            split_len: DEFAULT_SPLIT_LEN.min(max_positions),
        })
    }
}

fn load(path: &Path, precision: Precision) -> Result<(Model<f32>, Lexicon)> {
    let loaded = store::load(path, precision).with_context(|| format!("loading model {}", path.display()))?;
    let Some(lexicon) = loaded.lexicon else {
        bail!("model {} has no vocabulary or BPE codes", path.display());
    };
    Ok((loaded.model, lexicon))
}

/// Stdin as lines, invalid UTF-8 replaced rather than rejected.
fn read_lines(mut input: impl Read) -> Result<Vec<String>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).context("reading input")?;
    Ok(split_lines(&bytes))
}

fn split_lines(bytes: &[u8]) -> Vec<String> {
    if bytes.is_empty() {
        return Vec::new();
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .map(|l| String::from_utf8_lossy(l.strip_suffix(b"\r").unwrap_or(l)).into_owned())
        .collect()
}

/// Writes a report to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: impl std::fmt::Display) -> Result<()> {
    match writeln!(io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e).context("writing output"),
        _ => Ok(()),
    }
}

fn translate(args: RunArgs) -> Result<()> {
    let (model, lexicon) = load(&args.model, args.decode.precision)?;
    let run = args.decode.run_config(model.config().max_positions)?;
    let lines = read_lines(io::stdin().lock())?;
    let translator = Translator::new(&model, &lexicon, run);
    let mut out = BufWriter::new(io::stdout().lock());
    translator.translate_with(&lines, |chunk| {
        for line in chunk {
            writeln!(out, "{line}").map_err(|source| lightmt_core::Error::Io {
                path: "<stdout>".into(),
                source,
            })?;
        }
        Ok(())
    })?;
    out.flush().context("writing output")?;
    Ok(())
}

fn bench_command(run: RunArgs, corpus: &Path) -> Result<()> {
    let (model, lexicon) = load(&run.model, run.decode.precision)?;
    let cfg = run.decode.run_config(model.config().max_positions)?;
    let file = std::fs::File::open(corpus).with_context(|| format!("opening corpus {}", corpus.display()))?;
    let lines = read_lines(file)?;
    let report = bench(&Translator::new(&model, &lexicon, cfg), &lines)?;
    emit(report)
}

fn selftest_command(args: SelftestArgs) -> Result<bool> {
    let (model, lexicon) = match &args.model {
        Some(path) => load(path, args.decode.precision)?,
        None => {
            let (m, lex) = tiny_random_model(1)?;
            (m.to_precision(args.decode.precision)?, lex)
        }
    };
    let run = args.decode.run_config(model.config().max_positions)?;
    let report = selftest(&Translator::new(&model, &lexicon, run));
    emit(&report)?;
    Ok(report.passed())
}

fn random_model(args: RandomModelArgs) -> Result<()> {
    let text = match &args.corpus {
        Some(p) => std::fs::read(p)
            .map(|b| String::from_utf8_lossy(&b).into_owned())
            .with_context(|| format!("reading {}", p.display()))?,
        None => SAMPLE_TEXT.to_owned(),
    };
    let lexicon = Lexicon::learn(&text, args.merges);
    let cfg = ModelConfig {
        n_enc_layers: args.enc_layers,
        n_dec_layers: args.dec_layers,
        d_model: args.d_model,
        n_heads_enc: args.heads_enc,
        n_heads_dec: args.heads_dec,
        ffn_dim_enc: args.ffn_enc,
        ffn_dim_dec: args.ffn_dec,
        vocab_size: args.vocab_size.max(lexicon.vocab.len()),
        max_positions: args.max_positions,
        norm_variant: match args.norm {
            NormArg::L2 => NormVariant::L2,
            NormArg::L1 => NormVariant::L1,
        },
        shared_embeddings: true,
    };
    let model = Model::random(cfg, args.seed)?;
    store::save(&args.out, model.config(), model.weights(), Some(&lexicon), args.precision)?;
    log::info!("wrote {} ({} parameters)", args.out.display(), model.config().count_params());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Translate(run) => translate(run).map(|()| true),
        Command::Bench { run, corpus } => bench_command(run, &corpus).map(|()| true),
        Command::Selftest { run } => selftest_command(run),
        Command::Inspect { model } => store::inspect(&model)
            .map_err(Into::into)
            .and_then(emit)
            .map(|()| true),
        Command::RandomModel(args) => random_model(args).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_splitting() {
        assert!(split_lines(b"").is_empty());
        assert_eq!(split_lines(b"\n"), vec![""]);
        assert_eq!(split_lines(b"a\n\nb"), vec!["a", "", "b"]);
        assert_eq!(split_lines(b"a\r\nb\n"), vec!["a", "b"]);
        assert_eq!(split_lines(b"\xffx\n"), vec!["\u{fffd}x"]);
    }

    #[test]
    fn flags_parse() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
