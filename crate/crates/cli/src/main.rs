//! `itemforge` command-line pipeline.

mod header;

use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use itemforge_core::corpus::{build_corpus, clean_text, CorpusError, CorpusManifest, ShardRole, TokenShard, SHARD_MAGIC};
use itemforge_core::evaluator::{auc, EvalError, Label};
use itemforge_core::markov::NGramModel;
use itemforge_core::sampler::{render_template, GenerationParams, PromptTemplate};
use itemforge_core::tokenizer::{train_bpe, Vocabulary};
use itemforge_core::transformer::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, train, ModelConfig, ModelError, ModelState,
    StepRecord, TrainHyper,
};
use itemforge_service::{read_backend, AppState, Backend, DraftStore, LoadedModel};

/// Language-model toolkit for drafting assessment items.
#[derive(Parser)]
#[command(name = "itemforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, apply and invert byte-pair encodings.
    #[command(subcommand)]
    Tokenizer(TokenizerCommand),
    /// Build token shards from a directory of text files.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train a transformer or n-gram model.
    Train(TrainArgs),
    /// Continue training from a checkpoint.
    Finetune(FinetuneArgs),
    /// Sample continuations of a prompt.
    Generate(GenerateArgs),
    /// Cross-entropy and perplexity of a text or shard.
    Eval(EvalArgs),
    /// Rank human against generated texts by cross-entropy.
    Discriminate(DiscriminateArgs),
    /// Run the HTTP authoring service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum TokenizerCommand {
    Train {
        /// A text file or a directory of text files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a file into a token shard.
    Encode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a token shard back into bytes.
    Decode {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Writes `train.bin`, `val.bin` and `manifest.tsv` into `--out`.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Fraction of tokens held out for validation, in (0, 0.5].
        #[arg(long, default_value_t = 0.1)]
        split: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Transformer,
    Markov,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Tiny,
    Small,
}

impl Preset {
    fn config(self, vocab_size: usize) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(vocab_size),
            Preset::Small => ModelConfig::small(vocab_size),
        }
    }
}

#[derive(Args)]
struct TrainCommon {
    #[arg(long, value_enum, default_value_t = ModelKind::Transformer)]
    model: ModelKind,
    /// Architecture preset; taken from the checkpoint when fine-tuning.
    #[arg(long, value_enum)]
    config: Option<Preset>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Vocabulary file; defaults to the size recorded in the shard's manifest.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 100)]
    eval_every: u64,
    /// Validation tokens scored per evaluation (0 = all).
    #[arg(long, default_value_t = 8192)]
    eval_tokens: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Training window length (0 = context length).
    #[arg(long, default_value_t = 0)]
    seq_len: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    warmup: u64,
    /// Global gradient-norm ceiling (0 = off).
    #[arg(long, default_value_t = 1.0)]
    grad_clip: f64,
    /// Transformer blocks per recomputation segment (1 = keep all activations).
    #[arg(long, default_value_t = 1)]
    checkpoint_segments: usize,
    #[arg(long)]
    dropout: Option<f64>,
    /// n-gram order.
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// n-gram add-k smoothing.
    #[arg(long, default_value_t = 0.0)]
    smoothing: f64,
    /// Print a progress line every this many steps.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainCommon,
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: TrainCommon,
    #[arg(long)]
    init_from: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TemplateArg {
    Qa,
    Vignette,
    Raw,
}

#[derive(Args)]
struct ModelArgs {
    /// Transformer checkpoint or n-gram model file.
    #[arg(long)]
    ckpt: PathBuf,
    /// Vocabulary file; searched for as `vocab.bpe` near the checkpoint when omitted.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = TemplateArg::Raw)]
    template: TemplateArg,
    #[arg(long)]
    question: Option<String>,
    /// Vignette stem or raw prompt text.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    max_tokens: usize,
    /// 0 is greedy.
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    /// 0 disables truncation.
    #[arg(long, default_value_t = 40)]
    top_k: usize,
    /// Keep sampling past end-of-text.
    #[arg(long)]
    no_stop: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the samples here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// A text file or a token shard.
    #[arg(long)]
    input: PathBuf,
    /// Write the full report, with per-token losses when `--per-token` is set.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_token: bool,
}

#[derive(Args)]
struct DiscriminateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// A file or a directory whose files are each one human text.
    #[arg(long)]
    human: PathBuf,
    /// A file or a directory whose files are each one generated text.
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Draft event log.
    #[arg(long, default_value = "drafts.ndjson")]
    store: PathBuf,
}

/// An error carrying the module error name printed on exit.
#[derive(Debug)]
struct CliError {
    name: &'static str,
    message: String,
}

impl CliError {
    fn new(name: &'static str, message: impl Into<String>) -> Self {
        Self {
            name,
            message: message.into(),
        }
    }
}

macro_rules! named_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::new(e.name(), e.to_string())
            }
        }
    )*};
}

named_error!(
    itemforge_core::Error,
    itemforge_core::tokenizer::TokenizerError,
    CorpusError,
    itemforge_core::markov::MarkovError,
    ModelError,
    itemforge_core::sampler::SamplerError,
    EvalError,
    itemforge_service::StoreError
);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("IoFailure", e.to_string())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::new("IoFailure", format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::new("IoFailure", format!("{}: {e}", path.display())))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::new("FormatError", "vocabulary is not UTF-8"))?;
    Ok(Vocabulary::from_file_str(&text)?)
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| CliError::new("IoFailure", format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Explicit `--vocab`, else `vocab.bpe` in the checkpoint's directory or up to
/// two parents, else the byte-level vocabulary when the model expects 257.
fn resolve_vocab(explicit: Option<&Path>, near: &Path, expected: usize) -> Result<Vocabulary> {
    if let Some(p) = explicit {
        return load_vocab(p);
    }
    let mut dir = near.parent();
    for _ in 0..3 {
        let Some(d) = dir else { break };
        let candidate = if d.as_os_str().is_empty() { PathBuf::from("vocab.bpe") } else { d.join("vocab.bpe") };
        if candidate.is_file() {
            return load_vocab(&candidate);
        }
        dir = d.parent();
    }
    let byte_level = Vocabulary::byte_level();
    if expected == byte_level.size() {
        return Ok(byte_level);
    }
    Err(CliError::new(
        "ConfigError",
        format!("model expects {expected} tokens and no vocab.bpe was found; pass --vocab"),
    ))
}

fn load_model(args: &ModelArgs) -> Result<LoadedModel> {
    if !args.ckpt.is_file() {
        return Err(CliError::new("IoFailure", format!("{}: no such file", args.ckpt.display())));
    }
    let (backend, hash) = read_backend(&args.ckpt)?;
    let vocab = resolve_vocab(args.vocab.as_deref(), &args.ckpt, backend.vocab_size())?;
    Ok(LoadedModel::new(backend, vocab, hash)?)
}

/// `--vocab` size, else the `vocab_size` of `manifest.tsv` beside the shard.
fn training_vocab_size(common: &TrainCommon) -> Result<usize> {
    if let Some(v) = &common.vocab {
        return Ok(load_vocab(v)?.size());
    }
    let manifest = common
        .train
        .parent()
        .map(|d| d.join("manifest.tsv"))
        .filter(|p| p.is_file())
        .ok_or_else(|| CliError::new("ConfigError", "no manifest.tsv beside the training shard; pass --vocab"))?;
    let text = String::from_utf8_lossy(&read(&manifest)?).into_owned();
    Ok(CorpusManifest::from_text(&text)?.vocab_size)
}

fn load_shard(path: &Path, role: ShardRole) -> Result<TokenShard> {
    Ok(TokenShard::from_bytes(&read(path)?, role)?)
}

fn tokenizer(cmd: &TokenizerCommand, header: &str) -> Result<()> {
    match cmd {
        TokenizerCommand::Train { input, vocab_size, out } => {
            header::emit(header, Some(&header::log_beside(out)))?;
            let mut corpus = Vec::new();
            for f in files_under(input)? {
                corpus.extend_from_slice(&clean_text(&read(&f)?));
            }
            let vocab = train_bpe(&corpus, *vocab_size)?;
            write(out, vocab.to_file_string().as_bytes())?;
            println!("vocab_size\t{}\nmerges\t{}\nvocab_hash\t{}", vocab.size(), vocab.merges().len(), vocab.digest());
        }
        TokenizerCommand::Encode { vocab, input, out } => {
            header::emit(header, Some(&header::log_beside(out)))?;
            let vocab = load_vocab(vocab)?;
            let ids = vocab.encode(&read(input)?);
            println!("tokens\t{}", ids.len());
            write(out, &TokenShard::new(ids, ShardRole::Train).to_bytes())?;
        }
        TokenizerCommand::Decode { vocab, input, out } => {
            header::emit(header, Some(&header::log_beside(out)))?;
            let vocab = load_vocab(vocab)?;
            let shard = load_shard(input, ShardRole::Train)?;
            write(out, &vocab.decode(&shard.ids)?)?;
        }
    }
    Ok(())
}

fn corpus(cmd: &CorpusCommand, header: &str) -> Result<()> {
    let CorpusCommand::Build { input, vocab, split, out } = cmd;
    header::emit(header, Some(&header::log_in(out)))?;
    let vocab = load_vocab(vocab)?;
    let built = build_corpus(input, &vocab, *split)?;
    fs::create_dir_all(out)?;
    write(&out.join("train.bin"), &built.train.to_bytes())?;
    write(&out.join("val.bin"), &built.validation.to_bytes())?;
    write(&out.join("manifest.tsv"), built.manifest.to_text().as_bytes())?;
    println!(
        "documents\t{}\ntotal_tokens\t{}\ntrain_tokens\t{}\nval_tokens\t{}",
        built.manifest.documents.len(),
        built.manifest.total_tokens,
        built.train.len(),
        built.validation.len()
    );
    Ok(())
}

fn run_training(common: &TrainCommon, init_from: Option<&Path>, header: &str) -> Result<()> {
    let log = header::log_in(&common.out);
    header::emit(header, Some(&log))?;
    fs::create_dir_all(&common.out)?;
    let train_shard = load_shard(&common.train, ShardRole::Train)?;
    let val_shard = common.val.as_deref().map(|p| load_shard(p, ShardRole::Validation)).transpose()?;
    match common.model {
        ModelKind::Markov => train_markov(common, &train_shard, val_shard.as_ref(), &log),
        ModelKind::Transformer => train_transformer(common, init_from, &train_shard, val_shard.as_ref(), &log),
    }
}

fn train_markov(common: &TrainCommon, shard: &TokenShard, val: Option<&TokenShard>, log: &Path) -> Result<()> {
    let vocab_size = training_vocab_size(common)?;
    let model = NGramModel::fit(&shard.ids, common.order, vocab_size, common.smoothing)?;
    let path = common.out.join("model.ngram");
    model.save(&path)?;
    let mut summary = format!("model\t{}\ncontexts\t{}\n", path.display(), model.stored_contexts());
    if let Some(v) = val {
        match itemforge_core::evaluator::cross_entropy(&model, &v.ids, false) {
            Ok(r) => {
                let _ = writeln!(summary, "val_cross_entropy\t{}", r.cross_entropy_nats);
            }
            Err(EvalError::InfiniteLoss { position }) => {
                let _ = writeln!(summary, "val_cross_entropy\tinf\t# zero probability at token {position}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    print!("{summary}");
    header::append(log, &summary)?;
    Ok(())
}

fn train_transformer(
    common: &TrainCommon,
    init_from: Option<&Path>,
    shard: &TokenShard,
    val: Option<&TokenShard>,
    log: &Path,
) -> Result<()> {
    let mut state: ModelState<f32> = match init_from {
        Some(ckpt) => match common.config {
            Some(preset) => {
                let expected = preset.config(load_checkpoint::<f32>(ckpt)?.config.vocab_size);
                load_checkpoint_expecting(ckpt, &expected)?
            }
            None => load_checkpoint(ckpt)?,
        },
        None => {
            let preset = common.config.unwrap_or(Preset::Tiny);
            let mut config = preset.config(training_vocab_size(common)?);
            config.seed = common.seed;
            ModelState::init(config)?
        }
    };
    if let Some(d) = common.dropout {
        state.config.dropout = d;
    }
    let hyper = TrainHyper {
        batch_size: common.batch_size,
        seq_len: common.seq_len,
        learning_rate: common.lr,
        warmup_steps: common.warmup,
        max_steps: common.steps,
        grad_clip: common.grad_clip,
        checkpoint_segments: common.checkpoint_segments,
        checkpoint_every: common.checkpoint_every,
        eval_every: common.eval_every,
        eval_tokens: common.eval_tokens,
        seed: common.seed,
        out_dir: Some(common.out.clone()),
    };
    let config_line = format!("# model {} params={}\nstep\tloss\tlr\tgrad_norm\tval_cross_entropy\n", state.config, state.config.param_count());
    print!("{config_line}");
    header::append(log, &config_line)?;
    let mut log_err = None;
    let every = common.log_every.max(1);
    let mut on_step = |r: &StepRecord| {
        if !r.step.is_multiple_of(every) && r.val_cross_entropy.is_none() {
            return;
        }
        let val = r.val_cross_entropy.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        let line = format!("{}\t{:.6}\t{:.3e}\t{:.4}\t{val}\n", r.step, r.loss, r.learning_rate, r.grad_norm);
        print!("{line}");
        if let Err(e) = header::append(log, &line) {
            log_err.get_or_insert(e);
        }
    };
    let result = train(&mut state, shard, val, &hyper, &mut on_step);
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let trained = result?;
    let last = common.out.join(format!("{}.itf", state.step));
    if common.steps > 0 && !trained.checkpoints.contains(&last) {
        save_checkpoint(&state, &last)?;
    }
    let summary = format!("checkpoint\t{}\n", last.display());
    print!("{summary}");
    header::append(log, &summary)?;
    Ok(())
}

fn generate(args: &GenerateArgs, header: &str) -> Result<()> {
    header::emit(header, args.out.as_deref().map(header::log_beside).as_deref())?;
    let template = match args.template {
        TemplateArg::Qa => PromptTemplate::QaDistractor {
            question: args.question.clone().unwrap_or_default(),
        },
        TemplateArg::Vignette => PromptTemplate::Vignette {
            stem: args.prompt.clone().unwrap_or_default(),
        },
        TemplateArg::Raw => PromptTemplate::Raw {
            text: args.prompt.clone().unwrap_or_default(),
        },
    };
    let prompt = render_template(&template)?;
    let model = load_model(&args.model)?;
    let params = GenerationParams {
        max_tokens: args.max_tokens,
        temperature: args.temperature,
        top_k: args.top_k,
        n_samples: args.n,
        seed: args.seed,
        stop_at_end_of_text: !args.no_stop,
    };
    let samples = model.generate(&prompt, &params)?;
    let mut out = String::new();
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(out, "=== sample {i} ===\n{s}");
    }
    print!("{out}");
    if let Some(path) = &args.out {
        write(path, out.as_bytes())?;
    }
    Ok(())
}

fn eval(args: &EvalArgs, header: &str) -> Result<()> {
    header::emit(header, args.out.as_deref().map(header::log_beside).as_deref())?;
    let model = load_model(&args.model)?;
    let bytes = read(&args.input)?;
    let ids = if bytes.starts_with(SHARD_MAGIC) {
        TokenShard::from_bytes(&bytes, ShardRole::Validation)?.ids
    } else {
        model.vocab.encode(&bytes)
    };
    let report = model.score_ids(&ids, args.per_token)?;
    let text = itemforge_core::evaluator::EvalReport {
        per_token_losses: None,
        ..report.clone()
    }
    .to_bytes();
    print!("{}", String::from_utf8_lossy(&text));
    if let Some(path) = &args.out {
        write(path, &report.to_bytes())?;
    }
    Ok(())
}

fn discriminate(args: &DiscriminateArgs, header: &str) -> Result<()> {
    header::emit(header, args.out.as_deref().map(header::log_beside).as_deref())?;
    let model = load_model(&args.model)?;
    let mut rows = Vec::new();
    for (root, label) in [(&args.human, Label::Human), (&args.generated, Label::Generated)] {
        for f in files_under(root)? {
            let text = String::from_utf8_lossy(&read(&f)?).into_owned();
            let r = model.score(&text)?;
            rows.push((label, r.cross_entropy_nats, f));
        }
    }
    let scores: Vec<(Label, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
    let area = auc(&scores)?;
    let mut out = String::new();
    for (label, h, path) in &rows {
        let _ = writeln!(out, "{}\t{h:.6}\t{}", label.as_str(), path.display());
    }
    let _ = writeln!(out, "auc\t{area}");
    print!("{out}");
    if let Some(path) = &args.out {
        write(path, out.as_bytes())?;
    }
    Ok(())
}

fn serve(args: &ServeArgs, header: &str) -> Result<()> {
    header::emit(header, Some(&header::log_beside(&args.store)))?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| CliError::new("ConfigError", format!("bad address: {e}")))?;
    let store = DraftStore::open(&args.store)?;
    let state = Arc::new(AppState::new(store));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let loader_state = state.clone();
        let model_args = ModelArgs {
            ckpt: args.model.ckpt.clone(),
            vocab: args.model.vocab.clone(),
        };
        let loader = tokio::task::spawn_blocking(move || load_model(&model_args));
        let server = axum::serve(listener, itemforge_service::router(state));
        tokio::select! {
            r = server => r.map_err(CliError::from),
            loaded = async {
                let model = loader.await.map_err(|e| CliError::new("IoFailure", e.to_string()))??;
                let kind = match &model.backend {
                    Backend::Transformer(_) => "transformer",
                    Backend::Markov(_) => "markov",
                };
                eprintln!("model loaded: {kind} sha256={}", model.checkpoint_hash);
                loader_state.set_model(model);
                std::future::pending::<Result<()>>().await
            } => loaded,
        }
    })
}

fn run(cli: &Cli, header: &str) -> Result<()> {
    match &cli.command {
        Command::Tokenizer(cmd) => tokenizer(cmd, header),
        Command::Corpus(cmd) => corpus(cmd, header),
        Command::Train(a) => run_training(&a.common, a.init_from.as_deref(), header),
        Command::Finetune(a) => run_training(&a.common, Some(&a.init_from), header),
        Command::Generate(a) => generate(a, header),
        Command::Eval(a) => eval(a, header),
        Command::Discriminate(a) => discriminate(a, header),
        Command::Serve(a) => serve(a, header),
    }
}

fn main() -> ExitCode {
    let command = Cli::command();
    let matches = command.clone().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let header = header::render(&command, &matches);
    match run(&cli, &header) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.name, e.message);
            ExitCode::from(1)
        }
    }
}
