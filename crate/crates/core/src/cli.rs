//! Command-line front end. `main` only calls [`run`].

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::conll::write_conll;
use crate::data::scheme::{bio_to_bioes, bioes_to_bio, Role, Tag};
use crate::data::{
    build_vocabs, encode_corpus, load_embeddings, parse_conll, parse_tokens, prepare_labels,
    ColumnLayout, RawCorpus, Sentence, Task,
};
use crate::error::{Error, Result};
use crate::eval::{entity_f1, read_interchange, token_accuracy};
use crate::exec::Execution;
use crate::gradcheck::{check_model, ModelSize, TOLERANCE};
use crate::tape::Fault;
use crate::train::{dev_metric, train_loop, Checkpoint, EpochRecord, TrainConfig};

/// Print to stdout, ignoring a closed pipe (`seqtag eval ... | head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = write!(io::stdout(), $($arg)*);
    }};
}
macro_rules! outln {
    ($($arg:tt)*) => {{
        let _ = writeln!(io::stdout(), $($arg)*);
    }};
}

/// Environment variable consulted when no seed is given.
pub const SEED_ENV: &str = "SEQTAG_SEED";

#[derive(Parser, Debug)]
#[command(name = "seqtag", version, about = "BiLSTM-CNN-CRF sequence tagger")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a tagger and keep the checkpoint with the best dev score.
    Train(TrainArgs),
    /// Tag a file with a trained model.
    Tag(TagArgs),
    /// Score predictions against gold labels.
    Eval(EvalArgs),
    /// Convert a file between BIO and BIOES, touching only the last column.
    Convert(ConvertArgs),
    /// Compare analytic gradients with finite differences on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Pretrained vectors, one `token v1 .. vN` line each.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// `key = value` overrides; flags win over the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub no_char_cnn: bool,
    #[arg(long)]
    pub no_crf: bool,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct TagArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "bioes")]
    pub scheme: SchemeArg,
    /// Only emit sequences that are valid BIOES.
    #[arg(long)]
    pub constrained: bool,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, requires = "pred", conflicts_with = "combined")]
    pub gold: Option<PathBuf>,
    #[arg(long, requires = "gold")]
    pub pred: Option<PathBuf>,
    /// Three-column `token gold pred` file instead of two files.
    #[arg(long)]
    pub combined: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ner")]
    pub task: TaskArg,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub from: SchemeArg,
    #[arg(long, value_enum)]
    pub to: SchemeArg,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "tiny")]
    pub sizes: SizeArg,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Ner,
    Pos,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Ner => Task::Ner,
            TaskArg::Pos => Task::Pos,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Bio,
    Bioes,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SizeArg {
    Tiny,
    Small,
}

/// Failure of a check (not of the invocation).
#[derive(Debug)]
struct CheckFailed(String);

enum Failure {
    Check(CheckFailed),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Run(e.into())
    }
}

/// 2 for bad invocations and unusable inputs, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Io(_)
        | Error::Parse { .. }
        | Error::Format { .. }
        | Error::Scheme { .. }
        | Error::Vocabulary(_)
        | Error::CorruptCheckpoint { .. }
        | Error::Alignment { .. }
        | Error::Json(_) => 2,
        _ => 1,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parse `args` (including the program name), run the command and return
/// the process exit code. Errors go to stderr as one line:
/// `error: kind=<kind> <message>`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind::*;
            if matches!(
                e.kind(),
                DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return if e.kind() == DisplayHelpOnMissingArgumentOrSubcommand {
                    2
                } else {
                    0
                };
            }
            let msg = e.render().to_string();
            let msg = one_line(
                msg.trim_start_matches("error:")
                    .split("Usage:")
                    .next()
                    .unwrap_or(""),
            );
            eprintln!("error: kind=usage {msg}");
            return 2;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Tag(a) => cmd_tag(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Convert(a) => cmd_convert(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Check(CheckFailed(msg))) => {
            eprintln!("error: kind=check {msg}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: kind={} {}", e.kind(), one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn mode(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

#[derive(Serialize)]
struct FileRecord {
    path: PathBuf,
    sha256: String,
}

/// Everything needed to repeat a training run.
#[derive(Serialize)]
pub struct RunManifest {
    tool_version: &'static str,
    command: &'static str,
    config: TrainConfig,
    config_file_keys: Vec<String>,
    seed: u64,
    inputs: Vec<(&'static str, FileRecord)>,
    outputs: Vec<(&'static str, PathBuf)>,
    output_hashes: Vec<(&'static str, String)>,
    parallel: bool,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_labeled(path: &Path, task: Task) -> Result<RawCorpus> {
    prepare_labels(parse_conll(path, ColumnLayout::default())?, task)
}

/// Final metrics of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub dev_metric: f64,
    pub test_metric: Option<f64>,
    pub epochs_run: usize,
}

fn cmd_train(a: &TrainArgs) -> std::result::Result<TrainSummary, Failure> {
    let mut config = TrainConfig::default();
    let mut file_keys = Vec::new();
    if let Some(p) = &a.config {
        let text =
            fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        file_keys = config.apply_file_text(&text)?;
    }
    // Flag, then config file, then the environment, then the default.
    if let Some(s) = a.seed {
        config.seed = s;
    } else if !file_keys.iter().any(|k| k == "seed") {
        if let Some(s) = resolve_seed(None)? {
            config.seed = s;
        }
    }
    if let Some(t) = a.task {
        config.task = t.into();
    }
    if a.no_char_cnn {
        config.model.use_char_cnn = false;
    }
    if a.no_crf {
        config.model.use_crf = false;
    }
    if a.lowercase {
        config.lowercase = true;
    }
    config.validate()?;
    let exec = mode(a.sequential);

    for p in [
        Some(&a.train),
        Some(&a.dev),
        a.test.as_ref(),
        a.embeddings.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        if !p.is_file() {
            return Err(Error::Config(format!("input file not found: {}", p.display())).into());
        }
    }
    fs::create_dir_all(&a.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", a.out.display())))?;
    let ckpt_path = a.out.join("model.ckpt");
    let history_path = a.out.join("history.jsonl");
    let manifest_path = a.out.join("manifest.json");

    let mut inputs = vec![
        (
            "train",
            FileRecord {
                path: a.train.clone(),
                sha256: sha256_file(&a.train)?,
            },
        ),
        (
            "dev",
            FileRecord {
                path: a.dev.clone(),
                sha256: sha256_file(&a.dev)?,
            },
        ),
    ];
    for (name, p) in [
        ("test", &a.test),
        ("embeddings", &a.embeddings),
        ("config", &a.config),
    ] {
        if let Some(p) = p {
            inputs.push((
                name,
                FileRecord {
                    path: p.clone(),
                    sha256: sha256_file(p)?,
                },
            ));
        }
    }
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command: "train",
        config: config.clone(),
        config_file_keys: file_keys,
        seed: config.seed,
        inputs,
        outputs: vec![
            ("checkpoint", ckpt_path.clone()),
            ("history", history_path.clone()),
            ("manifest", manifest_path.clone()),
        ],
        output_hashes: Vec::new(),
        parallel: exec.is_parallel(),
    };
    write_json(&manifest_path, &manifest)?;

    let train = load_labeled(&a.train, config.task)?;
    let dev = load_labeled(&a.dev, config.task)?;
    let vocabs = build_vocabs(&train, config.min_count, config.lowercase, config.task)?;
    info!(
        "train {} sentences, dev {}; |V| = {}, |C| = {}, |T| = {}",
        train.len(),
        dev.len(),
        vocabs.words.len(),
        vocabs.chars.len(),
        vocabs.labels.len()
    );
    let train_enc = encode_corpus(&train, &vocabs, true)?;
    let dev_enc = encode_corpus(&dev, &vocabs, true).map_err(|e| match e {
        Error::Vocabulary(m) => Error::Vocabulary(format!("dev: {m} (label not seen in training)")),
        other => other,
    })?;
    let pretrained = match &a.embeddings {
        Some(p) => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
            let e = load_embeddings(p, &vocabs.words, config.model.word_dim, &mut rng)?;
            info!(
                "pretrained coverage {:.4} ({} words)",
                e.coverage, e.covered
            );
            Some(e.matrix)
        }
        None => None,
    };

    let mut history = BufWriter::new(File::create(&history_path)?);
    let mut hook = |rec: &EpochRecord, best: Option<&Checkpoint>| -> Result<()> {
        serde_json::to_writer(&mut history, rec)?;
        history.write_all(b"\n")?;
        history.flush()?;
        if let Some(c) = best {
            c.save(&ckpt_path)?;
        }
        Ok(())
    };
    let outcome = train_loop(
        &config, &vocabs, pretrained, &train_enc, &dev_enc, exec, &mut hook,
    )?;

    let test_metric = match &a.test {
        Some(p) => {
            let test = load_labeled(p, config.task)?;
            let tagger = outcome.best.clone().into_tagger()?;
            let pred = tagger.tag(&test.sentences, false, exec)?;
            let gold = test.labels();
            Some(match config.task {
                Task::Ner => entity_f1(&gold, &pred)?.overall.f1,
                Task::Pos => token_accuracy(&gold, &pred)?,
            })
        }
        None => None,
    };
    // Re-score the saved checkpoint so the printed dev number is the one it reproduces.
    let best = Checkpoint::load(&ckpt_path)?;
    let tagger = best.clone().into_tagger()?;
    let dev_score = dev_metric(
        &tagger.network,
        &tagger.params,
        &tagger.vocabs,
        config.task,
        &dev_enc,
        exec,
    )?;

    manifest.output_hashes = vec![
        ("checkpoint", sha256_file(&ckpt_path)?),
        ("history", sha256_file(&history_path)?),
    ];
    write_json(&manifest_path, &manifest)?;

    let summary = TrainSummary {
        best_epoch: best.epoch,
        dev_metric: dev_score,
        test_metric,
        epochs_run: outcome.history.len(),
    };
    let metric = match config.task {
        Task::Ner => "f1",
        Task::Pos => "accuracy",
    };
    out!(
        "best_epoch={} epochs_run={} dev_{metric}={:.6}",
        summary.best_epoch,
        summary.epochs_run,
        summary.dev_metric
    );
    if let Some(t) = summary.test_metric {
        out!(" test_{metric}={t:.6}");
    }
    outln!();
    if outcome.skipped_batches > 0 {
        outln!("skipped_batches={}", outcome.skipped_batches);
    }
    Ok(summary)
}

fn cmd_tag(a: &TagArgs) -> std::result::Result<(), Failure> {
    let tagger = Checkpoint::load(&a.model)?.into_tagger()?;
    let corpus = parse_tokens(&a.input)?;
    if (a.constrained || a.scheme == SchemeArg::Bio) && !tagger.vocabs.labels.is_chunk_scheme() {
        return Err(Error::Config(
            "--constrained and --scheme bio need a model with chunk labels".into(),
        )
        .into());
    }
    let mut labels = tagger.tag(&corpus.sentences, a.constrained, mode(a.sequential))?;
    if a.scheme == SchemeArg::Bio {
        labels = labels
            .iter()
            .map(|l| bioes_to_bio(l))
            .collect::<Result<_>>()?;
    }
    let out: Vec<Sentence> = corpus
        .sentences
        .into_iter()
        .zip(labels)
        .map(|(s, labels)| Sentence {
            tokens: s.tokens,
            labels,
        })
        .collect();
    let mut w = BufWriter::new(File::create(&a.output)?);
    write_conll(&mut w, &out)?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> std::result::Result<(), Failure> {
    let (gold, pred) = match (&a.combined, &a.gold, &a.pred) {
        (Some(c), _, _) => {
            let x = read_interchange(&fs::read_to_string(c)?, c)?;
            (x.gold, x.pred)
        }
        (None, Some(g), Some(p)) => {
            let g = parse_conll(g, ColumnLayout::default())?;
            let p = parse_conll(p, ColumnLayout::default())?;
            for (i, (gs, ps)) in g.sentences.iter().zip(&p.sentences).enumerate() {
                if gs.tokens.len() == ps.tokens.len() && gs.tokens != ps.tokens {
                    let j = gs
                        .tokens
                        .iter()
                        .zip(&ps.tokens)
                        .position(|(x, y)| x != y)
                        .unwrap_or(0);
                    return Err(Error::Alignment {
                        sentence: i,
                        msg: format!(
                            "token {j} differs: {:?} vs {:?}",
                            gs.tokens[j], ps.tokens[j]
                        ),
                    }
                    .into());
                }
            }
            (g.labels(), p.labels())
        }
        _ => return Err(Error::Config("give --gold and --pred, or --combined".into()).into()),
    };
    match Task::from(a.task) {
        Task::Ner => {
            let report = entity_f1(&gold, &pred)?;
            if a.json {
                outln!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(Error::from)?
                );
            } else {
                out!("{report}");
            }
        }
        Task::Pos => {
            let acc = token_accuracy(&gold, &pred)?;
            let tokens: usize = gold.iter().map(Vec::len).sum();
            if a.json {
                outln!("{{\"tokens\": {tokens}, \"token_accuracy\": {acc}}}");
            } else {
                outln!("processed {tokens} tokens; accuracy: {:6.2}%", 100.0 * acc);
            }
        }
    }
    Ok(())
}

/// Rewrite the last column of every token line, leaving all other bytes
/// (other columns, spacing, line endings, `-DOCSTART-` lines) untouched.
pub fn convert_text(text: &str, from: SchemeArg, to: SchemeArg) -> Result<String> {
    struct Line<'a> {
        text: &'a str,
        /// Byte range of the last field, for token lines.
        label: Option<(usize, usize)>,
    }
    let lines: Vec<Line> = text
        .split_inclusive('\n')
        .map(|l| {
            let body = l.trim_end_matches(['\n', '\r']);
            let mut fields = body.split_ascii_whitespace();
            let first = fields.next();
            let label = match first {
                None | Some("-DOCSTART-") => None,
                Some(_) => {
                    let end = body.trim_end().len();
                    let start = body[..end]
                        .rfind(|c: char| c.is_ascii_whitespace())
                        .map_or(0, |i| i + 1);
                    Some((start, end))
                }
            };
            Line { text: l, label }
        })
        .collect();

    // Validate tag by tag so errors carry the line number.
    for (i, l) in lines.iter().enumerate() {
        if let Some((s, e)) = l.label {
            let tag_text = &l.text[s..e];
            let tag = Tag::parse(tag_text).map_err(|_| Error::Scheme {
                tag: tag_text.to_string(),
                line: Some(i + 1),
            })?;
            if from == SchemeArg::Bio && matches!(tag.role(), Some(Role::End | Role::Single)) {
                return Err(Error::Scheme {
                    tag: tag_text.to_string(),
                    line: Some(i + 1),
                });
            }
        }
    }

    let mut out = String::with_capacity(text.len() + text.len() / 8);
    let mut i = 0;
    while i < lines.len() {
        if lines[i].label.is_none() {
            out.push_str(lines[i].text);
            i += 1;
            continue;
        }
        let start = i;
        while i < lines.len() && lines[i].label.is_some() {
            i += 1;
        }
        let block = &lines[start..i];
        let tags: Vec<String> = block
            .iter()
            .map(|l| {
                let (s, e) = l.label.expect("token line");
                l.text[s..e].to_string()
            })
            .collect();
        let converted = match (from, to) {
            (SchemeArg::Bio, SchemeArg::Bioes) => bio_to_bioes(&tags)?,
            (SchemeArg::Bioes, SchemeArg::Bio) => bioes_to_bio(&tags)?,
            _ => tags,
        };
        for (l, t) in block.iter().zip(&converted) {
            let (s, e) = l.label.expect("token line");
            out.push_str(&l.text[..s]);
            out.push_str(t);
            out.push_str(&l.text[e..]);
        }
    }
    Ok(out)
}

fn cmd_convert(a: &ConvertArgs) -> std::result::Result<(), Failure> {
    let text = fs::read_to_string(&a.input)?;
    let out = convert_text(&text, a.from, a.to)?;
    match &a.output {
        Some(p) => fs::write(p, out)?,
        None => match io::stdout().write_all(out.as_bytes()) {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => {}
            r => r?,
        },
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> std::result::Result<(), Failure> {
    let seed = resolve_seed(a.seed)?.unwrap_or(0);
    let size = match a.sizes {
        SizeArg::Tiny => ModelSize::Tiny,
        SizeArg::Small => ModelSize::Small,
    };
    let fault = a
        .inject_fault
        .as_deref()
        .map(str::parse::<Fault>)
        .transpose()
        .map_err(|_| Error::Config("unknown fault".into()))?;
    let reports = check_model(size, seed, fault)?;
    let mut worst: Option<(&str, f64)> = None;
    for r in &reports {
        let ok = r.max_rel_error <= TOLERANCE;
        outln!(
            "{:<20} max_rel_error={:.3e} coords={:<4} {}",
            r.name,
            r.max_rel_error,
            r.coords_checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok && worst.is_none_or(|(_, w)| r.max_rel_error > w) {
            worst = Some((&r.name, r.max_rel_error));
        }
    }
    match worst {
        None => Ok(()),
        Some((name, err)) => Err(Failure::Check(CheckFailed(format!(
            "gradcheck group={name} max_rel_error={err:.3e} exceeds {TOLERANCE:e}"
        )))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn convert_preserves_other_bytes() {
        let text = "-DOCSTART- -X- O O\r\n\r\nEU  NNP\tB-ORG\r\nrejects VBZ O\r\n\r\nPeter B-PER\nBlackburn I-PER\n";
        let bioes = convert_text(text, SchemeArg::Bio, SchemeArg::Bioes).unwrap();
        assert_eq!(
            bioes,
            "-DOCSTART- -X- O O\r\n\r\nEU  NNP\tS-ORG\r\nrejects VBZ O\r\n\r\nPeter B-PER\nBlackburn E-PER\n"
        );
        assert_eq!(
            convert_text(&bioes, SchemeArg::Bioes, SchemeArg::Bio).unwrap(),
            text
        );
    }

    #[test]
    fn convert_reports_line() {
        match convert_text("a O\nb X-PER\n", SchemeArg::Bio, SchemeArg::Bioes) {
            Err(Error::Scheme { line, tag }) => {
                assert_eq!((line, tag.as_str()), (Some(2), "X-PER"))
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(convert_text("a S-PER\n", SchemeArg::Bio, SchemeArg::Bioes).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 1);
    }
}
